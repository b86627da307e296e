"""Per-clip facial attribute series: filtering, spectral encoding, landmark graphs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ATTRIBUTES = ("aus", "gaze", "pose", "landmarks")
K_MIN = 16
PHASE_FLOOR = 1e-9


class ClipRejected(ValueError):
    pass


class ResolutionError(ValueError):
    pass


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeTimeSeries:
    attribute: str
    frames: np.ndarray  # (L, C)
    confidence: np.ndarray
    success: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError(f"{self.attribute}: frames must be 2-D (L, C), got shape {frames.shape}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "confidence", np.asarray(self.confidence, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "success", np.asarray(self.success, dtype=bool).reshape(-1))
        if not (len(self.confidence) == len(self.success) == frames.shape[0]):
            raise ValueError(f"{self.attribute}: frame, confidence and success lengths differ")

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @classmethod
    def clean(cls, attribute: str, frames) -> "AttributeTimeSeries":
        frames = np.asarray(frames, dtype=np.float64)
        n = frames.shape[0]
        return cls(attribute, frames, np.ones(n), np.ones(n, dtype=bool))


@dataclass(frozen=True)
class SpectralRepresentation:
    amplitude: np.ndarray  # (C, K)
    phase: np.ndarray  # (C, K)

    @property
    def K(self) -> int:
        return self.amplitude.shape[1]

    @property
    def channels(self) -> int:
        return self.amplitude.shape[0]


def preprocess(raw: AttributeTimeSeries, conf_threshold: float = 0.0, k_min: int = K_MIN) -> AttributeTimeSeries:
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"confidence threshold must lie in [0, 1], got {conf_threshold}")
    keep = raw.success & (raw.confidence >= conf_threshold)
    frames = raw.frames[keep]
    if frames.shape[0] < k_min:
        raise ClipRejected(
            f"{raw.attribute}: {frames.shape[0]} usable frames after filtering, need at least {k_min}")
    if raw.attribute != "landmarks":
        frames = frames - np.median(frames, axis=0, keepdims=True)
    return AttributeTimeSeries(raw.attribute, frames, raw.confidence[keep], raw.success[keep])


def resample(frames: np.ndarray, n: int) -> np.ndarray:
    """Periodic linear interpolation of each column onto ``n`` evenly spaced instants.

    A tone completing ``j`` cycles over the clip completes exactly ``j`` cycles
    over the resampled grid, so it lands in bin ``j`` whatever the clip length.
    """
    L = frames.shape[0]
    src = np.arange(L, dtype=np.float64)
    dst = np.arange(n, dtype=np.float64) * (L / n)
    return np.stack([np.interp(dst, src, frames[:, c], period=L) for c in range(frames.shape[1])], axis=1)


def encode_spectral(series: AttributeTimeSeries, K: int = 120) -> SpectralRepresentation:
    if K < 2 or series.length < 2:
        raise ResolutionError(f"cannot resolve K={K} components from L={series.length} frames")
    n = 2 * (K - 1)
    aligned = resample(series.frames, n)
    spec = np.fft.rfft(aligned, axis=0).T / n  # (C, K)
    amplitude = np.abs(spec)
    phase = np.angle(spec)
    phase[phase <= -np.pi] = np.pi
    phase[amplitude < PHASE_FLOOR] = 0.0
    return SpectralRepresentation(amplitude, phase)


def to_heatmap(rep: SpectralRepresentation) -> np.ndarray:
    return np.concatenate([rep.amplitude, rep.phase], axis=0)


def split_heatmap(heatmap: np.ndarray) -> SpectralRepresentation:
    c = heatmap.shape[0] // 2
    return SpectralRepresentation(heatmap[:c].copy(), heatmap[c:].copy())


@dataclass(frozen=True)
class LandmarkLayout:
    n_nodes: int
    regions: dict[str, tuple[int, ...]]
    hub: int
    arity: int = 2

    def __post_init__(self):
        seen = sorted(i for r in self.regions.values() for i in r)
        if seen != list(range(self.n_nodes)):
            raise LayoutError("regions must partition the landmark indices exactly")
        if not 0 <= self.hub < self.n_nodes:
            raise LayoutError(f"hub index {self.hub} outside [0, {self.n_nodes})")
        if self.arity not in (2, 3):
            raise LayoutError(f"coordinate arity must be 2 or 3, got {self.arity}")

    def region_labels(self) -> list[str]:
        labels = [""] * self.n_nodes
        for name, idx in self.regions.items():
            for i in idx:
                labels[i] = name
        return labels

    def permuted(self, perm) -> "LandmarkLayout":
        """Layout after relabelling node ``i`` as ``perm[i]``."""
        perm = list(perm)
        return LandmarkLayout(
            self.n_nodes,
            {k: tuple(sorted(perm[i] for i in v)) for k, v in self.regions.items()},
            perm[self.hub],
            self.arity,
        )

    @classmethod
    def from_file(cls, path) -> "LandmarkLayout":
        spec = json.loads(Path(path).read_text())
        return cls(int(spec["n_nodes"]), {k: tuple(v) for k, v in spec["regions"].items()},
                   int(spec["hub"]), int(spec.get("arity", 2)))


def ibug68(arity: int = 2) -> LandmarkLayout:
    r = lambda a, b: tuple(range(a, b + 1))  # noqa: E731
    return LandmarkLayout(68, {
        "jaw": r(0, 16), "brow_right": r(17, 21), "brow_left": r(22, 26), "nose": r(27, 35),
        "eye_right": r(36, 41), "eye_left": r(42, 47), "mouth": r(48, 67),
    }, hub=27, arity=arity)


def layout_adjacency(layout: LandmarkLayout) -> np.ndarray:
    adj = np.zeros((layout.n_nodes, layout.n_nodes), dtype=bool)
    for idx in layout.regions.values():
        ix = np.array(idx)
        adj[np.ix_(ix, ix)] = True
    adj[layout.hub, :] = True
    adj[:, layout.hub] = True
    np.fill_diagonal(adj, False)
    return adj


@dataclass(frozen=True)
class LandmarkGraph:
    node_features: np.ndarray  # (V, 2*D*K)
    adjacency: np.ndarray
    region_labels: list[str] = field(default_factory=list)

    def is_connected(self) -> bool:
        n = self.adjacency.shape[0]
        seen = {0}
        frontier = [0]
        while frontier:
            v = frontier.pop()
            for u in np.flatnonzero(self.adjacency[v]):
                if u not in seen:
                    seen.add(int(u))
                    frontier.append(int(u))
        return len(seen) == n


def landmark_node_features(rep: SpectralRepresentation, layout: LandmarkLayout) -> np.ndarray:
    D = layout.arity
    if rep.channels % D or rep.channels // D != layout.n_nodes:
        raise LayoutError(
            f"{rep.channels} landmark channels do not split into {layout.n_nodes} nodes of arity {D}")
    V, K = layout.n_nodes, rep.K
    amp = rep.amplitude.reshape(V, D * K)
    pha = rep.phase.reshape(V, D * K)
    return np.concatenate([amp, pha], axis=1)


def build_landmark_graph(rep: SpectralRepresentation, layout: LandmarkLayout | None = None) -> LandmarkGraph:
    layout = layout or ibug68()
    return LandmarkGraph(landmark_node_features(rep, layout), layout_adjacency(layout), layout.region_labels())
