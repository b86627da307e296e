"""Planted-signal synthetic corpus, CSV ingestion, encoding and splits."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .child import GraphStructure, TensorDataset
from .space import SearchSpace
from .spectral import (ATTRIBUTES, K_MIN, AttributeTimeSeries, ClipRejected, LandmarkLayout, encode_spectral,
                       ibug68, landmark_node_features, layout_adjacency, preprocess, to_heatmap)

LABEL_MAX = 24.0


class IngestError(ValueError):
    def __init__(self, issues: list[str]):
        super().__init__("; ".join(issues))
        self.issues = issues


def channel_names(attribute: str, channels: int) -> list[str]:
    if attribute == "aus":
        return [f"AU{i + 1:02d}_r" for i in range(channels)]
    if attribute == "gaze":
        return [f"gaze_{i // 2}_{'xy'[i % 2]}" for i in range(channels)]
    if attribute == "pose":
        return [f"pose_R{'xyz'[i % 3]}{'' if i < 3 else i // 3}" for i in range(channels)]
    if attribute == "landmarks":
        return [f"{'xyz'[i % 3]}_{i // 3}" for i in range(channels)]
    return [f"c{i}" for i in range(channels)]


def landmark_channel_names(arity: int, nodes: int) -> list[str]:
    return [f"{'xyz'[d]}_{v}" for v in range(nodes) for d in range(arity)]


@dataclass
class SyntheticSpec:
    n_clips: int = 154
    length_range: tuple[int, int] = (200, 1200)
    au_channels: int = 20
    gaze_channels: int = 4
    pose_channels: int = 3
    landmark_arity: int = 2
    noise: float = 0.5
    au_band: int = 3
    landmark_band: int = 5
    au_amplitude: float = 2.0
    landmark_amplitude: float = 2.0
    planted_aus: tuple[int, ...] = (0, 1)
    planted_pose: int = 0
    planted_region: str = "mouth"
    failure_rate: float = 0.02
    shuffle_labels: bool = False
    seed: int = 0

    def __post_init__(self):
        self.length_range = tuple(self.length_range)
        self.planted_aus = tuple(self.planted_aus)
        if self.n_clips < 1 or self.length_range[0] < K_MIN or self.length_range[1] < self.length_range[0]:
            raise ValueError(f"invalid synthetic spec {self}")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")

    def channels(self, attribute: str) -> int:
        return {"aus": self.au_channels, "gaze": self.gaze_channels, "pose": self.pose_channels,
                "landmarks": 68 * self.landmark_arity}[attribute]


@dataclass
class ClipRecord:
    clip_id: str
    attributes: dict[str, AttributeTimeSeries]
    label: float

    def __post_init__(self):
        missing = [a for a in ATTRIBUTES if a not in self.attributes]
        if missing:
            raise ValueError(f"clip {self.clip_id} is missing attributes {missing}")
        if not np.isfinite(self.label):
            raise ValueError(f"clip {self.clip_id} has a non-finite label")


def _template(layout: LandmarkLayout) -> np.ndarray:
    rng = T.make_rng(20160, 68)
    return rng.uniform(20.0, 80.0, size=(layout.n_nodes, layout.arity))


def generate(spec: SyntheticSpec, layout: LandmarkLayout | None = None) -> list[ClipRecord]:
    layout = layout or ibug68(spec.landmark_arity)
    rng = T.make_rng(spec.seed, 7)
    labels = rng.uniform(0.0, LABEL_MAX, size=spec.n_clips)
    cue_labels = rng.permutation(labels) if spec.shuffle_labels else labels
    template = _template(layout)
    region = np.array(layout.regions[spec.planted_region])
    records = []
    for n in range(spec.n_clips):
        crng = T.make_rng(spec.seed, 11, n)
        L = int(crng.integers(spec.length_range[0], spec.length_range[1] + 1))
        t = np.arange(L)
        strength = cue_labels[n] / LABEL_MAX
        success = crng.random(L) >= spec.failure_rate
        confidence = np.where(success, crng.uniform(0.8, 1.0, L), crng.uniform(0.0, 0.3, L))

        au = crng.normal(0.0, spec.noise, (L, spec.au_channels)) + crng.uniform(0.0, 1.0, spec.au_channels)
        au_tone = spec.au_amplitude * strength * np.cos(2 * np.pi * spec.au_band * t / L + crng.uniform(0, 2 * np.pi))
        for c in spec.planted_aus:
            au[:, c] += au_tone
        gaze = crng.normal(0.0, spec.noise, (L, spec.gaze_channels))
        pose = crng.normal(0.0, spec.noise, (L, spec.pose_channels))
        pose[:, spec.planted_pose] += au_tone

        lm = template[None] + crng.normal(0.0, 1.0, (1,) + template.shape)
        lm = np.repeat(lm, L, axis=0) + crng.normal(0.0, spec.noise, (L,) + template.shape)
        phase = crng.uniform(0, 2 * np.pi)
        lm[:, region, 1] += (spec.landmark_amplitude * strength
                             * np.cos(2 * np.pi * spec.landmark_band * t / L + phase))[:, None]
        attrs = {
            "aus": au, "gaze": gaze, "pose": pose, "landmarks": lm.reshape(L, -1),
        }
        records.append(ClipRecord(
            f"clip{n:04d}",
            {k: AttributeTimeSeries(k, v, confidence, success) for k, v in attrs.items()},
            float(labels[n]),
        ))
    return records


# ------------------------------------------------------------------ CSV contract

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def series_to_csv(series: AttributeTimeSeries, fps: float = 30.0) -> str:
    names = channel_names(series.attribute, series.channels)
    if series.attribute == "landmarks":
        arity = 3 if series.channels % 3 == 0 and series.channels // 3 == 68 else 2
        names = landmark_channel_names(arity, series.channels // arity)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "timestamp", "confidence", "success"] + names)
    for i in range(series.length):
        w.writerow([i + 1, _fmt(i / fps), _fmt(series.confidence[i]), int(series.success[i])]
                   + [_fmt(v) for v in series.frames[i]])
    return buf.getvalue()


def write_dataset(records: Sequence[ClipRecord], directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        for attr, series in rec.attributes.items():
            (out / f"{rec.clip_id}_{attr}.csv").write_text(series_to_csv(series), encoding="utf-8")
    with open(out / "labels.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "score"])
        for rec in records:
            w.writerow([rec.clip_id, _fmt(rec.label)])
    return out


def read_series(path, attribute: str) -> AttributeTimeSeries:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:4] != ["frame", "timestamp", "confidence", "success"] or len(header) < 5:
        raise ValueError(f"{path}: header must start with frame,timestamp,confidence,success and list channels")
    body = rows[1:]
    width = len(header)
    for n, row in enumerate(body, start=2):
        if len(row) != width:
            raise ValueError(f"{path}: line {n} has {len(row)} fields, expected {width}")
    try:
        arr = np.array([[float(v) for v in row] for row in body], dtype=np.float64).reshape(len(body), width)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric value ({exc})") from None
    return AttributeTimeSeries(attribute, arr[:, 4:], arr[:, 2], arr[:, 3] > 0.5)


@dataclass
class IngestResult:
    records: list[ClipRecord]
    rejections: dict[str, str] = field(default_factory=dict)


def ingest(directory, conf_threshold: float = 0.0, k_min: int = K_MIN) -> IngestResult:
    root = Path(directory)
    issues: list[str] = []
    files = sorted(p for p in root.glob("*.csv") if p.name != "labels.csv")
    if not files and not (root / "labels.csv").exists():
        return IngestResult([], {})
    labels: dict[str, float] = {}
    label_path = root / "labels.csv"
    if label_path.exists():
        with open(label_path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["clip_id", "score"]:
                issues.append("labels.csv: header must be clip_id,score")
            else:
                for n, row in enumerate(reader, start=2):
                    if len(row) != 2:
                        issues.append(f"labels.csv line {n}: expected 2 fields")
                        continue
                    cid = row[0].strip()
                    if cid in labels:
                        issues.append(f"labels.csv line {n}: duplicate clip_id {cid}")
                        continue
                    try:
                        labels[cid] = float(row[1])
                    except ValueError:
                        issues.append(f"labels.csv line {n}: score {row[1]!r} is not a number")
    elif files:
        issues.append("labels.csv is missing")

    by_clip: dict[str, dict[str, AttributeTimeSeries]] = {}
    for path in files:
        stem = path.stem
        cid, _, attr = stem.rpartition("_")
        if attr not in ATTRIBUTES or not cid:
            issues.append(f"{path.name}: file name must be <clip_id>_<attribute>.csv")
            continue
        try:
            by_clip.setdefault(cid, {})[attr] = read_series(path, attr)
        except ValueError as exc:
            issues.append(str(exc))

    records, rejections = [], {}
    for cid in sorted(by_clip):
        attrs = by_clip[cid]
        missing = [a for a in ATTRIBUTES if a not in attrs]
        if missing:
            issues.append(f"clip {cid}: missing attribute files {missing}")
            continue
        if cid not in labels:
            issues.append(f"clip {cid}: no label in labels.csv")
            continue
        try:
            for series in attrs.values():
                preprocess(series, conf_threshold, k_min)
        except ClipRejected as exc:
            rejections[cid] = str(exc)
            continue
        records.append(ClipRecord(cid, attrs, labels[cid]))
    if issues:
        raise IngestError(issues)
    return IngestResult(records, rejections)


# ------------------------------------------------------------------ encoding

@dataclass
class EncodedDataset:
    """Spectra per attribute: amplitude/phase arrays of shape (n, C, K)."""

    clip_ids: list[str]
    y: np.ndarray
    amplitude: dict[str, np.ndarray]
    phase: dict[str, np.ndarray]
    layout: LandmarkLayout = field(default_factory=ibug68)

    def __len__(self):
        return len(self.clip_ids)

    @property
    def K(self) -> int:
        return next(iter(self.amplitude.values())).shape[2]

    def heatmaps(self, attribute: str) -> np.ndarray:
        return np.concatenate([self.amplitude[attribute], self.phase[attribute]], axis=1)

    def node_features(self, attribute: str = "landmarks") -> np.ndarray:
        from .spectral import SpectralRepresentation
        return np.stack([
            landmark_node_features(SpectralRepresentation(a, p), self.layout)
            for a, p in zip(self.amplitude[attribute], self.phase[attribute])
        ])

    def save(self, path):
        blob = {"__labels__": self.y}
        for i, cid in enumerate(self.clip_ids):
            for attr in self.amplitude:
                blob[f"{cid}/{attr}/amplitude"] = self.amplitude[attr][i]
                blob[f"{cid}/{attr}/phase"] = self.phase[attr][i]
        T.save_checkpoint(path, blob)

    @classmethod
    def load(cls, path, layout: LandmarkLayout | None = None) -> "EncodedDataset":
        blob = T.load_checkpoint(path)
        y = blob.pop("__labels__")
        clip_ids: list[str] = []
        attrs: list[str] = []
        for name in blob:
            cid, attr, _ = name.split("/")
            if cid not in clip_ids:
                clip_ids.append(cid)
            if attr not in attrs:
                attrs.append(attr)
        amp = {a: np.stack([blob[f"{c}/{a}/amplitude"] for c in clip_ids]) for a in attrs}
        pha = {a: np.stack([blob[f"{c}/{a}/phase"] for c in clip_ids]) for a in attrs}
        return cls(clip_ids, y, amp, pha, layout or ibug68())


def encode_records(records: Sequence[ClipRecord], K: int = 120, conf_threshold: float = 0.0,
                   layout: LandmarkLayout | None = None, attributes: Sequence[str] = ATTRIBUTES) -> EncodedDataset:
    layout = layout or ibug68()
    amp: dict[str, list] = {a: [] for a in attributes}
    pha: dict[str, list] = {a: [] for a in attributes}
    for rec in records:
        for a in attributes:
            rep = encode_spectral(preprocess(rec.attributes[a], conf_threshold), K)
            amp[a].append(rep.amplitude)
            pha[a].append(rep.phase)
    return EncodedDataset([r.clip_id for r in records], np.array([r.label for r in records], dtype=np.float64),
                          {a: np.stack(v) for a, v in amp.items()}, {a: np.stack(v) for a, v in pha.items()},
                          layout)


def split_indices(clip_ids: Sequence[str], seed: int, fractions=(0.70, 0.15)) -> dict[str, np.ndarray]:
    """Seeded 70/15/15 split by clip id; the assignment depends only on the id set."""
    ids = sorted(clip_ids)
    perm = T.make_rng(seed, 3).permutation(len(ids))
    n_train = int(fractions[0] * len(ids))
    n_val = int(fractions[1] * len(ids))
    pos = {cid: i for i, cid in enumerate(clip_ids)}
    order = [pos[ids[i]] for i in perm]
    return {
        "train": np.array(sorted(order[:n_train]), dtype=np.intp),
        "val": np.array(sorted(order[n_train:n_train + n_val]), dtype=np.intp),
        "test": np.array(sorted(order[n_train + n_val:]), dtype=np.intp),
    }


@dataclass
class PreparedData:
    train: TensorDataset
    val: TensorDataset
    test: TensorDataset
    input_shapes: dict[str, tuple[int, ...]]
    graphs: dict[str, GraphStructure]

    def full_train(self) -> TensorDataset:
        return self.train.merge(self.val)


def stream_array(enc: EncodedDataset, space: SearchSpace) -> np.ndarray:
    attr = space.attribute or space.name
    if attr not in enc.amplitude:
        raise KeyError(f"encoded dataset has no attribute {attr!r}")
    return enc.node_features(attr) if space.kind == "gnn" else enc.heatmaps(attr)


def prepare(enc: EncodedDataset, streams: Sequence[SearchSpace], seed: int = 0) -> PreparedData:
    """Build per-stream model inputs standardised with training-split statistics.

    Heatmap rows are scaled per row (pooled over bins), node features per column
    (pooled over nodes), so a loud band or region stays loud after scaling.
    """
    split = split_indices(enc.clip_ids, seed)
    inputs, graphs, shapes = {}, {}, {}
    for s in streams:
        arr = stream_array(enc, s)
        axes = (0, 1) if s.kind == "gnn" else (0, 2)
        mu = arr[split["train"]].mean(axis=axes, keepdims=True)
        sd = arr[split["train"]].std(axis=axes, keepdims=True)
        sd = np.where(sd > 1e-12, sd, 1.0)
        inputs[s.name] = (arr - mu) / sd
        shapes[s.name] = arr.shape[1:]
        if s.kind == "gnn":
            graphs[s.name] = GraphStructure(layout_adjacency(enc.layout))
    full = TensorDataset(inputs, enc.y, list(enc.clip_ids))
    return PreparedData(full.subset(split["train"]), full.subset(split["val"]), full.subset(split["test"]),
                        shapes, graphs)


def spec_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d["length_range"] = list(spec.length_range)
    d["planted_aus"] = list(spec.planted_aus)
    return d
