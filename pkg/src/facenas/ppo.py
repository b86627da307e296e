"""Clipped policy objective, motion-average rewards and controller updates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .controller import ControllerPolicy, SampleTrace, sample, sample_fusion, score_joint
from .space import Architecture
from .tensor import ContractError, Tensor


class FactorizationError(ValueError):
    pass


@dataclass
class PPOConfig:
    clip: float = 0.2
    samples: int = 8
    lr: float = 3e-4
    baseline_decay: float = 0.95
    use_advantage: bool = True
    entropy_weight: float = 1e-2
    motion_average: bool = True
    epochs: int = 1

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError(f"clip ratio must lie in (0, 1), got {self.clip}")
        if self.samples < 1 or self.epochs < 1:
            raise ValueError("samples and epochs must be at least 1")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline decay must lie in [0, 1)")


def clip_bound(eps: float, reward: float) -> float:
    return (1.0 + eps) * reward if reward >= 0 else (1.0 - eps) * reward


def ppo_objective(log_prob_new: float, log_prob_old: float, reward: float, eps: float) -> float:
    ratio = math.exp(log_prob_new - log_prob_old)
    return min(ratio * reward, clip_bound(eps, reward))


def ppo_objective_tensor(log_prob_new: Tensor, log_prob_old: float, reward: float, eps: float) -> Tensor:
    ratio = T.exp(T.add(log_prob_new, -log_prob_old))
    return T.minimum(T.mul(ratio, reward), clip_bound(eps, reward))


def joint_log_prob(stream_traces: Sequence[SampleTrace] | dict, fusion_trace: SampleTrace | None) -> float:
    traces = list(stream_traces.values()) if isinstance(stream_traces, dict) else list(stream_traces)
    total = sum(t.total_log_prob for t in traces)
    if fusion_trace is None:
        return total
    expected = {t.space: t.tokens for t in traces}
    cond = dict(fusion_trace.condition)
    if set(cond) != set(expected) or any(expected[k] != v for k, v in cond.items()):
        raise FactorizationError("fusion trace was not conditioned on these stream traces")
    return total + fusion_trace.total_log_prob


# ------------------------------------------------------------------ motion average

@dataclass
class _Stat:
    count: int = 0
    total: Fraction = Fraction(0)
    total_sq: Fraction = Fraction(0)

    @property
    def mean(self) -> float:
        return float(self.total / self.count)

    @property
    def variance(self) -> float:
        if self.count < 2:
            return 0.0
        m = self.total / self.count
        return float((self.total_sq - self.count * m * m) / (self.count - 1))


class MotionAverageTracker:
    """Running mean of validation errors per architecture key.

    Sums are held exactly (rational arithmetic), so the mean is the correctly
    rounded arithmetic mean and does not depend on insertion order.
    """

    def __init__(self, log_path: str | Path | None = None):
        self._stats: dict[str, _Stat] = {}
        self.log_path = Path(log_path) if log_path else None
        if self.log_path and self.log_path.exists():
            self.replay(self.log_path)

    def replay(self, path):
        for line in Path(path).read_text().splitlines():
            if line.strip():
                key, value = line.rsplit("\t", 1)
                self._add(key, float.fromhex(value))

    def _add(self, key: str, value: float):
        st = self._stats.setdefault(key, _Stat())
        v = Fraction(value)
        st.count += 1
        st.total += v
        st.total_sq += v * v

    def update(self, key: str, value: float) -> float:
        value = float(value)
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"validation error must be finite and non-negative, got {value}")
        self._add(key, value)
        if self.log_path:
            with open(self.log_path, "a") as fh:
                fh.write(f"{key}\t{value.hex()}\n")
        return self._stats[key].mean

    def __contains__(self, key: str) -> bool:
        return key in self._stats

    def __len__(self) -> int:
        return len(self._stats)

    def count(self, key: str) -> int:
        return self._stats[key].count if key in self._stats else 0

    def mean(self, key: str) -> float:
        return self._stats[key].mean

    def variance(self, key: str) -> float:
        return self._stats[key].variance

    def total_observations(self) -> int:
        return sum(s.count for s in self._stats.values())

    def items(self):
        return ((k, s.count, s.mean) for k, s in self._stats.items())


def reward(tracker: MotionAverageTracker, key: str, val_error: float) -> float:
    return -tracker.update(key, val_error)


# ------------------------------------------------------------------ joint controller

@dataclass
class JointSample:
    arch: Architecture
    stream_traces: dict[str, SampleTrace]
    fusion_trace: SampleTrace | None
    log_prob_old: float

    @property
    def key(self) -> str:
        return self.arch.key


@dataclass
class UpdateBatch:
    samples: list[JointSample]
    rewards: list[float]
    loss: float | None = None


@dataclass
class UpdateMetrics:
    mean_reward: float
    objective: float
    clip_fraction: float
    entropy: float
    baseline: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class JointController:
    """Stream controllers plus an optional fusion controller, updated together."""

    def __init__(self, stream_policies: dict[str, ControllerPolicy], fusion_policy: ControllerPolicy | None,
                 cfg: PPOConfig):
        self.streams = dict(stream_policies)
        self.fusion = fusion_policy
        self.cfg = cfg
        self.optimizer = T.Adam(self.parameters(), lr=cfg.lr)
        self.baseline: float | None = None

    def parameters(self) -> list[Tensor]:
        ps = [p for pol in self.streams.values() for p in pol.parameters()]
        if self.fusion is not None:
            ps += self.fusion.parameters()
        return ps

    def sample(self, rng: np.random.Generator) -> JointSample:
        traces = {name: sample(pol, rng) for name, pol in self.streams.items()}
        fusion = sample_fusion(self.fusion, traces, rng) if self.fusion is not None else None
        arch = Architecture(tuple((n, t.tokens) for n, t in traces.items()), fusion.tokens if fusion else ())
        return JointSample(arch, traces, fusion, joint_log_prob(traces, fusion))

    def score(self, arch: Architecture):
        return score_joint(self.streams, self.fusion, arch.stream_tokens, arch.fusion)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name, pol in self.streams.items():
            out.update({f"stream/{name}/{k}": v for k, v in pol.state().items()})
        if self.fusion is not None:
            out.update({f"fusion/{k}": v for k, v in self.fusion.state().items()})
        opt = self.optimizer.state_dict()
        out["__adam_t__"] = np.array([float(opt["t"])])
        for i, (m, v) in enumerate(zip(opt["m"], opt["v"])):
            out[f"__adam_m__/{i}"] = m
            out[f"__adam_v__/{i}"] = v
        out["__baseline__"] = np.array([np.nan if self.baseline is None else self.baseline])
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        for name, pol in self.streams.items():
            pol.load_state({k: state[f"stream/{name}/{k}"] for k in pol.params})
        if self.fusion is not None:
            self.fusion.load_state({k: state[f"fusion/{k}"] for k in self.fusion.params})
        n = len(self.optimizer.params)
        self.optimizer.load_state_dict({"t": int(state["__adam_t__"][0]),
                                        "m": [state[f"__adam_m__/{i}"] for i in range(n)],
                                        "v": [state[f"__adam_v__/{i}"] for i in range(n)]})
        b = float(state["__baseline__"][0])
        self.baseline = None if math.isnan(b) else b


def update_controllers(controller: JointController, batch: UpdateBatch) -> UpdateMetrics:
    """One ascent step on the sample average of the clipped objective (plus entropy bonus)."""
    if not batch.samples:
        raise ContractError("cannot update controllers from an empty batch")
    if len(batch.samples) != len(batch.rewards):
        raise ContractError("one reward per sample is required")
    cfg = controller.cfg
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    if cfg.use_advantage:
        if controller.baseline is None:
            controller.baseline = float(rewards.mean())
        signal = rewards - controller.baseline
    else:
        signal = rewards
    n = len(batch.samples)
    clipped = 0
    objective = 0.0
    entropy = 0.0
    for _ in range(cfg.epochs):
        controller.optimizer.zero_grad()
        terms, ents = [], []
        clipped = 0
        for s, r in zip(batch.samples, signal):
            js = controller.score(s.arch)
            j = ppo_objective_tensor(js.log_prob, s.log_prob_old, float(r), cfg.clip)
            if math.exp(float(js.log_prob.data) - s.log_prob_old) * r > clip_bound(cfg.clip, float(r)):
                clipped += 1
            terms.append(j)
            ents.append(js.entropy)
        objective_t = T.mul(_total(terms), 1.0 / n)
        entropy_t = T.mul(_total(ents), 1.0 / n)
        loss = T.neg(T.add(objective_t, T.mul(entropy_t, cfg.entropy_weight)))
        if loss.requires_grad:
            T.backward(loss)
            controller.optimizer.step(allow_missing=True)
        objective, entropy = float(objective_t.data), float(entropy_t.data)
    batch.loss = -objective
    if cfg.use_advantage:
        controller.baseline = cfg.baseline_decay * controller.baseline + (1 - cfg.baseline_decay) * float(rewards.mean())
    return UpdateMetrics(float(rewards.mean()), objective, clipped / n, entropy,
                         float(controller.baseline) if controller.baseline is not None else 0.0)


def _total(ts: list[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = T.add(out, t)
    return out
