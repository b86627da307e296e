"""Run configuration, stored as TOML."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .child import TrainConfig
from .data import SyntheticSpec
from .ppo import PPOConfig
from .space import (CNN_OPS, FUSION_OPS, FUSION_WIDTHS, GNN_AGGREGATORS, GNN_READOUTS, STREAM_WIDTHS,
                    SearchSpace, cnn_space, fusion_space, gnn_space)

WORKERS_ENV = "FACENAS_WORKERS"


@dataclass
class StreamConfig:
    name: str
    kind: str = "cnn"
    attribute: str = ""
    ops: list = field(default_factory=lambda: list(CNN_OPS))
    aggregators: list = field(default_factory=lambda: list(GNN_AGGREGATORS))
    readouts: list = field(default_factory=lambda: list(GNN_READOUTS))
    widths: list = field(default_factory=lambda: list(STREAM_WIDTHS))
    depth: int = 0
    width_slots: int = 2

    def build(self) -> SearchSpace:
        attr = self.attribute or self.name
        if self.kind == "cnn":
            return cnn_space(self.name, attr, tuple(self.ops), tuple(self.widths), self.depth or 4, self.width_slots)
        if self.kind == "gnn":
            return gnn_space(self.name, attr, tuple(self.aggregators), tuple(self.widths), tuple(self.readouts),
                             self.depth or 3)
        raise ValueError(f"stream {self.name}: unknown kind {self.kind!r}")


@dataclass
class FusionConfig:
    ops: list = field(default_factory=lambda: list(FUSION_OPS))
    widths: list = field(default_factory=lambda: list(FUSION_WIDTHS))
    blocks: int = 2

    def build(self, streams) -> SearchSpace:
        return fusion_space(streams, tuple(self.ops), tuple(self.widths), self.blocks)


@dataclass
class DataConfig:
    source: str = "synthetic"
    K: int = 120
    conf_threshold: float = 0.5
    layout: str = ""
    split_seed: int = 0
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class BudgetConfig:
    warmup_steps: int = 10
    joint_steps: int = 20
    workers: int = 1
    wall_clock: float = 0.0
    skip_warmup: bool = False
    keep_per_slot: int = 2
    reduction_samples: int = 1000
    leaderboard_size: int = 10
    finalists: int = 3
    final_seeds: int = 3

    def __post_init__(self):
        if self.warmup_steps < 0 or self.joint_steps < 1:
            raise ValueError("joint_steps must be at least 1 and warmup_steps non-negative")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "run"
    controller_hidden: int = 64
    data: DataConfig = field(default_factory=DataConfig)
    streams: list[StreamConfig] = field(default_factory=lambda: [
        StreamConfig("aus", "cnn"), StreamConfig("gaze", "cnn"), StreamConfig("pose", "cnn"),
        StreamConfig("landmarks", "gnn", widths=list(STREAM_WIDTHS)),
    ])
    fusion: FusionConfig = field(default_factory=FusionConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def stream_spaces(self) -> list[SearchSpace]:
        return [s.build() for s in self.streams]

    def fusion_space(self, streams=None) -> SearchSpace:
        return self.fusion.build(streams or self.stream_spaces())

    def workers(self) -> int:
        env = os.environ.get(WORKERS_ENV)
        return max(1, int(env)) if env else max(1, self.budget.workers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["synthetic"]["length_range"] = list(self.data.synthetic.length_range)
        d["data"]["synthetic"]["planted_aus"] = list(self.data.synthetic.planted_aus)
        return d

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        _reject_unknown(cls, d, "run")
        data = dict(d.pop("data", {}))
        _reject_unknown(DataConfig, data, "data")
        synth = data.pop("synthetic", {})
        _reject_unknown(SyntheticSpec, synth, "data.synthetic")
        streams = d.pop("streams", None)
        out = cls(
            data=DataConfig(**data, synthetic=SyntheticSpec(**synth)),
            fusion=_build(FusionConfig, d.pop("fusion", {}), "fusion"),
            budget=_build(BudgetConfig, d.pop("budget", {}), "budget"),
            ppo=_build(PPOConfig, d.pop("ppo", {}), "ppo"),
            train=_build(TrainConfig, d.pop("train", {}), "train"),
            **d,
        )
        if streams is not None:
            out.streams = [_build(StreamConfig, s, "streams") for s in streams]
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


def _reject_unknown(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"[{section}] unknown keys: {', '.join(unknown)}")


def _build(cls, d: dict, section: str):
    _reject_unknown(cls, d, section)
    return cls(**d)


def toy_config(seed: int = 0, output_dir: str = "run") -> RunConfig:
    """Desk-scale benchmark: AU CNN + landmark GNN, 64 joint architectures, no warm-up reduction."""
    return RunConfig(
        seed=seed,
        output_dir=output_dir,
        controller_hidden=32,
        data=DataConfig(K=8, conf_threshold=0.5,
                        synthetic=SyntheticSpec(n_clips=300, au_channels=4, gaze_channels=2)),
        streams=[
            StreamConfig("aus", "cnn", ops=["conv_k3", "maxpool_k3"], widths=[8], depth=2, width_slots=1),
            StreamConfig("landmarks", "gnn", aggregators=["mean", "max"], widths=[8], readouts=["mean", "sum"],
                         depth=1),
        ],
        fusion=FusionConfig(ops=["concat_linear", "mul"], widths=[8], blocks=1),
        budget=BudgetConfig(warmup_steps=0, joint_steps=30, skip_warmup=True, leaderboard_size=10),
        ppo=PPOConfig(samples=6, lr=0.02, baseline_decay=0.8),
        train=TrainConfig(epochs=20, batch_size=16, lr=1e-2, align=8, pool_bins=4),
    )

