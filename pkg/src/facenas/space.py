"""Search spaces, architecture tokens and complexity counts."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

CNN_OPS = ("conv_k3", "conv_k5", "conv_k7", "dilconv_k3_d2", "maxpool_k3", "avgpool_k3", "identity")
GNN_AGGREGATORS = ("mean", "sum", "max", "attention")
GNN_READOUTS = ("mean", "max", "sum")
FUSION_OPS = ("concat_linear", "add", "mul", "gated_sum", "attention_sum")
STREAM_WIDTHS = (16, 32, 64)
FUSION_WIDTHS = (32, 64, 128)


class BudgetError(RuntimeError):
    pass


class TokenError(ValueError):
    pass


@dataclass(frozen=True)
class DecisionSlot:
    name: str
    choices: tuple

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        if not self.choices:
            raise ValueError(f"slot {self.name} has no choices")
        if len(set(map(str, self.choices))) != len(self.choices):
            raise ValueError(f"slot {self.name} has duplicate choices")

    @property
    def arity(self) -> int:
        return len(self.choices)


@dataclass(frozen=True)
class SearchSpace:
    """Ordered decision slots for one stream (kind cnn/gnn) or for the fusion module."""

    name: str
    kind: str
    slots: tuple[DecisionSlot, ...]
    attribute: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        if self.kind not in ("cnn", "gnn", "fusion"):
            raise ValueError(f"unknown space kind {self.kind!r}")
        names = [s.name for s in self.slots]
        if len(set(names)) != len(names):
            raise ValueError(f"space {self.name} has duplicate slot names")

    @property
    def size(self) -> int:
        return math.prod(s.arity for s in self.slots)

    @property
    def arities(self) -> tuple[int, ...]:
        return tuple(s.arity for s in self.slots)

    def slot(self, name: str) -> DecisionSlot:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(name)

    def labels(self, tokens: Sequence[int]) -> dict[str, object]:
        self.validate(tokens)
        return {s.name: s.choices[t] for s, t in zip(self.slots, tokens)}

    def validate(self, tokens: Sequence[int]):
        if len(tokens) != len(self.slots):
            raise TokenError(f"{self.name}: expected {len(self.slots)} tokens, got {len(tokens)}")
        for s, t in zip(self.slots, tokens):
            if not 0 <= int(t) < s.arity:
                raise TokenError(f"{self.name}.{s.name}: token {t} outside [0, {s.arity})")

    @property
    def depth(self) -> int:
        """Number of layers a fusion tap can attach to (stream spaces only)."""
        return sum(1 for s in self.slots if s.name.startswith(("op", "agg")))

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "attribute": self.attribute,
                "slots": [{"name": s.name, "choices": list(s.choices)} for s in self.slots]}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(d["name"], d["kind"], tuple(DecisionSlot(s["name"], tuple(s["choices"])) for s in d["slots"]),
                   d.get("attribute"))


def enumerate_space(space: SearchSpace, limit: int = 100_000) -> Iterator[tuple[int, ...]]:
    if space.size > limit:
        raise BudgetError(f"{space.name}: {space.size} assignments exceed the enumeration limit {limit}")
    return itertools.product(*(range(a) for a in space.arities))


def naive_complexity(stream_sizes: Sequence[int], fusion_size: int) -> int:
    if any(t < 1 for t in stream_sizes) or fusion_size < 1:
        raise ValueError("search space sizes must be at least 1")
    return int(fusion_size) * math.prod(int(t) for t in stream_sizes)


def warmup_complexity(stream_sizes: Sequence[int], reduced_sizes: Sequence[int], fusion_size: int) -> int:
    if len(stream_sizes) != len(reduced_sizes):
        raise ValueError("one reduced size per stream is required")
    if any(r > t for r, t in zip(reduced_sizes, stream_sizes)):
        raise ValueError("reduced sizes cannot exceed the original sizes")
    return sum(int(t) for t in stream_sizes) + naive_complexity(reduced_sizes, fusion_size)


# ------------------------------------------------------------------ default spaces

def cnn_space(name: str, attribute: str | None = None, ops=CNN_OPS, widths=STREAM_WIDTHS, depth: int = 4,
              width_slots: int = 2) -> SearchSpace:
    slots = [DecisionSlot(f"op{i}", ops) for i in range(depth)]
    slots += [DecisionSlot(f"width{j}", widths) for j in range(width_slots)]
    return SearchSpace(name, "cnn", tuple(slots), attribute or name)


def gnn_space(name: str, attribute: str | None = None, aggregators=GNN_AGGREGATORS, widths=STREAM_WIDTHS,
              readouts=GNN_READOUTS, depth: int = 3) -> SearchSpace:
    slots = []
    for i in range(depth):
        slots += [DecisionSlot(f"agg{i}", aggregators), DecisionSlot(f"width{i}", widths)]
    slots.append(DecisionSlot("readout", readouts))
    return SearchSpace(name, "gnn", tuple(slots), attribute or name)


def fusion_space(streams: Sequence[SearchSpace], ops=FUSION_OPS, widths=FUSION_WIDTHS, blocks: int = 2) -> SearchSpace:
    slots = [DecisionSlot(f"tap_{s.name}", tuple(range(s.depth))) for s in streams]
    for b in range(blocks):
        slots += [DecisionSlot(f"block{b}_op", ops), DecisionSlot(f"block{b}_width", widths)]
    return SearchSpace("fusion", "fusion", tuple(slots))


def stream_width(space_labels: dict[str, object], layer: int, depth: int, kind: str) -> int:
    """Channel width assigned to ``layer`` by the width slots of a stream."""
    if kind == "gnn":
        return int(space_labels[f"width{layer}"])
    widths = sorted((k for k in space_labels if k.startswith("width")), key=lambda k: int(k[5:]))
    if not widths:
        raise TokenError("cnn space needs at least one width slot")
    group = min(layer * len(widths) // max(depth, 1), len(widths) - 1)
    return int(space_labels[widths[group]])


# ------------------------------------------------------------------ architectures

@dataclass(frozen=True)
class Architecture:
    streams: tuple[tuple[str, tuple[int, ...]], ...]
    fusion: tuple[int, ...] = field(default=())

    @property
    def stream_tokens(self) -> dict[str, tuple[int, ...]]:
        return dict(self.streams)

    @property
    def key(self) -> str:
        return canonical_key(self)

    @classmethod
    def build(cls, streams: dict[str, Sequence[int]], fusion: Sequence[int] = ()) -> "Architecture":
        return cls(tuple((k, tuple(int(t) for t in v)) for k, v in streams.items()), tuple(int(t) for t in fusion))


def canonical_key(arch: Architecture) -> str:
    parts = [f"{name}={'.'.join(map(str, toks))}" for name, toks in arch.streams]
    if arch.fusion:
        parts.append(f"@fusion={'.'.join(map(str, arch.fusion))}")
    return "|".join(parts)


def parse_key(key: str) -> Architecture:
    streams = []
    fusion: tuple[int, ...] = ()
    for part in key.split("|"):
        name, _, toks = part.partition("=")
        tokens = tuple(int(t) for t in toks.split(".")) if toks else ()
        if name == "@fusion":
            fusion = tokens
        else:
            streams.append((name, tokens))
    return Architecture(tuple(streams), fusion)


def validate_architecture(arch: Architecture, streams: Sequence[SearchSpace], fusion: SearchSpace | None):
    toks = arch.stream_tokens
    for s in streams:
        if s.name not in toks:
            raise TokenError(f"architecture has no tokens for stream {s.name}")
        s.validate(toks[s.name])
    if fusion is not None:
        fusion.validate(arch.fusion)


def enumerate_joint(streams: Sequence[SearchSpace], fusion: SearchSpace | None, limit: int = 100_000):
    total = math.prod(s.size for s in streams) * (fusion.size if fusion else 1)
    if total > limit:
        raise BudgetError(f"joint space of {total} architectures exceeds limit {limit}")
    per_stream = [list(enumerate_space(s, limit)) for s in streams]
    fusion_opts = list(enumerate_space(fusion, limit)) if fusion else [()]
    for combo in itertools.product(*per_stream):
        for f in fusion_opts:
            yield Architecture(tuple((s.name, c) for s, c in zip(streams, combo)), tuple(f))


# ------------------------------------------------------------------ reduction

@dataclass(frozen=True)
class ReducedSpace:
    space: SearchSpace
    kept: tuple[tuple[int, ...], ...]  # original choice indices kept per slot
    original: SearchSpace
    provenance: str = ""

    @property
    def size(self) -> int:
        return self.space.size

    def to_original(self, tokens: Sequence[int]) -> tuple[int, ...]:
        return tuple(k[t] for k, t in zip(self.kept, tokens))


def reduce_by_marginals(space: SearchSpace, marginals: Sequence[np.ndarray], keep_per_slot: int,
                        provenance: str = "") -> ReducedSpace:
    """Keep the ``keep_per_slot`` most probable choices per slot; ties go to the earlier label."""
    kept, slots = [], []
    for slot, probs in zip(space.slots, marginals):
        k = min(max(1, keep_per_slot), slot.arity)
        order = sorted(range(slot.arity), key=lambda i: (-probs[i], i))[:k]
        order.sort()
        kept.append(tuple(order))
        slots.append(DecisionSlot(slot.name, tuple(slot.choices[i] for i in order)))
    reduced = SearchSpace(space.name, space.kind, tuple(slots), space.attribute)
    return ReducedSpace(reduced, tuple(kept), space, provenance)
