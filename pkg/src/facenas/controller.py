"""LSTM controllers that emit architecture tokens one decision slot at a time."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .space import SearchSpace, TokenError
from .tensor import Tensor


class ConditioningError(ValueError):
    pass


@dataclass
class SampleTrace:
    space: str
    tokens: tuple[int, ...]
    log_probs: tuple[float, ...]
    hidden: np.ndarray
    cell: np.ndarray
    entropy: float = 0.0
    condition: tuple[tuple[str, tuple[int, ...]], ...] = ()

    @property
    def total_log_prob(self) -> float:
        return float(sum(self.log_probs))

    @property
    def embedding(self) -> np.ndarray:
        return self.hidden

    def to_dict(self) -> dict:
        return {"space": self.space, "tokens": list(self.tokens), "log_probs": list(self.log_probs),
                "total_log_prob": self.total_log_prob}


class ControllerPolicy:
    """Single-layer LSTM; slot t reads the embedding of the token chosen at slot t-1."""

    def __init__(self, space: SearchSpace, hidden: int = 64, seed: int = 0, role: str = "stream",
                 condition_on: Sequence[str] = (), init_scale: float = 0.1):
        if role not in ("stream", "fusion"):
            raise ValueError(f"unknown controller role {role!r}")
        if role == "fusion" and not condition_on:
            raise ValueError("a fusion controller needs the names of the streams it conditions on")
        self.space = space
        self.H = hidden
        self.role = role
        self.condition_on = tuple(condition_on)
        rng = T.make_rng(seed, 5, len(space.slots))
        u = lambda *shape: rng.uniform(-init_scale, init_scale, size=shape)  # noqa: E731
        H = hidden
        self.params: dict[str, Tensor] = {}
        self._p("lstm.w", u(2 * H, 4 * H))
        self._p("lstm.b", np.zeros(4 * H))
        self._p("start", u(H))
        for i, slot in enumerate(space.slots):
            self._p(f"emb{i}", u(slot.arity, H))
            self._p(f"proj{i}.w", u(H, slot.arity))
            self._p(f"proj{i}.b", np.zeros(slot.arity))
        if role == "fusion":
            M = len(self.condition_on)
            self._p("cond.cell.w", u(M * H, H))
            self._p("cond.cell.b", np.zeros(H))
            self._p("cond.input.w", u(M * H, H))
            self._p("cond.input.b", np.zeros(H))

    def _p(self, name: str, value):
        self.params[name] = T.parameter(value, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in self.params.items():
            v.data = np.array(state[k], dtype=np.float64)

    # ------------------------------------------------------------------ core recurrence

    def _lstm(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        H = self.H
        z = T.linear(T.concat([x, h], axis=0), self.params["lstm.w"], self.params["lstm.b"])
        i = T.sigmoid(T.index(z, slice(0, H)))
        f = T.sigmoid(T.index(z, slice(H, 2 * H)))
        g = T.tanh(T.index(z, slice(2 * H, 3 * H)))
        o = T.sigmoid(T.index(z, slice(3 * H, 4 * H)))
        c = T.add(T.mul(f, c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        return h, c

    def initial_state(self, cond: tuple[Tensor, Tensor] | None) -> tuple[Tensor, Tensor, Tensor]:
        """(first input, h0, c0); fusion controllers derive input and cell from the streams."""
        H = self.H
        h0 = T.Tensor(np.zeros(H))
        if self.role == "stream":
            return self.params["start"], h0, T.Tensor(np.zeros(H))
        if cond is None:
            raise ConditioningError("fusion controller needs stream hidden and cell states")
        hs, cs = cond
        x0 = T.linear(hs, self.params["cond.input.w"], self.params["cond.input.b"])
        c0 = T.linear(cs, self.params["cond.cell.w"], self.params["cond.cell.b"])
        return x0, h0, c0

    def run(self, tokens: Sequence[int] | None = None, rng: np.random.Generator | None = None,
            cond: tuple[Tensor, Tensor] | None = None, probs_out: list | None = None):
        """Score ``tokens`` or, when ``tokens`` is None, sample them with ``rng``.

        Returns (tokens, per-slot log-prob tensors, per-slot entropy tensors, h, c).
        """
        if tokens is not None:
            tokens = tuple(int(t) for t in tokens)
            if len(tokens) != len(self.space.slots):
                raise TokenError(f"{self.space.name}: expected {len(self.space.slots)} tokens, got {len(tokens)}")
        x, h, c = self.initial_state(cond)
        chosen, logps, ents = [], [], []
        for i, slot in enumerate(self.space.slots):
            h, c = self._lstm(x, h, c)
            logits = T.linear(h, self.params[f"proj{i}.w"], self.params[f"proj{i}.b"])
            logp = T.log_softmax(logits, axis=0)
            if probs_out is not None:
                probs_out.append(np.exp(logp.data))
            if tokens is None:
                probs = np.exp(logp.data)
                tok = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
                tok = min(tok, slot.arity - 1)
            else:
                tok = tokens[i]
                if not 0 <= tok < slot.arity:
                    raise TokenError(f"{self.space.name}.{slot.name}: token {tok} outside [0, {slot.arity})")
            chosen.append(tok)
            logps.append(T.index(logp, tok))
            ents.append(T.neg(T.sum_(T.mul(T.exp(logp), logp))))
            x = T.index(self.params[f"emb{i}"], tok)
        return tuple(chosen), logps, ents, h, c

    def slot_probabilities(self, tokens: Sequence[int], cond=None) -> list[np.ndarray]:
        """Conditional distribution of every slot given the preceding tokens."""
        with T.no_grad():
            x, h, c = self.initial_state(cond)
            out = []
            for i, _ in enumerate(self.space.slots):
                h, c = self._lstm(x, h, c)
                logits = T.linear(h, self.params[f"proj{i}.w"], self.params[f"proj{i}.b"])
                out.append(T.softmax(logits, axis=0).data.copy())
                x = T.index(self.params[f"emb{i}"], int(tokens[i]))
        return out


def _cond_tensors(traces: Sequence[SampleTrace]) -> tuple[Tensor, Tensor]:
    return (T.Tensor(np.concatenate([t.hidden for t in traces])),
            T.Tensor(np.concatenate([t.cell for t in traces])))


def sample(policy: ControllerPolicy, rng: np.random.Generator | int) -> SampleTrace:
    if policy.role != "stream":
        raise ConditioningError("use sample_fusion for a fusion controller")
    rng = T.make_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    with T.no_grad():
        toks, logps, ents, h, c = policy.run(rng=rng)
    return SampleTrace(policy.space.name, toks, tuple(float(l.data) for l in logps), h.data.copy(), c.data.copy(),
                       float(sum(float(e.data) for e in ents)))


def _order_traces(fusion_policy: ControllerPolicy, stream_traces) -> list[SampleTrace]:
    by_name = {t.space: t for t in stream_traces} if not isinstance(stream_traces, dict) else dict(stream_traces)
    missing = [n for n in fusion_policy.condition_on if n not in by_name]
    if missing:
        raise ConditioningError(f"no stream trace for {missing}")
    return [by_name[n] for n in fusion_policy.condition_on]


def sample_fusion(fusion_policy: ControllerPolicy, stream_traces, rng: np.random.Generator | int) -> SampleTrace:
    ordered = _order_traces(fusion_policy, stream_traces)
    rng = T.make_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    with T.no_grad():
        toks, logps, ents, h, c = fusion_policy.run(rng=rng, cond=_cond_tensors(ordered))
    return SampleTrace(fusion_policy.space.name, toks, tuple(float(l.data) for l in logps), h.data.copy(),
                       c.data.copy(), float(sum(float(e.data) for e in ents)),
                       tuple((t.space, t.tokens) for t in ordered))


def score(policy: ControllerPolicy, tokens: Sequence[int], cond=None) -> Tensor:
    """log pi(tokens), differentiable with respect to the policy parameters."""
    _, logps, _, _, _ = policy.run(tokens=tokens, cond=cond)
    total = logps[0]
    for l in logps[1:]:
        total = T.add(total, l)
    return total


@dataclass
class JointScore:
    log_prob: Tensor
    entropy: Tensor
    stream_log_probs: dict[str, Tensor] = field(default_factory=dict)
    fusion_log_prob: Tensor | None = None


def _sum(ts: Sequence[Tensor]) -> Tensor:
    total = ts[0]
    for t in ts[1:]:
        total = T.add(total, t)
    return total


def score_joint(stream_policies: dict[str, ControllerPolicy], fusion_policy: ControllerPolicy | None,
                stream_tokens: dict[str, Sequence[int]], fusion_tokens: Sequence[int] = ()) -> JointScore:
    """Differentiable log pi(A) = log pi_f(A^f | {A^m}) + sum_m log pi_m(A^m)."""
    parts, ents, per_stream = [], [], {}
    states = {}
    for name, pol in stream_policies.items():
        _, logps, e, h, c = pol.run(tokens=stream_tokens[name])
        per_stream[name] = _sum(logps)
        parts.append(per_stream[name])
        ents.extend(e)
        states[name] = (h, c)
    fusion_lp = None
    if fusion_policy is not None:
        missing = [n for n in fusion_policy.condition_on if n not in states]
        if missing:
            raise ConditioningError(f"no stream policy for {missing}")
        hs = T.concat([states[n][0] for n in fusion_policy.condition_on], axis=0)
        cs = T.concat([states[n][1] for n in fusion_policy.condition_on], axis=0)
        _, logps, e, _, _ = fusion_policy.run(tokens=fusion_tokens, cond=(hs, cs))
        fusion_lp = _sum(logps)
        parts.append(fusion_lp)
        ents.extend(e)
    return JointScore(_sum(parts), _sum(ents), per_stream, fusion_lp)


def restrict(policy: ControllerPolicy, reduced) -> ControllerPolicy:
    """Copy of a stream policy whose embeddings and projections keep only the reduced choices."""
    new = ControllerPolicy(reduced.space, policy.H, 0, policy.role, policy.condition_on)
    for name, p in new.params.items():
        src = policy.params[name].data
        if name.startswith("emb"):
            p.data = src[list(reduced.kept[int(name[3:])])].copy()
        elif name.startswith("proj") and name.endswith(".w"):
            p.data = src[:, list(reduced.kept[int(name[4:-2])])].copy()
        elif name.startswith("proj") and name.endswith(".b"):
            p.data = src[list(reduced.kept[int(name[4:-2])])].copy()
        else:
            p.data = src.copy()
    return new


def marginal_probabilities(policy: ControllerPolicy, n_samples: int = 1000, seed: int = 0) -> list[np.ndarray]:
    """Per-slot marginals estimated by averaging conditional slot distributions over sampled prefixes."""
    rng = T.make_rng(seed, 17)
    acc = [np.zeros(s.arity) for s in policy.space.slots]
    with T.no_grad():
        for _ in range(n_samples):
            probs: list[np.ndarray] = []
            policy.run(rng=rng, probs_out=probs)
            for a, p in zip(acc, probs):
                a += p
    return [a / n_samples for a in acc]
