"""Child models built from sampled architectures, trained from scratch per trial."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .space import Architecture, SearchSpace, TokenError, stream_width, validate_architecture
from .tensor import Tensor


class DivergedError(RuntimeError):
    def __init__(self, epoch: int, message: str = ""):
        super().__init__(message or f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


class InputError(KeyError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    dropout: float = 0.1
    weight_decay: float = 1e-4
    patience: int = 8
    align: int = 32
    pool_bins: int = 8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.patience < 1 or self.align < 1 \
                or self.pool_bins < 1:
            raise ValueError(f"invalid training config {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


@dataclass
class TrialResult:
    key: str
    val_error: float
    train_error: float
    wall_time: float
    seed: int
    best_epoch: int = 0
    epochs_run: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ graph structure

@dataclass(frozen=True)
class GraphStructure:
    """Neighbourhoods (with self loops) of a fixed topology shared by every clip."""

    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        object.__setattr__(self, "adjacency", adj)
        with_self = adj | np.eye(adj.shape[0], dtype=bool)
        deg = with_self.sum(axis=1)
        # nodes sharing a neighbourhood share their max aggregate
        groups: dict[bytes, int] = {}
        node_group = np.empty(adj.shape[0], dtype=np.intp)
        members = []
        for v in range(adj.shape[0]):
            sig = with_self[v].tobytes()
            if sig not in groups:
                groups[sig] = len(members)
                members.append(np.flatnonzero(with_self[v]))
            node_group[v] = groups[sig]
        object.__setattr__(self, "_groups", members)
        object.__setattr__(self, "_node_group", node_group)
        object.__setattr__(self, "_mask_bias", np.where(with_self, 0.0, -1e9))
        object.__setattr__(self, "_mean_op", (with_self / deg[:, None]).T.copy())
        object.__setattr__(self, "_sum_op", with_self.astype(np.float64).T.copy())

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]


def _kaiming(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = math.sqrt(6.0 / max(fan_in, 1))
    return T.parameter(rng.uniform(-bound, bound, size=shape), name=name)


def _zeros(shape, name: str) -> Tensor:
    return T.parameter(np.zeros(shape), name=name)


def align_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Adaptive average pooling from ``n_in`` to ``n_out`` bins as a (n_in, n_out) matrix."""
    m = np.zeros((n_in, n_out))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[lo:hi, i] = 1.0 / (hi - lo)
    return m


class Module:
    def __init__(self):
        self.params: list[Tensor] = []

    def add(self, t: Tensor) -> Tensor:
        self.params.append(t)
        return t


# ------------------------------------------------------------------ streams

class CNNStream(Module):
    """1-D convolutions along frequency over a (2C, K) heatmap, channels first.

    Latents are average-pooled to ``pool_bins`` frequency bands (not globally),
    so the head still knows which band a response came from.
    """

    def __init__(self, space: SearchSpace, tokens, in_channels: int, length: int, rng, prefix: str,
                 pool_bins: int = 8):
        super().__init__()
        self.bins = min(pool_bins, length)
        self._pool = align_matrix(length, self.bins)
        labels = space.labels(tokens)
        self.depth = space.depth
        self.layers = []
        ch = in_channels
        for i in range(self.depth):
            op = labels[f"op{i}"]
            width = stream_width(labels, i, self.depth, "cnn")
            layer = {"op": op}
            if op.startswith(("conv", "dilconv")):
                k = int(op.split("_k")[1].split("_")[0])
                d = int(op.split("_d")[1]) if "_d" in op else 1
                layer.update(kernel=k, dilation=d, padding=d * (k - 1) // 2,
                             w=self.add(_kaiming(rng, (width, ch, k), ch * k, f"{prefix}.l{i}.w")),
                             b=self.add(_zeros((width,), f"{prefix}.l{i}.b")))
                ch = width
            elif op not in ("maxpool_k3", "avgpool_k3", "identity"):
                raise TokenError(f"unknown cnn operator {op!r}")
            layer["channels"] = ch
            self.layers.append(layer)
        self.out_channels = [l["channels"] for l in self.layers]

    def forward(self, x: Tensor, upto: int | None = None) -> Tensor:
        upto = self.depth - 1 if upto is None else upto
        for layer in self.layers[: upto + 1]:
            op = layer["op"]
            if "w" in layer:
                x = T.relu(T.conv1d(x, layer["w"], layer["b"], dilation=layer["dilation"], padding=layer["padding"]))
            elif op == "maxpool_k3":
                x = T.max_pool1d(x, 3, 1, 1)
            elif op == "avgpool_k3":
                x = T.avg_pool1d(x, 3, 1, 1)
        return x

    def pool(self, h: Tensor) -> Tensor:
        B, c, _ = h.shape
        banded = T.transpose(T.matmul(h, self._pool), (0, 2, 1))  # (B, bins, c)
        return T.reshape(banded, (B, self.bins * c))

    def width_at(self, layer: int) -> int:
        return self.out_channels[layer] * self.bins


def _readout(h: Tensor, kind: str) -> Tensor:
    if kind == "mean":
        return T.mean(h, axis=1)
    if kind == "sum":
        return T.sum_(h, axis=1)
    if kind == "max":
        return T.max_(h, axis=1)
    raise TokenError(f"unknown readout {kind!r}")


class GNNStream(Module):
    """Message passing over the landmark graph; node features (B, V, F)."""

    def __init__(self, space: SearchSpace, tokens, in_features: int, graph: GraphStructure, rng, prefix: str):
        super().__init__()
        labels = space.labels(tokens)
        self.graph = graph
        self.depth = space.depth
        self.readout = labels["readout"]
        self.layers = []
        f = in_features
        for i in range(self.depth):
            agg = labels[f"agg{i}"]
            if agg not in ("mean", "sum", "max", "attention"):
                raise TokenError(f"unknown aggregator {agg!r}")
            width = stream_width(labels, i, self.depth, "gnn")
            layer = {"agg": agg, "w": self.add(_kaiming(rng, (f, width), f, f"{prefix}.l{i}.w")),
                     "b": self.add(_zeros((width,), f"{prefix}.l{i}.b")), "width": width}
            if agg == "attention":
                layer["a_self"] = self.add(_kaiming(rng, (f,), f, f"{prefix}.l{i}.a_self"))
                layer["a_nb"] = self.add(_kaiming(rng, (f,), f, f"{prefix}.l{i}.a_nb"))
            self.layers.append(layer)
            f = width
        self.out_channels = [l["width"] for l in self.layers]

    def aggregate(self, h: Tensor, layer: dict) -> Tensor:
        g = self.graph
        agg = layer["agg"]
        if agg in ("mean", "sum"):
            op = g._mean_op if agg == "mean" else g._sum_op
            return T.transpose(T.matmul(T.transpose(h, (0, 2, 1)), op), (0, 2, 1))
        if agg == "max":
            pooled = T.stack([T.max_(T.gather(h, idx, axis=1), axis=1) for idx in g._groups], axis=1)
            return T.gather(pooled, g._node_group, axis=1)
        s_self = T.matmul(h, layer["a_self"])  # (B, V)
        s_nb = T.matmul(h, layer["a_nb"])
        B, V = s_self.shape
        scores = T.tanh(T.add(T.reshape(s_self, (B, V, 1)), T.reshape(s_nb, (B, 1, V))))
        alpha = T.softmax(T.add(scores, g._mask_bias), axis=2)  # (B, V, V)
        return T.matmul(alpha, h)

    def forward(self, x: Tensor, upto: int | None = None) -> Tensor:
        upto = self.depth - 1 if upto is None else upto
        for layer in self.layers[: upto + 1]:
            x = T.relu(T.linear(self.aggregate(x, layer), layer["w"], layer["b"]))
        return x

    def pool(self, h: Tensor) -> Tensor:
        return _readout(h, self.readout)

    def width_at(self, layer: int) -> int:
        return self.out_channels[layer]


# ------------------------------------------------------------------ fusion

class FusionBlock(Module):
    def __init__(self, op: str, in_dims: Sequence[int], width: int, rng, prefix: str):
        super().__init__()
        self.op = op
        self.width = width
        n = len(in_dims)
        if op == "concat_linear":
            total = sum(in_dims)
            self.w = self.add(_kaiming(rng, (total, width), total, f"{prefix}.w"))
        elif op in ("add", "mul", "gated_sum", "attention_sum"):
            self.proj = [self.add(_kaiming(rng, (d, width), d, f"{prefix}.p{i}")) for i, d in enumerate(in_dims)]
            if op == "gated_sum":
                total = sum(in_dims)
                self.gate_w = self.add(_kaiming(rng, (total, n), total, f"{prefix}.gate_w"))
                self.gate_b = self.add(_zeros((n,), f"{prefix}.gate_b"))
            if op == "attention_sum":
                self.score = self.add(_kaiming(rng, (width,), width, f"{prefix}.score"))
        else:
            raise TokenError(f"unknown fusion operator {op!r}")
        self.b = self.add(_zeros((width,), f"{prefix}.b"))

    def forward(self, xs: Sequence[Tensor]) -> Tensor:
        op = self.op
        if op == "concat_linear":
            return T.relu(T.linear(T.concat(xs, axis=1), self.w, self.b))
        if op == "add":
            acc = self.b
            for x, p in zip(xs, self.proj):
                acc = T.add(acc, T.matmul(x, p))
            return T.relu(acc)
        if op == "mul":
            acc = None
            for x, p in zip(xs, self.proj):
                z = T.tanh(T.matmul(x, p))
                acc = z if acc is None else T.mul(acc, z)
            return T.add(acc, self.b)
        projected = [T.relu(T.add(T.matmul(x, p), self.b)) for x, p in zip(xs, self.proj)]
        stacked = T.stack(projected, axis=1)  # (B, n, width)
        if op == "gated_sum":
            weights = T.sigmoid(T.linear(T.concat(xs, axis=1), self.gate_w, self.gate_b))
        else:
            weights = T.softmax(T.matmul(stacked, self.score), axis=1)
        return T.sum_(T.mul(stacked, T.reshape(weights, weights.shape + (1,))), axis=1)


# ------------------------------------------------------------------ whole model

class ChildModel(Module):
    """Streams plus either a standalone head (one stream) or fusion blocks and a head."""

    def __init__(self, arch: Architecture, streams: Sequence[SearchSpace], fusion: SearchSpace | None,
                 input_shapes: dict[str, tuple[int, ...]], graphs: dict[str, GraphStructure] | None = None,
                 mode: str = "joint", seed: int = 0, dropout: float = 0.1, align: int = 32, pool_bins: int = 8):
        super().__init__()
        if mode not in ("joint", "standalone"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "standalone" and len(streams) != 1:
            raise ValueError("standalone mode takes exactly one stream")
        validate_architecture(arch, streams, fusion if mode == "joint" else None)
        self.arch = arch
        self.mode = mode
        self.dropout = dropout
        self.seed = seed
        self.stream_spaces = list(streams)
        self.target_mean = 0.0
        self.target_std = 1.0
        rng = T.make_rng(seed, 0)
        toks = arch.stream_tokens
        graphs = graphs or {}
        self.streams: dict[str, CNNStream | GNNStream] = {}
        for s in streams:
            if s.name not in input_shapes:
                raise InputError(f"no input shape for stream {s.name} ({s.attribute})")
            shape = input_shapes[s.name]
            if s.kind == "cnn":
                net = CNNStream(s, toks[s.name], shape[0], shape[1], rng, s.name, pool_bins)
            else:
                if s.name not in graphs:
                    raise InputError(f"gnn stream {s.name} needs a graph structure")
                net = GNNStream(s, toks[s.name], shape[-1], graphs[s.name], rng, s.name)
            self.streams[s.name] = net
            self.params += net.params

        if mode == "standalone":
            net = self.streams[streams[0].name]
            self.taps = {streams[0].name: net.depth - 1}
            head_in = net.width_at(net.depth - 1)
            self.blocks: list[FusionBlock] = []
        else:
            labels = fusion.labels(arch.fusion)
            self.taps = {}
            for s in streams:
                tap = int(labels[f"tap_{s.name}"])
                if tap >= self.streams[s.name].depth:
                    raise TokenError(f"tap {tap} deeper than stream {s.name}")
                self.taps[s.name] = tap
            self.align = {n: align_matrix(self.streams[n].width_at(t), align) for n, t in self.taps.items()}
            n_blocks = sum(1 for sl in fusion.slots if sl.name.endswith("_op"))
            self.blocks = []
            dims = [align] * len(streams)
            for b in range(n_blocks):
                block = FusionBlock(labels[f"block{b}_op"], dims, int(labels[f"block{b}_width"]), rng, f"fusion.b{b}")
                self.blocks.append(block)
                self.params += block.params
                dims = [block.width] + [align] * len(streams)
            head_in = self.blocks[-1].width if self.blocks else align * len(streams)
        self.head_w = self.add(_kaiming(rng, (head_in, 1), head_in, "head.w"))
        self.head_b = self.add(_zeros((1,), "head.b"))

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.params}

    def forward(self, inputs: dict[str, np.ndarray], training: bool = False, rng=None) -> Tensor:
        feats = []
        for name, net in self.streams.items():
            if name not in inputs:
                space = next(s for s in self.stream_spaces if s.name == name)
                raise InputError(f"missing input for attribute {space.attribute!r} (stream {name})")
            h = net.forward(T.Tensor(inputs[name]), upto=self.taps[name])
            pooled = net.pool(h)
            feats.append(pooled if self.mode == "standalone" else T.matmul(pooled, self.align[name]))
        if self.mode == "standalone":
            z = feats[0]
        elif self.blocks:
            z = self.blocks[0].forward(feats)
            for block in self.blocks[1:]:
                z = block.forward([z] + feats)
        else:
            z = T.concat(feats, axis=1)
        z = T.dropout(z, self.dropout, rng, training)
        out = T.linear(z, self.head_w, self.head_b)
        return T.reshape(out, (out.shape[0],))

    def predict_batch(self, inputs: dict[str, np.ndarray]) -> np.ndarray:
        with T.no_grad():
            z = self.forward(inputs, training=False).data
        return self.target_mean + self.target_std * z

    def state(self) -> dict[str, np.ndarray]:
        d = {p.name: p.data.copy() for p in self.params}
        d["__target__"] = np.array([self.target_mean, self.target_std])
        return d

    def load_state(self, state: dict[str, np.ndarray]):
        for p in self.params:
            p.data = np.array(state[p.name], dtype=np.float64)
        if "__target__" in state:
            self.target_mean, self.target_std = (float(v) for v in state["__target__"])


def instantiate(arch: Architecture, streams: Sequence[SearchSpace], fusion: SearchSpace | None,
                input_shapes: dict[str, tuple[int, ...]], graphs=None, mode: str = "joint", seed: int = 0,
                cfg: TrainConfig | None = None) -> ChildModel:
    cfg = cfg or TrainConfig()
    return ChildModel(arch, streams, fusion, input_shapes, graphs, mode, seed, cfg.dropout, cfg.align,
                      cfg.pool_bins)


# ------------------------------------------------------------------ data + training

@dataclass
class TensorDataset:
    """Model-ready arrays keyed by stream name, aligned with ``y`` and ``clip_ids``."""

    inputs: dict[str, np.ndarray]
    y: np.ndarray
    clip_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "TensorDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return TensorDataset({k: v[idx] for k, v in self.inputs.items()}, self.y[idx],
                             [self.clip_ids[i] for i in idx] if self.clip_ids else [])

    def merge(self, other: "TensorDataset") -> "TensorDataset":
        return TensorDataset({k: np.concatenate([v, other.inputs[k]]) for k, v in self.inputs.items()},
                             np.concatenate([self.y, other.y]), self.clip_ids + other.clip_ids)


def rmse_np(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(y)) ** 2)))


def evaluate(model: ChildModel, data: TensorDataset) -> float:
    return rmse_np(model.predict_batch(data.inputs), data.y)


def train_from_scratch(model: ChildModel, train: TensorDataset, val: TensorDataset | None, cfg: TrainConfig,
                       seed: int = 0) -> TrialResult:
    """Fit ``model`` and keep the weights of the best validation epoch.

    With ``val=None`` the model trains for exactly ``cfg.epochs`` epochs and keeps
    the final weights; the reported validation error is then NaN.
    """
    if len(train) == 0 or (val is not None and len(val) == 0):
        raise ValueError("training and validation sets must be non-empty")
    if val is not None and train.clip_ids and val.clip_ids and set(train.clip_ids) & set(val.clip_ids):
        raise ValueError("training and validation sets share clip ids")
    start = time.perf_counter()
    rng = T.make_rng(seed, 1)
    mu = float(np.mean(train.y))
    sd = float(np.std(train.y))
    model.target_mean, model.target_std = mu, (sd if sd > 1e-8 else 1.0)
    target = (train.y - model.target_mean) / model.target_std
    opt = T.Adam(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    best_val = evaluate(model, val) if val is not None else math.nan
    best_state = model.state()
    best_epoch = 0
    epochs_run = 0
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo: lo + cfg.batch_size]
            batch = {k: v[idx] for k, v in train.inputs.items()}
            pred = model.forward(batch, training=True, rng=rng)
            loss = T.mean(T.square(T.add(pred, -target[idx])))
            if not np.isfinite(loss.data).all():
                raise DivergedError(epoch)
            opt.zero_grad()
            T.backward(loss)
            opt.step(allow_missing=True)
        epochs_run = epoch
        if val is None:
            if not np.isfinite(model.predict_batch({k: v[:1] for k, v in train.inputs.items()})).all():
                raise DivergedError(epoch)
            best_epoch = epoch
            continue
        val_err = evaluate(model, val)
        if not math.isfinite(val_err):
            raise DivergedError(epoch)
        if val_err < best_val:
            best_val, best_state, best_epoch = val_err, model.state(), epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    if val is not None:
        model.load_state(best_state)
    return TrialResult(model.arch.key, best_val, evaluate(model, train), time.perf_counter() - start, seed,
                       best_epoch, epochs_run)


def predict(model: ChildModel, clip: dict[str, np.ndarray]) -> float:
    batch = {}
    for name in model.streams:
        if name not in clip:
            space = next(s for s in model.stream_spaces if s.name == name)
            raise InputError(f"missing input for attribute {space.attribute!r} (stream {name})")
        batch[name] = np.asarray(clip[name])[None]
    return float(model.predict_batch(batch)[0])


def save_model(model: ChildModel, path, sidecar: dict | None = None):
    T.save_checkpoint(path, model.state())
    if sidecar is not None:
        with open(str(path) + ".json", "w") as fh:
            json.dump({"key": model.arch.key, **sidecar}, fh, indent=2, sort_keys=True)
