import numpy as np
import pytest

from facenas import tensor as T
from facenas.child import (CNNStream, ChildModel, DivergedError, FusionBlock, GNNStream, GraphStructure, InputError,
                           TensorDataset, TrainConfig, align_matrix, instantiate, predict, train_from_scratch)
from facenas.space import (CNN_OPS, FUSION_OPS, GNN_AGGREGATORS, GNN_READOUTS, Architecture, cnn_space, fusion_space,
                           TokenError, gnn_space)

CASES = 100
TOL = 1e-4


def _ring(n):
    adj = np.zeros((n, n), dtype=bool)
    for v in range(n):
        adj[v, (v + 1) % n] = adj[(v + 1) % n, v] = True
    adj[0, n // 2] = adj[n // 2, 0] = True
    return GraphStructure(adj)


def _weighted(fn, seed):
    w = {}

    def loss():
        out = fn()
        if "w" not in w:
            w["w"] = T.make_rng(seed, 3).normal(size=out.shape)
        return T.sum_(T.mul(out, w["w"]))
    return loss


@pytest.mark.parametrize("op", CNN_OPS)
def test_cnn_layer_gradients(op):
    space = cnn_space("s", "aus", (op,), (3,), depth=1, width_slots=1)
    worst = 0.0
    for case in range(CASES):
        rng = T.make_rng(11, case)
        stream = CNNStream(space, (0, 0), 2, 6, rng, "s", pool_bins=3)
        x = T.parameter(rng.normal(size=(2, 2, 6)))
        fn = _weighted(lambda: stream.pool(stream.forward(x)), case)
        worst = max(worst, T.gradcheck(fn, [x] + stream.params))
    assert worst <= TOL, f"{op}: {worst:.2e}"


@pytest.mark.parametrize("agg", GNN_AGGREGATORS)
@pytest.mark.parametrize("readout", GNN_READOUTS)
def test_gnn_layer_gradients(agg, readout):
    space = gnn_space("g", "landmarks", (agg,), (3,), (readout,), depth=1)
    graph = _ring(6)
    worst = 0.0
    for case in range(CASES):
        rng = T.make_rng(12, case)
        stream = GNNStream(space, (0, 0, 0), 2, graph, rng, "g")
        x = T.parameter(rng.normal(size=(2, 6, 2)))
        fn = _weighted(lambda: stream.pool(stream.forward(x)), case)
        worst = max(worst, T.gradcheck(fn, [x] + stream.params))
    assert worst <= TOL, f"{agg}/{readout}: {worst:.2e}"


@pytest.mark.parametrize("op", FUSION_OPS)
def test_fusion_block_gradients(op):
    worst = 0.0
    for case in range(CASES):
        rng = T.make_rng(13, case)
        block = FusionBlock(op, (3, 2), 4, rng, "f")
        xs = [T.parameter(rng.normal(size=(2, 3))), T.parameter(rng.normal(size=(2, 2)))]
        fn = _weighted(lambda: block.forward(xs), case)
        worst = max(worst, T.gradcheck(fn, xs + block.params))
    assert worst <= TOL, f"{op}: {worst:.2e}"


def _toy_setup(width=3, fusion_width=4):
    cnn = cnn_space("aus", "aus", ("conv_k3", "avgpool_k3"), (width,), depth=2, width_slots=1)
    gnn = gnn_space("landmarks", "landmarks", ("mean", "attention"), (width,), ("mean", "max"), depth=1)
    fusion = fusion_space([cnn, gnn], ("concat_linear", "gated_sum"), (fusion_width,), blocks=2)
    shapes = {"aus": (4, 6), "landmarks": (6, 4)}
    return cnn, gnn, fusion, shapes, {"landmarks": _ring(6)}


def _inputs(rng, n, shapes):
    return {k: rng.normal(size=(n,) + v) for k, v in shapes.items()}


def test_whole_model_gradients():
    # narrow widths keep 100 element-wise cases fast; every layer type is still present
    cnn, gnn, fusion, shapes, graphs = _toy_setup(width=2, fusion_width=2)
    worst = 0.0
    for case in range(CASES):
        rng = T.make_rng(14, case)
        arch = Architecture.build({"aus": [int(rng.integers(2)), int(rng.integers(2)), 0],
                                   "landmarks": [int(rng.integers(2)), 0, int(rng.integers(2))]},
                                  [int(rng.integers(2)), 0, int(rng.integers(2)), 0, int(rng.integers(2)), 0])
        model = ChildModel(arch, [cnn, gnn], fusion, shapes, graphs, seed=case, dropout=0.0, align=4, pool_bins=3)
        # zero-initialised biases behind an all-zero ReLU row sit exactly on a kink; probe a generic point
        for p in model.params:
            if p.data.ndim == 1:
                p.data = p.data + rng.normal(scale=0.1, size=p.shape)
        batch = _inputs(rng, 2, shapes)
        worst = max(worst, T.gradcheck(_weighted(lambda: model.forward(batch), case), model.params))
    assert worst <= TOL


def test_align_matrix_rows_are_averages():
    m = align_matrix(7, 3)
    np.testing.assert_allclose(m.sum(axis=0), 1.0)
    np.testing.assert_allclose(np.ones(7) @ m, 1.0)
    np.testing.assert_array_equal(align_matrix(4, 4), np.eye(4))


def test_joint_and_standalone_shapes():
    cnn, gnn, fusion, shapes, graphs = _toy_setup()
    arch = Architecture.build({"aus": [0, 1, 0], "landmarks": [1, 0, 1]}, [1, 0, 0, 0, 1, 0])
    model = ChildModel(arch, [cnn, gnn], fusion, shapes, graphs, align=4, pool_bins=3)
    out = model.predict_batch(_inputs(T.make_rng(0), 5, shapes))
    assert out.shape == (5,)
    solo = ChildModel(Architecture.build({"aus": [0, 0, 0]}), [cnn], None, {"aus": (4, 6)}, mode="standalone")
    assert solo.predict_batch({"aus": np.zeros((3, 4, 6))}).shape == (3,)


def test_unknown_token_is_rejected():
    cnn, gnn, fusion, shapes, graphs = _toy_setup()
    with pytest.raises(TokenError):
        ChildModel(Architecture.build({"aus": [0, 5, 0], "landmarks": [0, 0, 0]}, [0] * 6), [cnn, gnn], fusion,
                   shapes, graphs)


def test_missing_attribute_names_it():
    cnn, gnn, fusion, shapes, graphs = _toy_setup()
    arch = Architecture.build({"aus": [0, 0, 0], "landmarks": [0, 0, 0]}, [0] * 6)
    model = ChildModel(arch, [cnn, gnn], fusion, shapes, graphs, align=4, pool_bins=3)
    with pytest.raises(InputError, match="landmarks"):
        predict(model, {"aus": np.zeros((4, 6))})


def _linear_task(n=120, seed=0):
    rng = T.make_rng(seed, 1)
    x = rng.normal(size=(n, 4, 6))
    y = 12.0 + 4.0 * x[:, 0, 2] - 3.0 * x[:, 1, 4]
    ids = [f"c{i}" for i in range(n)]
    full = TensorDataset({"aus": x}, y, ids)
    return full.subset(range(0, 90)), full.subset(range(90, n))


def _solo_model(seed=0):
    space = cnn_space("aus", "aus", ("conv_k3",), (8,), depth=1, width_slots=1)
    return ChildModel(Architecture.build({"aus": [0, 0]}), [space], None, {"aus": (4, 6)}, mode="standalone",
                      seed=seed, dropout=0.0, pool_bins=6)


def test_training_learns_a_linear_target():
    train, val = _linear_task()
    model = _solo_model()
    before = float(np.sqrt(np.mean((model.predict_batch(val.inputs) - val.y) ** 2)))
    res = train_from_scratch(model, train, val, TrainConfig(epochs=60, lr=1e-2, patience=60, batch_size=16), seed=0)
    assert res.val_error < 0.5 * np.std(val.y)
    assert res.val_error < before
    assert 1 <= res.best_epoch <= res.epochs_run


def test_training_is_deterministic():
    train, val = _linear_task()
    cfg = TrainConfig(epochs=5, lr=1e-2)
    a = train_from_scratch(_solo_model(3), train, val, cfg, seed=4)
    b = train_from_scratch(_solo_model(3), train, val, cfg, seed=4)
    assert a.val_error == b.val_error and a.train_error == b.train_error


def test_fixed_epoch_training_without_validation():
    train, _ = _linear_task()
    res = train_from_scratch(_solo_model(), train, None, TrainConfig(epochs=3, lr=1e-2), seed=0)
    assert np.isnan(res.val_error) and res.epochs_run == 3 and res.best_epoch == 3


def test_overlapping_splits_are_rejected():
    train, val = _linear_task()
    with pytest.raises(ValueError):
        train_from_scratch(_solo_model(), train, train.subset([0, 1]), TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    train, val = _linear_task()
    train.y[:] = 1e308
    with pytest.raises(DivergedError):
        train_from_scratch(_solo_model(), train, val, TrainConfig(epochs=2, lr=1.0), seed=0)


def test_model_state_round_trip(tmp_path):
    cnn, gnn, fusion, shapes, graphs = _toy_setup()
    arch = Architecture.build({"aus": [0, 0, 0], "landmarks": [1, 0, 0]}, [0, 0, 0, 0, 1, 0])
    a = instantiate(arch, [cnn, gnn], fusion, shapes, graphs, seed=1, cfg=TrainConfig(align=4, pool_bins=3))
    b = instantiate(arch, [cnn, gnn], fusion, shapes, graphs, seed=2, cfg=TrainConfig(align=4, pool_bins=3))
    T.save_checkpoint(tmp_path / "m.ckpt", a.state())
    b.load_state(T.load_checkpoint(tmp_path / "m.ckpt"))
    batch = _inputs(T.make_rng(5), 3, shapes)
    np.testing.assert_array_equal(a.predict_batch(batch), b.predict_batch(batch))
