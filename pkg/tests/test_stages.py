import numpy as np
import pytest

from pipesim.linalg import DimensionError, Matrix, RngStream, finite_diff_grad
from pipesim.stages import (
    ActivationStash,
    LayerSpec,
    StashEntry,
    StashError,
    build_layers,
    build_stages,
    network_forward,
    params_by_layer,
    partition_layers,
    stage_backward,
    stage_forward,
)


def mlp_oracle_forward(weights, biases, kinds, x):
    # independent reference forward: plain numpy, no package layer code
    h = np.asarray(x.a)
    for w, b, kind in zip(weights, biases, kinds):
        pre = h @ w.a + b.a
        if kind == "tanh":
            h = np.tanh(pre)
        elif kind == "relu":
            h = np.maximum(pre, 0.0)
        else:
            h = pre
    return h


def test_partition_even_split():
    layers = build_layers([4] * 9, ["tanh"] * 8)
    groups = partition_layers(layers, 4)
    assert [len(g) for g in groups] == [2, 2, 2, 2]
    assert [spec.index for g in groups for spec in g] == list(range(8))


def test_partition_uneven_split_front_loads_extra():
    layers = build_layers([4] * 8, ["tanh"] * 7)
    groups = partition_layers(layers, 4)
    assert [len(g) for g in groups] == [2, 2, 2, 1]


def test_partition_single_stage_takes_all():
    layers = build_layers([4] * 6, ["tanh"] * 5)
    groups = partition_layers(layers, 1)
    assert [len(g) for g in groups] == [5]


def test_partition_errors():
    layers = build_layers([4, 4, 4], ["tanh", "linear"])
    with pytest.raises(ValueError):
        partition_layers(layers, 3)
    with pytest.raises(ValueError):
        partition_layers(layers, 0)


def test_build_layers_validation():
    with pytest.raises(ValueError):
        build_layers([4], [])
    with pytest.raises(ValueError):
        build_layers([4, 4], ["tanh", "tanh"])
    with pytest.raises(ValueError):
        LayerSpec(0, 3, 2, "softplus")


def test_identity_stage_passes_input_through():
    rng = RngStream(0)
    stages = build_stages(build_layers([3, 3], ["linear"]), 1, rng)
    stage = stages[0]
    weights = [Matrix(np.eye(3)), Matrix.zeros(1, 3)]
    x = rng.normal(4, 3)
    out = stage_forward(stage, weights, (1, 0), x, version=1)
    assert out.tolist() == x.tolist()


def test_single_linear_layer_hand_value():
    rng = RngStream(0)
    stage = build_stages(build_layers([1, 1], ["linear"]), 1, rng)[0]
    weights = [Matrix([[2.0]]), Matrix([[1.0]])]
    out = stage_forward(stage, weights, (1, 0), Matrix([[3.0]]), version=1)
    assert out.tolist() == [[7.0]]


def test_stage_forward_rejects_wrong_input_width():
    rng = RngStream(0)
    stage = build_stages(build_layers([3, 2], ["tanh"]), 1, rng)[0]
    with pytest.raises(DimensionError):
        stage_forward(stage, stage.params, (1, 0), Matrix.zeros(2, 4), version=1)


def test_forward_matches_independent_oracle():
    rng = RngStream(21)
    layers = build_layers([4, 6, 5, 3], ["tanh", "relu", "linear"])
    stages = build_stages(layers, 1, rng.substream("params"))
    stage = stages[0]
    x = rng.normal(5, 4)
    out = stage_forward(stage, stage.params, (1, 0), x, version=1)
    ws = [stage.params[2 * i] for i in range(3)]
    bs = [stage.params[2 * i + 1] for i in range(3)]
    want = mlp_oracle_forward(ws, bs, ["tanh", "relu", "linear"], x)
    assert float(np.max(np.abs(out.a - want))) <= 1e-15


def test_split_forward_equals_unsplit():
    seed_rng = lambda: RngStream(33).substream("params")
    layers = build_layers([4, 6, 5, 3], ["tanh", "tanh", "linear"])
    x = RngStream(33).substream("data").normal(7, 4)

    whole = build_stages(layers, 1, seed_rng())
    out1 = stage_forward(whole[0], whole[0].params, (1, 0), x, version=1)

    split = build_stages(layers, 2, seed_rng())
    h = stage_forward(split[0], split[0].params, (1, 0), x, version=1)
    out2 = stage_forward(split[1], split[1].params, (1, 0), h, version=1)

    assert out1.max_abs_diff(out2) <= 1e-15


def test_split_backward_equals_unsplit():
    seed_rng = lambda: RngStream(34).substream("params")
    layers = build_layers([4, 6, 5, 3], ["tanh", "tanh", "linear"])
    x = RngStream(34).substream("data").normal(7, 4)
    grad_out = RngStream(34).substream("g").normal(7, 3)

    whole = build_stages(layers, 1, seed_rng())[0]
    stage_forward(whole, whole.params, (1, 0), x, version=1)
    gin1, pg1 = stage_backward(whole, whole.params, (1, 0), grad_out)

    split = build_stages(layers, 2, seed_rng())
    h = stage_forward(split[0], split[0].params, (1, 0), x, version=1)
    stage_forward(split[1], split[1].params, (1, 0), h, version=1)
    gmid, pg_hi = stage_backward(split[1], split[1].params, (1, 0), grad_out)
    gin2, pg_lo = stage_backward(split[0], split[0].params, (1, 0), gmid)

    assert gin1.max_abs_diff(gin2) <= 1e-15
    for a, b in zip(pg1, pg_lo + pg_hi):
        assert a.max_abs_diff(b) <= 1e-15


def test_zero_grad_out_gives_zero_grads():
    rng = RngStream(8)
    stage = build_stages(build_layers([3, 4, 2], ["tanh", "linear"]), 1, rng)[0]
    x = rng.normal(5, 3)
    stage_forward(stage, stage.params, (1, 0), x, version=1)
    gin, pgs = stage_backward(stage, stage.params, (1, 0), Matrix.zeros(5, 2))
    assert gin.tolist() == Matrix.zeros(5, 3).tolist()
    for g in pgs:
        assert g.tolist() == Matrix.zeros(g.rows, g.cols).tolist()


def test_backward_grads_match_finite_differences():
    # loss = sum of stage outputs, so dL/dout is all ones
    rng = RngStream(55)
    layers = build_layers([3, 5, 2], ["tanh", "tanh"])
    stages = build_stages(layers, 1, rng.substream("params"))
    stage = stages[0]
    x = rng.substream("data").normal(4, 3)

    stage_forward(stage, stage.params, (1, 0), x, version=1)
    ones = Matrix(np.ones((4, 2)))
    gin, pgs = stage_backward(stage, stage.params, (1, 0), ones)

    def loss_with_param(idx, value):
        trial = list(stage.params)
        trial[idx] = value
        return float(network_forward([stage], [trial], x).a.sum())

    for idx in range(len(stage.params)):
        fd = finite_diff_grad(lambda m, idx=idx: loss_with_param(idx, m), stage.params[idx], 1e-5)
        assert fd.max_abs_diff(pgs[idx]) <= 1e-6

    fd_x = finite_diff_grad(
        lambda m: float(network_forward([stage], [stage.params], m).a.sum()), x, 1e-5
    )
    assert fd_x.max_abs_diff(gin) <= 1e-6


def test_stash_lifecycle_and_errors():
    stash = ActivationStash()
    entry = StashEntry(3, [], [])
    stash.put((5, 0), entry)
    with pytest.raises(StashError):
        stash.put((5, 0), entry)
    assert len(stash) == 1 and stash.peak == 1
    got = stash.pop((5, 0))
    assert got.version == 3
    assert len(stash) == 0
    with pytest.raises(StashError):
        stash.pop((5, 0))
    with pytest.raises(StashError):
        stash.pop((6, 0))


def test_stash_records_version_of_forward_view():
    rng = RngStream(3)
    stage = build_stages(build_layers([2, 2], ["linear"]), 1, rng)[0]
    stage_forward(stage, stage.params, (9, 0), Matrix.zeros(1, 2), version=4)
    assert stage.stash.pop((9, 0)).version == 4


def test_init_is_partition_independent():
    layers = build_layers([4, 6, 6, 6, 3], ["tanh"] * 4)
    one = params_by_layer(build_stages(layers, 1, RngStream(77).substream("params")))
    three = params_by_layer(build_stages(layers, 3, RngStream(77).substream("params")))
    assert one.keys() == three.keys()
    for idx in one:
        assert one[idx][0].tolist() == three[idx][0].tolist()
        assert one[idx][1].tolist() == three[idx][1].tolist()


def test_stage_versions_start_at_one():
    stages = build_stages(build_layers([4, 4, 4], ["tanh", "linear"]), 2, RngStream(0))
    assert [s.version for s in stages] == [1, 1]
    assert stages[0].rank == 0 and stages[1].rank == 1
