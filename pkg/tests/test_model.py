import dataclasses

import numpy as np
import pytest

from couinseg import phantom
from couinseg.diffops import gradcheck
from couinseg.errors import ConfigError
from couinseg.model import (
    ModelConfig,
    TrainConfig,
    count_flops,
    forward,
    infer,
    init_params,
    input_features,
    labels_to_volume,
    load_checkpoint,
    loss_and_grads,
    make_case,
    predict_labels,
    train,
)
from couinseg.model import flops, network
from couinseg.model.network import ModelParams, point_aggregate_forward
from couinseg.neighbors import Hierarchy, HierarchyConfig, LevelData, build_hierarchy
from couinseg.volume import PointCloud, VolumeGeometry, extract_liver_points

TINY = dict(grid_size_level1=8, radius_level1=0.2, channels=(4, 4, 5, 6), head=(6, 8), max_neighbors=6)


def toy_case(n, seed, variant="d", **kw):
    rng = np.random.default_rng(seed)
    pts = PointCloud(rng.random((n, 3)), rng.random((n, 1)).astype(np.float32), rng.integers(0, 8, n))
    cfg = ModelConfig.ablation(variant, **{**TINY, **kw})
    return make_case("toy", pts, cfg, seed=seed), cfg


def randomized(params, rng, scale=0.3):
    """Every parameter nonzero, so gradients reach all of them."""
    out = {}
    for k, v in params.values.items():
        out[k] = v + scale * rng.standard_normal(v.shape)
        if k.endswith("b_off"):  # keep trilinear positions away from integer kinks
            out[k] = rng.choice([-1, 1], v.shape) * rng.uniform(0.3, 0.7, v.shape)
        if k.endswith("w_off"):
            out[k] = 0.02 * rng.standard_normal(v.shape)
    return ModelParams(out)


# -- point aggregation -------------------------------------------------------------


def aggregate_loop(prev, src, qry, nbr, wf, wr, b, radius):
    out = np.zeros((len(qry), wf.shape[1]))
    for j in range(len(qry)):
        best = np.full(wf.shape[1], -np.inf)
        for n in nbr[j]:
            h = prev[n] @ wf + ((src[n] - qry[j]) / radius) @ wr + b
            best = np.maximum(best, h)
        out[j] = np.maximum(best, 0)
    return out


def test_point_aggregate_matches_loop(rng):
    prev, src, qry = rng.standard_normal((30, 3)), rng.random((30, 3)), rng.random((10, 3))
    nbr = rng.integers(0, 30, (10, 5))
    wf, wr, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal(4)
    out, _ = point_aggregate_forward(prev, src, qry, nbr, wf, wr, b, 0.25)
    np.testing.assert_allclose(out, aggregate_loop(prev, src, qry, nbr, wf, wr, b, 0.25), atol=1e-12)


def test_point_aggregate_self_and_duplicates(rng):
    prev, pts = rng.standard_normal((6, 3)), rng.random((6, 3))
    wf, wr, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal(4)
    own, _ = point_aggregate_forward(prev, pts, pts, np.arange(6)[:, None], wf, wr, b)
    np.testing.assert_allclose(own, np.maximum(prev @ wf + b, 0), atol=1e-12)
    nbr = rng.integers(0, 6, (6, 3))
    once, _ = point_aggregate_forward(prev, pts, pts, nbr, wf, wr, b)
    twice, _ = point_aggregate_forward(prev, pts, pts, np.concatenate([nbr, nbr], 1), wf, wr, b)
    assert np.array_equal(once, twice)


# -- forward / backward ------------------------------------------------------------


def test_config_a_never_touches_grid_ops():
    case, cfg = toy_case(40, 0, "a")
    params = init_params(cfg)
    network.OP_CALLS.clear()
    loss_and_grads(input_features(case.points, cfg), case.points.labels, case.hierarchy, params, cfg)
    assert sum(network.OP_CALLS.values()) == 0
    case, cfg = toy_case(40, 0, "d")
    loss_and_grads(input_features(case.points, cfg), case.points.labels, case.hierarchy, init_params(cfg), cfg)
    assert network.OP_CALLS["graph_reason"] == 4 and network.OP_CALLS["residual_conv3d"] == 8


def test_shape_on_sixteen_points(backend):
    case, cfg = toy_case(16, 1)
    rng = np.random.default_rng(0)
    params = randomized(init_params(cfg, dtype=np.float64), rng)
    logits, _ = forward(input_features(case.points, cfg, np.float64), case.hierarchy, params, cfg)
    assert logits.shape == (16, 8) and np.isfinite(logits).all()


@pytest.mark.parametrize("variant", ["a", "b", "c", "d"])
def test_end_to_end_gradient(backend, variant):
    rng = np.random.default_rng(32)
    case, cfg = toy_case(32, 2, variant)
    params = randomized(init_params(cfg, dtype=np.float64), rng)
    feats = input_features(case.points, cfg, np.float64)
    labels = case.points.labels

    def loss(values):
        return loss_and_grads(feats, labels, case.hierarchy, ModelParams(values), cfg)[0]

    _, grads = loss_and_grads(feats, labels, case.hierarchy, params, cfg)
    # 20 random scalar slots across all parameter tensors
    names = params.names()
    sizes = np.array([params[k].size for k in names])
    picks = rng.choice(sizes.sum(), 20, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, i = names[t], int(flat - offsets[t])
        arr = params.values[name].reshape(-1)
        orig = arr[i]
        arr[i] = orig + 1e-6
        fp = loss(params.values)
        arr[i] = orig - 1e-6
        fm = loss(params.values)
        arr[i] = orig
        worst = max(worst, float(gradcheck.rel_err(grads[name].reshape(-1)[i], (fp - fm) / 2e-6)))
    assert worst <= 1e-3


def test_mismatched_hierarchy_or_params():
    case, cfg = toy_case(20, 3)
    feats = input_features(case.points, cfg)
    with pytest.raises(ConfigError):
        forward(feats, case.hierarchy, init_params(dataclasses.replace(cfg, enable_graph_reasoning=False)), cfg)
    other = dataclasses.replace(cfg, grid_size_level1=16)
    with pytest.raises(ConfigError):
        forward(feats, case.hierarchy, init_params(other), other)


def permuted_hierarchy(h: Hierarchy, perm):
    """The same hierarchy with level-1 points reordered by ``perm`` (new i = old perm[i])."""
    inv = np.argsort(perm)
    l1 = h.levels[0]
    rows = [inv[l1.neighbor_list(j)] for j in perm]
    ptr = np.concatenate([[0], np.cumsum([len(r) for r in rows])])
    levels = [LevelData(np.arange(len(perm)), l1.coords[perm], ptr, np.concatenate(rows), l1.fallback[perm])]
    l2 = h.levels[1]
    levels.append(LevelData(inv[l2.parent_indices], l2.coords, l2.nbr_ptr, inv[l2.nbr_idx], l2.fallback))
    levels += h.levels[2:]
    return Hierarchy(levels, h.radii, h.grid_sizes, h.max_neighbors, h.interp_idx[perm], h.interp_w[perm])


def test_permutation_equivariance(backend):
    case, cfg = toy_case(60, 4)
    params = randomized(init_params(cfg, dtype=np.float64), np.random.default_rng(4))
    feats = input_features(case.points, cfg, np.float64)
    perm = np.random.default_rng(5).permutation(60)
    a, _ = forward(feats, case.hierarchy, params, cfg)
    b, _ = forward(feats[perm], permuted_hierarchy(case.hierarchy, perm), params, cfg)
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-10)


def test_translation_leaves_predictions_unchanged():
    image, mask, labels = phantom.generate(phantom.PhantomSpec())
    cfg = ModelConfig.desk()
    params = randomized(init_params(cfg), np.random.default_rng(6), 0.05).astype(np.float32)
    out = []
    for origin in ((0.0, 0.0, 0.0), (-40.0, 12.5, 300.0)):
        g = VolumeGeometry(image.geometry.spacing, np.eye(3), origin, image.geometry.dims)
        pts = extract_liver_points(type(image)(g, image.values), type(mask)(g, mask.values, "mask"))
        case = make_case("t", pts, cfg)
        out.append(forward(input_features(pts, cfg), case.hierarchy, params, cfg)[0])
    assert np.array_equal(out[0], out[1])


# -- inference -------------------------------------------------------------------------


def test_argmax_and_tie():
    logits = np.array([[0.1, 3.0, 0, 0, 0, 0, 0, 0], [0, 0, 7.0, 0, 0, 7.0, 0, 0]])
    assert predict_labels(logits).tolist() == [1, 2]


def test_labels_to_volume_roundtrip():
    image, mask, labels = phantom.generate(phantom.PhantomSpec())
    pts = extract_liver_points(image, mask, labels)
    vol = labels_to_volume(pts, pts.labels, image.geometry)
    assert np.array_equal(vol.values, labels.values * mask.values)


# -- training -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def two_cases():
    cfg = ModelConfig.desk()
    specs = phantom.jittered_specs(2, phantom.PhantomSpec(), seed=3)
    cases = []
    for i, spec in enumerate(specs):
        image, mask, labels = phantom.generate(spec)
        cases.append(make_case(f"c{i}", extract_liver_points(image, mask, labels), cfg))
    return cases, cfg


def test_zero_lr_is_fixed_point(two_cases):
    cases, cfg = two_cases
    start = init_params(cfg, seed=1)
    state = train(cases, cfg, TrainConfig.desk(epochs=3, lr=0.0), params=start.copy())
    for k in start.names():
        assert state.params[k].tobytes() == start[k].tobytes()


def test_thirty_epochs_reduce_loss(two_cases):
    cases, cfg = two_cases
    state = train(cases, cfg, TrainConfig.desk(seed=0))  # seed recorded: 0
    assert len(state.loss_curve) == 30
    assert state.loss_curve[-1] < state.loss_curve[0]


def test_checkpoints_are_reproducible(two_cases, tmp_path):
    cases, cfg = two_cases
    for run in ("a", "b"):
        train(cases, cfg, TrainConfig.desk(epochs=2, seed=7), out_dir=tmp_path / run)
    for ext in (".json", ".bin"):
        assert (tmp_path / "a" / f"checkpoint_final{ext}").read_bytes() == \
               (tmp_path / "b" / f"checkpoint_final{ext}").read_bytes()
    state, mcfg, tcfg = load_checkpoint(tmp_path / "a" / "checkpoint_final")
    assert mcfg == cfg and tcfg.seed == 7 and state.epoch == 2
    logits = infer(cases[0].points, cases[0].hierarchy, state.params, mcfg)
    assert logits.shape == (len(cases[0].points),)


def test_checkpoint_roundtrip_is_lossless(two_cases, tmp_path):
    from couinseg.model.train import TrainState, save_checkpoint

    _, cfg = two_cases
    params = init_params(cfg, seed=3)
    state = TrainState(params, {k: np.full_like(v, 0.5) for k, v in params.values.items()}, 4, 3, 1.5, [2.0, 1.5])
    save_checkpoint(tmp_path / "ck", state, cfg, TrainConfig())
    back, mcfg, tcfg = load_checkpoint(tmp_path / "ck.json")
    assert all(back.params[k].tobytes() == params[k].tobytes() for k in params.names())
    assert back.momentum["head.b0"].tolist() == [0.5] * 64
    assert back.epoch == 4 and back.loss_curve == [2.0, 1.5] and mcfg == cfg and tcfg == TrainConfig()


# -- ablation and FLOPs ------------------------------------------------------------------


def test_ablation_parameter_allocation():
    names = {v: set(init_params(ModelConfig.ablation(v)).names()) for v in "abcd"}
    has = lambda v, tag: any(f".{tag}" in n for n in names[v])  # noqa: E731
    assert not has("a", "emb") and not has("a", "gr")
    assert has("b", "emb") and not has("b", "gr")
    assert not has("c", "emb") and has("c", "gr")
    assert has("d", "emb") and has("d", "gr")
    assert names["a"] < names["b"] < names["d"] and names["a"] < names["c"] < names["d"]
    assert names["d"] == names["b"] | names["c"]


def test_model_config_checks():
    with pytest.raises(ConfigError):
        ModelConfig(head=(64, 7))
    with pytest.raises(ConfigError):
        ModelConfig(channels=(8, 8, 8))
    assert ModelConfig().grid_size_level1 == 64 and ModelConfig().radius_level1 == 1 / 128
    assert ModelConfig().channels == (32, 64, 128, 256) and ModelConfig().head == (64, 8)
    t = TrainConfig()
    assert (t.lr, t.momentum, t.sample_fraction, t.epochs) == (0.01, 0.98, 0.1, 400)


def test_linear_flop_example():
    assert flops.linear_flops(1, 2, 3) == 12


def test_conv_flops_scale_with_grid_volume():
    a = count_flops(ModelConfig.desk(grid_size_level1=16), 5000).by_category["conv"]
    b = count_flops(ModelConfig.desk(grid_size_level1=32), 5000).by_category["conv"]
    assert b == 8 * a


def test_disabled_paths_cost_nothing():
    rep = count_flops(ModelConfig.ablation("a"), 5000)
    assert rep.by_category["conv"] == rep.by_category["attention"] == rep.by_category["grid_io"] == 0
    c = count_flops(ModelConfig.ablation("c"), 5000)
    assert c.by_category["conv"] == 0 and c.by_category["attention"] > 0


def test_flops_from_hierarchy_sizes():
    case, cfg = toy_case(100, 9)
    rep = flops.count_flops_for_hierarchy(cfg, case.hierarchy)
    sizes = [len(lv) for lv in case.hierarchy.levels]
    assert rep.total == count_flops(cfg, 100, [lv.padded().shape[1] for lv in case.hierarchy.levels], sizes).total
