"""Four-level point network with grid embeddings and graph reasoning.

Per level ``i``:

    x_i = aggregate(x_{i-1} over ball-query neighbours)
    g   = voxelize(x_i)                      if either grid block is enabled
    g   = res_block(res_block(g))            if grid embeddings are enabled
    g   = graph_reason(g)                    if graph reasoning is enabled
    x_i = x_i + devoxelize(g)                if either grid block is enabled

After level 4 the features are interpolated onto every input point (inverse
distance, 3 nearest level-4 points), optionally joined with the level-1
features, and classified by a two-layer MLP.
"""
from __future__ import annotations

import collections
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..diffops import attention, conv, dense
from ..diffops import grid as gridops
from ..errors import ConfigError
from ..volume import PointCloud, Volume
from .config import ModelConfig

# incremented on every grid-path op invocation; the ablation tests read it
OP_CALLS = collections.Counter()

ATTN_NAMES = attention.PARAM_NAMES
BLOCK_NAMES = ("w1", "b1", "w2", "b2")


class ModelParams:
    """Named parameter arrays plus same-shape gradient slots."""

    def __init__(self, values: dict):
        self.values = dict(values)
        self.grads = {k: np.zeros_like(v) for k, v in self.values.items()}

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def names(self):
        return list(self.values)

    def count(self):
        return int(sum(v.size for v in self.values.values()))

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    def astype(self, dtype):
        return ModelParams({k: v.astype(dtype) for k, v in self.values.items()})

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.values.items()})

    def group(self, prefix):
        """Sub-dict of parameters under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}


def _kaiming(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(config: ModelConfig, seed=0, dtype=np.float32) -> ModelParams:
    """Kaiming-uniform weights, zero biases; offsets and positional terms start at zero."""
    rng = np.random.default_rng([seed, 0x1417])
    p = {}
    prev = config.input_channels
    for i, c in enumerate(config.channels):
        lv = f"level{i + 1}"
        fan = prev + 3
        p[f"{lv}.agg.w_feat"] = _kaiming(rng, fan, (prev, c))
        p[f"{lv}.agg.w_rel"] = _kaiming(rng, fan, (3, c))
        p[f"{lv}.agg.b"] = np.zeros(c)
        if config.enable_grid_embeddings:
            for j in range(2):
                p[f"{lv}.emb{j}.w1"] = _kaiming(rng, 27 * c, (c, c, 3, 3, 3))
                p[f"{lv}.emb{j}.b1"] = np.zeros(c)
                p[f"{lv}.emb{j}.w2"] = np.zeros((c, c, 3, 3, 3))  # block starts as identity
                p[f"{lv}.emb{j}.b2"] = np.zeros(c)
        if config.enable_graph_reasoning:
            for name in ("wq", "wk", "wv"):
                p[f"{lv}.gr.{name}"] = _kaiming(rng, c, (c, c))
            p[f"{lv}.gr.w_off"] = np.zeros((c, 81))
            p[f"{lv}.gr.b_off"] = np.zeros(81)
            p[f"{lv}.gr.pos"] = np.zeros(27)
        prev = c
    width = config.channels[-1] + (config.channels[0] if config.head_skip else 0)
    for j, out in enumerate(config.head):
        last = j == len(config.head) - 1
        p[f"head.w{j}"] = np.zeros((width, out)) if last else _kaiming(rng, width, (width, out))
        p[f"head.b{j}"] = np.zeros(out)
        width = out
    return ModelParams({k: v.astype(dtype) for k, v in p.items()})


def input_features(points: PointCloud, config: ModelConfig, dtype=np.float32):
    feats = points.feats.astype(dtype)
    if config.input_coords:
        # centred so that zero-bias units can split the volume through its middle
        feats = np.concatenate([feats, (2 * points.coords - 1).astype(dtype)], axis=1)
    return np.ascontiguousarray(feats)


# -- point aggregation -------------------------------------------------------


def point_aggregate_forward(prev_feats, src_coords, query_coords, nbr, w_feat, w_rel, b, radius=1.0):
    """``out[j] = max_n relu(W [prev(n), (coord(n) - coord(j)) / radius] + b)`` over neighbours ``n``.

    ``nbr`` is a dense (Q, K) neighbour table (short rows padded by repetition).
    """
    assert nbr.size and (nbr >= 0).all()
    dtype = prev_feats.dtype
    f = prev_feats @ w_feat
    rel = ((src_coords[nbr] - query_coords[:, None, :]) / radius).astype(dtype)
    h = f[nbr] + rel @ w_rel + b
    arg = h.argmax(axis=1)  # (Q, C), first maximum
    hmax = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0, :]
    out, mask = dense.relu_forward(hmax)
    return out, (prev_feats, nbr, rel, arg, mask, w_feat, f.shape[0])


def point_aggregate_backward(dout, cache, need_input_grad=True):
    """Returns ``(dprev, dw_feat, dw_rel, db)``; ``dprev`` is None when not needed."""
    prev_feats, nbr, rel, arg, mask, w_feat, n_src = cache
    q, c = dout.shape
    dh = dout * mask
    src = np.take_along_axis(nbr, arg, axis=1)  # (Q, C) chosen neighbour per channel
    flat = (src * c + np.arange(c)[None, :]).ravel()
    df = np.bincount(flat, weights=dh.ravel(), minlength=n_src * c).reshape(n_src, c)
    df = df.astype(dout.dtype)
    rel_sel = np.take_along_axis(rel, arg[:, :, None], axis=1)  # (Q, C, 3)
    dw_rel = np.einsum("qcd,qc->dc", rel_sel, dh)
    db = dh.sum(axis=0)
    dw_feat = prev_feats.T @ df
    dprev = df @ w_feat.T if need_input_grad else None
    return dprev, dw_feat, dw_rel, db


# -- whole network -------------------------------------------------------------


@dataclass
class _LevelCache:
    agg: tuple
    vox: tuple = None
    blocks: list = None
    gr: dict = None
    devox: tuple = None


def _check(config, params, hierarchy):
    if len(hierarchy.levels) != 4 or list(hierarchy.grid_sizes) != config.grid_sizes():
        raise ConfigError("hierarchy was built for a different grid configuration")
    if config.enable_graph_reasoning != ("level1.gr.wq" in params):
        raise ConfigError("parameters do not match the graph-reasoning flag")
    if config.enable_grid_embeddings != ("level1.emb0.w1" in params):
        raise ConfigError("parameters do not match the grid-embedding flag")


def forward(feats, hierarchy, params: ModelParams, config: ModelConfig, sample=None):
    """Per-point logits ``(len(sample), 8)``; ``sample`` defaults to every point."""
    _check(config, params, hierarchy)
    n = len(hierarchy.levels[0])
    if sample is None:
        sample = np.arange(n)
    caches = []
    prev, src_coords = feats, hierarchy.levels[0].coords
    level_feats = []
    for i, lv in enumerate(hierarchy.levels):
        name = f"level{i + 1}"
        x, agg_cache = point_aggregate_forward(
            prev, src_coords, lv.coords, lv.padded(),
            params[f"{name}.agg.w_feat"], params[f"{name}.agg.w_rel"], params[f"{name}.agg.b"],
            hierarchy.radii[i],
        )
        lc = _LevelCache(agg_cache)
        if config.grid_path:
            m = hierarchy.grid_sizes[i]
            OP_CALLS["voxelize"] += 1
            g, lc.vox = gridops.voxelize_forward(x, lv.coords, m)
            if config.enable_grid_embeddings:
                lc.blocks = []
                for j in range(2):
                    OP_CALLS["residual_conv3d"] += 1
                    g, bc = conv.residual_conv3d_forward(g, params.group(f"{name}.emb{j}"))
                    lc.blocks.append(bc)
            if config.enable_graph_reasoning:
                OP_CALLS["graph_reason"] += 1
                attn = attention.AttentionParams.from_dict(params.group(f"{name}.gr"))
                g, lc.gr = attention.graph_reason_forward(g, attn)
            OP_CALLS["devoxelize"] += 1
            d, lc.devox = gridops.devoxelize_forward(g, lv.coords)
            x = x + d
        caches.append(lc)
        level_feats.append(x)
        prev, src_coords = x, lv.coords

    idx = hierarchy.interp_idx[sample]
    w = hierarchy.interp_w[sample].astype(feats.dtype)
    top = level_feats[-1]
    head_in = (w[:, :, None] * top[idx]).sum(axis=1)
    if config.head_skip:
        head_in = np.concatenate([head_in, config.skip_scale * level_feats[0][sample]], axis=1)
    layers = [(params[f"head.w{j}"], params[f"head.b{j}"]) for j in range(len(config.head))]
    logits, head_cache = dense.mlp_forward(head_in, layers)
    cache = dict(levels=caches, sample=sample, idx=idx, w=w, n_top=len(top),
                 head=head_cache, config=config, params=params, feats_dtype=feats.dtype)
    return logits, cache


def backward(dlogits, cache):
    """Gradients of every parameter, keyed like ``ModelParams``."""
    config, params = cache["config"], cache["params"]
    grads = {}
    dhead_in, head_grads = dense.mlp_backward(dlogits, cache["head"])
    for j, (dw, db) in enumerate(head_grads):
        grads[f"head.w{j}"], grads[f"head.b{j}"] = dw, db
    c_top = config.channels[-1]
    dinterp = dhead_in[:, :c_top]
    idx, w = cache["idx"], cache["w"]
    contrib = (w[:, :, None] * dinterp[:, None, :]).reshape(-1, c_top)
    dx = kernels.scatter_add_rows(cache["n_top"], np.ascontiguousarray(idx.reshape(-1)),
                                  np.ascontiguousarray(contrib))
    dx_skip = None
    if config.head_skip:
        n1 = len(cache["levels"][0].agg[1])
        dx_skip = np.zeros((n1, config.channels[0]), dtype=dhead_in.dtype)
        np.add.at(dx_skip, cache["sample"], config.skip_scale * dhead_in[:, c_top:])

    for i in reversed(range(4)):
        name = f"level{i + 1}"
        lc = cache["levels"][i]
        if i == 0 and dx_skip is not None:
            dx = dx + dx_skip
        d_agg = dx
        if config.grid_path:
            dg = gridops.devoxelize_backward(dx, lc.devox)
            if config.enable_graph_reasoning:
                dg, g_grads = attention.graph_reason_backward(dg, lc.gr)
                for k, v in g_grads.items():
                    grads[f"{name}.gr.{k}"] = v
            if config.enable_grid_embeddings:
                for j in reversed(range(2)):
                    dg, b_grads = conv.residual_conv3d_backward(dg, lc.blocks[j])
                    for k, v in b_grads.items():
                        grads[f"{name}.emb{j}.{k}"] = v
            d_agg = d_agg + gridops.voxelize_backward(dg, lc.vox)
        dprev, dw_feat, dw_rel, db = point_aggregate_backward(d_agg, lc.agg, need_input_grad=i > 0)
        grads[f"{name}.agg.w_feat"], grads[f"{name}.agg.w_rel"], grads[f"{name}.agg.b"] = dw_feat, dw_rel, db
        dx = dprev
    return {k: grads[k].astype(params[k].dtype, copy=False) for k in params.names()}


def loss_and_grads(feats, labels, hierarchy, params, config, sample=None):
    logits, cache = forward(feats, hierarchy, params, config, sample)
    target = labels if sample is None else labels[sample]
    loss, ce_cache = dense.cross_entropy_forward(logits, target)
    grads = backward(dense.cross_entropy_backward(ce_cache).astype(logits.dtype), cache)
    return loss, grads


# -- inference -------------------------------------------------------------------


def predict_labels(logits):
    """Argmax class per row; exact ties resolve to the lowest class id."""
    return np.argmax(logits, axis=1).astype(np.int64)


def infer(points: PointCloud, hierarchy, params: ModelParams, config: ModelConfig):
    logits, _ = forward(input_features(points, config, params["head.w0"].dtype), hierarchy, params, config)
    return predict_labels(logits)


def labels_to_volume(points: PointCloud, labels, geometry) -> Volume:
    """Scatter class ids 0..7 back to their source voxels as segment ids 1..8."""
    values = np.zeros(geometry.dims, dtype=np.uint8)
    v = points.source_voxels
    values[v[:, 0], v[:, 1], v[:, 2]] = np.asarray(labels, dtype=np.uint8) + 1
    return Volume(geometry, values, "label")
