"""Central finite-difference gradient checking and the per-op check suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import attention, conv, dense, grid

DEFAULT_STEP = 1e-4
DEFAULT_TOL = 1e-4


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: dict = field(default_factory=dict)
    tol: float = DEFAULT_TOL
    n_slots: int = 0

    @property
    def passed(self):
        return self.max_rel_err <= self.tol


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def grad_check(loss_fn, inputs, analytic, step=DEFAULT_STEP, tol=DEFAULT_TOL, slots=None, rng=None):
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``inputs`` maps names to float64 arrays that ``loss_fn(inputs)`` reads;
    they are perturbed in place and restored.  Only names present in
    ``analytic`` are checked.  ``slots`` optionally caps the number of
    scalar entries checked per input (sampled with ``rng``).
    """
    per_input = {}
    n_slots = 0
    for name, grad in analytic.items():
        arr = inputs[name]
        flat = arr.reshape(-1)
        assert flat.base is arr or flat is arr or np.shares_memory(flat, arr)
        g = np.asarray(grad, dtype=np.float64).reshape(-1)
        idx = np.arange(flat.size)
        if slots is not None and flat.size > slots:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, slots, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn(inputs)
            flat[i] = orig - step
            fm = loss_fn(inputs)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            worst = max(worst, float(rel_err(g[i], num)))
        per_input[name] = worst
        n_slots += len(idx)
    top = max(per_input.values()) if per_input else 0.0
    return GradCheckReport(top, per_input, tol, n_slots)


# -- per-op suite ----------------------------------------------------------------
# Each builder returns (loss_fn, inputs, analytic) at float64.  Random
# instances are redrawn until they sit at least a margin away from the kinks
# of ReLU and of trilinear interpolation, where one-sided and central
# derivatives legitimately disagree.

_KINK_MARGIN = 1e-3


def _projection(rng, shape):
    return rng.standard_normal(shape)


def _build_linear(rng, size):
    x = rng.standard_normal((5, 4))
    w = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)
    r = _projection(rng, (5, 3))
    inputs = dict(x=x, w=w, b=b)

    def loss(inp):
        return float((dense.linear_forward(inp["x"], inp["w"], inp["b"])[0] * r).sum())

    _, cache = dense.linear_forward(x, w, b)
    dx, dw, db = dense.linear_backward(r, cache)
    return loss, inputs, dict(x=dx, w=dw, b=db)


def _build_mlp(rng, size):
    while True:
        x = rng.standard_normal((6, 4))
        layers = [(rng.standard_normal((4, 5)), rng.standard_normal(5)),
                  (rng.standard_normal((5, 3)), rng.standard_normal(3))]
        if np.abs(x @ layers[0][0] + layers[0][1]).min() > _KINK_MARGIN:
            break
    r = _projection(rng, (6, 3))
    inputs = dict(x=x, w0=layers[0][0], b0=layers[0][1], w1=layers[1][0], b1=layers[1][1])

    def unpack(inp):
        return [(inp["w0"], inp["b0"]), (inp["w1"], inp["b1"])]

    def loss(inp):
        return float((dense.mlp_forward(inp["x"], unpack(inp))[0] * r).sum())

    _, caches = dense.mlp_forward(x, layers)
    dx, g = dense.mlp_backward(r, caches)
    return loss, inputs, dict(x=dx, w0=g[0][0], b0=g[0][1], w1=g[1][0], b1=g[1][1])


def _build_softmax(rng, size):
    x = rng.standard_normal((5, 6))
    r = _projection(rng, (5, 6))
    inputs = dict(x=x)

    def loss(inp):
        return float((dense.softmax_forward(inp["x"], axis=1)[0] * r).sum())

    _, cache = dense.softmax_forward(x, axis=1)
    return loss, inputs, dict(x=dense.softmax_backward(r, cache))


def _build_cross_entropy(rng, size):
    logits = 3 * rng.standard_normal((7, 8))
    labels = rng.integers(0, 8, 7)
    inputs = dict(logits=logits)

    def loss(inp):
        return dense.cross_entropy_forward(inp["logits"], labels)[0]

    _, cache = dense.cross_entropy_forward(logits, labels)
    return loss, inputs, dict(logits=dense.cross_entropy_backward(cache))


def _build_voxelize(rng, size):
    coords = rng.random((20, 3))
    feats = rng.standard_normal((20, 3))
    r = _projection(rng, (3, size, size, size))
    inputs = dict(feats=feats)

    def loss(inp):
        return float((grid.voxelize_forward(inp["feats"], coords, size)[0] * r).sum())

    _, cache = grid.voxelize_forward(feats, coords, size)
    return loss, inputs, dict(feats=grid.voxelize_backward(r, cache))


def _build_devoxelize(rng, size):
    g = rng.standard_normal((3, size, size, size))
    coords = rng.random((15, 3))
    r = _projection(rng, (15, 3))
    inputs = dict(grid=g)

    def loss(inp):
        return float((grid.devoxelize_forward(inp["grid"], coords)[0] * r).sum())

    _, cache = grid.devoxelize_forward(g, coords)
    return loss, inputs, dict(grid=grid.devoxelize_backward(r, cache))


def _block_params(rng, cin, cout):
    p = {
        "w1": rng.standard_normal((cout, cin, 3, 3, 3)) * np.sqrt(2.0 / (27 * cin)),
        "b1": 0.1 * rng.standard_normal(cout),
        "w2": rng.standard_normal((cout, cout, 3, 3, 3)) * np.sqrt(2.0 / (27 * cout)),
        "b2": 0.1 * rng.standard_normal(cout),
    }
    if cin != cout:
        p["proj"] = rng.standard_normal((cout, cin))
    return p


def _build_residual_conv3d(rng, size):
    cin, cout = 3, (3 if size % 2 else 4)
    while True:
        x = rng.standard_normal((cin, size, size, size))
        p = _block_params(rng, cin, cout)
        h1 = conv.conv3d_forward(x, p["w1"], p["b1"])[0]
        h2 = conv.conv3d_forward(np.maximum(h1, 0), p["w2"], p["b2"])[0]
        if min(np.abs(h1).min(), np.abs(h2).min()) > _KINK_MARGIN:
            break
    r = _projection(rng, (cout, size, size, size))
    inputs = dict(x=x, **p)

    def loss(inp):
        params = {k: inp[k] for k in p}
        return float((conv.residual_conv3d_forward(inp["x"], params)[0] * r).sum())

    _, cache = conv.residual_conv3d_forward(x, p)
    dx, grads = conv.residual_conv3d_backward(r, cache)
    return loss, inputs, dict(x=dx, **grads)


def _frac_margin(a):
    f = a - np.floor(a)
    return np.minimum(f, 1 - f).min()


def _build_deformable_unfold(rng, size):
    v = size**3
    g = rng.standard_normal((3, size, size, size))
    # integer part plus a fraction kept clear of the interpolation kinks
    offsets = rng.integers(-2, 2, (v, 27, 3)) + rng.uniform(0.05, 0.95, (v, 27, 3))
    r = _projection(rng, (v, 27, 3))
    inputs = dict(grid=g, offsets=offsets)

    def loss(inp):
        return float((grid.deformable_unfold_forward(inp["grid"], inp["offsets"])[0] * r).sum())

    _, cache = grid.deformable_unfold_forward(g, offsets)
    dg, doff = grid.deformable_unfold_backward(r, cache)
    return loss, inputs, dict(grid=dg, offsets=doff)


def random_attention_params(rng, c, offset_scale=0.02):
    """Parameters whose predicted offsets stay clear of integer voxel positions."""
    return attention.AttentionParams(
        wq=rng.standard_normal((c, c)) / np.sqrt(c),
        wk=rng.standard_normal((c, c)) / np.sqrt(c),
        wv=rng.standard_normal((c, c)) / np.sqrt(c),
        w_off=offset_scale * rng.standard_normal((c, 81)),
        b_off=rng.choice([-1, 1], 81) * rng.uniform(0.3, 0.7, 81),
        pos=0.5 * rng.standard_normal(27),
    )


def _build_graph_reason(rng, size):
    c = 4
    while True:
        fgrid = rng.standard_normal((c, size, size, size))
        p = random_attention_params(rng, c)
        x = grid.to_channels_last(fgrid)
        if _frac_margin(x @ p.w_off + p.b_off) > 10 * _KINK_MARGIN:
            break
    r = _projection(rng, (c, size, size, size))
    inputs = dict(fgrid=fgrid, **p.as_dict())

    def loss(inp):
        params = attention.AttentionParams.from_dict(inp)
        return float((attention.graph_reason_forward(inp["fgrid"], params)[0] * r).sum())

    _, cache = attention.graph_reason_forward(fgrid, p)
    dx, grads = attention.graph_reason_backward(r, cache)
    return loss, inputs, dict(fgrid=dx, **grads)


SUITE = {
    "voxelize": _build_voxelize,
    "devoxelize": _build_devoxelize,
    "residual_conv3d": _build_residual_conv3d,
    "deformable_unfold": _build_deformable_unfold,
    "graph_reason": _build_graph_reason,
    "linear": _build_linear,
    "mlp": _build_mlp,
    "softmax": _build_softmax,
    "cross_entropy": _build_cross_entropy,
}


def check_op(name, seed, step=DEFAULT_STEP, tol=DEFAULT_TOL):
    """Finite-difference check of one op on a seeded random f64 instance (grid 3^3 or 4^3)."""
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    size = 3 + seed % 2
    loss_fn, inputs, analytic = SUITE[name](rng, size)
    return grad_check(loss_fn, inputs, analytic, step=step, tol=tol)


def run_suite(names=None, seeds=range(10), step=DEFAULT_STEP, tol=DEFAULT_TOL):
    """``{op: (max_rel_err over seeds, seconds)}`` for every requested op."""
    results = {}
    for name in names or SUITE:
        t0 = time.perf_counter()
        worst = max(check_op(name, s, step, tol).max_rel_err for s in seeds)
        results[name] = (worst, time.perf_counter() - t0)
    return results
