"""Dynamic graph reasoning over a voxel grid.

Each voxel attends to 27 positions sampled around it at learned offsets:

    out[u] = sum_m softmax_m(<q[u], k~[u, m]> / sqrt(C) + pos[m]) * v~[u, m]

where ``k~`` and ``v~`` are keys and values deformably unfolded at
``base(u, m) + delta[u, m]`` and ``delta = X w_off + b_off``.
"""
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .dense import softmax_backward, softmax_forward
from .grid import to_channels_first, to_channels_last, unfold_cl_backward, unfold_cl_forward

N_SAMPLES = 27
PARAM_NAMES = ("wq", "wk", "wv", "w_off", "b_off", "pos")


@dataclass
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    w_off: np.ndarray  # (C, 3 * 27)
    b_off: np.ndarray  # (3 * 27,)
    pos: np.ndarray  # (27,)

    def __post_init__(self):
        c = self.wq.shape[0]
        for name in ("wq", "wk", "wv"):
            if getattr(self, name).shape != (c, c):
                raise ConfigError(f"{name} must be ({c}, {c})")
        if self.w_off.shape != (c, 3 * N_SAMPLES) or self.b_off.shape != (3 * N_SAMPLES,):
            raise ConfigError("offset predictor must map C -> 3 x 27")
        if self.pos.shape != (N_SAMPLES,):
            raise ConfigError("positional embedding must have 27 entries")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in PARAM_NAMES})

    def as_dict(self):
        return {k: getattr(self, k) for k in PARAM_NAMES}

    @property
    def channels(self):
        return self.wq.shape[0]


def graph_reason_forward(fgrid, params: AttentionParams):
    c, m = fgrid.shape[0], fgrid.shape[1]
    if c != params.channels:
        raise ConfigError(f"attention width {params.channels} does not match grid channels {c}")
    v = m**3
    x = to_channels_last(fgrid)
    q = x @ params.wq
    k = np.ascontiguousarray(x @ params.wk)
    val = np.ascontiguousarray(x @ params.wv)
    offsets = (x @ params.w_off + params.b_off).reshape(v, N_SAMPLES, 3)
    ks, kcache = unfold_cl_forward(k, m, offsets)
    vs, vcache = unfold_cl_forward(val, m, offsets)
    scale = 1.0 / float(np.sqrt(c))
    logits = (ks @ q[:, :, None])[:, :, 0] * scale + params.pos
    weights, scache = softmax_forward(logits, axis=1)
    out = (weights[:, None, :] @ vs)[:, 0, :]
    cache = dict(x=x, q=q, ks=ks, vs=vs, kcache=kcache, vcache=vcache, scache=scache,
                 weights=weights, scale=scale, params=params, m=m)
    return to_channels_first(out, m), cache


def graph_reason_backward(dout, cache):
    """Returns ``(dfgrid, grads)`` with ``grads`` keyed by parameter name."""
    p = cache["params"]
    m, scale, weights = cache["m"], cache["scale"], cache["weights"]
    x, q, ks, vs = cache["x"], cache["q"], cache["ks"], cache["vs"]
    v = m**3
    dout = to_channels_last(dout)
    dweights = (vs @ dout[:, :, None])[:, :, 0]
    dvs = weights[:, :, None] * dout[:, None, :]
    dlogits = softmax_backward(dweights, cache["scache"])
    grads = {"pos": dlogits.sum(axis=0)}
    dq = (dlogits[:, None, :] @ ks)[:, 0, :] * scale
    dks = dlogits[:, :, None] * q[:, None, :] * scale
    dk, doff_k = unfold_cl_backward(dks, cache["kcache"])
    dv, doff_v = unfold_cl_backward(dvs, cache["vcache"])
    doff = (doff_k + doff_v).reshape(v, 3 * N_SAMPLES)
    grads["wq"] = x.T @ dq
    grads["wk"] = x.T @ dk
    grads["wv"] = x.T @ dv
    grads["w_off"] = x.T @ doff
    grads["b_off"] = doff.sum(axis=0)
    dx = dq @ p.wq.T + dk @ p.wk.T + dv @ p.wv.T + doff @ p.w_off.T
    return to_channels_first(dx, m), grads
