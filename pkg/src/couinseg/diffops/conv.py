"""3x3x3 convolutions (stride 1, zero padding 1) and the residual block."""
import numpy as np

from ..errors import ConfigError
from .dense import relu_backward, relu_forward

_TAPS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]


def _im2col(x):
    cin, m = x.shape[0], x.shape[1]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((cin, 27, m, m, m), dtype=x.dtype)
    for t, (a, b, c) in enumerate(_TAPS):
        cols[:, t] = xp[:, a : a + m, b : b + m, c : c + m]
    return cols.reshape(cin * 27, m**3)


def _col2im(dcols, cin, m):
    dcols = dcols.reshape(cin, 27, m, m, m)
    dxp = np.zeros((cin, m + 2, m + 2, m + 2), dtype=dcols.dtype)
    for t, (a, b, c) in enumerate(_TAPS):
        dxp[:, a : a + m, b : b + m, c : c + m] += dcols[:, t]
    return dxp[:, 1:-1, 1:-1, 1:-1]


def conv3d_forward(x, w, b):
    """``x`` (Cin, M, M, M), ``w`` (Cout, Cin, 3, 3, 3), ``b`` (Cout,)."""
    cout, m = w.shape[0], x.shape[1]
    cols = _im2col(x)
    out = w.reshape(cout, -1) @ cols + b[:, None]
    return out.reshape(cout, m, m, m), (cols, w, x.shape)


def conv3d_backward(dout, cache):
    cols, w, xshape = cache
    cout = w.shape[0]
    d2 = dout.reshape(cout, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dx = _col2im(w.reshape(cout, -1).T @ d2, xshape[0], xshape[1])
    return dx, dw, db


def residual_conv3d_forward(x, params):
    """``relu(conv2(relu(conv1(x)))) + proj(x)``.

    ``params`` holds ``w1, b1, w2, b2`` and, when input and output widths
    differ, a bias-free 1x1x1 projection ``proj`` of shape (Cout, Cin).
    """
    cin = x.shape[0]
    cout = params["w1"].shape[0]
    if cin != params["w1"].shape[1]:
        raise ConfigError(f"block expects {params['w1'].shape[1]} input channels, got {cin}")
    has_proj = "proj" in params
    if cin != cout and not has_proj:
        raise ConfigError(f"channel change {cin}->{cout} needs a projection")
    h1, c1 = conv3d_forward(x, params["w1"], params["b1"])
    a1, m1 = relu_forward(h1)
    h2, c2 = conv3d_forward(a1, params["w2"], params["b2"])
    a2, m2 = relu_forward(h2)
    if has_proj:
        skip = np.tensordot(params["proj"], x, axes=(1, 0))
    else:
        skip = x
    return a2 + skip, (c1, m1, c2, m2, x if has_proj else None, params.get("proj"))


def residual_conv3d_backward(dout, cache):
    """Returns ``(dx, grads)`` with ``grads`` keyed like the params."""
    c1, m1, c2, m2, x, proj = cache
    grads = {}
    da1, grads["w2"], grads["b2"] = conv3d_backward(relu_backward(dout, m2), c2)
    dx, grads["w1"], grads["b1"] = conv3d_backward(relu_backward(da1, m1), c1)
    if proj is not None:
        cout, cin = proj.shape
        grads["proj"] = dout.reshape(cout, -1) @ x.reshape(cin, -1).T
        dx = dx + np.tensordot(proj, dout, axes=(0, 0))
    else:
        dx = dx + dout
    return dx, grads
