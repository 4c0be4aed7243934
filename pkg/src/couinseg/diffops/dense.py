"""Row-wise dense ops: linear, ReLU, MLP, softmax and cross-entropy.

Every op comes as a ``*_forward`` returning ``(out, cache)`` and a
``*_backward`` consuming the upstream gradient and that cache.
"""
import numpy as np

from ..errors import LabelError


def linear_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(dy, cache):
    """Returns ``(dx, dw, db)``; ``db`` is None for a bias-free layer."""
    x, w, has_bias = cache
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0) if has_bias else None
    return dx, dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def mlp_forward(x, layers):
    """``layers`` is a list of ``(w, b)``; ReLU between layers, none after the last."""
    caches = []
    h = x
    for i, (w, b) in enumerate(layers):
        h, lc = linear_forward(h, w, b)
        mask = None
        if i < len(layers) - 1:
            h, mask = relu_forward(h)
        caches.append((lc, mask))
    return h, caches


def mlp_backward(dy, caches):
    """Returns ``(dx, [(dw, db), ...])`` in layer order."""
    grads = []
    for lc, mask in reversed(caches):
        if mask is not None:
            dy = relu_backward(dy, mask)
        dy, dw, db = linear_backward(dy, lc)
        grads.append((dw, db))
    return dy, grads[::-1]


def softmax_forward(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def softmax_backward(dy, cache):
    y, axis = cache
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def cross_entropy_forward(logits, labels):
    """Mean negative log-likelihood over rows, log-sum-exp stabilized."""
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or (labels < 0).any() or (labels >= c).any():
        raise LabelError(f"labels must be {n} ids in 0..{c - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    return loss, (z, lse, labels)


def cross_entropy_backward(cache, dloss=1.0):
    z, lse, labels = cache
    n = len(labels)
    p = np.exp(z - lse[:, None])
    p[np.arange(n), labels] -= 1.0
    return p * (dloss / n)
