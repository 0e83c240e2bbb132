"""Dense numeric kernels with explicit forward/backward pairs.

Every kernel operates on the trailing axes of numpy arrays, so the same code
serves a single ``rows x cols`` matrix and a stacked ``(batch, heads, T, d)``
tensor. Storage is float32 for normal use; feeding float64 arrays runs the
whole computation in 64-bit, which is what the gradient checks rely on.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

MASK_VALUE = -1e9
GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


# -- matmul -----------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, dc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dA = dC Bᵀ, dB = Aᵀ dC (batched over leading axes)."""
    return dc @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ dc


# -- softmax ----------------------------------------------------------------


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


# -- layer norm -------------------------------------------------------------


def layer_norm(x, gamma, beta, eps: float = 1e-12, return_cache: bool = False):
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ShapeError("layer_norm: gamma/beta length must equal cols")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gamma + beta
    if return_cache:
        return y, (xhat, rstd, gamma)
    return y


def layer_norm_backward(cache, dy: np.ndarray):
    """Returns (dx, dgamma, dbeta); dgamma/dbeta summed over all leading axes."""
    xhat, rstd, gamma = cache
    n = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    g = dy * gamma
    dx = rstd * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True) / n)
    return dx, dgamma, dbeta


# -- gelu -------------------------------------------------------------------


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(GELU_C * (x + 0.044715 * (x2 * x)))
    du = GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


# -- attention --------------------------------------------------------------


def additive_mask(attention_mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """{0,1} key mask -> additive row vector with MASK_VALUE at padded keys."""
    return ((1.0 - attention_mask) * MASK_VALUE).astype(dtype)


def attention(q, k, v, mask=None, return_cache: bool = False):
    """softmax(q kᵀ / sqrt(d_h) + mask) v.

    ``mask`` is additive and broadcast against the score matrix, so a row
    vector of shape ``(T_k,)`` (or ``(batch, 1, 1, T_k)``) masks keys.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible q{q.shape} k{k.shape} v{v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        scores = scores + mask
    p = softmax_rows(scores)
    out = p @ v
    if return_cache:
        return out, (q, k, v, p, scale)
    return out


def attention_backward(cache, dout: np.ndarray):
    q, k, v, p, scale = cache
    dp = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(p, -1, -2) @ dout
    ds = softmax_backward(p, dp) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq, dk, dv


# -- gradient checking ------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """‖a − n‖ / max(‖a‖, ‖n‖); 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


class SkippedCheck(Exception):
    """Raised by a kernel checker for a non-differentiable input regime."""


def _check_matmul(rng, shapes):
    (m, k), (_, n) = shapes
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    r = rng.standard_normal((m, n))
    da, db = matmul_backward(a, b, r)
    f = lambda: float((matmul(a, b) * r).sum())
    return max(relative_error(da, numeric_grad(f, a)), relative_error(db, numeric_grad(f, b)))


def _check_softmax(rng, shapes):
    (shape,) = shapes
    x, r = rng.standard_normal(shape), rng.standard_normal(shape)
    dx = softmax_backward(softmax_rows(x), r)
    return relative_error(dx, numeric_grad(lambda: float((softmax_rows(x) * r).sum()), x))


def _check_layer_norm(rng, shapes, constant: bool = False):
    (shape,) = shapes
    x = np.full(shape, 0.7) if constant else rng.standard_normal(shape)
    if np.any(x.std(axis=-1) < 1e-6):
        raise SkippedCheck("layer_norm on zero-variance rows is not differentiable at eps=1e-12")
    gamma, beta = rng.standard_normal(shape[-1]), rng.standard_normal(shape[-1])
    r = rng.standard_normal(shape)
    _, cache = layer_norm(x, gamma, beta, return_cache=True)
    dx, dg, db = layer_norm_backward(cache, r)
    f = lambda: float((layer_norm(x, gamma, beta) * r).sum())
    return max(
        relative_error(dx, numeric_grad(f, x)),
        relative_error(dg, numeric_grad(f, gamma)),
        relative_error(db, numeric_grad(f, beta)),
    )


def _check_gelu(rng, shapes):
    (shape,) = shapes
    x, r = rng.standard_normal(shape), rng.standard_normal(shape)
    return relative_error(gelu_backward(x, r), numeric_grad(lambda: float((gelu(x) * r).sum()), x))


def _check_attention(rng, shapes):
    (tq, d), (tk, _) = shapes
    q, k, v = rng.standard_normal((tq, d)), rng.standard_normal((tk, d)), rng.standard_normal((tk, d))
    mask = np.zeros(tk)
    mask[-1] = MASK_VALUE if tk > 1 else 0.0
    r = rng.standard_normal((tq, d))
    _, cache = attention(q, k, v, mask, return_cache=True)
    dq, dk, dv = attention_backward(cache, r)
    f = lambda: float((attention(q, k, v, mask) * r).sum())
    return max(
        relative_error(dq, numeric_grad(f, q)),
        relative_error(dk, numeric_grad(f, k)),
        relative_error(dv, numeric_grad(f, v)),
    )


KERNELS = {
    "matmul": (_check_matmul, [(3, 4), (4, 5)]),
    "softmax_rows": (_check_softmax, [(3, 5)]),
    "layer_norm": (_check_layer_norm, [(3, 6)]),
    "layer_norm_constant": (lambda rng, s: _check_layer_norm(rng, s, constant=True), [(2, 4)]),
    "gelu": (_check_gelu, [(2, 2)]),
    "attention": (_check_attention, [(3, 4), (5, 4)]),
}


def grad_check(kernel: str, shapes=None, seed: int = 0) -> float | None:
    """Max relative error of a kernel's analytic backward vs central differences.

    Runs in float64. Returns None when the input regime is non-differentiable
    (e.g. layer norm of a constant row), which callers report as skipped.
    """
    if kernel not in KERNELS:
        raise KeyError(f"unknown kernel {kernel!r}; known: {sorted(KERNELS)}")
    fn, default_shapes = KERNELS[kernel]
    rng = np.random.default_rng(seed)
    try:
        return fn(rng, shapes or default_shapes)
    except SkippedCheck:
        return None
