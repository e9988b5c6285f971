"""Dense differentiable primitives with hand-written reverse rules.

Every forward function here has a matching ``*_vjp`` that maps the upstream
gradient to gradients of the inputs. Models and losses compose these rules
explicitly (there is no tape or graph); the finite-difference oracle
``grad_check`` is the single source of truth for their correctness.

Training runs in float32; oracles re-run the same code in float64. All
functions preserve the dtype of their array inputs.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

__all__ = [
    "matmul", "matmul_vjp",
    "add_bias", "add_bias_vjp",
    "tanh", "tanh_vjp",
    "sigmoid", "sigmoid_vjp",
    "multiply", "multiply_vjp",
    "scale", "scale_vjp",
    "softmax", "softmax_vjp",
    "l2_normalize", "l2_normalize_vjp",
    "cosine_similarity", "cosine_similarity_vjp",
    "mean_axis", "mean_axis_vjp",
    "concat", "concat_vjp",
    "logsumexp",
    "grad_check",
]

# Relative-error denominators are floored here so exact-zero gradients do not
# blow up the comparison.
GRAD_CHECK_FLOOR = 1e-8


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def matmul_vjp(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


def add_bias(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x + b


def add_bias_vjp(x: np.ndarray, b: np.ndarray, g: np.ndarray):
    # bias broadcasts over all leading axes
    extra = g.ndim - b.ndim
    gb = g.sum(axis=tuple(range(extra))) if extra else g.copy()
    return g, gb


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_vjp(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``y`` is the forward output."""
    return g * (1.0 - y * y)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluate through tanh so large |x| cannot overflow exp
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid_vjp(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * y * (1.0 - y)


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a * b


def multiply_vjp(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    return g * b, g * a


def scale(x: np.ndarray, s: float) -> np.ndarray:
    return x * s


def scale_vjp(s: float, g: np.ndarray) -> np.ndarray:
    return g * s


def softmax(v: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature softmax with max-subtraction for overflow safety.

    Output is nonnegative and sums to 1 along ``axis``.
    """
    if temperature <= 0.0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    x = np.asarray(v) / temperature
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(y: np.ndarray, g: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """``y`` is the softmax output."""
    inner = (g * y).sum(axis=axis, keepdims=True)
    return y * (g - inner) / temperature


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale rows along ``axis`` to unit norm. Zero-norm rows are an error."""
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("l2_normalize: zero-norm input")
    return x / n


def l2_normalize_vjp(x: np.ndarray, g: np.ndarray, axis: int = -1) -> np.ndarray:
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    y = x / n
    inner = (g * y).sum(axis=axis, keepdims=True)
    return (g - y * inner) / n


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """cos(a, b), clamped to [-1, 1]."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_similarity: zero-norm input")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def cosine_similarity_vjp(a: np.ndarray, b: np.ndarray, g: float):
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    ah = a / na
    bh = b / nb
    c = np.dot(ah, bh)
    ga = g * (bh - c * ah) / na
    gb = g * (ah - c * bh) / nb
    return ga, gb


def mean_axis(x: np.ndarray, axis: int) -> np.ndarray:
    return x.mean(axis=axis)


def mean_axis_vjp(x_shape: tuple, axis: int, g: np.ndarray) -> np.ndarray:
    n = x_shape[axis]
    return np.broadcast_to(np.expand_dims(g, axis) / n, x_shape).copy()


def concat(arrays: list, axis: int) -> np.ndarray:
    return np.concatenate(arrays, axis=axis)


def concat_vjp(sizes: list, axis: int, g: np.ndarray) -> list:
    splits = np.cumsum(sizes)[:-1]
    return np.split(g, splits, axis=axis)


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - m).sum(axis=axis)) + np.squeeze(m, axis=axis)
    return out


def grad_check(
    f: Callable[[Mapping[str, np.ndarray]], tuple],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-4,
) -> float:
    """Central finite-difference oracle for a scalar function.

    ``f(params)`` must return ``(value, grads)`` where ``grads`` maps the same
    names to analytic gradients. Runs in float64. For every entry of every
    parameter, compares the analytic gradient to
    ``(f(p + eps) - f(p - eps)) / (2 eps)`` and returns the worst relative
    error, ``|analytic - fd| / max(|fd|, 1e-8)``.
    """
    base = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    value, grads = f(base)
    if not np.isfinite(value):
        raise ValueError(f"grad_check: non-finite function value {value}")

    worst = 0.0
    for name, p in base.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != p.shape:
            raise ValueError(f"grad_check: gradient shape mismatch for {name}")
        flat = p.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(base)[0])
            flat[i] = orig - eps
            lo = float(f(base)[0])
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            rel = abs(float(aflat[i]) - fd) / max(abs(fd), GRAD_CHECK_FLOOR)
            if rel > worst:
                worst = rel
    return worst
