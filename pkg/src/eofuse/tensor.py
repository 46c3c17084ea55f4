"""Dense float32 tensor kernels with analytic gradients.

Carriers are C-contiguous float32 numpy arrays. Reductions (sums, norms,
softmax denominators) accumulate in float64, so repeated calls on identical
inputs are bit-identical within a process. Each differentiable operation has
a ``*_grad`` companion returning a :class:`GradPair` whose vjp maps an output
cotangent to input cotangents; ``check_gradient`` verifies any scalar-valued
function against central differences.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

f32 = np.float32
f64 = np.float64

KL_EPS = 1e-8


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class DomainError(ValueError):
    """Values lie outside an operation's mathematical domain."""


class EvaluationError(ArithmeticError):
    """An evaluation produced non-finite values."""


class GradPair(NamedTuple):
    """Value of an operation together with its vector-Jacobian product."""

    value: object
    vjp: Callable


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=f32)


def _require_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"{name} produced non-finite values")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (m,k) by b (k,n), accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    out = (a.astype(f64) @ b.astype(f64)).astype(f32)
    _require_finite("matmul", out)
    return out


def matmul_grad(a: np.ndarray, b: np.ndarray) -> GradPair:
    value = matmul(a, b)
    a64 = np.asarray(a, dtype=f64)
    b64 = np.asarray(b, dtype=f64)

    def vjp(dout):
        dout = np.asarray(dout, dtype=f64)
        return dout @ b64.T, a64.T @ dout

    return GradPair(value, vjp)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtracted, f64 sums)."""
    x = np.asarray(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    out = _softmax64(x, axis).astype(f32)
    _require_finite("softmax", out)
    return out


def _softmax64(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x64 = np.asarray(x, dtype=f64)
    shifted = x64 - np.max(x64, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_grad(x: np.ndarray, axis: int = -1) -> GradPair:
    # float64 value so downstream finite-difference checks are not limited
    # by float32 quantization; `softmax` itself is the float32 contract.
    x = np.asarray(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    y = _softmax64(x, axis)

    def vjp(dout):
        dout = np.asarray(dout, dtype=f64)
        inner = np.sum(dout * y, axis=axis, keepdims=True)
        return (y * (dout - inner),)

    return GradPair(y, vjp)


def _check_distribution(name: str, v: np.ndarray) -> np.ndarray:
    v64 = v.astype(f64)
    if np.any(v64 < 0.0):
        raise DomainError(f"{name} has negative entries")
    if abs(float(np.sum(v64)) - 1.0) > 1e-4:
        raise DomainError(f"{name} does not sum to 1 (got {float(np.sum(v64)):.6f})")
    return v64


def kl_divergence(p: np.ndarray, g: np.ndarray) -> float:
    """KL(p || g) with eps-smoothing of both arguments.

    Computes sum_i p_i * log((p_i + eps) / (g_i + eps)) with eps = 1e-8 in
    float64. Inputs must be 1-D distributions (nonnegative, sum within 1e-4
    of one).
    """
    p = np.asarray(p)
    g = np.asarray(g)
    if p.ndim != 1 or g.ndim != 1 or p.shape != g.shape:
        raise DimensionError(f"kl_divergence needs equal-length vectors, got {p.shape} and {g.shape}")
    p64 = _check_distribution("p", p)
    g64 = _check_distribution("g", g)
    val = float(np.sum(p64 * np.log((p64 + KL_EPS) / (g64 + KL_EPS))))
    if not np.isfinite(val):
        raise EvaluationError("kl_divergence produced a non-finite value")
    return val


def kl_divergence_grad(p: np.ndarray, g: np.ndarray) -> GradPair:
    value = kl_divergence(p, g)
    p64 = np.asarray(p, dtype=f64)
    g64 = np.asarray(g, dtype=f64)

    def vjp(dout: float):
        ratio = np.log((p64 + KL_EPS) / (g64 + KL_EPS))
        dp = dout * (ratio + p64 / (p64 + KL_EPS))
        dg = dout * (-p64 / (g64 + KL_EPS))
        return dp, dg

    return GradPair(value, vjp)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two nonzero vectors, clamped to [-1, 1]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    a64 = a.astype(f64)
    b64 = b.astype(f64)
    na = float(np.linalg.norm(a64))
    nb = float(np.linalg.norm(b64))
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine_similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a64, b64) / (na * nb), -1.0, 1.0))


def cosine_similarity_grad(a: np.ndarray, b: np.ndarray) -> GradPair:
    value = cosine_similarity(a, b)
    a64 = np.asarray(a, dtype=f64)
    b64 = np.asarray(b, dtype=f64)
    na = float(np.linalg.norm(a64))
    nb = float(np.linalg.norm(b64))

    def vjp(dout: float):
        # clamp is inactive except exactly at +-1, where it only trims float noise
        da = dout * (b64 / (na * nb) - value * a64 / (na * na))
        db = dout * (a64 / (na * nb) - value * b64 / (nb * nb))
        return da, db

    return GradPair(value, vjp)


def check_gradient(f: Callable[[np.ndarray], tuple], x: np.ndarray, eps: float = 1e-3) -> float:
    """Max relative error between analytic gradient and central differences.

    ``f(x)`` must return ``(value, grad)`` where value is a finite scalar and
    grad has the shape of ``x``. Each coordinate is perturbed by +-eps (the
    actually representable float32 step is used as the divisor) and compared
    as |analytic - numeric| / max(1e-8, |numeric|).
    """
    x = as_f32(x).copy()
    value, grad = f(x)
    if not np.isfinite(value):
        raise EvaluationError("f(x) is not finite")
    grad = np.asarray(grad, dtype=f64)
    if grad.shape != x.shape:
        raise DimensionError(f"gradient shape {grad.shape} does not match input {x.shape}")
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    max_rel = 0.0
    for i in range(flat.size):
        orig = flat[i]
        hi = f32(f64(orig) + eps)
        lo = f32(f64(orig) - eps)
        flat[i] = hi
        fp = f(x)[0]
        flat[i] = lo
        fm = f(x)[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError("non-finite evaluation during finite differencing")
        numeric = (fp - fm) / (f64(hi) - f64(lo))
        rel = abs(gflat[i] - numeric) / max(1e-8, abs(numeric))
        max_rel = max(max_rel, rel)
    return float(max_rel)
