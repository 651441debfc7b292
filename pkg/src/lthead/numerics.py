"""Deterministic float64 numerics: matrix primitives, stable reductions,
layer building blocks with analytic backward passes, and a central-difference
gradient checker used to validate every backward in the library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import DomainError, EvaluationError, ShapeError

Array = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator, the only randomness source in the library.

    Identical seeds reproduce identical draw sequences on every platform.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Derive `n` independent generators from one seed."""
    return [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(seed).spawn(n)]


def matmul(a: Array, b: Array) -> Array:
    """Matrix product with left-to-right accumulation over the inner axis.

    Each output entry is accumulated in index order with separately rounded
    multiply and add, so the result is bit-identical to a naive triple loop
    on any platform. Use plain `@` where throughput matters more than a
    pinned accumulation order.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions do not agree: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[k, None, :]
    return out


def log_sum_exp(v: Array) -> float:
    """max(v) + log(sum(exp(v - max(v)))); overflow-safe for huge entries."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DomainError("log_sum_exp needs a non-empty 1-D vector")
    m = float(np.max(v))
    return m + math.log(float(np.sum(np.exp(v - m))))


def logsumexp_rows(m: Array) -> Array:
    """Row-wise log-sum-exp of a 2-D array, returned as shape (rows, 1)."""
    mx = np.max(m, axis=1, keepdims=True)
    return mx + np.log(np.sum(np.exp(m - mx), axis=1, keepdims=True))


def softmax_rows(logits: Array) -> Array:
    """Row-stochastic softmax of a 2-D array, computed via log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D array, got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise DomainError("softmax_rows requires finite logits")
    return np.exp(logits - logsumexp_rows(logits))


def softmax_last(x: Array) -> Array:
    """Softmax over the last axis, no validation. Internal hot-path helper."""
    mx = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - mx)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass
class LayerNormCache:
    xhat: Array
    inv_std: Array
    gamma: Array


def layer_norm(x: Array, gamma: Array, beta: Array,
               eps: float = 1e-5) -> tuple[Array, LayerNormCache]:
    """Normalize over the last axis, then scale and shift.

    Accepts a vector or any (..., D) stack of vectors; `gamma` and `beta`
    are (D,). Returns the output and the cache the backward pass needs.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm parameter length {gamma.shape}/{beta.shape} "
            f"does not match feature size {x.shape[-1]}")
    if eps <= 0:
        raise DomainError("layer_norm eps must be positive")
    d = x.shape[-1]
    mean = np.sum(x, axis=-1, keepdims=True)
    mean /= d
    centered = x - mean
    var = np.sum(centered * centered, axis=-1, keepdims=True)
    var /= d
    var += eps
    inv_std = 1.0 / np.sqrt(var, out=var)
    xhat = centered
    xhat *= inv_std
    return gamma * xhat + beta, LayerNormCache(xhat, inv_std, gamma)


def layer_norm_backward(cache: LayerNormCache,
                        dy: Array) -> tuple[Array, Array, Array]:
    """Gradients (dx, dgamma, dbeta) for a cached layer_norm call.

    dgamma/dbeta are summed over all leading axes of `dy`.
    """
    xhat, inv_std, gamma = cache.xhat, cache.inv_std, cache.gamma
    lead = tuple(range(dy.ndim - 1))
    dgamma = np.sum(dy * xhat, axis=lead)
    dbeta = np.sum(dy, axis=lead)
    d = dy.shape[-1]
    dxhat = dy * gamma
    m1 = np.sum(dxhat, axis=-1, keepdims=True)
    m1 /= d
    m2 = np.sum(dxhat * xhat, axis=-1, keepdims=True)
    m2 /= d
    dx = dxhat
    dx -= m1
    dx -= xhat * m2
    dx *= inv_std
    return dx, dgamma, dbeta


def gelu_with_grad(x) -> tuple[Array, Array]:
    """tanh-approximation GELU and its derivative in one pass.

    Shares the x^2 and tanh work between value and derivative; powers are
    expanded into multiplications, which is an order of magnitude faster
    than float64 `**` on large arrays, and intermediates are reused in place.
    """
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    if scalar:
        x = x[None]
    x2 = x * x
    u = x2 * _GELU_A
    u += 1.0
    u *= x
    u *= _GELU_C
    t = np.tanh(u, out=u)
    half_1pt = t + 1.0
    half_1pt *= 0.5
    value = half_1pt * x
    du = x2
    du *= 3.0 * _GELU_A
    du += 1.0
    du *= _GELU_C
    grad = t
    grad *= t
    np.subtract(1.0, grad, out=grad)
    grad *= du
    grad *= x
    grad *= 0.5
    grad += half_1pt
    if scalar:
        return value[0], grad[0]
    return value, grad


def gelu(x):
    """tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    return gelu_with_grad(x)[0]


def gelu_grad(x):
    """Derivative of the tanh-approximation GELU."""
    return gelu_with_grad(x)[1]


def dropout_mask(shape, rate: float, rng: np.random.Generator,
                 train_mode: bool) -> Array:
    """Inverted-scaling dropout mask: entries are 0 or 1/(1-rate).

    Eval mode and rate 0 both return all ones, so inference is an identity.
    """
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return np.ones(shape)
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(np.float64) / keep


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    worst_index: int
    passed: bool


def finite_diff_check(f: Callable[[Array], tuple[float, Array]],
                      params: Array,
                      eps: float = 1e-5,
                      tol: float = 1e-5,
                      floor: float = 1e-4) -> GradCheckReport:
    """Compare f's analytic gradient with central finite differences.

    `f` maps a flat float64 parameter vector to (value, gradient). Every
    coordinate is perturbed by +/- eps and the centered difference is
    compared against the analytic gradient at the unperturbed point.
    Relative error uses max(|analytic|, |numeric|, floor) as denominator, so
    coordinates whose gradient is below `floor` are judged absolutely.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1:
        raise ShapeError("finite_diff_check expects a flat parameter vector")
    value, grad = f(params)
    if not np.isfinite(value):
        raise EvaluationError(f"function value is not finite: {value}")
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != params.shape:
        raise ShapeError("analytic gradient length does not match parameters")

    numeric = np.empty_like(params)
    work = params.copy()
    for i in range(params.size):
        orig = work[i]
        work[i] = orig + eps
        up = f(work)[0]
        work[i] = orig - eps
        down = f(work)[0]
        work[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise EvaluationError(f"non-finite value at coordinate {i}")
        numeric[i] = (up - down) / (2.0 * eps)

    abs_err = np.abs(grad - numeric)
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), floor)
    rel_err = abs_err / denom
    worst = int(np.argmax(rel_err)) if params.size else 0
    max_rel = float(rel_err[worst]) if params.size else 0.0
    max_abs = float(np.max(abs_err)) if params.size else 0.0
    return GradCheckReport(max_abs_err=max_abs, max_rel_err=max_rel,
                           worst_index=worst, passed=bool(max_rel < tol))
