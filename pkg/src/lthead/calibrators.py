"""Stage-two logit adjusters applied on top of a frozen head.

Four variants:
    crt       a freshly re-initialized linear classifier on pooled features
    lws       one learnable scale per class logit
    disalign  class-wise affine adjustment gated by an instance confidence
    marc      class-wise scale plus a shift in classifier-row-norm units,
              exactly 2K parameters

Except for CRT, each variant initializes at an identity configuration that
reproduces the original logits bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .exceptions import ConfigError, ShapeError, StateError
from .numerics import Array

CALIBRATOR_VARIANTS = ("crt", "lws", "disalign", "marc")


@dataclass
class CalibContext:
    """What a calibrator may look at for one sample."""
    pooled: Array        # (D,) pooled feature
    logits: Array        # (K,) raw classifier logits
    weight_norms: Array  # (K,) L2 norms of the classifier rows


def context_weight_norms(cls_weight: Array) -> Array:
    """Row norms of the classifier weight; recompute if the classifier changes."""
    return np.sqrt(np.sum(np.asarray(cls_weight, dtype=np.float64) ** 2, axis=1))


@dataclass
class CrtCalibrator:
    variant = "crt"
    weight: Array  # (K, D)
    bias: Array    # (K,)

    def param_dict(self) -> dict[str, Array]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class LwsCalibrator:
    variant = "lws"
    scales: Array  # (K,)

    def param_dict(self) -> dict[str, Array]:
        return {"scales": self.scales}


@dataclass
class DisAlignCalibrator:
    variant = "disalign"
    alpha: Array        # (K,)
    beta: Array         # (K,)
    conf_weight: Array  # (D,)
    conf_bias: Array    # (1,)

    def param_dict(self) -> dict[str, Array]:
        return {"alpha": self.alpha, "beta": self.beta,
                "conf_weight": self.conf_weight, "conf_bias": self.conf_bias}


@dataclass
class MarcCalibrator:
    variant = "marc"
    omega: Array  # (K,)
    beta: Array   # (K,)

    def param_dict(self) -> dict[str, Array]:
        return {"omega": self.omega, "beta": self.beta}


Calibrator = Union[CrtCalibrator, LwsCalibrator, DisAlignCalibrator, MarcCalibrator]


def init_calibrator(variant: str, num_classes: int, dim: int,
                    rng: np.random.Generator,
                    classifier_for_crt: tuple[Array, Array] | None = None) -> Calibrator:
    """Fresh calibrator.

    CRT draws a new scaled-uniform fan-in classifier from `rng` (the stage-one
    classifier, when given, only pins the expected shape). The other variants
    start at their identity configurations.
    """
    if variant == "crt":
        if classifier_for_crt is not None:
            w, b = classifier_for_crt
            if w.shape != (num_classes, dim) or b.shape != (num_classes,):
                raise ShapeError("stage-one classifier shape does not match K x D")
        bound = 1.0 / np.sqrt(dim)
        return CrtCalibrator(weight=rng.uniform(-bound, bound, (num_classes, dim)),
                             bias=np.zeros(num_classes))
    if variant == "lws":
        return LwsCalibrator(scales=np.ones(num_classes))
    if variant == "disalign":
        return DisAlignCalibrator(alpha=np.ones(num_classes),
                                  beta=np.zeros(num_classes),
                                  conf_weight=np.zeros(dim),
                                  conf_bias=np.zeros(1))
    if variant == "marc":
        return MarcCalibrator(omega=np.ones(num_classes), beta=np.zeros(num_classes))
    raise ConfigError(f"unknown calibrator variant {variant!r}")


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class ApplyCache:
    variant: str
    pooled: Array
    logits: Array
    weight_norms: Array
    sigma: Array | None = None   # disalign gate, (B,)
    gated: Array | None = None   # disalign alpha*eta+beta, (B, K)


def apply_batch(cal: Calibrator, pooled: Array, logits: Array,
                weight_norms: Array) -> tuple[Array, ApplyCache]:
    """Adjust a batch of logits: (B, D) pooled features, (B, K) logits."""
    pooled = np.asarray(pooled, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    weight_norms = np.asarray(weight_norms, dtype=np.float64)
    if pooled.ndim != 2 or logits.ndim != 2 or pooled.shape[0] != logits.shape[0]:
        raise ShapeError("pooled features and logits must share a batch axis")
    cache = ApplyCache(variant=cal.variant, pooled=pooled, logits=logits,
                       weight_norms=weight_norms)
    if isinstance(cal, CrtCalibrator):
        if cal.weight.shape[1] != pooled.shape[1]:
            raise ShapeError("CRT classifier dim does not match pooled features")
        return pooled @ cal.weight.T + cal.bias, cache
    if isinstance(cal, LwsCalibrator):
        if cal.scales.shape[0] != logits.shape[1]:
            raise ShapeError("scale vector length does not match logits")
        return logits * cal.scales, cache
    if isinstance(cal, DisAlignCalibrator):
        if cal.conf_weight.shape[0] != pooled.shape[1]:
            raise ShapeError("confidence weights do not match pooled features")
        sigma = _sigmoid(pooled @ cal.conf_weight + cal.conf_bias[0])
        gated = cal.alpha * logits + cal.beta
        cache.sigma, cache.gated = sigma, gated
        return sigma[:, None] * gated + (1.0 - sigma)[:, None] * logits, cache
    if isinstance(cal, MarcCalibrator):
        if cal.omega.shape[0] != logits.shape[1]:
            raise ShapeError("omega length does not match logits")
        return cal.omega * logits + cal.beta * weight_norms, cache
    raise ConfigError(f"unknown calibrator type {type(cal).__name__}")


def backward_batch(cal: Calibrator, cache: ApplyCache,
                   dadjusted: Array) -> tuple[dict[str, Array], Array, Array]:
    """Gradients of a cached apply_batch: (parameter grads, dlogits, dpooled)."""
    if cache.variant != cal.variant:
        raise StateError("cache was produced by a different calibrator variant")
    dadjusted = np.asarray(dadjusted, dtype=np.float64)
    if dadjusted.shape != cache.logits.shape and not isinstance(cal, CrtCalibrator):
        raise StateError("gradient shape does not match the cached apply")
    pooled, logits = cache.pooled, cache.logits
    if isinstance(cal, CrtCalibrator):
        grads = {"weight": dadjusted.T @ pooled, "bias": dadjusted.sum(axis=0)}
        return grads, np.zeros_like(logits), dadjusted @ cal.weight
    if isinstance(cal, LwsCalibrator):
        grads = {"scales": np.sum(logits * dadjusted, axis=0)}
        return grads, cal.scales * dadjusted, np.zeros_like(pooled)
    if isinstance(cal, DisAlignCalibrator):
        sigma, gated = cache.sigma, cache.gated
        if sigma is None or gated is None:
            raise StateError("disalign cache is missing its gate activations")
        dsigma = np.sum(dadjusted * (gated - logits), axis=1)
        dpre = dsigma * sigma * (1.0 - sigma)
        grads = {
            "alpha": np.sum(sigma[:, None] * logits * dadjusted, axis=0),
            "beta": np.sum(sigma[:, None] * dadjusted, axis=0),
            "conf_weight": pooled.T @ dpre,
            "conf_bias": np.array([dpre.sum()]),
        }
        dlogits = dadjusted * (sigma[:, None] * cal.alpha + (1.0 - sigma)[:, None])
        dpooled = dpre[:, None] * cal.conf_weight
        return grads, dlogits, dpooled
    if isinstance(cal, MarcCalibrator):
        grads = {"omega": np.sum(logits * dadjusted, axis=0),
                 "beta": np.sum(cache.weight_norms * dadjusted, axis=0)}
        return grads, cal.omega * dadjusted, np.zeros_like(pooled)
    raise ConfigError(f"unknown calibrator type {type(cal).__name__}")


def apply(cal: Calibrator, ctx: CalibContext) -> tuple[Array, ApplyCache]:
    """Adjust one sample's logits."""
    adjusted, cache = apply_batch(cal, ctx.pooled[None], ctx.logits[None],
                                  ctx.weight_norms)
    return adjusted[0], cache


def calibrator_backward(cal: Calibrator, cache: ApplyCache,
                        dadjusted: Array) -> tuple[dict[str, Array], Array, Array]:
    """Single-sample gradients matching `apply`."""
    dadjusted = np.asarray(dadjusted, dtype=np.float64)
    if dadjusted.ndim != 1:
        raise ShapeError("expected a (K,) gradient vector")
    grads, dlogits, dpooled = backward_batch(cal, cache, dadjusted[None])
    return grads, dlogits[0], dpooled[0]
