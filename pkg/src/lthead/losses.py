"""Imbalanced classification losses over logits.

One unified form covers every variant: per-class loss weights, additive
per-class logit biases, and per-class margins subtracted from the true-class
logit, with an optional focal modulation. Each evaluation returns the scalar
loss (mean over the batch) and its exact gradient with respect to the logits.

Variants:
    ce      plain cross-entropy
    cbw     inverse-frequency loss weights, normalized to mean 1
    focal   (1 - p_true)^gamma modulation
    ldam    margins proportional to n_class^(-1/4)
    bsm     logit biases log(n_class), the balanced-softmax shift
    lade    bsm plus a Donsker-Varadhan disentangling regularizer
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DataError, DomainError
from .numerics import Array, logsumexp_rows

GROUP_MANY = "many"
GROUP_MEDIUM = "medium"
GROUP_FEW = "few"

VARIANTS = ("ce", "cbw", "focal", "ldam", "bsm", "lade")


@dataclass(frozen=True)
class ClassStats:
    """Per-class counts, priors, and many/medium/few group tags."""
    counts: Array   # (K,) int64
    priors: Array   # (K,) float64, sums to 1
    groups: Array   # (K,) unicode tags

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


def build_class_stats(labels, num_classes: int) -> ClassStats:
    """Histogram labels into ClassStats.

    Group tags follow training-count thresholds: many > 100,
    20 <= medium <= 100, few < 20.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("cannot build class statistics from zero labels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"labels must lie in [0, {num_classes}), "
            f"got range [{labels.min()}, {labels.max()}]")
    counts = np.bincount(labels, minlength=num_classes).astype(np.int64)
    if np.any(counts == 0):
        warnings.warn("some classes have zero training samples; "
                      "count-based weights and biases are undefined for them")
    return stats_from_counts(counts)


def stats_from_counts(counts) -> ClassStats:
    """ClassStats from a precomputed count vector (e.g. a checkpoint)."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise DataError("counts must be a non-empty vector")
    if counts.min() < 0 or counts.sum() == 0:
        raise DataError("counts must be nonnegative with a positive total")
    priors = counts / counts.sum()
    groups = np.where(counts > 100, GROUP_MANY,
                      np.where(counts >= 20, GROUP_MEDIUM, GROUP_FEW))
    return ClassStats(counts=counts, priors=priors, groups=groups)


def _require_positive_counts(stats: ClassStats, what: str) -> Array:
    if np.any(stats.counts < 1):
        raise DataError(f"{what} needs every class count >= 1")
    return stats.counts.astype(np.float64)


def cbw_weights(stats: ClassStats) -> Array:
    """Inverse-frequency class weights, normalized to mean 1.

    Each class then contributes equally in expectation: n_j * w_j is the
    same for every class.
    """
    counts = _require_positive_counts(stats, "class-balanced weighting")
    inv = 1.0 / counts
    return inv / inv.mean()


def bsm_biases(stats: ClassStats) -> Array:
    """Balanced-softmax logit biases log(n_j).

    Equivalent to log-prior shifts up to a common constant, which the
    softmax ignores.
    """
    counts = _require_positive_counts(stats, "balanced-softmax biasing")
    return np.log(counts)


def ldam_margins(stats: ClassStats, max_margin: float = 0.5) -> Array:
    """Margins C / n_j^(1/4), scaled so the rarest class gets `max_margin`."""
    if max_margin < 0:
        raise DomainError("max_margin must be >= 0")
    counts = _require_positive_counts(stats, "margin computation")
    if max_margin == 0.0:
        return np.zeros_like(counts)
    raw = counts ** -0.25
    return max_margin * raw / raw.max()


@dataclass(frozen=True)
class LossSpec:
    """A loss variant with its derived per-class vectors.

    `weights`, `biases`, and `margins` always have length K; variants that
    do not use a vector leave it at its identity value.
    """
    variant: str
    weights: Array
    biases: Array
    margins: Array
    gamma: float = 2.0      # focal only
    lam: float = 0.1        # lade only

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}")
        if np.any(self.weights <= 0):
            raise ConfigError("loss weights must be positive")
        if np.any(self.margins < 0):
            raise ConfigError("margins must be nonnegative")
        if self.gamma < 0:
            raise ConfigError("focal gamma must be >= 0")
        if self.lam < 0:
            raise ConfigError("lade lambda must be >= 0")


def make_loss_spec(variant: str, stats: ClassStats, *, gamma: float = 2.0,
                   max_margin: float = 0.5, lam: float = 0.1) -> LossSpec:
    """Build the LossSpec for a variant from class statistics."""
    k = stats.num_classes
    weights = np.ones(k)
    biases = np.zeros(k)
    margins = np.zeros(k)
    if variant == "cbw":
        weights = cbw_weights(stats)
    elif variant == "ldam":
        margins = ldam_margins(stats, max_margin)
    elif variant in ("bsm", "lade"):
        biases = bsm_biases(stats)
    elif variant not in ("ce", "focal"):
        raise ConfigError(f"unknown loss variant {variant!r}")
    return LossSpec(variant=variant, weights=weights, biases=biases,
                    margins=margins, gamma=gamma, lam=lam)


def _check_batch(logits: Array, labels: Array, num_classes: int):
    if logits.ndim != 2 or logits.shape[1] != num_classes:
        raise DataError(
            f"logits must be (batch, {num_classes}), got {logits.shape}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise DataError("labels must be a vector matching the batch size")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    if not np.all(np.isfinite(logits)):
        raise DataError("logits must be finite")


def _safe_pow(base: Array, exponent: float) -> Array:
    # 0 ** negative would blow up; those entries are always multiplied by a
    # factor that is exactly zero there, so returning 0 keeps the product exact.
    out = np.zeros_like(base)
    pos = base > 0
    out[pos] = base[pos] ** exponent
    return out


def loss_eval(spec: LossSpec, logits: Array, labels: Array,
              stats: ClassStats) -> tuple[float, Array]:
    """Mean loss over the batch and its exact gradient w.r.t. the logits.

    The LADE variant evaluates only its balanced-softmax part here; add
    `lade_dv_regularizer` (or use `total_loss`) for the full objective.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = stats.num_classes
    _check_batch(logits, labels, k)
    if spec.weights.shape != (k,):
        raise DataError("loss spec does not match the class statistics")

    batch = logits.shape[0]
    rows = np.arange(batch)
    adjusted = logits + spec.biases
    if np.any(spec.margins > 0):
        adjusted = adjusted.copy()
        adjusted[rows, labels] -= spec.margins[labels]

    logp = adjusted - logsumexp_rows(adjusted)
    probs = np.exp(logp)
    ce = -logp[rows, labels]
    grad_base = probs.copy()
    grad_base[rows, labels] -= 1.0

    if spec.variant == "focal":
        pt = probs[rows, labels]
        one_minus = 1.0 - pt
        mod = one_minus ** spec.gamma
        value = float(np.mean(mod * ce))
        if spec.gamma == 0.0:
            coef = np.ones(batch)
        else:
            coef = mod + spec.gamma * pt * ce * _safe_pow(one_minus, spec.gamma - 1.0)
        dlogits = grad_base * coef[:, None] / batch
    else:
        w = spec.weights[labels]
        value = float(np.mean(w * ce))
        dlogits = grad_base * w[:, None] / batch
    return value, dlogits


def lade_dv_regularizer(logits: Array, labels: Array, stats: ClassStats,
                        lam: float = 0.1) -> tuple[float, Array]:
    """Donsker-Varadhan disentangling term on bias-removed logits.

    With f_j = logits_j - log(n_j), each class present in the batch
    contributes  -mean_{i: y_i = j} f_j(x_i) + log mean_i exp(f_j(x_i)),
    and the value is `lam` times the mean over present classes. Classes
    absent from the batch contribute nothing. The term is invariant to a
    constant shift of any single column of f.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_batch(logits, labels, stats.num_classes)
    if lam < 0:
        raise DomainError("lade lambda must be >= 0")
    dlogits = np.zeros_like(logits)
    if lam == 0.0:
        return 0.0, dlogits

    f = logits - bsm_biases(stats)
    batch = logits.shape[0]
    present, members = np.unique(labels, return_counts=True)
    n_present = present.shape[0]
    terms = np.empty(n_present)
    for idx, (j, m_j) in enumerate(zip(present, members)):
        col = f[:, j]
        col_max = col.max()
        expcol = np.exp(col - col_max)
        terms[idx] = (-col[labels == j].mean()
                      + col_max + np.log(expcol.sum() / batch))
        soft = expcol / expcol.sum()
        dlogits[:, j] = lam / n_present * soft
        dlogits[labels == j, j] -= lam / (n_present * m_j)
    return float(lam * np.mean(terms)), dlogits


def total_loss(spec: LossSpec, logits: Array, labels: Array,
               stats: ClassStats) -> tuple[float, Array]:
    """Complete training objective: loss_eval plus the LADE regularizer."""
    value, dlogits = loss_eval(spec, logits, labels, stats)
    if spec.variant == "lade":
        reg, dreg = lade_dv_regularizer(logits, labels, stats, spec.lam)
        value += reg
        dlogits = dlogits + dreg
    return value, dlogits
