"""Two-stage training, evaluation, and zero-shot classification.

Stage one trains the decoder head with instance-balanced batches under the
configured loss. Stage two freezes the head and trains only a calibrator:
CRT and LWS see class-balanced batches with plain cross-entropy, DisAlign
sees instance-balanced batches with inverse-frequency weights, and MARC
sees instance-balanced batches under the balanced softmax.

Both stages use SGD with momentum, weight decay folded into the gradient,
linear warmup, and cosine decay to zero.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, fields, replace

import numpy as np

from . import calibrators as cal_mod
from .calibrators import Calibrator, context_weight_norms, init_calibrator
from .data import (CLASS_BALANCED, INSTANCE_BALANCED, FeatureDataset,
                   class_index, sample_batch)
from .decoder import DecoderConfig, DecoderHead, backward_batch, forward_batch, init_decoder
from .exceptions import (ConfigError, DataError, DivergenceError, DomainError,
                         ShapeError)
from .losses import (VARIANTS, ClassStats, build_class_stats, make_loss_spec,
                     total_loss)
from .numerics import Array, softmax_rows

EVAL_CHUNK = 512  # fixed so evaluation arithmetic never depends on dataset size

STAGE2_SAMPLING = {"crt": CLASS_BALANCED, "lws": CLASS_BALANCED,
                   "disalign": INSTANCE_BALANCED, "marc": INSTANCE_BALANCED}
STAGE2_LOSS = {"crt": "ce", "lws": "ce", "disalign": "cbw", "marc": "bsm"}


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    total_iters: int = 8192
    batch_size: int = 256
    lr0: float = 0.03
    warmup_iters: int = 512
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss: str = "ce"
    focal_gamma: float = 2.0
    ldam_max_margin: float = 0.5
    lade_lambda: float = 0.1
    stage2_method: str | None = None
    stage2_iters: int = 2048
    depth: int = 3
    heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.5

    def __post_init__(self):
        if self.total_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.total_iters > 0 and not 0 <= self.warmup_iters < self.total_iters:
            raise ConfigError("warmup_iters must lie in [0, total_iters)")
        if self.total_iters == 0 and self.warmup_iters != 0:
            raise ConfigError("warmup_iters must be 0 when total_iters is 0")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.loss not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.loss!r}")
        if self.stage2_method is not None \
                and self.stage2_method not in STAGE2_SAMPLING:
            raise ConfigError(f"unknown stage2 method {self.stage2_method!r}")


_INT_KEYS = {"seed", "total_iters", "batch_size", "warmup_iters",
             "stage2_iters", "depth", "heads"}
_FLOAT_KEYS = {"lr0", "momentum", "weight_decay", "focal_gamma",
               "ldam_max_margin", "lade_lambda", "mlp_ratio", "dropout"}
_STR_KEYS = {"loss", "stage2_method"}


def parse_run_config(text: str) -> TrainConfig:
    """Parse the plain-text key=value run config. Unknown keys are errors."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key not in _INT_KEYS and key not in _FLOAT_KEYS and key not in _STR_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            else:
                values[key] = None if val in ("", "none") else val
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {val!r} for {key!r}") from None
    return TrainConfig(**values)


def render_run_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        val = getattr(cfg, f.name)
        lines.append(f"{f.name}={'none' if val is None else val}")
    return "\n".join(lines) + "\n"


def config_fingerprint(cfg: TrainConfig | None, decoder_config: DecoderConfig,
                       calibrator_variant: str | None = None) -> str:
    parts = [f"decoder:{decoder_config}"]
    if cfg is not None:
        parts.append(f"train:{render_run_config(cfg)}")
    parts.append(f"calibrator:{calibrator_variant}")
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Linear warmup to lr0, then cosine decay to zero."""
    if not 0 <= iteration < cfg.total_iters:
        raise DomainError(
            f"iteration {iteration} outside [0, {cfg.total_iters})")
    if iteration < cfg.warmup_iters:
        return cfg.lr0 * iteration / cfg.warmup_iters
    span = cfg.total_iters - cfg.warmup_iters
    progress = (iteration - cfg.warmup_iters) / span
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class MomentumState:
    momentum: float
    velocities: dict[str, Array]


def init_momentum(params: dict[str, Array], momentum: float) -> MomentumState:
    return MomentumState(momentum=momentum,
                         velocities={k: np.zeros_like(v) for k, v in params.items()})


def sgd_step(params: dict[str, Array], grads: dict[str, Array],
             state: MomentumState, lr: float, weight_decay: float) -> None:
    """Classic SGD with momentum; the L2 term is folded into the gradient.

    Updates parameters and velocity buffers in place.
    """
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match "
                             f"parameter {name!r} of shape {p.shape}")
        if weight_decay != 0.0:
            g = g + weight_decay * p
        v = state.velocities[name]
        v *= state.momentum
        v += g
        p -= lr * v


def train_stage1(ds: FeatureDataset, cfg: TrainConfig,
                 decoder_config: DecoderConfig,
                 rng: np.random.Generator) -> tuple[DecoderHead, Array]:
    """Stage one: train the head under cfg.loss with instance-balanced batches.

    Returns the trained head and the per-iteration loss log.
    """
    if ds.dim != decoder_config.dim:
        raise ShapeError(f"dataset dim {ds.dim} does not match decoder "
                         f"dim {decoder_config.dim}")
    if ds.num_classes != decoder_config.num_classes:
        raise ShapeError("dataset and decoder disagree on the class count")
    stats = build_class_stats(ds.labels, ds.num_classes)
    spec = make_loss_spec(cfg.loss, stats, gamma=cfg.focal_gamma,
                          max_margin=cfg.ldam_max_margin, lam=cfg.lade_lambda)
    head = init_decoder(decoder_config, rng)
    params = head.param_dict()
    state = init_momentum(params, cfg.momentum)
    log = np.empty(cfg.total_iters)
    for it in range(cfg.total_iters):
        idx = sample_batch(ds, stats, INSTANCE_BALANCED, cfg.batch_size, rng)
        logits, cache = forward_batch(head, ds.features[idx], rng, train_mode=True)
        if not np.all(np.isfinite(logits)):
            raise DivergenceError(f"non-finite logits at iteration {it}")
        value, dlogits = total_loss(spec, logits, ds.labels[idx], stats)
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        grads, _ = backward_batch(head, cache, dlogits)
        sgd_step(params, grads, state, lr_at(cfg, it), cfg.weight_decay)
        log[it] = value
    return head, log


def _precompute_contexts(head: DecoderHead,
                         ds: FeatureDataset) -> tuple[Array, Array]:
    """Eval-mode pooled features and logits for the whole dataset."""
    n = ds.num_samples
    pooled = np.empty((n, head.config.dim))
    logits = np.empty((n, head.config.num_classes))
    for start in range(0, n, EVAL_CHUNK):
        stop = min(start + EVAL_CHUNK, n)
        lg, cache = forward_batch(head, ds.features[start:stop], None,
                                  train_mode=False)
        pooled[start:stop] = cache.pooled
        logits[start:stop] = lg
    return pooled, logits


def stage2_schedule(cfg: TrainConfig) -> TrainConfig:
    """The stage-one schedule compressed to the stage-two iteration count."""
    if cfg.stage2_iters == 0:
        return replace(cfg, total_iters=0, warmup_iters=0)
    if cfg.total_iters > 0:
        warmup = int(round(cfg.warmup_iters * cfg.stage2_iters / cfg.total_iters))
    else:
        warmup = 0
    warmup = min(warmup, cfg.stage2_iters - 1)
    return replace(cfg, total_iters=cfg.stage2_iters, warmup_iters=warmup)


def train_stage2(head: DecoderHead, ds: FeatureDataset, cfg: TrainConfig,
                 variant: str, rng: np.random.Generator,
                 ) -> tuple[Calibrator, Array]:
    """Stage two: freeze the head and train only the calibrator.

    The frozen head makes every sample's pooled feature and raw logits
    constant, so they are computed once up front; iterations then touch only
    calibrator parameters.
    """
    if variant not in STAGE2_SAMPLING:
        raise ConfigError(f"unknown calibrator variant {variant!r}")
    stats = build_class_stats(ds.labels, ds.num_classes)
    strategy = STAGE2_SAMPLING[variant]
    spec = make_loss_spec(STAGE2_LOSS[variant], stats)
    pooled, logits = _precompute_contexts(head, ds)
    norms = context_weight_norms(head.cls_weight)
    cal = init_calibrator(variant, head.config.num_classes, head.config.dim,
                          rng, (head.cls_weight, head.cls_bias))
    params = cal.param_dict()
    state = init_momentum(params, cfg.momentum)
    sched = stage2_schedule(cfg)
    index = class_index(ds.labels, ds.num_classes)
    log = np.empty(sched.total_iters)
    for it in range(sched.total_iters):
        idx = sample_batch(ds, stats, strategy, cfg.batch_size, rng, index=index)
        adjusted, cache = cal_mod.apply_batch(cal, pooled[idx], logits[idx], norms)
        if not np.all(np.isfinite(adjusted)):
            raise DivergenceError(f"non-finite logits at stage-2 iteration {it}")
        value, dadj = total_loss(spec, adjusted, ds.labels[idx], stats)
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss at stage-2 iteration {it}")
        grads, _, _ = cal_mod.backward_batch(cal, cache, dadj)
        sgd_step(params, grads, state, lr_at(sched, it), cfg.weight_decay)
        log[it] = value
    return cal, log


@dataclass
class EvalReport:
    overall: float
    many: float
    medium: float
    few: float
    precision: float
    recall: float
    f1: float
    per_class_accuracy: Array  # (K,), nan for classes absent from the test set
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "many": self.many, "medium": self.medium, "few": self.few,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "per_class_accuracy": [None if math.isnan(a) else a
                                   for a in self.per_class_accuracy],
            "fingerprint": self.fingerprint,
        }


def metrics_from_predictions(predictions, labels, stats: ClassStats,
                             fingerprint: str = "") -> EvalReport:
    """Accuracy, group accuracies, and macro P/R/F1 from raw predictions.

    Group accuracies average per-class accuracy over the classes in each
    training-count group. Classes with no test samples are excluded from
    every macro average (with a warning). Macro averages accumulate in class
    order so results are reproducible digit for digit.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    k = stats.num_classes
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise DataError("predictions and labels must be matching vectors")
    if labels.size == 0:
        raise DataError("cannot evaluate on an empty test set")
    if labels.min() < 0 or labels.max() >= k \
            or predictions.min() < 0 or predictions.max() >= k:
        raise DataError(f"labels and predictions must lie in [0, {k})")

    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    true_pos = np.diag(confusion)

    if np.any(support == 0):
        warnings.warn(f"{int(np.sum(support == 0))} classes have no test "
                      "samples and are excluded from macro averages")

    per_class_acc = np.full(k, np.nan)
    precisions, recalls, f1s = [], [], []
    group_values: dict[str, list[float]] = {"many": [], "medium": [], "few": []}
    for j in range(k):
        if support[j] == 0:
            continue
        recall = true_pos[j] / support[j]
        precision = true_pos[j] / predicted[j] if predicted[j] > 0 else 0.0
        f1 = (2.0 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        per_class_acc[j] = recall
        recalls.append(recall)
        precisions.append(precision)
        f1s.append(f1)
        group_values[str(stats.groups[j])].append(recall)

    def seq_mean(values):
        if not values:
            return float("nan")
        total = 0.0
        for v in values:
            total += v
        return total / len(values)

    overall = float(np.sum(true_pos)) / labels.size
    return EvalReport(
        overall=overall,
        many=seq_mean(group_values["many"]),
        medium=seq_mean(group_values["medium"]),
        few=seq_mean(group_values["few"]),
        precision=seq_mean(precisions),
        recall=seq_mean(recalls),
        f1=seq_mean(f1s),
        per_class_accuracy=per_class_acc,
        fingerprint=fingerprint,
    )


def evaluate(head: DecoderHead, calibrator: Calibrator | None,
             test_ds: FeatureDataset, stats: ClassStats) -> EvalReport:
    """Deterministic eval-mode metrics; `stats` must come from training."""
    if test_ds.role == "test" and not test_ds.is_class_balanced():
        warnings.warn("test set is not class-balanced; overall accuracy and "
                      "macro recall will diverge")
    pooled, logits = _precompute_contexts(head, test_ds)
    if calibrator is not None:
        norms = context_weight_norms(head.cls_weight)
        logits, _ = cal_mod.apply_batch(calibrator, pooled, logits, norms)
    predictions = np.argmax(logits, axis=1)
    fp = config_fingerprint(None, head.config,
                            None if calibrator is None else calibrator.variant)
    return metrics_from_predictions(predictions, test_ds.labels, stats,
                                    fingerprint=fp)


def render_report(report: EvalReport) -> str:
    """Human-readable metrics table."""
    lines = [
        "metric          value",
        f"overall         {report.overall:.6f}",
        f"many-shot       {report.many:.6f}",
        f"medium-shot     {report.medium:.6f}",
        f"few-shot        {report.few:.6f}",
        f"macro precision {report.precision:.6f}",
        f"macro recall    {report.recall:.6f}",
        f"macro f1        {report.f1:.6f}",
        f"fingerprint     {report.fingerprint}",
    ]
    return "\n".join(lines) + "\n"


def report_json(report: EvalReport) -> str:
    """Machine-readable metrics document; key order is fixed."""
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class TextClassEmbeddings:
    """Unit-normalized class text embeddings, one row per class."""
    matrix: Array  # (K, D)

    @staticmethod
    def from_matrix(matrix: Array) -> "TextClassEmbeddings":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ShapeError("class embeddings must be a (K, D) matrix")
        norms = np.sqrt(np.sum(matrix ** 2, axis=1, keepdims=True))
        if np.any(norms == 0):
            raise DataError("class embeddings must have nonzero norm")
        return TextClassEmbeddings(matrix=matrix / norms)


def zero_shot_classify(image_embs: Array, class_embs: TextClassEmbeddings,
                       temperature: float = 1.0) -> tuple[Array, Array]:
    """Cosine-similarity classification against class text embeddings.

    Probabilities are softmax(cos / temperature) per image; predictions are
    the argmax. Rescaling an image embedding by any positive constant leaves
    the result unchanged.
    """
    if temperature <= 0:
        raise DomainError("temperature must be positive")
    image_embs = np.asarray(image_embs, dtype=np.float64)
    if image_embs.ndim != 2 or image_embs.shape[1] != class_embs.matrix.shape[1]:
        raise ShapeError("image embeddings must be (N, D) with matching D")
    norms = np.sqrt(np.sum(image_embs ** 2, axis=1, keepdims=True))
    if np.any(norms == 0):
        raise DataError("image embeddings must have nonzero norm")
    cosine = (image_embs / norms) @ class_embs.matrix.T
    probs = softmax_rows(cosine / temperature)
    return np.argmax(probs, axis=1), probs
