"""Mean-teacher domain adaptation training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, NamedTuple

import numpy as np

from . import losses
from .augment import AugmentConfig, augment_batch
from .checkpoint import Checkpoint
from .data import Domain, DomainDataset, batch_iter
from .losses import LossWeights
from .nn import NetworkSpec, NonFiniteError, ParamStore, adam_step, backward, ema_update, forward, init_params

log = logging.getLogger(__name__)

EPOCH_DEFINITIONS = ("target_pass", "source_pass", "larger_pass")
EVAL_NETWORKS = ("student", "teacher", "both")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 256
    lr: float = 0.001
    ema_alpha: float = 0.99
    weights: LossWeights = field(default_factory=LossWeights)
    epoch_definition: str = "larger_pass"
    seed: int = 0
    eval_network: str = "both"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 256

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ValueError("ema_alpha must lie in [0, 1)")
        if self.epoch_definition not in EPOCH_DEFINITIONS:
            raise ValueError(f"epoch_definition must be one of {EPOCH_DEFINITIONS}")
        if self.eval_network not in EVAL_NETWORKS:
            raise ValueError(f"eval_network must be one of {EVAL_NETWORKS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochMetrics:
    epoch: int
    ce_loss: float
    se_loss: float
    cb_loss: float
    pass_rate: float
    student_src_acc: float
    student_tgt_acc: float
    teacher_src_acc: float
    teacher_tgt_acc: float
    tgt_pred_freq: list = field(default_factory=list)

    CSV_FIELDS = (
        "epoch", "ce_loss", "se_loss", "cb_loss", "pass_rate",
        "student_src_acc", "student_tgt_acc", "teacher_src_acc", "teacher_tgt_acc",
    )


class IterationRecord(NamedTuple):
    ce: float
    se: float
    cb: float
    pass_rate: float
    total: float


class Evaluation(NamedTuple):
    accuracy: float
    confusion: np.ndarray
    mean_class_accuracy: float


@dataclass
class EpochRngs:
    src_batches: np.random.Generator
    tgt_batches: np.random.Generator
    src_aug: np.random.Generator
    tgt_aug: np.random.Generator
    src_dropout: np.random.Generator
    tgt_dropout: np.random.Generator
    teacher_dropout: np.random.Generator


def epoch_rngs(seed: int, epoch: int) -> EpochRngs:
    """Independent named streams for one epoch, derived from (seed, epoch)."""
    names = [f.name for f in fields(EpochRngs)]
    seqs = np.random.SeedSequence([seed, epoch]).spawn(len(names))
    return EpochRngs(*(np.random.default_rng(s) for s in seqs))


@dataclass
class TrainResult:
    history: list
    final: Checkpoint
    early_stopped: Checkpoint


# ---------------------------------------------------------------------------


def uses_target_path(w: LossWeights) -> bool:
    if w.mode == "gaussian_rampup":
        return w.lambda_se > 0
    return w.lambda_se > 0 or w.lambda_cb > 0


def train_iteration(
    spec: NetworkSpec,
    student: ParamStore,
    teacher: ParamStore,
    src_batch: tuple[np.ndarray, np.ndarray],
    tgt_batch: np.ndarray,
    cfg: TrainConfig,
    epoch: int,
    rngs: EpochRngs,
    src_aug: AugmentConfig,
    tgt_aug: AugmentConfig,
) -> IterationRecord:
    """One optimisation step on a source batch and a target batch.

    The source and target batches go through the student in separate
    forward passes, so batch norm normalises each domain with its own
    statistics. When both unsupervised weights are zero the student target
    pass is skipped and the step is plain supervised training; the teacher
    still scores the target batch so the pass rate stays observable.
    """
    if not teacher.same_layout(student):
        raise ValueError("teacher layout does not match student")
    w = cfg.weights
    src_x, src_y = src_batch

    xs = augment_batch(src_x, src_aug, rngs.src_aug)
    probs_s, cache_s = forward(spec, student, xs, "train", rngs.src_dropout)
    ce = losses.cross_entropy(probs_s, src_y)
    grad_s = losses.cross_entropy_grad(probs_s, src_y)

    view_s = augment_batch(tgt_batch, tgt_aug, rngs.tgt_aug)
    view_t = augment_batch(tgt_batch, tgt_aug, rngs.tgt_aug)
    teacher_probs, _ = forward(spec, teacher, view_t, "train", rngs.teacher_dropout, update_running=False)
    conf = losses.confidence_mask(teacher_probs, w.threshold)
    if w.mode == "confidence_threshold":
        mask = conf
    else:
        mask = losses.ConfidenceMask(np.ones(len(teacher_probs)), 1.0)
    se = cb = 0.0
    se_scale, cb_scale = losses.unsup_scales(w, conf.pass_rate, epoch)
    cache_t = grad_t = None
    if uses_target_path(w):
        probs_t, cache_t = forward(spec, student, view_s, "train", rngs.tgt_dropout)
        se = losses.self_ensembling_loss(probs_t, teacher_probs, mask)
        cb = losses.class_balance_loss(probs_t)
        grad_t = se_scale * losses.self_ensembling_grad(probs_t, teacher_probs, mask)
        if cb_scale > 0:
            grad_t = grad_t + cb_scale * losses.class_balance_grad(probs_t)
    total = losses.combine_losses(ce, se, cb, w, conf.pass_rate, epoch)
    if not math.isfinite(total):
        raise NonFiniteError(f"non-finite loss: ce={ce} se={se} cb={cb}")

    backward(cache_s, grad_s, student)
    if cache_t is not None:
        backward(cache_t, grad_t, student)
    adam_step(student, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    student.zero_grad()
    ema_update(teacher, student, cfg.ema_alpha)
    return IterationRecord(ce, se, cb, conf.pass_rate, total)


def predict(spec: NetworkSpec, params: ParamStore, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        probs, _ = forward(spec, params, images[start:start + batch_size], "eval")
        out.append(probs.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def confusion_scores(labels: np.ndarray, preds: np.ndarray, classes: int) -> Evaluation:
    confusion = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    n = confusion.sum()
    acc = float(np.trace(confusion) / n) if n else 0.0
    support = confusion.sum(axis=1)
    has = support > 0
    mca = float((np.diag(confusion)[has] / support[has]).mean()) if has.any() else 0.0
    return Evaluation(acc, confusion, mca)


def evaluate(spec: NetworkSpec, params: ParamStore, ds: DomainDataset, batch_size: int = 256) -> Evaluation:
    """Eval-mode accuracy, confusion matrix (rows true, columns predicted) and mean class accuracy."""
    if ds.labels is None:
        raise ValueError(f"{ds.name}: evaluation needs labels")
    preds = predict(spec, params, ds.images, batch_size)
    return confusion_scores(ds.labels, preds, spec.classes)


def _iterations_per_epoch(cfg: TrainConfig, n_src: int, n_tgt: int) -> tuple[int, str]:
    ref = {
        "target_pass": ("target", n_tgt),
        "source_pass": ("source", n_src),
        "larger_pass": ("source", n_src) if n_src >= n_tgt else ("target", n_tgt),
    }[cfg.epoch_definition]
    return -(-ref[1] // cfg.batch_size), ref[0]


def _epoch_metrics(epoch, recs, spec, student, teacher, source, target, cfg) -> EpochMetrics:
    nan = float("nan")
    accs = {}
    freq: list = []
    for role, params in (("student", student), ("teacher", teacher)):
        if cfg.eval_network not in (role, "both"):
            accs[role] = (nan, nan)
            continue
        src = evaluate(spec, params, source.test, cfg.eval_batch_size).accuracy if source.test.labels is not None else nan
        tgt_preds = predict(spec, params, target.test.images, cfg.eval_batch_size)
        tgt = nan
        if target.test.labels is not None:
            tgt = confusion_scores(target.test.labels, tgt_preds, spec.classes).accuracy
        accs[role] = (src, tgt)
        if role == "teacher" or cfg.eval_network == "student":
            freq = (np.bincount(tgt_preds, minlength=spec.classes) / max(len(tgt_preds), 1)).tolist()
    return EpochMetrics(
        epoch=epoch,
        ce_loss=float(np.mean([r.ce for r in recs])),
        se_loss=float(np.mean([r.se for r in recs])),
        cb_loss=float(np.mean([r.cb for r in recs])),
        pass_rate=float(np.mean([r.pass_rate for r in recs])),
        student_src_acc=accs["student"][0],
        student_tgt_acc=accs["student"][1],
        teacher_src_acc=accs["teacher"][0],
        teacher_tgt_acc=accs["teacher"][1],
        tgt_pred_freq=freq,
    )


def init_pair(spec: NetworkSpec, seed: int, dtype=np.float32) -> tuple[ParamStore, ParamStore]:
    """Fresh student and its moment-free teacher copy."""
    student = init_params(spec, np.random.default_rng(np.random.SeedSequence([seed, 2**31])), dtype)
    return student, student.copy(with_moments=False)


def run_training(
    source: Domain,
    target: Domain,
    spec: NetworkSpec,
    cfg: TrainConfig,
    src_aug: AugmentConfig = AugmentConfig(),
    tgt_aug: AugmentConfig = AugmentConfig(),
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
    extra_config: dict | None = None,
) -> TrainResult:
    """Train a student/teacher pair; ``source.train`` must be labelled.

    Target labels are only read for the per-epoch metrics. ``stop_after``
    ends the run after that many completed epochs (for resumable runs).
    The early-stopped checkpoint is the first epoch with the highest mean
    confidence pass rate.
    """
    if source.train.labels is None:
        raise ValueError("source training split needs labels")
    config = {"train": cfg.to_dict(), **(extra_config or {})}
    if resume is None:
        student, teacher = init_pair(spec, cfg.seed)
        state = Checkpoint(spec, student, teacher, 0, cfg.seed, config)
    else:
        state = resume.copy()
        student, teacher = state.student, state.teacher
    history = [EpochMetrics(**h) for h in state.history]
    iters, ref = _iterations_per_epoch(cfg, len(source.train), len(target.train))
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    for e in range(state.epoch, last):
        rngs = epoch_rngs(cfg.seed, e)
        span = iters * cfg.batch_size
        src_idx = batch_iter(source.train, cfg.batch_size, rngs.src_batches, None if ref == "source" else span)
        tgt_idx = batch_iter(target.train, cfg.batch_size, rngs.tgt_batches, None if ref == "target" else span)
        recs = []
        for it, (si, ti) in enumerate(zip(src_idx, tgt_idx)):
            try:
                rec = train_iteration(
                    spec, student, teacher,
                    (source.train.images[si], source.train.labels[si]),
                    target.train.images[ti],
                    cfg, e, rngs, src_aug, tgt_aug,
                )
            except NonFiniteError as err:
                partial = recs[-1] if recs else None
                raise TrainingAborted(
                    f"numeric failure at epoch {e + 1}, iteration {it + 1}: {err}; last terms {partial}"
                ) from err
            recs.append(rec)
        m = _epoch_metrics(e + 1, recs, spec, student, teacher, source, target, cfg)
        history.append(m)
        log.info(
            "epoch %d ce=%.4f se=%.5f cb=%.4f pass=%.3f tgt acc student=%.3f teacher=%.3f",
            m.epoch, m.ce_loss, m.se_loss, m.cb_loss, m.pass_rate, m.student_tgt_acc, m.teacher_tgt_acc,
        )
        state.epoch = e + 1
        state.history = [asdict(h) for h in history]
        if m.pass_rate > state.best_pass_rate:
            state.best_pass_rate = m.pass_rate
            state.best_epoch = m.epoch
            snap = state.copy()
            snap.best = None
            state.best = snap
        if on_epoch is not None:
            on_epoch(m)

    final = state.copy()
    early = final.best if final.best is not None else final
    return TrainResult(history, final, early)


def write_metrics_csv(path, history: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EpochMetrics.CSV_FIELDS)
        for m in history:
            w.writerow([m.epoch] + [repr(float(getattr(m, k))) for k in EpochMetrics.CSV_FIELDS[1:]])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]
