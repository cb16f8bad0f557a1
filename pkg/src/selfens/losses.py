"""Loss terms and their gradients with respect to class probabilities.

Every loss has a ``*_grad`` twin returning dL/dprobs, which is what
:func:`selfens.nn.backward` consumes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EPS = 1e-7


@dataclass(frozen=True)
class ConfidenceMask:
    mask: np.ndarray
    pass_rate: float


@dataclass(frozen=True)
class LossWeights:
    lambda_se: float = 3.0
    lambda_cb: float = 0.005
    mode: str = "confidence_threshold"
    threshold: float = 0.968
    ramp_epochs: int = 80

    def __post_init__(self):
        if self.lambda_se < 0 or self.lambda_cb < 0:
            raise ValueError("loss weights must be non-negative")
        if self.mode not in ("confidence_threshold", "gaussian_rampup"):
            raise ValueError(f"unknown weighting mode {self.mode!r}")
        if self.mode == "confidence_threshold" and not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.ramp_epochs < 1:
            raise ValueError("ramp_epochs must be >= 1")


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    return labels


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    labels = _check_labels(labels, probs.shape[1])
    p = np.clip(probs[np.arange(len(labels)), labels].astype(np.float64), EPS, 1 - EPS)
    return float(-np.log(p).mean())


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = _check_labels(labels, probs.shape[1])
    n = len(labels)
    rows = np.arange(n)
    p = probs[rows, labels]
    g = np.zeros_like(probs)
    inside = (p > EPS) & (p < 1 - EPS)
    g[rows, labels] = np.where(inside, -1.0 / (n * np.where(inside, p, 1.0)), 0.0)
    return g


def confidence_mask(teacher_probs: np.ndarray, threshold: float) -> ConfidenceMask:
    conf = teacher_probs.max(axis=1)
    mask = (conf > threshold).astype(np.float64)
    return ConfidenceMask(mask, float(mask.mean()) if mask.size else 0.0)


def self_ensembling_loss(student_probs: np.ndarray, teacher_probs: np.ndarray, mask: ConfidenceMask) -> float:
    if student_probs.shape != teacher_probs.shape:
        raise ValueError(f"shape mismatch {student_probs.shape} vs {teacher_probs.shape}")
    d = student_probs.astype(np.float64) - teacher_probs
    per_sample = (d * d).mean(axis=1)
    return float((mask.mask * per_sample).sum() / len(per_sample))


def self_ensembling_grad(student_probs: np.ndarray, teacher_probs: np.ndarray, mask: ConfidenceMask) -> np.ndarray:
    n, c = student_probs.shape
    g = 2.0 * (student_probs - teacher_probs) / (n * c)
    return (g * mask.mask[:, None]).astype(student_probs.dtype)


def class_balance_loss(student_probs: np.ndarray) -> float:
    """BCE between the batch-mean class distribution and the uniform one, averaged over classes."""
    c = student_probs.shape[1]
    pbar = np.clip(student_probs.astype(np.float64).mean(axis=0), EPS, 1 - EPS)
    u = 1.0 / c
    return float(-(u * np.log(pbar) + (1 - u) * np.log(1 - pbar)).mean())


def class_balance_grad(student_probs: np.ndarray) -> np.ndarray:
    n, c = student_probs.shape
    u = 1.0 / c
    raw = student_probs.mean(axis=0)
    pbar = np.clip(raw, EPS, 1 - EPS)
    dp = -(u / pbar - (1 - u) / (1 - pbar)) / c
    dp = np.where((raw > EPS) & (raw < 1 - EPS), dp, 0.0)
    return np.broadcast_to(dp / n, student_probs.shape).astype(student_probs.dtype)


def rampup_weight(epoch: float, ramp_epochs: int = 80) -> float:
    t = min(epoch / ramp_epochs, 1.0)
    return math.exp(-5.0 * (1.0 - t) ** 2)


def unsup_scales(weights: LossWeights, pass_rate: float, epoch: int) -> tuple[float, float]:
    """Effective multipliers applied to the self-ensembling and class-balance terms."""
    if weights.mode == "confidence_threshold":
        return weights.lambda_se, weights.lambda_cb * pass_rate
    return rampup_weight(epoch, weights.ramp_epochs) * weights.lambda_se, 0.0


def combine_losses(ce: float, se: float, cb: float, weights: LossWeights, pass_rate: float, epoch: int) -> float:
    se_scale, cb_scale = unsup_scales(weights, pass_rate, epoch)
    return ce + se_scale * se + cb_scale * cb
