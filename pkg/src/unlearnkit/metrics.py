"""Forgetting evaluation: loss distributions, the membership attack, NoMUS.

The membership inference attack distinguishes forgotten from unseen samples
using only the scalar per-sample loss: a one-dimensional logistic classifier
is fit on a stratified half of the losses and scored by balanced accuracy on
the held-out half. The forgetting score is |accuracy - 0.5|, so 0 means the
attack cannot tell the two sets apart. NoMUS combines test accuracy and the
forgetting score into 0.5 * (accuracy + 1 - 2 * score).

The class split permutation is drawn from a fresh seeded generator per class
array, which makes the protocol exactly symmetric under swapping the two
input distributions (labels flip, the fitted classifier negates, accuracy
reflects about 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .data import Dataset
from .nn import MlpModel


@dataclass(frozen=True)
class LossDistribution:
    """Per-sample cross-entropy losses for one labeled dataset under one model."""

    losses: np.ndarray
    tag: str = ""

    def __len__(self) -> int:
        return self.losses.shape[0]


@dataclass(frozen=True)
class MiaResult:
    accuracy: float
    forgetting_score: float
    seed: int
    weight: float
    bias: float


@dataclass(frozen=True)
class NomusReport:
    method: str
    test_accuracy: float
    mia_accuracy: float
    forgetting_score: float
    nomus: float
    wall_clock_s: float = 0.0


@dataclass(frozen=True)
class HistogramBin:
    lo: float
    hi: float
    count: int


def sample_losses(model: MlpModel, dataset: Dataset, tag: str = "") -> LossDistribution:
    """Per-sample (not batch-mean) cross-entropy values, in dataset order."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    logits, _ = nn.forward(model, dataset.inputs)
    labels = np.asarray(dataset.labels)
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError(f"labels out of range for {model.n_classes} classes")
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    losses = lse - logits[np.arange(len(dataset)), labels]
    return LossDistribution(losses, tag)


def classification_accuracy(model: MlpModel, dataset: Dataset) -> float:
    logits, _ = nn.forward(model, dataset.inputs)
    return float(np.mean(logits.argmax(axis=1) == dataset.labels))


def _half_split(values: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    # fresh generator per class array: the partition depends only on the
    # array itself, never on which argument slot it arrived in
    perm = np.random.default_rng(seed).permutation(len(values))
    cut = len(values) // 2
    return values[perm[:cut]], values[perm[cut:]]


def _fit_logistic_1d(pos: np.ndarray, neg: np.ndarray) -> tuple[float, float]:
    """Full-batch gradient descent on binary cross-entropy, scalar feature.

    All reductions are per class and then combined, so exchanging the class
    roles negates every intermediate exactly; the fitted (weight, bias) of
    the swapped problem is the exact negation of the original.
    """
    n = len(pos) + len(neg)
    mu = (pos.sum() + neg.sum()) / n
    var = (((pos - mu) ** 2).sum() + ((neg - mu) ** 2).sum()) / n
    sd = np.sqrt(var)
    if sd == 0.0:
        sd = 1.0
    zp = (pos - mu) / sd
    zn = (neg - mu) / sd
    w = 0.0
    b = 0.0
    lr = 0.5
    for _ in range(5000):
        # sigmoid via the odd tanh keeps the class-swapped run an exact negation
        ep = (np.tanh((w * zp + b) / 2.0) - 1.0) / 2.0  # sigma(t) - 1 on the positive class
        en = (np.tanh((w * zn + b) / 2.0) + 1.0) / 2.0  # sigma(t) on the negative class
        dw = ((ep * zp).sum() + (en * zn).sum()) / n
        db = (ep.sum() + en.sum()) / n
        if max(abs(dw), abs(db)) < 1e-7:
            break
        w -= lr * dw
        b -= lr * db
    return w / sd, b - w * mu / sd


def train_mia(
    forget_losses: LossDistribution,
    unseen_losses: LossDistribution,
    seed: int = 0,
) -> MiaResult:
    """Fit the loss-threshold attack; label forget = 1, unseen = 0.

    Reports balanced accuracy on a held-out stratified 50/50 split and the
    forgetting score |accuracy - 0.5|.
    """
    f = np.asarray(forget_losses.losses, dtype=np.float64)
    u = np.asarray(unseen_losses.losses, dtype=np.float64)
    if len(f) < 2 or len(u) < 2:
        raise ValueError("need at least 2 samples per class to split and evaluate")
    f_train, f_eval = _half_split(f, seed)
    u_train, u_eval = _half_split(u, seed)
    w, b = _fit_logistic_1d(f_train, u_train)

    def _class_accuracy(values: np.ndarray, truth: int) -> float:
        pred = (w * values + b >= 0.0).astype(int)
        return float(np.mean(pred == truth))

    accuracy = 0.5 * (_class_accuracy(f_eval, 1) + _class_accuracy(u_eval, 0))
    return MiaResult(accuracy, abs(accuracy - 0.5), int(seed), w, b)


def nomus(test_accuracy: float, forgetting_score: float) -> float:
    """Combined utility/forgetting score: 0.5 * (acc + 1 - 2 * forgetting_score)."""
    if not 0.0 <= test_accuracy <= 1.0:
        raise ValueError(f"test_accuracy must be in [0, 1], got {test_accuracy}")
    if not 0.0 <= forgetting_score <= 0.5:
        raise ValueError(f"forgetting_score must be in [0, 0.5], got {forgetting_score}")
    return 0.5 * (test_accuracy + 1.0 - 2.0 * forgetting_score)


def make_nomus_report(method: str, test_accuracy: float, mia_accuracy: float,
                      wall_clock_s: float = 0.0) -> NomusReport:
    score = abs(mia_accuracy - 0.5)
    return NomusReport(method, test_accuracy, mia_accuracy, score,
                       nomus(test_accuracy, score), wall_clock_s)


def loss_histogram(
    dist: LossDistribution, bin_count: int, value_range: tuple[float, float]
) -> list[HistogramBin]:
    """Fixed-width bins over [lo, hi] plus an overflow bin for values > hi.

    Values below lo are counted in the first bin so that bin counts always
    sum to the sample count.
    """
    lo, hi = value_range
    if bin_count < 1:
        raise ValueError(f"bin_count must be >= 1, got {bin_count}")
    if not lo < hi:
        raise ValueError(f"invalid range {value_range}")
    width = (hi - lo) / bin_count
    values = np.asarray(dist.losses, dtype=np.float64)
    idx = np.floor((values - lo) / width).astype(int)
    idx = np.clip(idx, 0, bin_count - 1)
    idx[values > hi] = bin_count  # overflow
    counts = np.bincount(idx, minlength=bin_count + 1)
    bins = [HistogramBin(lo + i * width, lo + (i + 1) * width, int(counts[i]))
            for i in range(bin_count)]
    bins.append(HistogramBin(hi, math.inf, int(counts[bin_count])))
    return bins


def mia_forgetting_evaluator(
    forget: Dataset, unseen: Dataset, seed: int = 0
) -> Callable[[MlpModel], float]:
    """Forgetting-score callback for the unlearning loop: model -> |MIA acc - 0.5|."""

    def _evaluate(model: MlpModel) -> float:
        f = sample_losses(model, forget, "forget")
        u = sample_losses(model, unseen, "unseen")
        return train_mia(f, u, seed).forgetting_score

    return _evaluate
