"""Unlearning runs: dynamic forgetting with feature-distribution distancing,
plus the reference baselines (retrain, fine-tune, gradient ascent on the
forget set, instance-level error maximization).

The main loop alternates between two branches driven by the current
forgetting score: while the score is at or above the configured threshold,
retain batches are perturbed by signed input-gradient steps that push their
feature distribution away from the forget batch's features (transport loss
ascent, weighted against a classification-loss term that protects class
evidence) and the model trains on the perturbed inputs with their original
labels; once the score drops below the threshold, the loop falls back to
plain fine-tuning on clean retain batches.

Every run is a pure, seeded function of (model, splits, config): batch
orders come from per-split generator streams, so repeat runs match bitwise.
Retain and forget streams are seeded independently, which also makes a
threshold-never-reached run bitwise identical to ``finetune_run``. Each run
records the split names and indices of every training batch it draws in an
access log; evaluation callbacks read data on their own and are not
training access.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .data import Dataset, DatasetSplits
from .errors import ConfigError
from .metrics import mia_forgetting_evaluator
from .nn import (GradientBundle, MlpModel, backward, cross_entropy, feature_extract,
                 feature_vjp, forward, init_model, sgd_step)
from .ot import SinkhornConfig, cost_matrix, ot_loss_grad_features, sinkhorn_plan, uniform_marginal


class MethodKind(Enum):
    RETRAIN = "Retrain"
    FINETUNE = "FineTune"
    NEGGRAD = "NegGrad"
    ERRORMAX = "ErrorMax"
    DLFD = "DLFD"

    @classmethod
    def parse(cls, name: str) -> "MethodKind":
        for kind in cls:
            if kind.value.lower() == name.lower():
                return kind
        valid = ", ".join(k.value for k in cls)
        raise ConfigError(f"unknown method {name!r}; valid methods: {valid}")


@dataclass(frozen=True)
class UnlearnConfig:
    """Hyperparameters of one unlearning run.

    ``ce_weight_min``/``ce_weight_max`` are the endpoints of the linear
    schedule for the classification-loss weight inside the perturbation
    objective; ``retrain_epochs`` only applies to ``retrain_run``.
    """

    total_iterations: int
    dlfd_steps: int = 5
    learning_rate: float = 0.003
    step_size: float = 0.02
    batch_size: int = 50
    forgetting_threshold: float = 0.05
    ce_weight_min: float = 0.0
    ce_weight_max: float = 1.0
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    eval_every: int = 10
    seed: int = 42
    retrain_epochs: int = 5

    def __post_init__(self) -> None:
        if self.total_iterations < 1:
            raise ConfigError(f"total_iterations must be >= 1, got {self.total_iterations}")
        if self.dlfd_steps < 1:
            raise ConfigError(f"dlfd_steps must be >= 1, got {self.dlfd_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.forgetting_threshold <= 0.5:
            raise ConfigError(
                f"forgetting_threshold must be in [0, 0.5], got {self.forgetting_threshold}"
            )
        if self.learning_rate < 0 or self.step_size < 0:
            raise ConfigError("learning_rate and step_size must be >= 0")
        if self.ce_weight_min > self.ce_weight_max:
            raise ConfigError("ce_weight_min must be <= ce_weight_max")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.retrain_epochs < 1:
            raise ConfigError(f"retrain_epochs must be >= 1, got {self.retrain_epochs}")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    branch: str                      # dlfd runs use "perturb" / "finetune"
    ce_weight: float | None          # set only on perturb iterations
    train_loss: float
    forgetting_score: float | None   # set only on iterations that re-evaluated


@dataclass
class AccessLog:
    """Training-data reads: (iteration, split name, drawn indices)."""

    events: list[tuple[int, str, tuple[int, ...]]] = field(default_factory=list)

    def record(self, iteration: int, split: str, indices: np.ndarray) -> None:
        self.events.append((iteration, split, tuple(int(i) for i in indices)))

    def splits_read(self) -> set[str]:
        return {split for _, split, _ in self.events}

    def samples_read(self, split: str) -> int:
        return sum(len(idx) for _, s, idx in self.events if s == split)


@dataclass
class RunHistory:
    records: list[IterationRecord]
    access_log: AccessLog

    def branches(self) -> list[str]:
        return [r.branch for r in self.records]


class _BatchStream:
    """Sequential batches over a seeded shuffle; reshuffles each epoch.

    The final batch of an epoch may be partial so one epoch draws every
    sample exactly once.
    """

    def __init__(self, n: int, batch_size: int, seed_key) -> None:
        self._rng = np.random.default_rng(seed_key)
        self._n = n
        self._batch = min(batch_size, n)
        self._order = self._rng.permutation(n)
        self._cursor = 0

    def next(self) -> np.ndarray:
        if self._cursor >= self._n:
            self._order = self._rng.permutation(self._n)
            self._cursor = 0
        out = self._order[self._cursor:self._cursor + self._batch]
        self._cursor += len(out)
        return out


def linear_weight(iteration: int, total_iterations: int,
                  weight_min: float, weight_max: float) -> float:
    """Linear ramp from weight_min (iteration 1) to weight_max (final iteration)."""
    if not 1 <= iteration <= total_iterations:
        raise ValueError(f"iteration {iteration} out of range 1..{total_iterations}")
    frac = (iteration - 1) / max(total_iterations - 1, 1)
    return weight_min + (weight_max - weight_min) * frac


def _ce_grads(model: MlpModel, inputs: np.ndarray,
              labels: np.ndarray) -> tuple[float, GradientBundle]:
    logits, trace = forward(model, inputs)
    loss, dlogits = cross_entropy(logits, labels)
    return loss, backward(model, trace, dlogits)


def _negate(grads: GradientBundle) -> GradientBundle:
    return GradientBundle(tuple(-g for g in grads.weight_grads),
                          tuple(-g for g in grads.bias_grads), -grads.input_grads)


def _combine(a: GradientBundle, b: GradientBundle) -> GradientBundle:
    return GradientBundle(tuple(x + y for x, y in zip(a.weight_grads, b.weight_grads)),
                          tuple(x + y for x, y in zip(a.bias_grads, b.bias_grads)),
                          a.input_grads)


def perturb_batch(
    model: MlpModel,
    retain_inputs: np.ndarray,
    retain_labels: np.ndarray,
    forget_inputs: np.ndarray,
    steps: int,
    step_size: float,
    ce_weight: float,
    sinkhorn: SinkhornConfig = SinkhornConfig(),
    clip_range: tuple[float, float] | None = None,
) -> np.ndarray:
    """Signed-gradient ascent of (transport loss - ce_weight * classification loss).

    Each of the ``steps`` rounds extracts features of the current perturbed
    retain batch and the forget batch, solves the transport plan, and moves
    every retain input by +/- step_size per coordinate along the sign of the
    combined input gradient (transport cost differentiated with the plan
    frozen). The originals are never mutated; per-coordinate displacement is
    bounded by steps * step_size.
    """
    if len(retain_inputs) == 0 or len(forget_inputs) == 0:
        raise ValueError("perturb_batch needs non-empty retain and forget batches")
    if model.feature_layer_index is None:
        raise ValueError("model has no feature layer to distance in")
    perturbed = np.array(retain_inputs, dtype=np.float64, copy=True)
    forget_inputs = np.asarray(forget_inputs, dtype=np.float64)
    # model and forget batch are fixed for the whole call
    forget_feats, _ = feature_extract(model, forget_inputs)
    for _ in range(steps):
        logits, trace = forward(model, perturbed)
        features = trace.acts[model.feature_layer_index]

        cost = cost_matrix(features, forget_feats)
        plan = sinkhorn_plan(cost, uniform_marginal(len(perturbed)),
                             uniform_marginal(len(forget_inputs)), sinkhorn)
        dfeatures = ot_loss_grad_features(plan, features, forget_feats)
        transport_grad = feature_vjp(model, trace, dfeatures)

        _, dlogits = cross_entropy(logits, retain_labels)
        ce_grad = backward(model, trace, dlogits).input_grads

        ascent = transport_grad - ce_weight * ce_grad
        if not np.isfinite(ascent).all():
            raise ValueError("non-finite perturbation gradient")
        perturbed = perturbed + step_size * np.sign(ascent)
        if clip_range is not None:
            perturbed = np.clip(perturbed, clip_range[0], clip_range[1])
    return perturbed


def dlfd_run(
    model: MlpModel,
    splits: DatasetSplits,
    config: UnlearnConfig,
    evaluator: Callable[[MlpModel], float] | None = None,
) -> tuple[MlpModel, RunHistory]:
    """Dynamic forgetting: perturb-and-train while the forgetting score stays
    at or above the threshold, plain fine-tuning once it falls below.

    The forgetting score is re-evaluated every ``config.eval_every``
    iterations and held in between. ``evaluator`` defaults to the
    loss-based membership attack on the forget/unseen splits.
    """
    _check_splits(splits, need=("retain", "forget"))
    if evaluator is None:
        _check_splits(splits, need=("unseen",))
        evaluator = mia_forgetting_evaluator(splits.forget, splits.unseen, seed=config.seed)
    log = AccessLog()
    retain, forget = splits.retain, splits.forget
    retain_stream = _BatchStream(len(retain), config.batch_size, [config.seed, 0])
    forget_stream = _BatchStream(len(forget), config.batch_size, [config.seed, 1])

    theta = model
    records = []
    score = 0.0
    for k in range(1, config.total_iterations + 1):
        ridx = retain_stream.next()
        fidx = forget_stream.next()
        log.record(k, "retain", ridx)
        log.record(k, "forget", fidx)
        inputs, labels = retain.inputs[ridx], retain.labels[ridx]

        evaluated = None
        if (k - 1) % config.eval_every == 0:
            score = float(evaluator(theta))
            if not 0.0 <= score <= 0.5:
                raise ValueError(f"evaluator returned {score}, expected a value in [0, 0.5]")
            evaluated = score

        if score >= config.forgetting_threshold:
            weight = linear_weight(k, config.total_iterations,
                                   config.ce_weight_min, config.ce_weight_max)
            perturbed = perturb_batch(theta, inputs, labels, forget.inputs[fidx],
                                      config.dlfd_steps, config.step_size, weight,
                                      config.sinkhorn, clip_range=splits.input_range)
            loss, grads = _ce_grads(theta, perturbed, labels)
            branch = "perturb"
        else:
            weight = None
            loss, grads = _ce_grads(theta, inputs, labels)
            branch = "finetune"

        theta = sgd_step(theta, grads, config.learning_rate)
        records.append(IterationRecord(k, branch, weight, loss, evaluated))
    return theta, RunHistory(records, log)


def finetune_run(
    model: MlpModel, splits: DatasetSplits, config: UnlearnConfig
) -> tuple[MlpModel, RunHistory]:
    """Plain cross-entropy SGD on retain batches only."""
    _check_splits(splits, need=("retain",))
    log = AccessLog()
    retain = splits.retain
    stream = _BatchStream(len(retain), config.batch_size, [config.seed, 0])
    theta = model
    records = []
    for k in range(1, config.total_iterations + 1):
        ridx = stream.next()
        log.record(k, "retain", ridx)
        loss, grads = _ce_grads(theta, retain.inputs[ridx], retain.labels[ridx])
        theta = sgd_step(theta, grads, config.learning_rate)
        records.append(IterationRecord(k, "finetune", None, loss, None))
    return theta, RunHistory(records, log)


def neggrad_run(
    model: MlpModel, splits: DatasetSplits, config: UnlearnConfig
) -> tuple[MlpModel, RunHistory]:
    """Alternate descent on retain batches (odd iterations) with ascent on
    forget batches (even iterations)."""
    _check_splits(splits, need=("retain", "forget"))
    log = AccessLog()
    retain_stream = _BatchStream(len(splits.retain), config.batch_size, [config.seed, 0])
    forget_stream = _BatchStream(len(splits.forget), config.batch_size, [config.seed, 1])
    theta = model
    records = []
    for k in range(1, config.total_iterations + 1):
        if k % 2 == 1:
            idx = retain_stream.next()
            log.record(k, "retain", idx)
            loss, grads = _ce_grads(theta, splits.retain.inputs[idx], splits.retain.labels[idx])
            branch = "descend"
        else:
            idx = forget_stream.next()
            log.record(k, "forget", idx)
            loss, grads = _ce_grads(theta, splits.forget.inputs[idx], splits.forget.labels[idx])
            grads = _negate(grads)
            branch = "ascend"
        theta = sgd_step(theta, grads, config.learning_rate)
        records.append(IterationRecord(k, branch, None, loss, None))
    return theta, RunHistory(records, log)


def _ce_ascent(model: MlpModel, inputs: np.ndarray, labels: np.ndarray,
               steps: int, step_size: float,
               clip_range: tuple[float, float] | None) -> np.ndarray:
    """Signed-gradient ascent of the batch's own cross-entropy."""
    perturbed = np.array(inputs, dtype=np.float64, copy=True)
    for _ in range(steps):
        logits, trace = forward(model, perturbed)
        _, dlogits = cross_entropy(logits, labels)
        grad = backward(model, trace, dlogits).input_grads
        perturbed = perturbed + step_size * np.sign(grad)
        if clip_range is not None:
            perturbed = np.clip(perturbed, clip_range[0], clip_range[1])
    return perturbed


def errormax_run(
    model: MlpModel, splits: DatasetSplits, config: UnlearnConfig
) -> tuple[MlpModel, RunHistory]:
    """Instance-level error maximization: push forget inputs up their own
    loss surface, then fit retain batches while ascending the loss on the
    perturbed forget inputs."""
    _check_splits(splits, need=("retain", "forget"))
    log = AccessLog()
    retain_stream = _BatchStream(len(splits.retain), config.batch_size, [config.seed, 0])
    forget_stream = _BatchStream(len(splits.forget), config.batch_size, [config.seed, 1])
    theta = model
    records = []
    for k in range(1, config.total_iterations + 1):
        ridx = retain_stream.next()
        fidx = forget_stream.next()
        log.record(k, "retain", ridx)
        log.record(k, "forget", fidx)
        fx = _ce_ascent(theta, splits.forget.inputs[fidx], splits.forget.labels[fidx],
                        config.dlfd_steps, config.step_size, splits.input_range)
        loss, retain_grads = _ce_grads(theta, splits.retain.inputs[ridx],
                                       splits.retain.labels[ridx])
        _, forget_grads = _ce_grads(theta, fx, splits.forget.labels[fidx])
        theta = sgd_step(theta, _combine(retain_grads, _negate(forget_grads)),
                         config.learning_rate)
        records.append(IterationRecord(k, "errormax", None, loss, None))
    return theta, RunHistory(records, log)


def retrain_run(
    splits: DatasetSplits, model_template: MlpModel, config: UnlearnConfig
) -> tuple[MlpModel, RunHistory]:
    """Ground-truth reference: fresh init, trained on the retain split only
    for ``config.retrain_epochs`` epochs."""
    _check_splits(splits, need=("retain",))
    log = AccessLog()
    retain = splits.retain
    theta = init_model(model_template.layer_dims, model_template.feature_layer_index,
                       seed=config.seed)
    stream = _BatchStream(len(retain), config.batch_size, [config.seed, 0])
    batches_per_epoch = -(-len(retain) // min(config.batch_size, len(retain)))
    records = []
    k = 0
    for _ in range(config.retrain_epochs):
        for _ in range(batches_per_epoch):
            k += 1
            idx = stream.next()
            log.record(k, "retain", idx)
            loss, grads = _ce_grads(theta, retain.inputs[idx], retain.labels[idx])
            theta = sgd_step(theta, grads, config.learning_rate)
            records.append(IterationRecord(k, "train", None, loss, None))
    return theta, RunHistory(records, log)


def one_epoch_iterations(retain_size: int, batch_size: int) -> int:
    """Iteration count that consumes the retain split exactly once."""
    return -(-retain_size // min(batch_size, retain_size))


def _check_splits(splits: DatasetSplits, need: tuple[str, ...]) -> None:
    for name in need:
        ds: Dataset = splits.split(name)
        if len(ds) == 0:
            raise ValueError(f"{name} split is empty")
