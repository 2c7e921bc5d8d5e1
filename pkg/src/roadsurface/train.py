"""Training loop: warmup-cosine schedule, decoupled-decay Adam, combined
classification plus foreground-background objective, structured logging.

Every run with the same seed, data, and configuration reproduces the same
loss trace bit for bit: shuffles, initialization, and arithmetic are all
seeded and single-threaded numpy float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, batch_iterator
from .errors import ConfigError, ContractError, NumericsError, TrainAbort
from .fbm import FbmConfig, fbm_total_loss
from .metrics import MetricsReport
from .model import Model
from .optim import AdamW, LrSchedule, base_lr_for_batch
from .tensor import Tensor, cross_entropy, no_grad


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one optimization run.

    ``base_lr`` of None selects the batch-proportional rule
    5e-4 * batch / 512; an explicit value overrides it.  ``fbm_weight``
    is the multiplier on the foreground-background loss; 0 disables the
    auxiliary objective entirely (no classifier parameters are updated).
    """

    epochs: int = 40
    batch: int = 32
    base_lr: float | None = None
    min_lr: float = 0.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 0
    fbm_weight: float = 1.0
    seed: int = 0
    target_top1: float | None = None

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            problems.append(f"batch must be >= 1, got {self.batch}")
        if self.base_lr is not None and self.base_lr <= 0:
            problems.append(f"base_lr must be positive, got {self.base_lr}")
        if self.min_lr < 0:
            problems.append(f"min_lr must be nonnegative, got {self.min_lr}")
        if self.weight_decay < 0:
            problems.append(
                f"weight_decay must be nonnegative, got {self.weight_decay}"
            )
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            problems.append(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0:
            problems.append(f"eps must be positive, got {self.eps}")
        if self.warmup_steps < 0:
            problems.append(
                f"warmup_steps must be nonnegative, got {self.warmup_steps}"
            )
        if self.fbm_weight < 0:
            problems.append(
                f"fbm_weight must be nonnegative, got {self.fbm_weight}"
            )
        if self.target_top1 is not None and not 0 <= self.target_top1 <= 1:
            problems.append(
                f"target_top1 must lie in [0, 1], got {self.target_top1}"
            )
        if problems:
            raise ConfigError(problems)

    def resolved_base_lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return base_lr_for_batch(self.batch)


@dataclass
class TrainResult:
    """Outcome of a run: per-step and per-epoch records plus final state."""

    records: list = field(default_factory=list)
    steps: int = 0
    final_train_top1: float = 0.0
    stopped_early: bool = False
    optimizer: AdamW | None = None
    schedule: LrSchedule | None = None


def total_loss(logits: Tensor, labels, fbm_loss: Tensor) -> Tensor:
    """Cross entropy plus the (already weighted) auxiliary loss."""
    return cross_entropy(logits, labels) + fbm_loss


def evaluate(model: Model, dataset: Dataset, batch: int = 64) -> MetricsReport:
    """Argmax predictions over the dataset, gradients disabled."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    truths = []
    preds = []
    with no_grad():
        for images, labels in batch_iterator(dataset, batch, shuffle_seed=0):
            logits, _ = model.forward(images)
            preds.append(np.argmax(logits.data, axis=1))
            truths.append(labels)
    truth = np.concatenate(truths)
    pred = np.concatenate(preds)
    return MetricsReport.from_predictions(truth, pred, model.config.num_classes)


def _epoch_shuffle_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def train(model: Model, dataset: Dataset, config: TrainConfig,
          classifiers=None, fbm_config: FbmConfig | None = None,
          on_record=None) -> TrainResult:
    """Run the full loop and return the structured log.

    Each step record carries step, epoch, lr, loss, cross_entropy, and
    fbm_loss; each epoch record carries the training Top-1.  A non-finite
    value anywhere in a step raises TrainAbort naming the step.  When
    ``target_top1`` is set the loop stops at the end of the first epoch
    that reaches it.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    use_fbm = config.fbm_weight > 0 and classifiers is not None
    if use_fbm and fbm_config is None:
        raise ConfigError(
            ["classifiers were supplied without a foreground-background "
             "configuration"]
        )
    if use_fbm:
        fbm_config = replace(fbm_config, loss_weight=config.fbm_weight)

    steps_per_epoch = math.ceil(len(dataset) / config.batch)
    total_steps = config.epochs * steps_per_epoch
    if config.warmup_steps >= total_steps:
        raise ConfigError(
            [f"warmup_steps {config.warmup_steps} must be below the total "
             f"step count {total_steps}"]
        )
    base_lr = config.resolved_base_lr()
    schedule = LrSchedule(
        base_lr=base_lr, total_steps=total_steps,
        warmup_steps=config.warmup_steps, min_lr=config.min_lr,
    )

    params = dict(model.params)
    if use_fbm:
        from .fbm import classifier_params

        params.update(classifier_params(classifiers))
    optimizer = AdamW(params, lr=base_lr, betas=config.betas, eps=config.eps,
                      weight_decay=config.weight_decay)

    result = TrainResult(optimizer=optimizer, schedule=schedule)

    def emit(record):
        result.records.append(record)
        if on_record is not None:
            on_record(record)

    step = 0
    for epoch in range(config.epochs):
        shuffle_seed = _epoch_shuffle_seed(config.seed, epoch)
        for images, labels in batch_iterator(dataset, config.batch,
                                             shuffle_seed):
            lr = schedule.lr_at(step)
            try:
                logits, features = model.forward(images)
                ce = cross_entropy(logits, labels)
                if use_fbm:
                    fbm_result = fbm_total_loss(features, classifiers,
                                                fbm_config)
                    fbm_loss = fbm_result.loss
                else:
                    fbm_loss = Tensor(0.0)
                loss = ce + fbm_loss
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NumericsError("loss is not finite")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step(lr=lr)
            except NumericsError as exc:
                raise TrainAbort(step, str(exc))
            emit({
                "kind": "step",
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "loss": loss_value,
                "cross_entropy": ce.item(),
                "fbm_loss": fbm_loss.item(),
            })
            step += 1
        try:
            report = evaluate(model, dataset, batch=config.batch)
        except NumericsError as exc:
            raise TrainAbort(step - 1, f"epoch {epoch} evaluation: {exc}")
        emit({
            "kind": "epoch",
            "epoch": epoch,
            "train_top1": report.top1,
            "train_macro_f1": report.macro_f1,
        })
        result.final_train_top1 = report.top1
        if config.target_top1 is not None and report.top1 >= config.target_top1:
            result.stopped_early = True
            break
    result.steps = step
    return result
