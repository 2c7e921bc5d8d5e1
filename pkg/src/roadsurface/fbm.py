"""Foreground-background auxiliary loss over per-stage token features.

Each stage's token features z (B x T x C) pass through a small per-stage
linear classifier to a row-softmax classification map.  The per-token
maximum class score ranks tokens; the top K per stage are foreground, the
rest background.  Background scores are pushed toward a -1 target through
the smooth rational tanh mapping, giving the stage loss

    mean over background tokens of (smooth_hardtanh(score) + 1)^2

and the total is the weighted sum across stages.  Selection is a hard
top-K (non-differentiable); gradients flow through the background scores
only, into both the stage classifiers and the trunk features.

The nominal K schedule (256, 128, 64, 32) refers to the token counts at
224x224 input (3136, 784, 196, 49).  At other resolutions each K scales
proportionally to the stage's actual token count; a stage with fewer than
2 tokens cannot split into nonempty foreground and background and is
marked inactive, dropping out of the sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, gather, matmul, smooth_hardtanh, softmax, tensor_max
from .model import truncated_normal

REFERENCE_TOKENS = (3136, 784, 196, 49)
DEFAULT_K_SCHEDULE = (256, 128, 64, 32)


@dataclass(frozen=True)
class FbmConfig:
    """K schedule, class count, and loss weight."""

    k_schedule: tuple[int, int, int, int] = DEFAULT_K_SCHEDULE
    num_classes: int = 5
    loss_weight: float = 1.0
    reference_tokens: tuple[int, int, int, int] = REFERENCE_TOKENS

    def __post_init__(self):
        problems = []
        ks = tuple(self.k_schedule)
        if len(ks) != 4:
            problems.append(f"k_schedule needs 4 entries, got {len(ks)}")
        else:
            if any(k < 1 for k in ks):
                problems.append(f"k_schedule entries must be >= 1, got {ks}")
            if any(a <= b for a, b in zip(ks, ks[1:])):
                problems.append(
                    f"k_schedule must be strictly decreasing, got {ks}"
                )
        if self.num_classes < 2:
            problems.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.loss_weight < 0:
            problems.append(
                f"loss_weight must be nonnegative, got {self.loss_weight}"
            )
        if len(self.reference_tokens) != 4 or any(
            t < 1 for t in self.reference_tokens
        ):
            problems.append("reference_tokens must be 4 positive counts")
        if problems:
            raise ConfigError(problems)


@dataclass
class StageClassifier:
    """Linear token classifier for one stage: weight (C x N), bias (N,)."""

    weight: Tensor
    bias: Tensor


@dataclass
class FbmOutput:
    """Per-stage selection result.

    ``foreground``/``background`` are integer index arrays shaped
    (batch, k)/(batch, T-k); both are None for an inactive stage.
    """

    stage: int
    active: bool
    k: int | None
    foreground: np.ndarray | None
    background: np.ndarray | None
    stage_loss: float


def build_classifiers(stage_channels, num_classes: int,
                      seed: int = 0) -> list[StageClassifier]:
    """One classifier per stage, truncated-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    out = []
    for c in stage_channels:
        w = Tensor(truncated_normal(rng, (c, num_classes)),
                   requires_grad=True)
        b = Tensor(np.zeros(num_classes), requires_grad=True)
        out.append(StageClassifier(w, b))
    return out


def classifier_params(classifiers) -> dict[str, Tensor]:
    """Named registry view for optimizer and checkpoint inclusion."""
    out = {}
    for idx, clf in enumerate(classifiers):
        out[f"fbm.stage{idx + 1}.w"] = clf.weight
        out[f"fbm.stage{idx + 1}.b"] = clf.bias
    return out


def stage_classify(z: Tensor, clf: StageClassifier) -> Tensor:
    """Row-softmax classification map: softmax(z w + b) over classes."""
    if z.shape[-1] != clf.weight.shape[0]:
        raise DimensionError(
            f"feature width {z.shape[-1]} does not match classifier "
            f"input {clf.weight.shape[0]}"
        )
    return softmax(matmul(z, clf.weight) + clf.bias, axis=-1)


def max_score_map(classification_map: Tensor) -> Tensor:
    """Per-token maximum class score."""
    return tensor_max(classification_map, axis=-1)


def select_foreground(scores, k: int):
    """Split token indices into (foreground, background) by score.

    Foreground holds the k highest-scoring token indices (ties keep the
    lower index); both partitions are returned in ascending index order.
    """
    values = np.asarray(getattr(scores, "data", scores))
    if values.ndim != 1:
        raise DimensionError(
            f"select_foreground expects a 1-D score map, got {values.shape}"
        )
    t = values.shape[0]
    if not 0 < k < t:
        raise ContractError(
            f"foreground count must satisfy 0 < k < {t}, got {k}"
        )
    order = np.argsort(-values, kind="stable")
    return np.sort(order[:k]), np.sort(order[k:])


def background_map(bg_scores: Tensor) -> Tensor:
    """Map background scores through the smooth rational tanh."""
    return smooth_hardtanh(bg_scores)


def fb_stage_loss(bg_scores: Tensor) -> Tensor:
    """Mean squared distance of mapped background scores from -1."""
    if bg_scores.size == 0:
        raise ContractError("background is empty; no stage loss defined")
    shifted = background_map(bg_scores) + Tensor(1.0)
    return (shifted * shifted).mean()


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def effective_k_schedule(cfg: FbmConfig, token_counts) -> list[int | None]:
    """Scale the nominal K schedule to actual per-stage token counts.

    Each K scales by the ratio of actual to reference tokens (half-up
    rounding, floor 1).  A stage with fewer than 2 tokens is inactive
    (None).  The scaled schedule must keep every active K below its token
    count and strictly decreasing across active stages.
    """
    token_counts = tuple(int(t) for t in token_counts)
    if len(token_counts) != 4:
        raise ConfigError(
            [f"expected 4 stage token counts, got {len(token_counts)}"]
        )
    eff: list[int | None] = []
    problems = []
    for i, (k, t_now, t_ref) in enumerate(
        zip(cfg.k_schedule, token_counts, cfg.reference_tokens)
    ):
        if t_now < 2:
            eff.append(None)
            continue
        scaled = max(1, _round_half_up(k * t_now / t_ref))
        if scaled >= t_now:
            problems.append(
                f"stage {i + 1}: scaled foreground count {scaled} must stay "
                f"below the token count {t_now}"
            )
            eff.append(None)
            continue
        eff.append(scaled)
    active = [k for k in eff if k is not None]
    if any(a <= b for a, b in zip(active, active[1:])):
        problems.append(
            f"scaled schedule {eff} is not strictly decreasing over "
            "active stages"
        )
    if problems:
        raise ConfigError(problems)
    return eff


@dataclass
class FbmResult:
    loss: Tensor
    outputs: list[FbmOutput]


def fbm_total_loss(stage_features, classifiers, cfg: FbmConfig) -> FbmResult:
    """Weighted sum of per-stage background losses.

    ``stage_features`` holds four tensors shaped (B, T_i, C_i) or
    (T_i, C_i); selection never alters the features flowing onward, the
    module is purely loss-side.
    """
    if len(stage_features) != 4 or len(classifiers) != 4:
        raise DimensionError(
            "fbm_total_loss expects 4 stage features and 4 classifiers"
        )
    feats = []
    for z in stage_features:
        if z.ndim == 2:
            z = z.reshape((1,) + z.shape)
        elif z.ndim != 3:
            raise DimensionError(
                f"stage features must be 2-D or 3-D, got shape {z.shape}"
            )
        feats.append(z)

    token_counts = [z.shape[1] for z in feats]
    eff = effective_k_schedule(cfg, token_counts)

    total = None
    outputs = []
    for i, (z, clf, k) in enumerate(zip(feats, classifiers, eff)):
        if k is None:
            outputs.append(FbmOutput(stage=i + 1, active=False, k=None,
                                     foreground=None, background=None,
                                     stage_loss=0.0))
            continue
        scores = max_score_map(stage_classify(z, clf))  # (B, T)
        batch, t = scores.shape
        fg = np.empty((batch, k), dtype=np.int64)
        bg = np.empty((batch, t - k), dtype=np.int64)
        for b in range(batch):
            fg[b], bg[b] = select_foreground(scores.data[b], k)
        bg_scores = gather(scores, bg, axis=1)
        stage_loss = fb_stage_loss(bg_scores)
        outputs.append(FbmOutput(stage=i + 1, active=True, k=k,
                                 foreground=fg, background=bg,
                                 stage_loss=stage_loss.item()))
        total = stage_loss if total is None else total + stage_loss

    if total is None:
        return FbmResult(loss=Tensor(0.0), outputs=outputs)
    return FbmResult(loss=total * Tensor(cfg.loss_weight), outputs=outputs)
