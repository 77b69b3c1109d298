"""Segmentation and consistency objectives.

Probability maps are ``(N, C, H, W)`` tensors (a single ``(C, H, W)`` map is
promoted to a batch of one). Class 1 is the instrument channel.

The combined cross-entropy / log-Jaccard loss is

    0.5 * (CE + J),   CE = -mean_pixels sum_c y_t log y_p,
                      J  = -log((I + eps) / (U - I + eps))

with soft set sizes on the foreground channel, ``I = sum y_t*y_p`` and
``U = sum(y_t + y_p - y_t*y_p)``, evaluated per image and averaged over the
batch. ``J`` is unbounded below as the overlap becomes perfect; the ratio is
clamped at ``RATIO_CAP`` so the minimum is ``-log(RATIO_CAP)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import torch

from .errors import NumericError, ParameterError

RATIO_CAP = 1e8
FG = 1


class ConsistencyKind(str, enum.Enum):
    SCL = "SCL"
    MSE = "MSE"


class TargetPolicy(str, enum.Enum):
    FLOW = "FLOW"  # gradients reach both branches
    STOP = "STOP"  # clean branch is a constant target


class AlphaKind(str, enum.Enum):
    CONSTANT = "CONSTANT"
    TEMPORAL_LINEAR = "TEMPORAL_LINEAR"


@dataclass(frozen=True)
class LossConfig:
    eps: float = 1e-6
    kind: ConsistencyKind = ConsistencyKind.SCL
    target_policy: TargetPolicy = TargetPolicy.FLOW

    def __post_init__(self):
        object.__setattr__(self, "kind", ConsistencyKind(self.kind))
        object.__setattr__(self, "target_policy", TargetPolicy(self.target_policy))
        if not self.eps > 0:
            raise ParameterError(f"eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class AlphaSchedule:
    kind: AlphaKind = AlphaKind.TEMPORAL_LINEAR
    value: float = 1.0
    total_steps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", AlphaKind(self.kind))
        if self.total_steps < 1:
            raise ParameterError("total_steps must be >= 1")


def alpha(sched: AlphaSchedule, step: int) -> float:
    """Consistency weight at optimiser step ``step`` (0-based, inclusive of ``total_steps``)."""
    if not 0 <= step <= sched.total_steps:
        raise ParameterError(f"step {step} outside [0, {sched.total_steps}]")
    if sched.kind is AlphaKind.CONSTANT:
        return float(sched.value)
    return step / sched.total_steps


def joint_loss(l_sl, l_cl, sched: AlphaSchedule, step: int):
    return l_sl + alpha(sched, step) * l_cl


def _batched(t: torch.Tensor) -> torch.Tensor:
    return t[None] if t.dim() == 3 else t


def _check_finite(*ts: torch.Tensor) -> None:
    for t in ts:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite values in loss input")


def one_hot(mask: torch.Tensor, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W) integer labels -> (N, C, H, W) one-hot."""
    mask = mask[None] if mask.dim() == 2 else mask
    oh = torch.nn.functional.one_hot(mask.long(), n_classes)
    return oh.permute(0, 3, 1, 2).to(dtype)


def _as_target(y_t: torch.Tensor, y_p: torch.Tensor) -> torch.Tensor:
    if not y_t.dtype.is_floating_point:
        return one_hot(y_t, y_p.shape[1], y_p.dtype)
    return _batched(y_t)


def jaccard_ratio(y_p: torch.Tensor, y_t: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-image ``(I + eps) / (U - I + eps)`` on the foreground channel, clamped at ``RATIO_CAP``."""
    p = y_p[:, FG]
    t = y_t[:, FG]
    inter = (t * p).flatten(1).sum(1)
    union = (t + p - t * p).flatten(1).sum(1)
    ratio = (inter + eps) / ((union - inter).clamp_min(0.0) + eps)
    return ratio.clamp_max(RATIO_CAP)


def ce_jaccard_terms(y_p: torch.Tensor, y_t: torch.Tensor, eps: float = 1e-6, log_y_p: torch.Tensor | None = None):
    """The ``(CE, J)`` pair before the one-half weighting."""
    y_p = _batched(y_p)
    y_t = _as_target(y_t, y_p)
    if y_p.shape != y_t.shape:
        raise ParameterError(f"prediction {tuple(y_p.shape)} and target {tuple(y_t.shape)} differ")
    if not eps > 0:
        raise ParameterError("eps must be positive")
    _check_finite(y_p, y_t)
    if log_y_p is None:
        log_y_p = torch.log(y_p.clamp_min(torch.finfo(y_p.dtype).tiny))
    else:
        log_y_p = _batched(log_y_p)
    ce = -(y_t * log_y_p).sum(1).mean()
    jac = -torch.log(jaccard_ratio(y_p, y_t, eps)).mean()
    return ce, jac


def ce_jaccard_loss(y_p: torch.Tensor, y_t: torch.Tensor, eps: float = 1e-6, log_y_p: torch.Tensor | None = None):
    """Cross-entropy plus log-Jaccard, weighted one half each.

    ``y_t`` may be an integer mask (one-hot target) or a soft probability map.
    ``log_y_p`` can carry log-probabilities from a log-softmax to keep the
    cross-entropy exact for confident predictions.
    """
    ce, jac = ce_jaccard_terms(y_p, y_t, eps, log_y_p)
    return 0.5 * (ce + jac)


def mse_consistency(y_p: torch.Tensor, y_t: torch.Tensor):
    """Mean over pixels and classes of squared differences."""
    y_p, y_t = _batched(y_p), _batched(y_t)
    if y_p.shape != y_t.shape:
        raise ParameterError(f"maps {tuple(y_p.shape)} and {tuple(y_t.shape)} differ")
    _check_finite(y_p, y_t)
    return ((y_p - y_t) ** 2).mean()


def consistency_loss(
    cfg: LossConfig,
    clean: torch.Tensor,
    perturbed: torch.Tensor,
    log_perturbed: torch.Tensor | None = None,
):
    """Distance between predictions on an image and on its perturbed copy.

    The clean prediction plays the target role; under ``TargetPolicy.STOP``
    it is detached.
    """
    if cfg.target_policy is TargetPolicy.STOP:
        clean = clean.detach()
    if cfg.kind is ConsistencyKind.MSE:
        return mse_consistency(perturbed, clean)
    return ce_jaccard_loss(perturbed, clean, cfg.eps, log_y_p=log_perturbed)
