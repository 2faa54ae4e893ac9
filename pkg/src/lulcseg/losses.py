"""Training objectives: weighted cross-entropy, erosion-based boundary loss,
Tversky loss, cross pseudo-supervision, and the lambda ramp-up schedule.

All losses take raw logits shaped [batch, class=5, H, W] and return scalar
tensors. Targets may be integer class maps [batch, H, W] or one-hot tensors
[batch, 5, H, W]; one-hot targets must be exact (a single 1 per pixel).

Every loss is a *sum* over samples/classes/pixels divided by a normalization
constant K. When K is not given it defaults to batch * H * W, which makes the
value a per-pixel average; trainers pass K = dataset_size * H * W so that
batch losses summed over an epoch equal the full-dataset objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .chipper import ChipDataset
from .errors import EmptyDataset, ShapeMismatch
from .geo import NUM_CLASSES

DEFAULT_LAMBDA_MAX = 0.1
DEFAULT_WEIGHT_CAP = 50.0


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights, inverse to class abundance."""

    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if alpha.shape != (NUM_CLASSES,):
            raise ShapeMismatch(f"alpha must have shape ({NUM_CLASSES},), got {alpha.shape}")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
            raise ValueError("class weights must be finite and > 0")
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def uniform(cls) -> "ClassWeights":
        return cls(np.ones(NUM_CLASSES))


@dataclass(frozen=True)
class HausdorffParams:
    """Erosion-loss knobs: iteration count and depth exponent."""

    erosions: int = 10
    exponent: float = 2.0

    def __post_init__(self):
        if self.erosions < 1:
            raise ValueError("erosions must be >= 1")
        if self.exponent < 0:
            raise ValueError("exponent must be >= 0")


@dataclass(frozen=True)
class RampUpSchedule:
    """Sigmoid-style ramp of the consistency weight lambda over epochs."""

    rampup_length: int
    total_epochs: int
    lambda_max: float = DEFAULT_LAMBDA_MAX
    # When set, the exponential uses t / total_epochs instead of
    # t / rampup_length; this variant is discontinuous at t = rampup_length
    # whenever rampup_length < total_epochs.
    ramp_over_total: bool = False

    def __post_init__(self):
        if not 0 <= self.rampup_length <= self.total_epochs:
            raise ValueError("need 0 <= rampup_length <= total_epochs")
        if self.lambda_max <= 0:
            raise ValueError("lambda_max must be > 0")

    def value(self, epoch: int) -> float:
        return rampup(self.rampup_length, epoch, self.total_epochs,
                      self.lambda_max, self.ramp_over_total)


def rampup(r: int, t: int, T: int, lambda_max: float = DEFAULT_LAMBDA_MAX,
           ramp_over_total: bool = False) -> float:
    """Consistency-weight schedule for epoch ``t``.

    Returns 0 at epoch 0, ``lambda_max`` once t exceeds the ramp length r,
    and ``lambda_max * exp(-5 (1 - t/r)^2)`` inside the ramp, which meets
    ``lambda_max`` continuously at t = r.
    """
    if not 0 <= t <= T:
        raise ValueError(f"epoch t={t} outside [0, T={T}]")
    if not 0 <= r <= T:
        raise ValueError(f"ramp length r={r} outside [0, T={T}]")
    if t == 0:
        return 0.0
    if t > r:
        return lambda_max
    denom = T if ramp_over_total else r
    return lambda_max * math.exp(-5.0 * (1.0 - t / denom) ** 2)


def normalization_constant(ds_size: int, width: int, height: int) -> float:
    """Loss normalization K = dataset size x W x H."""
    if ds_size < 1 or width < 1 or height < 1:
        raise ValueError("all factors of K must be >= 1")
    return float(ds_size) * float(width) * float(height)


def class_weights_from_dataset(ds: ChipDataset, cap: float = DEFAULT_WEIGHT_CAP) -> ClassWeights:
    """Inverse-abundance weights: alpha_w = N_total / (num_classes * N_w).

    Absent classes get weight ``cap``; all weights are clipped to
    [1/cap, cap].
    """
    if not ds.records:
        raise EmptyDataset("cannot derive class weights from an empty dataset")
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for rec in ds.records:
        counts += np.bincount(rec.label.ravel(), minlength=NUM_CLASSES)
    total = counts.sum()
    alpha = np.full(NUM_CLASSES, cap, dtype=np.float64)
    present = counts > 0
    alpha[present] = total / (NUM_CLASSES * counts[present])
    return ClassWeights(np.clip(alpha, 1.0 / cap, cap))


# ---------------------------------------------------------------------------
# Tensor plumbing
# ---------------------------------------------------------------------------

def _check_logits(logits: torch.Tensor) -> tuple[int, int, int, int]:
    if logits.ndim != 4 or logits.shape[1] != NUM_CLASSES:
        raise ShapeMismatch(
            f"logits must be [batch, {NUM_CLASSES}, H, W], got {tuple(logits.shape)}"
        )
    return logits.shape


def _alpha_like(alpha, logits: torch.Tensor) -> torch.Tensor:
    if isinstance(alpha, ClassWeights):
        alpha = alpha.alpha
    t = torch.as_tensor(alpha, dtype=logits.dtype, device=logits.device)
    if t.shape != (NUM_CLASSES,):
        raise ShapeMismatch(f"alpha must have {NUM_CLASSES} entries, got {tuple(t.shape)}")
    return t


def _target_indices(target: torch.Tensor, shape) -> torch.Tensor:
    """Integer class map from an int target or an exact one-hot target."""
    b, c, h, w = shape
    target = torch.as_tensor(target)
    if target.ndim == 4:
        if target.shape != (b, c, h, w):
            raise ShapeMismatch(
                f"one-hot target {tuple(target.shape)} != logits {(b, c, h, w)}"
            )
        return target.argmax(dim=1)
    if target.shape != (b, h, w):
        raise ShapeMismatch(f"target {tuple(target.shape)} != expected {(b, h, w)}")
    return target.long()


def _target_one_hot(target: torch.Tensor, shape, dtype) -> torch.Tensor:
    b, c, h, w = shape
    target = torch.as_tensor(target)
    if target.ndim == 4:
        if target.shape != (b, c, h, w):
            raise ShapeMismatch(
                f"one-hot target {tuple(target.shape)} != logits {(b, c, h, w)}"
            )
        return target.to(dtype)
    if target.shape != (b, h, w):
        raise ShapeMismatch(f"target {tuple(target.shape)} != expected {(b, h, w)}")
    return F.one_hot(target.long(), c).permute(0, 3, 1, 2).to(dtype)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def weighted_ce(logits: torch.Tensor, target, alpha, k: float | None = None) -> torch.Tensor:
    """Class-weighted pixel-wise cross-entropy of softmax(logits), summed and
    divided by K (defaults to batch * H * W)."""
    b, c, h, w = _check_logits(logits)
    idx = _target_indices(target, (b, c, h, w)).to(logits.device)
    weight = _alpha_like(alpha, logits)
    k = float(b * h * w) if k is None else float(k)
    return F.cross_entropy(logits, idx, weight=weight, reduction="sum") / k


def one_hot_pseudo(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax as a one-hot constant; ties go to the lowest class
    index and no gradient flows through the result."""
    _check_logits(logits)
    with torch.no_grad():
        idx = _argmax_lowest(logits)
        return F.one_hot(idx, logits.shape[1]).permute(0, 3, 1, 2).to(logits.dtype)


def _argmax_lowest(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over the class dim with ties resolved to the lowest index."""
    vmax = logits.max(dim=1, keepdim=True).values
    is_max = logits == vmax
    first = is_max & (is_max.cumsum(dim=1) == 1)
    arange = torch.arange(logits.shape[1], device=logits.device).view(1, -1, 1, 1)
    return (first.long() * arange).sum(dim=1)


def cps_loss(logits_1: torch.Tensor, logits_2: torch.Tensor, alpha,
             k: float | None = None) -> torch.Tensor:
    """Cross pseudo-supervision: each model's weighted cross-entropy against
    the other's one-hot argmax, summed. Pseudo-labels are gradient-stopped."""
    b, c, h, w = _check_logits(logits_1)
    if logits_2.shape != logits_1.shape:
        raise ShapeMismatch(
            f"logit shapes differ: {tuple(logits_1.shape)} vs {tuple(logits_2.shape)}"
        )
    weight = _alpha_like(alpha, logits_1)
    k = float(b * h * w) if k is None else float(k)
    with torch.no_grad():
        pseudo_1 = _argmax_lowest(logits_1)
        pseudo_2 = _argmax_lowest(logits_2)
    loss = F.cross_entropy(logits_1, pseudo_2, weight=weight, reduction="sum") \
        + F.cross_entropy(logits_2, pseudo_1, weight=weight, reduction="sum")
    return loss / k


def _erode(e: torch.Tensor) -> torch.Tensor:
    """One soft-erosion step: average with the 4-neighbourhood (normalized
    3x3 cross kernel, zero boundary) then gate by the previous map so support
    only shrinks. Values below the smallest normal float flush to zero, which
    keeps deeply-eroded maps out of denormal arithmetic."""
    p = F.pad(e, (1, 1, 1, 1))
    s = p[..., :-2, 1:-1] + p[..., 2:, 1:-1]
    s = s + p[..., 1:-1, :-2]
    s = s + p[..., 1:-1, 2:]
    s = s + e
    e = (s * 0.2) * e
    return F.threshold(e, torch.finfo(e.dtype).tiny, 0.0)


def hausdorff_erosion(logits: torch.Tensor, target, alpha,
                      params: HausdorffParams = HausdorffParams(),
                      k: float | None = None) -> torch.Tensor:
    """Erosion-based boundary loss.

    The squared softmax error map per class is repeatedly soft-eroded;
    surviving (deep) errors are charged with weight ``iteration**exponent``.
    Per class: sum_k mean(e_k) * k**exponent, then class-weighted, summed over
    batch and classes, divided by K.
    """
    b, c, h, w = _check_logits(logits)
    one_hot = _target_one_hot(target, (b, c, h, w), logits.dtype).to(logits.device)
    weight = _alpha_like(alpha, logits)
    k = float(b * h * w) if k is None else float(k)
    e = (logits.softmax(dim=1) - one_hot) ** 2
    total = logits.new_zeros(())
    for it in range(1, params.erosions + 1):
        e = _erode(e)
        total = total + (e.mean(dim=(2, 3)) * weight).sum() * float(it) ** params.exponent
    return total / k


def supervised_loss(logits_1: torch.Tensor, logits_2: torch.Tensor, target, alpha,
                    params: HausdorffParams, k: float) -> tuple[torch.Tensor, dict]:
    """Supervised objective over both models: summed erosion losses plus half
    the summed weighted cross-entropies. Returns (total, components)."""
    l_hf = hausdorff_erosion(logits_1, target, alpha, params, k) \
        + hausdorff_erosion(logits_2, target, alpha, params, k)
    l_wce = weighted_ce(logits_1, target, alpha, k) \
        + weighted_ce(logits_2, target, alpha, k)
    total = l_hf + 0.5 * l_wce
    return total, {"hausdorff": l_hf, "weighted_ce": l_wce}


def total_loss(l_supervised, l_cps, lam: float):
    """Combined objective: supervised plus lambda-weighted consistency."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return l_supervised + lam * l_cps


def tversky_loss(logits: torch.Tensor, target, a: float = 0.3, b: float = 0.7,
                 smooth: float = 1.0) -> torch.Tensor:
    """Soft Tversky loss on softmax probabilities, averaged over classes.

    ``a`` scales false positives, ``b`` false negatives; a = b = 0.5 recovers
    soft Dice (with smoothing 2 * smooth).
    """
    if a <= 0 or b <= 0:
        raise ValueError("Tversky a and b must be > 0")
    bsz, c, h, w = _check_logits(logits)
    one_hot = _target_one_hot(target, (bsz, c, h, w), logits.dtype).to(logits.device)
    p = logits.softmax(dim=1)
    dims = (0, 2, 3)
    tp = (p * one_hot).sum(dim=dims)
    fp = (p * (1.0 - one_hot)).sum(dim=dims)
    fn = ((1.0 - p) * one_hot).sum(dim=dims)
    index = (tp + smooth) / (tp + a * fp + b * fn + smooth)
    return (1.0 - index).mean()
