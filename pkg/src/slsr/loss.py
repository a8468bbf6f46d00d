"""Cross-entropy for real images, sparse-label loss for generated images,
and the gated combination used for joint training."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .labels import LabelTarget

LOG_FLOOR = 1e-12


class FloorClampWarning(RuntimeWarning):
    """A probability on a target class hit the log floor."""


def _safe_log(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < LOG_FLOOR):
        warnings.warn("probability below log floor; clamped", FloorClampWarning, stacklevel=3)
    return np.log(np.maximum(p, LOG_FLOOR))


def xent(probs, target: LabelTarget) -> float:
    """``-log probs[y]`` for a one-hot target."""
    (y,) = np.flatnonzero(target.probs)
    return float(-_safe_log(np.asarray(probs)[[y]])[0])


def sls(probs, target: LabelTarget) -> float:
    """Cross-entropy of ``probs`` against a sparse smoothed target."""
    idx = np.flatnonzero(target.probs)
    return float(-(target.probs[idx] * _safe_log(np.asarray(probs)[idx])).sum())


@dataclass
class LossBatchSpec:
    probs: np.ndarray
    targets: Sequence[LabelTarget]
    lam: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.lam = np.asarray(self.lam)
        if len(self.targets) != self.probs.shape[0] or self.lam.shape != (self.probs.shape[0],):
            raise ValueError("probs, targets and lam must be aligned")
        for i, (t, g) in enumerate(zip(self.targets, self.lam)):
            if g not in (0, 1):
                raise ValueError(f"row {i}: lambda must be 0 or 1")
            expected = "generated" if g == 1 else "real"
            if t.provenance != expected:
                raise ValueError(f"row {i}: lambda={int(g)} but target provenance is {t.provenance}")


def slsr_loss(batch: LossBatchSpec, generated_loss_scale: float = 1.0) -> float:
    """Mean over rows of ``(1 - lam) * xent + lam * scale * sls``."""
    total = 0.0
    for p, t, g in zip(batch.probs, batch.targets, batch.lam):
        if g == 0:
            total += xent(p, t) if t.scheme == "one_hot" else sls(p, t)
        else:
            total += generated_loss_scale * sls(p, t)
    return total / len(batch.targets)


# ---------------------------------------------------------------------------
# log-space versions used during training


def row_losses(log_probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-row cross-entropy ``-sum_k t_k log p_k`` with the log floor applied."""
    lp = log_probs.clamp(min=math.log(LOG_FLOOR))
    return -(targets * lp).sum(dim=1)


def gated_loss(log_probs: torch.Tensor, targets: torch.Tensor, lam: torch.Tensor,
               generated_loss_scale: float = 1.0) -> torch.Tensor:
    """Batch mean of the regularized loss from log-probabilities.

    ``lam`` is 0 for real rows and 1 for generated rows; real rows carry
    one-hot targets so their row loss is the plain cross-entropy.
    """
    lam = lam.to(log_probs.dtype)
    w = (1.0 - lam) + lam * generated_loss_scale
    return (w * row_losses(log_probs, targets)).mean()


def gated_loss_from_logits(logits: torch.Tensor, targets: torch.Tensor, lam: torch.Tensor,
                           generated_loss_scale: float = 1.0) -> torch.Tensor:
    return gated_loss(F.log_softmax(logits, dim=1), targets, lam, generated_loss_scale)


def split_losses(log_probs: torch.Tensor, targets: torch.Tensor, lam: torch.Tensor) -> tuple[float, float]:
    """Mean real-row and generated-row losses (nan when a group is empty)."""
    with torch.no_grad():
        rl = row_losses(log_probs, targets)
        gen = lam.bool()
        real = float(rl[~gen].mean()) if (~gen).any() else float("nan")
        fake = float(rl[gen].mean()) if gen.any() else float("nan")
    return real, fake
