"""Task and domain losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SMOOTHING_MODES = ("none", "task", "adv", "all")


@dataclass(frozen=True)
class SmoothingMode:
    """Which losses get a SAM wrapper.

    none: plain DAT. task: SDAT (task loss only). adv: discriminator loss only.
    all: both. A radius is ignored when its wrapper is inactive.
    """

    mode: str = "none"
    rho_task: float = 0.0
    rho_adv: float = 0.0

    def __post_init__(self):
        if self.mode not in SMOOTHING_MODES:
            raise ValueError(f"unknown smoothing mode {self.mode!r}")
        if self.rho_task < 0 or self.rho_adv < 0:
            raise ValueError("rho must be non-negative")

    @property
    def smooth_task(self) -> bool:
        return self.mode in ("task", "all")

    @property
    def smooth_adv(self) -> bool:
        return self.mode in ("adv", "all")


def smoothed_targets(labels, k: int, alpha: float) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    q = np.full((labels.size, k), alpha / (k - 1))
    q[np.arange(labels.size), labels] = 1.0 - alpha
    return q


def cross_entropy(logits, labels, alpha: float = 0.0) -> Tensor:
    """Mean cross-entropy against (1 - alpha) on the true class, alpha/(k-1) elsewhere."""
    logits = ad.constant(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be {n} integers in [0, {k})")
    q = Tensor(smoothed_targets(labels, k, alpha))
    return ad.mean(ad.sum(q * ad.log_softmax(logits, axis=1), axis=1)) * -1.0


def _check_probs(*ps: Tensor):
    for p in ps:
        if p.data.size == 0:
            raise ValueError("empty batch")
        if np.any(p.data <= 0.0) or np.any(p.data >= 1.0):
            raise ValueError("discriminator outputs must lie strictly inside (0, 1)")


def domain_discrepancy(d_src, d_tgt) -> Tensor:
    """mean log D(source) + mean log(1 - D(target)). Always <= 0."""
    d_src, d_tgt = ad.constant(d_src), ad.constant(d_tgt)
    _check_probs(d_src, d_tgt)
    return ad.mean(ad.log(d_src)) + ad.mean(ad.log(1.0 - d_tgt))


def domain_loss(d_src, d_tgt) -> Tensor:
    """Binary cross-entropy with source=1, target=0, summed per domain.

    Equals ``-domain_discrepancy``; this is what the discriminator minimizes.
    """
    d_src, d_tgt = ad.constant(d_src), ad.constant(d_tgt)
    _check_probs(d_src, d_tgt)
    return (ad.mean(ad.log(d_src)) + ad.mean(ad.log(1.0 - d_tgt))) * -1.0


def domain_accuracy(d_src, d_tgt) -> float:
    """Fraction classified correctly at 0.5; exactly 0.5 counts as a target prediction."""
    s = np.asarray(ad.constant(d_src).data)
    t = np.asarray(ad.constant(d_tgt).data)
    if s.size == 0 or t.size == 0:
        raise ValueError("empty batch")
    correct = np.count_nonzero(s > 0.5) + np.count_nonzero(t <= 0.5)
    return correct / (s.size + t.size)
