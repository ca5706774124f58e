"""Masked reconstruction and Wasserstein adversarial objectives.

Functions accept torch tensors (autograd flows through) or numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass


def _numel(x) -> int:
    return int(x.numel()) if hasattr(x, "numel") and callable(x.numel) else int(x.size)


def recon_loss(target, pred):
    """Element-mean squared error between masked tokens and their reconstructions.

    For batched ``(N, n, e)`` inputs this is the mean over clips of the per-clip
    mean, which equals the flat mean since every clip masks ``n`` tokens.
    """
    if tuple(target.shape) != tuple(pred.shape):
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(pred.shape)}")
    if _numel(target) == 0:
        raise ValueError("recon_loss needs at least one masked token (n = 0)")
    return ((target - pred) ** 2).mean()


def disc_loss(real_scores, fake_scores, N: int | None = None, n: int | None = None):
    """Critic loss ``(sum(fake) - sum(real)) / (N * n)``."""
    if tuple(real_scores.shape) != tuple(fake_scores.shape):
        raise ValueError(f"length mismatch: {tuple(real_scores.shape)} vs {tuple(fake_scores.shape)}")
    count = _check_count(fake_scores, N, n)
    return (fake_scores.sum() - real_scores.sum()) / count


def gen_adv_loss(fake_scores, N: int | None = None, n: int | None = None):
    """Generator adversarial term ``-sum(fake) / (N * n)``."""
    count = _check_count(fake_scores, N, n)
    return -fake_scores.sum() / count


def _check_count(scores, N, n) -> int:
    size = _numel(scores)
    if size == 0:
        raise ValueError("adversarial loss needs at least one score")
    if N is None and n is None:
        return size
    if N is None or n is None or N * n != size:
        raise ValueError(f"length mismatch: {size} scores, expected N*n = {N}*{n}")
    return size


@dataclass(frozen=True)
class LossReport:
    recon: float
    adv_g: float
    adv_d: float
    total_g: float
    total_d: float
    lambda_w: float

    def as_dict(self) -> dict:
        return asdict(self)


def combine(recon: float, adv_g: float, adv_d: float, lambda_w: float) -> LossReport:
    values = [float(recon), float(adv_g), float(adv_d), float(lambda_w)]
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"non-finite loss component in {values}")
    recon, adv_g, adv_d, lambda_w = values
    return LossReport(recon, adv_g, adv_d, recon + lambda_w * adv_g, adv_d, lambda_w)
