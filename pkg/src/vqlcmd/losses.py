"""Training and diagnostic objectives.

Every trainable loss is mean-reduced over tokens (and batch), so the default
weights behave the same for any sequence length.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, NumericError, TokenIndexError
from .schedule import Schedule

BETA_DM = 0.005
BETA_CM = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    dm: float
    cm: float
    total: float
    vlb_diffusion: float = 0.0
    prior_kl: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _one_hot(tokens: np.ndarray, K: int, dtype) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= K):
        bad = tokens[(tokens < 0) | (tokens >= K)][0]
        raise TokenIndexError(f"target token {int(bad)} outside [0, {K - 1}]")
    return (tokens[..., None] == np.arange(K)).astype(dtype)


def recon_loss(logits: Tensor, tokens) -> Tensor:
    """Mean negative log-probability of the true tokens."""
    tokens = np.asarray(tokens)
    if logits.shape[:-1] != tokens.shape:
        raise DimensionError(f"logits {logits.shape} do not match tokens {tokens.shape}")
    target = _one_hot(tokens, logits.shape[-1], logits.dtype)
    logp = ad.log_softmax_last(logits)
    return -(logp * target).sum() * (1.0 / tokens.size)


def diffusion_loss(psi: Tensor, psi_hat: Tensor) -> Tensor:
    """Mean squared error over every embedding coordinate."""
    if psi.shape != psi_hat.shape:
        raise DimensionError(f"psi {psi.shape} vs psi_hat {psi_hat.shape}")
    diff = psi - psi_hat
    return (diff * diff).mean()


def vlb_diffusion_loss(psi: Tensor, psi_hat: Tensor, t, schedule: Schedule) -> Tensor:
    """Single-sample estimate of -0.5 * SNR'(t) * ||psi - psi_hat||^2.

    For batched input (leading batch axis, one ``t`` per element) the
    per-sequence values are averaged.
    """
    if psi.shape != psi_hat.shape:
        raise DimensionError(f"psi {psi.shape} vs psi_hat {psi_hat.shape}")
    diff = psi - psi_hat
    sq = diff * diff
    if psi.ndim == 2:
        return sq.sum() * float(-0.5 * schedule.snr_prime(t))
    weight = (-0.5 * np.asarray(schedule.snr_prime(np.broadcast_to(t, (psi.shape[0],))))).reshape(-1, 1, 1)
    return (sq * Tensor(weight)).sum() * (1.0 / psi.shape[0])


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def cm_loss(teacher_logits, student_logits: Tensor) -> Tensor:
    """Mean over tokens of KL(softmax(teacher) || softmax(student)).

    The teacher side is treated as a constant; pass a Tensor or an array.
    """
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_data.shape != student_logits.shape:
        raise DimensionError(f"teacher {t_data.shape} vs student {student_logits.shape}")
    if not np.isfinite(t_data).all():
        raise NumericError("teacher logits are not finite")
    logp_t = _log_softmax_np(t_data)
    p_t = np.exp(logp_t)
    n_tokens = int(np.prod(t_data.shape[:-1]))
    neg_entropy = float((p_t * logp_t).sum()) / n_tokens
    dt = student_logits.dtype
    cross = (ad.log_softmax_last(student_logits) * Tensor(p_t.astype(dt))).sum() * (1.0 / n_tokens)
    return -cross + neg_entropy


def prior_kl(psi, schedule: Schedule) -> float:
    """KL(N(alpha_1 psi, sigma_1^2 I) || N(0, I)) summed over coordinates (float64)."""
    psi = np.asarray(psi.data if isinstance(psi, Tensor) else psi, dtype=np.float64)
    lam = schedule.log_snr(schedule.t_max)
    alpha2 = 1.0 / (1.0 + math.exp(-lam))
    # sigma^2 - 1 - log sigma^2 == log1p(e^lam) - alpha^2 under variance preservation
    per_coord_const = math.log1p(math.exp(lam)) - alpha2
    return float(0.5 * (alpha2 * (psi * psi).sum() + psi.size * per_coord_const))


def total_loss(parts: dict, beta_dm: float = BETA_DM, beta_cm: float = BETA_CM) -> LossBreakdown:
    """Weighted sum recon + beta_dm * dm + beta_cm * cm, with diagnostics carried along."""
    vals = {}
    for name in ("recon", "dm", "cm", "vlb_diffusion", "prior_kl"):
        v = parts.get(name, 0.0)
        v = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise NumericError(f"loss part {name!r} is not finite ({v})")
        vals[name] = v
    total = vals["recon"] + beta_dm * vals["dm"] + beta_cm * vals["cm"]
    return LossBreakdown(total=total, **vals)


def weighted_total(recon: Tensor, dm: Tensor, cm: Tensor, beta_dm: float, beta_cm: float) -> Tensor:
    return recon + dm * beta_dm + cm * beta_cm
