"""Reverse-process generation: ancestral and DDIM steps, guidance, decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .denoiser import DenoiserConfig, forward
from .errors import ContractError, DimensionError, NumericError
from .schedule import Schedule

MODES = ("ancestral", "ddim")
DECODES = ("sample", "argmax")


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 200
    mode: str = "ancestral"
    guidance: float = 0.0
    decode: str = "sample"
    seed: int = 0
    guidance_space: str = "logprob"  # or "logits"
    use_ema: bool = True  # sample with the EMA weights; False uses the live weights
    chunk: int = 4096

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"need at least one sampling step, got {self.steps}")
        if self.guidance < 0:
            raise ContractError(f"guidance scale must be >= 0, got {self.guidance}")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.decode not in DECODES:
            raise ContractError(f"decode must be one of {DECODES}, got {self.decode!r}")
        if self.guidance_space not in ("logprob", "logits"):
            raise ContractError(f"unknown guidance space {self.guidance_space!r}")


class Model(NamedTuple):
    """What sampling needs: architecture, denoiser weights, embedding table."""

    cfg: DenoiserConfig
    params: dict
    table: np.ndarray  # (K + 1, D)


@dataclass
class SampleResult:
    tokens: np.ndarray  # (n, M) ints in [0, K - 1]
    entropy_trace: list[float] = field(default_factory=list)


def _coef(x, ndim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape + (1,) * (ndim - x.ndim)) if x.ndim else x


def ddim_step(z_t, psi_ref, s, t, schedule: Schedule) -> np.ndarray:
    """Euler step of the probability-flow ODE from ``t`` down to ``s``.

    Written as ``(sigma_s / sigma_t) z_t + (alpha_s - alpha_t sigma_s / sigma_t) psi``,
    which equals ``alpha_s psi + (sigma_s / sigma_t)(z_t - alpha_t psi)`` and
    reduces to ``z_t`` bit-for-bit when ``s == t``.
    """
    schedule._check_order(s, t)
    z_t = np.asarray(z_t)
    psi_ref = np.asarray(psi_ref)
    if np.shape(z_t)[-2:] != np.shape(psi_ref)[-2:]:
        raise DimensionError(f"z_t {z_t.shape} vs psi {psi_ref.shape}")
    a_s, sig_s = schedule.alpha_sigma(s)
    a_t, sig_t = schedule.alpha_sigma(t)
    ratio = sig_s / sig_t
    c_z = _coef(ratio, z_t.ndim).astype(z_t.dtype)
    c_x = _coef(a_s - a_t * ratio, z_t.ndim).astype(z_t.dtype)
    return c_z * z_t + c_x * psi_ref


def ancestral_step(z_t, psi_hat, s, t, schedule: Schedule, rng: np.random.Generator) -> np.ndarray:
    """Draw z_s from the Gaussian posterior kernel with psi_hat standing in for the data."""
    k = schedule.posterior(s, t)
    z_t = np.asarray(z_t)
    psi_hat = np.asarray(psi_hat)
    dt = z_t.dtype
    noise = rng.standard_normal(z_t.shape).astype(dt)
    c_z = _coef(k.post_coef_z, z_t.ndim).astype(dt)
    c_x = _coef(k.post_coef_x, z_t.ndim).astype(dt)
    std = _coef(np.sqrt(k.post_var), z_t.ndim).astype(dt)
    return c_z * z_t + c_x * psi_hat + std * noise


def softmax_np(x) -> np.ndarray:
    x = np.asarray(x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(x) -> np.ndarray:
    x = np.asarray(x)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def cfg_logits(cond, uncond, omega: float, space: str = "logprob") -> np.ndarray:
    """Guided per-token log-probabilities ``(1 + w) log P(x|y) - w log P(x)``.

    With ``space="logprob"`` both inputs are normalised first; with
    ``space="logits"`` raw logits are combined. The two differ only by a
    per-token constant, so after the final normalisation they agree.
    ``omega == 0`` returns ``cond`` untouched.
    """
    cond = np.asarray(getattr(cond, "data", cond))
    uncond = np.asarray(getattr(uncond, "data", uncond))
    if cond.shape != uncond.shape:
        raise DimensionError(f"conditional {cond.shape} vs unconditional {uncond.shape}")
    if omega < 0:
        raise ContractError(f"guidance scale must be >= 0, got {omega}")
    if omega == 0:
        return cond.copy()
    if space == "logprob":
        cond, uncond = log_softmax_np(cond), log_softmax_np(uncond)
    return log_softmax_np((1.0 + omega) * cond - omega * uncond)


def decode(logits, mode: str, rng: np.random.Generator | None) -> np.ndarray:
    """Turn per-token logits over the K categories into token ids."""
    logits = np.asarray(getattr(logits, "data", logits))
    if mode == "argmax":
        return logits.argmax(axis=-1)
    if mode != "sample":
        raise ContractError(f"decode mode must be one of {DECODES}, got {mode!r}")
    cdf = np.cumsum(softmax_np(logits.astype(np.float64)), axis=-1)
    u = rng.random(logits.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((cdf < u).sum(axis=-1), logits.shape[-1] - 1)


def _guided_logits(model: Model, z, t, class_id, cfg: SampleConfig) -> np.ndarray:
    mcfg = model.cfg
    if mcfg.num_classes == 0 or class_id is None:
        return forward(mcfg, model.params, z, t).data
    cond = forward(mcfg, model.params, z, t, class_ids=class_id).data
    if cfg.guidance == 0:
        return cond
    uncond = forward(mcfg, model.params, z, t, class_ids=mcfg.null_class).data
    return cfg_logits(cond, uncond, cfg.guidance, cfg.guidance_space)


def sample(
    model: Model,
    schedule: Schedule,
    cfg: SampleConfig,
    num_samples: int = 1,
    class_id=None,
    trace: bool = False,
) -> SampleResult:
    """Run the reverse chain from z ~ N(0, I) at t_max down to t_min and decode."""
    mcfg = model.cfg
    if class_id is not None and mcfg.num_classes and not 0 <= int(class_id) <= mcfg.num_classes:
        raise ContractError(f"class id {class_id} outside [0, {mcfg.num_classes}]")
    rng = np.random.default_rng(cfg.seed)
    grid = schedule.time_grid(cfg.steps)
    table = np.asarray(model.table)
    emb = table[: mcfg.K]
    dt = np.float32
    out = []
    entropy = np.zeros(cfg.steps)
    with ad.no_grad():
        for start in range(0, num_samples, cfg.chunk):
            n = min(cfg.chunk, num_samples - start)
            z = rng.standard_normal((n, mcfg.M, mcfg.D)).astype(dt)
            for i in range(cfg.steps, 0, -1):
                t, s = grid[i], grid[i - 1]
                logits = _guided_logits(model, z, t, class_id, cfg)
                probs = softmax_np(logits)
                if trace:
                    ent = -(probs * np.log(np.maximum(probs, 1e-30))).sum(axis=-1).mean()
                    entropy[cfg.steps - i] += ent * n
                psi_hat = (probs @ emb).astype(dt)
                if cfg.mode == "ddim":
                    z = ddim_step(z, psi_hat, s, t, schedule)
                else:
                    z = ancestral_step(z, psi_hat, s, t, schedule, rng)
                if not np.isfinite(z).all():
                    raise NumericError(f"non-finite sampler state at step {i}")
            final = _guided_logits(model, z, grid[0], class_id, cfg)
            out.append(decode(final, cfg.decode, rng))
    tokens = np.concatenate(out, axis=0) if out else np.zeros((0, mcfg.M), dtype=np.int64)
    return SampleResult(tokens.astype(np.int64), list(entropy / max(num_samples, 1)) if trace else [])
