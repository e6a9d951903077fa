"""Joint training of the denoiser and the embedding table.

One step:

1. draw per-sequence times ``t ~ U[t_min, t_max]``, ``s ~ U[t_min, t]`` and noise;
2. replace a ``drop_rate`` fraction of tokens by the mask token and noise the
   resulting embeddings to ``z_t``;
3. move ``z_t`` to ``s`` with a DDIM step towards the EMA embeddings of the
   undropped tokens and query the EMA denoiser there (the teacher);
4. score the student at ``(z_t, t)`` and a fresh low-noise draw at ``t_min``;
5. minimise ``recon + beta_dm * dm + beta_cm * cm``, then update the EMA copies.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codebook import Codebook, collapse_metrics, ema_update_array, init_gaussian
from .denoiser import DenoiserConfig, forward, init_params, predicted_embedding
from .errors import ContractError, NumericError
from .losses import (
    BETA_CM,
    BETA_DM,
    LossBreakdown,
    cm_loss,
    diffusion_loss,
    prior_kl,
    recon_loss,
    total_loss,
    vlb_diffusion_loss,
    weighted_total,
)
from .sampler import Model, ddim_step
from .schedule import Schedule

log = logging.getLogger(__name__)

TABLE = "phi/table"


@dataclass(frozen=True)
class TrainConfig:
    beta_dm: float = BETA_DM
    beta_cm: float = BETA_CM
    drop_rate: float = 0.2
    eta: float = 0.99
    lr: float = 1e-3
    batch: int = 32
    steps: int = 1000
    seed: int = 0
    cond_drop_prob: float = 0.1
    freeze_embeddings: bool = False
    log_interval: int = 100
    ckpt_interval: int = 0

    def __post_init__(self):
        for name in ("drop_rate", "eta", "cond_drop_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        if self.beta_dm < 0 or self.beta_cm < 0:
            raise ContractError("loss weights must be non-negative")
        if self.lr < 0:
            raise ContractError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch < 1 or self.steps < 0:
            raise ContractError("batch must be positive and steps non-negative")


class TrainingAborted(NumericError):
    """Raised when a step produces a non-finite loss or gradient."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(f"{message}; snapshot={snapshot}")
        self.snapshot = snapshot


# -- optimiser -----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params[name].data``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    c1 = 1.0 - state.b1**state.t
    c2 = 1.0 - state.b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.b1
        m += (1.0 - state.b1) * g
        v *= state.b2
        v += (1.0 - state.b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype)


# -- state -------------------------------------------------------------------------------------


@dataclass
class TrainState:
    model_cfg: DenoiserConfig
    schedule: Schedule
    cfg: TrainConfig
    params: dict[str, Tensor]
    ema_params: dict[str, np.ndarray]
    codebook: Codebook
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    config_text: str = ""  # echo of the run config, stored in checkpoints

    def trainable(self) -> dict[str, Tensor]:
        out = {f"theta/{k}": v for k, v in self.params.items()}
        if not self.cfg.freeze_embeddings:
            out[TABLE] = self.codebook.table
        return out

    def model(self, use_ema: bool = False) -> Model:
        if use_ema:
            params = {k: Tensor(v) for k, v in self.ema_params.items()}
            return Model(self.model_cfg, params, self.codebook.ema_table)
        return Model(self.model_cfg, self.params, self.codebook.table.data)


def init_state(model_cfg: DenoiserConfig, schedule: Schedule, cfg: TrainConfig) -> TrainState:
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    params = init_params(model_cfg, int(seeds[0].generate_state(1)[0]))
    cb = init_gaussian(model_cfg.K, model_cfg.D, int(seeds[1].generate_state(1)[0]))
    ema = {k: v.data.copy() for k, v in params.items()}
    return TrainState(
        model_cfg, schedule, cfg, params, ema, cb, AdamState(), np.random.default_rng(seeds[2])
    )


# -- one step ------------------------------------------------------------------------------------


def sample_times(rng: np.random.Generator, schedule: Schedule, size=None):
    """``t ~ U[t_min, t_max]`` and ``s ~ U[t_min, t]``, so ``s <= t`` always."""
    t = schedule.t_min + (schedule.t_max - schedule.t_min) * rng.random(size)
    s = schedule.t_min + (t - schedule.t_min) * rng.random(size)
    return t, np.minimum(s, t)


@dataclass
class StepDraws:
    t: np.ndarray  # (B,)
    s: np.ndarray  # (B,)
    eps: np.ndarray  # (B, M, D) noise for z_t
    eps0: np.ndarray  # (B, M, D) noise for the reconstruction branch
    keep: np.ndarray  # (B, M) 1 = keep token, 0 = replace with mask id
    classes: np.ndarray | None
    dropout_seed: int


def draw_step(state: TrainState, tokens: np.ndarray, classes=None) -> StepDraws:
    rng = state.rng
    B, M = tokens.shape
    D = state.model_cfg.D
    dt = state.codebook.table.dtype
    t, s = sample_times(rng, state.schedule, B)
    eps = rng.standard_normal((B, M, D)).astype(dt)
    eps0 = rng.standard_normal((B, M, D)).astype(dt)
    keep = (rng.random((B, M)) >= state.cfg.drop_rate).astype(np.int8)
    if state.model_cfg.num_classes > 0:
        classes = np.full(B, state.model_cfg.null_class) if classes is None else np.asarray(classes).copy()
        null = rng.random(B) < state.cfg.cond_drop_prob
        classes[null] = state.model_cfg.null_class
    else:
        classes = None
    return StepDraws(t, s, eps, eps0, keep, classes, int(rng.integers(2**63 - 1)))


def _coef(x, dtype) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1, 1, 1).astype(dtype)


def teacher_logits(state: TrainState, tokens: np.ndarray, z_t: np.ndarray, draws: StepDraws) -> np.ndarray:
    """EMA-model logits at the DDIM-advanced point; no gradient path."""
    with ad.no_grad():
        psi_bar = state.codebook.ema_table[tokens]
        z_s = ddim_step(z_t, psi_bar, draws.s, draws.t, state.schedule)
        ema = {k: Tensor(v) for k, v in state.ema_params.items()}
        return forward(state.model_cfg, ema, z_s, draws.s, draws.classes).data


def compute_losses(state: TrainState, tokens: np.ndarray, draws: StepDraws, frozen_teacher=None):
    """Build the loss graph for one batch.

    Returns ``(total, parts, teacher)`` where ``total`` is the differentiable
    objective, ``parts`` holds the individual terms and ``teacher`` the
    (constant) teacher logits. Pass ``frozen_teacher`` to reuse fixed teacher
    logits, e.g. when checking gradients by finite differences.
    """
    tokens = np.asarray(tokens)
    B, M = tokens.shape
    sched, mcfg, cb = state.schedule, state.model_cfg, state.codebook
    dt = cb.table.dtype
    dropped = np.where(draws.keep.astype(bool), tokens, cb.mask_id)

    # student (dropped, time t) and reconstruction (undropped, time t_min) share one pass
    ids = np.concatenate([dropped, tokens], axis=0)
    times = np.concatenate([draws.t, np.full(B, sched.t_min)])
    alpha, sigma = sched.alpha_sigma(times)
    psi_all = ad.embedding_lookup(cb.table, ids)
    noise = np.concatenate([draws.eps, draws.eps0], axis=0)
    z_all = psi_all * Tensor(_coef(alpha, dt)) + Tensor(_coef(sigma, dt) * noise)
    classes = None if draws.classes is None else np.concatenate([draws.classes, draws.classes])
    drop_rng = np.random.default_rng(draws.dropout_seed)
    logits = forward(mcfg, state.params, z_all, times, classes, train=True, rng=drop_rng)
    student, recon_logits = logits[:B], logits[B:]
    psi = psi_all[B:]

    psi_hat = predicted_embedding(ad.softmax_last(student), cb.table)
    teacher = frozen_teacher
    if teacher is None:
        teacher = teacher_logits(state, tokens, z_all.data[:B], draws)

    parts = {
        "recon": recon_loss(recon_logits, tokens),
        "dm": diffusion_loss(psi, psi_hat),
        "cm": cm_loss(teacher, student),
    }
    cfg = state.cfg
    total = weighted_total(parts["recon"], parts["dm"], parts["cm"], cfg.beta_dm, cfg.beta_cm)
    with ad.no_grad():
        parts["vlb_diffusion"] = float(vlb_diffusion_loss(psi.detach(), psi_hat.detach(), draws.t, sched).data)
        parts["prior_kl"] = prior_kl(psi.data, sched) / B
    return total, parts, teacher


def ema_step(state: TrainState) -> None:
    eta = state.cfg.eta
    for k, p in state.params.items():
        ema_update_array(state.ema_params[k], p.data, eta)
    ema_update_array(state.codebook.ema_table, state.codebook.table.data, eta)


def train_step(state: TrainState, tokens, classes=None) -> LossBreakdown:
    tokens = np.asarray(tokens)
    draws = draw_step(state, tokens, classes)
    total, parts, _ = compute_losses(state, tokens, draws)
    try:
        breakdown = total_loss(parts, state.cfg.beta_dm, state.cfg.beta_cm)
    except NumericError as exc:
        snap = {k: float(getattr(v, "data", v)) for k, v in parts.items()}
        raise TrainingAborted(f"step {state.step}: {exc}", snap) from exc

    trainable = state.trainable()
    for p in trainable.values():
        p.zero_grad()
    state.codebook.table.zero_grad()
    total.backward()
    grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
    try:
        optimizer_step(trainable, grads, state.adam, state.cfg.lr)
    except NumericError as exc:
        raise TrainingAborted(f"step {state.step}: {exc}", breakdown.as_dict()) from exc
    ema_step(state)
    state.step += 1
    return breakdown


# -- loop -------------------------------------------------------------------------------------------


def log_record(state: TrainState, breakdown: LossBreakdown) -> dict:
    rec = {"step": state.step, **breakdown.as_dict()}
    rec.update(collapse_metrics(state.codebook)._asdict())
    return rec


def fit(
    state: TrainState,
    dataset,
    callbacks: Iterable[Callable[[TrainState, LossBreakdown], None]] = (),
    steps: int | None = None,
) -> TrainState:
    """Train until ``state.step`` reaches ``steps`` (default: the configured count).

    ``dataset.batch(step)`` must return ``(tokens, classes)`` deterministically;
    callbacks run after every step.
    """
    target = state.cfg.steps if steps is None else steps
    callbacks = list(callbacks)
    while state.step < target:
        tokens, classes = dataset.batch(state.step)
        breakdown = train_step(state, tokens, classes)
        for cb in callbacks:
            cb(state, breakdown)
    return state


class LossRecorder:
    def __init__(self):
        self.totals: list[float] = []
        self.records: list[LossBreakdown] = []

    def __call__(self, state: TrainState, breakdown: LossBreakdown) -> None:
        self.totals.append(breakdown.total)
        self.records.append(breakdown)


class MetricsLogger:
    """Writes a ``key=value`` line every ``interval`` steps (and keeps them in memory)."""

    HEADER = "# vqlcmd metrics v1"

    def __init__(self, path=None, interval: int = 100):
        self.path = path
        self.interval = max(1, int(interval))
        self.records: list[dict] = []
        if path is not None:
            with open(path, "w") as fh:
                fh.write(self.HEADER + "\n")

    def __call__(self, state: TrainState, breakdown: LossBreakdown) -> None:
        if state.step % self.interval:
            return
        rec = log_record(state, breakdown)
        self.records.append(rec)
        log.info("step %d total %.4f recon %.4f cm %.4f", rec["step"], rec["total"], rec["recon"], rec["cm"])
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(format_record(rec) + "\n")


def format_record(rec: dict) -> str:
    return " ".join(f"{k}={v:.9g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())


def parse_record(line: str) -> dict:
    out = {}
    for item in line.split():
        k, v = item.split("=", 1)
        out[k] = int(v) if k == "step" else float(v)
    return out


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
