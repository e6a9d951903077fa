"""Evaluation against the exact synthetic distributions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .codebook import table_collapse_metrics
from .data import SyntheticSpec, encode, enumerable, gen_batch, joint_probs, marginals, tv_distance
from .denoiser import forward
from .errors import FormatError
from .losses import prior_kl
from .sampler import Model, SampleConfig, log_softmax_np, sample, softmax_np
from .schedule import Schedule

HEADER = "# vqlcmd eval v1"


@dataclass
class EvalReport:
    tv_marginal: np.ndarray  # per-position TV, shape (M,)
    tv_joint: float | None
    nll_bound: float  # nats per sequence
    mean_norm: float
    mean_pairwise_distance: float
    collapse_ratio: float
    num_samples: int
    config: dict[str, str] = field(default_factory=dict)

    @property
    def tv_marginal_mean(self) -> float:
        return float(np.mean(self.tv_marginal))

    def to_text(self) -> str:
        lines = [
            HEADER,
            "tv_marginal = " + " ".join(repr(float(v)) for v in self.tv_marginal),
            f"tv_marginal_mean = {self.tv_marginal_mean!r}",
            f"tv_joint = {'none' if self.tv_joint is None else repr(float(self.tv_joint))}",
            f"nll_bound = {self.nll_bound!r}",
            f"mean_norm = {self.mean_norm!r}",
            f"mean_pairwise_distance = {self.mean_pairwise_distance!r}",
            f"collapse_ratio = {self.collapse_ratio!r}",
            f"num_samples = {self.num_samples}",
        ]
        lines += [f"config.{k} = {v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        rows = text.strip().splitlines()
        if not rows or rows[0].strip() != HEADER:
            raise FormatError(f"eval report must start with {HEADER!r}")
        kv = {}
        for line in rows[1:]:
            if not line.strip():
                continue
            if " = " not in line:
                raise FormatError(f"malformed report line {line!r}")
            k, v = line.split(" = ", 1)
            kv[k.strip()] = v.strip()
        try:
            return cls(
                tv_marginal=np.array([float(x) for x in kv["tv_marginal"].split()]),
                tv_joint=None if kv["tv_joint"] == "none" else float(kv["tv_joint"]),
                nll_bound=float(kv["nll_bound"]),
                mean_norm=float(kv["mean_norm"]),
                mean_pairwise_distance=float(kv["mean_pairwise_distance"]),
                collapse_ratio=float(kv["collapse_ratio"]),
                num_samples=int(kv["num_samples"]),
                config={k[len("config."):]: v for k, v in kv.items() if k.startswith("config.")},
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"incomplete eval report: {exc}") from exc


def empirical_marginals(tokens: np.ndarray, K: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    M = tokens.shape[1]
    counts = np.zeros((M, K))
    np.add.at(counts, (np.broadcast_to(np.arange(M), tokens.shape), tokens), 1.0)
    return counts / len(tokens)


def marginal_tv(spec: SyntheticSpec, tokens: np.ndarray) -> np.ndarray:
    emp = empirical_marginals(tokens, spec.K)
    truth = marginals(spec)
    return np.array([tv_distance(truth[i], emp[i]) for i in range(spec.M)])


def joint_tv(spec: SyntheticSpec, tokens: np.ndarray) -> float:
    truth = joint_probs(spec)
    emp = np.bincount(encode(tokens, spec.K), minlength=truth.size) / len(tokens)
    return tv_distance(truth / truth.sum(), emp)


def nll_bound(model: Model, schedule: Schedule, tokens: np.ndarray, rng: np.random.Generator) -> float:
    """Single-sample variational bound in nats per sequence, averaged over ``tokens``.

    Sum of the reconstruction NLL at ``t_min``, the continuous-time diffusion
    term at one uniformly drawn ``t`` per sequence and the prior KL.
    """
    tokens = np.asarray(tokens)
    B, M = tokens.shape
    cfg, table = model.cfg, np.asarray(model.table)
    psi = table[tokens].astype(np.float64)
    D = psi.shape[-1]
    t = schedule.t_min + (schedule.t_max - schedule.t_min) * rng.random(B)
    times = np.concatenate([np.full(B, schedule.t_min), t])
    alpha, sigma = schedule.alpha_sigma(times)
    eps = rng.standard_normal((2 * B, M, D))
    z = alpha[:, None, None] * np.concatenate([psi, psi]) + sigma[:, None, None] * eps
    classes = None if cfg.num_classes == 0 else np.full(2 * B, cfg.null_class)
    with ad.no_grad():
        logits = forward(cfg, model.params, z.astype(table.dtype), times, classes).data.astype(np.float64)
    logp0 = log_softmax_np(logits[:B])
    recon = -np.take_along_axis(logp0, tokens[..., None], axis=-1).sum(axis=(1, 2))
    psi_hat = softmax_np(logits[B:]) @ table[: cfg.K].astype(np.float64)
    sq = ((psi - psi_hat) ** 2).sum(axis=(1, 2))
    diffusion = -0.5 * schedule.snr_prime(t) * sq
    prior = np.array([prior_kl(p, schedule) for p in psi])
    return float(np.mean(recon + diffusion + prior))


def evaluate(
    model: Model,
    schedule: Schedule,
    spec: SyntheticSpec,
    num_samples: int,
    sample_cfg: SampleConfig | None = None,
    nll_batch: int = 256,
    config: dict | None = None,
) -> EvalReport:
    sample_cfg = sample_cfg or SampleConfig()
    tokens = sample(model, schedule, sample_cfg, num_samples).tokens
    rng = np.random.default_rng([sample_cfg.seed, 1])
    data = gen_batch(spec, nll_batch, rng)
    metrics = table_collapse_metrics(np.asarray(model.table)[: model.cfg.K])
    return EvalReport(
        tv_marginal=marginal_tv(spec, tokens),
        tv_joint=joint_tv(spec, tokens) if enumerable(spec) else None,
        nll_bound=nll_bound(model, schedule, data, rng),
        mean_norm=metrics.mean_norm,
        mean_pairwise_distance=metrics.mean_pairwise_distance,
        collapse_ratio=metrics.collapse_ratio,
        num_samples=num_samples,
        config={k: str(v) for k, v in (config or {}).items()},
    )
