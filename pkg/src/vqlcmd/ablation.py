"""Ablation presets: named config edits, each trained and evaluated the same way."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

from .config import RunConfig
from .data import SyntheticDataset
from .evaluate import EvalReport, evaluate
from .trainer import TrainState, fit, init_state

VARIANTS: dict[str, Callable[[RunConfig], RunConfig]] = {
    "full": lambda c: c,
    "no-CM": lambda c: c.with_section("train", beta_cm=0.0),
    "no-NS": lambda c: c.with_section("schedule", shift=0.0),
    "no-RD": lambda c: c.with_section("train", drop_rate=0.0),
    "fixed-embeddings": lambda c: c.with_section("train", freeze_embeddings=True),
    "drop-0.2": lambda c: c.with_section("train", drop_rate=0.2),
    "drop-0": lambda c: c.with_section("train", drop_rate=0.0),
}

PRESETS: dict[str, tuple[str, ...]] = {
    "collapse": ("full", "no-CM"),
    "table3": ("full", "no-CM", "no-NS", "no-RD", "fixed-embeddings"),
    "dropping": ("drop-0.2", "drop-0"),
}


@dataclass
class AblationRun:
    variant: str
    seed: int
    report: EvalReport
    final_loss: float


def train_run(run_cfg: RunConfig, steps: int | None = None, callbacks=()) -> TrainState:
    """Initialise and train a model exactly as ``vqlcmd train`` would."""
    spec = run_cfg.data.build()
    mcfg = run_cfg.denoiser_config()
    state = init_state(mcfg, run_cfg.schedule_obj(), run_cfg.train)
    state.config_text = run_cfg.to_text()
    conditional = mcfg.num_classes > 0 and spec.num_classes > 0
    dataset = SyntheticDataset(spec, run_cfg.train.batch, seed=run_cfg.train.seed, conditional=conditional)
    return fit(state, dataset, callbacks, steps)


def run_variant(run_cfg: RunConfig, variant: str, seed: int, num_samples: int, steps: int | None = None) -> AblationRun:
    if variant not in VARIANTS:
        raise KeyError(f"unknown ablation variant {variant!r}; choose from {sorted(VARIANTS)}")
    cfg = VARIANTS[variant](run_cfg).with_section("train", seed=seed)
    cfg = replace(cfg, sample=replace(cfg.sample, seed=seed))
    losses: list[float] = []
    state = train_run(cfg, steps, [lambda s, b: losses.append(b.total)])
    report = evaluate(
        state.model(cfg.sample.use_ema), state.schedule, cfg.data.build(), num_samples, cfg.sample,
        config={"variant": variant, "seed": seed, "steps": state.step},
    )
    return AblationRun(variant, seed, report, losses[-1] if losses else float("nan"))


def run_preset(run_cfg: RunConfig, preset: str, seeds, num_samples: int, steps: int | None = None) -> list[AblationRun]:
    if preset not in PRESETS:
        raise KeyError(f"unknown ablation preset {preset!r}; choose from {sorted(PRESETS)}")
    return [run_variant(run_cfg, v, s, num_samples, steps) for v in PRESETS[preset] for s in seeds]


def format_table(runs: list[AblationRun]) -> str:
    lines = ["# vqlcmd ablation v1", "variant seed collapse_ratio tv_marginal_mean tv_joint final_loss"]
    for r in runs:
        joint = "none" if r.report.tv_joint is None else f"{r.report.tv_joint:.6f}"
        lines.append(
            f"{r.variant} {r.seed} {r.report.collapse_ratio:.6f} {r.report.tv_marginal_mean:.6f} {joint} {r.final_loss:.6f}"
        )
    return "\n".join(lines) + "\n"
