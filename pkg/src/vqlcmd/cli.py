"""Command line entry points: ``train``, ``sample``, ``eval`` and ``ablate``.

Exit codes: 0 success, 2 usage or format error, 3 numeric abort, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from . import ablation
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SyntheticDataset
from .errors import CheckpointError, ContractError, FormatError, NumericError
from .evaluate import evaluate
from .sampler import MODES, SampleConfig, sample
from .trainer import MetricsLogger, fit, init_state

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4

SAMPLES_HEADER = "# vqlcmd samples v1"

log = logging.getLogger("vqlcmd")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vqlcmd", description="Latent consistency diffusion over learned token embeddings.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="run", help="output directory for checkpoints and metrics")
    t.add_argument("--steps", type=int, help="override [train] steps")
    t.add_argument("--seed", type=int, help="override [train] seed")
    t.add_argument("--resume", help="continue from this checkpoint")

    s = sub.add_parser("sample", help="draw token sequences from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--num-samples", type=int, required=True)
    s.add_argument("--out", help="output file (default: stdout)")
    _sample_flags(s)
    s.add_argument("--class-id", type=int)
    s.add_argument("--guidance", type=float)

    e = sub.add_parser("eval", help="evaluate a checkpoint against its exact data distribution")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--num-samples", type=int, default=10000)
    e.add_argument("--out", help="output file (default: stdout)")
    _sample_flags(e)

    a = sub.add_parser("ablate", help="train and evaluate a preset grid of variants")
    a.add_argument("--config", required=True)
    a.add_argument("--preset", required=True, choices=sorted(ablation.PRESETS))
    a.add_argument("--seeds", type=int, nargs="+", default=[0])
    a.add_argument("--steps", type=int)
    a.add_argument("--num-samples", type=int, default=5000)
    a.add_argument("--out", help="output file (default: stdout)")
    return p


def _sample_flags(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--weights", choices=("ema", "live"), help="parameter set to sample with (default: ema)")


def _positive(name, value):
    if value is not None and value < 0:
        raise _UsageError(f"--{name} must be non-negative, got {value}")


def _sample_cfg(base: SampleConfig, args) -> SampleConfig:
    changes = {k: v for k, v in {
        "steps": args.steps, "mode": args.mode, "seed": args.seed,
        "use_ema": None if args.weights is None else args.weights == "ema",
        "guidance": getattr(args, "guidance", None),
    }.items() if v is not None}
    return replace(base, **changes)


def _run_config_of(state) -> RunConfig:
    return RunConfig.from_text(state.config_text) if state.config_text else RunConfig()


def _write(path, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def cmd_train(args) -> int:
    _positive("steps", args.steps)
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_section("train", seed=args.seed)
    if args.steps is not None:
        cfg = cfg.with_section("train", steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    spec = cfg.data.build()
    mcfg = cfg.denoiser_config()
    if args.resume:
        state = load_checkpoint(args.resume)
        state.cfg = cfg.train
    else:
        state = init_state(mcfg, cfg.schedule_obj(), cfg.train)
    state.config_text = cfg.to_text()
    conditional = mcfg.num_classes > 0 and spec.num_classes > 0
    dataset = SyntheticDataset(spec, cfg.train.batch, seed=cfg.train.seed, conditional=conditional)
    callbacks = [MetricsLogger(os.path.join(args.out, "metrics.log"), cfg.train.log_interval)]
    if cfg.train.ckpt_interval > 0:
        def periodic(state, _):
            if state.step % cfg.train.ckpt_interval == 0:
                save_checkpoint(state, os.path.join(args.out, f"step{state.step:08d}.ckpt"))
        callbacks.append(periodic)
    fit(state, dataset, callbacks)
    final = os.path.join(args.out, "final.ckpt")
    save_checkpoint(state, final)
    log.info("wrote %s at step %d", final, state.step)
    return EXIT_OK


def cmd_sample(args) -> int:
    _positive("num-samples", args.num_samples)
    state = load_checkpoint(args.ckpt)
    cfg = _sample_cfg(_run_config_of(state).sample, args)
    res = sample(state.model(cfg.use_ema), state.schedule, cfg, args.num_samples, class_id=args.class_id)
    lines = [SAMPLES_HEADER] + [" ".join(str(int(x)) for x in row) for row in res.tokens]
    _write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    _positive("num-samples", args.num_samples)
    state = load_checkpoint(args.ckpt)
    run_cfg = _run_config_of(state)
    cfg = _sample_cfg(run_cfg.sample, args)
    echo = {"ckpt": args.ckpt, "step": state.step, "steps": cfg.steps, "mode": cfg.mode,
            "seed": cfg.seed, "data": run_cfg.data.kind}
    report = evaluate(state.model(cfg.use_ema), state.schedule, run_cfg.data.build(), args.num_samples, cfg,
                      config=echo)
    _write(args.out, report.to_text())
    return EXIT_OK


def cmd_ablate(args) -> int:
    _positive("steps", args.steps)
    cfg = RunConfig.load(args.config)
    runs = ablation.run_preset(cfg, args.preset, args.seeds, args.num_samples, args.steps)
    _write(args.out, ablation.format_table(runs))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "ablate": cmd_ablate}


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (_UsageError, FormatError, ContractError, FileNotFoundError) as exc:
        print(f"vqlcmd {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"vqlcmd {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericError as exc:
        print(f"vqlcmd {args.command}: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run_cli())
