"""Command-line interface.

Exit codes: 0 on success, 1 on usage/configuration errors, 2 when a training
run diverges.
"""

from __future__ import annotations

import argparse
import glob
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, load_config_file, replace
from .env import EnvConfig, EnvError
from .metrics import MetricsError, diagnose, load_metrics
from .replay import ReplayError
from .trainer import DivergenceError, TrainerError, evaluate, train

USAGE_ERROR = 1
DIVERGED = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; remap to 1 so exit code 2
    stays reserved for divergence."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tia", description="Train and inspect task-informed world models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training job")
    p_train.add_argument("--config", required=True, help="flat key-value config file")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--variant", choices=("tia", "dreamer", "dreamer_inverse"), default=None)
    p_train.add_argument("--out", default=None, help="output directory (default runs/<variant>-seed<seed>)")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--episodes", type=int, default=10)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--background", default=None,
                        choices=("plain", "white_noise", "texture_playlist", "frame_directory"),
                        help="override the background for transfer evaluation")
    p_eval.add_argument("--texture-seed", type=int, default=None)

    p_render = sub.add_parser("render", help="write reconstruction strips")
    p_render.add_argument("--ckpt", required=True)
    p_render.add_argument("--frames", type=int, default=8)
    p_render.add_argument("--out", default="render")
    p_render.add_argument("--seed", type=int, default=0)

    p_plot = sub.add_parser("plot", help="plot learning and dissociation curves")
    p_plot.add_argument("--logs", nargs="+", required=True, help="metrics files or glob patterns")
    p_plot.add_argument("--out", default="plots")

    p_diag = sub.add_parser("diagnose", help="check a log for failure modes")
    p_diag.add_argument("--log", required=True)
    p_diag.add_argument("--window", type=int, default=10)

    p_serve = sub.add_parser("serve", help="start the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8321)
    return parser


def _cmd_train(args) -> int:
    config = load_config_file(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.variant is not None:
        overrides["agent_variant"] = args.variant
    if overrides:
        config = replace(config, **overrides)
    out_dir = Path(args.out) if args.out else Path("runs") / f"{config.agent_variant}-seed{config.seed}"
    if args.resume is None and (out_dir / "metrics.jsonl").exists():
        print(f"error: {out_dir / 'metrics.jsonl'} already exists; pick a fresh --out or pass --resume",
              file=sys.stderr)
        return USAGE_ERROR
    result = train(config, out_dir=out_dir, resume_from=args.resume)
    print(json.dumps({
        "env_step": result.env_step,
        "episodes": len(result.records),
        "final_return": result.records[-1].episodic_return if result.records else None,
        "checkpoint": str(result.checkpoint_path),
        "metrics": str(result.metrics_path),
        "parameter_counts": result.parameter_counts,
    }, indent=2))
    return 0


def _cmd_eval(args) -> int:
    env_config = None
    if args.background is not None or args.texture_seed is not None:
        from dataclasses import asdict

        from .trainer import _as_checkpoint

        base = asdict(_as_checkpoint(args.ckpt).config.env)
        if args.background is not None:
            base["background_mode"] = args.background
        if args.texture_seed is not None:
            base["texture_seed"] = args.texture_seed
        env_config = EnvConfig(**base)
    result = evaluate(args.ckpt, env_config=env_config, episodes=args.episodes, seed=args.seed)
    print(json.dumps(result, indent=2))
    return 0


def _cmd_render(args) -> int:
    from .report import render_report

    paths = render_report(args.ckpt, args.out, n_frames=args.frames, seed=args.seed)
    print(json.dumps({"files": [str(p) for p in paths]}, indent=2))
    return 0


def _cmd_plot(args) -> int:
    from .report import plot

    paths: list[str] = []
    for pattern in args.logs:
        matches = sorted(glob.glob(pattern))
        paths.extend(matches if matches else [pattern])
    summary = plot(paths, args.out)
    files = {"returns": str(summary["returns_plot"])}
    if summary.get("dissociation_plot"):
        files["dissociation"] = str(summary["dissociation_plot"])
    print(json.dumps({"files": files}, indent=2))
    return 0


def _cmd_diagnose(args) -> int:
    records = load_metrics(args.log)
    report = diagnose(records, args.window)
    print(json.dumps({
        "failure_flag": report.failure_flag,
        "evidence": report.evidence,
        "remediation": report.remediation,
    }, indent=2))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "render": _cmd_render,
    "plot": _cmd_plot,
    "diagnose": _cmd_diagnose,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DIVERGED
    except (ConfigError, EnvError, MetricsError, CheckpointError, ReplayError,
            TrainerError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
