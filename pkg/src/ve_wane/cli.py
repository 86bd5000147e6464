"""Command-line driver: simulate datasets, estimate on one dataset, or run
Monte Carlo studies. Progress goes to stderr; results go to files."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import RunConfig, load_config
from .data import write_csv
from .simulate import PRESETS, generate_dataset


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="scenario preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=None, help="output directory (default .)")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ve-wane",
        description="Vaccine-efficacy waning estimation under staggered "
                    "unblinding and placebo crossover",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic trial CSV")
    _add_common(p_sim)
    p_sim.add_argument("--n", type=int, default=None, help="participants")

    p_est = sub.add_parser("estimate", help="estimate efficacy from a dataset CSV")
    _add_common(p_est)
    p_est.add_argument("--data", help="input dataset CSV")
    p_est.add_argument("--weights", choices=["unit", "estimated"], default=None)
    p_est.add_argument("--bootstrap", type=int, default=None,
                       help="nonparametric bootstrap draws for an alternative covariance")

    p_mc = sub.add_parser("mc-study", help="run a Monte Carlo study")
    _add_common(p_mc)
    p_mc.add_argument("--reps", type=int, default=None)
    p_mc.add_argument("--n", type=int, default=None)
    p_mc.add_argument("--weights", choices=["unit", "estimated", "both"], default=None)

    return parser


def _config_from_args(args, mode: str) -> RunConfig:
    overrides = dict(
        preset=args.preset,
        seed=args.seed,
        out_dir=args.out,
        threads=args.threads,
        n=getattr(args, "n", None),
        weights=getattr(args, "weights", None),
        replications=getattr(args, "reps", None),
        data_path=getattr(args, "data", None),
        bootstrap=getattr(args, "bootstrap", None),
        make_figures=(False if args.no_figures else None),
    )
    if args.config:
        return load_config(args.config, mode, **overrides)
    kw = {k: v for k, v in overrides.items() if v is not None}
    return RunConfig(mode=mode, **kw)


def _ensure_out(cfg: RunConfig) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def cmd_simulate(cfg: RunConfig) -> int:
    out = _ensure_out(cfg)
    scenario = cfg.resolve_scenario()
    sim = generate_dataset(scenario, seed=cfg.seed)
    path = os.path.join(out, "data.csv")
    write_csv(sim.data, path)
    logging.getLogger("ve_wane").info("wrote %d participants to %s", sim.data.n, path)
    print(path)
    return 0


def cmd_estimate(cfg: RunConfig) -> int:
    from .mc import run_estimate
    from .report import ve_curve_figure, ve_table_text, weights_figure, write_ve_csv, write_weights_csv

    out = _ensure_out(cfg)
    result, payload, proc = run_estimate(cfg)
    with open(os.path.join(out, "result.json"), "w") as fh:
        json.dump(payload, fh, indent=1)
    write_ve_csv(result, os.path.join(out, "ve_table.csv"))
    with open(os.path.join(out, "ve_table.txt"), "w") as fh:
        fh.write(ve_table_text(result))
    write_weights_csv(payload["diagnostics"], os.path.join(out, "weights_diag.csv"))
    if cfg.make_figures:
        ve_curve_figure(result, os.path.join(out, "ve_curve.png"))
        if result.weight_mode == "estimated":
            weights_figure(payload["diagnostics"], proc, os.path.join(out, "weights_hist.png"))
    sys.stdout.write(ve_table_text(result))
    return 0


def cmd_mc_study(cfg: RunConfig) -> int:
    from .mc import run_mc_study
    from .report import emit_table, mc_summary_figure, summary_text

    out = _ensure_out(cfg)
    summary = run_mc_study(cfg)
    emit_table(summary, "csv", os.path.join(out, "summary.csv"))
    emit_table(summary, "json", os.path.join(out, "summary.json"))
    emit_table(summary, "text", os.path.join(out, "summary.txt"))
    if cfg.make_figures:
        mc_summary_figure(summary, os.path.join(out, "mc_summary.png"))
    sys.stdout.write(summary_text(summary))
    return 0


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s", datefmt="%H:%M:%S",
    )
    args = build_parser().parse_args(argv)
    mode = {"simulate": "simulate", "estimate": "estimate", "mc-study": "mc-study"}[args.command]
    try:
        cfg = _config_from_args(args, mode)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "estimate":
            return cmd_estimate(cfg)
        return cmd_mc_study(cfg)
    except Exception as exc:  # surface clean errors, not tracebacks, to users
        if os.environ.get("VE_WANE_DEBUG"):
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
