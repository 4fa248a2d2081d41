"""Command-line entry point.

Subcommands: generate | train | attack | evaluate | sweep | report. Every run
is driven by a JSON experiment config (see config.py); a handful of flags
override config values. All randomness derives from the seed, so repeating a
command with the same config and seed reproduces its outputs byte for byte.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, run_attack
from .config import ConfigError, load_config
from .data import (
    denormalize_image,
    generate_synthetic_cohort,
    load_manifest,
    orient_flip,
    save_cohort,
    write_pgm,
)
from .evaluate import derive_seed, run_sweep, run_transfer_experiment, train_model
from .models import load_model, save_model
from .report import (
    emit_plot,
    emit_report,
    load_report,
    load_sweep_rows,
    report_json,
    sweep_csv,
)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the CLI contract reserves 2 for
    # runtime failures, so remap to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="longattack",
                     description="Adversarial attacks on longitudinal two-exam classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, required=False,
                       help="output directory (overrides config)")
        return p

    common(sub.add_parser("generate", help="write a synthetic cohort as PGM + manifest"))
    common(sub.add_parser("train", help="train Source and Target models, save checkpoints")) \
        .add_argument("--model", choices=["source", "target", "both"], default="both")
    p_attack = common(sub.add_parser("attack", help="craft adversarial Currents"))
    p_attack.add_argument("--attack", required=True, help="attack registry name")
    p_attack.add_argument("--checkpoint", required=True, help="source model checkpoint")
    p_attack.add_argument("--epsilon", type=float, default=None)
    p_attack.add_argument("--iterations", type=int, default=None)
    common(sub.add_parser("evaluate", help="run the k-fold transfer experiment"))
    common(sub.add_parser("sweep", help="run the parameter sweep grid"))
    p_report = sub.add_parser("report", help="re-emit reports/plots from stored results")
    p_report.add_argument("--input", required=True, help="report JSON or sweep CSV")
    p_report.add_argument("--out", required=True)
    p_report.add_argument("--formats", default="json,csv,markdown",
                          help="comma-separated subset of json,csv,markdown")
    p_report.add_argument("--plot", choices=["epsilon", "iterations"], default=None,
                          help="emit an SVG over this sweep axis")
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = args.out or cfg.out
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    return cfg, Path(out)


def _cohort(cfg):
    if cfg.manifest is not None:
        return load_manifest(cfg.manifest)
    synth = replace(cfg.synthetic, seed=derive_seed(cfg.seed, 5))
    return generate_synthetic_cohort(synth)


def _cmd_generate(args) -> int:
    cfg, out = _load(args)
    pairs = _cohort(cfg)
    manifest = save_cohort(pairs, out)
    print(f"wrote {len(pairs)} exam pairs under {out} (manifest: {manifest})")
    return 0


def _cmd_train(args) -> int:
    cfg, out = _load(args)
    pairs = _cohort(cfg)
    out.mkdir(parents=True, exist_ok=True)
    kinds = ["source", "target"] if args.model == "both" else [args.model]
    for i, kind in enumerate(kinds):
        tc = replace(cfg.train, seed=derive_seed(cfg.seed, 6, i))
        model, losses = train_model(kind, pairs, tc, cfg.model)
        path = out / f"{kind}.ckpt"
        save_model(model, path)
        print(f"{kind}: final loss {losses[-1]:.4f} -> {path}")
    return 0


def _cmd_attack(args) -> int:
    cfg, out = _load(args)
    overrides = {}
    if args.epsilon is not None:
        overrides["epsilon"] = args.epsilon
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    acfg = dict(cfg.attacks).get(args.attack)
    if acfg is None:
        acfg = AttackConfig()
    if overrides:
        acfg = replace(acfg, **overrides)
    model = load_model(args.checkpoint)
    if model.kind != "source":
        raise ConfigError(f"{args.checkpoint}: attacks are crafted on a source checkpoint")
    pairs = _cohort(cfg)
    img_dir = out / "adversarial"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for si, pair in enumerate(pairs):
        ex = run_attack(args.attack, model, pair.current, pair.label, acfg,
                        prior=pair.prior, rng_seed=derive_seed(cfg.seed, 7, si))
        fname = f"{pair.patient_id}_adv.pgm"
        stored = orient_flip(ex.image, pair.side)
        write_pgm(img_dir / fname, denormalize_image(stored[0]))
        rows.append({
            "patient_id": pair.patient_id,
            "path": f"adversarial/{fname}",
            "label": pair.label,
            "success": bool(ex.success),
            "selected_iterate": ex.selected_iterate_index,
            "source_p1": float(ex.source_prediction[1]),
            "feature_distance_to_prior": ex.feature_distance_to_prior,
        })
    summary = {
        "attack": args.attack,
        "config": acfg.to_json(),
        "samples": len(rows),
        "success_rate": float(np.mean([r["success"] for r in rows])),
        "rows": rows,
    }
    (out / "attack_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"attacked {len(rows)} currents, success rate "
          f"{summary['success_rate']:.3f} -> {out / 'attack_summary.json'}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg, out = _load(args)
    if not cfg.attacks:
        raise ConfigError("evaluate: config lists no attacks")
    pairs = _cohort(cfg)
    report = run_transfer_experiment(pairs, cfg.attacks, cfg.train, cfg.model,
                                     k=cfg.folds, seed=cfg.seed)
    paths = emit_report(report, out, formats=("json", "csv", "markdown"))
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_sweep(args) -> int:
    cfg, out = _load(args)
    if cfg.sweep is None:
        raise ConfigError("sweep: config has no 'sweep' section")
    if not cfg.attacks:
        raise ConfigError("sweep: config lists no attacks")
    pairs = _cohort(cfg)
    sweep = run_sweep(pairs, cfg.sweep_attacks(), cfg.sweep.grid(), cfg.train,
                      cfg.model, k=cfg.folds, seed=cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    csv_path.write_text(sweep_csv(sweep), encoding="utf-8")
    print(f"wrote {csv_path}")
    summary_path = out / "sweep_summary.json"
    summary_path.write_text(
        json.dumps(sweep.summary_rows(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    print(f"wrote {summary_path}")
    rows = sweep.long_rows()
    for axis, values in (("epsilon", sweep.epsilons), ("iterations", sweep.iterations)):
        if len(values) >= 2:
            svg = emit_plot(rows, axis, out / f"sweep_{axis}.svg")
            print(f"wrote {svg}")
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out)
    path = Path(args.input)
    if path.suffix == ".json":
        report = load_report(path)
        formats = [f.strip() for f in args.formats.split(",") if f.strip()]
        for p in emit_report(report, out, formats=formats):
            print(f"wrote {p}")
        return 0
    rows = load_sweep_rows(path)
    axis = args.plot
    if axis is None:
        raise ConfigError("report: --plot is required for sweep CSV input")
    svg = emit_plot(rows, axis, out / f"sweep_{axis}.svg")
    print(f"wrote {svg}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "attack": _cmd_attack,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def dispatch(argv=None) -> int:
    """Parse arguments and run one subcommand; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
