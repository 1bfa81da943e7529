"""Experiment runner: `congrad run|sweep|report`.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Every flag
has a config-file equivalent; `-o key=value` overrides file values. Output
root resolves from `output_root`, then $CONGRAD_RUNS, then ./runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (RunConfig, build_buffers, build_learner, build_model,
                     build_optim, build_stream_and_tests, load_config,
                     output_root, validate_inputs)
from .errors import ConfigError
from .protocol import Game, benchmark_test_eval, retention_curve, test_eval
from .config import stream_config

SWEEP_AXES = {
    "k": ("optim.k", int),
    "vbuf-size": ("buffers.vbuf_capacity", int),
    "vbuf-strategy": ("buffers.vbuf_strategy", str),
    "learner": ("learner.kind", str),
}
SWEEP_VALUE_KEYS = {
    "k": "sweep.k",
    "vbuf-size": "sweep.vbuf_size",
    "vbuf-strategy": "sweep.vbuf_strategy",
    "learner": "sweep.learner",
}


def _unique_dir(root: Path, name: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{name}"
    candidate, n = base, 0
    while candidate.exists():
        n += 1
        candidate = Path(f"{base}-{n:03d}")
    return candidate


def resolve_run_dir(cfg: RunConfig, kind: str = "run") -> Path:
    if cfg["run.dir"]:
        return Path(cfg["run.dir"])
    name = f"{cfg['run.name']}-s{cfg['seed']}" if kind == "run" else cfg["run.name"]
    return _unique_dir(output_root(cfg), name)


def execute_run(cfg: RunConfig, run_dir: Path) -> dict:
    """Run one configuration to stream exhaustion, writing all artifacts."""
    validate_inputs(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(cfg.canonical_text())

    stream, test_events = build_stream_and_tests(cfg)
    model = build_model(cfg, stream)
    learner = build_learner(cfg)
    optim = build_optim(cfg)
    replay, vbuf = build_buffers(cfg)
    game_rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 8]))

    eval_every = cfg["eval.period"] or max(1, stream.steps // 20)
    game = Game(stream, model, learner, cfg["optimizer.mode"], replay, vbuf,
                optim, game_rng, test_events=test_events,
                eval_every=eval_every, diag=cfg["eval.diagnostics"],
                diag_history_cap=cfg["eval.diag_history_cap"],
                diag_seed=cfg["seed"])
    started = time.perf_counter()
    log = game.run()
    wall = time.perf_counter() - started

    final = None
    if cfg["stream.type"] != "synthetic" and not cfg["stream.holdout_per_user"]:
        final = benchmark_test_eval(model, stream)  # full test splits, lazily
    elif test_events:
        final = test_eval(model, test_events)
    if final is not None:
        final["t"] = log.steps[-1].t if log.steps else 0
        log.evals.append(final)

    if cfg["eval.retention"]:
        curve = retention_curve(model, stream_config(cfg),
                                horizon=cfg["eval.retention_horizon"])
        log.meta["retention"] = {
            "per_age": curve.per_age,
            "averaged": curve.averaged,
        }

    log.meta.update({
        "version": __version__,
        "seed": cfg["seed"],
        "config_hash": cfg.config_hash(),
        "config": {k: v for k, v in sorted(cfg.values.items())},
        "wall_clock_s": wall,
        "run_dir": str(run_dir),
    })
    log.write_csv(run_dir / "metrics.csv")
    log.write_summary(run_dir / "summary.json")
    return log.summary()


def cmd_run(args) -> int:
    cfg = load_config(args.config).with_overrides(dict(args.overrides))
    run_dir = resolve_run_dir(cfg)
    summary = execute_run(cfg, run_dir)
    final = summary.get("final", {})
    line = f"run complete: {run_dir}"
    if final:
        line += (f"  accuracy={final.get('accuracy', float('nan')):.4f}"
                 f"  loss={final.get('loss', float('nan')):.4f}")
    print(line)
    return 1 if "aborted" in summary else 0


def _aggregate(rows: list[dict]) -> list[dict]:
    by_value: dict = {}
    for row in rows:
        by_value.setdefault(row["value"], []).append(row)
    out = []
    for value, group in by_value.items():
        ok = [r for r in group if r["status"] == "ok"]
        agg = {"value": value, "n_runs": len(group), "n_ok": len(ok)}
        for metric in ("accuracy", "loss", "perplexity"):
            vals = [r[metric] for r in ok if not math.isnan(r[metric])]
            agg[f"{metric}_mean"] = float(np.mean(vals)) if vals else math.nan
            agg[f"{metric}_std"] = float(np.std(vals)) if vals else math.nan
        out.append(agg)
    return out


def cmd_sweep(args) -> int:
    cfg = load_config(args.config).with_overrides(dict(args.overrides))
    axis = args.axis
    key, typ = SWEEP_AXES[axis]
    values = cfg[SWEEP_VALUE_KEYS[axis]]
    if not values:
        raise ConfigError(f"sweep axis {axis!r} has no values: set {SWEEP_VALUE_KEYS[axis]}")
    seeds = cfg["sweep.seeds"] or (cfg["seed"],)
    sweep_dir = resolve_run_dir(cfg, kind="sweep")
    sweep_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for value in values:
        for seed in seeds:
            row = {"axis": axis, "value": value, "seed": int(seed), "status": "ok",
                   "accuracy": math.nan, "loss": math.nan, "perplexity": math.nan}
            try:
                sub = cfg.with_overrides({key: typ(value), "seed": int(seed),
                                          "run.dir": str(sweep_dir / f"{axis}-{value}-s{seed}")})
                summary = execute_run(sub, Path(sub["run.dir"]))
                final = summary.get("final", {})
                for metric in ("accuracy", "loss", "perplexity"):
                    if metric in final:
                        row[metric] = final[metric]
                if "aborted" in summary:
                    row["status"] = "aborted"
            except Exception as err:  # a failed run marks its row and moves on
                row["status"] = f"error: {err}"
            rows.append(row)
            print(f"[{axis}={value} seed={seed}] {row['status']}"
                  f" accuracy={row['accuracy']:.4f} loss={row['loss']:.4f}")

    runs_path = sweep_dir / "sweep_runs.csv"
    with open(runs_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    summary_path = sweep_dir / "sweep_summary.csv"
    aggregated = _aggregate(rows)
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(aggregated[0]))
        writer.writeheader()
        writer.writerows(aggregated)
    print(f"sweep complete: {summary_path}")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        print(f"missing file: {summary_path}", file=sys.stderr)
        return 1
    try:
        summary = json.loads(summary_path.read_text())
    except json.JSONDecodeError as err:
        print(f"parse error in {summary_path}: {err}", file=sys.stderr)
        return 1
    print(f"run directory : {run_dir}")
    print(f"seed          : {summary.get('seed')}")
    print(f"config hash   : {summary.get('config_hash', '')[:16]}")
    print(f"steps         : {summary.get('steps')}")
    if "online_fit_final" in summary:
        print(f"online fit    : {summary['online_fit_final']:.6f} (mean next-batch loss)")
    final = summary.get("final")
    if final:
        print("final metrics :"
              f" accuracy={final.get('accuracy', math.nan):.4f}"
              f" loss={final.get('loss', math.nan):.4f}"
              f" perplexity={final.get('perplexity', math.nan):.4f}")
    hist = summary.get("chosen_k_histogram", {})
    if hist:
        parts = " ".join(f"{k}:{v}" for k, v in sorted(hist.items(), key=lambda kv: int(kv[0])))
        print(f"chosen-k hist : {parts}")
    retention = summary.get("retention")
    if retention and retention.get("per_age"):
        per_age = retention["per_age"]
        print(f"retention     : newest={per_age[0]:.6f} oldest={per_age[-1]:.6f}"
              f" (ages 0..{len(per_age) - 1})")
    if "aborted" in summary:
        print(f"ABORTED       : {summary['aborted']} at step {summary.get('aborted_at_step')}")
    return 0


def _override(pair: str) -> tuple[str, str]:
    if "=" not in pair:
        raise argparse.ArgumentTypeError(f"override {pair!r} is not key=value")
    key, _, value = pair.partition("=")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="congrad",
                                     description="continual-learning experiment runner")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one configured run")
    run_p.add_argument("config", help="path to a .cfg file")
    run_p.add_argument("-o", "--override", dest="overrides", metavar="KEY=VALUE",
                       type=_override, action="append", default=[])
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="one run per axis value, aggregated")
    sweep_p.add_argument("config")
    sweep_p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep_p.add_argument("-o", "--override", dest="overrides", metavar="KEY=VALUE",
                         type=_override, action="append", default=[])
    sweep_p.set_defaults(func=cmd_sweep)

    report_p = sub.add_parser("report", help="summarize a finished run directory")
    report_p.add_argument("run_dir")
    report_p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
