"""Command line interface: ``coevo {run,resume,posteval,drift,stats,export}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bauplan import template
from .episode import default_episode_config
from .harness import (
    BAUPLANS,
    CONDITIONS,
    ExperimentConfig,
    HarnessError,
    checkpoint_genotype,
    checkpoint_state,
    drift_from_samples,
    export_trajectory,
    load_checkpoint,
    posteval,
    read_generations,
    read_manifest,
    resume_experiment,
    run_experiment,
    stat_report,
    write_drift,
)

WORKERS_ENV = "COEVO_WORKERS"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"{WORKERS_ENV} must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coevo", description="Co-evolve morphology and control of planar locomotors.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--bauplan", choices=BAUPLANS, default="walker2d")
    run.add_argument("--condition", choices=CONDITIONS, default="coevolve")
    run.add_argument("--source", help="checkpoint whose morphology seeds the preevolved condition")
    run.add_argument("--seed", type=int, default=0, help="first replication seed")
    run.add_argument("--replications", type=int, default=20)
    run.add_argument("--budget", type=int, default=None, help="env steps per replication")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--out", required=True, help="run directory")
    run.add_argument("--config", help="JSON file with ExperimentConfig overrides")

    res = sub.add_parser("resume", help="continue an interrupted run from its checkpoints")
    res.add_argument("--out", required=True)
    res.add_argument("--workers", type=int, default=None)

    pe = sub.add_parser("posteval", help="evaluate a checkpoint's center on fresh episodes")
    pe.add_argument("--source", required=True)
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--episodes", type=int, default=3)

    dr = sub.add_parser("drift", help="write the drift series of every replication in a run")
    dr.add_argument("--out", required=True)

    st = sub.add_parser("stats", help="compare conditions across run directories")
    st.add_argument("runs", nargs="+", help="run directories")
    st.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    st.add_argument("--out", help="write the report JSON here instead of stdout")

    ex = sub.add_parser("export", help="export one episode of a checkpoint as JSON lines")
    ex.add_argument("--source", required=True)
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--out", required=True, help="trajectory file")
    return p


def _load_config_file(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config file {path}: {exc}") from exc


def cmd_run(args) -> dict:
    d = _load_config_file(args.config) if args.config else {}
    d.update(bauplan=args.bauplan, condition=args.condition, seed=args.seed, replications=args.replications)
    d.setdefault("seeds", None)
    if args.budget is not None:
        d["budget"] = args.budget
    if args.source:
        d["preevolved_source"] = args.source
    d["workers"] = args.workers if args.workers is not None else d.get("workers", _default_workers())
    rec = run_experiment(ExperimentConfig.from_dict(d), args.out)
    return {"out": str(rec.directory), "replications": [r.seed for r in rec.replications]}


def cmd_resume(args) -> dict:
    if args.workers is not None or os.environ.get(WORKERS_ENV):
        doc = read_manifest(args.out)
        cfg = ExperimentConfig.from_dict(doc["config"])
        cfg = replace(cfg, workers=args.workers if args.workers is not None else _default_workers())
        rec = run_experiment(cfg, args.out, resume=True)
    else:
        rec = resume_experiment(args.out)
    return {"out": str(rec.directory), "replications": [r.seed for r in rec.replications]}


def _ckpt_episode_config(rec):
    exp = ExperimentConfig.from_dict(json.loads(str(rec["experiment"])))
    return exp.episode_config()


def cmd_posteval(args) -> dict:
    rec = load_checkpoint(args.source)
    state, _ = checkpoint_state(rec)
    kind = str(rec["bauplan"])
    res = posteval(checkpoint_genotype(rec), kind, _ckpt_episode_config(rec), state.obs_stats, args.seed,
                   state.generation, args.episodes)
    fits = [r.fitness for r in res]
    return {
        "bauplan": kind,
        "generation": state.generation,
        "fitness": fits,
        "mean_fitness": float(np.mean(fits)),
        "progress": [r.rewards.progress for r in res],
        "distance": [r.distance_traveled for r in res],
        "termination": [r.termination_reason for r in res],
    }


def cmd_drift(args) -> dict:
    out = Path(args.out)
    series = {}
    for ck in sorted(out.glob("seed_*/checkpoint.npz")):
        rec = load_checkpoint(ck)
        ds = drift_from_samples(list(rec["drift_boundaries"]), list(rec["drift_centers"]), int(rec["n_morph"]))
        write_drift(ck.parent / "drift.csv", ds)
        series[ck.parent.name] = len(ds)
    if not series:
        raise HarnessError(f"no checkpoints under {out}")
    return {"drift_points": series}


def cmd_stats(args) -> dict:
    runs: dict[str, list] = {}
    for r in args.runs:
        doc = read_manifest(r)
        cond = doc["config"]["condition"]
        label = f"{doc['config']['bauplan']}/{cond}"
        tabs = [read_generations(p) for p in sorted(Path(r).glob("seed_*/generations.csv"))]
        runs.setdefault(label, []).extend(tabs)
    report = stat_report(runs, seed=args.seed)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
        return {"out": args.out, "comparisons": report["comparisons"]}
    return report


def cmd_export(args) -> dict:
    rec = load_checkpoint(args.source)
    state, _ = checkpoint_state(rec)
    kind = str(rec["bauplan"])
    ep = _ckpt_episode_config(rec) if "experiment" in rec else default_episode_config(template(kind))
    n = export_trajectory(checkpoint_genotype(rec), kind, ep, args.seed, args.out, state.obs_stats)
    return {"out": args.out, "frames": n}


COMMANDS = {
    "run": cmd_run,
    "resume": cmd_resume,
    "posteval": cmd_posteval,
    "drift": cmd_drift,
    "stats": cmd_stats,
    "export": cmd_export,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = COMMANDS[args.command](args)
    except CliError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes a machine-readable record
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
