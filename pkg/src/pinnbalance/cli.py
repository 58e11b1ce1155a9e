"""Experiment runner: run, compare, and probe subcommands.

Every run writes its artifacts into one output directory: per-seed metrics
and weight-trajectory CSVs, initial gradient histograms, power spectra
(Sobolev problems), optional residual-spectrum snapshots, a final-epoch
checkpoint per seed, and a manifest.json listing every file with its sha256
so reruns can be checked for bitwise reproduction.

Exit codes: 0 success, 1 run failure, 2 configuration error, 3 ordering
check failure (compare).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from .balancing import ObjectiveGradients
from .config import (
    ConfigError,
    PRESETS,
    build_problem,
    build_strategy,
    build_training_config,
    config_dict,
    parse_config,
    preset_config,
)
from .diagnostics import (
    gradient_histogram,
    power_spectrum,
    residual_spectrum,
    stiffness_probe,
    write_histogram_csv,
    write_residual_spectra_csv,
    write_spectrum_csv,
)
from .training import TrainingError, train

OUT_ROOT_ENV = "PINNBALANCE_OUT_ROOT"


# ---------------------------------------------------------------------------
# artifact writers


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(path, trace, stage_bounds=None) -> None:
    """One row per epoch: losses, weights, errors, learning rate.

    stage_bounds, when given, appends a stage column (index of the active
    schedule stage at that epoch).
    """
    k = trace.n_objectives
    header = (
        ["epoch"]
        + [f"L_{i}" for i in range(k)]
        + [f"lambda_{i}" for i in range(k)]
        + ["rel_l2", "rel_l1_coeff", "lr"]
    )
    if stage_bounds is not None:
        header.append("stage")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in trace.records:
            row = (
                [r.epoch]
                + [_fmt(v) for v in r.losses]
                + [_fmt(v) for v in r.lam]
                + [_fmt(r.rel_l2), _fmt(r.rel_l1_coeff), _fmt(r.lr)]
            )
            if stage_bounds is not None:
                row.append(sum(1 for s in stage_bounds if r.epoch >= s) - 1)
            w.writerow(row)


def write_lambda_csv(path, trace, cadence: int) -> None:
    """Weight trajectory at update epochs only."""
    k = trace.n_objectives
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"lambda_{i}" for i in range(k)])
        for r in trace.records:
            if r.epoch % cadence == 0:
                w.writerow([r.epoch] + [_fmt(v) for v in r.lam])


def write_probe_csv(path, results) -> None:
    """Stiffness-probe table: one row per (m, k0) with the fitted slope."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "k0", "ratio", "slope"])
        for probe in results:
            for k0, ratio in zip(probe.k0, probe.ratios):
                w.writerow([probe.m, int(k0), _fmt(ratio), _fmt(probe.slope)])


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, cfg, files, failures) -> str:
    manifest = {
        "problem": cfg.problem,
        "strategy": cfg.strategy,
        "seeds": list(cfg.seeds),
        "config": config_dict(cfg),
        "files": {name: _sha256(os.path.join(out_dir, name)) for name in sorted(files)},
        "complete": not failures,
        "failures": failures,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# run


def _initial_histogram(problem, out_path) -> None:
    """Per-objective gradient histogram at initialization, shared bins."""
    flat = problem.initial_shared_params(problem.seed)
    xi = problem.initial_task_params()
    lam = np.ones(problem.n_objectives)
    idx = np.arange(problem.n_train)
    result = problem.batch_eval(flat, xi, idx, lam, capture=True)
    hist = gradient_histogram(ObjectiveGradients(result.objective_grads))
    write_histogram_csv(out_path, hist, problem.objective_names)


def run_single(cfg, seed: int, out_dir: str) -> list[str]:
    """Train one seed and write its artifacts; returns relative file names."""
    problem = build_problem(cfg, seed)
    strategy = build_strategy(cfg, problem)
    tcfg = build_training_config(cfg, seed)
    tcfg = dataclasses.replace(tcfg, checkpoint_epochs=(cfg.epochs - 1,))

    files = []

    hist_name = f"histogram_seed{seed}.csv"
    _initial_histogram(problem, os.path.join(out_dir, hist_name))
    files.append(hist_name)

    snapshot_hook = None
    if cfg.problem in ("sobolev", "forgetting") and cfg.snapshot_epochs:
        def snapshot_hook(epoch, shared, task):
            return residual_spectrum(
                problem.grid_field(shared), problem.target_grid_field(), epoch
            )

    ckpt_dir_name = f"checkpoints_seed{seed}"
    os.makedirs(os.path.join(out_dir, ckpt_dir_name), exist_ok=True)
    trace = train(
        problem,
        strategy,
        tcfg,
        snapshot_hook=snapshot_hook,
        checkpoint_dir=os.path.join(out_dir, ckpt_dir_name),
    )

    stage_bounds = None
    if tcfg.stages:
        stage_bounds = [s.start_epoch for s in tcfg.stages]
    metrics_name = f"metrics_seed{seed}.csv"
    write_metrics_csv(os.path.join(out_dir, metrics_name), trace, stage_bounds)
    files.append(metrics_name)

    lambda_name = f"lambda_seed{seed}.csv"
    write_lambda_csv(os.path.join(out_dir, lambda_name), trace, cfg.weight_cadence)
    files.append(lambda_name)

    if cfg.problem in ("sobolev", "forgetting"):
        target_spec = power_spectrum(problem.target_grid_field())
        model_spec = power_spectrum(problem.grid_field(trace.final_shared))
        tname = f"spectrum_target_seed{seed}.csv"
        mname = f"spectrum_model_seed{seed}.csv"
        write_spectrum_csv(os.path.join(out_dir, tname), target_spec)
        write_spectrum_csv(os.path.join(out_dir, mname), model_spec)
        files += [tname, mname]
        if trace.snapshots:
            rname = f"residual_spectra_seed{seed}.csv"
            snaps = [trace.snapshots[e] for e in sorted(trace.snapshots)]
            write_residual_spectra_csv(os.path.join(out_dir, rname), snaps)
            files.append(rname)

    files.append(
        os.path.join(ckpt_dir_name, f"checkpoint_{cfg.epochs - 1:06d}.json")
    )
    return files


def cmd_run(cfg, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    files, failures = [], {}
    for seed in cfg.seeds:
        try:
            files += run_single(cfg, seed, out_dir)
        except (TrainingError, ConfigError, ValueError, RuntimeError) as exc:
            failures[str(seed)] = f"{type(exc).__name__}: {exc}"
            print(f"seed {seed} failed: {exc}", file=sys.stderr)
    write_manifest(out_dir, cfg, files, failures)
    print(f"wrote {len(files) + 1} files to {out_dir}")
    return 1 if failures else 0


def cmd_probe(cfg, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    results = [
        stiffness_probe(
            m, list(cfg.probe_k0), seeds=cfg.seeds, n_grid=cfg.probe_grid
        )
        for m in cfg.probe_m
    ]
    path = os.path.join(out_dir, "probe.csv")
    write_probe_csv(path, results)
    for probe in results:
        ratios = ", ".join(f"{r:.3g}" for r in probe.ratios)
        print(f"m={probe.m}: ratios [{ratios}] slope {probe.slope:.3f}")
    write_manifest(out_dir, cfg, ["probe.csv"], {})
    print(f"wrote probe.csv to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# compare


def _final_metrics(run_dir, manifest) -> tuple[list[float], list[float]]:
    rel_l2, rel_l1 = [], []
    for seed in manifest["seeds"]:
        path = os.path.join(run_dir, f"metrics_seed{seed}.csv")
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ConfigError(f"{path} has no data rows")
        rel_l2.append(float(rows[-1]["rel_l2"]))
        rel_l1.append(float(rows[-1]["rel_l1_coeff"]))
    return rel_l2, rel_l1


def cmd_compare(run_dirs, csv_out) -> int:
    if len(run_dirs) < 2:
        print("compare needs at least two run directories", file=sys.stderr)
        return 2
    entries = []
    for d in run_dirs:
        mpath = os.path.join(d, "manifest.json")
        if not os.path.exists(mpath):
            print(f"{d}: no manifest.json (not a completed run)", file=sys.stderr)
            return 2
        with open(mpath) as fh:
            manifest = json.load(fh)
        if not manifest.get("complete", False):
            print(f"{d}: run is marked incomplete", file=sys.stderr)
            return 2
        entries.append((d, manifest))

    problems = {m["problem"] for _, m in entries}
    if len(problems) != 1:
        print(f"mismatched problems: {sorted(problems)}", file=sys.stderr)
        return 2
    seed_sets = {tuple(m["seeds"]) for _, m in entries}
    if len(seed_sets) != 1:
        print(f"mismatched seed sets: {sorted(seed_sets)}", file=sys.stderr)
        return 2

    rows = []
    by_strategy: dict[str, list[float]] = {}
    for d, manifest in entries:
        rel_l2, rel_l1 = _final_metrics(d, manifest)
        strategy = manifest["strategy"]
        rows.append(
            {
                "run_dir": d,
                "strategy": strategy,
                "seeds": len(rel_l2),
                "rel_l2_mean": float(np.mean(rel_l2)),
                "rel_l2_std": float(np.std(rel_l2)),
                "rel_l1_mean": float(np.mean(rel_l1)),
                "rel_l1_std": float(np.std(rel_l1)),
            }
        )
        by_strategy.setdefault(strategy, []).extend(rel_l2)

    header = ["run_dir", "strategy", "seeds", "rel_l2_mean", "rel_l2_std",
              "rel_l1_mean", "rel_l1_std"]
    print("  ".join(header))
    for r in rows:
        print(
            f"{r['run_dir']}  {r['strategy']}  {r['seeds']}  "
            f"{r['rel_l2_mean']:.6e}  {r['rel_l2_std']:.3e}  "
            f"{r['rel_l1_mean']:.6e}  {r['rel_l1_std']:.3e}"
        )
    with open(csv_out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            out = dict(r)
            for key in header[3:]:
                out[key] = _fmt(out[key])
            w.writerow(out)
    print(f"wrote {csv_out}")

    if "inverse-dirichlet" in by_strategy and "uniform" in by_strategy:
        inv = float(np.mean(by_strategy["inverse-dirichlet"]))
        uni = float(np.mean(by_strategy["uniform"]))
        ok = inv < uni
        print(
            f"ordering inverse-dirichlet < uniform on rel_l2: "
            f"{inv:.6e} vs {uni:.6e} -> {'pass' if ok else 'FAIL'}"
        )
        if not ok:
            return 3
    return 0


# ---------------------------------------------------------------------------
# entry point


def _load_config(args) -> object:
    if args.config is None and args.preset is None:
        raise ConfigError("need --config or --preset")
    if args.config is not None and args.preset is not None:
        raise ConfigError("--config and --preset are mutually exclusive")
    if args.config is not None:
        cfg = parse_config(args.config)
    else:
        cfg = preset_config(args.preset)
    if args.seed is not None or args.repetitions is not None:
        base = args.seed if args.seed is not None else cfg.seeds[0]
        count = args.repetitions if args.repetitions is not None else 1
        cfg = dataclasses.replace(cfg, seeds=tuple(range(base, base + count)))
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out=args.out)
    return cfg


def _out_dir(cfg, args) -> str:
    out = cfg.out
    if out is None:
        name = args.preset or os.path.splitext(os.path.basename(args.config))[0]
        out = os.path.join("runs", name)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pinnbalance",
        description="Train multi-objective networks under dynamic loss weighting "
        "and emit reproducible metrics files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument(
        "--preset", help=f"named preset ({', '.join(sorted(PRESETS))})"
    )
    common.add_argument("--seed", type=int, help="override the first seed")
    common.add_argument(
        "--repetitions", type=int,
        help="run this many consecutive seeds starting at --seed",
    )
    common.add_argument("--out", help="output directory (joined to "
                        f"${OUT_ROOT_ENV} if relative)")

    sub.add_parser("run", parents=[common], help="train and write artifacts")
    sub.add_parser("probe", parents=[common], help="run the stiffness probe")

    comp = sub.add_parser("compare", help="summarize finished runs")
    comp.add_argument("run_dirs", nargs="+", help="run output directories")
    comp.add_argument(
        "--csv", default="compare_summary.csv", help="summary CSV path"
    )

    args = parser.parse_args(argv)

    if args.command == "compare":
        try:
            return cmd_compare(args.run_dirs, args.csv)
        except (ConfigError, OSError, KeyError, ValueError) as exc:
            print(f"compare failed: {exc}", file=sys.stderr)
            return 2

    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = _out_dir(cfg, args)
    if args.command == "probe":
        if cfg.problem != "stiffness-probe":
            print(
                f"config error: probe needs problem stiffness-probe, "
                f"got {cfg.problem}",
                file=sys.stderr,
            )
            return 2
        return cmd_probe(cfg, out_dir)

    if cfg.problem == "stiffness-probe":
        return cmd_probe(cfg, out_dir)
    try:
        return cmd_run(cfg, out_dir)
    except OSError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
