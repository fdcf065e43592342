"""Command-line pipeline: generate, mask, train, evaluate, benchmark and report.

Every command is deterministic given its flags and seeds.  Exit codes are
0 on success, 2 for invalid input and 3 for numerical failures.

Outputs and their run manifests
-------------------------------
``gen-net``   network.csv + manifest.json, run manifest in run.json
``gen-traj``  JSON Lines file, run manifest in ``<file>.manifest.json``
``mask``      JSON Lines file, run manifest in ``<file>.manifest.json``
``train``     JSON report with the run manifest under ``"run"``
``bench``     CSV (columns in :data:`BENCH_COLUMNS`) plus one JSON per cell in a runs directory
``report``    CSV (columns in :data:`REPORT_COLUMNS`)

Destination states are taken from the trajectories: commands that read a
dataset make every destination in it absorbing before solving.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy import stats

from .data import read_network, read_trajectories, write_network, write_trajectories
from .datagen import (FEATURE_KINDS, apply_missing, gen_grid, random_od_pairs,
                      sample_trajectories)
from .errors import NumericalError, ValidationError
from .mdp import Mdp, check_condition_i, check_condition_ii
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger("linirl")

RUN_SCHEMA = 1
BENCH_COLUMNS = ("size", "method", "p", "seed", "eval_loglik", "train_loglik",
                 "ll_eval_time", "factor_time", "iterations", "converged")
REPORT_COLUMNS = ("size", "method", "p", "n_runs", "loglik_mean", "loglik_ci_low",
                  "loglik_ci_high", "ll_eval_time_mean", "ll_eval_time_ci_low",
                  "ll_eval_time_ci_high", "iterations_mean")
METHOD_MODES = {"full": "full", "composition": "composition", "connected": "connected",
                "em-bfs": "em_bfs"}


def library_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__
        return __version__


def run_manifest(args: argparse.Namespace, seeds=()) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    return {
        "schema_version": RUN_SCHEMA,
        "command": args.command,
        "flags": json.loads(json.dumps(flags, default=str)),
        "seeds": [int(s) for s in seeds],
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "library_version": library_version(),
    }


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def parse_theta(text: str, n_features: int | None = None) -> np.ndarray:
    """Parse ``"a,b,c"`` (or whitespace separated) into a float vector."""
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ValidationError(f"cannot parse theta {text!r}: {exc}") from exc
    if n_features is not None and len(vals) != n_features:
        raise ValidationError(f"theta has {len(vals)} entries, the network has {n_features} features")
    return np.array(vals)


def parse_size(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise ValidationError(f"size must look like 20x20, got {text!r}") from exc
    return rows, cols


def dataset_mdp(mdp: Mdp, trajectories) -> Mdp:
    """``mdp`` with every destination that appears in ``trajectories`` made absorbing."""
    dests = {d for t in trajectories for d in t.dest}
    return mdp.with_absorbing(dests) if dests - mdp.absorbing else mdp


# ----------------------------------------------------------------------
# experiment cells (shared by ``bench`` and the acceptance runs)


@dataclass
class CellResult:
    size: str
    method: str
    p: float
    seed: int
    eval_loglik: float
    train_loglik: float
    ll_eval_time: float
    factor_time: float
    iterations: int
    converged: bool
    theta: list

    def row(self) -> dict:
        return {k: getattr(self, k) for k in BENCH_COLUMNS}


def method_config(method: str, theta0, **overrides) -> TrainConfig:
    """Training configuration for a bench method name such as ``composition`` or ``em-bfs-5``."""
    if method.startswith("em-bfs"):
        depth = int(method.rsplit("-", 1)[1]) if method.count("-") == 2 else 5
        return TrainConfig(mode="em_bfs", bfs_depth=depth, theta0=theta0, **overrides)
    if method not in METHOD_MODES:
        raise ValidationError(f"unknown method {method!r}")
    return TrainConfig(mode=METHOD_MODES[method], theta0=theta0, **overrides)


def run_cell(mdp: Mdp, full_data, method: str, p: float, seed: int, theta0, size="",
             **overrides) -> CellResult:
    """Mask ``full_data`` at ``p``, train with ``method`` and score on the full data."""
    masked = full_data if method == "full" else apply_missing(full_data, p, seed)
    report = train(masked, mdp, method_config(method, theta0, **overrides))
    try:
        ll = evaluate(report.theta, full_data, mdp)
    except NumericalError as exc:
        log.warning("%s p=%.2f seed=%d: evaluation failed (%s)", method, p, seed, exc)
        ll = -np.inf
    factor = float(np.mean(report.factor_times)) if report.factor_times else float("nan")
    return CellResult(size, method, float(p), int(seed), float(ll), float(report.loglik),
                      report.mean_eval_time, factor, int(report.iterations),
                      bool(report.converged), [float(x) for x in report.theta])


def grid_dataset(rows, cols, theta, n_traj, n_dest=8, n_od=100, seed=0):
    """Grid network, absorbing-destination MDP and ``n_traj`` sampled trajectories."""
    _, mdp = gen_grid(rows, cols, seed)
    pairs, amdp = random_od_pairs(mdp, n_dest, n_od, seed + 1)
    data = sample_trajectories(amdp, theta, n_traj, pairs, seed + 2)
    return amdp, data


def t_interval(values, level=0.95):
    """Mean and two-sided Student-t confidence interval; zero width for one value.

    Any ``-inf`` value makes the mean and both bounds ``-inf``; other
    non-finite values propagate as ``nan`` or ``inf``.
    """
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan"), float("nan")
    if not np.all(np.isfinite(x)):
        # a -inf run (zero likelihood) drags the mean and both bounds to -inf
        mean = -np.inf if np.any(x == -np.inf) else float(np.mean(x))
        return mean, mean, mean
    mean = float(np.mean(x))
    if x.size < 2:
        return mean, mean, mean
    half = float(stats.t.ppf(0.5 + level / 2, df=x.size - 1) * np.std(x, ddof=1) / np.sqrt(x.size))
    return mean, mean - half, mean + half


def aggregate(rows) -> list[dict]:
    """Group bench rows by (size, method, p) into report rows."""
    groups: dict = {}
    for r in rows:
        key = (r["size"], r["method"], float(r["p"]))
        groups.setdefault(key, []).append(r)
    out = []
    for (size, method, p), rs in sorted(groups.items()):
        ll = t_interval([float(r["eval_loglik"]) for r in rs])
        tt = t_interval([float(r["ll_eval_time"]) for r in rs])
        out.append({"size": size, "method": method, "p": p, "n_runs": len(rs),
                    "loglik_mean": ll[0], "loglik_ci_low": ll[1], "loglik_ci_high": ll[2],
                    "ll_eval_time_mean": tt[0], "ll_eval_time_ci_low": tt[1],
                    "ll_eval_time_ci_high": tt[2],
                    "iterations_mean": float(np.mean([float(r["iterations"]) for r in rs]))})
    return out


def _write_csv(path, columns, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


# ----------------------------------------------------------------------
# commands


def cmd_gen_net(args):
    if args.rows < 2 or args.cols < 2:
        raise ValidationError("--rows and --cols must be at least 2")
    _, mdp = gen_grid(args.rows, args.cols, args.seed)
    out = Path(args.out)
    write_network(out, mdp, FEATURE_KINDS)
    _write_json(out / "run.json", run_manifest(args, [args.seed]))
    print(f"wrote {mdp.n_states} states, {mdp.n_sa} transitions to {out}")


def cmd_gen_traj(args):
    mdp = read_network(args.net)
    theta = parse_theta(args.theta, mdp.n_features)
    pairs, amdp = random_od_pairs(mdp, args.n_dest, args.n_od, args.seed)
    if not check_condition_i(amdp):
        ok, tau = check_condition_ii(amdp, theta)
        if not ok and not args.force:
            raise ValidationError(
                f"theta gives max row sum tau={tau:.4g} >= 1 on a cyclic network "
                "(sampling may not terminate); pass --force to try anyway")
    data = sample_trajectories(amdp, theta, args.n, pairs, args.seed + 1, check=not args.force)
    write_trajectories(args.out, data)
    manifest = run_manifest(args, [args.seed, args.seed + 1])
    manifest["absorbing"] = sorted(amdp.absorbing)
    manifest["od_pairs"] = [list(p) for p in pairs]
    _write_json(_sidecar(args.out), manifest)
    print(f"wrote {len(data)} trajectories to {args.out}")


def cmd_mask(args):
    data = read_trajectories(args.inp)
    masked = apply_missing(data, args.p, args.seed)
    write_trajectories(args.out, masked)
    _write_json(_sidecar(args.out), run_manifest(args, [args.seed]))
    n_gaps = sum(len(t.gaps) for t in masked)
    print(f"wrote {len(masked)} trajectories ({n_gaps} with a missing segment) to {args.out}")


def cmd_train(args):
    data = read_trajectories(args.data)
    mdp = dataset_mdp(read_network(args.net), data)
    theta0 = None if args.theta0 is None else parse_theta(args.theta0, mdp.n_features)
    config = TrainConfig(mode=METHOD_MODES[args.mode], theta0=theta0, max_iters=args.max_iters,
                         grad_tol=args.grad_tol, direction=args.direction,
                         bfs_depth=args.bfs_depth, em_outer_iters=args.em_outer_iters)
    report = train(data, mdp, config)
    out = report.to_json()
    out["run"] = run_manifest(args)
    _write_json(args.out, out)
    print(json.dumps({"theta": out["theta"], "loglik": report.loglik,
                      "iterations": report.iterations, "converged": report.converged}))


def cmd_eval(args):
    report = json.loads(Path(args.theta_from).read_text(encoding="utf-8"))
    try:
        theta = np.asarray(report["theta"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{args.theta_from}: no usable theta ({exc})") from exc
    data = read_trajectories(args.data)
    mdp = dataset_mdp(read_network(args.net), data)
    ll = evaluate(theta, data, mdp)
    result = {"loglik": ll, "n_trajectories": len(data), "theta": theta.tolist()}
    if args.out:
        result["run"] = run_manifest(args)
        _write_json(args.out, result)
    print(json.dumps({"loglik": ll, "n_trajectories": len(data)}))


def _cell_name(size, method, p, seed):
    return f"{size}_{method}_p{p:.2f}_s{seed}.json"


def cmd_bench(args):
    theta = parse_theta(args.theta)
    theta0 = parse_theta(args.theta0)
    probs = [float(p) for p in args.missing_probs]
    runs = Path(args.runs) if args.runs else Path(args.out).with_suffix("").with_name(
        Path(args.out).stem + "_runs")
    runs.mkdir(parents=True, exist_ok=True)
    plan = []
    rows = []
    for size in args.sizes:
        r, c = parse_size(size)
        mdp, data = grid_dataset(r, c, theta, args.n_traj, seed=args.data_seed)
        for method in args.methods:
            method_config(method, theta0)  # validate the name before running anything
            for p in probs:
                for seed in args.seeds:
                    plan.append(_cell_name(size, method, p, seed))
                    t0 = time.perf_counter()
                    res = run_cell(mdp, data, method, p, seed, theta0, size=size,
                                   max_iters=args.max_iters)
                    cell = dict(res.__dict__)
                    cell["wall_time"] = time.perf_counter() - t0
                    _write_json(runs / plan[-1], cell)
                    rows.append(res.row())
                    log.info("%s %s p=%.2f seed=%d: eval LL %.3f", size, method, p, seed,
                             res.eval_loglik)
    manifest = run_manifest(args, args.seeds)
    manifest["cells"] = plan
    _write_json(runs / "plan.json", manifest)
    _write_csv(args.out, BENCH_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {args.out} (cells in {runs})")


def cmd_report(args):
    runs = Path(args.runs)
    if not runs.is_dir():
        raise ValidationError(f"{runs} is not a directory")
    rows, missing = [], []
    plan_path = runs / "plan.json"
    if plan_path.exists():
        names = json.loads(plan_path.read_text(encoding="utf-8")).get("cells", [])
    else:
        names = sorted(p.name for p in runs.glob("*.json"))
    for name in names:
        path = runs / name
        try:
            cell = json.loads(path.read_text(encoding="utf-8"))
            rows.append({k: cell[k] for k in BENCH_COLUMNS})
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            missing.append(name)
            log.debug("skipping %s: %s", name, exc)
    for name in missing:
        print(f"missing run: {name}", file=sys.stderr)
    _write_csv(args.out, REPORT_COLUMNS, aggregate(rows))
    print(f"aggregated {len(rows)} runs into {args.out} ({len(missing)} missing)")


# ----------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="linirl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-net", help="generate a grid road network")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_net)

    p = sub.add_parser("gen-traj", help="sample trajectories from a known theta")
    p.add_argument("--net", required=True)
    p.add_argument("--theta", required=True, help='comma separated, e.g. "-0.8,-4,-1,-0.02"')
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-dest", type=int, default=8, help="number of distinct destinations")
    p.add_argument("--n-od", type=int, default=100, help="number of OD pairs to draw from")
    p.add_argument("--force", action="store_true", help="skip the invertibility check")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_traj)

    p = sub.add_parser("mask", help="remove one random window per trajectory")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--p", type=float, required=True, help="missing probability in [0, 1]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="fit theta by maximum likelihood")
    p.add_argument("--mode", choices=sorted(METHOD_MODES), default="full")
    p.add_argument("--bfs-depth", type=int, default=5)
    p.add_argument("--data", required=True)
    p.add_argument("--net", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta0", default=None, help="starting point (default: zeros)")
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--grad-tol", type=float, default=1e-5)
    p.add_argument("--direction", choices=("bfgs", "gradient"), default="bfgs")
    p.add_argument("--em-outer-iters", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="log-likelihood of a complete dataset")
    p.add_argument("--theta-from", required=True, help="train report JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--net", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="train and score every (method, p, seed) cell")
    p.add_argument("--sizes", nargs="+", default=["20x20"])
    p.add_argument("--missing-probs", nargs="+", type=float, default=[0.1, 0.5, 0.9])
    p.add_argument("--seeds", nargs="+", type=int, default=list(range(10)))
    p.add_argument("--methods", nargs="+", default=["composition", "connected"])
    p.add_argument("--theta", default="-0.8,-4,-1,-0.02", help="ground-truth theta")
    p.add_argument("--theta0", default="0,0,-2,0", help="training start")
    p.add_argument("--n-traj", type=int, default=500)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--runs", default=None, help="directory for per-cell JSON (default: <out>_runs)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="mean and 95%% t-interval per (size, method, p)")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
