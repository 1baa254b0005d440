"""Command-line entry point. Every command writes a run directory with a manifest.

Exit codes: 0 success, 1 runtime failure, 2 validation or calibration failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
DEFAULT_BENCH_BOARDS = ("tiny-cross", "big-cross", "big-l", "diamond")

log = logging.getLogger("rlmm")


class ValidationFailure(Exception):
    """Bad input or a failed calibration check (exit code 2)."""


# run directories


class Run:
    """Collects outputs and timings for one command and writes its manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out = Path(args.out).resolve() if getattr(args, "out", None) else None
        self.outputs: dict[str, Path] = {}
        self.timings: dict[str, float] = {}
        self.info: dict = {}
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)

    @property
    def timed(self) -> bool:
        return not self.args.deterministic

    def path(self, name: str) -> Path:
        return self.out / name

    def add(self, key: str, path: Path) -> Path:
        self.outputs[key] = Path(path)
        return path

    def write_manifest(self) -> None:
        if self.out is None:
            return
        outputs = {}
        for key, p in sorted(self.outputs.items()):
            outputs[key] = {"path": os.path.relpath(p, self.out), "sha256": _sha256(p)}
        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "seed": self.args.seed,
            "deterministic": self.args.deterministic,
            "threads": self.args.threads,
            "version": __version__,
            "wall_times": self.timings,
            "outputs": outputs,
            **self.info,
        }
        self.path("manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1, default=str) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _lookup_board(name):
    from .env import get_board

    try:
        return get_board(name)
    except KeyError as exc:
        raise ValidationFailure(str(exc)) from None


def _board_for(data, name):
    name = name or data.board
    if not name:
        raise ValidationFailure("dataset names no board; pass --board")
    return _lookup_board(name)


def _load_data(path):
    from .data import load

    data = load(path)
    if not len(data):
        raise ValidationFailure(f"{path}: dataset is empty")
    return data


# boards


def cmd_boards(args, run: Run) -> int:
    from .env import builtin_boards, enumerate_dfs, enumerate_reachable, shortest_solution_length

    boards = [_lookup_board(n) for n in args.names] if args.names else builtin_boards()
    rows, failed = [], False
    for board in boards:
        ref = board.reference or {}
        extra = int(ref.get("extra_actions", 0))
        row = {"board": board.name, "cells": board.n_cells, "jumps": board.n_actions}
        if args.enumerate:
            t0 = time.perf_counter()
            task = enumerate_reachable(board)
            used = task.actions_used
            row.update(
                states=len(task),
                actions=used + extra,
                solution_length=shortest_solution_length(task),
            )
            run.timings[board.name] = time.perf_counter() - t0
            if args.check:
                checks = []
                for key in ("states", "actions", "solution_length"):
                    if key in ref:
                        checks.append((key, ref[key], row[key]))
                if not task.reduced and len(task) <= 20_000:
                    dfs = enumerate_dfs(board)
                    agree = dfs == set(int(s) for s in task.states)
                    checks.append(("dfs_agreement", True, agree))
                bad = [f"{k}: expected {e}, got {g}" for k, e, g in checks if e != g]
                row["check"] = "PASS" if not bad else "FAIL (" + "; ".join(bad) + ")"
                failed |= bool(bad)
        rows.append(row)
    cols = ["board", "cells", "jumps", "states", "actions", "solution_length", "check"]
    cols = [c for c in cols if any(c in r for r in rows)]
    width = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in cols}
    print("  ".join(c.ljust(width[c]) for c in cols))
    for r in rows:
        print("  ".join(str(r.get(c, "")).ljust(width[c]) for c in cols))
    if run.out is not None:
        run.add("boards", _write_csv(run.path("boards.csv"), cols, [[r.get(c, "") for c in cols] for r in rows]))
    return EXIT_VALIDATION if failed else EXIT_OK


# simulate


def cmd_simulate(args, run: Run) -> int:
    import numpy as np

    from .data import save
    from .tabular import PopulationPrior, person_ids, sample_population, simulate_board

    prior = PopulationPrior(args.mu, args.sigma2)
    boards = [_lookup_board(b) for b in args.board]
    pop_seed, *board_seeds = np.random.SeedSequence(args.seed).spawn(len(boards) + 1)
    betas = sample_population(prior, args.persons, pop_seed)
    pids = person_ids(args.persons)
    n_games = 0
    for board, ss in zip(boards, board_seeds):
        t0 = time.perf_counter()
        data = simulate_board(board, betas, args.games, ss, generator=args.generator)
        data = data.with_records(data.records, prior={"mu": prior.mu, "sigma2": prior.sigma2}, seed=args.seed)
        run.timings[board.name] = time.perf_counter() - t0
        sub = run.path(board.name)
        sub.mkdir(exist_ok=True)
        save(data, sub / "data.jsonl")
        run.add(f"{board.name}/data", sub / "data.jsonl")
        rows = [[p, repr(float(b)), repr(float(np.log(b)))] for p, b in zip(pids, betas)]
        run.add(f"{board.name}/truths", _write_csv(sub / "truths.csv", ["person_id", "beta", "log_beta"], rows))
        run.info.setdefault("fingerprints", {})[board.name] = data.fingerprint()
        n_games += len(data.episodes)
        print(f"{board.name}: {len(data.episodes)} games, {len(data)} transitions -> {sub / 'data.jsonl'}")
    run.info["games"] = n_games
    return EXIT_OK


# fits


def _fit_config(args):
    import yaml

    from .estimator import FitConfig

    values = {}
    if args.config:
        with open(args.config) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ValidationFailure(f"{args.config}: config must be a mapping")
        values.update(doc)
    for f in dataclasses.fields(FitConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
    values["seed"] = args.seed
    try:
        return FitConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise ValidationFailure(f"bad fit config: {exc}") from None


def _metrics_rows(d: dict):
    return [[k, v if isinstance(v, str) else _fmt(v)] for k, v in d.items()]


def cmd_fit_rlmm(args, run: Run) -> int:
    from .data import rmse_log_beta
    from .estimator import fit

    data = _load_data(args.dataset)
    board = _board_for(data, args.board)
    cfg = _fit_config(args)
    result = fit(data, board, cfg)
    run.timings.update(
        total=result.wall_time, person_stage=sum(result.time_person), value_stage=sum(result.time_value)
    )
    for key, p in result.write(run.out, timings=run.timed).items():
        run.add(key, p)
    metrics = {
        "n_persons": float(len(result.persons)),
        "n_transitions": float(len(data)),
        "mu": result.prior.mu,
        "sigma2": result.prior.sigma2,
        "scale": result.scale,
        "fallback_persons": float(sum(p.fallback for p in result.persons)),
    }
    if data.true_beta:
        metrics["rmse_log_beta"] = rmse_log_beta(result.beta_hat(), data.true_beta)
    if run.timed:
        metrics["wall_time"] = result.wall_time
    run.add("metrics", _write_csv(run.path("metrics.csv"), ["metric", "value"], _metrics_rows(metrics)))
    run.info.update(
        board=board.name,
        dataset=str(Path(args.dataset).resolve()),
        dataset_fingerprint=data.fingerprint(),
        config=cfg.to_dict(),
        metrics=metrics,
    )
    print(f"fit-rlmm {board.name}: {len(result.persons)} persons, mu={result.prior.mu:.4f} "
          f"sigma2={result.prior.sigma2:.4f}" + (f" rmse={metrics['rmse_log_beta']:.4f}" if "rmse_log_beta" in metrics else ""))
    return EXIT_OK


def cmd_fit_mdpmm(args, run: Run) -> int:
    import math

    from .data import rmse_log_beta
    from .env import CapacityError, enumerate_reachable
    from .tabular import TABLE_GUARD, QuadratureGrid, fit_mdpmm

    data = _load_data(args.dataset)
    board = _board_for(data, args.board)
    if board.state_space != "reachable":
        raise ValidationFailure(f"{board.name}: tabular baseline needs the full state space; use fit-rlmm")
    try:
        task = enumerate_reachable(board, cap=TABLE_GUARD)
    except CapacityError as exc:
        raise ValidationFailure(f"{exc}; use fit-rlmm") from None
    res = fit_mdpmm(data, task, QuadratureGrid.gauss_hermite(args.nodes), tol=args.tol)
    run.timings["total"] = res.wall_time
    rows = [[p, repr(b), repr(math.log(b))] for p, b in sorted(res.beta_hat.items())]
    run.add("persons", _write_csv(run.path("persons.csv"), ["person_id", "beta_hat", "log_beta_hat"], rows))
    metrics = {
        "n_persons": float(len(rows)),
        "mu": res.prior.mu,
        "sigma2": res.prior.sigma2,
        "log_marginal": res.log_marginal,
        "evaluations": float(res.evaluations),
        "q_solves": float(res.q_solves),
        "sigma2_floored": float(res.sigma2_floored),
    }
    if data.true_beta:
        metrics["rmse_log_beta"] = rmse_log_beta(res.beta_hat, data.true_beta)
    if run.timed:
        metrics["wall_time"] = res.wall_time
    run.add("metrics", _write_csv(run.path("metrics.csv"), ["metric", "value"], _metrics_rows(metrics)))
    run.info.update(
        board=board.name,
        states=len(task),
        dataset=str(Path(args.dataset).resolve()),
        dataset_fingerprint=data.fingerprint(),
        config={"nodes": args.nodes, "tol": args.tol},
        metrics=metrics,
    )
    print(f"fit-mdpmm {board.name}: mu={res.prior.mu:.4f} sigma2={res.prior.sigma2:.4f}"
          + (f" rmse={metrics['rmse_log_beta']:.4f}" if "rmse_log_beta" in metrics else ""))
    return EXIT_OK


# benchmark


def cmd_benchmark(args, run: Run) -> int:
    import numpy as np

    from .data import rmse_log_beta, save
    from .env import enumerate_reachable
    from .estimator import FitConfig, fit
    from .tabular import PopulationPrior, fit_mdpmm, sample_population, simulate_trajectories

    boards = [_lookup_board(b) for b in (args.board or DEFAULT_BENCH_BOARDS)]
    pop_seed, *board_seeds = np.random.SeedSequence(args.seed).spawn(len(boards) + 1)
    betas = sample_population(PopulationPrior(args.mu, args.sigma2), args.persons, pop_seed)
    rows, times = [], []
    for board, ss in zip(boards, board_seeds):
        task = enumerate_reachable(board)
        data = simulate_trajectories(task, betas, args.games, ss)
        save(data, run.add(f"{board.name}/data", run.path(f"data-{board.name}.jsonl")))
        r = fit(data, board, FitConfig(seed=args.seed))
        m = fit_mdpmm(data, task)
        r_rmse = rmse_log_beta(r.beta_hat(), data.true_beta)
        m_rmse = rmse_log_beta(m.beta_hat, data.true_beta)
        rows.append([board.name, len(task), len(data), _fmt(m_rmse), _fmt(r_rmse)])
        times.append((board.name, len(task), m.wall_time, r.wall_time))
        run.timings[board.name] = {"mdpmm": m.wall_time, "rlmm": r.wall_time}
        print(f"{board.name}: |S|={len(task)} mdpmm {m.wall_time:.2f}s rmse {m_rmse:.3f} | "
              f"rlmm {r.wall_time:.2f}s rmse {r_rmse:.3f}")
    header = ["board", "states", "transitions", "mdpmm_rmse", "rlmm_rmse"]
    run.add("rmse", _write_csv(run.path("rmse.csv"), header, rows))
    trows = []
    for name, n, tm, tr in times:
        vals = (_fmt(tm), _fmt(tr), _fmt(tm / tr)) if run.timed else ("", "", "")
        trows.append([name, n, *vals])
    run.add("runtime", _write_csv(run.path("runtime.csv"), ["board", "states", "mdpmm_seconds", "rlmm_seconds", "speedup"], trows))
    return EXIT_OK


# influence


def cmd_influence(args, run: Run) -> int:
    import numpy as np

    from .diagnostics import (
        DEFAULT_BANDS,
        aggregate_by_step,
        compute_influence,
        epsilon_refit,
        rank_critical_steps,
        solution_collapse_profile,
        write_aggregates,
        write_collapse_profile,
    )
    from .env import CapacityError, enumerate_reachable
    from .estimator import FitResult, StepTable
    from .tabular import TABLE_GUARD

    data = _load_data(args.dataset)
    board = _board_for(data, args.board)
    fit_dir = Path(args.fit_dir)
    if not (fit_dir / "fit.json").is_file():
        raise ValidationFailure(f"{fit_dir}: not a fit-rlmm run directory")
    result = FitResult.read(fit_dir)
    report = compute_influence(result, data, board)
    report.write(run.add("influence", run.path("influence.csv")))
    if not report.records:
        raise ValidationFailure("no influence records (all persons on the fallback path)")
    if args.percentile is not None:
        crit = rank_critical_steps(report.records, percentile=args.percentile)
    else:
        crit = rank_critical_steps(report.records, k=args.top_k)
    run.add("critical", _write_csv(run.path("critical.csv"), ["rank", "person_id", "episode_id", "t", "state_bitmask_hex",
                                                              "action_id", "score", "influence", "chose_optimal"],
                                   [[i + 1, *r.row()] for i, r in enumerate(crit)]))
    edges = tuple(float(x) for x in args.bands.split(",")) if args.bands else DEFAULT_BANDS
    try:
        aggs = aggregate_by_step(report.records, result.beta_hat(), edges)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    write_aggregates(aggs, run.add("aggregates", run.path("aggregates.csv")))
    if board.state_space == "reachable":
        try:
            task = enumerate_reachable(board, cap=TABLE_GUARD)
            write_collapse_profile(solution_collapse_profile(task, data), run.add("collapse", run.path("collapse.csv")))
        except CapacityError:
            log.info("board too large for the solution-path profile; skipped")
    summary = {"records": len(report.records), "excluded_persons": len(report.excluded_persons)}
    if args.refit_persons:
        table = StepTable(data, board)
        rows, worst = [], 0.0
        ok = [p.person_id for p in result.persons if not p.fallback][: args.refit_persons]
        for pid in ok:
            analytic, fd = epsilon_refit(result, data, board, pid, args.eps, table=table)
            med = np.median(np.abs(analytic))
            j = table.person_ids.index(pid)
            idx = np.flatnonzero(table.person == j)
            for i, (a, f) in enumerate(zip(analytic, fd)):
                rel = abs(f - a) / abs(a) if a != 0 else abs(f)
                above = abs(a) > med
                if above:
                    worst = max(worst, rel)
                rec = data.records[idx[i]]
                rows.append([pid, rec.episode_id, rec.t, _fmt(a), _fmt(f), _fmt(rel), int(above)])
        run.add("refit", _write_csv(run.path("refit.csv"),
                                    ["person_id", "episode_id", "t", "influence", "refit_influence", "rel_error", "above_median"], rows))
        summary["refit_max_rel_error_above_median"] = worst
        print(f"epsilon refit: max relative error above median |I| = {worst:.3g}")
    run.info.update(board=board.name, dataset_fingerprint=data.fingerprint(), fit_dir=str(fit_dir.resolve()), summary=summary)
    print(f"influence: {len(report.records)} records, {len(report.excluded_persons)} persons excluded")
    return EXIT_OK


# report


def cmd_report(args, run: Run) -> int:
    from .data import correlations, load

    manifests = []
    for d in args.run_dirs:
        manifests += sorted(Path(d).rglob("manifest.json"))
    manifests = [m for m in manifests if run.out is None or m.parent.resolve() != run.out]
    if not manifests:
        raise ValidationFailure("no run manifests found")
    rmse: dict[str, dict] = {}
    runtime: dict[str, dict] = {}
    corr_rows = []
    for m in manifests:
        man = json.loads(m.read_text())
        cmd = man.get("command")
        if man.get("exit_code", 0) != 0:
            log.warning("%s: skipping failed run", m.parent)
            continue
        if cmd in ("fit-rlmm", "fit-mdpmm"):
            model = "rlmm" if cmd == "fit-rlmm" else "mdpmm"
            board = man.get("board", "?")
            met = man.get("metrics", {})
            if "rmse_log_beta" in met:
                rmse.setdefault(board, {})[model] = met["rmse_log_beta"]
            if "total" in man.get("wall_times", {}):
                runtime.setdefault(board, {})[model] = man["wall_times"]["total"]
            if cmd == "fit-rlmm" and Path(man.get("dataset", "")).is_file():
                data = load(man["dataset"])
                est = {}
                with open(m.parent / "persons.csv", newline="") as fh:
                    est = {r["person_id"]: float(r["beta_hat"]) for r in csv.DictReader(fh)}
                ret = data.person_returns()
                ids = sorted(set(est) & set(ret))
                try:
                    pr, sp = correlations([est[i] for i in ids], [ret[i] for i in ids])
                    corr_rows.append([board, len(ids), _fmt(pr), _fmt(sp)])
                except ValueError as exc:
                    log.warning("%s: correlation skipped (%s)", m.parent, exc)
        elif cmd == "benchmark":
            with open(m.parent / "rmse.csv", newline="") as fh:
                for r in csv.DictReader(fh):
                    rmse.setdefault(r["board"], {}).update(mdpmm=float(r["mdpmm_rmse"]), rlmm=float(r["rlmm_rmse"]))
            for board, t in man.get("wall_times", {}).items():
                runtime.setdefault(board, {}).update(t)
    if not (rmse or runtime or corr_rows):
        raise ValidationFailure("no completed fit or benchmark runs found")
    out = run.out
    rmse_rows = [[b, _fmt(v.get("mdpmm")), _fmt(v.get("rlmm"))] for b, v in sorted(rmse.items())]
    run.add("rmse", _write_csv(out / "rmse.csv", ["board", "mdpmm_rmse", "rlmm_rmse"], rmse_rows))
    rt_rows = []
    for b, v in sorted(runtime.items()):
        tm, tr = v.get("mdpmm"), v.get("rlmm")
        sp = tm / tr if tm is not None and tr else None
        rt_rows.append([b, _fmt(tm), _fmt(tr), _fmt(sp)] if run.timed else [b, "", "", ""])
    run.add("runtime", _write_csv(out / "runtime.csv", ["board", "mdpmm_seconds", "rlmm_seconds", "speedup"], rt_rows))
    run.add("correlation", _write_csv(out / "correlation.csv", ["board", "n", "pearson", "spearman"], corr_rows))
    md = ["| board | MDP-MM RMSE | RLMM RMSE |", "|---|---|---|"]
    md += [f"| {b} | {_short(m)} | {_short(r)} |" for b, m, r in rmse_rows]
    md += ["", "| board | MDP-MM s | RLMM s | speedup |", "|---|---|---|---|"]
    md += [f"| {b} | {_short(m)} | {_short(r)} | {_short(s)} |" for b, m, r, s in rt_rows]
    md += ["", "| board | n | Pearson | Spearman |", "|---|---|---|---|"]
    md += [f"| {b} | {n} | {_short(p)} | {_short(s)} |" for b, n, p, s in corr_rows]
    (out / "report.md").write_text("\n".join(md) + "\n")
    run.add("report", out / "report.md")
    print("\n".join(md))
    return EXIT_OK


def _short(v: str) -> str:
    return f"{float(v):.3f}" if v else ""


# rerun


def cmd_rerun(args, run: Run) -> int:
    man = json.loads(Path(args.manifest).read_text())
    argv = list(man["argv"])
    new_out = str(Path(args.out).resolve())
    if "--out" in argv:
        argv[argv.index("--out") + 1] = new_out
    else:
        argv = [a for a in argv if not a.startswith("--out=")] + ["--out", new_out]
    prev = os.getcwd()
    os.chdir(man.get("cwd", prev))
    try:
        return main(argv)
    finally:
        os.chdir(prev)


# argument parsing


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {v!r}")


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    from .estimator import FitConfig

    for f in dataclasses.fields(FitConfig):
        if f.name == "seed":
            continue
        default = f.default
        if isinstance(default, bool):
            typ = _bool
        elif isinstance(default, int):
            typ = int
        elif isinstance(default, float) or default is None:
            typ = float
        else:
            typ = str
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=typ, default=None,
                       help=f"override {f.name} (default {default})")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, no wall times in CSVs")
    common.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rlmm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("boards", parents=[common], help="enumerate builtin boards")
    p.add_argument("names", nargs="*", help="board names or files (default: all builtin boards)")
    p.add_argument("--check", action="store_true", help="compare against reference counts")
    p.add_argument("--enumerate", type=_bool, default=True, metavar="BOOL")
    p.add_argument("--out")

    p = sub.add_parser("simulate", parents=[common], help="simulate synthetic trajectories")
    p.add_argument("--board", action="append", required=True)
    p.add_argument("--persons", type=int, default=50)
    p.add_argument("--games", type=int, default=50)
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--sigma2", type=float, default=0.25)
    p.add_argument("--generator", choices=["tabular", "score", "probe"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-rlmm", parents=[common], help="fit the shared-value model")
    p.add_argument("dataset")
    p.add_argument("--board")
    p.add_argument("--config", help="YAML file with fit settings")
    _add_fit_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-mdpmm", parents=[common], help="fit the tabular baseline")
    p.add_argument("dataset")
    p.add_argument("--board")
    p.add_argument("--nodes", type=int, default=21)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", required=True)

    p = sub.add_parser("benchmark", parents=[common], help="simulate and fit both models per board")
    p.add_argument("--board", action="append")
    p.add_argument("--persons", type=int, default=50)
    p.add_argument("--games", type=int, default=50)
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--sigma2", type=float, default=0.25)
    p.add_argument("--out", required=True)

    p = sub.add_parser("influence", parents=[common], help="step influence diagnostics")
    p.add_argument("fit_dir")
    p.add_argument("dataset")
    p.add_argument("--board")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--top-k", type=int, default=10)
    g.add_argument("--percentile", type=float)
    p.add_argument("--bands", help="comma-separated percentile edges, e.g. 0,20,40,60,80,100")
    p.add_argument("--refit-persons", type=int, default=0, help="run the epsilon-refit check on this many persons")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", parents=[common], help="collect run directories into tables")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", parents=[common], help="repeat a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {
    "boards": cmd_boards,
    "simulate": cmd_simulate,
    "fit-rlmm": cmd_fit_rlmm,
    "fit-mdpmm": cmd_fit_mdpmm,
    "benchmark": cmd_benchmark,
    "influence": cmd_influence,
    "report": cmd_report,
    "rerun": cmd_rerun,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    threads = 1 if args.deterministic else max(1, args.threads)
    for var in THREAD_VARS:
        os.environ[var] = str(threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "rerun":
        return cmd_rerun(args, None)
    from .data import SchemaError

    run = Run(args, argv)
    try:
        code = COMMANDS[args.command](args, run)
    except (ValidationFailure, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    run.info["exit_code"] = code
    run.write_manifest()
    return code


if __name__ == "__main__":
    sys.exit(main())
