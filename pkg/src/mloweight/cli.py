"""Command line entry point: ``run``, ``oracle-check``, ``plot`` and ``suite``.

Exit codes: 0 success, 1 configuration error, 2 divergence (or a suite with
more than 20% failed runs), 3 oracle-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from . import hypergrad as HG
from .engine import DivergenceError, run
from .objectives import TradeoffWeights
from .plot import TrajectoryFormatError, plot_run
from .testbed import OracleError, SuiteJob, cosine, pipeline_oracle, run_jobs, summarize

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ORACLE = 0, 1, 2, 3
SUITE_FAILURE_LIMIT = 0.2
ZERO_NORM = 1e-8

logger = logging.getLogger("mloweight")


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise C.ConfigError(f"output directory {path} already exists; pass --force to replace it", "out_dir")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)


def cmd_run(config_path: str, overrides: Sequence[str] = (), seed: int | None = None, force: bool = False,
            out: str | None = None) -> int:
    try:
        cfg, eff = C.load(config_path, overrides, seed)
        if out is not None:
            cfg.out_dir = eff["out_dir"] = out
        if not cfg.out_dir:
            raise C.ConfigError("no output directory; set out_dir or pass --out", "out_dir")
        out_dir = Path(cfg.out_dir)
        _prepare_out_dir(out_dir, force)
        problem = cfg.build_problem()
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        record = run(cfg.mlo, problem, config_echo=eff)
    except DivergenceError as exc:
        exc.record.write(out_dir)
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    record.write(out_dir)
    if cfg.plot:
        plot_run(out_dir)
    lam = ", ".join(f"{n}={v:.4f}" for n, v in zip(record.objective_names, record.final_lambda))
    print(f"{cfg.mlo.mode}: {len(record.rows)} steps, final val loss {record.final['val_loss']:.6g}")
    print(f"final lambda: {lam}")
    print(f"wrote {out_dir}")
    return EXIT_OK


def oracle_report(cfg: C.RunConfig) -> dict:
    """Engine hypergradient against pipeline_oracle at the oracle's own inner solutions."""
    problem = cfg.build_problem()
    lam = (np.asarray(cfg.oracle.lam, dtype=np.float64) if cfg.oracle.lam is not None
           else TradeoffWeights.initial(problem.n_objectives, cfg.mlo.lambda_policy, cfg.mlo.lambda_init).values)
    if lam.size != problem.n_objectives:
        raise C.ConfigError(f"has {lam.size} entries for {problem.n_objectives} objectives", "oracle.lambda")
    oracle = pipeline_oracle(problem, lam, cfg.mlo.gamma, cfg.oracle.delta, cfg.mlo.seed, cfg.oracle.tol)
    pt = problem.sample("pt", None, None)
    tr = problem.sample("tr", None, None)
    va = problem.sample("val", None, None)
    losses = HG.trilevel_losses(problem, lam, cfg.mlo.gamma, pt, tr, va)
    engine = HG.trilevel_hypergrad(
        oracle.theta, oracle.omega, lam, losses, cfg.mlo.hypergrad,
        eta_level1=cfg.mlo.level1.lr, eta_level2=cfg.mlo.level2.lr,
    ).grad
    ne, no = float(np.linalg.norm(engine)), float(np.linalg.norm(oracle.grad))
    both_zero = ne < ZERO_NORM and no < ZERO_NORM
    cos = cosine(engine, oracle.grad)
    if both_zero:
        verdict, passed = "both ~0", True
    elif np.isnan(cos):
        verdict, passed = "one side ~0", False
    else:
        passed = cos >= cfg.oracle.threshold
        verdict = "agree" if passed else "disagree"
    return {
        "engine_name": cfg.mlo.hypergrad.engine,
        "lambda": lam.tolist(),
        "engine": engine.tolist(),
        "oracle": oracle.grad.tolist(),
        "cosine": None if np.isnan(cos) else cos,
        "norm_ratio": ne / no if no > 0 else None,
        "threshold": cfg.oracle.threshold,
        "verdict": verdict,
        "passed": passed,
        "inner_residual": max(oracle.inner_grad_norms),
    }


def cmd_oracle_check(config_path: str, overrides: Sequence[str] = (), seed: int | None = None) -> int:
    try:
        cfg, _ = C.load(config_path, overrides, seed)
        report = oracle_report(cfg)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OracleError as exc:
        print(f"oracle did not converge (no comparison made): {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except HG.HypergradError as exc:
        print(f"engine failed: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    print(f"{'component':>10} {'engine':>16} {'oracle':>16} {'ratio':>10}")
    for i, (e, o) in enumerate(zip(report["engine"], report["oracle"])):
        ratio = f"{e / o:.4g}" if o != 0 else "-"
        print(f"{'lambda_' + str(i):>10} {e:>16.8g} {o:>16.8g} {ratio:>10}")
    cos = "n/a" if report["cosine"] is None else f"{report['cosine']:.8f}"
    ratio = "n/a" if report["norm_ratio"] is None else f"{report['norm_ratio']:.6g}"
    print(f"engine {report['engine_name']}: cosine {cos}, norm ratio {ratio}, threshold {report['threshold']}")
    print(f"verdict: {report['verdict']} ({'pass' if report['passed'] else 'FAIL'})")
    return EXIT_OK if report["passed"] else EXIT_ORACLE


def cmd_plot(run_dir: str, out_svg: str | None = None) -> int:
    try:
        path = plot_run(run_dir, out_svg)
    except TrajectoryFormatError as exc:
        print(f"malformed trajectory: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read trajectory: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {path}")
    return EXIT_OK


def _print_summary(summary: dict) -> None:
    print(f"runs: {summary['runs']}, failed: {summary['failed']}")
    print("mean final val loss by mode:")
    for mode, v in summary["mean_val_loss"].items():
        print(f"  {mode:<14} {'n/a' if v is None else format(v, '.6g')}")
    print("final-lambda argmax histogram:")
    for task, per_mode in summary["argmax_histogram"].items():
        for mode, hist in per_mode.items():
            print(f"  {task:<20} {mode:<10} {hist}")
    for task, per_mode in summary["noise_minimum"].items():
        for mode, c in per_mode.items():
            print(f"  noise objective lowest: {task} {mode} {c['count']}/{c['runs']}")
    for mode, c in summary.get("noise_minimum_task_mean", {}).items():
        print(f"  noise objective lowest on the task-averaged weights: {mode} {c['count']}/{c['seeds']} seeds")
    for key, w in summary["win_rate"].items():
        rate = "n/a" if w["rate"] is None else f"{w['rate']:.2f}"
        print(f"win rate {key}: {w['wins']}/{w['pairs']} = {rate}")


def suite_jobs(suite: C.SuiteConfig, out_path: Path | None = None) -> tuple[list[SuiteJob], list]:
    """Every (task, seed, mode) job of a suite plus the (name, task spec) list for summaries.

    Runs write into ``out_path/<task>/seed<k>/<mode>`` when ``out_path`` is given.
    """
    specs = []
    jobs = []
    for i, (name, _) in enumerate(suite.tasks):
        for s in suite.seeds:
            for mode in suite.modes:
                run_dir = None if out_path is None else str(out_path / name / f"seed{s}" / mode)
                eff = suite.run_eff(i, s, mode, run_dir)
                cfg = C.build(eff)
                jobs.append(SuiteJob(name, cfg.task, s, mode, cfg.mlo, eff, run_dir))
        specs.append((name, C.build(suite.run_eff(i, suite.seeds[0], suite.modes[0], None)).task))
    return jobs, specs


def cmd_suite(config_path: str, overrides: Sequence[str] = (), seed: int | None = None, jobs: int = 1,
              force: bool = False, out: str | None = None) -> int:
    try:
        suite = C.load_suite(config_path, overrides, seed)
        out_dir = out or suite.base.out_dir
        if not out_dir:
            raise C.ConfigError("no output directory; set out_dir or pass --out", "out_dir")
        if jobs < 1:
            raise C.ConfigError("must be >= 1", "--jobs")
        out_path = Path(out_dir)
        _prepare_out_dir(out_path, force)
        job_list, specs = suite_jobs(suite, out_path)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    entries = run_jobs(job_list, jobs)
    summary = summarize(entries, specs)
    doc = {"entries": [e.__dict__ for e in entries], "summary": summary, "config": suite.base_eff}
    (out_path / "suite.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for e in entries:
        if e.status != "ok":
            print(f"run {e.task} seed {e.seed} {e.mode}: {e.status}: {e.message}", file=sys.stderr)
    _print_summary(summary)
    print(f"wrote {out_path / 'suite.json'}")
    return EXIT_DIVERGED if summary["failure_rate"] > SUITE_FAILURE_LIMIT else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. mlo.steps=50 (repeatable)")
    common.add_argument("--seed", type=int, default=None, help="override the seed (suites: offset every seed)")
    common.add_argument("--jobs", type=int, default=1, help="parallel runs for suite")
    common.add_argument("--force", action="store_true", help="replace an existing output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="mloweight", description="Trilevel reweighting of pretraining objectives.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="execute one configured run")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    p = sub.add_parser("oracle-check", parents=[common], help="compare the engine with the brute-force oracle")
    p.add_argument("config")
    p = sub.add_parser("plot", parents=[common], help="draw lambda trajectories of a run as SVG")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None, help="SVG path (default <run_dir>/plot.svg)")
    p = sub.add_parser("suite", parents=[common], help="run a (task, seed, mode) grid")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config, args.overrides, args.seed, args.force, args.out)
    if args.command == "oracle-check":
        return cmd_oracle_check(args.config, args.overrides, args.seed)
    if args.command == "plot":
        return cmd_plot(args.run_dir, args.out)
    return cmd_suite(args.config, args.overrides, args.seed, args.jobs, args.force, args.out)


if __name__ == "__main__":
    sys.exit(main())
