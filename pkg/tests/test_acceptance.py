"""Acceptance criteria, each at its stated tolerance and runtime budget."""

import time
from pathlib import Path

import numpy as np

from mloweight import config as C
from mloweight import hypergrad as HG
from mloweight.cli import main, suite_jobs
from mloweight.hypergrad import HypergradConfig
from mloweight.models import ParamVector, encode, head_apply, init_params
from mloweight.tensor import grad_of
from mloweight import tensor as T
from mloweight.testbed import (
    QuadraticProblem,
    SyntheticTapTask,
    analytic_hypergrad,
    build_problem,
    canonical_instance,
    cosine,
    pipeline_oracle,
    random_instance,
    random_lambda,
    relative_error,
    run_jobs,
    summarize,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _quad_engine(inst, lam, engine, **kw):
    th = ParamVector([("x", inst.theta_star(lam).reshape(1, -1))])
    om = ParamVector([("x", inst.omega_star(th.flat).reshape(1, -1))])
    losses = HG.trilevel_losses(QuadraticProblem(inst), lam, inst.gamma, None, None, None)
    return HG.trilevel_hypergrad(th, om, lam, losses, HypergradConfig(engine=engine, **kw)).grad


# 1 ------------------------------------------------------------------------------------


def test_autodiff_matches_finite_differences(report):
    start = time.perf_counter()
    spec = SyntheticTapTask().encoder_spec()
    h = 1e-5
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = init_params(spec, seed)
        params = params.like(params.flat + 0.1 * rng.normal(size=params.total_len))
        x = rng.normal(size=(8, spec.input_dim))
        ys = [rng.normal(size=(8, d)) for d in spec.head_dims]

        def loss(p):
            z = encode(p, x)
            terms = [T.mean(T.square(T.sub(head_apply(p, k, z), y))) for k, y in enumerate(ys)]
            return T.sum(T.stack(terms))

        g = grad_of(loss, params).flat
        fd = np.empty_like(g)
        for i in range(params.total_len):
            e = np.zeros_like(g)
            e[i] = h
            fd[i] = (loss(params.like(params.flat + e).tensors()).item()
                     - loss(params.like(params.flat - e).tensors()).item()) / (2 * h)
        worst = max(worst, relative_error(g, fd))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed <= 30
    report(1, ok, f"autodiff vs central differences over 100 seeds ({params.total_len} params): max rel err {worst:.2e} (<= 1e-5), "
                  f"{elapsed:.1f}s (<= 30s)")
    assert ok


# 2 ------------------------------------------------------------------------------------


def test_engines_exact_on_random_quadratics(report):
    start = time.perf_counter()
    errs = {"exact-dense": 0.0, "cg": 0.0, "neumann": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        inst = random_instance(rng)
        lam = random_lambda(rng, inst.n)
        ref = analytic_hypergrad(inst, lam)
        errs["exact-dense"] = max(errs["exact-dense"], relative_error(_quad_engine(inst, lam, "exact-dense"), ref))
        errs["cg"] = max(errs["cg"], relative_error(_quad_engine(inst, lam, "cg", cg_tol=1e-10), ref))
        errs["neumann"] = max(errs["neumann"], relative_error(_quad_engine(inst, lam, "neumann", neumann_terms=50), ref))
    elapsed = time.perf_counter() - start
    ok = errs["exact-dense"] <= 1e-6 and errs["cg"] <= 1e-6 and errs["neumann"] <= 1e-3 and elapsed <= 60
    report(2, ok, f"20 random quadratics: exact-dense {errs['exact-dense']:.1e}, cg {errs['cg']:.1e}, "
                  f"neumann(K=50) {errs['neumann']:.1e}, {elapsed:.1f}s")
    assert ok


# 3 ------------------------------------------------------------------------------------


def test_canonical_instance_values(report):
    lam = np.array([0.5, 0.5])
    sym = canonical_instance((0.0, 0.0))
    g_sym = _quad_engine(sym, lam, "exact-dense")
    inst = canonical_instance((1.0, 0.0))
    g = _quad_engine(inst, lam, "exact-dense")
    oracle = pipeline_oracle(QuadraticProblem(inst), lam, inst.gamma).grad
    target = np.array([-0.25, 0.25])
    e_sym = float(np.max(np.abs(g_sym)))
    e_val = float(np.max(np.abs(g - target)))
    e_orc = float(np.max(np.abs(oracle - target)))
    ok = e_sym <= 1e-8 and e_val <= 1e-6 and e_orc <= 1e-6
    report(3, ok, f"canonical: symmetric |g| {e_sym:.1e}, (1,0) variant err {e_val:.1e}, oracle err {e_orc:.1e}")
    assert ok


# 4 ------------------------------------------------------------------------------------


def test_oracle_triangle(report):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(2000 + seed)
        inst = random_instance(rng)
        lam = random_lambda(rng, inst.n)
        a = analytic_hypergrad(inst, lam)
        o = pipeline_oracle(QuadraticProblem(inst), lam, inst.gamma, delta=1e-4).grad
        e = _quad_engine(inst, lam, "exact-dense")
        worst = max(worst, relative_error(o, a), relative_error(e, a), relative_error(o, e))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed <= 120
    report(4, ok, f"analytic/oracle/exact-dense pairwise max rel err {worst:.1e} (<= 1e-4), {elapsed:.1f}s")
    assert ok


# 5 ------------------------------------------------------------------------------------


def test_finite_difference_engine_fidelity(report):
    start = time.perf_counter()
    iso = []
    for seed in range(10):
        rng = np.random.default_rng(3000 + seed)
        inst = random_instance(rng, isotropic=True)
        inst.curvatures[:] = np.eye(inst.dim) * rng.uniform(0.5, 2.0)
        lam = random_lambda(rng, inst.n)
        iso.append(cosine(_quad_engine(inst, lam, "darts-fd", darts_eta=1.0), analytic_hypergrad(inst, lam)))
    iso_err = float(np.max(np.abs(np.array(iso) - 1.0)))

    cfg, _ = C.load(CONFIGS / "oracle_neural.toml")
    spec = cfg.task
    gamma = cfg.mlo.gamma
    n_params = None
    neural = []
    for seed in range(10):
        problem = build_problem(spec, seed)
        theta, omega = problem.init(seed)
        n_params = theta.total_len + omega.total_len - problem.shared_size
        lam = np.full(problem.n_objectives, 1.0 / problem.n_objectives)
        res = pipeline_oracle(problem, lam, gamma, cfg.oracle.delta, seed, cfg.oracle.tol)
        batches = [problem.sample(k, None, None) for k in ("pt", "tr", "val")]
        losses = HG.trilevel_losses(problem, lam, gamma, *batches)
        g = HG.trilevel_hypergrad(res.theta, res.omega, lam, losses, cfg.mlo.hypergrad).grad
        neural.append(cosine(g, res.grad))
    mean_cos = float(np.mean(neural))
    elapsed = time.perf_counter() - start
    ok = iso_err <= 1e-6 and mean_cos >= 0.8 and n_params <= 300 and elapsed <= 600
    report(5, ok, f"darts-fd: isotropic |cos-1| {iso_err:.1e}; neural (P={n_params}) mean cosine vs oracle "
                  f"{mean_cos:.3f} (>= 0.8, min {min(neural):.3f}), {elapsed:.1f}s")
    assert ok


# 6 ------------------------------------------------------------------------------------


def test_aligned_objective_wins_and_noise_is_lowest(report):
    start = time.perf_counter()
    suite = C.load_suite(CONFIGS / "alignment_suite.toml")
    jobs, specs = suite_jobs(suite)
    summary = summarize(run_jobs(jobs), specs)
    hits = {name: summary["argmax_histogram"][name]["trilevel"][spec.aligned] for name, spec in specs}
    noise = summary["noise_minimum_task_mean"]["trilevel"]
    seeds = len(suite.seeds)
    elapsed = time.perf_counter() - start
    aligned_ok = len({s.aligned for _, s in specs}) == 2 and all(h >= 8 for h in hits.values())
    ok = aligned_ok and noise["count"] >= 8 and noise["seeds"] == seeds and elapsed <= 1200
    per_task = ", ".join(f"{n} {h}/{seeds}" for n, h in hits.items())
    report(6, ok, f"aligned argmax {per_task} (>= 8 each); noise weight lowest (task-averaged) "
                  f"{noise['count']}/{noise['seeds']} (>= 8), {elapsed:.1f}s")
    assert ok


# 7 ------------------------------------------------------------------------------------


def test_trilevel_beats_fixed_weights(report):
    start = time.perf_counter()
    suite = C.load_suite(CONFIGS / "ablation_suite.toml")
    jobs, specs = suite_jobs(suite)
    summary = summarize(run_jobs(jobs), specs)
    mean = summary["mean_val_loss"]
    fixed_rate = summary["win_rate"]["trilevel_vs_fixed-lambda"]
    blo = summary["win_rate"]["trilevel_vs_blo"]
    elapsed = time.perf_counter() - start
    ok = (summary["failed"] == 0 and mean["trilevel"] is not None and mean["fixed-lambda"] is not None
          and mean["trilevel"] <= mean["fixed-lambda"] and elapsed <= 1800)
    report(7, ok, f"mean val loss trilevel {mean['trilevel']:.4g} <= fixed {mean['fixed-lambda']:.4g} "
                  f"(wins {fixed_rate['wins']}/{fixed_rate['pairs']}); blo mean {mean['blo']:.4g}, "
                  f"trilevel-vs-blo win rate {blo['wins']}/{blo['pairs']} (reported only), {elapsed:.1f}s")
    assert ok


# 8 ------------------------------------------------------------------------------------


def test_runs_and_plots_are_byte_stable(report, tmp_path):
    start = time.perf_counter()
    same = []
    for cfg_name in ("canonical_quadratic.toml", "aligned_benchmark.toml"):
        # the echoed config includes out_dir, so both runs use the same directory
        out = tmp_path / cfg_name
        files = ("run.json", "lambda_trajectory.csv", "plot.svg")
        snapshots = []
        for _ in range(2):
            assert main(["run", str(CONFIGS / cfg_name), "--out", str(out), "--set", "plot=true", "--force"]) == 0
            snapshots.append({f: (out / f).read_bytes() for f in files})
        same += [snapshots[0][f] == snapshots[1][f] for f in files]
        assert main(["plot", str(out)]) == 0
        same.append((out / "plot.svg").read_bytes() == snapshots[0]["plot.svg"])
    elapsed = time.perf_counter() - start
    ok = all(same) and elapsed <= 120
    report(8, ok, f"run.json, CSV and plot bytes identical across repeats ({sum(same)}/{len(same)} checks), "
                  f"{elapsed:.1f}s")
    assert ok
