import numpy as np
import pytest

from mloweight import hypergrad as HG
from mloweight.engine import LevelConfig, MloConfig, run
from mloweight.hypergrad import HypergradConfig
from mloweight.testbed import (
    OracleError,
    QuadraticInstance,
    QuadraticProblem,
    SuiteEntry,
    SyntheticTapTask,
    analytic_hypergrad,
    build_problem,
    canonical_instance,
    cosine,
    alignment_suite,
    least_squares_ceiling,
    make_synthetic_task,
    pipeline_oracle,
    random_instance,
    random_lambda,
    relative_error,
    summarize,
)

SMALL = dict(input_dim=4, hidden_dim=3, proj_dim=2, n_pretrain=64, n_train=32, n_val=32, n_test=32)


# quadratic instance --------------------------------------------------------------------


def test_equal_centers_give_zero_gradient():
    inst = QuadraticInstance(centers=[[1.0, 2.0]] * 3, target=[0.0, 0.0], val_target=[3.0, -1.0])
    np.testing.assert_allclose(analytic_hypergrad(inst, [0.2, 0.3, 0.5]), 0.0, atol=1e-15)


def test_symmetric_canonical_is_zero():
    inst = canonical_instance((0.0, 0.0))
    np.testing.assert_allclose(analytic_hypergrad(inst, [0.5, 0.5]), [0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(pipeline_oracle(QuadraticProblem(inst), [0.5, 0.5], 1.0).grad, 0.0, atol=1e-8)


def test_canonical_value_from_closed_form_and_oracle():
    inst = canonical_instance((1.0, 0.0))
    np.testing.assert_allclose(analytic_hypergrad(inst, [0.5, 0.5]), [-0.25, 0.25], atol=1e-12)
    np.testing.assert_allclose(pipeline_oracle(QuadraticProblem(inst), [0.5, 0.5], 1.0).grad, [-0.25, 0.25],
                               atol=1e-6)


def test_canonical_closed_form_by_hand():
    # θ* = (λ1, λ2)/(λ1+λ2); D = 2 so the coupling is 2γ/D = γ and ω* = (t + γθ*)/(1+γ)
    inst = canonical_instance((1.0, 0.0), gamma=1.0)
    lam = np.array([0.5, 0.5])
    np.testing.assert_allclose(inst.theta_star(lam), [0.5, 0.5])
    np.testing.assert_allclose(inst.omega_star(inst.theta_star(lam)), [0.75, 0.75])
    assert inst.val(lam) == pytest.approx(0.5 * (0.25**2 + 0.75**2))


@pytest.mark.parametrize("seed", range(10))
def test_oracle_matches_analytic_on_random_quadratics(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    lam = random_lambda(rng, inst.n)
    assert relative_error(pipeline_oracle(QuadraticProblem(inst), lam, inst.gamma).grad,
                          analytic_hypergrad(inst, lam)) <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_oracle_is_stable_in_delta(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    lam = random_lambda(rng, inst.n)
    a = pipeline_oracle(QuadraticProblem(inst), lam, inst.gamma, delta=1e-4).grad
    b = pipeline_oracle(QuadraticProblem(inst), lam, inst.gamma, delta=5e-5).grad
    assert np.all(np.abs(a - b) <= 0.01 * np.maximum(np.abs(a), 1e-8))


def test_oracle_rejects_bad_delta():
    with pytest.raises(ValueError):
        pipeline_oracle(QuadraticProblem(canonical_instance()), [0.5, 0.5], 1.0, delta=0.0)


@pytest.mark.parametrize("kw", [
    dict(centers=[[1.0, 0.0]], target=[0, 0], val_target=[0, 0]),
    dict(centers=[[1.0], [2.0]], target=[0], val_target=[0]),
    dict(centers=[[1.0, 0.0], [0.0, 1.0]], target=[0, 0], val_target=[0, 0], gamma=-1.0),
    dict(centers=[[1.0, 0.0], [0.0, 1.0]], target=[0, 0], val_target=[0, 0],
         curvatures=[np.eye(2), -np.eye(2)]),
])
def test_invalid_instances(kw):
    with pytest.raises(ValueError):
        QuadraticInstance(**kw)


def test_singular_curvature_rejected():
    inst = canonical_instance()
    with pytest.raises(ValueError, match="singular"):
        analytic_hypergrad(inst, [0.0, 0.0])


# neural oracle --------------------------------------------------------------------------


def test_neural_oracle_agrees_with_exact_engine():
    task = SyntheticTapTask(input_dim=4, hidden_dim=3, proj_dim=2, n_pretrain=256, n_train=64, n_val=64)
    problem = build_problem(task, 0)
    lam = np.ones(3) / 3
    res = pipeline_oracle(problem, lam, 20.0, tol=1e-9)
    losses = HG.trilevel_losses(problem, lam, 20.0, *(problem.sample(k, None, None) for k in ("pt", "tr", "val")))
    g = HG.trilevel_hypergrad(res.theta, res.omega, lam, losses, HypergradConfig(engine="exact-dense")).grad
    assert cosine(g, res.grad) >= 0.95
    assert max(res.inner_grad_norms) <= 1e-6


def test_oracle_reports_stalled_inner_solve():
    problem = build_problem(SyntheticTapTask(**SMALL), 0)
    with pytest.raises(OracleError, match="stalled"):
        pipeline_oracle(problem, np.ones(3) / 3, 1.0, tol=1e-30, max_iter=3)


# synthetic tasks -------------------------------------------------------------------------


def test_synthetic_task_is_deterministic():
    spec = SyntheticTapTask(**SMALL)
    (a, oa), (b, ob) = make_synthetic_task(spec, 4), make_synthetic_task(spec, 4)
    for split in ("train", "val", "test"):
        assert np.array_equal(getattr(a, split).x, getattr(b, split).x)
        assert np.array_equal(getattr(a, split).y, getattr(b, split).y)
    assert np.array_equal(a.pretrain, b.pretrain)
    assert all(np.array_equal(p.projection, q.projection) for p, q in zip(oa, ob))


def test_labeled_splits_are_disjoint():
    b, _ = make_synthetic_task(SyntheticTapTask(**SMALL), 0)
    rows = [tuple(r) for split in (b.train, b.val, b.test) for r in split.x]
    assert len(rows) == len(set(rows)) == 32 * 3


def test_linear_noiseless_task_is_solvable():
    spec = SyntheticTapTask(**SMALL, label_noise=0.0, target_activation="linear", activation="linear")
    assert least_squares_ceiling(make_synthetic_task(spec, 0)[0]) <= 1e-20


def test_noise_objectives_have_no_projection():
    _, objs = make_synthetic_task(SyntheticTapTask(**SMALL, noise_objectives=(2,)), 0)
    assert [o.kind for o in objs] == ["projection", "projection", "noise"]


@pytest.mark.parametrize("kw", [
    dict(aligned=3), dict(aligned=1, noise_objectives=(1,)), dict(noise_objectives=(5,)),
    dict(label_noise=-0.1), dict(overlap=1.5), dict(task="ranking"), dict(n_train=0),
])
def test_invalid_task_specs(kw):
    with pytest.raises(ValueError):
        SyntheticTapTask(**{**SMALL, **kw})


def test_default_task_size_matches_encoder():
    spec = SyntheticTapTask()
    problem = build_problem(spec, 0)
    theta, omega = problem.init(0)
    assert theta.total_len + omega.total_len - problem.shared_size == 253


# suites ----------------------------------------------------------------------------------


def _suite_cfg(steps=6):
    return MloConfig(steps=steps, gamma=2.0, level1=LevelConfig(lr=0.1, batch_size=16),
                     level2=LevelConfig(lr=0.1, batch_size=16), level3=LevelConfig(lr=5.0, batch_size=16),
                     hypergrad=HypergradConfig(darts_eta=1.0))


def test_alignment_suite_needs_two_distinct_alignments():
    task = SyntheticTapTask(**SMALL)
    with pytest.raises(ValueError):
        alignment_suite([0], [task], _suite_cfg())
    with pytest.raises(ValueError):
        alignment_suite([0], [task, SyntheticTapTask(**SMALL)], _suite_cfg())


def test_alignment_suite_is_deterministic_and_writes_trajectories(tmp_path):
    tasks = [SyntheticTapTask(**SMALL, aligned=0, name="a"), SyntheticTapTask(**SMALL, aligned=1, name="b")]
    one = alignment_suite([0, 1], tasks, _suite_cfg(), out_dir=str(tmp_path))
    two = alignment_suite([0, 1], tasks, _suite_cfg())
    assert one["summary"]["argmax_histogram"] == two["summary"]["argmax_histogram"]
    assert [e["final_lambda"] for e in one["entries"]] == [e["final_lambda"] for e in two["entries"]]
    assert (tmp_path / "a" / "seed1" / "lambda_trajectory.csv").exists()
    assert sum(one["summary"]["argmax_histogram"]["a"]["trilevel"]) == 2


def test_suite_records_failures_without_aborting():
    tasks = [SyntheticTapTask(**SMALL, aligned=0), SyntheticTapTask(**SMALL, aligned=1)]
    cfg = _suite_cfg(steps=50)
    cfg.level1 = LevelConfig(lr=1e6, batch_size=16)
    out = alignment_suite([0], tasks, cfg)
    assert out["summary"]["failed"] == 2 and out["summary"]["failure_rate"] == 1.0
    assert all(e["status"] == "diverged" for e in out["entries"])


def test_single_objective_weight_is_one():
    spec = SyntheticTapTask(**{**SMALL, "n_objectives": 1})
    rec = run(_suite_cfg(), build_problem(spec, 0))
    assert np.all(rec.lambdas == 1.0)


def _entry(task, seed, mode, lam, val=1.0):
    return SuiteEntry(task, seed, mode, "ok", "", list(lam), {"val_loss": val}, int(np.argmax(lam)), None)


def test_summary_counts_ties_and_task_means():
    spec_a = SyntheticTapTask(**SMALL, aligned=0, noise_objectives=(2,))
    spec_b = SyntheticTapTask(**SMALL, aligned=1, noise_objectives=(2,))
    entries = [
        _entry("a", 0, "trilevel", [1.0, 0.0, 0.0]),  # tie at zero counts
        _entry("b", 0, "trilevel", [0.1, 0.8, 0.1]),
        _entry("a", 1, "trilevel", [0.8, 0.05, 0.15]),  # noise above objective 1 here
        _entry("b", 1, "trilevel", [0.2, 0.7, 0.1]),
    ]
    s = summarize(entries, [("a", spec_a), ("b", spec_b)])
    assert s["noise_minimum"]["a"]["trilevel"] == {"count": 1, "runs": 2}
    assert s["noise_minimum"]["b"]["trilevel"] == {"count": 2, "runs": 2}
    # task means: seed 0 → (.55, .4, .05), seed 1 → (.5, .375, .125)
    assert s["noise_minimum_task_mean"]["trilevel"] == {"count": 2, "seeds": 2}
    assert s["argmax_histogram"]["a"]["trilevel"] == [2, 0, 0]


def test_summary_win_rate_is_paired_by_seed():
    spec = SyntheticTapTask(**SMALL)
    entries = [
        _entry("a", 0, "trilevel", [1, 0, 0], 0.1), _entry("a", 0, "fixed-lambda", [1, 0, 0], 0.2),
        _entry("a", 1, "trilevel", [1, 0, 0], 0.3), _entry("a", 1, "fixed-lambda", [1, 0, 0], 0.2),
    ]
    s = summarize(entries, [("a", spec)])
    assert s["win_rate"]["trilevel_vs_fixed-lambda"] == {"wins": 1, "pairs": 2, "rate": 0.5}
    assert s["mean_val_loss"]["trilevel"] == pytest.approx(0.2)
    assert "fixed-lambda" not in s["argmax_histogram"]["a"]
