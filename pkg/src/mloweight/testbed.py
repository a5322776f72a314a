"""Verification instruments: an analytic quadratic trilevel instance, a brute-force
hypergradient oracle, and synthetic task-adaptive-pretraining benchmarks.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from . import objectives as O
from . import tensor as T
from .engine import DivergenceError, MloConfig, run
from .models import EncoderSpec, ParamVector
from .problem import NeuralProblem, Problem
from .tensor import grad_of

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# quadratic instance


@dataclass
class QuadraticInstance:
    """Level I: Σ λ_i ½(θ-c_i)ᵀA_i(θ-c_i); level II: ½||ω-t||² + γ·mean((ω-θ)²); level III: ½||ω-v||²."""

    centers: np.ndarray
    target: np.ndarray
    val_target: np.ndarray
    gamma: float = 1.0
    curvatures: np.ndarray | None = None

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        n, D = self.centers.shape
        if n < 2 or D < 2:
            raise ValueError(f"need n >= 2 objectives and D >= 2 dims, got n={n}, D={D}")
        self.target = np.asarray(self.target, dtype=np.float64).reshape(D)
        self.val_target = np.asarray(self.val_target, dtype=np.float64).reshape(D)
        if self.curvatures is None:
            self.curvatures = np.stack([np.eye(D)] * n)
        self.curvatures = np.asarray(self.curvatures, dtype=np.float64).reshape(n, D, D)
        for A in self.curvatures:
            if not np.allclose(A, A.T, atol=1e-12) or np.linalg.eigvalsh(A).min() <= 0:
                raise ValueError("curvatures must be symmetric positive definite")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def coupling(self) -> float:
        """Gradient coefficient of γ·mean((ω-θ)²), i.e. 2γ/D."""
        return 2.0 * self.gamma / self.dim

    def weighted_curvature(self, lam) -> np.ndarray:
        return np.einsum("i,ijk->jk", np.asarray(lam, dtype=np.float64), self.curvatures)

    def theta_star(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64)
        H = self.weighted_curvature(lam)
        if np.linalg.cond(H) > 1e12:
            raise ValueError("singular weighted curvature Σλ_iA_i")
        b = np.einsum("i,ijk,ik->j", lam, self.curvatures, self.centers)
        return np.linalg.solve(H, b)

    def omega_star(self, theta) -> np.ndarray:
        k = self.coupling
        return (self.target + k * np.asarray(theta)) / (1.0 + k)

    def val(self, lam) -> float:
        w = self.omega_star(self.theta_star(lam))
        return 0.5 * float(np.sum((w - self.val_target) ** 2))

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "target": self.target.tolist(),
            "val_target": self.val_target.tolist(),
            "gamma": self.gamma,
            "curvatures": self.curvatures.tolist(),
        }


def canonical_instance(val_target=(1.0, 0.0), gamma: float = 1.0) -> QuadraticInstance:
    """Two unit-curvature objectives centered at e_1 and e_2, finetune target (1, 1)."""
    return QuadraticInstance(
        centers=[[1.0, 0.0], [0.0, 1.0]], target=[1.0, 1.0], val_target=val_target, gamma=gamma
    )


def random_spd(rng: np.random.Generator, dim: int, cond: float) -> np.ndarray:
    """SPD matrix with eigenvalues spread log-uniformly in [1, cond]."""
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    eig = np.exp(rng.uniform(0.0, np.log(cond), size=dim))
    eig[0], eig[-1] = 1.0, cond
    return (q * eig) @ q.T


def random_instance(
    rng: np.random.Generator,
    dim: int | None = None,
    n: int | None = None,
    cond: float = 10.0,
    isotropic: bool = False,
) -> QuadraticInstance:
    dim = dim if dim is not None else int(rng.integers(2, 11))
    n = n if n is not None else int(rng.integers(2, 5))
    if isotropic:
        curv = np.stack([np.eye(dim) * rng.uniform(0.5, 2.0) for _ in range(n)])
    else:
        curv = np.stack([random_spd(rng, dim, cond) for _ in range(n)])
    return QuadraticInstance(
        centers=rng.normal(size=(n, dim)),
        target=rng.normal(size=dim),
        val_target=rng.normal(size=dim),
        gamma=float(rng.uniform(0.2, 2.0)),
        curvatures=curv,
    )


def random_lambda(rng: np.random.Generator, n: int) -> np.ndarray:
    lam = rng.uniform(0.2, 1.0, size=n)
    return lam / lam.sum()


class QuadraticProblem(Problem):
    """Tape-level losses for a :class:`QuadraticInstance`; full batch, no sampling."""

    def __init__(self, inst: QuadraticInstance):
        self.inst = inst
        self.n_objectives = inst.n
        self.objective_names = [f"quad_{i}" for i in range(inst.n)]
        self.shared = ("x",)

    @property
    def shared_size(self) -> int:
        return self.inst.dim

    def init(self, seed):
        x = np.random.default_rng(seed).normal(size=(1, self.inst.dim))
        return ParamVector([("x", x)]), ParamVector([("x", x.copy())])

    def init_merged(self, seed):
        return self.init(seed)[0]

    def sample(self, level, rng, size):
        return None

    def objective_losses(self, theta, batch):
        x = O.as_mapping(theta)["x"]
        out = []
        for c, A in zip(self.inst.centers, self.inst.curvatures):
            d = T.sub(x, c.reshape(1, -1))
            out.append(T.scale(T.sum(T.mul(T.matmul(d, A), d)), 0.5))
        return out

    def train_loss(self, omega, batch):
        x = O.as_mapping(omega)["x"]
        return T.scale(T.sum(T.square(T.sub(x, self.inst.target.reshape(1, -1)))), 0.5)

    def val_loss(self, omega, batch):
        x = O.as_mapping(omega)["x"]
        return T.scale(T.sum(T.square(T.sub(x, self.inst.val_target.reshape(1, -1)))), 0.5)

    def test_metrics(self, omega):
        return {"test_loss": self.val_loss(omega, None).item()}

    def pretrain_hessian(self, lam):
        return self.inst.weighted_curvature(lam)

    def finetune_hessian(self, gamma):
        return np.eye(self.inst.dim) * (1.0 + 2.0 * gamma / self.inst.dim)

    def merged_hessian(self, lam, gamma):
        return self.inst.weighted_curvature(lam) + gamma * np.eye(self.inst.dim)


def analytic_hypergrad(inst: QuadraticInstance, lam) -> np.ndarray:
    """Exact dL_val/dλ on a quadratic instance by the closed-form chain rule."""
    lam = np.asarray(lam, dtype=np.float64)
    H = inst.weighted_curvature(lam)
    theta = inst.theta_star(lam)
    omega = inst.omega_star(theta)
    k = inst.coupling
    upstream = (omega - inst.val_target) * (k / (1.0 + k))
    # dθ*/dλ_i = -H⁻¹ A_i (θ* - c_i)
    cols = np.stack([A @ (theta - c) for A, c in zip(inst.curvatures, inst.centers)], axis=1)
    dtheta = -np.linalg.solve(H, cols)
    return upstream @ dtheta


def analytic_blo_hypergrad(inst: QuadraticInstance, lam, gamma: float) -> np.ndarray:
    """Merged lower level Σλ_i ½||θ-c_i||²_A_i + γ·½||θ-t||², validation ½||θ-v||²."""
    lam = np.asarray(lam, dtype=np.float64)
    H = inst.weighted_curvature(lam) + gamma * np.eye(inst.dim)
    b = np.einsum("i,ijk,ik->j", lam, inst.curvatures, inst.centers) + gamma * inst.target
    theta = np.linalg.solve(H, b)
    cols = np.stack([A @ (theta - c) for A, c in zip(inst.curvatures, inst.centers)], axis=1)
    return (theta - inst.val_target) @ (-np.linalg.solve(H, cols))


# ---------------------------------------------------------------------------
# brute-force oracle


class OracleError(RuntimeError):
    """Inner levels could not be solved to the oracle's tolerance."""


@dataclass
class OracleResult:
    grad: np.ndarray
    theta: ParamVector
    omega: ParamVector
    val: float
    inner_grad_norms: list[float] = field(default_factory=list)


def _solve(fn, x0: ParamVector, tol: float, max_iter: int, newton: bool = True) -> tuple[ParamVector, float]:
    """Minimize a tape loss over a ParamVector: L-BFGS, then Newton polishing to ``tol``."""

    def fg(flat):
        p = x0.like(np.array(flat))
        holder = {}

        def wrapped(t):
            loss = fn(t)
            holder["v"] = loss.item()
            return loss

        g = grad_of(wrapped, p)
        return holder["v"], g.flat.copy()

    res = minimize(fg, x0.flat.copy(), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0, "maxcor": 30, "maxfun": 10 * max_iter})
    x = x0.like(np.array(res.x))
    _, g = fg(x.flat)
    gnorm = float(np.linalg.norm(g))
    if gnorm > tol and newton:
        # trust-region Newton copes with the indefinite curvature L-BFGS can stall near
        polished = minimize(fg, x.flat.copy(), jac=True, hess=lambda f: _dense_hessian(fg, f),
                            method="trust-exact", options={"gtol": tol, "maxiter": 200})
        _, g_new = fg(polished.x)
        if np.linalg.norm(g_new) < gnorm:
            x, gnorm = x0.like(np.array(polished.x)), float(np.linalg.norm(g_new))
    return x, gnorm


def _dense_hessian(fg, flat: np.ndarray, h: float = 1e-5) -> np.ndarray:
    n = flat.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        H[:, j] = (fg(flat + e)[1] - fg(flat - e)[1]) / (2 * h)
    return 0.5 * (H + H.T)


def solve_levels(
    problem: Problem,
    lam,
    gamma: float,
    theta0: ParamVector,
    omega0: ParamVector,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> tuple[ParamVector, ParamVector, float, list[float]]:
    """Solve level I then level II on full batches; returns θ*, ω*, L_val(ω*), residual grad norms."""
    lam = np.asarray(lam, dtype=np.float64)
    if isinstance(problem, QuadraticProblem):
        inst = problem.inst
        th = inst.theta_star(lam)
        om = inst.omega_star(th)
        theta = theta0.like(th.copy())
        omega = omega0.like(om.copy())
        return theta, omega, inst.val(lam), [0.0, 0.0]
    pt = problem.sample("pt", None, None)
    tr = problem.sample("tr", None, None)
    va = problem.sample("val", None, None)
    theta, g1 = _solve(lambda t: problem.pretrain_loss(t, lam, pt), theta0, tol, max_iter)
    th_const = theta.tensors()
    omega, g2 = _solve(lambda t: problem.finetune_loss(t, th_const, gamma, tr), omega0, tol, max_iter)
    if g1 > 1e3 * tol or g2 > 1e3 * tol:
        raise OracleError(f"inner solve stalled: level I grad {g1:.2e}, level II grad {g2:.2e} (tol {tol:.0e})")
    return theta, omega, problem.val_loss(omega, va).item(), [g1, g2]


def pipeline_oracle(
    problem: Problem,
    lam,
    gamma: float,
    delta: float = 1e-4,
    seed: int = 0,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> OracleResult:
    """Central differences of the fully re-solved validation loss in each λ coordinate.

    All perturbed solves start from the solution at ``lam`` itself, which is
    in turn solved from the problem's seeded initialization.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    lam = np.asarray(lam, dtype=np.float64)
    th0, om0 = problem.init(seed)
    theta, omega, val, norms = solve_levels(problem, lam, gamma, th0, om0, tol, max_iter)
    grad = np.zeros(lam.size)
    for i in range(lam.size):
        e = np.zeros(lam.size)
        e[i] = delta
        _, _, vp, np_ = solve_levels(problem, lam + e, gamma, theta, omega, tol, max_iter)
        _, _, vm, nm = solve_levels(problem, lam - e, gamma, theta, omega, tol, max_iter)
        grad[i] = (vp - vm) / (2 * delta)
        norms.extend(np_ + nm)
    return OracleResult(grad, theta, omega, val, norms)


# ---------------------------------------------------------------------------
# synthetic task-adaptive pretraining benchmark


@dataclass
class SyntheticTapTask:
    """Synthetic pretraining objectives with one downstream-aligned projection.

    Objective ``i`` regresses ``f(P_i x)`` (``proj_dim`` outputs), where ``f``
    is ``target_activation``. Downstream labels are ``uᵀ f(P_aligned x) + noise``.
    With tanh targets the encoder can represent each objective exactly, so
    every level has a finite minimizer; linear targets push a tanh encoder
    toward vanishing weights and unbounded heads. Objectives listed in
    ``noise_objectives`` regress fresh Gaussian draws instead.
    """

    input_dim: int = 16
    hidden_dim: int = 8
    n_objectives: int = 3
    proj_dim: int = 4
    aligned: int = 0
    noise_objectives: tuple[int, ...] = ()
    label_noise: float = 0.1
    overlap: float = 0.0
    noise_scale: float = 1.0
    frozen_noise_head: bool = False
    noise_readout_scale: float = 1.0
    n_pretrain: int = 512
    n_train: int = 32
    n_val: int = 64
    n_test: int = 512
    task: str = "regression"
    activation: str = "tanh"
    target_activation: str = "tanh"
    name: str = ""

    def __post_init__(self):
        self.noise_objectives = tuple(int(i) for i in self.noise_objectives)
        if not 0 <= self.aligned < self.n_objectives:
            raise ValueError(f"aligned index {self.aligned} out of range for {self.n_objectives} objectives")
        if self.aligned in self.noise_objectives:
            raise ValueError("the aligned objective cannot be a noise objective")
        if any(not 0 <= i < self.n_objectives for i in self.noise_objectives):
            raise ValueError("noise objective index out of range")
        if self.label_noise < 0:
            raise ValueError("label noise must be >= 0")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must be in [0, 1]")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task kind {self.task!r}")
        if min(self.n_train, self.n_val, self.n_test, self.n_pretrain) < 1:
            raise ValueError("every split needs at least one sample")

    def encoder_spec(self) -> EncoderSpec:
        out = 2 if self.task == "classification" else 1
        return EncoderSpec(self.input_dim, self.hidden_dim, (self.proj_dim,) * self.n_objectives + (out,), self.activation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_objectives"] = list(self.noise_objectives)
        return d


def make_synthetic_task(spec: SyntheticTapTask, seed: int) -> tuple[O.DatasetBundle, O.ObjectiveSet]:
    """Deterministic bundle and objective set for ``spec`` and ``seed``."""
    rng = np.random.default_rng(seed)
    d, m = spec.input_dim, spec.proj_dim
    base = [rng.normal(size=(m, d)) / np.sqrt(d) for _ in range(spec.n_objectives)]
    a = spec.aligned
    objectives = []
    for i in range(spec.n_objectives):
        name = f"obj{i}"
        if i in spec.noise_objectives:
            readout = spec.noise_readout_scale * rng.normal(size=(spec.hidden_dim, m)) / np.sqrt(spec.hidden_dim) if spec.frozen_noise_head else None
            objectives.append(O.Objective(f"{name}_noise", i, "noise", out_dim=m, noise_scale=spec.noise_scale, readout=readout))
            continue
        P = base[i]
        if i != a and spec.overlap > 0:
            P = spec.overlap * base[a] + np.sqrt(1.0 - spec.overlap**2) * base[i]
        objectives.append(O.Objective(name, i, "projection", projection=P, target_activation=spec.target_activation))
    u = rng.normal(size=m)
    u /= np.linalg.norm(u)

    n_lab = spec.n_train + spec.n_val + spec.n_test
    x_lab = rng.normal(size=(n_lab, d))
    feats = x_lab @ base[a].T
    if spec.target_activation == "tanh":
        feats = np.tanh(feats)
    y = feats @ u + spec.label_noise * rng.normal(size=n_lab)
    if spec.task == "classification":
        y = (y > 0).astype(np.float64)
    y = y.reshape(-1, 1)
    x_pt = rng.normal(size=(spec.n_pretrain, d))
    i1, i2 = spec.n_train, spec.n_train + spec.n_val
    bundle = O.DatasetBundle(
        pretrain=x_pt,
        train=O.LabeledBatch(x_lab[:i1], y[:i1]),
        val=O.LabeledBatch(x_lab[i1:i2], y[i1:i2]),
        test=O.LabeledBatch(x_lab[i2:], y[i2:]),
        task=spec.task,
    )
    return bundle, O.ObjectiveSet(objectives)


def build_problem(spec: SyntheticTapTask, seed: int) -> NeuralProblem:
    bundle, objectives = make_synthetic_task(spec, seed)
    return NeuralProblem(spec.encoder_spec(), objectives, bundle)


def least_squares_ceiling(bundle: O.DatasetBundle) -> float:
    """Validation MSE of the best linear predictor fit on train+val (the skill ceiling)."""
    x = np.vstack([bundle.train.x, bundle.val.x])
    y = np.vstack([bundle.train.y, bundle.val.y]).ravel()
    X = np.hstack([x, np.ones((x.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    xv = np.hstack([bundle.val.x, np.ones((bundle.val.x.shape[0], 1))])
    return float(np.mean((xv @ coef - bundle.val.y.ravel()) ** 2))


def cosine(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(a @ b / (na * nb))


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------------
# suites of runs


@dataclass
class SuiteJob:
    """One (task, seed, mode) run; ``echo`` is stored verbatim as the run's config."""

    task_name: str
    task: SyntheticTapTask
    seed: int
    mode: str
    mlo: MloConfig
    echo: dict = field(default_factory=dict)
    out_dir: str | None = None


@dataclass
class SuiteEntry:
    task: str
    seed: int
    mode: str
    status: str
    message: str = ""
    final_lambda: list[float] = field(default_factory=list)
    final: dict[str, float] = field(default_factory=dict)
    argmax: int | None = None
    run_dir: str | None = None


def _run_job(job: SuiteJob) -> SuiteEntry:
    cfg = replace(job.mlo, mode=job.mode, seed=job.seed)
    entry = SuiteEntry(job.task_name, job.seed, job.mode, "ok", run_dir=job.out_dir)
    try:
        problem = build_problem(job.task, job.seed)
        record = run(cfg, problem, config_echo=job.echo)
    except DivergenceError as exc:
        record = exc.record
        entry.status, entry.message = "diverged", str(exc)
    except (ValueError, OracleError) as exc:
        entry.status, entry.message = "failed", str(exc)
        return entry
    if job.out_dir is not None:
        record.write(job.out_dir)
    if entry.status == "ok":
        entry.final_lambda = record.final_lambda.tolist()
        entry.final = dict(record.final)
        entry.argmax = int(np.argmax(record.final_lambda))
    return entry


def run_jobs(jobs: Sequence[SuiteJob], workers: int = 1) -> list[SuiteEntry]:
    """Run every job, in input order; a failing job is recorded, never raised."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def _noise_is_lowest(lam, noise: Sequence[int], tie: float = 1e-9) -> bool:
    """True when some noise objective's weight is at or below every other weight (ties count)."""
    lam = np.asarray(lam, dtype=np.float64)
    others = [i for i in range(lam.size) if i not in noise]
    if not others:
        return True
    return bool(min(lam[i] for i in noise) <= lam[others].min() + tie)


def summarize(entries: Sequence[SuiteEntry], tasks: Sequence[tuple[str, SyntheticTapTask]]) -> dict:
    """Per-mode mean final val loss, per-task argmax histograms, and paired win rates.

    Noise checks count a run when a noise objective's final weight is the lowest,
    ties included (several weights can sit on the simplex boundary at once).
    ``noise_minimum_task_mean`` does the same per seed on the final λ averaged
    over all tasks, when every task declares the same noise objectives.
    """
    modes = sorted({e.mode for e in entries})
    ok = [e for e in entries if e.status == "ok"]
    out: dict = {
        "runs": len(entries),
        "failed": len(entries) - len(ok),
        "failure_rate": (len(entries) - len(ok)) / len(entries) if entries else 0.0,
        "mean_val_loss": {},
        "argmax_histogram": {},
        "noise_minimum": {},
        "noise_minimum_task_mean": {},
        "win_rate": {},
    }
    for m in modes:
        vals = [e.final["val_loss"] for e in ok if e.mode == m]
        out["mean_val_loss"][m] = float(np.mean(vals)) if vals else None
    for name, spec in tasks:
        out["argmax_histogram"][name] = {}
        for m in modes:
            if m == "fixed-lambda":
                continue
            hist = [0] * spec.n_objectives
            minimum = 0
            runs = [e for e in ok if e.task == name and e.mode == m]
            for e in runs:
                hist[e.argmax] += 1
                if spec.noise_objectives and _noise_is_lowest(e.final_lambda, spec.noise_objectives):
                    minimum += 1
            out["argmax_histogram"][name][m] = hist
            if spec.noise_objectives:
                out["noise_minimum"].setdefault(name, {})[m] = {"count": minimum, "runs": len(runs)}
    noise_sets = {tuple(spec.noise_objectives) for _, spec in tasks}
    if len(noise_sets) == 1 and () not in noise_sets:
        noise = next(iter(noise_sets))
        for m in modes:
            if m == "fixed-lambda":
                continue
            per_seed: dict[int, list] = {}
            for e in ok:
                if e.mode == m:
                    per_seed.setdefault(e.seed, []).append(e.final_lambda)
            full = [np.mean(v, axis=0) for v in per_seed.values() if len(v) == len(tasks)]
            out["noise_minimum_task_mean"][m] = {
                "count": sum(_noise_is_lowest(v, noise) for v in full), "seeds": len(full)}
    if "trilevel" in modes:
        by_key = {(e.task, e.seed, e.mode): e for e in ok}
        for other in modes:
            if other == "trilevel":
                continue
            wins = pairs = 0
            for (task, seed, mode), e in by_key.items():
                if mode != "trilevel" or (task, seed, other) not in by_key:
                    continue
                pairs += 1
                wins += e.final["val_loss"] <= by_key[(task, seed, other)].final["val_loss"]
            out["win_rate"][f"trilevel_vs_{other}"] = {"wins": wins, "pairs": pairs,
                                                       "rate": wins / pairs if pairs else None}
    return out


def alignment_suite(
    seeds: Sequence[int],
    tasks: Sequence[SyntheticTapTask],
    mlo: MloConfig,
    out_dir: str | None = None,
    workers: int = 1,
) -> dict:
    """Trilevel runs per (task, seed); reports final-λ argmax histograms per task.

    Needs at least two tasks aligned to different objectives. With ``out_dir``
    each run writes its trajectory under ``<out_dir>/<task>/seed<k>/``.
    """
    if len(tasks) < 2 or len({t.aligned for t in tasks}) < 2:
        raise ValueError("alignment_suite needs at least two tasks aligned to different objectives")
    named = [(t.name or f"aligned{t.aligned}_{i}", t) for i, t in enumerate(tasks)]
    jobs = [
        SuiteJob(name, t, int(s), "trilevel", mlo,
                 out_dir=None if out_dir is None else str(Path(out_dir) / name / f"seed{s}"))
        for name, t in named
        for s in seeds
    ]
    entries = run_jobs(jobs, workers)
    summary = summarize(entries, named)
    summary["aligned_hits"] = {
        name: summary["argmax_histogram"][name]["trilevel"][t.aligned] for name, t in named
    }
    return {"entries": [asdict(e) for e in entries], "summary": summary}
