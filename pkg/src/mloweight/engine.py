"""Alternating trilevel training loop, the merged two-level ablation, and the fixed-λ baseline.

Each global step of the trilevel mode runs ``unroll`` optimizer steps on θ
(weighted pretraining), then ``unroll`` steps on ω (proximal finetuning with
θ frozen), then one λ step along the implicit hypergradient followed by
projection. Every level draws batches from its own seeded stream.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import hypergrad as HG
from . import tensor as T
from .hypergrad import HypergradConfig
from .models import ParamVector
from .objectives import POLICIES, TradeoffWeights, project_lambda
from .problem import Problem
from .tensor import grad_of

logger = logging.getLogger(__name__)

MODES = ("trilevel", "blo", "fixed-lambda")
OPTIMIZERS = ("sgd", "adam")


class DivergenceError(RuntimeError):
    """A loss or gradient went non-finite; ``record`` holds the rows logged so far."""

    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class LevelConfig:
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_steps: list[int] = field(default_factory=list)
    decay_factor: float = 0.1
    batch_size: int | None = None

    def validate(self, name: str, allow_zero_lr: bool = False) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"{name}.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr < 0 or (self.lr == 0 and not allow_zero_lr):
            raise ValueError(f"{name}.lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"{name}.momentum must be in [0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"{name}.batch_size must be >= 1")
        if self.decay_factor <= 0:
            raise ValueError(f"{name}.decay_factor must be > 0")

    def lr_at(self, step: int) -> float:
        """Step decay: multiply by ``decay_factor`` at every boundary already reached."""
        passed = sum(1 for b in self.decay_steps if step >= b)
        return self.lr * self.decay_factor**passed


@dataclass
class MloConfig:
    mode: str = "trilevel"
    steps: int = 200
    unroll: int = 1
    gamma: float = 0.001
    blo_gamma: float | None = None  # merge weight of the train loss in blo mode; None reuses gamma
    level1: LevelConfig = field(default_factory=lambda: LevelConfig(lr=0.05))
    level2: LevelConfig = field(default_factory=lambda: LevelConfig(lr=0.05))
    level3: LevelConfig = field(default_factory=lambda: LevelConfig(lr=0.1))
    hypergrad: HypergradConfig = field(default_factory=HypergradConfig)
    lambda_policy: str = "simplex"
    lambda_init: list[float] | None = None
    warmup_steps: int = 0
    pretrain_steps: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.unroll < 1:
            raise ValueError(f"unroll must be >= 1, got {self.unroll}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.blo_gamma is not None and self.blo_gamma < 0:
            raise ValueError(f"blo_gamma must be >= 0, got {self.blo_gamma}")
        if self.lambda_policy not in POLICIES:
            raise ValueError(f"lambda_policy must be one of {POLICIES}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.pretrain_steps is not None and self.pretrain_steps < 0:
            raise ValueError("pretrain_steps must be >= 0")
        self.level1.validate("level1")
        self.level2.validate("level2")
        self.level3.validate("level3", allow_zero_lr=True)


class Optimizer:
    """SGD with (heavy-ball) momentum or Adam over a flat vector."""

    def __init__(self, cfg: LevelConfig, size: int):
        self.cfg = cfg
        self.t = 0
        self.buf = np.zeros(size)
        self.m = np.zeros(size)
        self.v = np.zeros(size)

    def step(self, params: np.ndarray, grad: np.ndarray, step: int) -> np.ndarray:
        return optimizer_step(self.cfg.optimizer, self, params, grad, self.cfg, step)


def optimizer_step(kind: str, state: Optimizer, params: np.ndarray, grad: np.ndarray, schedule: LevelConfig, step: int) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    lr = schedule.lr_at(step)
    if kind == "sgd":
        if schedule.momentum:
            state.buf = schedule.momentum * state.buf + grad
            return params - lr * state.buf
        return params - lr * grad
    if kind == "adam":
        state.t += 1
        b1, b2 = schedule.beta1, schedule.beta2
        state.m = b1 * state.m + (1 - b1) * grad
        state.v = b2 * state.v + (1 - b2) * grad * grad
        mhat = state.m / (1 - b1**state.t)
        vhat = state.v / (1 - b2**state.t)
        return params - lr * mhat / (np.sqrt(vhat) + schedule.eps)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass
class StepRow:
    step: int
    lam: list[float]
    loss_pt: float
    loss_tr: float
    loss_val: float


@dataclass
class RunRecord:
    objective_names: list[str]
    rows: list[StepRow] = field(default_factory=list)
    final: dict[str, float] = field(default_factory=dict)
    hypergrad_norms: list[dict[str, float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    status: str = "ok"
    message: str = ""
    wall_seconds: float = 0.0

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([r.lam for r in self.rows])

    @property
    def final_lambda(self) -> np.ndarray:
        return np.array(self.rows[-1].lam) if self.rows else np.array([])

    def to_json_dict(self, include_timing: bool = False) -> dict:
        out = {
            "status": self.status,
            "message": self.message,
            "objective_names": self.objective_names,
            "config": self.config,
            "final": self.final,
            "final_lambda": self.final_lambda.tolist(),
            "steps_logged": len(self.rows),
            "hypergrad_norms": self.hypergrad_norms,
        }
        if include_timing:
            out["wall_seconds"] = self.wall_seconds
        return out

    def csv_text(self) -> str:
        n = len(self.objective_names)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(csv_header(n))
        for r in self.rows:
            w.writerow([r.step] + [_fmt(x) for x in r.lam] + [_fmt(r.loss_pt), _fmt(r.loss_tr), _fmt(r.loss_val)])
        return buf.getvalue()

    def write(self, out_dir: str | Path, include_timing: bool = False) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run.json").write_text(json.dumps(self.to_json_dict(include_timing), indent=2, sort_keys=True) + "\n")
        (out_dir / "lambda_trajectory.csv").write_text(self.csv_text())
        (out_dir / "timing.json").write_text(json.dumps({"wall_seconds": self.wall_seconds}) + "\n")


def csv_header(n: int) -> list[str]:
    return ["step"] + [f"lambda_{i}" for i in range(n)] + ["loss_pt", "loss_tr", "loss_val"]


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _finite(*values: float) -> bool:
    return all(np.isfinite(v) for v in values)


class _Streams:
    """Independent seeded batch streams, one per level."""

    def __init__(self, seed: int):
        ss = np.random.SeedSequence(seed)
        pt, tr, val, extra = ss.spawn(4)
        self.pt = np.random.default_rng(pt)
        self.tr = np.random.default_rng(tr)
        self.val = np.random.default_rng(val)
        self.extra = np.random.default_rng(extra)


def _loss_and_grad(fn, params: ParamVector) -> tuple[float, ParamVector]:
    holder = {}

    def wrapped(t):
        out = fn(t)
        holder["v"] = out.item()
        return out

    g = grad_of(wrapped, params)
    return holder["v"], g


def _full_val(problem: Problem, omega: ParamVector) -> float:
    return problem.val_loss(omega, problem.sample("val", None, None)).item()


def _finish(problem, record, omega, t0, cfg):
    record.final = {"val_loss": _full_val(problem, omega), **problem.test_metrics(omega)}
    record.wall_seconds = time.perf_counter() - t0
    return record


StepCallback = Callable[[int, ParamVector, ParamVector, np.ndarray], None]


def _warm_start(problem, cfg, theta, omega, lam, streams):
    if cfg.warmup_steps == 0:
        return theta, omega
    opt = Optimizer(cfg.level1, theta.total_len)
    for s in range(cfg.warmup_steps):
        batch = problem.sample("pt", streams.pt, cfg.level1.batch_size)
        _, g = _loss_and_grad(lambda t: problem.pretrain_loss(t, lam.values, batch), theta)
        theta = theta.like(opt.step(theta.flat, g.flat, s))
    omega = omega.copy()
    for n in problem.shared:
        omega[n][...] = theta[n]
    return theta, omega


def run_trilevel(cfg: MloConfig, problem: Problem, callback: StepCallback | None = None, config_echo: dict | None = None) -> RunRecord:
    """Alternate θ, ω and λ updates for ``cfg.steps`` global steps."""
    cfg.validate()
    t0 = time.perf_counter()
    streams = _Streams(cfg.seed)
    theta, omega = problem.init(cfg.seed)
    lam = TradeoffWeights.initial(problem.n_objectives, cfg.lambda_policy, cfg.lambda_init)
    record = RunRecord(problem.objective_names, config=config_echo or {})
    theta, omega = _warm_start(problem, cfg, theta, omega, lam, streams)
    opt1 = Optimizer(cfg.level1, theta.total_len)
    opt2 = Optimizer(cfg.level2, omega.total_len)
    opt3 = Optimizer(cfg.level3, len(lam))
    update_lambda = cfg.mode == "trilevel" and cfg.level3.lr > 0

    for s in range(cfg.steps):
        try:
            for _ in range(cfg.unroll):
                pt = problem.sample("pt", streams.pt, cfg.level1.batch_size)
                l_pt, g = _loss_and_grad(lambda t: problem.pretrain_loss(t, lam.values, pt), theta)
                theta = theta.like(opt1.step(theta.flat, g.flat, s))
            th_const = theta.tensors()
            for _ in range(cfg.unroll):
                tr = problem.sample("tr", streams.tr, cfg.level2.batch_size)
                l_tr, g = _loss_and_grad(lambda t: problem.finetune_loss(t, th_const, cfg.gamma, tr), omega)
                omega = omega.like(opt2.step(omega.flat, g.flat, s))
            va = problem.sample("val", streams.val, cfg.level3.batch_size)
            l_val = problem.val_loss(omega, va).item()
            if not _finite(l_pt, l_tr, l_val):
                raise FloatingPointError(f"non-finite loss at step {s + 1}: pt={l_pt} tr={l_tr} val={l_val}")
            if update_lambda:
                losses = HG.trilevel_losses(problem, lam.values, cfg.gamma, pt, tr, va)
                hg = HG.trilevel_hypergrad(
                    theta, omega, lam.values, losses, cfg.hypergrad,
                    eta_level1=cfg.level1.lr_at(s), eta_level2=cfg.level2.lr_at(s),
                )
                record.hypergrad_norms.append(hg.stages)
                new = opt3.step(lam.values, hg.grad, s)
                lam = project_lambda(TradeoffWeights(new, lam.policy))
        except (FloatingPointError, HG.HypergradError) as exc:
            record.status, record.message = "diverged", str(exc)
            record.wall_seconds = time.perf_counter() - t0
            raise DivergenceError(str(exc), record) from exc
        record.rows.append(StepRow(s + 1, lam.values.tolist(), l_pt, l_tr, l_val))
        if callback is not None:
            callback(s + 1, theta, omega, lam.values.copy())
    return _finish(problem, record, omega, t0, cfg)


def run_blo(cfg: MloConfig, problem: Problem, callback: StepCallback | None = None, config_echo: dict | None = None) -> RunRecord:
    """Two-level ablation: one parameter set minimizes L_pt + γ·L_tr; λ follows the single implicit step.

    The merge weight is ``blo_gamma`` when set, else ``gamma``.
    """
    cfg.validate()
    t0 = time.perf_counter()
    streams = _Streams(cfg.seed)
    theta = problem.init_merged(cfg.seed)
    merge = cfg.gamma if cfg.blo_gamma is None else cfg.blo_gamma
    lam = TradeoffWeights.initial(problem.n_objectives, cfg.lambda_policy, cfg.lambda_init)
    record = RunRecord(problem.objective_names, config=config_echo or {})
    opt1 = Optimizer(cfg.level1, theta.total_len)
    opt3 = Optimizer(cfg.level3, len(lam))
    for s in range(cfg.warmup_steps):
        pt = problem.sample("pt", streams.pt, cfg.level1.batch_size)
        _, g = _loss_and_grad(lambda t: problem.pretrain_loss(t, lam.values, pt), theta)
        theta = theta.like(opt1.step(theta.flat, g.flat, s))
    opt1 = Optimizer(cfg.level1, theta.total_len)

    for s in range(cfg.steps):
        try:
            for _ in range(cfg.unroll):
                pt = problem.sample("pt", streams.pt, cfg.level1.batch_size)
                tr = problem.sample("tr", streams.tr, cfg.level2.batch_size)
                parts = {}

                def merged(t):
                    lp = problem.pretrain_loss(t, lam.values, pt)
                    lt = problem.train_loss(t, tr)
                    parts["pt"], parts["tr"] = lp.item(), lt.item()
                    return T.add(lp, T.scale(lt, merge))

                _, g = _loss_and_grad(merged, theta)
                theta = theta.like(opt1.step(theta.flat, g.flat, s))
            va = problem.sample("val", streams.val, cfg.level3.batch_size)
            l_val = problem.val_loss(theta, va).item()
            if not _finite(parts["pt"], parts["tr"], l_val):
                raise FloatingPointError(f"non-finite loss at step {s + 1}")
            if cfg.level3.lr > 0:
                losses = HG.bilevel_losses(problem, lam.values, merge, pt, tr, va)
                hg = HG.blo_hypergrad(theta, lam.values, losses, cfg.hypergrad, eta=cfg.level1.lr_at(s))
                record.hypergrad_norms.append(hg.stages)
                lam = project_lambda(TradeoffWeights(opt3.step(lam.values, hg.grad, s), lam.policy))
        except (FloatingPointError, HG.HypergradError) as exc:
            record.status, record.message = "diverged", str(exc)
            record.wall_seconds = time.perf_counter() - t0
            raise DivergenceError(str(exc), record) from exc
        record.rows.append(StepRow(s + 1, lam.values.tolist(), parts["pt"], parts["tr"], l_val))
        if callback is not None:
            callback(s + 1, theta, theta, lam.values.copy())
    return _finish(problem, record, theta, t0, cfg)


def run_fixed(cfg: MloConfig, problem: Problem, callback: StepCallback | None = None, config_echo: dict | None = None) -> RunRecord:
    """Pretrain θ with frozen λ, then finetune ω from it; λ never moves.

    ``cfg.pretrain_steps`` (default ``cfg.steps``) sets the pretraining
    budget; finetuning always runs ``cfg.steps`` steps so the record has one
    row per step. Zero pretraining steps is plain finetuning.
    """
    cfg.validate()
    t0 = time.perf_counter()
    streams = _Streams(cfg.seed)
    theta, omega = problem.init(cfg.seed)
    lam = TradeoffWeights.initial(problem.n_objectives, cfg.lambda_policy, cfg.lambda_init)
    record = RunRecord(problem.objective_names, config=config_echo or {})
    theta, omega = _warm_start(problem, cfg, theta, omega, lam, streams)
    opt1 = Optimizer(cfg.level1, theta.total_len)
    opt2 = Optimizer(cfg.level2, omega.total_len)
    n_pre = cfg.steps if cfg.pretrain_steps is None else cfg.pretrain_steps
    pt_losses: list[float] = []
    try:
        for s in range(n_pre):
            for _ in range(cfg.unroll):
                pt = problem.sample("pt", streams.pt, cfg.level1.batch_size)
                l_pt, g = _loss_and_grad(lambda t: problem.pretrain_loss(t, lam.values, pt), theta)
                if not np.isfinite(l_pt):
                    raise FloatingPointError(f"non-finite pretraining loss at step {s + 1}")
                theta = theta.like(opt1.step(theta.flat, g.flat, s))
            pt_losses.append(l_pt)
            if callback is not None:
                callback(s + 1, theta, omega, lam.values.copy())
        if len(pt_losses) < cfg.steps:
            pt = problem.sample("pt", streams.extra, cfg.level1.batch_size)
            frozen = problem.pretrain_loss(theta, lam.values, pt).item()
            pt_losses.extend([frozen] * (cfg.steps - len(pt_losses)))
        omega = omega.copy()
        for n in problem.shared:
            omega[n][...] = theta[n]
        th_const = theta.tensors()
        for s in range(cfg.steps):
            for _ in range(cfg.unroll):
                tr = problem.sample("tr", streams.tr, cfg.level2.batch_size)
                l_tr, g = _loss_and_grad(lambda t: problem.finetune_loss(t, th_const, cfg.gamma, tr), omega)
                omega = omega.like(opt2.step(omega.flat, g.flat, s))
            va = problem.sample("val", streams.val, cfg.level3.batch_size)
            l_val = problem.val_loss(omega, va).item()
            if not _finite(l_tr, l_val):
                raise FloatingPointError(f"non-finite finetuning loss at step {s + 1}")
            record.rows.append(StepRow(s + 1, lam.values.tolist(), pt_losses[s], l_tr, l_val))
    except FloatingPointError as exc:
        record.status, record.message = "diverged", str(exc)
        record.wall_seconds = time.perf_counter() - t0
        raise DivergenceError(str(exc), record) from exc
    return _finish(problem, record, omega, t0, cfg)


def run(cfg: MloConfig, problem: Problem, callback: StepCallback | None = None, config_echo: dict | None = None) -> RunRecord:
    runner = {"trilevel": run_trilevel, "blo": run_blo, "fixed-lambda": run_fixed}[cfg.mode]
    # overflow is caught by the explicit finiteness checks and reported as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        return runner(cfg, problem, callback, config_echo)
