"""Hypergradients of the validation loss with respect to the tradeoff weights.

The trilevel gradient is assembled from two implicit-function-theorem steps::

    v1 = ∇_ω L_val(ω)
    u2 = [∇²_ω F2]⁻¹ v1                  F2(ω, θ) = L_tr(ω) + γ R(ω, θ)
    v2 = -(∂²F2/∂θ∂ω) u2
    u3 = [∇²_θ F1]⁻¹ v2                  F1(θ, λ) = Σ λ_i L_i(θ)
    g  = -(∂²F1/∂λ∂θ) u3

L_val does not read λ, so there is no direct ∂L_val/∂λ term to add.
Every second-order quantity is a central difference of first-order tape
gradients. The inverse-Hessian products come from one of four engines:
a dense solve, a truncated Neumann series, conjugate gradients, or the
one-step ``η·v`` surrogate (``darts-fd``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .models import ParamVector
from .tensor import grad_of

logger = logging.getLogger(__name__)

ENGINES = ("exact-dense", "neumann", "cg", "darts-fd")


class HypergradError(RuntimeError):
    pass


@dataclass
class HypergradConfig:
    engine: str = "darts-fd"
    neumann_terms: int = 50
    # None picks 2/(λ_min + λ_max) from power-iteration estimates of the spectrum
    neumann_alpha: float | None = None
    cg_iters: int = 200
    cg_tol: float = 1e-10
    fd_epsilon_scale: float = 0.01
    darts_eta: float | None = None
    dense_cap: int = 2000
    exact_quadratic_hvp: bool = True
    level1_fast_path: bool = True

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"hypergrad.engine must be one of {ENGINES}, got {self.engine!r}")
        if self.neumann_terms < 1:
            raise ValueError("hypergrad.neumann_terms must be >= 1")
        if self.cg_iters < 1:
            raise ValueError("hypergrad.cg_iters must be >= 1")
        if self.fd_epsilon_scale <= 0:
            raise ValueError("hypergrad.fd_epsilon_scale must be > 0")
        if self.darts_eta is not None and self.darts_eta <= 0:
            raise ValueError("hypergrad.darts_eta must be > 0")
        if self.neumann_alpha is not None and self.neumann_alpha <= 0:
            raise ValueError("hypergrad.neumann_alpha must be > 0")


class LossFn:
    """A scalar loss ``fn(primal, context)`` over tensor mappings.

    ``hessian(context)`` may return the exact primal Hessian (quadratic
    testbeds only). ``terms(primal)`` may return the per-coordinate losses
    when ``fn`` is linear in the context vector, enabling an exact mixed
    product without differencing.
    """

    def __init__(self, fn: Callable, hessian: Callable | None = None, terms: Callable | None = None):
        self.fn = fn
        self.hessian = hessian
        self.terms = terms

    def __call__(self, primal, context=None):
        return self.fn(primal, context)


def _tensors(p: ParamVector | None):
    return None if p is None else p.tensors()


def _check_finite(g: ParamVector, what: str) -> ParamVector:
    if not np.all(np.isfinite(g.flat)):
        raise HypergradError(f"non-finite gradient while evaluating {what}")
    return g


def primal_grad(F: LossFn, p: ParamVector, context: ParamVector | None = None) -> ParamVector:
    ctx = _tensors(context)
    return grad_of(lambda t: F(t, ctx), p)


def context_grad(F: LossFn, p: ParamVector, context: ParamVector) -> ParamVector:
    prim = p.tensors()
    return grad_of(lambda c: F(prim, c), context)


def hvp(
    F: LossFn,
    p: ParamVector,
    v: ParamVector,
    context: ParamVector | None = None,
    eps_scale: float = 0.01,
    exact: bool = True,
) -> ParamVector:
    """∇²_p F · v by central differences with step ``eps_scale / ||v||``."""
    norm = v.norm()
    if norm == 0.0:
        return v.zeros_like()
    if exact and F.hessian is not None:
        H = F.hessian(context)
        if H is not None:
            return v.like(H @ v.flat)
    eps = eps_scale / norm
    gp = primal_grad(F, p.axpy(eps, v), context)
    gm = primal_grad(F, p.axpy(-eps, v), context)
    out = (gp - gm) * (1.0 / (2.0 * eps))
    return _check_finite(out, "Hessian-vector product")


def dense_hessian(F: LossFn, p: ParamVector, context=None, eps_scale=0.01, exact=True) -> np.ndarray:
    n = p.total_len
    H = np.empty((n, n))
    e = p.zeros_like()
    for j in range(n):
        e.flat[:] = 0.0
        e.flat[j] = 1.0
        H[:, j] = hvp(F, p, e, context, eps_scale, exact).flat
    return 0.5 * (H + H.T)


def _power_max_eig(matvec, v0: np.ndarray, iters: int = 30) -> float:
    x = v0 / np.linalg.norm(v0)
    lam = 0.0
    for _ in range(iters):
        y = matvec(x)
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            break
        x = y / lam
    return lam


def _neumann_step(matvec, v0: np.ndarray) -> float:
    """2/(λ_min + λ_max): the series then contracts by (κ-1)/(κ+1) per term instead of 1 - 1/κ.

    λ_min comes from power iteration on λ_max·I - H, which can only overestimate
    it, so the step stays below 2/λ_max and the series converges.
    """
    top = _power_max_eig(matvec, v0)
    if top == 0.0:
        raise HypergradError("zero Hessian in neumann step estimate")
    gap = _power_max_eig(lambda x: top * x - matvec(x), v0)
    bottom = top - gap
    if bottom <= 0.0:
        return 1.0 / top
    return 2.0 / (top + bottom)


def ihvp(
    F: LossFn,
    p: ParamVector,
    v: ParamVector,
    cfg: HypergradConfig,
    context: ParamVector | None = None,
    eta: float | None = None,
    info: dict | None = None,
) -> ParamVector:
    """Approximate [∇²_p F]⁻¹ v with the configured engine.

    ``eta`` is the fallback step for ``darts-fd`` when ``cfg.darts_eta`` is
    unset (the engine passes the current learning rate of that level).
    """
    info = {} if info is None else info
    if cfg.engine == "darts-fd":
        step = cfg.darts_eta if cfg.darts_eta is not None else (eta if eta is not None else 1.0)
        info["eta"] = step
        return v * step
    if v.norm() == 0.0:
        return v.zeros_like()

    def matvec(x: np.ndarray) -> np.ndarray:
        return hvp(F, p, v.like(x), context, cfg.fd_epsilon_scale, cfg.exact_quadratic_hvp).flat

    if cfg.engine == "exact-dense":
        if p.total_len > cfg.dense_cap:
            raise HypergradError(f"exact-dense refused: {p.total_len} parameters exceeds cap {cfg.dense_cap}")
        H = dense_hessian(F, p, context, cfg.fd_epsilon_scale, cfg.exact_quadratic_hvp)
        try:
            x = np.linalg.solve(H, v.flat)
        except np.linalg.LinAlgError as exc:
            raise HypergradError(f"singular Hessian in exact-dense solve: {exc}") from exc
        return v.like(x)

    if cfg.engine == "neumann":
        alpha = cfg.neumann_alpha
        if alpha is None:
            alpha = _neumann_step(matvec, v.flat)
        info["alpha"] = alpha
        term = v.flat.copy()
        acc = term.copy()
        for _ in range(cfg.neumann_terms - 1):
            term = term - alpha * matvec(term)
            acc += term
        return v.like(alpha * acc)

    # conjugate gradients on H x = v
    b = v.flat
    x = np.zeros_like(b)
    r = b.copy()
    d = r.copy()
    rs = float(r @ r)
    target = cfg.cg_tol * float(np.linalg.norm(b))
    it = 0
    for it in range(1, cfg.cg_iters + 1):
        Hd = matvec(d)
        curv = float(d @ Hd)
        if curv <= 0:
            info["cg_negative_curvature"] = True
            break
        a = rs / curv
        x += a * d
        r -= a * Hd
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= target:
            rs = rs_new
            break
        d = r + (rs_new / rs) * d
        rs = rs_new
    residual = float(np.sqrt(rs))
    info["cg_iters"] = it
    info["cg_residual"] = residual
    if residual > target:
        info["cg_converged"] = False
        logger.warning("cg stopped after %d iterations with residual %.3e (target %.3e)", it, residual, target)
    else:
        info["cg_converged"] = True
    return v.like(x)


def mixed_vjp(
    F: LossFn,
    p: ParamVector,
    context: ParamVector,
    u: ParamVector,
    eps_scale: float = 0.01,
    fast_path: bool = True,
) -> ParamVector:
    """uᵀ ∂²F/∂p∂context, returned in the context's layout."""
    _check_finite(u, "mixed partial input")
    if not np.isfinite(u.norm()):
        raise HypergradError("upstream vector norm overflows in mixed partial")
    if u.norm() == 0.0:
        return context.zeros_like()
    if fast_path and F.terms is not None:
        terms = F.terms
        out = np.array([grad_of(lambda t, i=i: terms(t)[i], p).dot(u) for i in range(context.total_len)])
        return _check_finite(context.like(out), "mixed partial")
    eps = eps_scale / u.norm()
    gp = context_grad(F, p.axpy(eps, u), context)
    gm = context_grad(F, p.axpy(-eps, u), context)
    return _check_finite((gp - gm) * (1.0 / (2.0 * eps)), "mixed partial")


@dataclass
class TrilevelLosses:
    level1: LossFn  # F1(θ, λ)
    level2: LossFn  # F2(ω, θ)
    val: LossFn  # L_val(ω)


@dataclass
class BilevelLosses:
    lower: LossFn  # L_pt(θ, λ) + γ L_tr(θ)
    val: LossFn  # L_val(θ)


@dataclass
class HypergradResult:
    grad: np.ndarray
    stages: dict[str, float] = field(default_factory=dict)
    info: dict = field(default_factory=dict)


def trilevel_losses(problem, lam: np.ndarray, gamma: float, pt_batch, tr_batch, val_batch) -> TrilevelLosses:
    """Bind a problem's three levels to fixed batches."""
    level1 = LossFn(
        lambda th, lm: problem.pretrain_loss(th, lm["lambda"] if lm is not None else lam, pt_batch),
        hessian=lambda ctx: problem.pretrain_hessian(ctx.flat if ctx is not None else lam),
        terms=lambda th: problem.objective_losses(th, pt_batch),
    )
    level2 = LossFn(
        lambda om, th: problem.finetune_loss(om, th, gamma, tr_batch),
        hessian=lambda ctx: problem.finetune_hessian(gamma),
    )
    val = LossFn(lambda om, _ctx: problem.val_loss(om, val_batch))
    return TrilevelLosses(level1, level2, val)


def bilevel_losses(problem, lam: np.ndarray, gamma: float, pt_batch, tr_batch, val_batch) -> BilevelLosses:
    lower = LossFn(
        lambda th, lm: problem.merged_loss(th, lm["lambda"] if lm is not None else lam, gamma, pt_batch, tr_batch),
        hessian=lambda ctx: problem.merged_hessian(ctx.flat if ctx is not None else lam, gamma),
    )
    val = LossFn(lambda th, _ctx: problem.val_loss(th, val_batch))
    return BilevelLosses(lower, val)


def _as_context(lam) -> ParamVector:
    if isinstance(lam, ParamVector):
        return lam
    values = getattr(lam, "values", lam)
    return ParamVector([("lambda", np.asarray(values, dtype=np.float64))])


def trilevel_hypergrad(
    theta: ParamVector,
    omega: ParamVector,
    lam,
    losses: TrilevelLosses,
    cfg: HypergradConfig,
    eta_level1: float | None = None,
    eta_level2: float | None = None,
) -> HypergradResult:
    """dL_val/dλ through the finetuning and pretraining best responses."""
    ctx = _as_context(lam)
    eps = cfg.fd_epsilon_scale
    info: dict = {"level2": {}, "level1": {}}

    v1 = primal_grad(losses.val, omega)
    u2 = ihvp(losses.level2, omega, v1, cfg, context=theta, eta=eta_level2, info=info["level2"])
    v2 = -mixed_vjp(losses.level2, omega, theta, u2, eps, fast_path=False)
    u3 = ihvp(losses.level1, theta, v2, cfg, context=ctx, eta=eta_level1, info=info["level1"])
    g = -mixed_vjp(losses.level1, theta, ctx, u3, eps, fast_path=cfg.level1_fast_path)

    stages = {"v1": v1.norm(), "u2": u2.norm(), "v2": v2.norm(), "u3": u3.norm(), "grad": g.norm()}
    logger.debug("hypergrad stages %s", stages)
    return HypergradResult(g.flat.copy(), stages, info)


def blo_hypergrad(
    theta: ParamVector,
    lam,
    losses: BilevelLosses,
    cfg: HypergradConfig,
    eta: float | None = None,
) -> HypergradResult:
    """dL_val/dλ for the two-level ablation: one implicit step through the merged lower level."""
    ctx = _as_context(lam)
    info: dict = {"lower": {}}
    v1 = primal_grad(losses.val, theta)
    u = ihvp(losses.lower, theta, v1, cfg, context=ctx, eta=eta, info=info["lower"])
    g = -mixed_vjp(losses.lower, theta, ctx, u, cfg.fd_epsilon_scale, fast_path=False)
    stages = {"v1": v1.norm(), "u": u.norm(), "grad": g.norm()}
    logger.debug("blo hypergrad stages %s", stages)
    return HypergradResult(g.flat.copy(), stages, info)
