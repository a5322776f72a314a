"""Weighted pretraining loss, proximal finetuning loss, validation loss, and λ handling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .models import BODY, EncoderSpec, ParamVector, encode, head_apply
from .tensor import Tensor

POLICIES = ("simplex", "clamp-nonneg", "free")

# canonical proximal weights: molecular property suites (classification and
# regression alike) and text understanding suites
GAMMA_MOLECULAR = 0.001
GAMMA_TEXT = 0.005


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum(x) = 1} by the sort-and-threshold rule."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / idx > 0)
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


@dataclass
class TradeoffWeights:
    values: np.ndarray
    policy: str = "simplex"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel().copy()
        if self.policy not in POLICIES:
            raise ValueError(f"lambda policy must be one of {POLICIES}, got {self.policy!r}")

    @classmethod
    def initial(cls, n: int, policy: str = "simplex", init=None) -> "TradeoffWeights":
        """Uniform 1/n under the simplex policy, all ones otherwise, unless ``init`` is given."""
        if init is not None:
            values = np.asarray(init, dtype=np.float64)
            if values.shape != (n,):
                raise ValueError(f"lambda init has length {values.size}, expected {n}")
        elif policy == "simplex":
            values = np.full(n, 1.0 / n)
        else:
            values = np.ones(n)
        return project_lambda(cls(values, policy))

    def __len__(self) -> int:
        return self.values.size

    def as_params(self) -> ParamVector:
        return ParamVector([("lambda", self.values)])

    def satisfies_policy(self, atol: float = 1e-12) -> bool:
        if self.policy == "free":
            return bool(np.all(np.isfinite(self.values)))
        if np.any(self.values < 0):
            return False
        return self.policy != "simplex" or abs(self.values.sum() - 1.0) <= atol


def project_lambda(lam: TradeoffWeights) -> TradeoffWeights:
    if lam.policy == "simplex":
        values = project_simplex(lam.values)
    elif lam.policy == "clamp-nonneg":
        values = np.maximum(lam.values, 0.0)
    else:
        values = lam.values.copy()
    return TradeoffWeights(values, lam.policy)


@dataclass
class Objective:
    """One synthetic pretraining objective.

    A ``projection`` objective regresses head outputs on ``x @ projection.T``,
    passed through ``target_activation`` when that is ``"tanh"``; a ``noise``
    objective regresses them on fresh Gaussian draws, so nothing about it can
    be learned.
    """

    name: str
    head_index: int
    kind: str = "projection"
    projection: np.ndarray | None = None
    out_dim: int = 0
    noise_scale: float = 1.0
    readout: np.ndarray | None = None
    target_activation: str = "linear"

    def __post_init__(self):
        if self.target_activation not in ("linear", "tanh"):
            raise ValueError(f"unknown target activation {self.target_activation!r}")
        if self.kind == "projection":
            if self.projection is None:
                raise ValueError(f"objective {self.name!r} needs a projection matrix")
            self.projection = np.asarray(self.projection, dtype=np.float64)
            self.out_dim = self.projection.shape[0]
        elif self.kind == "noise":
            if self.out_dim < 1:
                raise ValueError(f"noise objective {self.name!r} needs out_dim >= 1")
        else:
            raise ValueError(f"unknown objective kind {self.kind!r}")


@dataclass
class ObjectiveSet:
    objectives: list[Objective]

    @property
    def names(self) -> list[str]:
        return [o.name for o in self.objectives]

    def __len__(self) -> int:
        return len(self.objectives)

    def __iter__(self):
        return iter(self.objectives)


@dataclass
class PretrainBatch:
    """Unlabeled inputs plus the per-objective noise draws made when the batch was sampled."""

    x: np.ndarray
    noise: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def sample(cls, x: np.ndarray, objectives: ObjectiveSet, rng: np.random.Generator) -> "PretrainBatch":
        noise = {
            i: rng.normal(0.0, o.noise_scale, size=(x.shape[0], o.out_dim))
            for i, o in enumerate(objectives)
            if o.kind == "noise"
        }
        return cls(x, noise)


@dataclass
class LabeledBatch:
    x: np.ndarray
    y: np.ndarray


@dataclass
class DatasetBundle:
    pretrain: np.ndarray
    train: LabeledBatch
    val: LabeledBatch
    test: LabeledBatch
    task: str = "regression"


def objective_losses(theta, objectives: ObjectiveSet, batch: PretrainBatch, spec: EncoderSpec) -> list[Tensor]:
    """Per-objective losses L_i(θ) on one pretraining batch."""
    z = encode(theta, batch.x, spec.activation)
    out = []
    for i, obj in enumerate(objectives):
        if obj.readout is not None:
            pred = T.matmul(z, obj.readout)
        else:
            pred = head_apply(theta, obj.head_index, z)
        if obj.kind == "projection":
            target = batch.x @ obj.projection.T
            if obj.target_activation == "tanh":
                target = np.tanh(target)
        else:
            target = batch.noise[i]
        out.append(T.mean(T.square(T.sub(pred, target))))
    return out


def weighted_sum(lam, losses: Sequence[Tensor]) -> Tensor:
    if isinstance(lam, TradeoffWeights):
        lam = Tensor(lam.values)
    elif not isinstance(lam, Tensor):
        lam = Tensor(lam)
    if lam.data.ndim != 1 or lam.shape[0] != len(losses):
        raise ValueError(f"lambda has length {lam.data.size} but there are {len(losses)} objectives")
    return T.sum(T.mul(lam, T.stack(losses)))


def pretrain_loss(theta, lam, batch: PretrainBatch, objectives: ObjectiveSet, spec: EncoderSpec) -> Tensor:
    """Σ_i λ_i L_i(θ); ``lam`` may be a Tensor when its gradient is wanted."""
    n = lam.data.size if isinstance(lam, Tensor) else len(np.ravel(getattr(lam, "values", lam)))
    if n != len(objectives):
        raise ValueError(f"lambda has length {n} but there are {len(objectives)} objectives")
    return weighted_sum(lam, objective_losses(theta, objectives, batch, spec))


def shared_names(omega, theta) -> list[str]:
    return [n for n in omega if n in theta]


def proximal_reg(omega, theta, names: Sequence[str] | None = None) -> Tensor:
    """Mean squared difference between ω and θ over their shared entries."""
    om = omega.tensors() if isinstance(omega, ParamVector) else omega
    th = theta.tensors() if isinstance(theta, ParamVector) else theta
    names = list(names) if names is not None else shared_names(om, th)
    if not names:
        raise ValueError("omega and theta share no parameters")
    total = None
    count = 0
    for n in names:
        if n not in om or n not in th or om[n].shape != th[n].shape:
            a = om[n].shape if n in om else None
            b = th[n].shape if n in th else None
            raise ValueError(f"proximal layout mismatch at {n!r}: {a} vs {b}")
        term = T.sum(T.square(T.sub(om[n], th[n])))
        total = term if total is None else T.add(total, term)
        count += om[n].size
    return T.scale(total, 1.0 / count)


def supervised_loss(params, batch: LabeledBatch, spec: EncoderSpec, task: str) -> Tensor:
    """MSE for regression, mean softmax cross-entropy for classification."""
    z = encode(params, batch.x, spec.activation)
    out = head_apply(params, spec.downstream_head, z)
    if task == "regression":
        return T.mean(T.square(T.sub(out, batch.y.reshape(out.shape))))
    if task == "classification":
        labels = batch.y.astype(int).ravel()
        onehot = np.zeros(out.shape)
        onehot[np.arange(labels.size), labels] = 1.0
        logp = T.log(T.softmax(out))
        return T.scale(T.sum(T.mul(logp, onehot)), -1.0 / max(labels.size, 1))
    raise ValueError(f"unknown task kind {task!r}")


def finetune_loss(omega, theta, gamma: float, batch: LabeledBatch, spec: EncoderSpec, task: str) -> Tensor:
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    loss = supervised_loss(omega, batch, spec, task)
    if gamma == 0:
        return loss
    return T.add(loss, T.scale(proximal_reg(omega, theta, BODY), gamma))


def val_loss(omega, batch: LabeledBatch, spec: EncoderSpec, task: str) -> Tensor:
    return supervised_loss(omega, batch, spec, task)


def as_mapping(params) -> Mapping[str, Tensor]:
    return params.tensors() if isinstance(params, ParamVector) else params
