"""The three loss levels bound to concrete data, shared by the engine and the hypergradient code.

A problem exposes level I (weighted pretraining over θ), level II
(proximal finetuning over ω), level III (validation loss of ω), and the
merged lower level used by the two-level ablation. Batches are opaque to the
engine; each problem samples its own.
"""

from __future__ import annotations

import numpy as np

from . import objectives as O
from . import tensor as T
from .models import BODY, EncoderSpec, ParamVector, encode, head_apply, init_params, split_theta_omega
from .tensor import Tensor


class Problem:
    """Interface; subclasses fill in the losses."""

    n_objectives: int
    objective_names: list[str]
    shared: tuple[str, ...]

    def init(self, seed: int) -> tuple[ParamVector, ParamVector]:
        """θ and ω with identical shared entries."""
        raise NotImplementedError

    def init_merged(self, seed: int) -> ParamVector:
        """Single parameter set for the merged-lower-level ablation."""
        raise NotImplementedError

    def sample(self, level: str, rng: np.random.Generator, size: int | None):
        """A batch for level ``"pt"``, ``"tr"``, ``"val"`` or ``"ts"``; ``size=None`` is the full split."""
        raise NotImplementedError

    def objective_losses(self, theta, batch) -> list[Tensor]:
        raise NotImplementedError

    def train_loss(self, omega, batch) -> Tensor:
        raise NotImplementedError

    def val_loss(self, omega, batch) -> Tensor:
        raise NotImplementedError

    def test_metrics(self, omega: ParamVector) -> dict[str, float]:
        batch = self.sample("ts", None, None)
        return {"test_loss": self.val_loss(omega, batch).item()}

    # composed levels ------------------------------------------------------

    def pretrain_loss(self, theta, lam, batch) -> Tensor:
        return O.weighted_sum(lam, self.objective_losses(theta, batch))

    def finetune_loss(self, omega, theta, gamma: float, batch) -> Tensor:
        if gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {gamma}")
        loss = self.train_loss(omega, batch)
        if gamma == 0:
            return loss
        return T.add(loss, T.scale(O.proximal_reg(omega, theta, self.shared), gamma))

    def merged_loss(self, theta, lam, gamma: float, pt_batch, tr_batch) -> Tensor:
        return T.add(self.pretrain_loss(theta, lam, pt_batch), T.scale(self.train_loss(theta, tr_batch), gamma))

    @property
    def shared_size(self) -> int:
        raise NotImplementedError

    # exact curvature hooks, only for quadratic testbeds --------------------

    def pretrain_hessian(self, lam: np.ndarray) -> np.ndarray | None:
        return None

    def finetune_hessian(self, gamma: float) -> np.ndarray | None:
        return None

    def merged_hessian(self, lam: np.ndarray, gamma: float) -> np.ndarray | None:
        return None


class NeuralProblem(Problem):
    """Encoder with objective heads on a synthetic bundle."""

    def __init__(self, spec: EncoderSpec, objectives: O.ObjectiveSet, bundle: O.DatasetBundle):
        if len(objectives) != spec.n_objectives:
            raise ValueError(f"{len(objectives)} objectives but encoder has {spec.n_objectives} objective heads")
        if bundle.pretrain.shape[1] != spec.input_dim:
            raise ValueError(f"data dim {bundle.pretrain.shape[1]} != encoder input dim {spec.input_dim}")
        self.spec = spec
        self.objectives = objectives
        self.bundle = bundle
        self.task = bundle.task
        self.n_objectives = len(objectives)
        self.objective_names = objectives.names
        self.shared = BODY

    @property
    def shared_size(self) -> int:
        return self.spec.input_dim * self.spec.hidden_dim + self.spec.hidden_dim

    def init(self, seed):
        return split_theta_omega(init_params(self.spec, seed), self.spec)

    def init_merged(self, seed):
        return init_params(self.spec, seed)

    def sample(self, level, rng, size):
        if level == "pt":
            x = self.bundle.pretrain
            if size is not None and size < x.shape[0]:
                x = x[rng.choice(x.shape[0], size=size, replace=False)]
            noise_rng = rng if rng is not None else np.random.default_rng(0)
            return O.PretrainBatch.sample(x, self.objectives, noise_rng)
        split = {"tr": self.bundle.train, "val": self.bundle.val, "ts": self.bundle.test}[level]
        if size is None or size >= split.x.shape[0]:
            return split
        idx = rng.choice(split.x.shape[0], size=size, replace=False)
        return O.LabeledBatch(split.x[idx], split.y[idx])

    def objective_losses(self, theta, batch):
        return O.objective_losses(theta, self.objectives, batch, self.spec)

    def train_loss(self, omega, batch):
        return O.supervised_loss(omega, batch, self.spec, self.task)

    def val_loss(self, omega, batch):
        return O.supervised_loss(omega, batch, self.spec, self.task)

    def test_metrics(self, omega):
        batch = self.bundle.test
        out = {"test_loss": self.val_loss(omega, batch).item()}
        if self.task == "classification":
            logits = head_apply(omega, self.spec.downstream_head, encode(omega, batch.x, self.spec.activation)).data
            out["test_accuracy"] = float(np.mean(logits.argmax(axis=1) == batch.y.astype(int).ravel()))
        return out
