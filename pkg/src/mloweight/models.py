"""Parameter containers and the small encoder/head networks.

A :class:`ParamVector` is an ordered set of named arrays stored in one flat
f64 buffer, so optimizers and hypergradient engines can treat it as a plain
vector. The encoder is a single hidden layer ``act(x W + b)``; every head is a
linear map on the hidden representation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

BODY = ("encoder.weight", "encoder.bias")
ACTIVATIONS = ("tanh", "relu", "linear")


class ParamVector:
    """Named parameter arrays backed by a single flat buffer."""

    __slots__ = ("_names", "_shapes", "_offsets", "flat")

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] = ()):
        names, shapes, chunks = [], [], []
        for name, arr in entries:
            if name in names:
                raise ValueError(f"duplicate parameter name {name!r}")
            arr = np.asarray(arr, dtype=np.float64)
            names.append(name)
            shapes.append(tuple(arr.shape))
            chunks.append(arr.ravel())
        self._names = tuple(names)
        self._shapes = tuple(shapes)
        self._offsets = tuple(np.cumsum([0] + [int(np.prod(s, dtype=int)) for s in shapes]).tolist())
        self.flat = np.concatenate(chunks) if chunks else np.zeros(0)

    @classmethod
    def from_layout(cls, names: Sequence[str], shapes: Sequence[tuple[int, ...]], flat) -> "ParamVector":
        pv = cls.__new__(cls)
        pv._names = tuple(names)
        pv._shapes = tuple(tuple(s) for s in shapes)
        pv._offsets = tuple(np.cumsum([0] + [int(np.prod(s, dtype=int)) for s in pv._shapes]).tolist())
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (pv._offsets[-1],):
            raise ValueError(f"flat buffer has shape {flat.shape}, layout needs ({pv._offsets[-1]},)")
        pv.flat = flat
        return pv

    # layout ---------------------------------------------------------------

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return self._shapes

    @property
    def total_len(self) -> int:
        return self._offsets[-1]

    def __len__(self) -> int:
        return self.total_len

    def __contains__(self, name: str) -> bool:
        return name in self._names

    def slices(self) -> dict[str, tuple[int, int]]:
        return {n: (self._offsets[i], self._offsets[i + 1]) for i, n in enumerate(self._names)}

    def same_layout(self, other: "ParamVector") -> bool:
        return self._names == other._names and self._shapes == other._shapes

    def __getitem__(self, name: str) -> np.ndarray:
        i = self._names.index(name)
        return self.flat[self._offsets[i] : self._offsets[i + 1]].reshape(self._shapes[i])

    @property
    def entries(self) -> list[tuple[str, Tensor]]:
        return [(n, Tensor(self[n])) for n in self._names]

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {n: Tensor(self[n], requires_grad=requires_grad) for n in self._names}

    def like(self, flat) -> "ParamVector":
        return ParamVector.from_layout(self._names, self._shapes, flat)

    def subset(self, names: Sequence[str]) -> "ParamVector":
        return ParamVector((n, self[n].copy()) for n in names)

    def copy(self) -> "ParamVector":
        return self.like(self.flat.copy())

    def zeros_like(self) -> "ParamVector":
        return self.like(np.zeros(self.total_len))

    # algebra ---------------------------------------------------------------

    def _check(self, other: "ParamVector") -> None:
        if not self.same_layout(other):
            raise ValueError("ParamVector layouts differ")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return self.like(self.flat + other.flat)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return self.like(self.flat - other.flat)

    def __mul__(self, c: float) -> "ParamVector":
        return self.like(self.flat * float(c))

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return self.like(-self.flat)

    def axpy(self, a: float, x: "ParamVector") -> "ParamVector":
        """Return ``self + a * x``."""
        self._check(x)
        return self.like(self.flat + float(a) * x.flat)

    def dot(self, other: "ParamVector") -> float:
        self._check(other)
        return float(self.flat @ other.flat)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.same_layout(other) and np.array_equal(self.flat, other.flat)

    def __repr__(self) -> str:
        return f"ParamVector({len(self._names)} entries, total_len={self.total_len})"

    # persistence ------------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "dtype": "float64",
            "byteorder": "little",
            "total_len": self.total_len,
            "entries": [
                {"name": n, "shape": list(s), "offset": self._offsets[i]}
                for i, (n, s) in enumerate(zip(self._names, self._shapes))
            ],
        }

    def save(self, path: str | Path) -> None:
        """Write ``<path>.bin`` (raw little-endian f64) and ``<path>.json``."""
        path = Path(path)
        path.with_suffix(".bin").write_bytes(self.flat.astype("<f8").tobytes())
        path.with_suffix(".json").write_text(json.dumps(self.manifest(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ParamVector":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
        entries = meta["entries"]
        return cls.from_layout([e["name"] for e in entries], [tuple(e["shape"]) for e in entries], flat)


@dataclass(frozen=True)
class EncoderSpec:
    """Shape of the encoder and its heads.

    ``head_dims`` lists one output width per pretraining objective followed by
    the downstream head's width.
    """

    input_dim: int
    hidden_dim: int
    head_dims: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "head_dims", tuple(int(k) for k in self.head_dims))
        if self.input_dim < 1 or self.hidden_dim < 1 or any(k < 1 for k in self.head_dims):
            raise ValueError(f"all dims must be >= 1: {self}")
        if len(self.head_dims) < 2:
            raise ValueError("need at least one objective head plus the downstream head")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def n_objectives(self) -> int:
        return len(self.head_dims) - 1

    @property
    def downstream_head(self) -> int:
        return len(self.head_dims) - 1

    def head_names(self, k: int) -> tuple[str, str]:
        return f"heads.{k}.weight", f"heads.{k}.bias"

    def theta_names(self) -> list[str]:
        names = list(BODY)
        for k in range(self.n_objectives):
            names.extend(self.head_names(k))
        return names

    def omega_names(self) -> list[str]:
        return list(BODY) + list(self.head_names(self.downstream_head))


def init_params(spec: EncoderSpec, seed: int) -> ParamVector:
    """Encoder and all heads; weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    d, h = spec.input_dim, spec.hidden_dim
    entries = [
        ("encoder.weight", rng.uniform(-1, 1, size=(d, h)) / np.sqrt(d)),
        ("encoder.bias", np.zeros(h)),
    ]
    for k, out in enumerate(spec.head_dims):
        w, b = spec.head_names(k)
        entries.append((w, rng.uniform(-1, 1, size=(h, out)) / np.sqrt(h)))
        entries.append((b, np.zeros(out)))
    return ParamVector(entries)


def split_theta_omega(full: ParamVector, spec: EncoderSpec) -> tuple[ParamVector, ParamVector]:
    """θ gets the body and objective heads, ω the body and downstream head."""
    return full.subset(spec.theta_names()), full.subset(spec.omega_names())


def _view(params) -> Mapping[str, Tensor]:
    return params.tensors() if isinstance(params, ParamVector) else params


def encode(params, x, activation: str = "tanh") -> Tensor:
    p = _view(params)
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = p["encoder.weight"]
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("encode", x.shape, w.shape)
    z = T.bias_add(T.matmul(x, w), p["encoder.bias"])
    if activation == "tanh":
        return T.tanh(z)
    if activation == "relu":
        return T.relu(z)
    return z


def head_apply(params, head_index: int, z) -> Tensor:
    p = _view(params)
    w_name, b_name = f"heads.{head_index}.weight", f"heads.{head_index}.bias"
    if head_index < 0 or w_name not in p:
        raise IndexError(f"no head {head_index} in parameter set")
    z = z if isinstance(z, Tensor) else Tensor(z)
    return T.bias_add(T.matmul(z, p[w_name]), p[b_name])
