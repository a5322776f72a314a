"""Run configuration files: TOML tables with documented defaults, strict keys, and overrides.

A run file has these tables (all optional except where noted)::

    out_dir = "runs/example"        # required for ``run``
    plot = false                    # also write plot.svg after a run

    [engine]     mode
    [mlo]        steps, unroll, gamma, blo_gamma, lambda_policy, lambda_init,
                 warmup_steps, pretrain_steps, seed
    [level1]     optimizer, lr, momentum, beta1, beta2, eps,
    [level2]     decay_steps, decay_factor, batch_size
    [level3]
    [hypergrad]  engine, neumann_terms, neumann_alpha, cg_iters, cg_tol,
                 fd_epsilon_scale, darts_eta, dense_cap,
                 exact_quadratic_hvp, level1_fast_path
    [problem]    kind = "synthetic" | "quadratic"
    [encoder]    input_dim, hidden_dim, activation        (synthetic)
    [task]       the remaining SyntheticTapTask fields     (synthetic)
    [quadratic]  preset = "canonical" | "custom", centers, target,
                 val_target, curvatures                    (quadratic)
    [oracle]     threshold, delta, tol, lambda

Missing keys take the defaults below. The fully resolved dictionary
(:func:`effective_dict`) is what gets echoed into run.json, and parsing it
again gives back an identical configuration.
"""

from __future__ import annotations

import copy
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python 3.10
    import tomli

from .engine import MODES, LevelConfig, MloConfig
from .hypergrad import HypergradConfig
from .testbed import QuadraticInstance, QuadraticProblem, SyntheticTapTask, build_problem, canonical_instance

PROBLEM_KINDS = ("synthetic", "quadratic")
QUADRATIC_PRESETS = ("canonical", "custom")
ENCODER_KEYS = ("input_dim", "hidden_dim", "activation")


class ConfigError(ValueError):
    """Bad configuration; ``key`` and ``line`` locate the offending entry when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where = f"{key}"
            if line is not None:
                where += f" (line {line})"
            where += ": "
        super().__init__(where + message)
        self.key = key
        self.line = line


@dataclass
class OracleSettings:
    threshold: float = 0.9
    delta: float = 1e-4
    tol: float = 1e-10
    # λ at which to compare; None means the policy's initial λ
    lam: list[float] | None = None


@dataclass
class QuadraticSettings:
    preset: str = "canonical"
    centers: list | None = None
    target: list | None = None
    val_target: list | None = None
    curvatures: list | None = None

    def instance(self, gamma: float) -> QuadraticInstance:
        if self.preset == "canonical":
            v = (1.0, 0.0) if self.val_target is None else self.val_target
            return canonical_instance(v, gamma)
        if self.centers is None or self.target is None or self.val_target is None:
            raise ConfigError("custom preset needs centers, target and val_target", "quadratic")
        return QuadraticInstance(self.centers, self.target, self.val_target, gamma, self.curvatures)


@dataclass
class RunConfig:
    mlo: MloConfig = field(default_factory=MloConfig)
    kind: str = "synthetic"
    task: SyntheticTapTask = field(default_factory=SyntheticTapTask)
    quadratic: QuadraticSettings = field(default_factory=QuadraticSettings)
    oracle: OracleSettings = field(default_factory=OracleSettings)
    out_dir: str | None = None
    plot: bool = False

    def build_problem(self):
        if self.kind == "quadratic":
            return QuadraticProblem(self.quadratic.instance(self.mlo.gamma))
        return build_problem(self.task, self.mlo.seed)


# ---------------------------------------------------------------------------
# schema: table -> key -> default


def _defaults(obj, skip: Iterable[str] = ()) -> dict[str, Any]:
    out = {f.name: copy.deepcopy(getattr(obj, f.name)) for f in fields(obj) if f.name not in skip}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


_LEVEL_DEFAULTS = {f"level{i}": _defaults(getattr(MloConfig(), f"level{i}")) for i in (1, 2, 3)}
_MLO_DEFAULTS = _defaults(MloConfig(), skip=("mode", "level1", "level2", "level3", "hypergrad"))
_TASK_DEFAULTS = _defaults(SyntheticTapTask())

SCHEMA: dict[str, dict[str, Any]] = {
    "engine": {"mode": MloConfig().mode},
    "mlo": _MLO_DEFAULTS,
    **_LEVEL_DEFAULTS,
    "hypergrad": _defaults(HypergradConfig()),
    "problem": {"kind": "synthetic"},
    "encoder": {k: _TASK_DEFAULTS[k] for k in ENCODER_KEYS},
    "task": {k: v for k, v in _TASK_DEFAULTS.items() if k not in ENCODER_KEYS},
    "quadratic": _defaults(QuadraticSettings()),
    "oracle": {"threshold": 0.9, "delta": 1e-4, "tol": 1e-10, "lambda": None},
}
ROOT_KEYS = {"out_dir": None, "plot": False}

# keys whose value may be absent (None) rather than of the default's type
_OPTIONAL = {
    ("mlo", "lambda_init"), ("mlo", "pretrain_steps"), ("mlo", "blo_gamma"), ("hypergrad", "neumann_alpha"),
    ("hypergrad", "darts_eta"), ("oracle", "lambda"), ("quadratic", "centers"), ("quadratic", "target"),
    ("quadratic", "val_target"), ("quadratic", "curvatures"), ("level1", "batch_size"),
    ("level2", "batch_size"), ("level3", "batch_size"), ("", "out_dir"),
}
_FLOAT_KEYS = {
    ("mlo", "gamma"), ("mlo", "blo_gamma"), ("hypergrad", "neumann_alpha"), ("hypergrad", "cg_tol"), ("hypergrad", "fd_epsilon_scale"),
    ("hypergrad", "darts_eta"), ("task", "label_noise"), ("task", "overlap"), ("task", "noise_scale"),
    ("task", "noise_readout_scale"), ("oracle", "threshold"), ("oracle", "delta"), ("oracle", "tol"),
    *((f"level{i}", k) for i in (1, 2, 3) for k in ("lr", "momentum", "beta1", "beta2", "eps", "decay_factor")),
}
_INT_LIST_KEYS = {("task", "noise_objectives"), *((f"level{i}", "decay_steps") for i in (1, 2, 3))}
_FLOAT_LIST_KEYS = {("mlo", "lambda_init"), ("oracle", "lambda")}


def _check_type(table: str, key: str, value, line: int | None):
    name = f"{table}.{key}" if table else key
    if value is None:
        if (table, key) in _OPTIONAL:
            return None
        raise ConfigError("value may not be empty", name, line)
    default = SCHEMA[table][key] if table else ROOT_KEYS[key]
    if (table, key) in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", name, line)
        return float(value)
    if (table, key) in _INT_LIST_KEYS or (table, key) in _FLOAT_LIST_KEYS:
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"expected a list of numbers, got {value!r}", name, line)
        if (table, key) in _INT_LIST_KEYS:
            if any(float(v) != int(v) for v in value):
                raise ConfigError(f"expected a list of integers, got {value!r}", name, line)
            return [int(v) for v in value]
        return [float(v) for v in value]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true or false, got {value!r}", name, line)
        return value
    if isinstance(default, int) or (table, key) in {(f"level{i}", "batch_size") for i in (1, 2, 3)}:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", name, line)
        return value
    if isinstance(default, str) or (table, key) == ("", "out_dir"):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", name, line)
        return value
    return value


# ---------------------------------------------------------------------------
# locating keys in source text


_HEADER = re.compile(r"^\s*\[{1,2}\s*([A-Za-z0-9_.\-]+)\s*\]{1,2}\s*(#.*)?$")


def locate(text: str | None, table: str, key: str | None = None) -> int | None:
    """1-based line of ``key`` inside ``[table]`` (or of the header itself), else None."""
    if not text:
        return None
    current = ""
    for no, raw in enumerate(text.splitlines(), 1):
        m = _HEADER.match(raw)
        if m:
            current = m.group(1)
            if key is None and current == table:
                return no
            continue
        if key is None:
            continue
        stripped = raw.strip()
        if current == table and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return no
        if current == "" and re.match(rf"^{re.escape(table)}\.{re.escape(key)}\s*=", stripped):
            return no
    return None


# ---------------------------------------------------------------------------
# parsing


def parse_value(text: str):
    """A ``--set`` value: any TOML literal, or a bare string when it is not one."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(doc: dict, overrides: Iterable[str]) -> dict:
    """Apply ``table.key=value`` (or root ``key=value``) strings to a raw document."""
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError("override must look like key=value", f"--set {item}")
        path, raw = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) == 1:
            if parts[0] not in ROOT_KEYS:
                raise ConfigError("unknown key", f"--set {path}")
            doc[parts[0]] = parse_value(raw.strip())
            continue
        if len(parts) != 2:
            raise ConfigError("expected table.key", f"--set {path}")
        table, key = parts
        if table not in SCHEMA:
            raise ConfigError("unknown table", f"--set {path}")
        if key not in SCHEMA[table]:
            raise ConfigError("unknown key", f"--set {path}")
        doc.setdefault(table, {})[key] = parse_value(raw.strip())
    return doc


def resolve(doc: dict, text: str | None = None, extra_root: Iterable[str] = (), overridden: Iterable[str] = ()) -> dict:
    """Check keys and types and fill defaults; returns the effective nested dict."""
    overridden = set(overridden)
    out: dict[str, Any] = {k: copy.deepcopy(v) for k, v in ROOT_KEYS.items()}
    for table, defaults in SCHEMA.items():
        out[table] = copy.deepcopy(defaults)
    for name, value in doc.items():
        if name in extra_root:
            continue
        if name in ROOT_KEYS:
            out[name] = _check_type("", name, value, locate(text, "", name) or _root_line(text, name))
            continue
        if name not in SCHEMA:
            raise ConfigError("unknown key", name, locate(text, name) or _root_line(text, name))
        if not isinstance(value, dict):
            raise ConfigError("expected a table", name, _root_line(text, name))
        for key, v in value.items():
            line = locate(text, name, key)
            if key not in SCHEMA[name]:
                raise ConfigError("unknown key", f"{name}.{key}", line)
            try:
                out[name][key] = _check_type(name, key, v, line)
            except ConfigError as exc:
                if f"{name}.{key}" in overridden:
                    raise ConfigError(str(exc).split(": ", 1)[1], f"--set {name}.{key}") from exc
                raise
    return out


def _root_line(text: str | None, key: str) -> int | None:
    if not text:
        return None
    for no, raw in enumerate(text.splitlines(), 1):
        if _HEADER.match(raw):
            return None
        if re.match(rf"^\s*{re.escape(key)}\s*=", raw):
            return no
    return None


def build(eff: dict, text: str | None = None, overridden: Iterable[str] = ()) -> RunConfig:
    """Typed configuration from an effective dict; semantic errors become ConfigError.

    Keys listed in ``overridden`` came from ``--set`` and are reported as such.
    """
    overridden = set(overridden)

    def err(exc, table, key=None):
        name = f"{table}.{key}" if key else table
        if name in overridden:
            return ConfigError(str(exc), f"--set {name}")
        return ConfigError(str(exc), name, locate(text, table, key))

    mlo_kw = dict(eff["mlo"])
    try:
        levels = {f"level{i}": LevelConfig(**eff[f"level{i}"]) for i in (1, 2, 3)}
    except TypeError as exc:
        raise err(exc, "level1") from exc
    try:
        hyper = HypergradConfig(**eff["hypergrad"])
    except ValueError as exc:
        key = str(exc).split(" ")[0].removeprefix("hypergrad.")
        raise err(exc, "hypergrad", key if key in SCHEMA["hypergrad"] else None) from exc
    mlo = MloConfig(mode=eff["engine"]["mode"], hypergrad=hyper, **levels, **mlo_kw)
    try:
        mlo.validate()
    except ValueError as exc:
        msg = str(exc)
        table, key = "mlo", msg.split(" ")[0]
        if key == "mode":
            table = "engine"
        elif "." in key:
            table, key = key.split(".", 1)
        raise err(exc, table, key if key in SCHEMA.get(table, {}) else None) from exc

    kind = eff["problem"]["kind"]
    if kind not in PROBLEM_KINDS:
        raise err(f"must be one of {PROBLEM_KINDS}, got {kind!r}", "problem", "kind")
    task_kw = {**eff["encoder"], **eff["task"]}
    task_kw["noise_objectives"] = tuple(task_kw["noise_objectives"])
    try:
        task = SyntheticTapTask(**task_kw)
    except ValueError as exc:
        raise err(exc, "task") from exc
    quad = QuadraticSettings(**eff["quadratic"])
    if quad.preset not in QUADRATIC_PRESETS:
        raise err(f"must be one of {QUADRATIC_PRESETS}, got {quad.preset!r}", "quadratic", "preset")
    o = eff["oracle"]
    oracle = OracleSettings(o["threshold"], o["delta"], o["tol"], o["lambda"])
    if oracle.delta <= 0:
        raise err("must be > 0", "oracle", "delta")
    if oracle.tol <= 0:
        raise err("must be > 0", "oracle", "tol")
    cfg = RunConfig(mlo, kind, task, quad, oracle, eff["out_dir"], eff["plot"])
    if kind == "quadratic":
        try:
            cfg.quadratic.instance(mlo.gamma)
        except ValueError as exc:
            raise err(exc, "quadratic") from exc
    return cfg


def loads(text: str, overrides: Iterable[str] = (), seed: int | None = None) -> tuple[RunConfig, dict]:
    """Parse TOML text; returns the typed config and its effective dict."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", "<document>", int(m.group(1)) if m else None) from exc
    return from_document(doc, text, overrides, seed)


def from_document(doc: dict, text: str | None = None, overrides: Iterable[str] = (), seed: int | None = None,
                  extra_root: Iterable[str] = ()) -> tuple[RunConfig, dict]:
    overrides = list(overrides)
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc.setdefault("mlo", {})["seed"] = int(seed)
    keys = [o.split("=", 1)[0].strip() for o in overrides]
    eff = resolve(doc, text, extra_root, keys)
    return build(eff, text, keys), eff


def load(path: str | Path, overrides: Iterable[str] = (), seed: int | None = None) -> tuple[RunConfig, dict]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    return loads(text, overrides, seed)


def effective_dict(cfg: RunConfig) -> dict:
    """The nested dict that :func:`from_document` maps back to ``cfg``."""
    m = cfg.mlo
    mlo_keys = SCHEMA["mlo"].keys()
    task = asdict(cfg.task)
    task["noise_objectives"] = list(cfg.task.noise_objectives)
    out = {
        "out_dir": cfg.out_dir,
        "plot": cfg.plot,
        "engine": {"mode": m.mode},
        "mlo": {k: copy.deepcopy(getattr(m, k)) for k in mlo_keys},
        **{f"level{i}": asdict(getattr(m, f"level{i}")) for i in (1, 2, 3)},
        "hypergrad": asdict(m.hypergrad),
        "problem": {"kind": cfg.kind},
        "encoder": {k: task[k] for k in ENCODER_KEYS},
        "task": {k: task[k] for k in SCHEMA["task"]},
        "quadratic": asdict(cfg.quadratic),
        "oracle": {"threshold": cfg.oracle.threshold, "delta": cfg.oracle.delta, "tol": cfg.oracle.tol,
                   "lambda": cfg.oracle.lam},
    }
    return out


# ---------------------------------------------------------------------------
# suite files

SUITE_ROOT_KEYS = ("seeds", "modes", "tasks")


@dataclass
class SuiteConfig:
    """A base run configuration plus the (task, seed, mode) grid to sweep.

    Suite files are run files with three more root keys: ``seeds`` (list of
    integers), ``modes`` (list of engine modes) and a ``[[tasks]]`` array
    whose entries hold a ``name`` plus any ``[task]``/``[encoder]`` keys that
    differ from the base.
    """

    base: RunConfig
    base_eff: dict
    seeds: list[int]
    modes: list[str]
    tasks: list[tuple[str, dict]]  # name and the effective task/encoder tables

    def run_eff(self, task_index: int, seed: int, mode: str, out_dir: str | None) -> dict:
        eff = copy.deepcopy(self.base_eff)
        name, tables = self.tasks[task_index]
        eff["encoder"], eff["task"] = copy.deepcopy(tables["encoder"]), copy.deepcopy(tables["task"])
        eff["mlo"]["seed"] = int(seed)
        eff["engine"]["mode"] = mode
        eff["out_dir"] = out_dir
        return eff


def loads_suite(text: str, overrides: Iterable[str] = (), seed: int | None = None) -> SuiteConfig:
    """Parse a suite file; ``seed`` shifts every listed seed by that offset."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", "<document>", int(m.group(1)) if m else None) from exc
    base, eff = from_document(doc, text, overrides, None, extra_root=SUITE_ROOT_KEYS)
    if eff["problem"]["kind"] != "synthetic":
        raise ConfigError("suites run synthetic tasks only", "problem.kind", locate(text, "problem", "kind"))

    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or any(isinstance(v, bool) or not isinstance(v, int) for v in seeds):
        raise ConfigError("expected a non-empty list of integers", "seeds", _root_line(text, "seeds"))
    if seed is not None:
        seeds = [int(seed) + s for s in seeds]
    modes = doc.get("modes", ["trilevel"])
    if not isinstance(modes, list) or not modes or any(m not in MODES for m in modes):
        raise ConfigError(f"expected a non-empty list drawn from {MODES}", "modes", _root_line(text, "modes"))

    raw_tasks = doc.get("tasks")
    if not isinstance(raw_tasks, list) or not raw_tasks:
        raise ConfigError("a suite needs at least one [[tasks]] entry", "tasks", _root_line(text, "tasks"))
    tasks = []
    names = set()
    for i, entry in enumerate(raw_tasks):
        if not isinstance(entry, dict):
            raise ConfigError("expected a table", f"tasks[{i}]")
        name = entry.get("name", f"task{i}")
        if not isinstance(name, str) or not name or name in names or "/" in name:
            raise ConfigError(f"task names must be unique, non-empty, without '/': {name!r}", f"tasks[{i}].name")
        names.add(name)
        sub = {"encoder": {}, "task": {}}
        for key, value in entry.items():
            if key == "name":
                continue
            table = "encoder" if key in SCHEMA["encoder"] else "task" if key in SCHEMA["task"] else None
            if table is None:
                raise ConfigError("unknown key", f"tasks[{i}].{key}", locate(text, "tasks", key))
            sub[table][key] = value
        doc_i = {"encoder": {**doc.get("encoder", {}), **sub["encoder"]},
                 "task": {**doc.get("task", {}), **sub["task"], "name": name}}
        eff_i = resolve(apply_overrides(doc_i, [o for o in overrides if o.split("=", 1)[0].split(".")[0] in ("encoder", "task")]))
        task_kw = {**eff_i["encoder"], **eff_i["task"]}
        task_kw["noise_objectives"] = tuple(task_kw["noise_objectives"])
        try:
            SyntheticTapTask(**task_kw)
        except ValueError as exc:
            raise ConfigError(str(exc), f"tasks[{i}]") from exc
        tasks.append((name, {"encoder": eff_i["encoder"], "task": eff_i["task"]}))
    return SuiteConfig(base, eff, [int(s) for s in seeds], list(modes), tasks)


def load_suite(path: str | Path, overrides: Iterable[str] = (), seed: int | None = None) -> SuiteConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    return loads_suite(text, overrides, seed)
