"""Experiment configuration: a TOML file validated into an :class:`ExperimentConfig`.

Every validation failure is collected (not just the first) and reported with
its dotted field path.
"""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..errors import ConfigError, InvalidArgumentError
from ..kernel import BrownianFieldParams, TensorMarkovKernel, bf_kernel, laplace_kernel
from ..optimizer import Schedule
from ..problems import REGISTRY, SHIFTABLE, NoiseModel

__all__ = ["ExperimentConfig", "KernelChoice", "load_config", "parse_config", "OPTIMIZERS"]

OPTIMIZERS = ("keibs", "random_search")

_SECTIONS = {
    "master_seed": None,
    "problem": {"name", "d", "shift", "params"},
    "noise": {"kind", "param"},
    "experiment": {"budgets", "replications", "optimizers", "true_value_replications"},
    "schedule": {"smoothness", "sigma", "c_lambda", "c_delta", "lambda", "delta", "cap"},
    "kernel": {"name", "theta", "gamma"},
    "keibs": {"refine", "final"},
    "output": {"dir", "record_runtime"},
}


@dataclass(frozen=True)
class KernelChoice:
    name: str = "bf"
    theta: float = 1.0
    gamma: float = 1.0

    def build(self, d: int) -> TensorMarkovKernel | None:
        """``None`` means the default Brownian-field kernel, whose engines are cached."""
        if self.name == "bf":
            if self.theta == 1.0 and self.gamma == 1.0:
                return None
            return bf_kernel(BrownianFieldParams((self.theta,) * d, (self.gamma,) * d))
        return laplace_kernel(self.theta, d)


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    d: int
    budgets: tuple[int, ...]
    replications: int
    master_seed: int
    optimizers: tuple[str, ...] = ("keibs",)
    problem_params: dict = field(default_factory=dict)
    shift: bool = False
    noise: NoiseModel = NoiseModel()
    schedule: Schedule = Schedule(cap=1.0)
    kernel: KernelChoice = KernelChoice()
    refine: bool = False
    final: str = "design"
    true_value_replications: int = 100
    out_dir: str = "results"
    record_runtime: bool = False
    source: dict = field(default_factory=dict, compare=False)

    def raw_schedules(self) -> "ExperimentConfig":
        """The same experiment with the schedule caps removed."""
        return replace(self, schedule=replace(self.schedule, cap=None))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file {str(path)!r} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: invalid TOML: {exc}") from None
    return parse_config(data)


def _get(section: dict, key: str, default: Any = None) -> Any:
    return section.get(key, default) if isinstance(section, dict) else default


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def parse_config(data: dict) -> ExperimentConfig:
    errs: list[str] = []
    source = copy.deepcopy(data)

    for key, value in data.items():
        if key not in _SECTIONS:
            errs.append(f"{key}: unknown key")
            continue
        allowed = _SECTIONS[key]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            errs.append(f"{key}: must be a table")
            continue
        for sub in value:
            if sub not in allowed:
                errs.append(f"{key}.{sub}: unknown key")

    seed = data.get("master_seed")
    if not _is_int(seed) or seed < 0:
        errs.append("master_seed: required non-negative integer")

    prob = data.get("problem", {})
    name = _get(prob, "name")
    if name not in REGISTRY:
        errs.append(f"problem.name: must be one of {sorted(REGISTRY)}, got {name!r}")
    d = _get(prob, "d")
    if not _is_int(d) or d < 1:
        errs.append("problem.d: required positive integer")
    shift = _get(prob, "shift", False)
    if not isinstance(shift, bool):
        errs.append("problem.shift: must be a boolean")
    elif shift and name in REGISTRY and name not in SHIFTABLE:
        errs.append(f"problem.shift: only supported for {list(SHIFTABLE)}")
    params = _get(prob, "params", {})
    if not isinstance(params, dict):
        errs.append("problem.params: must be a table")
        params = {}

    exp = data.get("experiment", {})
    budgets = _get(exp, "budgets")
    if not isinstance(budgets, list) or not budgets or not all(_is_int(b) and b >= 1 for b in budgets):
        errs.append("experiment.budgets: required non-empty list of positive integers")
        budgets = []
    elif any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        errs.append("experiment.budgets: must be strictly increasing")
    reps = _get(exp, "replications")
    if not _is_int(reps) or reps < 1:
        errs.append("experiment.replications: required integer >= 1")
    opts = _get(exp, "optimizers", ["keibs"])
    if isinstance(opts, str):
        opts = [opts]
    if not isinstance(opts, list) or not opts or any(o not in OPTIMIZERS for o in opts):
        errs.append(f"experiment.optimizers: entries must be among {list(OPTIMIZERS)}")
        opts = []
    elif len(set(opts)) != len(opts):
        errs.append("experiment.optimizers: duplicate entries")
    true_reps = _get(exp, "true_value_replications", 100)
    if not _is_int(true_reps) or true_reps < 1:
        errs.append("experiment.true_value_replications: must be an integer >= 1")

    noise = NoiseModel()
    ns = data.get("noise", {})
    try:
        noise = NoiseModel(_get(ns, "kind", "none"), float(_get(ns, "param", 0.0)))
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        errs.append(f"noise: {exc}")

    sched = Schedule(cap=1.0)
    sc = data.get("schedule", {})
    try:
        cap = _get(sc, "cap", 1.0)
        sched = Schedule(
            smoothness=_get(sc, "smoothness", 1),
            sigma=float(_get(sc, "sigma", 0.0)),
            c_lambda=float(_get(sc, "c_lambda", 1.0)),
            c_delta=float(_get(sc, "c_delta", 1.0)),
            lam=None if _get(sc, "lambda") is None else float(_get(sc, "lambda")),
            delta=None if _get(sc, "delta") is None else float(_get(sc, "delta")),
            cap=None if cap is False else float(cap),
        )
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        errs.append(f"schedule: {exc}")

    kernel = KernelChoice()
    kn = data.get("kernel", {})
    kname = _get(kn, "name", "bf")
    theta, gamma = _get(kn, "theta", 1.0), _get(kn, "gamma", 1.0)
    if kname not in ("bf", "laplace"):
        errs.append(f"kernel.name: must be 'bf' or 'laplace', got {kname!r}")
    elif not (_is_num(theta) and theta > 0 and _is_num(gamma) and gamma > 0):
        errs.append("kernel.theta, kernel.gamma: must be positive numbers")
    else:
        kernel = KernelChoice(kname, float(theta), float(gamma))

    kb = data.get("keibs", {})
    refine = _get(kb, "refine", False)
    if not isinstance(refine, bool):
        errs.append("keibs.refine: must be a boolean")
    final = _get(kb, "final", "design")
    if final not in ("design", "candidates"):
        errs.append("keibs.final: must be 'design' or 'candidates'")

    out = data.get("output", {})
    out_dir = _get(out, "dir", "results")
    if not isinstance(out_dir, str) or not out_dir:
        errs.append("output.dir: must be a non-empty string")
    record_runtime = _get(out, "record_runtime", False)
    if not isinstance(record_runtime, bool):
        errs.append("output.record_runtime: must be a boolean")

    if not errs:
        try:
            REGISTRY[name](d, **params)
        except (InvalidArgumentError, TypeError, ValueError) as exc:
            errs.append(f"problem.params: {exc}")
    if errs:
        raise ConfigError(errs)
    return ExperimentConfig(
        problem=name,
        d=d,
        budgets=tuple(budgets),
        replications=reps,
        master_seed=seed,
        optimizers=tuple(opts),
        problem_params=dict(params),
        shift=shift,
        noise=noise,
        schedule=sched,
        kernel=kernel,
        refine=refine,
        final=final,
        true_value_replications=true_reps,
        out_dir=out_dir,
        record_runtime=record_runtime,
        source=source,
    )
