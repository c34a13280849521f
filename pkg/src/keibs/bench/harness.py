"""Macro-replication runner, random-search baseline, metrics and result files."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import __version__
from ..errors import InvalidArgumentError
from ..optimizer import IterationRecord, Problem, RunResult, run_keibs
from ..problems import NoisyProblem, Objective, make_problem, shifted
from .config import ExperimentConfig

__all__ = [
    "derive_seed",
    "build_instance",
    "random_search",
    "RunRecord",
    "MetricsRow",
    "run_experiment",
    "aggregate",
    "emit_outputs",
    "check_output_dir",
    "load_run_json",
    "run_json",
    "RUNS_HEADER",
    "SUMMARY_HEADER",
]

RUNS_HEADER = ("problem", "d", "N", "optimizer", "replication", "estimated_value", "runtime_s", "seed")
SUMMARY_HEADER = ("problem", "d", "N", "optimizer", "aeov", "sd", "mean_runtime_s")


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from the ``repr`` of ``parts``."""
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def build_instance(cfg: ExperimentConfig, replication: int) -> Objective:
    obj = make_problem(cfg.problem, cfg.d, **cfg.problem_params)
    if cfg.shift:
        u = np.random.default_rng(derive_seed(cfg.master_seed, "instance", replication)).uniform(-1, 1, cfg.d)
        obj = shifted(obj, u)
    return obj


def random_search(problem: Problem, N: int, rng: np.random.Generator, seed: int = 0) -> RunResult:
    """Observe ``N`` uniform points once each and return the best observed one."""
    if N < 1:
        raise InvalidArgumentError(f"budget must be >= 1, got {N}")
    best_x, best_y = None, -math.inf
    history = []
    for n in range(N):
        x = rng.uniform(size=problem.dim)
        y = float(problem.sample(x, rng))
        if y > best_y:
            best_x, best_y = x, y
        history.append(IterationRecord(n, tuple(x.tolist()), 0.0, y, best_y, False))
    return RunResult("random_search", tuple(best_x.tolist()), best_y, tuple(history), None, seed, N, N, {})


@dataclass(frozen=True)
class RunRecord:
    problem: str
    d: int
    N: int
    optimizer: str
    replication: int
    estimated_value: float
    runtime_s: float
    seed: int
    result: RunResult

    def csv_row(self) -> list:
        return [self.problem, self.d, self.N, self.optimizer, self.replication,
                _fmt(self.estimated_value), _fmt(self.runtime_s), self.seed]


@dataclass(frozen=True)
class MetricsRow:
    problem: str
    d: int
    N: int
    optimizer: str
    aeov: float
    sd: float
    mean_runtime_s: float
    values: tuple[float, ...]

    def csv_row(self) -> list:
        return [self.problem, self.d, self.N, self.optimizer, _fmt(self.aeov), _fmt(self.sd), _fmt(self.mean_runtime_s)]


def _fmt(v: float) -> str:
    return repr(float(v))


def _true_value(obj: Objective, x, cfg: ExperimentConfig, *key) -> float:
    u = obj.to_user(np.asarray(x))
    if not obj.stochastic:
        return obj.eval(u)
    rng = np.random.default_rng(derive_seed(cfg.master_seed, "truth", *key))
    return float(np.mean([obj.eval(u, rng) for _ in range(cfg.true_value_replications)]))


def _run_one(cfg: ExperimentConfig, N: int, r: int, optimizer: str) -> RunRecord:
    obj = build_instance(cfg, r)
    problem = NoisyProblem(obj, cfg.noise)
    seed = derive_seed(cfg.master_seed, N, r, optimizer)
    t0 = time.perf_counter()
    if optimizer == "keibs":
        res = run_keibs(problem, N, cfg.schedule, seed, kernel=cfg.kernel.build(cfg.d),
                        refine=cfg.refine, final=cfg.final)
    else:
        res = random_search(problem, N, np.random.default_rng(seed), seed)
    runtime = time.perf_counter() - t0 if cfg.record_runtime else math.nan
    value = _true_value(obj, res.x_star, cfg, N, r, optimizer)
    return RunRecord(cfg.problem, cfg.d, N, optimizer, r, value, runtime, seed, res)


def _tasks(cfg: ExperimentConfig) -> list[tuple[int, int, str]]:
    return [(N, r, opt) for N in cfg.budgets for opt in cfg.optimizers for r in range(cfg.replications)]


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> tuple[list[MetricsRow], list[RunRecord]]:
    """Run every (budget, optimizer, replication); results are ordered independently of ``threads``."""
    tasks = _tasks(cfg)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(lambda t: _run_one(cfg, *t), tasks))
    else:
        records = [_run_one(cfg, *t) for t in tasks]
    return aggregate(records), records


def aggregate(records: Sequence[RunRecord]) -> list[MetricsRow]:
    if not records:
        raise InvalidArgumentError("no replications to aggregate")
    groups: dict[tuple, list[RunRecord]] = {}
    for rec in records:
        groups.setdefault((rec.problem, rec.d, rec.N, rec.optimizer), []).append(rec)
    rows = []
    for (problem, d, N, opt), recs in groups.items():
        vals = np.array([r.estimated_value for r in recs])
        sd = float(np.std(vals, ddof=1)) if vals.size > 1 else math.nan
        rows.append(MetricsRow(problem, d, N, opt, float(np.mean(vals)), sd,
                               float(np.mean([r.runtime_s for r in recs])), tuple(vals.tolist())))
    return rows


def check_output_dir(path: str | Path) -> Path:
    """Create ``path`` if needed and prove it is writable, before any computation."""
    path = Path(path)
    try:
        (path / "runs").mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {str(path)!r} is not writable: {exc}") from exc
    return path


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def run_json(rec: RunRecord, cfg: ExperimentConfig) -> str:
    payload = {
        "library_version": __version__,
        "config": cfg.source,
        "problem": rec.problem,
        "d": rec.d,
        "N": rec.N,
        "optimizer": rec.optimizer,
        "replication": rec.replication,
        "seed": rec.seed,
        "estimated_value": rec.estimated_value,
        "runtime_s": rec.runtime_s,
        "result": rec.result.to_dict(),
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def emit_outputs(rows: Sequence[MetricsRow], records: Sequence[RunRecord], cfg: ExperimentConfig,
                 out_dir: str | Path | None = None) -> Path:
    """Write ``runs.csv``, ``summary.csv`` and one JSON file per run under ``runs/``."""
    if not rows or not records:
        raise InvalidArgumentError("nothing to emit: no replications")
    out = check_output_dir(cfg.out_dir if out_dir is None else out_dir)
    (out / "runs.csv").write_text(_csv_text(RUNS_HEADER, [r.csv_row() for r in records]))
    (out / "summary.csv").write_text(_csv_text(SUMMARY_HEADER, [r.csv_row() for r in rows]))
    for rec in records:
        name = f"{rec.problem}_d{rec.d}_N{rec.N}_{rec.optimizer}_r{rec.replication}.json"
        (out / "runs" / name).write_text(run_json(rec, cfg))
    return out


def load_run_json(path: str | Path) -> RunResult:
    return RunResult.from_dict(json.loads(Path(path).read_text())["result"])
