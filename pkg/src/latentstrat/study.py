"""Replication study harness: generate, fit, summarize, aggregate.

Each replication owns a seed derived from (master seed, cell index,
replication index), so any scheduling of the work produces identical results.
Failed replications (sampler errors) are retained in the report as failures;
a cell where every replication fails raises.

Parameter estimates are posterior means; intervals are the central 95%
credible intervals; a replication "converged" when every parameter's split
R-hat is below 1.1. Aggregation pools estimate-truth pairs across parameter
instances and replications within each (cell, parameter class).
"""
from __future__ import annotations

import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import summarize
from .errors import SamplerError, ValidationError
from .posterior import Posterior, PriorConfig
from .sampler import SamplerConfig, fit
from .simgen import ScenarioConfig, generate_dataset
from .measurement import ItemKind

RHAT_THRESHOLD = 1.1

PARAMETER_CLASSES = (
    "tau0", "tau1", "omega", "beta", "gamma", "a", "d", "eta_treated", "eta_control",
)


@dataclass(frozen=True)
class StudyDesign:
    cells: tuple[ScenarioConfig, ...]
    replications: int
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if not self.cells:
            raise ValidationError("a study needs at least one cell")
        if self.replications < 1:
            raise ValidationError("replications must be at least 1")

    def cell_names(self) -> list[str]:
        base = [f"{c.kind.value}-N{c.n_subjects}-J{c.n_items}" for c in self.cells]
        names = []
        for i, b in enumerate(base):
            names.append(f"{b}#{i + 1}" if base.count(b) > 1 else b)
        return names


@dataclass(frozen=True)
class ReplicationRecord:
    """Audit row for one replication: seeds, convergence flags, failure state."""

    cell: str
    cell_index: int
    replication: int
    data_seed: int
    sampler_seed: int
    failed: bool
    error: str
    converged: bool
    rhat_max: float
    divergence_flagged: bool


@dataclass(frozen=True)
class ReportRow:
    cell: str
    param_class: str
    bias: float
    rmse: float
    coverage: float
    convergence_rate: float
    n_estimates: int
    n_replications: int
    n_failed: int


@dataclass(frozen=True)
class StudyReport:
    rows: tuple[ReportRow, ...]
    replications: tuple[ReplicationRecord, ...]

    def row(self, cell: str, param_class: str) -> ReportRow:
        for r in self.rows:
            if r.cell == cell and r.param_class == param_class:
                return r
        raise ValidationError(f"no report row for ({cell!r}, {param_class!r})")

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("cell,param_class,bias,rmse,coverage,convergence_rate,"
                  "n_estimates,n_replications,n_failed\r\n")
        for r in self.rows:
            out.write(
                f"{r.cell},{r.param_class},{r.bias!r},{r.rmse!r},{r.coverage!r},"
                f"{r.convergence_rate!r},{r.n_estimates},{r.n_replications},{r.n_failed}\r\n"
            )
        return out.getvalue()

    def to_text(self) -> str:
        headers = ("cell", "class", "bias", "rmse", "coverage", "conv.rate", "n")
        def signed(x: float) -> str:
            return f"{x:+.4f}" if math.isfinite(x) else "nan"

        rows = [
            (r.cell, r.param_class, signed(r.bias), f"{r.rmse:.4f}",
             f"{r.coverage:.3f}", f"{r.convergence_rate:.3f}", str(r.n_estimates))
            for r in self.rows
        ]
        widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
        lines = [
            "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
            "  ".join("-" * w for w in widths),
        ]
        lines += ["  ".join(c.ljust(widths[i]) for i, c in enumerate(row)) for row in rows]
        return "\n".join(lines) + "\n"


def bias(estimates, truths) -> float:
    e, t = _paired(estimates, truths)
    return float(np.mean(e - t))


def rmse(estimates, truths) -> float:
    e, t = _paired(estimates, truths)
    return float(np.sqrt(np.mean((e - t) ** 2)))


def _paired(estimates, truths):
    e = np.asarray(estimates, dtype=float)
    t = np.asarray(truths, dtype=float)
    if e.shape != t.shape:
        raise ValidationError(f"length mismatch: {e.shape} estimates vs {t.shape} truths")
    if e.size == 0:
        raise ValidationError("need at least one estimate")
    return e, t


def coverage(intervals, truths) -> float:
    """Fraction of closed intervals [lo, hi] containing the matching truth."""
    arr = np.asarray(intervals, dtype=float).reshape(-1, 2)
    t = np.asarray(truths, dtype=float)
    if len(arr) != len(t):
        raise ValidationError(f"{len(arr)} intervals vs {len(t)} truths")
    if len(t) == 0:
        raise ValidationError("need at least one interval")
    if np.any(arr[:, 0] > arr[:, 1]):
        bad = int(np.argmax(arr[:, 0] > arr[:, 1]))
        raise ValidationError(f"interval {bad} has lo > hi: {tuple(arr[bad])}")
    return float(np.mean((arr[:, 0] <= t) & (t <= arr[:, 1])))


def _classify(name: str, treated: np.ndarray) -> str | None:
    if name in ("tau0", "tau1", "omega"):
        return name
    if name.startswith("beta["):
        return "beta"
    if name.startswith("gamma["):
        return "gamma"
    if name.startswith("a["):
        return "a"
    if name.startswith("d["):
        return "d"
    if name.startswith("eta["):
        subject = int(name[4:-1]) - 1
        return "eta_treated" if treated[subject] else "eta_control"
    return None  # beta0, gamma0, sigma_eta, sigma_y are tracked by no table class


def _replication_seeds(master_seed: int, cell_index: int, replication: int) -> tuple[int, int]:
    ss = np.random.SeedSequence(master_seed, spawn_key=(cell_index, replication))
    a, b = ss.generate_state(2, dtype=np.uint64)
    return int(a), int(b)


def _run_replication(design: StudyDesign, cell_index: int, replication: int):
    scenario = design.cells[cell_index]
    data_seed, sampler_seed = _replication_seeds(design.seed, cell_index, replication)
    data, truth = generate_dataset(replace(scenario, seed=data_seed))
    post = Posterior(data, design.prior)
    sampler_cfg = replace(design.sampler, seed=sampler_seed)
    try:
        draws = fit(post, sampler_cfg)
    except SamplerError as exc:
        return {
            "cell_index": cell_index, "replication": replication,
            "data_seed": data_seed, "sampler_seed": sampler_seed,
            "failed": True, "error": str(exc),
        }
    summaries = summarize(draws)
    truth_con = post.layout.constrain(post.layout.pack(truth.params))
    treated = data.z == 1
    by_class: dict[str, list[tuple[float, float, float, float]]] = {
        c: [] for c in PARAMETER_CLASSES
    }
    rhat_max = 0.0
    for i, name in enumerate(post.names):
        s = summaries[name]
        if np.isfinite(s.rhat):
            rhat_max = max(rhat_max, s.rhat)
        cls = _classify(name, treated)
        if cls is not None:
            by_class[cls].append((s.mean, truth_con[i], s.q2_5, s.q97_5))
    return {
        "cell_index": cell_index, "replication": replication,
        "data_seed": data_seed, "sampler_seed": sampler_seed,
        "failed": False, "error": "",
        "converged": rhat_max < RHAT_THRESHOLD,
        "rhat_max": rhat_max,
        "divergence_flagged": draws.divergence_flagged,
        "by_class": {c: np.asarray(v, dtype=float).reshape(-1, 4)
                     for c, v in by_class.items()},
    }


def run_study(design: StudyDesign, workers: int = 1) -> StudyReport:
    """Run every (cell, replication) job and aggregate into a StudyReport.

    The report is byte-identical for any worker count with the same design.
    """
    jobs = [(c, r) for c in range(len(design.cells)) for r in range(design.replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {job: pool.submit(_run_replication, design, *job) for job in jobs}
            results = {job: futures[job].result() for job in jobs}
    else:
        results = {job: _run_replication(design, *job) for job in jobs}

    names = design.cell_names()
    records = []
    rows = []
    for ci, cell_name in enumerate(names):
        cell_results = [results[(ci, r)] for r in range(design.replications)]
        ok = [r for r in cell_results if not r["failed"]]
        if not ok:
            raise SamplerError(
                f"every replication failed in cell {cell_name}: "
                f"{cell_results[0]['error']}"
            )
        n_failed = len(cell_results) - len(ok)
        n_converged = sum(r["converged"] for r in ok)
        conv_rate = n_converged / design.replications
        for r in cell_results:
            records.append(ReplicationRecord(
                cell=cell_name, cell_index=ci, replication=r["replication"],
                data_seed=r["data_seed"], sampler_seed=r["sampler_seed"],
                failed=r["failed"], error=r["error"],
                converged=bool(r.get("converged", False)),
                rhat_max=float(r.get("rhat_max", float("nan"))),
                divergence_flagged=bool(r.get("divergence_flagged", False)),
            ))
        for cls in PARAMETER_CLASSES:
            blocks = [r["by_class"][cls] for r in ok if len(r["by_class"][cls])]
            if blocks:
                pooled = np.concatenate(blocks, axis=0)
                b = bias(pooled[:, 0], pooled[:, 1])
                rm = rmse(pooled[:, 0], pooled[:, 1])
                cov = coverage(pooled[:, 2:4], pooled[:, 1])
                n_est = len(pooled)
            else:
                b = rm = cov = float("nan")
                n_est = 0
            rows.append(ReportRow(
                cell=cell_name, param_class=cls, bias=b, rmse=rm, coverage=cov,
                convergence_rate=conv_rate, n_estimates=n_est,
                n_replications=design.replications, n_failed=n_failed,
            ))
    return StudyReport(rows=tuple(rows), replications=tuple(records))


def desk_scale_design(seed: int = 0, replications: int = 30,
                      sampler: SamplerConfig | None = None,
                      prior: PriorConfig | None = None) -> StudyDesign:
    """Default small study: Rasch and 2PL at N=500, J=50."""
    cells = tuple(
        ScenarioConfig(kind=k, n_subjects=500, n_items=50, seed=0)
        for k in (ItemKind.RASCH, ItemKind.TWO_PL)
    )
    return StudyDesign(
        cells=cells, replications=replications,
        sampler=sampler if sampler is not None else SamplerConfig(),
        prior=prior if prior is not None else PriorConfig(),
        seed=seed,
    )
