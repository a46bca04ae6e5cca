"""File formats: dataset CSV, truth JSON, config JSON, draws/summary CSV,
study reports, and run manifests.

All writers go through an atomic temp-file-plus-rename so a crashed run never
leaves a half-written file. CSV output is RFC 4180 (CRLF, minimal quoting)
with full round-trip float precision. Parse errors carry file, line, and
field so a bad cell in a big CSV is findable.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import __version__
from .dataset import Constraint, MeasurementSpec, TrialDataset
from .errors import ValidationError
from .measurement import MISSING, ItemKind, ItemParams, ResponseMatrix
from .posterior import (
    FlatPrior,
    HalfNormalPrior,
    LogNormalPrior,
    NormalPrior,
    PriorConfig,
    UniformPrior,
)
from .sampler import PosteriorDraws, SamplerConfig
from .simgen import GroundTruth, ScenarioConfig
from .structural import StructuralParams
from .study import StudyDesign
from .transforms import ParameterSet


def atomic_write_text(path: str, text: str):
    """Write text to path via a same-directory temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# dataset CSV: header `id,z,y,x_1..x_p,item_1..item_J`, NA for unobserved


def write_dataset(data: TrialDataset, path: str):
    p = data.n_covariates
    J = data.spec.n_items
    header = ["id", "z", "y"] + [f"x_{i + 1}" for i in range(p)] \
        + [f"item_{j + 1}" for j in range(J)]
    treated_row = {int(s): r for r, s in enumerate(data.treated_idx)}
    out = []
    for i in range(data.n_subjects):
        row = [str(i + 1), str(int(data.z[i])), repr(float(data.y[i]))]
        row += [repr(float(v)) for v in data.x[i]]
        if i in treated_row:
            resp = data.responses.data[treated_row[i]]
            row += ["NA" if m == MISSING else str(int(m)) for m in resp]
        else:
            row += ["NA"] * J
        out.append(row)
    buf = _csv_text(header, out)
    atomic_write_text(path, buf)


def _csv_text(header, rows) -> str:
    import io

    sink = io.StringIO()
    w = csv.writer(sink, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return sink.getvalue()


def _parse_indexed_columns(header: list[str], prefix: str, path: str) -> list[int]:
    """Column positions of prefix_1..prefix_k, validated dense and in order."""
    found = {}
    for pos, name in enumerate(header):
        if name.startswith(prefix):
            try:
                idx = int(name[len(prefix):])
            except ValueError:
                raise ValidationError(
                    f"{path} line 1: column {name!r} is not {prefix}<integer>"
                ) from None
            if idx in found:
                raise ValidationError(f"{path} line 1: duplicate column {name!r}")
            found[idx] = pos
    if sorted(found) != list(range(1, len(found) + 1)):
        raise ValidationError(
            f"{path} line 1: {prefix}* columns must be {prefix}1..{prefix}k "
            f"with no gaps, got {sorted(found)}"
        )
    return [found[i] for i in sorted(found)]


def read_dataset(path: str, spec: MeasurementSpec | None = None,
                 kind: ItemKind | None = None,
                 constraint: Constraint = Constraint.FIX_FIRST_ITEM,
                 fix_rasch_first_intercept: bool = False) -> TrialDataset:
    """Parse a dataset CSV.

    Either pass the full MeasurementSpec, or pass kind and let the category
    counts be inferred as (max observed category + 1, at least 2) per item.
    Control rows must have every item cell NA: a response without treatment is
    undefined in this design and is rejected, not ignored.
    """
    if spec is None and kind is None:
        raise ValidationError("read_dataset needs either spec or kind")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path} line 1: empty file") from None
        for col in ("id", "z", "y"):
            if col not in header:
                raise ValidationError(f"{path} line 1: missing required column {col!r}")
        x_pos = _parse_indexed_columns(header, "x_", path)
        item_pos = _parse_indexed_columns(header, "item_", path)
        if not item_pos:
            raise ValidationError(f"{path} line 1: no item_* columns")
        zc, yc = header.index("z"), header.index("y")
        z_rows, y_rows, x_rows, m_rows = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValidationError(
                    f"{path} line {lineno}: {len(row)} fields, header has {len(header)}"
                )
            z = _parse_int(row[zc], path, lineno, "z")
            if z not in (0, 1):
                raise ValidationError(f"{path} line {lineno}: z must be 0 or 1, got {z}")
            y = _parse_float(row[yc], path, lineno, "y")
            xs = [_parse_float(row[c], path, lineno, header[c]) for c in x_pos]
            items = []
            for j, c in enumerate(item_pos):
                cell = row[c]
                if cell == "NA":
                    items.append(MISSING)
                    continue
                m = _parse_int(cell, path, lineno, header[c])
                if z == 0:
                    raise ValidationError(
                        f"{path} line {lineno}: {header[c]} = {m} but z = 0 "
                        "(responses are undefined off treatment)"
                    )
                if m < 0:
                    raise ValidationError(
                        f"{path} line {lineno}: {header[c]} = {m}, categories start at 0"
                    )
                items.append(m)
            z_rows.append(z)
            y_rows.append(y)
            x_rows.append(xs)
            if z == 1:
                m_rows.append(items)
    if not z_rows:
        raise ValidationError(f"{path} line 2: no data rows")
    J = len(item_pos)
    M = np.asarray(m_rows, dtype=np.int64).reshape(len(m_rows), J)
    if spec is None:
        cats = tuple(
            max(2, int(M[:, j].max()) + 1) if len(M) else 2 for j in range(J)
        )
        spec = MeasurementSpec(kind=kind, cats=cats, constraint=constraint,
                               fix_rasch_first_intercept=fix_rasch_first_intercept)
    if spec.n_items != J:
        raise ValidationError(
            f"{path}: {J} item columns but the measurement spec declares {spec.n_items}"
        )
    for j in range(J):
        if len(M) and M[:, j].max() >= spec.cats[j]:
            line = 2 + int(np.argmax(M[:, j] == M[:, j].max()))
            raise ValidationError(
                f"{path}: item_{j + 1} has category {int(M[:, j].max())} but the "
                f"spec allows 0..{spec.cats[j] - 1} (first seen near treated row {line})"
            )
    return TrialDataset(
        z=np.asarray(z_rows, dtype=np.int8),
        y=np.asarray(y_rows, dtype=float),
        x=np.asarray(x_rows, dtype=float).reshape(len(z_rows), len(x_pos)),
        responses=ResponseMatrix(M),
        spec=spec,
    )


def _parse_int(cell: str, path: str, lineno: int, field: str) -> int:
    try:
        return int(cell)
    except ValueError:
        raise ValidationError(
            f"{path} line {lineno}: {field} must be an integer, got {cell!r}"
        ) from None


def _parse_float(cell: str, path: str, lineno: int, field: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ValidationError(
            f"{path} line {lineno}: {field} must be a number, got {cell!r}"
        ) from None
    if not np.isfinite(v):
        raise ValidationError(f"{path} line {lineno}: {field} must be finite, got {cell!r}")
    return v


# ---------------------------------------------------------------------------
# truth JSON


def write_truth(truth: GroundTruth, path: str):
    ps = truth.params
    doc = {
        "items": [
            {
                "kind": item.kind.value,
                "slope": item.slope,
                "intercepts": list(item.intercepts),
            }
            for item in ps.items
        ],
        "structural": dataclasses.asdict(ps.structural),
        "eta": [float(v) for v in ps.eta],
    }
    atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def read_truth(path: str) -> GroundTruth:
    with open(path) as f:
        doc = json.load(f)
    _require_keys(doc, {"items", "structural", "eta"}, path, "top level")
    items = []
    for j, rec in enumerate(doc["items"]):
        _require_keys(rec, {"kind", "slope", "intercepts"}, path, f"items[{j}]")
        items.append(ItemParams(
            kind=_item_kind(rec["kind"], path, f"items[{j}].kind"),
            intercepts=tuple(rec["intercepts"]),
            slope=rec["slope"],
        ))
    sp = doc["structural"]
    _require_keys(sp, {f.name for f in dataclasses.fields(StructuralParams)},
                  path, "structural")
    structural = StructuralParams(**{k: tuple(v) if isinstance(v, list) else v
                                     for k, v in sp.items()})
    return GroundTruth(params=ParameterSet(
        items=tuple(items), structural=structural, eta=np.asarray(doc["eta"], dtype=float)
    ))


def _require_keys(doc: dict, required: set[str], path: str, where: str):
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: {where} must be a JSON object")
    unknown = set(doc) - required
    if unknown:
        raise ValidationError(
            f"{path}: unknown key {sorted(unknown)[0]!r} in {where} "
            f"(allowed: {sorted(required)})"
        )
    missing = required - set(doc)
    if missing:
        raise ValidationError(f"{path}: {where} is missing key {sorted(missing)[0]!r}")


def _item_kind(value: str, path: str, where: str) -> ItemKind:
    try:
        return ItemKind(value)
    except ValueError:
        raise ValidationError(
            f"{path}: {where} must be one of "
            f"{[k.value for k in ItemKind]}, got {value!r}"
        ) from None


# ---------------------------------------------------------------------------
# config JSON (strict: unknown keys are errors)

_PRIOR_TYPES = {
    "normal": (NormalPrior, {"mu", "sigma"}),
    "lognormal": (LogNormalPrior, {"mu", "sigma"}),
    "uniform": (UniformPrior, {"lo", "hi"}),
    "flat": (FlatPrior, set()),
    "halfnormal": (HalfNormalPrior, {"sigma"}),
}


def _parse_prior(doc, path: str, where: str):
    if not isinstance(doc, dict) or "type" not in doc:
        raise ValidationError(f"{path}: {where} must be an object with a 'type' key")
    t = doc["type"]
    if t not in _PRIOR_TYPES:
        raise ValidationError(
            f"{path}: {where}.type must be one of {sorted(_PRIOR_TYPES)}, got {t!r}"
        )
    cls, fields = _PRIOR_TYPES[t]
    _require_keys(doc, fields | {"type"}, path, where)
    return cls(**{k: v for k, v in doc.items() if k != "type"})


def parse_prior_config(doc: dict, path: str, where: str = "prior") -> PriorConfig:
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: {where} must be a JSON object")
    allowed = {"slope", "intercept", "structural", "scale"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValidationError(
            f"{path}: unknown key {sorted(unknown)[0]!r} in {where} (allowed: {sorted(allowed)})"
        )
    kwargs = {k: _parse_prior(v, path, f"{where}.{k}") for k, v in doc.items()}
    return PriorConfig(**kwargs)


_SCENARIO_KEYS = {
    "kind", "n_subjects", "n_items", "seed", "n_categories", "missing_fraction",
    "r2_eta", "r2_y", "omega_range", "tau1_range", "tau0_range", "beta", "gamma",
    "beta0", "gamma0", "slope_mu", "slope_sigma", "bernoulli_missing",
}

_SAMPLER_KEYS = {"chains", "iterations", "warmup", "target_accept",
                 "max_leapfrog", "seed", "init_radius"}


def parse_scenario(doc: dict, path: str, where: str) -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: {where} must be a JSON object")
    unknown = set(doc) - _SCENARIO_KEYS
    if unknown:
        raise ValidationError(
            f"{path}: unknown key {sorted(unknown)[0]!r} in {where} "
            f"(allowed: {sorted(_SCENARIO_KEYS)})"
        )
    for req in ("kind", "n_subjects", "n_items"):
        if req not in doc:
            raise ValidationError(f"{path}: {where} is missing key {req!r}")
    kw = dict(doc)
    kw["kind"] = _item_kind(kw["kind"], path, f"{where}.kind")
    kw.setdefault("seed", 0)
    for k in ("omega_range", "tau1_range", "tau0_range", "beta", "gamma"):
        if k in kw:
            kw[k] = tuple(kw[k])
    return ScenarioConfig(**kw)


def parse_sampler_config(doc: dict, path: str, where: str = "sampler") -> SamplerConfig:
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: {where} must be a JSON object")
    unknown = set(doc) - _SAMPLER_KEYS
    if unknown:
        raise ValidationError(
            f"{path}: unknown key {sorted(unknown)[0]!r} in {where} "
            f"(allowed: {sorted(_SAMPLER_KEYS)})"
        )
    return SamplerConfig(**doc)


def load_study_design(path: str) -> StudyDesign:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} line {exc.lineno}: invalid JSON: {exc.msg}") from None
    allowed = {"cells", "replications", "sampler", "prior", "seed"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValidationError(
            f"{path}: unknown key {sorted(unknown)[0]!r} in top level (allowed: {sorted(allowed)})"
        )
    for req in ("cells", "replications"):
        if req not in doc:
            raise ValidationError(f"{path}: top level is missing key {req!r}")
    if not isinstance(doc["cells"], list) or not doc["cells"]:
        raise ValidationError(f"{path}: cells must be a non-empty array")
    cells = tuple(parse_scenario(c, path, f"cells[{i}]") for i, c in enumerate(doc["cells"]))
    sampler = parse_sampler_config(doc.get("sampler", {}), path)
    prior = parse_prior_config(doc.get("prior", {}), path)
    return StudyDesign(
        cells=cells, replications=doc["replications"], sampler=sampler,
        prior=prior, seed=doc.get("seed", 0),
    )


def load_model_config(path: str):
    """Model JSON for `fit`: kind plus optional cats/constraint/prior."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} line {exc.lineno}: invalid JSON: {exc.msg}") from None
    allowed = {"kind", "cats", "constraint", "fix_rasch_first_intercept", "prior"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValidationError(
            f"{path}: unknown key {sorted(unknown)[0]!r} in top level (allowed: {sorted(allowed)})"
        )
    if "kind" not in doc:
        raise ValidationError(f"{path}: top level is missing key 'kind'")
    kind = _item_kind(doc["kind"], path, "kind")
    constraint = Constraint(doc.get("constraint", "fix_first_item"))
    prior = parse_prior_config(doc.get("prior", {}), path)
    cats = tuple(doc["cats"]) if "cats" in doc else None
    return kind, cats, constraint, bool(doc.get("fix_rasch_first_intercept", False)), prior


# ---------------------------------------------------------------------------
# draws and summaries


def write_draws_csv(draws: PosteriorDraws, path: str):
    header = ["chain", "iter"] + list(draws.names)
    rows = []
    for c in range(draws.n_chains):
        for t in range(draws.n_kept):
            rows.append([str(c + 1), str(t + 1)]
                        + [repr(float(v)) for v in draws.draws[c, t]])
    atomic_write_text(path, _csv_text(header, rows))


def read_draws_csv(path: str) -> PosteriorDraws:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path} line 1: empty file") from None
        if header[:2] != ["chain", "iter"]:
            raise ValidationError(f"{path} line 1: header must start with chain,iter")
        names = tuple(header[2:])
        if not names:
            raise ValidationError(f"{path} line 1: no parameter columns")
        by_chain: dict[int, list[list[float]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValidationError(
                    f"{path} line {lineno}: {len(row)} fields, header has {len(header)}"
                )
            c = _parse_int(row[0], path, lineno, "chain")
            by_chain.setdefault(c, []).append(
                [_parse_float(v, path, lineno, names[i]) for i, v in enumerate(row[2:])]
            )
    if not by_chain:
        raise ValidationError(f"{path} line 2: no draws")
    chains = sorted(by_chain)
    lengths = {len(by_chain[c]) for c in chains}
    if len(lengths) != 1:
        raise ValidationError(f"{path}: chains have unequal lengths {sorted(lengths)}")
    arr = np.asarray([by_chain[c] for c in chains], dtype=float)
    return PosteriorDraws(
        draws=arr, names=names,
        accept_rate=np.full(len(chains), np.nan),
        divergences=np.zeros(len(chains), dtype=np.int64),
        step_size=np.full(len(chains), np.nan),
    )


def summary_csv_text(summaries: dict) -> str:
    header = ["param", "mean", "sd", "q2.5", "q97.5", "rhat", "ess", "mcse"]
    rows = [
        [s.name] + [repr(float(v)) for v in
                    (s.mean, s.sd, s.q2_5, s.q97_5, s.rhat, s.ess, s.mcse)]
        for s in summaries.values()
    ]
    return _csv_text(header, rows)


def replications_csv_text(report) -> str:
    header = ["cell", "replication", "data_seed", "sampler_seed", "failed",
              "converged", "rhat_max", "divergence_flagged", "error"]
    rows = [
        [r.cell, str(r.replication), str(r.data_seed), str(r.sampler_seed),
         str(int(r.failed)), str(int(r.converged)), repr(float(r.rhat_max)),
         str(int(r.divergence_flagged)), r.error]
        for r in report.replications
    ]
    return _csv_text(header, rows)


# ---------------------------------------------------------------------------
# run manifest


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to replay a run: version, command, config, seed, inputs."""

    tool_version: str
    command: list[str]
    config: dict
    seed: int | None
    started_at: str
    finished_at: str
    input_digests: dict[str, str]


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def write_manifest(manifest: RunManifest, path: str):
    atomic_write_text(path, json.dumps(dataclasses.asdict(manifest), indent=1) + "\n")
