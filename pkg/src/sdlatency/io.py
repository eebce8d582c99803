"""Sweep CSV files, coefficient documents, simulator configs and report tables.

Floats are written with ``repr``, the shortest text that reads back to the
same binary value, so every file written here re-reads bit-exactly.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .core import (LoadPoint, Mode, ServingCoefficients, SweepDataset, WorkloadConfig,
                   normalize_point, predict_latency)
from .errors import MissingInputError, ParseError, SchemaError, ValidationError, VersionError
from .lm import FitResult
from .moe import MoeCoefficients, MoeRouting, MoeSpecCoefficients
from .simulator import PhaseCost, SimConfig, StepCosts
from .speculative import SpecCostCoefficients, SpecParams, min_cost_ratios_over_k, speedup

SWEEP_HEADER = ("model_id", "hardware_id", "prefill_tokens", "decode_tokens", "mode",
                "alpha", "draft_k", "rps", "mean_latency_s", "p95_latency_s",
                "p99_latency_s", "n_requests")
DOCUMENT_VERSION = 1
MODEL_PARAMS = {
    "eq1": ("c1", "c2"),
    "eq3": ("c1p", "c1v", "c1d", "c2p", "c2v", "c2d"),
    "eq4": ("c1u", "c1s", "c2u", "c2s"),
    "eq5": ("c1p", "c1vu", "c1vs", "c1d", "c2p", "c2vu", "c2vs", "c2d"),
}
REPORT_COLUMNS = {
    "collapse": ("x", "y", "y_model"),
    "speedup_curve": ("rps", "r", "speedup_formula", "speedup_ratio"),
    "ratio_minima": ("alpha", "min_c1r", "argmin_k_c1r", "min_c2r", "argmin_k_c2r"),
    "scaling": ("predictor", "coefficient", "fitted_line"),
}
_INT_REPORT_COLUMNS = {"argmin_k_c1r", "argmin_k_c2r"}


def fmt(value) -> str:
    """Locale-free, round-tripping text for a CSV cell; blank for ``None``."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv_text(header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else fmt(c) for c in row])
    return buf.getvalue()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# -- sweep files ------------------------------------------------------------

def sweep_rows(datasets: Sequence[SweepDataset]):
    for ds in datasets:
        c = ds.config
        for p in ds.points:
            yield (c.model_id, c.hardware_id, c.prefill_tokens, c.decode_tokens, c.mode.value,
                   c.alpha, c.draft_k, p.rps, p.mean_latency, p.p95_latency, p.p99_latency,
                   p.n_requests)


def sweep_csv_text(datasets: Sequence[SweepDataset]) -> str:
    return _csv_text(SWEEP_HEADER, sweep_rows(datasets))


def write_sweep_csv(datasets: Sequence[SweepDataset], path) -> None:
    _write_text(path, sweep_csv_text(datasets))


def _cell(row, name, line, conv, required=True):
    raw = row[SWEEP_HEADER.index(name)].strip()
    if raw == "":
        if required:
            raise ValidationError(f"row {line}: {name} is required", line=line, column=name)
        return None
    try:
        return conv(raw)
    except ValueError:
        raise ParseError(f"cannot parse {raw!r} as {conv.__name__}", line=line,
                         column=name) from None


def _finite(raw):
    v = float(raw)
    if not math.isfinite(v):
        raise ValueError(raw)
    return v


def _integer(raw):
    v = float(raw)
    if not v.is_integer():
        raise ValueError(raw)
    return int(v)


def _row_to_point(row, line):
    mode = _cell(row, "mode", line, str)
    if mode not in (Mode.DENSE.value, Mode.SD.value):
        raise ValidationError(f"row {line}: mode must be dense or sd, got {mode!r}",
                              line=line, column="mode")
    sd = mode == Mode.SD.value
    alpha = _cell(row, "alpha", line, _finite, required=sd)
    draft_k = _cell(row, "draft_k", line, _integer, required=sd)
    if not sd and (alpha is not None or draft_k is not None):
        col = "alpha" if alpha is not None else "draft_k"
        raise ValidationError(f"row {line}: dense rows leave alpha and draft_k blank",
                              line=line, column=col)
    try:
        cfg = WorkloadConfig(
            model_id=_cell(row, "model_id", line, str),
            hardware_id=_cell(row, "hardware_id", line, str),
            prefill_tokens=_cell(row, "prefill_tokens", line, _integer),
            decode_tokens=_cell(row, "decode_tokens", line, _integer),
            mode=mode, alpha=alpha, draft_k=draft_k)
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ValidationError(f"row {line}: {exc}", line=line) from None
    rps = _cell(row, "rps", line, _finite)
    if not rps > 0:
        raise ValidationError(f"row {line}: rps must be > 0, got {rps}", line=line, column="rps")
    n = _cell(row, "n_requests", line, _integer, required=False)
    try:
        point = LoadPoint(
            rps=rps, mean_latency=_cell(row, "mean_latency_s", line, _finite),
            p95_latency=_cell(row, "p95_latency_s", line, _finite, required=False),
            p99_latency=_cell(row, "p99_latency_s", line, _finite, required=False),
            n_requests=1 if n is None else n)
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ValidationError(f"row {line}: {exc}", line=line) from None
    return cfg, point


def parse_sweep_csv(text: str) -> list:
    """Parse sweep CSV text into datasets, one per condition, in order of appearance."""
    reader = csv.reader(_io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty file: missing header", line=1) from None
    if tuple(h.strip() for h in header) != SWEEP_HEADER:
        raise SchemaError("header must be exactly " + ",".join(SWEEP_HEADER), line=1)
    groups: dict = {}
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(SWEEP_HEADER):
            raise ParseError(f"expected {len(SWEEP_HEADER)} fields, got {len(row)}", line=line)
        cfg, point = _row_to_point(row, line)
        groups.setdefault(cfg, []).append(point)
    return [SweepDataset(cfg, tuple(pts)) for cfg, pts in groups.items()]


def read_sweep_csv(path) -> list:
    return parse_sweep_csv(Path(path).read_text(encoding="utf-8"))


# -- coefficient documents --------------------------------------------------

@dataclass(frozen=True)
class Diagnostics:
    r2: Optional[float] = None
    rmse: Optional[float] = None
    n_points: Optional[int] = None
    latency_column: str = "mean"
    converged: Optional[bool] = None
    warnings: tuple = ()


@dataclass(frozen=True)
class Provenance:
    inputs: tuple = ()  # (path, sha256) pairs
    seed: Optional[int] = None
    tool_version: str = ""


@dataclass(frozen=True)
class CoefficientDocument:
    model: str
    params: Mapping[str, float]
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    provenance: Provenance = field(default_factory=Provenance)
    g: Optional[int] = None
    routing: Optional[MoeRouting] = None

    def __post_init__(self):
        if self.model not in MODEL_PARAMS:
            raise VersionError(f"unknown model kind {self.model!r}")
        expected = MODEL_PARAMS[self.model]
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise SchemaError(f"{self.model} parameters must be {list(expected)}"
                              f" (missing {missing}, unexpected {extra})")
        object.__setattr__(self, "params", {k: float(self.params[k]) for k in expected})
        if self.model in ("eq4", "eq5") and self.routing is None:
            raise SchemaError(f"{self.model} documents need routing")

    def coefficients(self):
        p = self.params
        if self.model == "eq1":
            return ServingCoefficients(**p)
        if self.model == "eq3":
            return SpecCostCoefficients(**p)
        if self.model == "eq4":
            return MoeCoefficients(**p)
        return MoeSpecCoefficients(**p)


def document_from_fit(res: FitResult, *, inputs=(), seed=None) -> CoefficientDocument:
    from . import __version__

    routing = res.metadata.get("routing")
    return CoefficientDocument(
        model=res.model, params=dict(res.params),
        diagnostics=Diagnostics(res.r2, res.rmse, res.n_points, res.latency_column,
                                res.converged, tuple(res.warnings)),
        provenance=Provenance(tuple((str(p), file_digest(p)) for p in inputs), seed,
                              __version__),
        g=res.metadata.get("g"),
        routing=MoeRouting(*routing) if routing else None)


def document_to_json(doc: CoefficientDocument) -> str:
    d = doc.diagnostics
    out = {
        "version": DOCUMENT_VERSION,
        "model": doc.model,
        "parameters": dict(doc.params),
        "diagnostics": {"r2": d.r2, "rmse": d.rmse, "n_points": d.n_points,
                        "latency_column": d.latency_column, "converged": d.converged,
                        "warnings": list(d.warnings)},
        "provenance": {"inputs": [{"path": p, "sha256": h} for p, h in doc.provenance.inputs],
                       "seed": doc.provenance.seed,
                       "tool_version": doc.provenance.tool_version},
    }
    if doc.g is not None:
        out["g"] = doc.g
    if doc.routing is not None:
        out["routing"] = {"active": doc.routing.active, "total": doc.routing.total}
    return json.dumps(out, indent=2, allow_nan=False) + "\n"


def write_coefficients(doc: CoefficientDocument, path) -> None:
    _write_text(path, document_to_json(doc))


def _load_json(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, column=str(exc.colno)) from None


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing {key!r}", column=key)
    return obj[key]


def parse_coefficients(text: str) -> CoefficientDocument:
    raw = _load_json(text)
    if not isinstance(raw, dict):
        raise SchemaError("coefficient document must be an object")
    version = _require(raw, "version", "document")
    if version != DOCUMENT_VERSION:
        raise VersionError(f"unsupported document version {version!r}")
    model = _require(raw, "model", "document")
    if model not in MODEL_PARAMS:
        raise VersionError(f"unknown model kind {model!r}")
    params = _require(raw, "parameters", "document")
    if not isinstance(params, dict):
        raise SchemaError("parameters must be an object", column="parameters")
    for name in MODEL_PARAMS[model]:
        value = _require(params, name, f"{model} parameters")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"parameter {name} must be a number", column=name)
    diag = raw.get("diagnostics") or {}
    prov = raw.get("provenance") or {}
    routing = raw.get("routing")
    try:
        return CoefficientDocument(
            model=model, params=params,
            diagnostics=Diagnostics(diag.get("r2"), diag.get("rmse"), diag.get("n_points"),
                                    diag.get("latency_column", "mean"), diag.get("converged"),
                                    tuple(diag.get("warnings", ()))),
            provenance=Provenance(tuple((i["path"], i["sha256"]) for i in prov.get("inputs", ())),
                                  prov.get("seed"), prov.get("tool_version", "")),
            g=raw.get("g"),
            routing=MoeRouting(routing["active"], routing["total"]) if routing else None)
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed document: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ValidationError(str(exc)) from None


def read_coefficients(path) -> CoefficientDocument:
    return parse_coefficients(Path(path).read_text(encoding="utf-8"))


# -- simulator configuration ------------------------------------------------

@dataclass(frozen=True)
class SimConfigFile:
    """A parsed simulator config plus the optional (alpha, k) grid to sweep."""

    config: SimConfig
    spec_grid: tuple = ()

    def configs(self):
        """One config per grid entry, or the base config when there is no grid."""
        if not self.spec_grid:
            return [self.config]
        return [self.config.with_spec(a, k) for a, k in self.spec_grid]


def _phase(obj, name):
    v = obj.get(name, (0.0, 0.0))
    if isinstance(v, dict):
        v = (v.get("fixed", 0.0), v.get("per_batch", 0.0))
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise SchemaError(f"step cost {name!r} must be [fixed, per_batch]", column=name)
    return PhaseCost(float(v[0]), float(v[1]))


def parse_sim_config(text: str) -> SimConfigFile:
    """Read a JSON simulator config.

    Required: ``seed``, ``workload`` and ``step_costs``.  Optional: ``spec``
    (``{"alpha", "k"}``), ``spec_grid`` (``{"alpha": [...], "k": [...]}``,
    swept as a product), ``routing`` (``{"active", "total", "saturation":
    [fixed, per_batch]}``), ``arrival``, ``max_concurrency``,
    ``warmup_requests``, ``measured_requests``.
    """
    raw = _load_json(text)
    if not isinstance(raw, dict):
        raise SchemaError("simulator config must be an object")
    seed = _require(raw, "seed", "config")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ValidationError("seed must be an unsigned 64-bit integer", column="seed")
    wl = _require(raw, "workload", "config")
    costs = _require(raw, "step_costs", "config")
    try:
        workload = WorkloadConfig(
            model_id=str(wl.get("model_id", "sim")), hardware_id=str(wl.get("hardware_id", "sim")),
            prefill_tokens=int(_require(wl, "prefill_tokens", "workload")),
            decode_tokens=int(_require(wl, "decode_tokens", "workload")))
        step = StepCosts(_phase(costs, "prefill"), _phase(costs, "verify"), _phase(costs, "draft"))
        spec = None
        if raw.get("spec") is not None:
            s = raw["spec"]
            spec = SpecParams(float(_require(s, "alpha", "spec")), int(_require(s, "k", "spec")))
            if spec.k == 0:
                spec = None
        routing = sat = None
        if raw.get("routing") is not None:
            r = raw["routing"]
            routing = MoeRouting(int(_require(r, "active", "routing")),
                                 int(_require(r, "total", "routing")))
            if r.get("saturation") is not None:
                sat = _phase(r, "saturation")
        kwargs = {k: raw[k] for k in ("arrival", "max_concurrency", "warmup_requests",
                                      "measured_requests") if raw.get(k) is not None}
        config = SimConfig(step_costs=step, workload=workload, seed=seed, spec=spec,
                           routing=routing, moe_saturation=sat, **kwargs)
        grid = ()
        if raw.get("spec_grid") is not None:
            g = raw["spec_grid"]
            alphas = [float(a) for a in _require(g, "alpha", "spec_grid")]
            ks = [int(k) for k in _require(g, "k", "spec_grid")]
            grid = tuple((a, k) for a in alphas for k in ks)
            for a, k in grid:
                SpecParams(a, k)
    except ParseError:
        raise
    except (TypeError, AttributeError) as exc:
        raise SchemaError(f"malformed config: {exc}") from None
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    return SimConfigFile(config, grid)


def read_sim_config(path) -> SimConfigFile:
    return parse_sim_config(Path(path).read_text(encoding="utf-8"))


# -- coefficient tables (scaling input) -------------------------------------

def read_table(path) -> dict:
    """Columns of a CSV table; numeric columns become float lists, others stay text."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(_io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("empty table", line=1) from None
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names", line=1)
    cols = {h: [] for h in header}
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=reader.line_num)
        for h, c in zip(header, row):
            cols[h].append(c.strip())
    out = {}
    for h, vals in cols.items():
        try:
            out[h] = [float(v) for v in vals]
        except ValueError:
            out[h] = vals
    return out


# -- reports ----------------------------------------------------------------

@dataclass(frozen=True)
class Report:
    kind: str
    rows: tuple

    @property
    def columns(self):
        return REPORT_COLUMNS[self.kind]

    def to_csv(self) -> str:
        return _csv_text(self.columns, self.rows)

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def _need(inputs, *names):
    missing = [n for n in names if inputs.get(n) is None]
    if missing:
        raise MissingInputError(f"missing report inputs: {', '.join(missing)}")
    return [inputs[n] for n in names]


def emit_report(kind: str, **inputs) -> Report:
    """Build a plot-ready table.

    * ``collapse``: ``coeffs`` (ServingCoefficients), ``points`` (LoadPoints);
      optional ``column``.  Saturated points and points with ``x >= 1`` are skipped.
    * ``speedup_curve``: ``dense``, ``sd`` (ServingCoefficients), ``rps`` grid.
      Rates where either system is unstable are skipped.
    * ``ratio_minima``: ``dense`` and ``per_alpha``, a mapping
      ``alpha -> {k: ServingCoefficients}``.
    * ``scaling``: ``points`` of ``(x, coefficient)`` and a fitted ``trend``.
    """
    if kind not in REPORT_COLUMNS:
        raise ValueError(f"unknown report kind {kind!r}")
    rows = []
    if kind == "collapse":
        coeffs, points = _need(inputs, "coeffs", "points")
        column = inputs.get("column", "mean")
        for p in points:
            if p.saturated:
                continue
            x, y = normalize_point(coeffs, p, column)
            if x < 1.0:
                rows.append((x, y, 1.0 / (1.0 - x)))
    elif kind == "speedup_curve":
        dense, sd, grid = _need(inputs, "dense", "sd", "rps")
        for rps in grid:
            rps = float(rps)
            if rps * dense.c2 >= 1.0 or rps * sd.c2 >= 1.0:
                continue
            ratio = predict_latency(dense, rps) / predict_latency(sd, rps)
            rows.append((rps, rps * dense.c2, speedup(dense, sd, rps), ratio))
    elif kind == "ratio_minima":
        dense, per_alpha = _need(inputs, "dense", "per_alpha")
        for alpha in sorted(per_alpha):
            m = min_cost_ratios_over_k(per_alpha[alpha], dense)
            rows.append((float(alpha), m.min_c1r, int(m.argmin_k_c1r), m.min_c2r,
                         int(m.argmin_k_c2r)))
    else:
        points, trend = _need(inputs, "points", "trend")
        for x, y in points:
            rows.append((float(x), float(y), float(trend.predict(x))))
    return Report(kind, tuple(rows))


def write_report(report: Report, path) -> None:
    _write_text(path, report.to_csv())


def parse_report(text: str) -> Report:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = tuple(next(reader))
    except StopIteration:
        raise SchemaError("empty report", line=1) from None
    kinds = [k for k, cols in REPORT_COLUMNS.items() if cols == header]
    if not kinds:
        raise SchemaError(f"unrecognised report header {','.join(header)}", line=1)
    rows = []
    for i, row in enumerate(reader, start=2):
        try:
            rows.append(tuple(int(v) if h in _INT_REPORT_COLUMNS else float(v)
                              for h, v in zip(header, row)))
        except ValueError:
            raise ParseError("non-numeric report cell", line=i) from None
    return Report(kinds[0], tuple(rows))


def read_report(path) -> Report:
    return parse_report(Path(path).read_text(encoding="utf-8"))
