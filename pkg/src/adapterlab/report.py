"""Sweep reports: aggregation, serialization and the analyses run on them.

A report holds one row per (cell, reference, measure). ``mean`` pools all
evaluation tokens; ``ci`` is the 95% half-width ``1.96 * stderr`` of the
per-sequence means. Reports serialize to CSV (the row table only) and to
JSON (everything); both are byte-stable for equal inputs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import AdapterSpec
from .measures import parse_measure_label
from .quality import CorrelationUndefined, permutation_pvalue, spearman

CSV_COLUMNS = ("adapter", "param", "strength", "reference", "measure", "orientation", "mean", "ci", "n")
Z95 = 1.96


def strength_ranks(cells: Sequence[AdapterSpec]) -> list[int]:
    """Dense rank of each cell's strength within its adapter kind; ancestral is 0.

    Other kinds start at 1 for their weakest setting.
    """
    by_kind: dict[str, list[float]] = {}
    for spec in cells:
        by_kind.setdefault(spec.kind, []).append(spec.strength_key())
    levels = {k: sorted(set(v)) for k, v in by_kind.items()}
    out = []
    for spec in cells:
        if spec.kind == "ancestral":
            out.append(0)
        else:
            out.append(levels[spec.kind].index(spec.strength_key()) + 1)
    return out


def _num(x: float):
    """JSON has no inf/nan; non-finite floats travel as strings."""
    x = float(x)
    if math.isfinite(x):
        return x
    return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")


def _unnum(x) -> float:
    return float(x)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _param(spec: AdapterSpec):
    return spec.param if spec.kind != "ancestral" else None


@dataclass
class SweepReport:
    rows: list[dict] = field(default_factory=list)
    quality: list[dict] = field(default_factory=list)
    correlations: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add_row(self, spec: AdapterSpec, strength: int, reference: str, label: str,
                per_seq: Sequence[np.ndarray]) -> None:
        per_seq = [np.asarray(a, dtype=np.float64) for a in per_seq]
        pooled = np.concatenate(per_seq) if per_seq else np.zeros(0)
        if pooled.size and np.isnan(pooled).any():
            self.add_failure(spec, "adapter rejected an evaluation distribution")
            return
        kind, orient = parse_measure_label(label)
        seq_means = np.array([a.mean() for a in per_seq if a.size])
        mean = float(pooled.mean()) if pooled.size else math.nan
        if seq_means.size >= 2 and math.isfinite(mean):
            ci = Z95 * float(seq_means.std(ddof=1)) / math.sqrt(seq_means.size)
        else:
            ci = math.nan
        self.rows.append({
            "adapter": spec.kind, "param": _param(spec), "spec": str(spec), "strength": strength,
            "reference": reference, "measure": kind, "orientation": orient, "label": label,
            "mean": mean, "ci": ci, "n": int(pooled.size), "n_sequences": int(seq_means.size),
            "seq_mean": float(seq_means.mean()) if seq_means.size else math.nan,
        })

    def add_quality(self, spec: AdapterSpec, strength: int, per_seed: Sequence[float]) -> None:
        vals = np.asarray(per_seed, dtype=np.float64)
        ci = Z95 * float(vals.std(ddof=1)) / math.sqrt(vals.size) if vals.size >= 2 else math.nan
        self.quality.append({"adapter": spec.kind, "param": _param(spec), "spec": str(spec),
                             "strength": strength, "value": float(vals.mean()), "ci": ci,
                             "per_seed": [float(v) for v in vals]})

    def add_failure(self, spec: AdapterSpec, reason: str) -> None:
        entry = {"spec": str(spec), "reason": reason}
        if entry not in self.failures:
            self.failures.append(entry)

    def select(self, reference: str, label: str, adapter: str | None = None) -> list[dict]:
        return [r for r in self.rows if r["reference"] == reference and r["label"] == label
                and (adapter is None or r["adapter"] == adapter)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_dict(self) -> dict:
        def conv(rows, keys):
            out = []
            for r in rows:
                d = dict(r)
                for k in keys:
                    if k in d:
                        d[k] = [_num(v) for v in d[k]] if isinstance(d[k], list) else _num(d[k])
                out.append(d)
            return out

        return {
            "rows": conv(self.rows, ("mean", "ci", "seq_mean")),
            "quality": conv(self.quality, ("value", "ci", "per_seed")),
            "correlations": conv(self.correlations, ("rho", "p_value")),
            "failures": list(self.failures),
            "notes": list(self.notes),
            "meta": dict(self.meta),
            "config": dict(self.config),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SweepReport":
        def back(rows, keys):
            out = []
            for r in rows:
                r = dict(r)
                for k in keys:
                    if k in r:
                        r[k] = [_unnum(v) for v in r[k]] if isinstance(r[k], list) else _unnum(r[k])
                out.append(r)
            return out

        return cls(rows=back(d.get("rows", []), ("mean", "ci", "seq_mean")),
                   quality=back(d.get("quality", []), ("value", "ci", "per_seed")),
                   correlations=back(d.get("correlations", []), ("rho", "p_value")),
                   failures=list(d.get("failures", [])), notes=list(d.get("notes", [])),
                   meta=dict(d.get("meta", {})), config=dict(d.get("config", {})))

    @classmethod
    def from_json(cls, text: str) -> "SweepReport":
        return cls.from_dict(json.loads(text))


def emit_report(report: SweepReport, path: str | Path, fmt: str | None = None) -> None:
    """Write ``report`` as CSV or JSON; the format defaults to the file suffix."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt == "csv":
        text = report.to_csv()
    elif fmt == "json":
        text = report.to_json()
    else:
        raise ValueError(f"unknown report format {fmt!r} (use csv or json)")
    path.write_text(text, encoding="utf-8", newline="")


def load_report(path: str | Path) -> SweepReport:
    return SweepReport.from_json(Path(path).read_text(encoding="utf-8"))


def correlate(report: SweepReport, n_perm: int = 10_000, seed: int = 0) -> list[dict]:
    """Spearman's rho between each measure and the quality score across cells.

    Fills and returns ``report.correlations``. Measures that are constant
    across cells get ``rho = nan``; a constant quality column raises
    :class:`CorrelationUndefined`.
    """
    quality = {q["spec"]: q["value"] for q in report.quality}
    if len(quality) < 3:
        raise ValueError(f"need quality scores for at least 3 cells, have {len(quality)}")
    if len(set(quality.values())) == 1:
        raise CorrelationUndefined("quality scores are constant across cells")
    keys = []
    for r in report.rows:
        key = (r["reference"], r["label"])
        if key not in keys:
            keys.append(key)
    table = []
    for ref, label in keys:
        pairs = {}
        for r in report.select(ref, label):
            if r["spec"] in quality and not math.isnan(r["mean"]):
                pairs.setdefault(r["spec"], (r["mean"], quality[r["spec"]]))
        xs = [p[0] for p in pairs.values()]
        ys = [p[1] for p in pairs.values()]
        kind, orient = parse_measure_label(label)
        entry = {"reference": ref, "measure": kind, "orientation": orient, "label": label,
                 "n_cells": len(xs), "rho": math.nan, "p_value": math.nan}
        if len(xs) >= 3:
            try:
                entry["rho"] = spearman(xs, ys)
                entry["p_value"] = permutation_pvalue(xs, ys, n_perm, seed)
            except CorrelationUndefined:
                entry["note"] = "measure constant across cells"
        table.append(entry)
    report.correlations = table
    return table


def adapter_trend(report: SweepReport, adapter: str, reference: str, label: str) -> float:
    """Spearman's rho between strength rank and the measure mean over one adapter's cells."""
    rows = report.select(reference, label, adapter)
    return spearman([r["strength"] for r in rows], [r["mean"] for r in rows])


def is_non_increasing(report: SweepReport, adapter: str, reference: str, label: str, tol: float = 1e-9) -> bool:
    rows = sorted(report.select(reference, label, adapter), key=lambda r: r["strength"])
    means = [r["mean"] for r in rows]
    return all(b <= a + tol for a, b in zip(means, means[1:]))


def dominating_cells(report: SweepReport, reference: str = "reference_model",
                     x_label: str = "forward_cross_entropy", y_label: str = "reverse_cross_entropy") -> list[str]:
    """Cells strictly better (lower) than the ancestral baseline on both measures."""
    x = {r["spec"]: r["mean"] for r in report.select(reference, x_label)}
    y = {r["spec"]: r["mean"] for r in report.select(reference, y_label)}
    if "ancestral" not in x or "ancestral" not in y:
        raise ValueError("the sweep has no ancestral baseline row")
    bx, by = x["ancestral"], y["ancestral"]
    return [s for s in x if s != "ancestral" and s in y and x[s] < bx and y[s] < by]
