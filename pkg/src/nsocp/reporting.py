"""Convergence records, CSV persistence and rate fitting."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

__all__ = ["ConvergenceRecord", "StudyOutput", "COLUMNS", "fit_eoc", "write_csv", "read_csv",
           "count_ndof"]

COLUMNS = ("iter", "ndof", "est_st", "est_ad", "est_ct", "est_ocp", "err_y_h1", "err_p_l2",
           "err_z_h1", "err_r_l2", "err_u_l2", "err_total", "effectivity", "seconds")


def count_ndof(n_velocity: int, n_pressure: int, n_control: int, scheme: str) -> int:
    """Total unknowns: state and adjoint pairs, plus the control when discretized."""
    base = 2 * (n_velocity + n_pressure)
    return base + n_control if scheme == "fully" else base


@dataclass
class ConvergenceRecord:
    """One loop iteration.  Estimators are stored as norms (square roots)."""

    iter: int
    ndof: int
    est_st: float
    est_ad: float
    est_ct: float
    est_ocp: float
    err_y_h1: float = math.nan
    err_p_l2: float = math.nan
    err_z_h1: float = math.nan
    err_r_l2: float = math.nan
    err_u_l2: float = math.nan
    err_total: float = math.nan
    effectivity: float = math.nan
    seconds: float = 0.0

    def row(self) -> list[str]:
        out = []
        for name in COLUMNS:
            v = getattr(self, name)
            out.append(str(v) if isinstance(v, (int, np.integer)) else f"{float(v):.17g}")
        return out


def fit_eoc(records, k: int = 5, quantity: str = "err_total"):
    """Least-squares slope of ``log(quantity)`` against ``log(ndof)`` over the last ``k`` records.

    Returns None when fewer than two usable records exist.
    """
    recs = list(records)[-k:] if k else list(records)
    n = np.array([r.ndof for r in recs], dtype=float)
    q = np.array([getattr(r, quantity) for r in recs], dtype=float)
    ok = (n > 0) & (q > 0) & np.isfinite(q)
    if ok.sum() < 2 or len(np.unique(n[ok])) < 2:
        return None
    slope, _ = np.polyfit(np.log(n[ok]), np.log(q[ok]), 1)
    return float(slope)


@dataclass
class StudyOutput:
    config: dict
    records: list = field(default_factory=list)
    k: int = 5

    def slopes(self) -> dict:
        names = ("err_total", "est_ocp", "err_y_h1", "err_p_l2", "err_z_h1", "err_r_l2", "err_u_l2")
        return {q: fit_eoc(self.records, self.k, q) for q in names}

    def effectivity_stats(self, last: int = 10):
        eff = np.array([r.effectivity for r in self.records[-last:]], dtype=float)
        return float(np.mean(eff)), float(np.std(eff))


def write_csv(study: StudyOutput, path) -> None:
    lines = ["# " + json.dumps(study.config, sort_keys=True, default=str), ",".join(COLUMNS)]
    lines += [",".join(r.row()) for r in study.records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> StudyOutput:
    lines = Path(path).read_text().splitlines()
    config = {}
    if lines and lines[0].startswith("#"):
        config = json.loads(lines[0][1:].strip())
        lines = lines[1:]
    head = lines[0].split(",")
    if tuple(head) != COLUMNS:
        raise ValueError("unexpected CSV columns")
    types = {f.name: f.type for f in fields(ConvergenceRecord)}
    records = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        vals = ln.split(",")
        kw = {name: (int(v) if types[name] in (int, "int") else float(v))
              for name, v in zip(head, vals)}
        records.append(ConvergenceRecord(**kw))
    return StudyOutput(config, records)
