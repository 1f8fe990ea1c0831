"""Registration error metrics and report tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike

from .cloud import RigidTransform
from .errors import ParameterError
from .matching import procrustes

VISIBILITY_EDGES = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
TAU_GRID = tuple(range(2, 41, 2))


def rms_tre(T: RigidTransform, X: ArrayLike, Y: ArrayLike) -> float:
    """Root-mean-square distance between ``Y`` and the transformed ``X``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[0] < 1:
        raise ParameterError(f"fiducial sets must match and be non-empty: {X.shape} vs {Y.shape}")
    r = Y - T.apply(X)
    return float(np.sqrt((r * r).sum() / X.shape[0]))


def procrustes_reference(X: ArrayLike, Y: ArrayLike) -> tuple[RigidTransform, float]:
    """Best rigid fit of the fiducials themselves: the floor for any rigid registrar."""
    T = procrustes(X, Y)
    return T, rms_tre(T, X, Y)


def success_rate(errors: Iterable[float], tau: float) -> float:
    """Percentage of errors strictly below ``tau``."""
    e = np.asarray(list(errors), dtype=np.float64)
    if e.size == 0:
        raise ParameterError("need at least one record")
    return 100.0 * float((e < tau).sum()) / e.size


def success_curve(errors: Iterable[float], taus: Sequence[float] = TAU_GRID) -> list[tuple[float, float]]:
    errors = list(errors)
    return [(float(t), success_rate(errors, t)) for t in taus]


@dataclass
class EvalRecord:
    sample_id: str
    method: str
    rms_tre: float | None
    runtime: float | None = None
    visibility: float = 1.0
    noise_level: float = 0.0
    deformation_rms: float = 0.0
    failed: bool = False
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.rms_tre is not None and self.rms_tre < 0:
            raise ParameterError("RMS-TRE cannot be negative")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def bin_label(lo: float, hi: float, last: bool) -> str:
    return f"[{lo:g},{hi:g}{']' if last else ')'}"


def assign_bin(value: float, edges: Sequence[float]) -> int | None:
    """Index of the half-open bin holding ``value``; the last bin is closed."""
    for b in range(len(edges) - 1):
        lo, hi = edges[b], edges[b + 1]
        if lo <= value < hi or (b == len(edges) - 2 and value == hi):
            return b
    return None


@dataclass
class BinRow:
    method: str
    bin: str
    n: int
    mean: float | None
    std: float | None
    runtime: float | None
    failures: int


def bin_report(records: Sequence[EvalRecord], edges: Sequence[float] = VISIBILITY_EDGES,
               key: str = "visibility") -> list[BinRow]:
    """Mean, population std and count of RMS-TRE per method and bin.

    Failed records count toward ``failures`` only. Methods are listed in
    order of first appearance; empty bins still produce a row.
    """
    methods = list(dict.fromkeys(r.method for r in records))
    rows = []
    for m in methods:
        for b in range(len(edges) - 1):
            sel = [r for r in records if r.method == m and assign_bin(getattr(r, key), edges) == b]
            ok = [r for r in sel if not r.failed and r.rms_tre is not None]
            errs = np.array([r.rms_tre for r in ok])
            times = [r.runtime for r in ok if r.runtime is not None]
            rows.append(BinRow(
                method=m,
                bin=bin_label(edges[b], edges[b + 1], b == len(edges) - 2),
                n=len(ok),
                mean=float(errs.mean()) if errs.size else None,
                std=float(errs.std()) if errs.size else None,
                runtime=float(np.mean(times)) if times else None,
                failures=len(sel) - len(ok),
            ))
    return rows


def _fmt(x: float | None, digits: int = 6) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.{digits}f}"


def bin_rows_csv(rows: Sequence[BinRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "bin", "mean", "std", "n", "runtime", "failures"])
    for r in rows:
        w.writerow([r.method, r.bin, _fmt(r.mean), _fmt(r.std), r.n, _fmt(r.runtime), r.failures])
    return buf.getvalue()


def success_csv(curves: dict[str, list[tuple[float, float]]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "tau", "rate"])
    for m, curve in curves.items():
        for t, r in curve:
            w.writerow([m, f"{t:g}", _fmt(r, 4)])
    return buf.getvalue()


def paired_rows(records: Sequence[EvalRecord], first: str, second: str) -> list[dict[str, Any]]:
    """One row per sample evaluated by both methods, in sample order."""
    a = {r.sample_id: r for r in records if r.method == first}
    b = {r.sample_id: r for r in records if r.method == second}
    rows = []
    for sid in sorted(set(a) & set(b)):
        ra, rb = a[sid], b[sid]
        ea = None if ra.failed else ra.rms_tre
        eb = None if rb.failed else rb.rms_tre
        rows.append({
            "sample_id": sid,
            "visibility": ra.visibility,
            f"{first}_rms_tre": ea,
            f"{second}_rms_tre": eb,
            "difference": None if ea is None or eb is None else eb - ea,
        })
    return rows


def paired_csv(rows: Sequence[dict[str, Any]]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(rows[0]))
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, float) or v is None else v for v in r.values()])
    return buf.getvalue()
