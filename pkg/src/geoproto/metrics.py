"""Dice, Bhattacharyya coefficient and record aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import ContractError, ShapeError


@dataclass(frozen=True)
class EvalRecord:
    seed: int
    dsc: float
    bin_mae: float
    bc: float
    family: str
    domain: str


RECORD_COLUMNS = [f.name for f in fields(EvalRecord)]
SUMMARY_COLUMNS = ["group", "value", "metric", "n", "mean", "median", "std"]
METRICS = ("dsc", "bin_mae", "bc")


def dsc(pred, gt) -> float:
    p, g = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ShapeError(f"dsc shapes {p.shape} vs {g.shape}")
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (p & g).sum() / denom)


def bhattacharyya(p, q, tol: float = 1e-9) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes {p.shape} vs {q.shape}")
    for v in (p, q):
        if (v < 0).any() or abs(v.sum() - 1.0) > tol:
            raise ContractError("bhattacharyya needs normalised, nonnegative inputs")
    return float(min(1.0, np.sqrt(p * q).sum()))


def _stats(values: Sequence[float]) -> tuple[int, float, float, float]:
    # NaN entries (e.g. bin_mae when no OSB prediction exists) are skipped
    a = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if a.size == 0:
        return 0, math.nan, math.nan, math.nan
    return a.size, float(a.mean()), float(np.median(a)), float(a.std())


def aggregate(records: Sequence[EvalRecord]) -> list[dict]:
    """Mean/median/std per metric, overall and per family and per domain.

    Rows are sorted by group so the output does not depend on record order.
    """
    if not records:
        raise ContractError("aggregate needs at least one record")
    groups: list[tuple[str, str, list[EvalRecord]]] = [("all", "all", list(records))]
    for key in ("family", "domain"):
        for val in sorted({getattr(r, key) for r in records}):
            groups.append((key, val, [r for r in records if getattr(r, key) == val]))
    rows = []
    for group, val, recs in groups:
        for metric in METRICS:
            n, mean, med, std = _stats([getattr(r, metric) for r in recs])
            rows.append({"group": group, "value": val, "metric": metric, "n": n,
                         "mean": mean, "median": med, "std": std})
    return rows


def paired_deltas(a: Sequence[EvalRecord], b: Sequence[EvalRecord], metric: str = "dsc") -> dict:
    """Mean of (b - a) over episodes present in both, matched by (seed, domain)."""
    left = {(r.seed, r.domain): getattr(r, metric) for r in a}
    diffs = [getattr(r, metric) - left[(r.seed, r.domain)] for r in b if (r.seed, r.domain) in left]
    if not diffs:
        raise ContractError("no matching episode seeds between the two record sets")
    d = np.asarray(diffs)
    return {"n": int(d.size), "mean": float(d.mean()), "std": float(d.std()),
            "wins": int((d > 0).sum()), "losses": int((d < 0).sum())}


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_csv(path, rows: Iterable[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    return path


def write_records(path, records: Sequence[EvalRecord]) -> Path:
    return write_csv(path, (asdict(r) for r in records), RECORD_COLUMNS)


def read_records(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EvalRecord(int(r["seed"]), float(r["dsc"]), float(r["bin_mae"]), float(r["bc"]),
                       r["family"], r["domain"]) for r in rows]
