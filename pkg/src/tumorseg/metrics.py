"""Dice and HD95 per tumor region, and report aggregation."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .inference import REGIONS, labels_to_regions


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """``2|P & G| / (|P| + |G|)``; two empty masks score 1."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask extents differ: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected neighbour that is background or outside."""
    m = np.asarray(mask).astype(bool)
    pad = np.pad(m, 1)
    interior = m.copy()
    for ax in range(3):
        for shift in (-1, 1):
            interior &= np.roll(pad, shift, axis=ax)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(int(math.ceil(q / 100.0 * len(v))), 1)
    return float(v[rank - 1])


def diagonal_mm(shape, spacing) -> float:
    return float(np.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0), sentinel: float | None = None,
         percentile: float = 95.0) -> float:
    """Symmetric robust Hausdorff distance in mm.

    Each direction takes the nearest-rank ``percentile`` of surface-to-surface
    distances; the result is the larger of the two. Both masks empty gives 0;
    exactly one empty gives ``sentinel`` (default: the image diagonal in mm).
    """
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask extents differ: {p.shape} vs {g.shape}")
    pe, ge = not p.any(), not g.any()
    if pe and ge:
        return 0.0
    if pe or ge:
        return diagonal_mm(p.shape, spacing) if sentinel is None else float(sentinel)
    sp = np.argwhere(surface(p)) * np.asarray(spacing, dtype=np.float64)
    sg = np.argwhere(surface(g)) * np.asarray(spacing, dtype=np.float64)
    d_pg = kernels.min_distances(sp, sg)
    d_gp = kernels.min_distances(sg, sp)
    return max(nearest_rank(d_pg, percentile), nearest_rank(d_gp, percentile))


def evaluate_case(pred_labels: np.ndarray, gt_labels: np.ndarray, spacing=(1.0, 1.0, 1.0),
                  sentinel: float | None = None) -> dict[str, dict[str, float]]:
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"label maps differ in extents: {pred_labels.shape} vs {gt_labels.shape}")
    pr = labels_to_regions(pred_labels)
    gr = labels_to_regions(gt_labels)
    return {
        name: {"dice": dice(pr[i], gr[i]), "hd95": hd95(pr[i], gr[i], spacing, sentinel)}
        for i, name in enumerate(REGIONS)
    }


@dataclass
class MetricsReport:
    cases: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)

    def mean(self, metric: str) -> dict[str, float]:
        out = {r: float(np.mean([c[r][metric] for c in self.cases.values()])) for r in REGIONS}
        out["Average"] = float(np.mean([out[r] for r in REGIONS]))
        return out

    def table(self, title: str = "Model") -> str:
        """Layout of the dice/HD95 tables: ET, TC, WT, Average; dice shown in percent."""
        d, h = self.mean("dice"), self.mean("hd95")
        cols = list(REGIONS) + ["Average"]
        lines = [f"{title:<12}| " + " ".join(f"{c:>8}" for c in cols),
                 "-" * (14 + 9 * len(cols)),
                 f"{'Dice':<12}| " + " ".join(f"{100 * d[c]:8.2f}" for c in cols),
                 f"{'HD95':<12}| " + " ".join(f"{h[c]:8.2f}" for c in cols)]
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        buf.write("case_id,region,dice,hd95\n")
        for cid in sorted(self.cases):
            for r in REGIONS:
                m = self.cases[cid][r]
                buf.write(f"{cid},{r},{m['dice']!r},{m['hd95']!r}\n")
        return buf.getvalue()


def aggregate_report(cases: dict[str, dict[str, dict[str, float]]]) -> MetricsReport:
    """Per-region means over cases; sentinel HD95 values enter the mean unchanged."""
    if not cases:
        raise ValueError("no cases to aggregate")
    return MetricsReport(dict(cases))
