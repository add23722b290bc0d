"""Ranking-based evaluation: Accuracy-Confidence curves with trapezoidal
AUC, Spearman rank correlation, and per-method summary reports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import EvaluationError, ReportError


@dataclass(frozen=True)
class CurvePoint:
    tau: float
    fp_norm: float
    tp_norm: float


@dataclass(frozen=True)
class EvalReport:
    methods: list[str]
    auc: dict[str, float]
    spearman: dict[str, float]
    curves: dict[str, list[CurvePoint]]
    dice: dict[str, float]
    tp_total: int
    fp_total: int


def accuracy_confidence_curve(records: Sequence[tuple[float, bool]]):
    """Sweep removal of the most-uncertain lesions one at a time.

    records are (uncertainty, is_tp) pairs; ties keep their input order,
    so callers fix the order first for cross-run determinism.  Returns
    (points, auc_percent): normalized (FP, TP) counts remaining after
    removing k = 0..N lesions, and the trapezoidal area of tp_norm over
    fp_norm as a percentage.
    """
    if not records:
        raise EvaluationError("no records")
    u = np.array([r[0] for r in records], dtype=np.float64)
    tp = np.array([bool(r[1]) for r in records])
    tp_total = int(tp.sum())
    fp_total = int((~tp).sum())
    if tp_total == 0 or fp_total == 0:
        raise EvaluationError(
            f"normalization undefined: {tp_total} TP / {fp_total} FP lesions"
        )
    order = np.argsort(-u, kind="stable")
    removed_tp = np.concatenate([[0], np.cumsum(tp[order])])
    removed_fp = np.concatenate([[0], np.cumsum(~tp[order])])
    n = len(records)
    points = []
    for k in range(n + 1):
        points.append(
            CurvePoint(
                tau=k / n,
                fp_norm=(fp_total - removed_fp[k]) / fp_total,
                tp_norm=(tp_total - removed_tp[k]) / tp_total,
            )
        )
    auc = 0.0
    for a, b in zip(points[:-1], points[1:]):
        auc += (a.fp_norm - b.fp_norm) * (a.tp_norm + b.tp_norm) / 2.0
    return points, 100.0 * auc


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based fractional ranks; ties get the mean of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(a, b) -> float:
    """Pearson correlation of average-fractional ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EvaluationError("inputs must be equal-length vectors")
    if a.size < 2:
        raise EvaluationError("need at least 2 observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise EvaluationError("rank correlation undefined for constant input")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    da = ra - ra.mean()
    db = rb - rb.mean()
    return float((da * db).sum() / np.sqrt((da * da).sum() * (db * db).sum()))


_PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#3a3a9f",
]


def write_curves_svg(curves: Mapping[str, Sequence[CurvePoint]], path, auc: Mapping[str, float] | None = None) -> None:
    """Hand-rolled SVG of tp_norm over fp_norm, one polyline per method.

    No plotting library: keeps the bytes deterministic across reruns.
    """
    w, h, ml, mb, mt, mr = 640, 480, 60, 50, 20, 210

    def sx(v):
        return ml + v * (w - ml - mr)

    def sy(v):
        return h - mb - v * (h - mb - mt)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(1)}" y2="{sy(0)}" stroke="black"/>',
        f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(0)}" y2="{sy(1)}" stroke="black"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        lines.append(
            f'<text x="{sx(tick):.1f}" y="{sy(0) + 18:.1f}" font-size="11" text-anchor="middle">{tick}</text>'
        )
        lines.append(
            f'<text x="{sx(0) - 8:.1f}" y="{sy(tick) + 4:.1f}" font-size="11" text-anchor="end">{tick}</text>'
        )
    lines.append(
        f'<text x="{(sx(0) + sx(1)) / 2:.1f}" y="{h - 12}" font-size="13" text-anchor="middle">normalized FP remaining</text>'
    )
    lines.append(
        f'<text x="16" y="{(sy(0) + sy(1)) / 2:.1f}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {(sy(0) + sy(1)) / 2:.1f})">normalized TP remaining</text>'
    )
    for i, (method, points) in enumerate(curves.items()):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(p.fp_norm):.2f},{sy(p.tp_norm):.2f}" for p in points)
        lines.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        label = method if auc is None else f"{method} ({auc[method]:.2f}%)"
        ly = mt + 16 + 16 * i
        lines.append(
            f'<line x1="{w - mr + 10}" y1="{ly - 4}" x2="{w - mr + 34}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
        )
        lines.append(f'<text x="{w - mr + 40}" y="{ly}" font-size="11">{label}</text>')
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def build_report(
    scores: Mapping[str, Mapping[tuple, float]],
    lesions: Sequence[tuple],
    dice: Mapping[str, float] | None = None,
) -> EvalReport:
    """One AUC and one rho(uncertainty, size) per method.

    lesions are (scan_id, lesion_id, size, tp) tuples defining the
    evaluation universe; every method must score every lesion.  The
    universe is ordered by (scan_id, lesion_id), which also fixes
    tie-breaking inside the curves.
    """
    universe = sorted((str(s), int(l), int(size), bool(tp)) for s, l, size, tp in lesions)
    keys = [(s, l) for s, l, _, _ in universe]
    sizes = np.array([size for _, _, size, _ in universe], dtype=np.float64)
    tps = [tp for _, _, _, tp in universe]
    methods = list(scores.keys())
    auc, rho, curves = {}, {}, {}
    for method in methods:
        table = scores[method]
        missing = [k for k in keys if k not in table]
        if missing:
            raise ReportError(f"method {method!r} missing scores for {missing[:3]}")
        u = [float(table[k]) for k in keys]
        points, a = accuracy_confidence_curve(list(zip(u, tps)))
        auc[method] = a
        rho[method] = spearman_rho(u, sizes)
        curves[method] = points
    return EvalReport(
        methods=methods,
        auc=auc,
        spearman=rho,
        curves=curves,
        dice=dict(dice or {}),
        tp_total=sum(tps),
        fp_total=len(tps) - sum(tps),
    )
