"""AUROC, per-region overlap (PRO) curves and normalised AUPRO."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .geometry import PointCloud, median_spacing, radius_components

DEFAULT_LIMITS = (0.3, 0.2, 0.1, 0.07, 0.05, 0.03, 0.01)


class MetricUndefined(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(positive outranks negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("undefined AUROC: one class absent")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray


def roc_curve(scores, labels) -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if labels.all() or not labels.any():
        raise MetricUndefined("undefined ROC: one class absent")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return RocCurve(np.r_[0.0, fp / fp[-1]], np.r_[0.0, tp / tp[-1]])


@dataclass
class ProCurve:
    fpr: np.ndarray
    pro: np.ndarray
    n_regions: int = 0


def pro_curve(scores, labels, regions) -> ProCurve:
    """PRO as a function of FPR, one point per distinct score threshold (descending).

    Starts at (0, 0) for the threshold above every score.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if not regions:
        raise MetricUndefined("no anomaly regions")
    neg = ~labels
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise MetricUndefined("no normal points")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    last = np.r_[s[1:] != s[:-1], True]
    fp = np.cumsum(neg[order])[last]
    # per-region flagged counts are integers, so full coverage gives exactly 1
    pro = np.zeros(int(last.sum()))
    for reg in regions:
        hit = np.zeros(len(scores))
        hit[np.asarray(reg)] = 1.0
        pro += np.cumsum(hit[order])[last] / len(reg)
    pro /= len(regions)
    return ProCurve(np.r_[0.0, fp / n_neg], np.r_[0.0, pro], len(regions))


def aupro_at(curve: ProCurve, limit: float = 0.3) -> float:
    """Trapezoidal area under PRO over FPR in [0, limit], divided by ``limit``."""
    if not 0.0 < limit <= 1.0:
        raise ValueError("limit must be in (0, 1]")
    x, y = curve.fpr, curve.pro
    inside = x <= limit
    xs, ys = x[inside], y[inside]
    j = int(inside.sum())
    if j < len(x) and xs[-1] < limit:
        x0, x1, y0, y1 = x[j - 1], x[j], y[j - 1], y[j]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs = np.r_[xs, limit]
        ys = np.r_[ys, y_lim]
    area = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))
    return area / limit


def gt_regions(cloud: PointCloud, labels, radius: float | None = None) -> list[np.ndarray]:
    """Ground-truth regions: radius-graph components of the label-1 points.

    The default radius is twice the median nearest-neighbour spacing.
    """
    if radius is None:
        radius = 2.0 * median_spacing(cloud)
    return radius_components(cloud, labels, radius)


@dataclass
class EvalReport:
    o_auroc: float
    p_auroc: float
    aupro: dict  # limit -> value
    meta: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"o_auroc": self.o_auroc, "p_auroc": self.p_auroc}
        for lim, v in self.aupro.items():
            out[aupro_key(lim)] = v
        return out


def aupro_key(limit: float) -> str:
    return f"aupro_{int(round(limit * 100)):02d}"


def evaluate_all(
    point_scores: list,
    object_scores,
    point_labels: list,
    regions: list,
    limits=DEFAULT_LIMITS,
    sample_ids=None,
) -> EvalReport:
    """Pooled P-AUROC, O-AUROC over object scores, per-sample-mean AUPRO per limit.

    AUPRO is averaged over the samples that contain at least one region.
    """
    sample_ids = list(sample_ids) if sample_ids is not None else list(range(len(point_scores)))
    obj_labels = np.array([int(np.any(lab)) for lab in point_labels])
    try:
        o = auroc(object_scores, obj_labels)
    except MetricUndefined as e:
        raise MetricUndefined(f"O-AUROC over samples {sample_ids}: {e}") from None
    try:
        p = auroc(np.concatenate(point_scores), np.concatenate(point_labels))
    except MetricUndefined as e:
        raise MetricUndefined(f"P-AUROC: {e}") from None
    per_limit = {lim: [] for lim in limits}
    used = 0
    for sid, sc, lab, reg in zip(sample_ids, point_scores, point_labels, regions):
        if not reg:
            continue
        try:
            curve = pro_curve(sc, lab, reg)
        except MetricUndefined as e:
            raise MetricUndefined(f"PRO for sample {sid}: {e}") from None
        used += 1
        for lim in limits:
            per_limit[lim].append(aupro_at(curve, lim))
    if used == 0:
        raise MetricUndefined("AUPRO: no sample has anomaly regions")
    aupro = {lim: float(np.mean(v)) for lim, v in per_limit.items()}
    return EvalReport(o, p, aupro, {"samples": len(point_scores), "anomalous_samples": used})


REPORT_COLUMNS = ["category", "sample_count", "o_auroc", "p_auroc"] + [aupro_key(x) for x in DEFAULT_LIMITS]


def write_reports(rows: list[dict], csv_path, json_path=None) -> None:
    """CSV report plus its JSON mirror. Each row needs the REPORT_COLUMNS keys."""
    cols = list(REPORT_COLUMNS)
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in cols})
    if json_path is not None:
        Path(json_path).write_text(json.dumps(rows, indent=2, sort_keys=True))
