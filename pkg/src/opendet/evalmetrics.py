"""Depth errors, center translation error, distance buckets and a
center-distance average precision, plus CSV and SVG report writers."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, UndefinedMetricError

BUCKETS = (0.0, 20.0, 40.0)
ABSREL_GUARD = 1e-6


@dataclass
class DepthErrors:
    l1: float
    absrel: float
    count: int
    excluded: int = 0  # entries dropped from AbsRel by the small-depth guard


def depth_errors(pred, gt, mask=None):
    """Mean absolute and relative error over ``mask``.

    Ground-truth depths at or below ``1e-6`` are kept in L1 but excluded (and
    counted) from AbsRel.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or m.shape != gt.shape:
        raise DomainError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {m.shape}")
    if not m.any():
        raise UndefinedMetricError("depth errors over an empty mask")
    err = np.abs(pred[m] - gt[m])
    g = gt[m]
    ok = g > ABSREL_GUARD
    absrel = float(np.mean(err[ok] / g[ok])) if ok.any() else float("nan")
    return DepthErrors(float(err.mean()), absrel, int(m.sum()), int((~ok).sum()))


def translation_error(pred_centers, gt_centers):
    """Mean Euclidean distance over matched ``(pred, gt)`` center pairs."""
    p = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if len(p) != len(g):
        raise DomainError(f"{len(p)} predictions but {len(g)} ground truths")
    if len(p) == 0:
        raise UndefinedMetricError("translation error with no matched pairs")
    return float(np.linalg.norm(p - g, axis=1).mean())


def horizontal_distance(xyz):
    xyz = np.asarray(xyz, dtype=np.float64)
    return np.hypot(xyz[..., 0], xyz[..., 1])


def bucket_masks(distances, thresholds=BUCKETS):
    """``{threshold: mask}`` with ``mask = distance > threshold``."""
    d = np.asarray(distances, dtype=np.float64)
    return {float(t): d > t for t in thresholds}


def bucketed(fn, distances, *arrays, thresholds=BUCKETS):
    """Apply ``fn`` to each array filtered by bucket membership.

    Empty buckets map to ``None`` (the undefined-metric marker).
    """
    out = {}
    for t, m in bucket_masks(distances, thresholds).items():
        try:
            out[t] = fn(*(np.asarray(a)[m] for a in arrays))
        except UndefinedMetricError:
            out[t] = None
    return out


def center_distance_ap(detections, gts, threshold, class_aware=True):
    """AP of greedy matching at a center-distance threshold.

    ``detections`` is a list of ``(scene, label, score, center)`` tuples and
    ``gts`` a list of ``(scene, label, center)`` tuples, so several scenes can
    be pooled. Detections are processed by descending score; each one takes
    the nearest unmatched gt of the same scene (and label, when
    ``class_aware``) within ``threshold``. AP is the area under the
    non-interpolated precision-recall step curve.
    """
    if threshold <= 0:
        raise DomainError(f"threshold must be positive, got {threshold}")
    if not gts:
        return 1.0 if not detections else 0.0
    if not detections:
        return 0.0
    pools = {}
    for gi, (scene, label, center) in enumerate(gts):
        pools.setdefault((scene, label if class_aware else 0), []).append(gi)
    gt_centers = np.array([np.asarray(g[2], dtype=np.float64) for g in gts])
    taken = np.zeros(len(gts), dtype=bool)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][2], i))
    tp = np.zeros(len(order))
    for rank, di in enumerate(order):
        scene, label, _, center = detections[di]
        cands = [g for g in pools.get((scene, label if class_aware else 0), []) if not taken[g]]
        if not cands:
            continue
        dist = np.linalg.norm(gt_centers[cands] - np.asarray(center, dtype=np.float64), axis=1)
        k = int(np.argmin(dist))
        if dist[k] <= threshold:
            taken[cands[k]] = True
            tp[rank] = 1.0
    hits = np.cumsum(tp)
    precision = hits / np.arange(1, len(order) + 1)
    recall_step = tp / len(gts)
    return float(np.sum(precision * recall_step))


@dataclass
class Report:
    """Flat metric table: rows of ``(variant, metric, bucket, value)``."""
    rows: list = field(default_factory=list)

    def add(self, variant, metric, bucket, value):
        self.rows.append((variant, metric, bucket, value))

    def get(self, variant, metric, bucket=0.0):
        for v, m, b, val in self.rows:
            if v == variant and m == metric and b == bucket:
                return val
        raise KeyError((variant, metric, bucket))

    def extend(self, other):
        self.rows.extend(other.rows)


def _fmt(value):
    return "undefined" if value is None or (isinstance(value, float) and np.isnan(value)) else repr(float(value))


def write_report_csv(path, report):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["variant", "metric", "bucket", "value"])
        for variant, metric, bucket, value in report.rows:
            out.writerow([variant, metric, f">{bucket:g}", _fmt(value)])


def read_report_csv(path):
    rep = Report()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            val = None if row["value"] == "undefined" else float(row["value"])
            rep.add(row["variant"], row["metric"], float(row["bucket"].lstrip(">")), val)
    return rep


def bar_chart_svg(title, labels, values, width=480, height=300):
    """Minimal standalone SVG bar chart; ``None`` values draw no bar."""
    pad, top = 40, 30
    vals = [0.0 if v is None else float(v) for v in values]
    peak = max(vals + [1e-12])
    slot = (width - 2 * pad) / max(len(vals), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>']
    for i, (lab, v, raw) in enumerate(zip(labels, vals, values)):
        h = (height - pad - top) * v / peak
        x = pad + i * slot + 0.15 * slot
        y = height - pad - h
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{0.7 * slot:.1f}" height="{h:.1f}" fill="#4c72b0"/>')
        parts.append(f'<text x="{x + 0.35 * slot:.1f}" y="{height - pad + 14}" text-anchor="middle" '
                     f'font-size="11">{lab}</text>')
        text = "n/a" if raw is None else f"{v:.3g}"
        parts.append(f'<text x="{x + 0.35 * slot:.1f}" y="{y - 4:.1f}" text-anchor="middle" '
                     f'font-size="11">{text}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report_charts(report):
    """One SVG per ``(metric, bucket)`` comparing variants; ``{name: svg}``."""
    keys = []
    for _, metric, bucket, _ in report.rows:
        if (metric, bucket) not in keys:
            keys.append((metric, bucket))
    charts = {}
    for metric, bucket in keys:
        rows = [(v, val) for v, m, b, val in report.rows if m == metric and b == bucket]
        name = f"{metric}_gt{bucket:g}".replace(".", "_")
        charts[name] = bar_chart_svg(f"{metric} (>{bucket:g} m)", [r[0] for r in rows], [r[1] for r in rows])
    return charts
