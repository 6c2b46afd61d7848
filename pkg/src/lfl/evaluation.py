"""Metrics (0-1 error, MAE, RMSE, AUC, calibration) and latent-weight clustering."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .model import LflModel, ModelError


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    metric: str
    value: float
    count: int
    std: Optional[float] = None

    def __post_init__(self):
        if self.count < 1:
            raise MetricError("metric needs at least one scored example")
        if not np.isfinite(self.value):
            raise MetricError(f"{self.metric} is not finite")


def _pair(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise MetricError("empty input")
    return pred, truth


def zero_one_error(predictions, truth) -> float:
    p, t = _pair(predictions, truth)
    return float(np.mean(p != t))


def mae(predictions, truth) -> float:
    p, t = _pair(predictions, truth)
    return float(np.mean(np.abs(p.astype(float) - t.astype(float))))


def rmse(predictions, truth) -> float:
    p, t = _pair(predictions, truth)
    return float(np.sqrt(np.mean((p.astype(float) - t.astype(float)) ** 2)))


def auc(scores, truth) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie), via midranks."""
    s, t = _pair(scores, truth)
    s = s.astype(float)
    pos = t.astype(bool)
    n_pos = int(pos.sum())
    n_neg = len(t) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    # midranks over tie groups
    bounds = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(s)]])
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b - 1) + 1.0
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def calibration_report(probabilities, truth, bins: int = 10) -> dict:
    """Equal-width reliability bins and the expected calibration error.

    ``probabilities`` are the predicted probabilities of one designated label
    and ``truth`` the 0/1 indicators of that label.
    """
    if bins < 1:
        raise MetricError("bins must be >= 1")
    p, t = _pair(probabilities, truth)
    p = p.astype(float)
    t = t.astype(float)
    if p.min() < 0 or p.max() > 1:
        raise MetricError("probabilities must lie in [0, 1]")
    idx = np.minimum((p * bins).astype(int), bins - 1)
    table = []
    ece = 0.0
    for b in range(bins):
        m = idx == b
        count = int(m.sum())
        if count == 0:
            table.append({"bin": b, "mean_predicted": None, "frequency": None, "count": 0})
            continue
        mp, fr = float(p[m].mean()), float(t[m].mean())
        ece += count / len(p) * abs(fr - mp)
        table.append({"bin": b, "mean_predicted": mp, "frequency": fr, "count": count})
    return {"bins": table, "ece": float(ece)}


def expected_calibration_error(probabilities, truth, bins: int = 10) -> float:
    return calibration_report(probabilities, truth, bins)["ece"]


# ---- clustering ----------------------------------------------------------------

def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 300):
    """Lloyd's algorithm from ``k`` distinct random points.

    Returns ``(assignments, centers, distortion_trace)``. Empty clusters keep
    their previous center.
    """
    X = np.asarray(points, dtype=float)
    n = len(X)
    if k < 1:
        raise MetricError("k must be >= 1")
    if k > n:
        raise MetricError(f"k = {k} exceeds the number of objects ({n})")
    rng = np.random.default_rng(seed)
    centers = X[rng.choice(n, size=k, replace=False)].copy()
    assign = None
    trace = []
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = X[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    d2 = ((X - centers[assign]) ** 2).sum()
    trace.append(float(d2))
    return assign, centers, trace


def latent_matrix(model: LflModel, which: str = "rows", label: Optional[int] = None) -> np.ndarray:
    """Per-object weight rows used for clustering, frozen bias constants dropped."""
    if which not in ("rows", "cols"):
        raise ModelError("which must be 'rows' or 'cols'")
    p = model.params
    v = model.variant
    if v in ("dyadic", "stereotype"):
        name = "row" if which == "rows" else "col"
        W = p[name]
        if v == "dyadic":
            y = model.base - 1 if label is None else label
            y %= model.n_labels
            if y == model.base:
                raise ModelError("base label weights are identically zero")
            mat, mask = W[y], model.free_mask(name)[y]
        else:
            mat = np.concatenate(list(W), axis=1)
            mask = np.concatenate(list(model.free_mask(name)), axis=1)
    elif v == "symmetric-link":
        mat, mask = p["shared"], model.free_mask("shared")
    else:
        name = "alpha" if which == "rows" else "beta"
        mat, mask = p[name], model.free_mask(name)
    keep = mask.any(axis=0)
    return mat[:, keep]


def cluster_latent(model: LflModel, which: str = "rows", label: Optional[int] = None,
                   clusters: int = 7, seed: int = 0):
    """k-means on per-object latent weights.

    Returns ``(assignments, ordering, trace)`` where ``ordering`` lists object
    indices grouped by cluster (stable within a cluster).
    """
    X = latent_matrix(model, which, label)
    assign, _, trace = kmeans(X, clusters, seed)
    ordering = np.argsort(assign, kind="stable")
    return assign, ordering, trace


# ---- reporting -----------------------------------------------------------------

def format_table(reports) -> str:
    rows = [("metric", "value", "count", "std")]
    for r in reports:
        rows.append((r.metric, f"{r.value:.6f}", str(r.count), "" if r.std is None else f"{r.std:.6f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows)


def to_json_records(reports) -> str:
    return json.dumps([asdict(r) for r in reports], sort_keys=True)


def summarize_runs(metric: str, values, count: int) -> MetricReport:
    """Mean and sample std over repeated runs."""
    values = np.asarray(values, dtype=float)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return MetricReport(metric, float(values.mean()), count, std)
