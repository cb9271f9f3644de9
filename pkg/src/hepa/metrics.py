"""Metrics over probability surfaces.

Undefined values (single-class AUROC, no usable horizon) are returned as
``None`` rather than a number.
"""
import math

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError

PREVALENCE_MIN = 0.001
PREVALENCE_MAX = 0.999
N_BINS = 10
N_THRESHOLDS = 101


def auroc(scores, labels):
    """P(random positive outscores random negative), ties worth one half.

    Rank-sum form. The numerator is kept as an exact integer (twice the
    Mann-Whitney U), so the result equals pair counting bit for bit.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks2 = (2.0 * rankdata(scores, method="average")).astype(np.int64)
    u2 = int(ranks2[labels].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def per_horizon_auroc(surface):
    """Per-horizon AUROC over valid cells pooled across anchors.

    Returns a list of dicts with ``dt, auroc, prevalence, n``; ``auroc`` is
    None for skipped horizons (prevalence outside [0.001, 0.999] or one class).
    """
    out = []
    for j in range(surface.K):
        m = surface.mask[:, j]
        n = int(m.sum())
        y = surface.y[m, j]
        prev = float(y.mean()) if n else math.nan
        a = None
        if n and PREVALENCE_MIN <= prev <= PREVALENCE_MAX:
            a = auroc(surface.p[m, j], y)
        out.append({"dt": j + 1, "auroc": a, "prevalence": prev, "n": n})
    return out


def h_auroc(surface):
    """Unweighted mean of retained per-horizon AUROCs: ``(value, per_horizon, n_valid)``."""
    if surface.n_rows == 0:
        raise ContractError("empty surface")
    rows = per_horizon_auroc(surface)
    vals = [r["auroc"] for r in rows if r["auroc"] is not None]
    value = float(np.mean(vals)) if vals else None
    return value, [r["auroc"] for r in rows], len(vals)


# -- point-estimate projections --------------------------------------------

def event_mass(p):
    """P(event at dt) for dt = 1..K plus the residual survival mass (last column)."""
    p = np.asarray(p, dtype=np.float64)
    p = np.atleast_2d(p)
    first = np.diff(p, axis=1, prepend=0.0)
    resid = 1.0 - p[:, -1:]
    return np.concatenate([first, resid], axis=1)


def expected_time(p):
    """``sum dt * P(at dt) + (K + 1) * residual`` per row."""
    mass = event_mass(p)
    K = mass.shape[1] - 1
    return mass @ np.arange(1, K + 2, dtype=np.float64)


def rmse_projection(surface, rul_true):
    rul_true = np.asarray(rul_true, dtype=np.float64)
    if rul_true.shape != (surface.n_rows,) or np.any(~np.isfinite(rul_true)):
        raise ContractError("ground-truth time-to-event needed for every anchor")
    tau = expected_time(surface.p)
    return float(np.sqrt(np.mean((tau - rul_true) ** 2)))


# -- F1 family ---------------------------------------------------------------

def f1_score(pred, truth):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def _cells(surface, horizon):
    j = horizon - 1
    if not 0 <= j < surface.K:
        raise ContractError(f"horizon {horizon} outside 1..{surface.K}")
    m = surface.mask[:, j]
    return surface.p[m, j], surface.y[m, j]


def threshold_f1(surface, horizon=1, threshold=0.5):
    p, y = _cells(surface, horizon)
    return f1_score(p >= threshold, y)


def choose_threshold(surface, horizon=1, n=N_THRESHOLDS):
    """Threshold maximising F1 over ``n`` evenly spaced values in [0, 1]."""
    p, y = _cells(surface, horizon)
    grid = np.linspace(0.0, 1.0, n)
    scores = [f1_score(p >= th, y) for th in grid]
    return float(grid[int(np.argmax(scores))])


def segments(labels):
    """``(start, stop)`` pairs of contiguous runs of True."""
    x = np.concatenate([[0], np.asarray(labels, dtype=np.int8), [0]])
    d = np.diff(x)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def point_adjust(pred, labels):
    """Mark a whole true segment detected when any step inside it is detected."""
    adj = np.asarray(pred, dtype=bool).copy()
    for a, b in segments(labels):
        if adj[a:b].any():
            adj[a:b] = True
    return adj


def pa_f1_track(scores, labels, threshold):
    """``(pa_f1, non_pa_f1)`` on one per-step track."""
    pred = np.asarray(scores) >= threshold
    labels = np.asarray(labels, dtype=bool)
    return f1_score(point_adjust(pred, labels), labels), f1_score(pred, labels)


def pa_f1(surface, threshold):
    """PA-F1 and non-PA F1 on the smallest-horizon track of each episode.

    ``y(t, 1)`` flags an event at ``t + 1``, so each episode's column 0 ordered
    by ``t`` is a per-step event track. Predictions are pooled across episodes.
    """
    preds, adj, truth = [], [], []
    for ep in np.unique(surface.episode):
        rows = np.flatnonzero((surface.episode == ep) & surface.mask[:, 0])
        rows = rows[np.argsort(surface.t[rows])]
        lab = surface.y[rows, 0].astype(bool)
        pr = surface.p[rows, 0] >= threshold
        preds.append(pr)
        adj.append(point_adjust(pr, lab))
        truth.append(lab)
    truth = np.concatenate(truth)
    return f1_score(np.concatenate(adj), truth), f1_score(np.concatenate(preds), truth)


# -- calibration -----------------------------------------------------------

def calibration(p, y, n_bins=N_BINS):
    """ECE, Brier and the Murphy decomposition on ``n_bins`` equal-width bins.

    Reliability keeps the within-bin spread of forecasts,
    ``REL = 1/N sum_i [(p_i - ybar_b)^2 - 2 (p_i - ybar_b)(y_i - ybar_b)]`` with
    ``b`` the bin of cell ``i``, so ``Brier = REL - RES + UNC`` holds exactly.
    It reduces to the textbook ``sum_b n_b (pbar_b - ybar_b)^2 / N`` when
    forecasts are constant inside each bin.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    N = p.size
    if N == 0:
        raise ContractError("calibration needs at least one cell")
    b = np.minimum((p * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(b, minlength=n_bins)
    nz = counts > 0
    conf = np.bincount(b, weights=p, minlength=n_bins)
    acc = np.bincount(b, weights=y, minlength=n_bins)
    conf[nz] /= counts[nz]
    acc[nz] /= counts[nz]
    ece = float(np.sum(counts[nz] / N * np.abs(acc[nz] - conf[nz])))
    brier = float(np.mean((p - y) ** 2))
    ybar = y.mean()
    unc = float(ybar * (1.0 - ybar))
    res = float(np.sum(counts * (acc - ybar) ** 2) / N)
    yb = acc[b]
    rel = float(np.sum((p - yb) ** 2 - 2.0 * (p - yb) * (y - yb)) / N)
    return {"ece": ece, "brier": brier, "reliability": rel, "resolution": res, "uncertainty": unc}


# -- report ----------------------------------------------------------------

def metric_report(surface, threshold=0.5, rul_true=None, f1_horizon=1):
    """Flat dict of every surface metric (JSON-ready)."""
    h, per, n_valid = h_auroc(surface)
    valid = surface.mask
    cal = calibration(surface.p[valid], surface.y[valid])
    pa, non_pa = pa_f1(surface, threshold)
    report = {
        "h_auroc": h,
        "n_valid_horizons": n_valid,
        "per_horizon_auroc": per,
        "rmse": rmse_projection(surface, rul_true) if rul_true is not None else None,
        "f1": threshold_f1(surface, f1_horizon, threshold),
        "f1_threshold": threshold,
        "pa_f1": pa,
        "non_pa_f1": non_pa,
    }
    report.update(cal)
    return report
