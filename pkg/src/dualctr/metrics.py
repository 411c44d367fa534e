"""Calibration and ranking metrics for CTR predictions."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

EPS = 1e-12


def auc(y, p):
    """Rank-based ROC AUC (Mann-Whitney U); tied scores count one half."""
    y = np.asarray(y).astype(bool)
    p = np.asarray(p, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    r = rankdata(p)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pairs(y, p):
    """All-pairs AUC, quadratic; a reference for :func:`auc`."""
    y = np.asarray(y).astype(bool)
    p = np.asarray(p, dtype=np.float64)
    pos, neg = p[y], p[~y]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0) + 0.5 * (diff == 0)).mean())


def log_loss(y, p):
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())


def overconfident_fraction(p, cut=0.01):
    """Share of predictions in ``[0, cut]`` or ``[1 - cut, 1]``."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.mean((p <= cut) | (p >= 1.0 - cut)))


def histograms(p, bins=10):
    """Prediction histograms over the full range and the two extreme deciles."""
    p = np.asarray(p, dtype=np.float64)
    out = {}
    for name, lo, hi in (("full", 0.0, 1.0), ("low", 0.0, 0.1), ("high", 0.9, 1.0)):
        counts, edges = np.histogram(p, bins=bins, range=(lo, hi))
        out[name] = {"edges": edges.tolist(), "counts": counts.tolist()}
    return out


def calibration_report(y, p, var=None, bins=10, cut=0.01):
    rep = {"n": int(len(p)), "auc": auc(y, p), "log_loss": log_loss(y, p),
           "overconfident_fraction": overconfident_fraction(p, cut),
           "mean_predictive_variance": float(np.mean(var)) if var is not None else 0.0,
           "histograms": histograms(p, bins)}
    return rep
