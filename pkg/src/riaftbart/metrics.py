"""Evaluation metrics: PEHE, GPS-subclass bias/RMSE, selection accuracy and
the concordance statistic."""
from __future__ import annotations

import numpy as np

# (GPS_1 interval, GPS_2 interval) per subclass; intervals are (lo, hi].
GPS_SUBCLASSES = (
    ((0, .1), (0, 1)),
    ((0, .2), (0, .25)), ((0, .2), (.25, .5)), ((0, .2), (.5, .75)), ((0, .2), (.75, 1)),
    ((.2, .4), (0, .2)), ((.2, .4), (.2, .4)), ((.2, .4), (.4, .6)), ((.2, .4), (.6, .8)),
    ((.2, .4), (.8, 1)),
    ((.4, .5), (0, .1)), ((.4, .5), (.1, .3)), ((.4, .5), (.3, .4)), ((.4, .5), (.4, .5)),
    ((.4, .5), (.5, .6)), ((.4, .5), (.6, .7)), ((.4, .5), (.7, 1)),
    ((.5, .6), (0, .2)), ((.5, .6), (.2, .3)), ((.5, .6), (.3, .4)), ((.5, .6), (.4, .5)),
    ((.5, .6), (.5, .6)), ((.5, .6), (.6, .7)), ((.5, .6), (.7, .8)), ((.5, .6), (.8, 1)),
    ((.6, .7), (0, .3)), ((.6, .7), (.3, .5)), ((.6, .7), (.5, .6)), ((.6, .7), (.6, .7)),
    ((.6, .7), (.7, 1)),
    ((.7, .8), (0, .3)), ((.7, .8), (.3, .5)), ((.7, .8), (.5, .7)), ((.7, .8), (.7, 1)),
    ((.8, .9), (0, .4)), ((.8, .9), (.4, .6)), ((.8, .9), (.6, 1)),
    ((.9, 1), (0, .4)), ((.9, 1), (.4, .6)), ((.9, 1), (.6, 1)),
)


def metric_pehe(est, truth):
    est, truth = np.asarray(est, float), np.asarray(truth, float)
    if est.shape != truth.shape:
        raise ValueError("estimate and truth must be aligned")
    return float(np.sqrt(np.mean((est - truth) ** 2)))


def gps_subclass(gps, boundaries=GPS_SUBCLASSES):
    """1-based subclass id per row; the first matching subclass wins.

    ``gps`` is (n, >=2) with treatment-1 and treatment-2 propensities in its
    first two columns. Rows matching no subclass get 0.
    """
    g1, g2 = np.asarray(gps)[:, 0], np.asarray(gps)[:, 1]
    out = np.zeros(g1.shape[0], dtype=int)
    for s, ((a1, b1), (a2, b2)) in enumerate(boundaries, start=1):
        hit = (out == 0) & (g1 > a1) & (g1 <= b1) & (g2 > a2) & (g2 <= b2)
        out[hit] = s
    return out


def metric_bias_rmse_by_gps(est, truth, gps, boundaries=GPS_SUBCLASSES):
    """Per-subclass subgroup-averaged effects.

    ``est`` and ``truth`` are (R, n) across replicates (or a single (n,) row)
    and ``gps`` matches them. For each subclass: relative bias of the mean
    subgroup average and RMSE of the subgroup averages over replicates.
    Returns a list of dicts; empty subclasses are marked absent.
    """
    est = np.atleast_2d(np.asarray(est, float))
    truth = np.atleast_2d(np.asarray(truth, float))
    gps = np.asarray(gps, float)
    if gps.ndim == 2:
        gps = np.broadcast_to(gps, (est.shape[0],) + gps.shape)
    rows = []
    labels = np.stack([gps_subclass(g, boundaries) for g in gps])
    for s in range(1, len(boundaries) + 1):
        e_avg, t_avg, count = [], [], 0
        for r in range(est.shape[0]):
            hit = labels[r] == s
            if hit.any():
                e_avg.append(est[r, hit].mean())
                t_avg.append(truth[r, hit].mean())
                count += int(hit.sum())
        if not e_avg:
            rows.append({"subclass": s, "present": False, "n": 0})
            continue
        e_avg, t_avg = np.array(e_avg), np.array(t_avg)
        mt = t_avg.mean()
        absolute = abs(mt) < 1e-8
        bias = e_avg.mean() - mt
        rows.append({"subclass": s, "present": True, "n": count / est.shape[0],
                     "bias": float(bias if absolute else bias / abs(mt)),
                     "bias_is_absolute": bool(absolute),
                     "rmse": float(np.sqrt(np.mean((e_avg - t_avg) ** 2)))})
    return rows


def metric_selection(selected, useful, noise):
    """Precision, recall, F1 and Type-I error of one selected set.

    Precision is None when nothing is selected (F1 is then 0).
    """
    sel, useful, noise = set(selected), set(useful), set(noise)
    tp = len(sel & useful)
    fp = len(sel - useful)
    fn = len(useful - sel)
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else 0.0
    # 2PR / (P + R) written on the counts so the ratio is rounded once
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    type1 = len(sel & noise) / len(noise) if noise else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "type1": type1,
            "tp": tp, "fp": fp, "fn": fn}


def metric_concordance(pred, y, delta):
    """Harrell-type concordance with predicted survival probabilities.

    A pair is comparable when the shorter observed time is an event; it is
    concordant when that individual has the lower predicted survival. Ties in
    prediction count one half.
    """
    pred, y, delta = np.asarray(pred, float), np.asarray(y, float), np.asarray(delta, int)
    if not (pred.shape == y.shape == delta.shape):
        raise ValueError("inputs must be aligned")
    order = np.argsort(y, kind="stable")
    p, t, d = pred[order], y[order], delta[order]
    conc = 0.0
    total = 0
    for i in np.flatnonzero(d == 1):
        later = t > t[i]
        m = int(later.sum())
        if m == 0:
            continue
        total += m
        conc += np.sum(p[later] > p[i]) + 0.5 * np.sum(p[later] == p[i])
    if total == 0:
        raise ValueError("no comparable pairs")
    return float(conc / total)
