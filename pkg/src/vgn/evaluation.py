"""Pixel-pooled precision-recall curves, average precision and max F1."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class PRCurve:
    """Operating points in increasing threshold order (recall non-increasing).

    A pixel is predicted positive at threshold ``t`` when its score is >= t;
    the thresholds are the distinct scores.
    """

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @property
    def ap(self):
        return average_precision(self)

    @property
    def max_f1(self):
        return max_f1(self)

    def points(self):
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))


def _pool(preds, gts, masks):
    if isinstance(preds, np.ndarray):
        preds, gts = [preds], [gts]
        masks = None if masks is None else [masks]
    if len(preds) != len(gts) or (masks is not None and len(masks) != len(preds)):
        raise ValueError("preds, gts and masks must have equal lengths")
    scores, labels = [], []
    for k, (p, g) in enumerate(zip(preds, gts)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g)
        if p.ndim == 3:
            p = p[:, :, 0]
        if g.ndim == 3:
            g = g[:, :, 0]
        if p.shape != g.shape:
            raise ValueError(f"prediction {p.shape} and GT {g.shape} differ")
        keep = np.ones(p.shape, dtype=bool)
        if masks is not None and masks[k] is not None:
            keep = np.asarray(masks[k], dtype=bool)
            if keep.shape != p.shape:
                raise ValueError(f"mask {keep.shape} and prediction {p.shape} differ")
        scores.append(p[keep])
        labels.append(g[keep] > 0.5)
    return np.concatenate(scores), np.concatenate(labels)


def pr_curve(preds, gts, masks=None):
    """Exact PR curve over all distinct predicted values, pooled over images."""
    scores, labels = _pool(preds, gts, masks)
    positives = int(labels.sum())
    if positives == 0:
        raise ValueError("no positive ground-truth pixels: recall undefined")
    if np.isnan(scores).any():
        raise ValueError("NaN in predictions")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of each run of equal scores (descending)
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall = tp_at / positives
    return PRCurve(s[ends][::-1].copy(), precision[::-1].copy(), recall[::-1].copy())


def average_precision(curve):
    """Step-interpolated AP: sum of (r_k - r_{k-1}) * p_k, thresholds descending."""
    r = curve.recall[::-1]
    p = curve.precision[::-1]
    prev = np.r_[0.0, r[:-1]]
    return float(np.sum((r - prev) * p))


def max_f1(curve):
    p, r = curve.precision, curve.recall
    ok = (p + r) > 0
    if not ok.any():
        return 0.0
    return float(np.max(2 * p[ok] * r[ok] / (p[ok] + r[ok])))


# -- reports --------------------------------------------------------------------

def _slug(method):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", method) or "method"


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "precision", "recall"))
        for t, p, r in curve.points():
            w.writerow((repr(t), repr(p), repr(r)))


def read_curve_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    return PRCurve(col("threshold"), col("precision"), col("recall"))


def read_summary_csv(path):
    with open(path, newline="") as fh:
        return {r["method"]: (float(r["ap"]), float(r["max_f1"])) for r in csv.DictReader(fh)}


def plot_curves(curves):
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib.figure import Figure

    fig = Figure(figsize=(5, 5))
    ax = fig.add_subplot()
    for method, c in curves.items():
        ax.plot(c.recall, c.precision, drawstyle="steps-post",
                label=f"{method} (AP={c.ap:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    return fig


def emit_report(curves, out_dir, plot=True):
    """Write ``curve_<method>.csv`` per method, ``summary.csv`` and optionally
    ``pr_curves.svg``. Returns the written paths."""
    if not curves:
        raise ValueError("need at least one curve")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for method, c in curves.items():
        path = out / f"curve_{_slug(method)}.csv"
        write_curve_csv(c, path)
        written.append(path)
    summary = out / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "ap", "max_f1"))
        for method, c in curves.items():
            w.writerow((method, repr(c.ap), repr(c.max_f1)))
    written.append(summary)
    if plot:
        import matplotlib
        fig = plot_curves(curves)
        svg = out / "pr_curves.svg"
        with matplotlib.rc_context({"svg.hashsalt": "vgn"}):
            fig.savefig(svg, format="svg", metadata={"Date": None})
        written.append(svg)
    return written
