"""Evaluation metrics, curves and the prediction-dump file format.

Classification dumps mark out-of-distribution rows with ``in_dist=False``;
those rows never count as correct, whatever class was predicted.  For OOD
detection the positive class is "out of distribution" and the detection
score is ``1 - confidence``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataFormatError
from .sampler import mixture_log_pdf

OOD_LABEL = -1


@dataclass
class ClassificationDump:
    ids: np.ndarray
    labels: np.ndarray
    preds: np.ndarray
    confidence: np.ndarray
    in_dist: np.ndarray
    p_label: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.preds = np.asarray(self.preds, dtype=np.int64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.in_dist = np.asarray(self.in_dist, dtype=bool)
        if self.p_label is not None:
            self.p_label = np.asarray(self.p_label, dtype=np.float64)
        n = self.ids.size
        for name in ("labels", "preds", "confidence", "in_dist"):
            if getattr(self, name).size != n:
                raise ContractError(f"dump column {name} has {getattr(self, name).size} rows, expected {n}")
        if n and (self.confidence.min() < 0 or self.confidence.max() > 1):
            raise ContractError("confidence must lie in [0, 1]")

    def __len__(self):
        return self.ids.size

    @property
    def correct(self):
        return self.in_dist & (self.preds == self.labels)

    @classmethod
    def from_probs(cls, probs, labels, in_dist=None, ids=None):
        probs = np.asarray(probs, dtype=np.float64)
        n = probs.shape[0]
        labels = np.asarray(labels, dtype=np.int64)
        in_dist = np.ones(n, dtype=bool) if in_dist is None else np.asarray(in_dist, dtype=bool)
        ids = np.arange(n) if ids is None else ids
        p_label = np.where(in_dist, probs[np.arange(n), np.clip(labels, 0, probs.shape[1] - 1)], np.nan)
        conf = np.clip(probs.max(axis=1), 0.0, 1.0)
        return cls(ids, np.where(in_dist, labels, OOD_LABEL), probs.argmax(axis=1), conf, in_dist, p_label)

    def subset(self, mask):
        return ClassificationDump(self.ids[mask], self.labels[mask], self.preds[mask], self.confidence[mask],
                                  self.in_dist[mask], None if self.p_label is None else self.p_label[mask])


@dataclass
class RegressionDump:
    ids: np.ndarray
    targets: np.ndarray
    mus: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.mus = np.atleast_2d(np.asarray(self.mus, dtype=np.float64))
        self.vars = np.atleast_2d(np.asarray(self.vars, dtype=np.float64))
        if self.mus.shape != self.vars.shape or self.mus.shape[0] != self.targets.size:
            raise ContractError("regression dump components do not match targets")

    def __len__(self):
        return self.ids.size

    @property
    def mean(self):
        return self.mus.mean(axis=1)


def _nonempty(dump, kind):
    if kind is not None and not isinstance(dump, kind):
        raise ContractError(f"expected a {kind.__name__}, got {type(dump).__name__}")
    if len(dump) == 0:
        raise ContractError("empty dump")


def rmse(dump):
    _nonempty(dump, RegressionDump)
    return float(np.sqrt(np.mean((dump.mean - dump.targets) ** 2)))


def regression_mixture_nll(dump):
    """Mean negative log density of the targets, ``log(2*pi)/2`` included."""
    _nonempty(dump, RegressionDump)
    return float(-np.mean(mixture_log_pdf(dump.targets, dump.mus, dump.vars)))


def accuracy(dump):
    _nonempty(dump, ClassificationDump)
    return float(dump.correct.mean())


def classification_nll(dump):
    _nonempty(dump, ClassificationDump)
    if dump.p_label is None:
        raise ContractError("dump carries no probability of the true label")
    p = dump.p_label[dump.in_dist]
    if p.size == 0:
        raise ContractError("no in-distribution rows")
    return float(-np.mean(np.log(np.clip(p, 1e-300, None))))


def _bin_index(conf, bins):
    """Bin ``b`` holds confidences in ``(b/bins, (b+1)/bins]``; zero joins the first bin."""
    edges = np.arange(bins + 1) / bins
    idx = np.searchsorted(edges, conf, side="left") - 1
    return np.clip(idx, 0, bins - 1)


def ece(dump, bins=15):
    """Expected calibration error over equal-width confidence bins ``(lo, hi]``."""
    _nonempty(dump, ClassificationDump)
    idx = _bin_index(dump.confidence, bins)
    correct = dump.correct.astype(np.float64)
    n = len(dump)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        nb = int(sel.sum())
        if nb:
            total += nb / n * abs(correct[sel].mean() - dump.confidence[sel].mean())
    return float(total)


def _roc_points(scores, positive):
    """ROC/PR operating points at every distinct threshold, highest first."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    pos = positive[order].astype(np.float64)
    distinct = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(pos)[distinct]
    fp = (distinct + 1) - tp
    return tp, fp


def roc_metrics(scores, ood):
    """``(AUC, AUPR, FPR at 95% TPR)`` with out-of-distribution as the positive class.

    ``scores`` are detection scores (higher means more likely OOD).  A
    sample is flagged when its score is at least the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    ood = np.asarray(ood, dtype=bool).ravel()
    if scores.size != ood.size:
        raise ContractError("scores and flags differ in length")
    P = int(ood.sum())
    Nn = ood.size - P
    if P == 0 or Nn == 0:
        raise ContractError("roc metrics need both in- and out-of-distribution examples")
    tp, fp = _roc_points(scores, ood)
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / Nn]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    precision = tp / (tp + fp)
    recall = tp / P
    aupr = float(np.sum((recall - np.r_[0.0, recall[:-1]]) * precision))
    fpr95 = float(fpr[1:][tpr[1:] >= 0.95].min())
    return auc, aupr, fpr95


def ood_metrics(dump):
    return roc_metrics(1.0 - dump.confidence, ~dump.in_dist)


@dataclass
class CurveData:
    x: np.ndarray
    value: np.ndarray
    support: np.ndarray

    def rows(self):
        return list(zip(self.x.tolist(), self.value.tolist(), self.support.tolist()))


def accuracy_vs_confidence(dump, thresholds=None):
    """Accuracy over examples whose confidence is at least each threshold."""
    _nonempty(dump, ClassificationDump)
    if thresholds is None:
        thresholds = np.linspace(0.0, 1.0, 21)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    correct = dump.correct
    vals, sup = [], []
    for tau in thresholds:
        sel = dump.confidence >= tau
        n = int(sel.sum())
        sup.append(n)
        vals.append(correct[sel].mean() if n else np.nan)
    return CurveData(thresholds.copy(), np.array(vals, dtype=np.float64), np.array(sup, dtype=np.int64))


def _bins(dump, bins, strategy):
    conf = dump.confidence
    if strategy == "width":
        idx = _bin_index(conf, bins)
        x = (np.arange(bins) + 0.5) / bins
        return [idx == b for b in range(bins)], x
    if strategy == "count":
        order = np.argsort(conf, kind="mergesort")
        masks = []
        for chunk in np.array_split(order, bins):
            m = np.zeros(conf.size, dtype=bool)
            m[chunk] = True
            masks.append(m)
        x = np.array([conf[m].mean() if m.any() else np.nan for m in masks])
        return masks, x
    raise ContractError(f"binning strategy must be 'width' or 'count', got {strategy!r}")


def calibration_curve(dump, bins=10, strategy="width"):
    _nonempty(dump, ClassificationDump)
    masks, x = _bins(dump, bins, strategy)
    correct = dump.correct
    vals = np.array([correct[m].mean() if m.any() else np.nan for m in masks])
    return CurveData(x, vals, np.array([int(m.sum()) for m in masks]))


def _macro_precision(dump, mask):
    preds = dump.preds[mask]
    correct = dump.correct[mask]
    precs = [correct[preds == c].mean() for c in np.unique(preds)]
    return float(np.mean(precs))


def precision_calibration_curve(dump, bins=10, strategy="width"):
    """Per-bin precision averaged over the classes predicted in that bin."""
    _nonempty(dump, ClassificationDump)
    masks, x = _bins(dump, bins, strategy)
    vals = np.array([_macro_precision(dump, m) if m.any() else np.nan for m in masks])
    return CurveData(x, vals, np.array([int(m.sum()) for m in masks]))


# --- dump files --------------------------------------------------------------

CLS_HEADER = ["id", "label", "pred", "confidence", "in_dist", "p_label"]
REG_HEADER = ["id", "target", "mu", "sigma2_json"]


def _fmt(x):
    return repr(float(x))


def write_dump(path, dump):
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        if isinstance(dump, ClassificationDump):
            w.writerow(CLS_HEADER)
            p = dump.p_label if dump.p_label is not None else np.full(len(dump), np.nan)
            for row in zip(dump.ids, dump.labels, dump.preds, dump.confidence, dump.in_dist, p):
                w.writerow([row[0], int(row[1]), int(row[2]), _fmt(row[3]), int(row[4]),
                            "" if math.isnan(row[5]) else _fmt(row[5])])
        else:
            w.writerow(REG_HEADER)
            for i, t, mus, vs in zip(dump.ids, dump.targets, dump.mus, dump.vars):
                comps = [[float(a), float(b)] for a, b in zip(mus, vs)]
                w.writerow([i, _fmt(t), _fmt(mus.mean()), json.dumps(comps)])
    return path


def read_dump(path):
    path = Path(path)
    try:
        with path.open(newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise DataFormatError(f"cannot read dump {path}: {exc}") from exc
    if not rows:
        raise DataFormatError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    try:
        if header[:5] == CLS_HEADER[:5]:
            has_p = len(header) > 5
            p = np.array([float(r[5]) if has_p and r[5] != "" else np.nan for r in body])
            return ClassificationDump(
                np.array([r[0] for r in body]),
                np.array([int(r[1]) for r in body], dtype=np.int64),
                np.array([int(r[2]) for r in body], dtype=np.int64),
                np.array([float(r[3]) for r in body]),
                np.array([r[4] in ("1", "true", "True") for r in body]),
                p if has_p else None,
            )
        if header == REG_HEADER:
            comps = [json.loads(r[3]) for r in body]
            return RegressionDump(
                np.array([r[0] for r in body]),
                np.array([float(r[1]) for r in body]),
                np.array([[c[0] for c in row] for row in comps]).reshape(len(body), -1),
                np.array([[c[1] for c in row] for row in comps]).reshape(len(body), -1),
            )
    except (ValueError, IndexError) as exc:
        raise DataFormatError(f"malformed dump {path}: {exc}") from exc
    raise DataFormatError(f"unrecognised dump header in {path}: {header}")


def write_curve(path, curve):
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "value", "support"])
        for x, v, s in curve.rows():
            w.writerow([_fmt(x), "" if math.isnan(v) else _fmt(v), int(s)])
    return path
