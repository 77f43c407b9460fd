"""Slide-level aggregation and evaluation metrics.

The contest point table and weighted-confidence formula are injectable;
the defaults are documented on ``PointTable`` and ``weighted_confidence``.
"""
import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

SCHEMA_VERSION = 1


@dataclass
class SlideScore:
    slide_id: str
    predicted_class: int
    confidence: float
    per_tile_probs: np.ndarray
    fold_id: int = 0
    gt: int | None = None
    flags: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "slide_id": self.slide_id,
            "predicted_class": int(self.predicted_class),
            "confidence": float(self.confidence),
            "fold_id": int(self.fold_id),
            "gt": None if self.gt is None else int(self.gt),
            "mean_probs": np.asarray(self.per_tile_probs).mean(0).round(6).tolist(),
        }


def _probs(per_tile_probs):
    p = np.asarray(per_tile_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValueError("per_tile_probs must be an N x C matrix with N >= 1")
    return p


def aggregate_dominant(per_tile_probs):
    """Majority vote of per-tile arg-max classes.

    Ties go to the larger summed probability, then to the lower class index.
    """
    p = _probs(per_tile_probs)
    votes = np.bincount(p.argmax(1), minlength=p.shape[1])
    mass = p.sum(0)
    tied = np.flatnonzero(votes == votes.max())
    best = tied[mass[tied] == mass[tied].max()]
    return int(best.min())


def aggregate_mean(per_tile_probs):
    """Mean probability vector; returns ``(class, confidence)`` with confidence = its max."""
    mean = _probs(per_tile_probs).mean(0)
    return int(np.argmax(mean)), float(mean.max())


def slide_score(slide_id, per_tile_probs, rule="dominant", fold_id=0, gt=None):
    """``SlideScore`` under the ``dominant`` or ``mean`` rule.

    For the dominant rule the confidence is the mean probability of the
    voted class across tiles.
    """
    p = _probs(per_tile_probs)
    if rule == "dominant":
        cls = aggregate_dominant(p)
        conf = float(p[:, cls].mean())
    elif rule == "mean":
        cls, conf = aggregate_mean(p)
    else:
        raise ValueError(f"unknown aggregation rule {rule!r}")
    return SlideScore(slide_id, cls, conf, p, fold_id, gt)


def aggregate_folds(per_fold_probs):
    """Cross-fold mean of per-fold mean probability vectors -> (class, mean vector)."""
    means = np.stack([_probs(p).mean(0) for p in per_fold_probs])
    pooled = means.mean(0)
    return int(np.argmax(pooled)), pooled


@dataclass
class PointTable:
    """Points awarded by ``|gt - pred|``; must be non-increasing with 15 for a match.

    The default (15, 10, 5, 0) is a documented stand-in for the contest table.
    ``overrides`` maps ``(gt, pred)`` pairs to points.
    """

    points: tuple = (15.0, 10.0, 5.0, 0.0)
    overrides: dict = field(default_factory=dict)
    max_points: float = 15.0

    def __post_init__(self):
        pts = list(self.points)
        if not pts or pts[0] != self.max_points:
            raise ValueError("an exact match must earn max_points")
        if any(b > a for a, b in zip(pts, pts[1:])):
            raise ValueError("points must be non-increasing in |gt - pred|")

    def lookup(self, gt, pred):
        key = (int(gt), int(pred))
        if key in self.overrides:
            return float(self.overrides[key])
        d = abs(int(gt) - int(pred))
        return float(self.points[min(d, len(self.points) - 1)])

    @classmethod
    def from_mapping(cls, mapping):
        """Build from a flat mapping like ``{"diff_0": 15, "diff_1": 10, "pair_0_1": 12.5}``."""
        diffs = sorted((int(k.split("_")[1]), float(v)) for k, v in mapping.items() if k.startswith("diff_"))
        overrides = {}
        for k, v in mapping.items():
            if k.startswith("pair_"):
                _, g, p = k.split("_")
                overrides[(int(g), int(p))] = float(v)
        points = tuple(v for _, v in diffs) if diffs else cls.points
        return cls(points=points, overrides=overrides, max_points=float(mapping.get("max_points", 15.0)))


def agreement_points(gt, pred, table=None):
    """Per-case points (array) for paired labels."""
    table = table or PointTable()
    return np.array([table.lookup(g, p) for g, p in zip(gt, pred)], dtype=np.float64)


def confidence_weights(gt, pred, confidence):
    """Per case: the confidence when correct, one minus it when wrong."""
    gt, pred, c = map(np.asarray, (gt, pred, confidence))
    c = c.astype(np.float64)
    if np.any((c < 0) | (c > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    return np.where(gt == pred, c, 1.0 - c)


def weighted_confidence(gt, pred, confidence, scale=25.0):
    """Default contest-style score: ``scale * mean(confidence weights)``."""
    return float(scale * confidence_weights(gt, pred, confidence).mean())


def combined_points(points, weights):
    """Sum over cases of agreement points times confidence weight."""
    return float(np.sum(np.asarray(points, float) * np.asarray(weights, float)))


def accuracy(gt, pred):
    gt, pred = np.asarray(gt), np.asarray(pred)
    return float((gt == pred).mean()) if gt.size else float("nan")


def f1_score(gt, pred, positive_class=1):
    gt, pred = np.asarray(gt), np.asarray(pred)
    tp = np.sum((pred == positive_class) & (gt == positive_class))
    fp = np.sum((pred == positive_class) & (gt != positive_class))
    fn = np.sum((pred != positive_class) & (gt == positive_class))
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def auroc(gt, scores):
    """Mann-Whitney rank statistic with mid-ranks for ties."""
    gt = np.asarray(gt).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = gt.sum(), (~gt).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined when ground truth has a single class")
    ranks = rankdata(scores)
    return float((ranks[gt].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def report(scores, n_classes, table=None, positive_class=1):
    """Metrics for a list of ``SlideScore`` with known ``gt``."""
    gt = [s.gt for s in scores]
    pred = [s.predicted_class for s in scores]
    conf = [s.confidence for s in scores]
    pts = agreement_points(gt, pred, table)
    w = confidence_weights(gt, pred, conf)
    out = {
        "n_slides": len(scores),
        "accuracy": accuracy(gt, pred),
        "agreement_points": float(pts.sum()),
        "weighted_confidence": weighted_confidence(gt, pred, conf),
        "combined_points": combined_points(pts, w),
    }
    if n_classes == 2:
        out["f1"] = f1_score(gt, pred, positive_class)
        pos = [float(np.asarray(s.per_tile_probs).mean(0)[positive_class]) for s in scores]
        try:
            out["auroc"] = auroc([g == positive_class for g in gt], pos)
        except ValueError:
            out["auroc"] = None
    return out


def write_report(path_json, path_csv, summary, scores):
    payload = {"schema_version": SCHEMA_VERSION, **summary, "slides": [s.to_dict() for s in scores]}
    with open(path_json, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    with open(path_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "fold", "gt", "predicted", "confidence"])
        for s in scores:
            w.writerow([s.slide_id, s.fold_id, s.gt, s.predicted_class, f"{s.confidence:.6f}"])
    return payload
