"""Greedy pose matching, precision-recall curves, AP and F1."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .geometry import add_distance, pairwise_sym_distance, sym_distance

SYM, ADD = "sym", "add"
IGNORED = -1


@dataclass
class EvalConfig:
    criterion: str = SYM
    threshold_factor: float = 0.1
    confidence: str = "confidence"  # or "score" (registration logit)
    min_visibility: float = 0.0

    def __post_init__(self):
        if self.criterion not in (SYM, ADD):
            raise ContractError(f"unknown criterion {self.criterion!r}")
        if not self.threshold_factor > 0:
            raise ContractError("threshold_factor must be positive")

    def threshold(self, model):
        ref = model.bsphere_diameter if self.criterion == SYM else model.diameter
        return self.threshold_factor * ref


def distance_matrix(pred_poses, gt_poses, model, criterion):
    if not pred_poses or not gt_poses:
        return np.zeros((len(pred_poses), len(gt_poses)))
    if criterion == ADD:
        return np.array([[add_distance(p, g, model) for g in gt_poses] for p in pred_poses])
    if model.axial:
        return np.array([[sym_distance(p, g, model) for g in gt_poses] for p in pred_poses])
    return pairwise_sym_distance(pred_poses, gt_poses, model)


def match_frame(pred_poses, gt_poses, model, cfg=None, gt_ignore=None, dist=None):
    """Per-prediction flag: 1 TP, 0 FP, -1 ignored (matched an ignored GT).

    Predictions must already be in descending confidence order.  Each takes
    the nearest unmatched, non-ignored GT closer than the threshold.
    """
    cfg = cfg or EvalConfig()
    thr = cfg.threshold(model)
    if dist is None:
        dist = distance_matrix(pred_poses, gt_poses, model, cfg.criterion)
    ignore = np.zeros(len(gt_poses), bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    used = np.zeros(len(gt_poses), bool)
    flags = np.zeros(len(pred_poses), dtype=np.int64)
    for i in range(len(pred_poses)):
        if not len(gt_poses):
            break
        d = np.where(used | ignore, np.inf, dist[i])
        j = int(np.argmin(d))
        if d[j] < thr:
            used[j] = True
            flags[i] = 1
        elif ignore.any() and np.where(ignore, dist[i], np.inf).min() < thr:
            flags[i] = IGNORED
    return flags


@dataclass
class PRCurve:
    confidences: np.ndarray
    tp: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    total_gt: int


def pr_curve(flags, confidences, total_gt):
    """Global ranking by descending confidence (stable); ignored flags dropped."""
    if total_gt <= 0:
        raise ContractError("average precision undefined with zero ground truth")
    flags = np.asarray(flags, dtype=np.int64)
    conf = np.asarray(confidences, dtype=np.float64)
    keep = flags != IGNORED
    flags, conf = flags[keep], conf[keep]
    order = np.argsort(-conf, kind="stable")
    tp = flags[order]
    ctp = np.cumsum(tp)
    rank = np.arange(1, len(tp) + 1)
    return PRCurve(conf[order], tp, ctp / np.maximum(rank, 1), ctp / total_gt, total_gt)


def average_precision(flags, confidences, total_gt):
    """Area under the precision envelope: sum of recall steps x max precision beyond."""
    curve = pr_curve(flags, confidences, total_gt)
    return ap_from_curve(curve)


def ap_from_curve(curve):
    if len(curve.tp) == 0:
        return 0.0
    envelope = np.maximum.accumulate(curve.precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, curve.recall])
    # correctly rounded, so the value does not depend on summation order
    return math.fsum(steps * envelope)


def f1_best(curve):
    p, r = curve.precision, curve.recall
    denom = p + r
    if len(p) == 0 or not np.any(denom > 0):
        return 0.0
    f1 = np.where(denom > 0, 2 * p * r / np.where(denom > 0, denom, 1), 0.0)
    return float(f1.max())


@dataclass
class Metrics:
    criterion: str
    ap: float
    f1_best: float
    total_gt: int
    curve: PRCurve
    frames: dict = field(default_factory=dict)  # frame id -> list of flags

    def to_dict(self):
        return {"criterion": self.criterion, "ap": self.ap, "f1_best": self.f1_best,
                "total_gt": self.total_gt, "predictions": int(len(self.curve.tp)),
                "true_positives": int(self.curve.tp.sum()),
                "frames": {k: [int(f) for f in v] for k, v in sorted(self.frames.items())}}


def evaluate(predictions, ground_truth, model, cfg=None):
    """Metrics over frames.

    ``predictions``: frame id -> list of (pose, confidence).  ``ground_truth``:
    frame id -> list of (pose, visibility).  GTs below ``min_visibility`` are
    ignored rather than counted as misses.
    """
    cfg = cfg or EvalConfig()
    missing = set(predictions) - set(ground_truth)
    if missing:
        raise ContractError(f"predictions for unknown frames: {sorted(missing)[:3]}")
    all_flags, all_conf, frames, total = [], [], {}, 0
    for fid in sorted(ground_truth):
        gts = ground_truth[fid]
        preds = sorted(predictions.get(fid, []), key=lambda pc: -pc[1])
        gt_poses = [g[0] for g in gts]
        ignore = np.array([g[1] < cfg.min_visibility for g in gts], bool)
        total += int((~ignore).sum())
        flags = match_frame([p[0] for p in preds], gt_poses, model, cfg, ignore)
        frames[fid] = flags.tolist()
        all_flags.extend(flags.tolist())
        all_conf.extend(p[1] for p in preds)
    curve = pr_curve(all_flags, all_conf, total)
    return Metrics(cfg.criterion, ap_from_curve(curve), f1_best(curve), total, curve, frames)


def write_report(metrics, json_path, csv_path):
    """Metrics JSON plus a per-rank PR CSV (rank, confidence, tp, precision, recall)."""
    with open(json_path, "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    c = metrics.curve
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "confidence", "tp", "precision", "recall"])
        for k in range(len(c.tp)):
            w.writerow([k + 1, repr(float(c.confidences[k])), int(c.tp[k]),
                        repr(float(c.precision[k])), repr(float(c.recall[k]))])
