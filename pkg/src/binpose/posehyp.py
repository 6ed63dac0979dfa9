"""Per-detection pose hypotheses: center offsets, binned angles and depth.

Each detection box is pooled to a 7x7 patch of the shared feature map.  Small
MLP heads regress the box-normalised center of the object origin and classify
pitch, yaw, roll and depth into bins.  Hypotheses are the Cartesian product of
the top bins of every head, scored by the product of their probabilities,
thinned by pose NMS and cut to the five most confident.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .geometry import Box2D, Pose6D, pose_arrays, sym_distance
from .numerics import Dense, ReLU, Sequential, softmax, softmax_cross_entropy

log = logging.getLogger(__name__)

ROI_SIZE = 7
ANGLE_HEADS = ("pitch", "yaw", "roll")
_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class BinSpec:
    """``count`` equal bins over [lo, hi); bin centers are the representatives."""

    count: int
    lo: float
    hi: float
    periodic: bool = False

    def __post_init__(self):
        if self.count < 1 or not self.lo < self.hi:
            raise ContractError(f"invalid bins: count={self.count}, range=[{self.lo}, {self.hi})")

    @property
    def width(self):
        return (self.hi - self.lo) / self.count

    def centers(self):
        return self.lo + (np.arange(self.count) + 0.5) * self.width

    def center(self, k):
        return self.lo + (np.asarray(k) + 0.5) * self.width

    def normalize(self, value):
        """Position of ``value`` in the range as a fraction in [0, 1]."""
        return float(np.clip((value - self.lo) / (self.hi - self.lo), 0.0, 1.0))

    def encode(self, value, clamp=False, tol=1e-6):
        """Bin index of ``value``.

        Periodic ranges wrap.  Otherwise values outside the range raise, or are
        clamped with a warning if ``clamp`` is set.
        """
        v = np.asarray(value, dtype=np.float64)
        if self.periodic:
            v = self.lo + np.mod(v - self.lo, self.hi - self.lo)
        else:
            outside = (v < self.lo - tol) | (v > self.hi + tol)
            if np.any(outside):
                if not clamp:
                    raise ContractError(
                        f"value {v[outside].ravel()[0]:.6g} outside bin range "
                        f"[{self.lo:.6g}, {self.hi:.6g}]")
                log.warning("clamping %d value(s) into [%g, %g]", int(np.sum(outside)),
                            self.lo, self.hi)
        k = np.floor((v - self.lo) / self.width).astype(np.int64)
        k = np.clip(k, 0, self.count - 1)
        return int(k) if k.ndim == 0 else k


@dataclass
class HeadConfig:
    """Bin layout of the classification heads.

    ``pitch`` is None for axially symmetric models: with the rotation
    convention used here, rotation about the model symmetry axis (y) is the
    pitch component.
    """

    pitch: BinSpec | None = field(default_factory=lambda: BinSpec(30, 0.0, _TWO_PI, True))
    yaw: BinSpec = field(default_factory=lambda: BinSpec(13, -math.pi / 2, math.pi / 2))
    roll: BinSpec = field(default_factory=lambda: BinSpec(30, 0.0, _TWO_PI, True))
    depth: BinSpec = field(default_factory=lambda: BinSpec(140, 0.8, 2.1))

    @classmethod
    def for_scene(cls, bin_half_extents, radius_factors=(2.0, 3.0), axial=False, counts=None):
        """Depth range = camera radius range widened by half the bin diagonal."""
        counts = counts or {}
        diag = 2.0 * float(np.linalg.norm(bin_half_extents))
        lo = radius_factors[0] * diag - diag / 2
        hi = radius_factors[1] * diag + diag / 2
        return cls(
            pitch=None if axial else BinSpec(counts.get("pitch", 30), 0.0, _TWO_PI, True),
            yaw=BinSpec(counts.get("yaw", 13), -math.pi / 2, math.pi / 2),
            roll=BinSpec(counts.get("roll", 30), 0.0, _TWO_PI, True),
            depth=BinSpec(counts.get("depth", 140), lo, hi))

    @property
    def heads(self):
        """Present classification heads in fixed order."""
        out = {}
        for name in ("pitch", "yaw", "roll", "depth"):
            spec = getattr(self, name)
            if spec is not None:
                out[name] = spec
        return out


def conceptual_combinations(cfg):
    """Size of the full product space of all classification heads."""
    return int(np.prod([s.count for s in cfg.heads.values()], dtype=np.int64))


def encode_pose_bins(pose, cfg, clamp_depth=True):
    """Ground-truth bin index per head for a (canonical) camera-frame pose."""
    bins = {}
    for name, spec in cfg.heads.items():
        value = pose.t[2] if name == "depth" else getattr(pose, name)
        bins[name] = spec.encode(value, clamp=clamp_depth and name == "depth")
    return bins


# ------------------------------------------------------------------ roi pooling

def roi_indices(box, feature_shape, stride=4, size=ROI_SIZE):
    """Feature rows/cols sampled by nearest neighbour over ``box``."""
    if box.w < 2 or box.h < 2:
        raise ContractError(f"degenerate box {box.to_list()} (< 2 px)")
    fh, fw = feature_shape
    k = np.arange(size) + 0.5
    xs = box.c_x + k * box.w / size
    ys = box.c_y + k * box.h / size
    cols = np.clip(np.floor(xs / stride).astype(np.int64), 0, fw - 1)
    rows = np.clip(np.floor(ys / stride).astype(np.int64), 0, fh - 1)
    return rows, cols


def roi_extract(features, box, stride=4, size=ROI_SIZE):
    """(C, size, size) patch of a (C, Hf, Wf) feature map."""
    rows, cols = roi_indices(box, features.shape[1:], stride, size)
    return features[:, rows[:, None], cols[None, :]]


def roi_batch(features, image_index, boxes, stride=4, size=ROI_SIZE):
    """Patches (M, C, size, size) for boxes on images of a (N, C, Hf, Wf) batch.

    Returns the patches and the index tuple needed by :func:`roi_backward`.
    """
    m = len(boxes)
    rows = np.empty((m, size), dtype=np.int64)
    cols = np.empty((m, size), dtype=np.int64)
    for i, box in enumerate(boxes):
        rows[i], cols[i] = roi_indices(box, features.shape[2:], stride, size)
    img = np.asarray(image_index, dtype=np.int64)
    index = (img[:, None, None], rows[:, :, None], cols[:, None, :])
    patches = features[index[0], :, index[1], index[2]]  # (M, size, size, C)
    return np.ascontiguousarray(patches.transpose(0, 3, 1, 2)), index


def roi_backward(grad_patches, index, feature_shape, dtype):
    """Scatter patch gradients back onto the feature map (duplicates accumulate)."""
    dfeat = np.zeros(feature_shape, dtype=dtype)
    img, rows, cols = index
    np.add.at(dfeat, (img, slice(None), rows, cols), grad_patches.transpose(0, 2, 3, 1))
    return dfeat


# ------------------------------------------------------------------- the heads

class PoseHeads:
    """Offset regressor and per-quantity bin classifiers on flattened patches."""

    def __init__(self, cfg, in_features=32 * ROI_SIZE * ROI_SIZE, hidden=256, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.in_features = in_features
        sizes = {"offset": 2}
        sizes.update({name: spec.count for name, spec in cfg.heads.items()})
        self.nets = {name: Sequential([Dense(in_features, hidden, rng), ReLU(),
                                       Dense(hidden, out, rng)], ["fc1", "relu", "fc2"])
                     for name, out in sizes.items()}

    @property
    def params(self):
        return tuple(p for net in self.nets.values() for p in net.params)

    def named_params(self, prefix=""):
        out = {}
        for name, net in self.nets.items():
            out.update(net.named_params(f"{prefix}{name}."))
        return out

    def forward(self, patches, ctx=None):
        """Raw outputs per head: offsets (M, 2) and logits (M, bins)."""
        x = patches.reshape(len(patches), -1)
        if ctx is not None:
            ctx["x"] = x
        out = {}
        for name, net in self.nets.items():
            sub = {} if ctx is not None else None
            out[name] = net.forward(x, sub)
            if ctx is not None:
                ctx[name] = sub
        return out

    def backward(self, patches, grads, ctx):
        """Accumulate parameter gradients; returns d(patches)."""
        x = ctx["x"]
        dx = np.zeros_like(x)
        for name, g in grads.items():
            dx += self.nets[name].backward(x, g, ctx[name])
        return dx.reshape(patches.shape)

    def probabilities(self, outputs):
        return {name: softmax(outputs[name].astype(np.float64)) for name in self.cfg.heads}


def decode_offset(pred, box):
    """Box-normalised (x, y) -> image point."""
    return (box.c_x + pred[0] * box.w, box.c_y + pred[1] * box.h)


def encode_offset(point, box):
    return ((point[0] - box.c_x) / box.w, (point[1] - box.c_y) / box.h)


def offset_loss(pred_center, gt_center, box):
    """L1 distance of box-normalised centers for one detection."""
    p = encode_offset(pred_center, box)
    g = encode_offset(gt_center, box)
    return abs(p[0] - g[0]) + abs(p[1] - g[1])


def offset_loss_batch(pred, target):
    """Batch mean of the normalised-center L1 loss and its gradient."""
    n = len(pred)
    if n == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - target
    return float(np.abs(diff).sum() / n), (np.sign(diff) / n).astype(pred.dtype)


def classification_loss(logits, gt_bins):
    """Summed per-head mean negative log-likelihood; returns (total, per-head, grads)."""
    total, parts, grads = 0.0, {}, {}
    for name, lg in logits.items():
        targets = np.asarray(gt_bins[name], dtype=np.int64)
        if np.any((targets < 0) | (targets >= lg.shape[1])):
            raise ContractError(f"{name} ground-truth bin out of range")
        loss, grad = softmax_cross_entropy(lg, targets)
        parts[name], grads[name] = loss, grad.astype(lg.dtype)
        total += loss
    return total, parts, grads


def decode_translation(center2d, z, intrinsics):
    """Back-project pixel ``center2d`` at depth ``z`` through (fx, fy, cx, cy)."""
    fx, fy, cx, cy = intrinsics
    u, v = center2d
    return np.array([(u - cx) * z / fx, (v - cy) * z / fy, z], dtype=np.float64)


# ------------------------------------------------------------------ hypotheses

@dataclass
class PoseHypothesis:
    pose: Pose6D
    confidence: float
    detection_index: int
    box: Box2D
    bins: dict = field(default_factory=dict)
    frame_id: str = ""
    score: float | None = None  # registration logit once rescored

    def to_dict(self):
        d = {"frame": self.frame_id, "detection": int(self.detection_index),
             "pose": self.pose.to_dict(), "confidence": float(self.confidence),
             "box": self.box.to_list(), "bins": {k: int(v) for k, v in self.bins.items()}}
        if self.score is not None:
            d["score"] = float(self.score)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(Pose6D.from_dict(d["pose"]), d["confidence"], d["detection"],
                   Box2D(*d["box"]), d.get("bins", {}), d.get("frame", ""), d.get("score"))


def enumerate_hypotheses(probs, center2d, cfg, intrinsics, k_per_head=3, detection_index=0,
                         box=None):
    """Cartesian product of the top-k bins per head, scored by probability product."""
    names = list(cfg.heads)
    tops = []
    for name in names:
        p = np.asarray(probs[name], dtype=np.float64)
        k = min(k_per_head, len(p))
        order = np.argsort(-p, kind="stable")[:k]
        tops.append(order)
    grids = np.meshgrid(*tops, indexing="ij")
    combos = np.stack([g.ravel() for g in grids], axis=1)
    conf = np.ones(len(combos))
    for j, name in enumerate(names):
        conf *= np.asarray(probs[name], dtype=np.float64)[combos[:, j]]
    out = []
    for combo, c in zip(combos, conf):
        bins = {name: int(b) for name, b in zip(names, combo)}
        angles = {a: (float(cfg.heads[a].center(bins[a])) if a in bins else 0.0)
                  for a in ANGLE_HEADS}
        z = float(cfg.depth.center(bins["depth"]))
        t = decode_translation(center2d, z, intrinsics)
        out.append(PoseHypothesis(Pose6D(angles["pitch"], angles["yaw"], angles["roll"], t),
                                  float(c), detection_index, box, bins))
    return out


def pose_nms(hypotheses, model, dist_threshold=None, limit=None):
    """Greedy descending-confidence suppression at sym distance < threshold.

    With ``limit`` the scan stops once that many hypotheses are kept, which
    equals truncating the full result, but only distances to kept poses are
    ever computed.
    """
    if not hypotheses:
        return []
    if dist_threshold is None:
        dist_threshold = 0.05 * model.bsphere_diameter
    limit = len(hypotheses) if limit is None else limit
    conf = np.array([h.confidence for h in hypotheses])
    order = np.argsort(-conf, kind="stable")
    poses = [h.pose for h in hypotheses]
    kept = []
    if model.axial:
        for i in order:
            if len(kept) >= limit:
                break
            if not any(sym_distance(poses[j], poses[i], model) < dist_threshold for j in kept):
                kept.append(int(i))
        return [hypotheses[i] for i in kept]
    # placed model points per hypothesis, plain and under each symmetry rotation
    R, t = pose_arrays(poses)
    v = model.vertices
    plain = np.einsum("nij,vj->nvi", R, v) + t[:, None, :]
    sym = np.stack([np.einsum("nij,vj->nvi", R, v @ g.T) + t[:, None, :]
                    for g in model.symmetry.finite_rotations], axis=1)
    for i in order:
        if len(kept) >= limit:
            break
        if kept:
            d = np.linalg.norm(sym[kept] - plain[i], axis=-1).mean(-1).min(-1)
            if np.any(d < dist_threshold):
                continue
        kept.append(int(i))
    return [hypotheses[i] for i in kept]


def select_top(hypotheses, n=5):
    """The ``n`` most confident hypotheses, ties kept in input order."""
    conf = np.array([h.confidence for h in hypotheses])
    order = np.argsort(-conf, kind="stable")[:n]
    return [hypotheses[i] for i in order]


def write_hypotheses(path, hypotheses):
    """JSON lines, one hypothesis per line."""
    with open(path, "w") as fh:
        for h in hypotheses:
            fh.write(json.dumps(h.to_dict(), sort_keys=True) + "\n")


def read_hypotheses(path):
    with open(path) as fh:
        return [PoseHypothesis.from_dict(json.loads(line)) for line in fh if line.strip()]
