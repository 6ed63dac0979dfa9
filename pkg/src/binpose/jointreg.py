"""Relational rescoring of the pose hypotheses of one frame.

Every hypothesis of interest (HOI) is paired with each neighbouring hypothesis
(NH) whose 3D box overlaps its own.  A pair block maps the two appearance
vectors plus a 13-d configuration feature to a 128-d vector; these are
max-pooled over neighbours and a small classifier turns the result into a
true/false positive logit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import box2d_iou, box3d_overlaps, model_box3d, pairwise_sym_distance, sym_distance
from .numerics import Dense, ReLU, Sequential, sigmoid

RELATION_DIM = 13
POSITIVE_WEIGHT = 1.0
NEGATIVE_WEIGHT = 16.0


def bbox_diameter(model):
    """Diagonal of the model's axis-aligned bounding box."""
    v = model.vertices
    return float(np.linalg.norm(v.max(0) - v.min(0)))


def find_neighbors(hypotheses, model):
    """Per-hypothesis list of other hypotheses whose 3D boxes overlap it.

    Isolated hypotheses are paired with themselves.
    """
    n = len(hypotheses)
    if n == 0:
        return []
    boxes = [model_box3d(h.pose, model) for h in hypotheses]
    lo = np.array([b.lo for b in boxes])
    hi = np.array([b.hi for b in boxes])
    overlap = np.all(np.maximum(lo[:, None], lo[None]) < np.minimum(hi[:, None], hi[None]), -1)
    np.fill_diagonal(overlap, False)
    return [list(np.flatnonzero(row)) or [i] for i, row in enumerate(overlap)]


def find_neighbors_bruteforce(hypotheses, model):
    boxes = [model_box3d(h.pose, model) for h in hypotheses]
    out = []
    for i, a in enumerate(boxes):
        nb = [j for j, b in enumerate(boxes) if j != i and box3d_overlaps(a, b)]
        out.append(nb or [i])
    return out


def relation_feature(hoi, nh, model, cfg):
    """13-d configuration feature of the ordered pair (HOI, NH).

    Angles are normalised over their head ranges; an absent head (axial
    models) contributes 0.
    """
    diam = bbox_diameter(model)
    angles = []
    for h in (hoi, nh):
        for name in ("pitch", "yaw", "roll"):
            spec = cfg.heads.get(name)
            angles.append(0.0 if spec is None else spec.normalize(getattr(h.pose, name)))
    delta = (np.asarray(nh.pose.t) - np.asarray(hoi.pose.t)) / diam
    return np.array([hoi.confidence, nh.confidence, box2d_iou(hoi.box, nh.box),
                     *angles, *delta, np.linalg.norm(delta)], dtype=np.float64)


def pair_index(adjacency):
    """Flatten adjacency to (hoi, nh) index arrays grouped by HOI."""
    hoi = np.array([i for i, nbs in enumerate(adjacency) for _ in nbs], dtype=np.int64)
    nh = np.array([j for nbs in adjacency for j in nbs], dtype=np.int64)
    return hoi, nh


def relation_features(hypotheses, adjacency, model, cfg):
    """Stacked :func:`relation_feature` rows for every (HOI, NH) pair, vectorised."""
    hoi, nh = pair_index(adjacency)
    if len(hoi) == 0:
        return np.zeros((0, RELATION_DIM))
    conf = np.array([h.confidence for h in hypotheses], dtype=np.float64)
    boxes = np.array([h.box.as_array() for h in hypotheses], dtype=np.float64)
    t = np.array([h.pose.t for h in hypotheses], dtype=np.float64)
    angles = np.zeros((len(hypotheses), 3))
    for c, name in enumerate(("pitch", "yaw", "roll")):
        spec = cfg.heads.get(name)
        if spec is not None:
            v = np.array([getattr(h.pose, name) for h in hypotheses])
            angles[:, c] = np.clip((v - spec.lo) / (spec.hi - spec.lo), 0.0, 1.0)
    delta = (t[nh] - t[hoi]) / bbox_diameter(model)
    return np.column_stack([conf[hoi], conf[nh], _paired_iou(boxes[hoi], boxes[nh]),
                            angles[hoi], angles[nh], delta, np.linalg.norm(delta, axis=1)])


def _paired_iou(a, b):
    ix = np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    iy = np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    return inter / (a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter)


class RegistrationNet:
    """Appearance projector, stacked pair blocks with max pooling, classifier."""

    def __init__(self, in_features=32 * 7 * 7, appearance=64, hidden=128, n_blocks=1, rng=None):
        if not 1 <= n_blocks <= 3:
            raise ValueError("n_blocks must be between 1 and 3")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.appearance = Sequential([Dense(in_features, appearance, rng), ReLU()],
                                     ["fc", "relu"])
        self.blocks = []
        width = appearance
        for _ in range(n_blocks):
            self.blocks.append(Sequential([Dense(2 * width + RELATION_DIM, hidden, rng), ReLU(),
                                           Dense(hidden, hidden, rng)],
                                          ["fc1", "relu", "fc2"]))
            width = hidden
        self.classifier = Sequential([Dense(hidden, 64, rng), ReLU(), Dense(64, 1, rng)],
                                     ["fc1", "relu", "fc2"])
        self._relu = ReLU()

    @property
    def params(self):
        layers = [self.appearance, *self.blocks, self.classifier]
        return tuple(p for layer in layers for p in layer.params)

    def named_params(self, prefix=""):
        out = self.appearance.named_params(f"{prefix}appearance.")
        for k, block in enumerate(self.blocks):
            out.update(block.named_params(f"{prefix}block{k}."))
        out.update(self.classifier.named_params(f"{prefix}classifier."))
        return out

    def forward(self, patches, relations, adjacency, ctx=None):
        """Per-hypothesis logits (N,) for patches (N, ...) and pair relations (P, 13)."""
        n = len(patches)
        if n == 0:
            return np.zeros(0, dtype=patches.dtype)
        hoi, nh = pair_index(adjacency)
        starts = np.flatnonzero(np.r_[True, hoi[1:] != hoi[:-1]])
        rel = relations.astype(patches.dtype)
        x = patches.reshape(n, -1)
        c = {} if ctx is not None else None
        h = self.appearance.forward(x, c)
        trace = []
        for k, block in enumerate(self.blocks):
            if k > 0:
                h_in = h
                h = self._relu.forward(h_in)
            else:
                h_in = None
            pair_in = np.concatenate([h[hoi], h[nh], rel], axis=1)
            bc = {} if ctx is not None else None
            out = block.forward(pair_in, bc)
            pooled = np.maximum.reduceat(out, starts, axis=0)
            trace.append((h_in, h, pair_in, bc, out, pooled))
            h = pooled
        cc = {} if ctx is not None else None
        logits = self.classifier.forward(h, cc)[:, 0]
        if ctx is not None:
            ctx.update(x=x, app=c, trace=trace, cls=cc, hoi=hoi, nh=nh, starts=starts, h=h)
        return logits

    def backward(self, dlogits, ctx):
        """Accumulate parameter gradients from d(loss)/d(logits)."""
        h = ctx["h"]
        dh = self.classifier.backward(h, dlogits[:, None].astype(h.dtype), ctx["cls"])
        hoi, nh, starts = ctx["hoi"], ctx["nh"], ctx["starts"]
        ends = np.r_[starts[1:], len(hoi)]
        for k in reversed(range(len(self.blocks))):
            h_in, h_blk, pair_in, bc, out, pooled = ctx["trace"][k]
            dout = np.zeros_like(out)
            for i, (s, e) in enumerate(zip(starts, ends)):
                arg = s + np.argmax(out[s:e], axis=0)  # first maximum takes the gradient
                dout[arg, np.arange(out.shape[1])] += dh[i]
            dpair = self.blocks[k].backward(pair_in, dout, bc)
            width = h_blk.shape[1]
            dh = np.zeros_like(h_blk)
            np.add.at(dh, hoi, dpair[:, :width])
            np.add.at(dh, nh, dpair[:, width:2 * width])
            if k > 0:
                dh = self._relu.backward(h_in, dh)
        self.appearance.backward(ctx["x"], dh, ctx["app"])


@dataclass
class LabeledHypothesis:
    hypothesis: object
    label: int

    @property
    def weight(self):
        return POSITIVE_WEIGHT if self.label > 0 else NEGATIVE_WEIGHT


def registration_loss(scores, labels, weights=None, negative_weight=NEGATIVE_WEIGHT):
    """Sum over hypotheses of a * log(1 + exp(-f * y)); returns (loss, grad)."""
    f = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if weights is None:
        weights = np.where(y > 0, POSITIVE_WEIGHT, negative_weight)
    a = np.asarray(weights, dtype=np.float64)
    margin = -f * y
    loss = float((a * np.logaddexp(0.0, margin)).sum())
    grad = -a * y * sigmoid(margin)
    return loss, grad


def assign_labels(hypotheses, gt_poses, model, threshold_factor=0.1):
    """Greedy one-to-one labelling at the Sym acceptance threshold.

    In descending confidence each hypothesis takes the nearest unmatched ground
    truth within ``threshold_factor * bsphere_diameter`` (+1) or gets -1.
    """
    thr = threshold_factor * model.bsphere_diameter
    if not hypotheses:
        return []
    dist = _distances(hypotheses, gt_poses, model)
    conf = np.array([h.confidence for h in hypotheses])
    labels = [None] * len(hypotheses)
    used = np.zeros(len(gt_poses), bool)
    for i in np.argsort(-conf, kind="stable"):
        d = np.where(used, np.inf, dist[i]) if len(gt_poses) else np.array([])
        if d.size and d.min() < thr:
            used[int(np.argmin(d))] = True
            labels[i] = LabeledHypothesis(hypotheses[i], 1)
        else:
            labels[i] = LabeledHypothesis(hypotheses[i], -1)
    return labels


def _distances(hypotheses, gt_poses, model):
    poses = [h.pose for h in hypotheses]
    if not gt_poses:
        return np.zeros((len(poses), 0))
    if model.axial:
        return np.array([[sym_distance(p, g, model) for g in gt_poses] for p in poses])
    return pairwise_sym_distance(poses, gt_poses, model)


def rescore_and_filter(hypotheses, scores, keep_threshold=0.0):
    """Keep hypotheses scoring above the threshold, best first, confidence = sigmoid(score)."""
    scores = np.asarray(scores, dtype=np.float64)
    out = []
    for i in np.argsort(-scores, kind="stable"):
        if scores[i] > keep_threshold:
            h = hypotheses[i]
            out.append(type(h)(h.pose, float(sigmoid(scores[i])), h.detection_index, h.box,
                               dict(h.bins), h.frame_id, float(scores[i])))
    return out
