"""Shared depth backbone and a single-class anchor detector.

Box regression uses an L1 loss on anchor-relative deltas, objectness a binary
cross entropy over sampled anchors; inference decodes, thresholds and applies
greedy box NMS.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .geometry import Box2D, iou_matrix
from .numerics import (Conv3x3, MaxPool2x2, ReLU, Sequential, binary_cross_entropy_with_logits,
                       l1_loss, sigmoid)

FEATURE_CHANNELS = 32
STRIDE = 4
_MAX_LOG_SCALE = np.log(1000.0 / 16.0)


def normalize_depth(depth, near, far):
    """Map [near, far] affinely onto [0, 1]; background (>= far) becomes 1."""
    d = np.asarray(depth, dtype=np.float32)
    out = (d - near) / (far - near)
    out = np.where(d >= far, 1.0, out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_backbone(rng):
    """conv-relu x4 with 2x2 max pooling after blocks 2 and 4 (stride 4, 32 channels)."""
    layers = [Conv3x3(1, 8, rng=rng), ReLU(), Conv3x3(8, 16, rng=rng), ReLU(), MaxPool2x2(),
              Conv3x3(16, 32, rng=rng), ReLU(), Conv3x3(32, FEATURE_CHANNELS, rng=rng), ReLU(),
              MaxPool2x2()]
    names = ["conv1", "relu1", "conv2", "relu2", "pool1", "conv3", "relu3", "conv4", "relu4",
             "pool2"]
    return Sequential(layers, names)


def backbone_input(images, near, far, image_size):
    """Stack DepthImages into a normalised (N, 1, H, W) float32 batch."""
    width, height = image_size
    batch = []
    for img in images:
        if (img.width, img.height) != (width, height):
            raise ContractError(
                f"image size {img.width}x{img.height} does not match configured {width}x{height}")
        batch.append(normalize_depth(img.depth, near, far))
    return np.stack(batch)[:, None]


@dataclass
class AnchorGrid:
    image_size: tuple = (128, 128)  # (width, height)
    stride: int = STRIDE
    sizes: tuple = (16, 24, 32)

    def __post_init__(self):
        w, h = self.image_size
        if w % self.stride or h % self.stride:
            raise ContractError("image size must be a multiple of the backbone stride")
        fw, fh = w // self.stride, h // self.stride
        jj, ii = np.meshgrid(np.arange(fw), np.arange(fh))
        cx = (jj.reshape(-1) + 0.5) * self.stride
        cy = (ii.reshape(-1) + 0.5) * self.stride
        sizes = np.asarray(self.sizes, dtype=np.float64)
        cx = np.repeat(cx, len(sizes))
        cy = np.repeat(cy, len(sizes))
        s = np.tile(sizes, fw * fh)
        self.feature_shape = (fh, fw)
        self.anchors = np.column_stack([cx - s / 2, cy - s / 2, s, s])

    @property
    def count(self):
        return len(self.anchors)

    @property
    def per_cell(self):
        return len(self.sizes)


def encode_boxes(boxes, anchors):
    """Deltas (dx/w_a, dy/h_a, log(w/w_a), log(h/h_a)) of top-left boxes vs anchors."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    bc = boxes[:, :2] + boxes[:, 2:] / 2
    ac = anchors[:, :2] + anchors[:, 2:] / 2
    return np.column_stack([(bc - ac) / anchors[:, 2:], np.log(boxes[:, 2:] / anchors[:, 2:])])


def decode_boxes(deltas, anchors):
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    ac = anchors[:, :2] + anchors[:, 2:] / 2
    wh = anchors[:, 2:] * np.exp(np.clip(deltas[:, 2:], -_MAX_LOG_SCALE, _MAX_LOG_SCALE))
    c = ac + deltas[:, :2] * anchors[:, 2:]
    return np.column_stack([c - wh / 2, wh])


POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


def assign_anchors(anchors, gt_boxes, pos_iou=0.5, neg_iou=0.2):
    """Per-anchor label (1 positive, 0 negative, -1 ignore) and matched GT index.

    Positive: IoU >= ``pos_iou`` with some GT, or the best anchor of a GT
    (lowest index on ties).  Negative: max IoU < ``neg_iou``.
    """
    a = len(anchors)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(a, NEGATIVE, dtype=np.int64)
    matched = np.full(a, -1, dtype=np.int64)
    if len(gt) == 0:
        return labels, matched
    iou = iou_matrix(anchors, gt)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(a), best_gt]
    labels[best_iou >= neg_iou] = IGNORE
    labels[best_iou >= pos_iou] = POSITIVE
    matched[:] = best_gt
    for g in range(len(gt)):
        k = int(np.argmax(iou[:, g]))  # argmax returns the lowest index on ties
        if iou[k, g] > 0:
            labels[k] = POSITIVE
            matched[k] = g
    matched[labels != POSITIVE] = -1
    return labels, matched


def detection_loss(raw, labels, matched, gt_boxes, anchors, rng, max_pos=64, max_neg=64):
    """Objectness BCE over sampled anchors + L1 on positive deltas.

    ``raw`` is (A, 5): objectness logit then 4 deltas.  The L1 term is the sum
    over the 4 coordinates averaged over sampled positives.  Returns
    ``(total, objectness, box, grad)``.
    """
    pos = np.where(labels == POSITIVE)[0]
    neg = np.where(labels == NEGATIVE)[0]
    if len(pos) > max_pos:
        pos = np.sort(rng.choice(pos, max_pos, replace=False))
    if len(neg) > max_neg:
        neg = np.sort(rng.choice(neg, max_neg, replace=False))
    grad = np.zeros_like(raw)
    idx = np.concatenate([pos, neg])
    target = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))]).astype(raw.dtype)
    obj, g_obj = binary_cross_entropy_with_logits(raw[idx, 0], target)
    grad[idx, 0] = g_obj
    box = 0.0
    if len(pos):
        gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        tgt = encode_boxes(gt[matched[pos]], anchors[pos]).astype(raw.dtype)
        box, g_box = l1_loss(raw[pos, 1:], tgt, len(pos))
        grad[pos, 1:] = g_box
    return obj + box, obj, box, grad


def box_nms(boxes, scores, iou_threshold=0.5):
    """Greedy suppression at IoU > threshold; returns kept indices by descending score."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), bool)
    iou = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= iou[i] > iou_threshold
    return keep


@dataclass
class Detection:
    box: Box2D
    score: float


def make_detection_head(rng, per_cell):
    return Sequential([Conv3x3(FEATURE_CHANNELS, 32, rng=rng), ReLU(),
                       Conv3x3(32, 5 * per_cell, rng=rng)], ["conv1", "relu1", "conv2"])


def head_to_raw(out, per_cell):
    """(N, 5*S, Hf, Wf) head output -> (N, A, 5) in anchor order."""
    n, _, fh, fw = out.shape
    return out.reshape(n, per_cell, 5, fh, fw).transpose(0, 3, 4, 1, 2).reshape(n, -1, 5)


def raw_to_head(grad_raw, per_cell, feature_shape):
    n = grad_raw.shape[0]
    fh, fw = feature_shape
    return np.ascontiguousarray(
        grad_raw.reshape(n, fh, fw, per_cell, 5).transpose(0, 3, 4, 1, 2).reshape(
            n, 5 * per_cell, fh, fw))


def postprocess(raw, grid, score_threshold=0.05, nms_threshold=0.5, max_detections=40):
    """Decode one image's (A, 5) raw output into clipped, NMS-filtered detections."""
    scores = sigmoid(raw[:, 0].astype(np.float64))
    keep = np.where(scores >= score_threshold)[0]
    if len(keep) == 0:
        return []
    boxes = decode_boxes(raw[keep, 1:], grid.anchors[keep])
    width, height = grid.image_size
    x0 = np.clip(boxes[:, 0], 0, width)
    y0 = np.clip(boxes[:, 1], 0, height)
    x1 = np.clip(boxes[:, 0] + boxes[:, 2], 0, width)
    y1 = np.clip(boxes[:, 1] + boxes[:, 3], 0, height)
    boxes = np.column_stack([x0, y0, x1 - x0, y1 - y0])
    valid = (boxes[:, 2] > 1e-3) & (boxes[:, 3] > 1e-3)
    boxes, s = boxes[valid], scores[keep][valid]
    kept = box_nms(boxes, s, nms_threshold)[:max_detections]
    return [Detection(Box2D(*boxes[i]), float(s[i])) for i in kept]


def detection_recall(detections, gt_boxes, iou_threshold=0.5):
    """Fraction of GT boxes covered by some detection at IoU >= threshold."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt) == 0:
        return 1.0, 0, 0
    if not detections:
        return 0.0, 0, len(gt)
    det = np.array([d.box.as_array() for d in detections])
    hit = (iou_matrix(gt, det) >= iou_threshold).any(axis=1)
    return float(hit.mean()), int(hit.sum()), len(gt)
