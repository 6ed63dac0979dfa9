"""The full network, the two training stages and frame inference."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .detect import (IGNORE, NEGATIVE, AnchorGrid, assign_anchors, backbone_input,
                     detection_loss, head_to_raw, make_backbone, make_detection_head,
                     postprocess, raw_to_head)
from .errors import DataError, NumericError
from .geometry import Box2D, iou_matrix
from .jointreg import (RegistrationNet, assign_labels, find_neighbors, registration_loss,
                       relation_features, rescore_and_filter)
from .numerics import adam_step, load_checkpoint, save_checkpoint
from .posehyp import (HeadConfig, PoseHeads, classification_loss, decode_offset, encode_offset,
                      encode_pose_bins, enumerate_hypotheses, offset_loss_batch, pose_nms,
                      roi_batch, roi_backward, select_top)

log = logging.getLogger(__name__)

STAGE_PREFIXES = {"heads": ("backbone.", "detect.", "posehyp."), "jointreg": ("jointreg.",)}


class PoseNetwork:
    """Backbone, detector, pose heads and registration net built from a RunConfig."""

    def __init__(self, cfg, model, seed=None):
        self.cfg = cfg
        self.model = model
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 1])
        self.grid = AnchorGrid(tuple(cfg.views.image_size), 4, tuple(cfg.detect.anchor_sizes))
        ph = cfg.posehyp
        self.head_cfg = HeadConfig.for_scene(
            cfg.scene.bin_half_extents, cfg.views.radius_factors, axial=model.axial,
            counts={"pitch": ph.pitch_bins, "yaw": ph.yaw_bins, "roll": ph.roll_bins,
                    "depth": ph.depth_bins})
        self.backbone = make_backbone(rng)
        self.detector = make_detection_head(rng, self.grid.per_cell)
        self.heads = PoseHeads(self.head_cfg, hidden=ph.hidden, rng=rng)
        jr = cfg.jointreg
        self.registration = RegistrationNet(appearance=jr.appearance, hidden=jr.hidden,
                                            n_blocks=jr.n_blocks, rng=rng)
        for name, p in self.named_params().items():
            p.name = name

    def parts(self):
        return {"backbone": self.backbone, "detect": self.detector, "posehyp": self.heads,
                "jointreg": self.registration}

    def named_params(self):
        out = {}
        for prefix, part in self.parts().items():
            out.update(part.named_params(f"{prefix}."))
        return out

    def stage_params(self, stage):
        return [p for name, p in self.named_params().items()
                if name.startswith(STAGE_PREFIXES[stage])]

    def state(self):
        return {name: p.value for name, p in self.named_params().items()}

    def save(self, path):
        save_checkpoint(path, self.state())

    def load(self, path, prefixes=None):
        """Load tensors (optionally only those with the given prefixes)."""
        params = self.named_params()
        if prefixes:
            params = {k: p for k, p in params.items() if k.startswith(tuple(prefixes))}
        tensors = load_checkpoint(path, {k: p.value.shape for k, p in params.items()})
        for k, p in params.items():
            p.value[...] = tensors[k]
        return tensors

    # ------------------------------------------------------------ forward

    def features(self, images, ctx=None):
        c = self.cfg
        x = backbone_input(images, c.render.near, c.render.far, tuple(c.views.image_size))
        return x, self.backbone.forward(x, ctx)

    def detect_raw(self, feats, ctx=None):
        return head_to_raw(self.detector.forward(feats, ctx), self.grid.per_cell)


# ------------------------------------------------------------ stage 1: heads

def _gt_split(annotation, min_visibility):
    keep = [a for a in annotation.instances if a.visibility >= min_visibility]
    weak = [a for a in annotation.instances if a.visibility < min_visibility]
    return keep, weak


def detection_targets(grid, annotation, cfg):
    """Anchor labels for one frame; weakly visible instances become ignore regions."""
    keep, weak = _gt_split(annotation, cfg.detect.min_visibility)
    gt = np.array([a.box.as_array() for a in keep]).reshape(-1, 4)
    labels, matched = assign_anchors(grid.anchors, gt, cfg.detect.pos_iou, cfg.detect.neg_iou)
    if weak:
        near_weak = (iou_matrix(grid.anchors, [a.box.as_array() for a in weak])
                     >= cfg.detect.neg_iou).any(axis=1)
        labels[near_weak & (labels == NEGATIVE)] = IGNORE
    return labels, matched, gt


def jitter_box(box, amount, rng, width, height):
    """Randomly rescale and shift ``box`` by up to ``amount`` of its size, clipped."""
    sw, sh = rng.uniform(1 - amount, 1 + amount, 2)
    dx, dy = rng.uniform(-amount, amount, 2)
    cx, cy = box.center
    w, h = box.w * sw, box.h * sh
    cx, cy = cx + dx * box.w, cy + dy * box.h
    x0, y0 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
    x1, y1 = min(cx + w / 2, width), min(cy + h / 2, height)
    if x1 - x0 < 2 or y1 - y0 < 2:
        return None
    return Box2D(x0, y0, x1 - x0, y1 - y0)


def pose_targets(annotations, head_cfg, cfg, rng):
    """RoIs (image index, box) with offset and bin targets, GT boxes plus jitter."""
    width, height = cfg.views.image_size
    img, boxes, offsets = [], [], []
    bins = {name: [] for name in head_cfg.heads}
    for b, ann in enumerate(annotations):
        for inst in ann.instances:
            if inst.visibility < cfg.posehyp.train_min_visibility:
                continue
            gt_bins = encode_pose_bins(inst.pose, head_cfg)
            cands = [inst.box.clip(width, height)]
            for _ in range(cfg.posehyp.jitter_copies):
                jb = jitter_box(inst.box, cfg.posehyp.jitter, rng, width, height)
                if jb is not None:
                    cands.append(jb)
            for box in cands:
                if box.w < 2 or box.h < 2:
                    continue
                img.append(b)
                boxes.append(box)
                offsets.append(encode_offset(inst.center2d, box))
                for name in bins:
                    bins[name].append(gt_bins[name])
    return (np.array(img, dtype=np.int64), boxes, np.array(offsets).reshape(-1, 2),
            {k: np.array(v, dtype=np.int64) for k, v in bins.items()})


@dataclass
class StepLoss:
    detection: float
    offset: float
    depth: float
    pose: float
    total: float


def heads_step(net, images, annotations, rng, learning_rate):
    """One ADAM step of the multi-task loss on a batch of frames."""
    cfg = net.cfg
    tw = cfg.train
    bctx, dctx, hctx = {}, {}, {}
    x, feats = net.features(images, bctx)
    raw = net.detect_raw(feats, dctx)
    grad_raw = np.zeros_like(raw)
    det = 0.0
    n = len(images)
    for b, ann in enumerate(annotations):
        labels, matched, gt = detection_targets(net.grid, ann, cfg)
        loss, _, _, g = detection_loss(raw[b], labels, matched, gt, net.grid.anchors, rng,
                                       cfg.detect.max_positives, cfg.detect.max_negatives)
        det += loss / n
        grad_raw[b] = g / n
    dfeat = net.detector.backward(
        feats, raw_to_head(grad_raw * tw.weight_detection, net.grid.per_cell,
                           net.grid.feature_shape), dctx)
    img, boxes, offsets, bins = pose_targets(annotations, net.head_cfg, cfg, rng)
    off = depth = pose = 0.0
    if len(boxes):
        patches, index = roi_batch(feats, img, boxes)
        outs = net.heads.forward(patches, hctx)
        off, g_off = offset_loss_batch(outs["offset"], offsets.astype(patches.dtype))
        _, parts, g_cls = classification_loss({k: outs[k] for k in bins}, bins)
        depth = parts.pop("depth")
        pose = sum(parts.values())
        grads = {"offset": g_off * tw.weight_offset, "depth": g_cls["depth"] * tw.weight_depth}
        for k in parts:
            grads[k] = g_cls[k] * tw.weight_pose
        dpatch = net.heads.backward(patches, grads, hctx)
        dfeat = dfeat + roi_backward(dpatch, index, feats.shape, feats.dtype)
    net.backbone.backward(x, dfeat, bctx)
    total = (tw.weight_detection * det + tw.weight_offset * off + tw.weight_depth * depth
             + tw.weight_pose * pose)
    if not np.isfinite(total):
        raise NumericError(f"non-finite training loss {total}")
    adam_step(net.stage_params("heads"), learning_rate)
    return StepLoss(det, off, depth, pose, float(total))


def train_heads(net, images, annotations, steps=None, seed=None, callback=None):
    """Minimise detection + offset + depth + pose losses; returns the loss trace."""
    cfg = net.cfg
    steps = cfg.train.steps if steps is None else steps
    if not images:
        raise DataError("no training frames")
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 2])
    bs = min(cfg.train.batch_size, len(images))
    trace = []
    order = np.array([], dtype=np.int64)
    for step in range(steps):
        if len(order) < bs:
            order = np.concatenate([order, rng.permutation(len(images))])
        idx, order = order[:bs], order[bs:]
        try:
            loss = heads_step(net, [images[i] for i in idx], [annotations[i] for i in idx], rng,
                              cfg.train.learning_rate)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from exc
        trace.append(loss)
        if callback is not None:
            callback(step, loss)
    return trace


# ------------------------------------------------------------ inference

@dataclass
class FrameResult:
    frame_id: str
    detections: list
    hypotheses: list  # top-n per detection, before registration
    patches: np.ndarray  # one per hypothesis
    scores: np.ndarray | None = None
    final: list = field(default_factory=list)


def frame_hypotheses(net, feats_b, view, frame_id="", use_offset=None):
    """Detections and the top-n pose hypotheses of each for one frame."""
    cfg, ph = net.cfg, net.cfg.posehyp
    use_offset = ph.use_offset if use_offset is None else use_offset
    raw = net.detect_raw(feats_b[None])[0]
    dets = postprocess(raw, net.grid, cfg.detect.score_threshold, cfg.detect.nms_threshold,
                       cfg.detect.max_detections)
    dets = [d for d in dets if d.box.w >= 2 and d.box.h >= 2]
    if not dets:
        return FrameResult(frame_id, [], [], np.zeros((0,) + (feats_b.shape[0], 7, 7),
                                                      feats_b.dtype))
    patches, _ = roi_batch(feats_b[None], np.zeros(len(dets), dtype=np.int64),
                           [d.box for d in dets])
    outs = net.heads.forward(patches)
    probs = net.heads.probabilities(outs)
    intr = (view.fx, view.fy, view.cx, view.cy)
    hyps, hyp_patches = [], []
    thr = ph.nms_factor * net.model.bsphere_diameter
    for k, det in enumerate(dets):
        center = decode_offset(outs["offset"][k], det.box) if use_offset else det.box.center
        cand = enumerate_hypotheses({n: p[k] for n, p in probs.items()}, center, net.head_cfg,
                                    intr, ph.k_per_head, k, det.box)
        for h in cand:
            h.frame_id = frame_id
            if ph.use_detection_score:
                h.confidence *= det.score
        top = select_top(pose_nms(cand, net.model, thr, ph.top_n), ph.top_n)
        hyps.extend(top)
        hyp_patches.extend([patches[k]] * len(top))
    return FrameResult(frame_id, dets, hyps, np.stack(hyp_patches))


def registration_inputs(net, result):
    adjacency = find_neighbors(result.hypotheses, net.model)
    relations = relation_features(result.hypotheses, adjacency, net.model, net.head_cfg)
    return adjacency, relations


def register(net, result, keep_threshold=None):
    """Score a frame's hypotheses with the registration net and filter them."""
    if not result.hypotheses:
        result.scores = np.zeros(0)
        result.final = []
        return result
    adjacency, relations = registration_inputs(net, result)
    result.scores = net.registration.forward(result.patches, relations, adjacency).astype(
        np.float64)
    thr = net.cfg.jointreg.keep_threshold if keep_threshold is None else keep_threshold
    result.final = rescore_and_filter(result.hypotheses, result.scores,
                                      -np.inf if thr is None else thr)
    return result


def infer(net, images, views, frame_ids, use_offset=None, use_registration=True,
          keep_threshold=None, batch=8):
    """Full per-frame pipeline; returns FrameResults in input order."""
    results = []
    for s in range(0, len(images), batch):
        _, feats = net.features(images[s:s + batch])
        for b in range(len(feats)):
            r = frame_hypotheses(net, feats[b], views[s + b], frame_ids[s + b], use_offset)
            if use_registration:
                register(net, r, keep_threshold)
            else:
                r.final = list(r.hypotheses)
            results.append(r)
    return results


# ------------------------------------------------------------ stage 2: jointreg

@dataclass
class RegistrationExample:
    patches: np.ndarray
    relations: np.ndarray
    adjacency: list
    labels: np.ndarray


def registration_examples(net, images, annotations, frame_ids):
    """Hypotheses from the frozen heads with greedy TP/FP labels, per frame."""
    out = []
    results = infer(net, images, [a.view for a in annotations], frame_ids,
                    use_registration=False)
    for r, ann in zip(results, annotations):
        if not r.hypotheses:
            continue
        adjacency, relations = registration_inputs(net, r)
        labels = assign_labels(r.hypotheses, [i.pose for i in ann.instances], net.model,
                               net.cfg.eval.threshold_factor)
        out.append(RegistrationExample(r.patches, relations, adjacency,
                                       np.array([lh.label for lh in labels], dtype=np.float64)))
    return out


def train_registration(net, examples, steps=None, seed=None):
    """Fit only the registration net; all other tensors stay untouched."""
    cfg = net.cfg.jointreg
    steps = cfg.steps if steps is None else steps
    if not examples:
        raise DataError("no hypotheses to train the registration net on")
    rng = np.random.default_rng([net.cfg.seed if seed is None else seed, 3])
    params = net.stage_params("jointreg")
    trace = []
    order = np.array([], dtype=np.int64)
    for step in range(steps):
        if len(order) == 0:
            order = rng.permutation(len(examples))
        ex = examples[order[0]]
        order = order[1:]
        ctx = {}
        scores = net.registration.forward(ex.patches, ex.relations, ex.adjacency, ctx)
        loss, grad = registration_loss(scores, ex.labels, negative_weight=cfg.negative_weight)
        if not np.isfinite(loss):
            raise NumericError(f"step {step}: non-finite registration loss")
        net.registration.backward(grad.astype(scores.dtype), ctx)
        adam_step(params, cfg.learning_rate)
        trace.append(loss)
    return trace


def copy_config(cfg, **sections):
    """RunConfig with some section fields replaced, e.g. posehyp={"use_offset": False}."""
    out = dataclasses.replace(cfg)
    for name, values in sections.items():
        setattr(out, name, dataclasses.replace(getattr(cfg, name), **values))
    return out
