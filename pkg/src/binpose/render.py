"""Z-buffer depth rasterisation and per-instance ground truth."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ContractError, DataError
from .geometry import Box2D, Pose6D
from .models import canonical_pose


@dataclass
class RenderConfig:
    near: float = 0.1
    far: float = 4.0
    noise_sigma: float = 0.0
    noise_seed: int = 0


@dataclass
class DepthImage:
    width: int
    height: int
    depth: np.ndarray  # (height, width) meters, background = far plane

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32).reshape(self.height, self.width)


@dataclass
class InstanceAnnotation:
    instance_index: int
    box: Box2D
    center2d: tuple
    center_depth: float
    pose: Pose6D  # camera frame, canonical w.r.t. model symmetry
    visibility: float
    visible_pixels: int
    total_pixels: int
    center_outside_box: bool = False

    def to_dict(self):
        return {
            "instance_index": self.instance_index,
            "box": self.box.to_list(),
            "center2d": [float(c) for c in self.center2d],
            "center_depth": float(self.center_depth),
            "pose": self.pose.to_dict(),
            "visibility": float(self.visibility),
            "visible_pixels": int(self.visible_pixels),
            "total_pixels": int(self.total_pixels),
            "center_outside_box": bool(self.center_outside_box),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["instance_index"], Box2D(*d["box"]), tuple(d["center2d"]),
                   d["center_depth"], Pose6D.from_dict(d["pose"]), d["visibility"],
                   d["visible_pixels"], d["total_pixels"], d.get("center_outside_box", False))


@dataclass
class FrameAnnotation:
    view: object
    instances: list = field(default_factory=list)

    def to_dict(self):
        return {"view": self.view.to_dict(), "instances": [a.to_dict() for a in self.instances]}

    @classmethod
    def from_dict(cls, d):
        from .scenegen import CameraView
        return cls(CameraView.from_dict(d["view"]),
                   [InstanceAnnotation.from_dict(a) for a in d["instances"]])


@numba.njit(cache=True)
def _raster_kernel(uv, z, tri_ids, owner, zbuf, idbuf, near, far):
    """Rasterise projected triangles into ``zbuf``/``idbuf`` in place.

    ``uv``: (T, 3, 2) pixel coordinates, ``z``: (T, 3) camera depths.  Depth is
    interpolated perspective-correctly (linear in 1/z).
    """
    height, width = zbuf.shape
    for t in range(uv.shape[0]):
        x0, y0 = uv[t, 0, 0], uv[t, 0, 1]
        x1, y1 = uv[t, 1, 0], uv[t, 1, 1]
        x2, y2 = uv[t, 2, 0], uv[t, 2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        iz0, iz1, iz2 = 1.0 / z[t, 0], 1.0 / z[t, 1], 1.0 / z[t, 2]
        jmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        jmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        imin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        imax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        for i in range(imin, imax + 1):
            py = i + 0.5
            for j in range(jmin, jmax + 1):
                px = j + 0.5
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                d = 1.0 / (w0 * iz0 + w1 * iz1 + w2 * iz2)
                if d < near or d > far:
                    continue
                if d < zbuf[i, j]:
                    zbuf[i, j] = d
                    idbuf[i, j] = tri_ids[t]
                    owner[i, j] = t


def _project_triangles(points_cam, triangles, view):
    tri = points_cam[triangles]  # (T, 3, 3)
    z = tri[..., 2]
    keep = np.all(z > 1e-9, axis=1)
    tri, z = tri[keep], z[keep]
    uv = np.empty(tri.shape[:2] + (2,))
    uv[..., 0] = view.fx * tri[..., 0] / z + view.cx
    uv[..., 1] = view.fy * tri[..., 1] / z + view.cy
    return uv, z


def _check_view(view):
    if not (view.fx > 0 and view.fy > 0 and view.width > 0 and view.height > 0
            and np.isfinite([view.fx, view.fy, view.cx, view.cy]).all()):
        raise ContractError("degenerate intrinsics")


def render_instances_camera(poses_cam, model, view, cfg=None):
    """Solo z-buffers of each camera-frame pose: (N, H, W) depth with inf background."""
    _check_view(view)
    cfg = cfg or RenderConfig()
    n = len(poses_cam)
    solo = np.full((n, view.height, view.width), np.inf)
    for k, pose in enumerate(poses_cam):
        pts = pose.transform(model.vertices)
        uv, z = _project_triangles(pts, model.triangles, view)
        idbuf = np.full((view.height, view.width), -1, dtype=np.int64)
        owner = np.full((view.height, view.width), -1, dtype=np.int64)
        _raster_kernel(uv, z, np.full(len(uv), k, dtype=np.int64), owner, solo[k], idbuf,
                       cfg.near, cfg.far)
    return solo


def camera_poses(instances, view):
    return [inst.pose.compose(view.R, view.t) for inst in instances]


def _joint(solo, far):
    if len(solo) == 0:
        h, w = solo.shape[1:]
        return np.full((h, w), far), np.full((h, w), -1, dtype=np.int64)
    ids = np.argmin(solo, axis=0)
    depth = np.take_along_axis(solo, ids[None], 0)[0]
    bg = ~np.isfinite(depth)
    ids[bg] = -1
    depth = np.where(bg, far, depth)
    return depth, ids


def _add_noise(depth, bg, cfg):
    if cfg.noise_sigma <= 0:
        return depth
    rng = np.random.default_rng(cfg.noise_seed)
    noisy = depth + rng.normal(0.0, cfg.noise_sigma, depth.shape)
    return np.where(bg, depth, np.clip(noisy, cfg.near, cfg.far))


def rasterize_depth(instances, view, model, cfg=None):
    """Depth image of the scene seen from ``view``."""
    cfg = cfg or RenderConfig()
    solo = render_instances_camera(camera_poses(instances, view), model, view, cfg)
    depth, ids = _joint(solo, cfg.far)
    depth = _add_noise(depth, ids < 0, cfg)
    return DepthImage(view.width, view.height, depth)


def render_frame(instances, view, model, cfg=None):
    """Depth image, frame annotation and the per-pixel owner map (-1 = background)."""
    cfg = cfg or RenderConfig()
    poses = camera_poses(instances, view)
    solo = render_instances_camera(poses, model, view, cfg)
    depth, ids = _joint(solo, cfg.far)
    annotations = []
    for k, pose in enumerate(poses):
        mask = np.isfinite(solo[k])
        total = int(mask.sum())
        visible = int((ids == k).sum())
        if visible == 0:
            continue
        rows = np.where(mask.any(axis=1))[0]
        cols = np.where(mask.any(axis=0))[0]
        box = Box2D(float(cols[0]), float(rows[0]), float(cols[-1] - cols[0] + 1),
                    float(rows[-1] - rows[0] + 1))
        u = view.fx * pose.t[0] / pose.t[2] + view.cx
        v = view.fy * pose.t[1] / pose.t[2] + view.cy
        outside = not (box.c_x <= u <= box.c_x + box.w and box.c_y <= v <= box.c_y + box.h)
        annotations.append(InstanceAnnotation(
            k, box, (float(u), float(v)), float(pose.t[2]), canonical_pose(pose, model),
            visible / total, visible, total, outside))
    depth = _add_noise(depth, ids < 0, cfg)
    return DepthImage(view.width, view.height, depth), FrameAnnotation(view, annotations), ids


def annotate(instances, view, model, cfg=None):
    return render_frame(instances, view, model, cfg)[1]


# ---------------------------------------------------------------- file formats

DEPTH_MAGIC = b"BPD1"


def write_depth(path, image):
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", image.width, image.height))
        fh.write(np.ascontiguousarray(image.depth, dtype="<f4").tobytes())


def read_depth(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DEPTH_MAGIC:
        raise DataError(f"{path}: not a BPD1 depth file")
    width, height = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * width * height:
        raise DataError(f"{path}: truncated depth payload")
    depth = np.frombuffer(data, dtype="<f4", offset=12).reshape(height, width)
    return DepthImage(width, height, depth.astype(np.float32))


def write_annotation(path, annotation):
    with open(path, "w") as fh:
        json.dump(annotation.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_annotation(path):
    with open(path) as fh:
        return FrameAnnotation.from_dict(json.load(fh))
