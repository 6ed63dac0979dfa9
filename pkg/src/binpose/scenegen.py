"""Randomised drop-and-settle bin scenes and camera view sampling.

Bodies are approximated by a handful of interior spheres.  Instances are
dropped one at a time and settled against the bin and the already-settled
pile by translation-only constraint projection plus gravity descent.  The bin
frame has its origin at the center of the floor, z up.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ContractError, SettleError
from .geometry import Pose6D

log = logging.getLogger(__name__)


@dataclass
class SceneConfig:
    bin_half_extents: tuple = (0.2, 0.2, 0.06)
    n_min: int = 10
    n_max: int = 20
    model_id: str = "zblock"
    seed: int = 0
    settle_iterations: int = 3000
    tolerance: float = 1e-3
    n_spheres: int = 8
    drop_step: float = 0.004
    max_retries: int = 5

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ContractError(f"instance range [{self.n_min}, {self.n_max}] is invalid")
        if self.tolerance <= 0:
            raise ContractError("penetration tolerance must be positive")


@dataclass
class ViewConfig:
    count: int = 17
    image_size: tuple = (128, 128)  # (width, height)
    focal_px: float = 300.0
    radius_factors: tuple = (2.0, 3.0)  # times the full bin diagonal
    elevation_deg: tuple = (30.0, 90.0)


@dataclass
class SceneInstance:
    pose: Pose6D  # bin (world) frame


@dataclass
class CameraView:
    """World->camera transform ``x_c = R @ x_w + t`` plus pinhole intrinsics.

    Camera axes: x right, y down, z along the optical axis.  Pixel (row i,
    column j) has its center at (u, v) = (j + 0.5, i + 0.5).
    """

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @property
    def position(self):
        return -self.R.T @ self.t

    @property
    def optical_axis(self):
        return self.R[2]

    def to_dict(self):
        return {"R": self.R.tolist(), "t": self.t.tolist(), "fx": self.fx, "fy": self.fy,
                "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["R"]), np.array(d["t"]), d["fx"], d["fy"], d["cx"], d["cy"],
                   int(d["width"]), int(d["height"]))


# ---------------------------------------------------------------- sphere proxy

def _point_triangle_distance(points, tris):
    """Distance from each point to the closest of the triangles (Ericson's regions)."""
    best = np.full(len(points), np.inf)
    for a, b, c in tris:
        ab, ac, bc = b - a, c - a, c - b
        d1, d2 = (points - a) @ ab, (points - a) @ ac
        d3, d4 = (points - b) @ ab, (points - b) @ ac
        d5, d6 = (points - c) @ ab, (points - c) @ ac
        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        denom = va + vb + vc
        denom = np.where(np.abs(denom) < 1e-300, 1e-300, denom)
        out = a + (vb / denom)[:, None] * ab + (vc / denom)[:, None] * ac

        def safe(num, den):
            return num / np.where(den == 0, 1.0, den)

        # later assignments take precedence, so go from face to vertex regions
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        out[m] = (b + safe(d4 - d3, (d4 - d3) + (d5 - d6))[:, None] * bc)[m]
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out[m] = (a + safe(d2, d2 - d6)[:, None] * ac)[m]
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out[m] = (a + safe(d1, d1 - d3)[:, None] * ab)[m]
        out[(d6 >= 0) & (d5 <= d6)] = c
        out[(d3 >= 0) & (d4 <= d3)] = b
        out[(d1 <= 0) & (d2 <= 0)] = a
        best = np.minimum(best, np.linalg.norm(points - out, axis=1))
    return best


def _inside_mesh(points, tris):
    """Ray-parity point-in-mesh test along a generic direction."""
    d = np.array([0.5773, 0.5774, 0.57735])
    d = d / np.linalg.norm(d)
    hits = np.zeros(len(points), dtype=np.int64)
    for a, b, c in tris:
        e1, e2 = b - a, c - a
        p = np.cross(d, e2)
        det = e1 @ p
        if abs(det) < 1e-15:
            continue
        s = points - a
        u = (s @ p) / det
        q = np.cross(s, e1)
        v = (q @ d) / det
        t = (q @ e2) / det
        hits += ((u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)).astype(np.int64)
    return hits % 2 == 1


def fit_spheres(model, k=8, grid=24):
    """Greedy coverage of the mesh interior by ``k`` inscribed spheres.

    Candidate centers are interior grid points; each pick is the uncovered
    candidate with the largest clearance to the surface, its radius that
    clearance.  Returns (centers (k, 3), radii (k,)) in model coordinates.
    """
    v = model.vertices
    lo, hi = v.min(0), v.max(0)
    axes = [np.linspace(lo[i], hi[i], grid + 2)[1:-1] for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    tris = v[model.triangles]
    pts = pts[_inside_mesh(pts, tris)]
    if len(pts) == 0:
        raise ContractError("mesh has no interior sample points (not closed?)")
    clearance = _point_triangle_distance(pts, tris)
    centers, radii = [], []
    covered = np.zeros(len(pts), bool)
    for _ in range(k):
        cand = np.where(~covered)[0]
        if len(cand) == 0:
            # fully covered: farthest point from the existing centers
            dist = np.min(np.linalg.norm(pts[:, None] - np.array(centers)[None], axis=-1), 1)
            i = int(np.argmax(dist))
        else:
            i = int(cand[np.argmax(clearance[cand])])
        centers.append(pts[i])
        radii.append(clearance[i])
        covered |= np.linalg.norm(pts - pts[i], axis=1) <= clearance[i]
    return np.array(centers), np.array(radii)


# ---------------------------------------------------------------- settling

def _world_spheres(pose_R, pose_t, centers):
    return centers @ pose_R.T + pose_t


def _max_penetration(spheres_a, radii_a, spheres_b, radii_b):
    d = np.linalg.norm(spheres_a[:, None] - spheres_b[None], axis=-1)
    return float((radii_a[:, None] + radii_b[None] - d).max())


def _project(pos, R, centers, radii, others, other_radii, half, tol, iters=30):
    """Translate one body out of the floor, walls and the settled pile."""
    for _ in range(iters):
        sph = centers @ R.T + pos
        worst, push = tol * 0.25, None
        # floor
        pen = radii - sph[:, 2]
        i = int(np.argmax(pen))
        if pen[i] > worst:
            worst, push = pen[i], np.array([0.0, 0.0, pen[i]])
        for ax in (0, 1):
            pen_hi = sph[:, ax] + radii - half[ax]
            pen_lo = -half[ax] - (sph[:, ax] - radii)
            j = int(np.argmax(pen_hi))
            if pen_hi[j] > worst:
                worst, push = pen_hi[j], -pen_hi[j] * np.eye(3)[ax]
            j = int(np.argmax(pen_lo))
            if pen_lo[j] > worst:
                worst, push = pen_lo[j], pen_lo[j] * np.eye(3)[ax]
        if len(others):
            diff = sph[:, None] - others[None]
            dist = np.linalg.norm(diff, axis=-1)
            pen = radii[:, None] + other_radii[None] - dist
            a, b = np.unravel_index(np.argmax(pen), pen.shape)
            if pen[a, b] > worst:
                n = diff[a, b] / max(dist[a, b], 1e-12)
                if dist[a, b] < 1e-12:
                    n = np.array([0.0, 0.0, 1.0])
                worst, push = pen[a, b], n * pen[a, b]
        if push is None:
            return pos, 0.0
        pos = pos + push * 1.0001
    sph = centers @ R.T + pos
    residual = max(0.0, float((radii - sph[:, 2]).max()))
    for ax in (0, 1):
        residual = max(residual, float((np.abs(sph[:, ax]) + radii - half[ax]).max()))
    if len(others):
        residual = max(residual, _max_penetration(sph, radii, others, other_radii))
    return pos, residual


def _random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def _settle_scene(cfg, rng, centers, radii):
    half = np.asarray(cfg.bin_half_extents, dtype=np.float64)
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    body_radius = float(np.max(np.linalg.norm(centers, axis=1) + radii))
    placed_R, placed_t = [], []
    others = np.zeros((0, 3))
    other_radii = np.zeros(0)
    for _ in range(n):
        R = _random_rotation(rng)
        margin = np.maximum(half[:2] - body_radius, 0.0)
        xy = rng.uniform(-margin, margin)
        top = float((others[:, 2] + other_radii).max()) if len(others) else 0.0
        pos = np.array([xy[0], xy[1], top + body_radius + 0.02])
        history = []
        settled = False
        feasible = False
        for it in range(cfg.settle_iterations):
            trial, residual = _project(pos - np.array([0.0, 0.0, cfg.drop_step]), R, centers,
                                       radii, others, other_radii, half, cfg.tolerance)
            if residual <= cfg.tolerance:
                pos, feasible = trial, True
            elif not feasible:
                pos = trial
            # a wedged step that cannot be made feasible leaves the body where it was
            history.append(pos[2])
            if feasible and len(history) > 25 and history[-26] - history[-1] < 1e-4:
                settled = True
                break
        if not settled:
            return None
        placed_R.append(R)
        placed_t.append(pos)
        sph = centers @ R.T + pos
        others = np.vstack([others, sph])
        other_radii = np.concatenate([other_radii, radii])
    return [SceneInstance(Pose6D.from_matrix(R, t)) for R, t in zip(placed_R, placed_t)]


def generate_scene(cfg, model, spheres=None):
    """Settled instances for ``cfg``; deterministic in ``cfg.seed``.

    A scene that fails to settle is regenerated from the next derived seed;
    after ``cfg.max_retries`` failures :class:`SettleError` is raised.
    """
    centers, radii = spheres if spheres is not None else fit_spheres(model, cfg.n_spheres)
    for attempt in range(cfg.max_retries + 1):
        rng = np.random.default_rng([cfg.seed, attempt])
        instances = _settle_scene(cfg, rng, centers, radii)
        if instances is not None:
            return instances
        log.warning("scene seed %d attempt %d failed to settle; retrying", cfg.seed, attempt)
    raise SettleError(f"scene seed {cfg.seed} did not settle after {cfg.max_retries + 1} attempts")


def scene_spheres(instances, centers, radii):
    """World-frame proxy spheres of every instance: (N, k, 3) centers, (k,) radii."""
    return np.stack([centers @ inst.pose.rotation.T + inst.pose.t for inst in instances]), radii


def max_pairwise_penetration(instances, centers, radii):
    """Largest sphere-proxy penetration depth between any two instances."""
    sph, _ = scene_spheres(instances, centers, radii)
    worst = 0.0
    for i in range(len(sph)):
        for j in range(i + 1, len(sph)):
            worst = max(worst, _max_penetration(sph[i], radii, sph[j], radii))
    return worst


# ---------------------------------------------------------------- views

def bin_center(half_extents):
    return np.array([0.0, 0.0, float(half_extents[2])])


def bin_diagonal(half_extents):
    return 2.0 * float(np.linalg.norm(half_extents))


def look_at(position, target, roll):
    """Rotation whose third row is the unit direction position->target."""
    z = np.asarray(target, float) - np.asarray(position, float)
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c, s = np.cos(roll), np.sin(roll)
    x, y = c * x + s * y, -s * x + c * y
    return np.stack([x, y, z])


def sample_views(half_extents, count=17, seed=0, cfg=None):
    """``count`` cameras on a hemisphere above the bin, aimed at its center."""
    if count < 1:
        raise ContractError("view count must be >= 1")
    cfg = cfg or ViewConfig()
    rng = np.random.default_rng([seed, 7919])
    center = bin_center(half_extents)
    diag = bin_diagonal(half_extents)
    width, height = cfg.image_size
    views = []
    for _ in range(count):
        radius = rng.uniform(*cfg.radius_factors) * diag
        elev = np.deg2rad(rng.uniform(*cfg.elevation_deg))
        azim = rng.uniform(0, 2 * np.pi)
        roll = rng.uniform(0, 2 * np.pi)
        pos = center + radius * np.array([np.cos(elev) * np.cos(azim),
                                          np.cos(elev) * np.sin(azim), np.sin(elev)])
        R = look_at(pos, center, roll)
        views.append(CameraView(R, -R @ pos, cfg.focal_px, cfg.focal_px,
                                width / 2.0, height / 2.0, width, height))
    return views


def scene_to_dict(instances, views, meta=None):
    return {
        "instances": [inst.pose.to_dict() for inst in instances],
        "views": [v.to_dict() for v in views],
        **(meta or {}),
    }


def scene_from_dict(d):
    instances = [SceneInstance(Pose6D.from_dict(p)) for p in d["instances"]]
    views = [CameraView.from_dict(v) for v in d["views"]]
    return instances, views


@dataclass
class Scene:
    instances: list
    views: list = field(default_factory=list)
