"""Rigid poses, Euler conventions, symmetry-aware distances and box predicates.

Rotation convention (used everywhere): ``R = Rz(roll) @ Rx(yaw) @ Ry(pitch)``
maps model coordinates to camera coordinates, ``X = R @ v + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

TWO_PI = 2.0 * np.pi
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def euler_to_matrix(pitch, yaw, roll):
    return rot_z(roll) @ rot_x(yaw) @ rot_y(pitch)


def euler_to_matrix_batch(pitch, yaw, roll):
    """Vectorised :func:`euler_to_matrix` over equal-length angle arrays -> (N, 3, 3)."""
    p, y, r = (np.asarray(a, dtype=np.float64) for a in (pitch, yaw, roll))
    cp, sp, cy, sy, cr, sr = np.cos(p), np.sin(p), np.cos(y), np.sin(y), np.cos(r), np.sin(r)
    out = np.empty(p.shape + (3, 3))
    out[..., 0, 0] = cr * cp - sr * sy * sp
    out[..., 0, 1] = -sr * cy
    out[..., 0, 2] = cr * sp + sr * sy * cp
    out[..., 1, 0] = sr * cp + cr * sy * sp
    out[..., 1, 1] = cr * cy
    out[..., 1, 2] = sr * sp - cr * sy * cp
    out[..., 2, 0] = -cy * sp
    out[..., 2, 1] = sy
    out[..., 2, 2] = cy * cp
    return out


def matrix_to_euler(R):
    """Inverse of :func:`euler_to_matrix`.

    Returns pitch, roll in [0, 2pi) and yaw in [-pi/2, pi/2].  At gimbal lock
    (|yaw| = pi/2) roll is set to 0 and pitch absorbs the free angle.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ContractError(f"rotation matrix must be a finite 3x3 array, got shape {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-4 or np.linalg.det(R) < 0:
        raise ContractError("matrix is not a proper rotation (orthonormality tolerance 1e-4)")
    yaw = float(np.arcsin(np.clip(R[2, 1], -1.0, 1.0)))
    if np.hypot(R[2, 0], R[2, 2]) < 1e-9:
        roll = 0.0
        pitch = float(np.arctan2(R[0, 2], R[0, 0]))
    else:
        pitch = float(np.arctan2(-R[2, 0], R[2, 2]))
        roll = float(np.arctan2(-R[0, 1], R[1, 1]))
    return wrap_angle(pitch), yaw, wrap_angle(roll)


def wrap_angle(a):
    a = float(np.mod(a, TWO_PI))
    return 0.0 if a >= TWO_PI else a


@dataclass
class Pose6D:
    pitch: float
    yaw: float
    roll: float
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @property
    def rotation(self):
        return euler_to_matrix(self.pitch, self.yaw, self.roll)

    @classmethod
    def from_matrix(cls, R, t):
        return cls(*matrix_to_euler(R), t=t)

    def matrix(self):
        """4x4 homogeneous transform."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.t
        return T

    def transform(self, points):
        return np.asarray(points) @ self.rotation.T + self.t

    def compose(self, R, t):
        """Pose of ``(R, t) o self``, e.g. a world pose seen through an extrinsic."""
        return Pose6D.from_matrix(R @ self.rotation, R @ self.t + t)

    def to_dict(self):
        return {"pitch": self.pitch, "yaw": self.yaw, "roll": self.roll,
                "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["pitch"], d["yaw"], d["roll"], d["t"])

    def __eq__(self, other):
        return (isinstance(other, Pose6D) and (self.pitch, self.yaw, self.roll)
                == (other.pitch, other.yaw, other.roll) and np.array_equal(self.t, other.t))


@dataclass
class SymmetrySpec:
    """Finite rotation group (identity included) plus an optional continuous axis."""

    finite_rotations: list = field(default_factory=lambda: [np.eye(3)])
    axial: np.ndarray | None = None

    def __post_init__(self):
        rots = [np.asarray(r, dtype=np.float64) for r in self.finite_rotations]
        if not any(np.allclose(r, np.eye(3), atol=1e-9) for r in rots):
            rots.insert(0, np.eye(3))
        self.finite_rotations = rots
        if self.axial is not None:
            axis = np.asarray(self.axial, dtype=np.float64)
            if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
                raise ContractError("axial symmetry axis must have unit norm")
            self.axial = axis

    def is_closed(self, tol=1e-6):
        rots = self.finite_rotations
        for a in rots:
            for b in rots:
                ab = a @ b
                if not any(np.abs(ab - c).max() <= tol for c in rots):
                    return False
        return True

    @property
    def order(self):
        return len(self.finite_rotations)

    @classmethod
    def from_axes(cls, generators=(), axial=None):
        """Group from ``[(axis, order), ...]`` cyclic generators, closed by products."""
        rots = [np.eye(3)]
        for axis, n in generators:
            rots.extend(axis_angle_matrix(axis, TWO_PI * k / n) for k in range(1, n))
        changed = True
        while changed:
            changed = False
            for a in list(rots):
                for b in list(rots):
                    ab = a @ b
                    if not any(np.abs(ab - c).max() <= 1e-9 for c in rots):
                        rots.append(ab)
                        changed = True
        return cls(rots, axial)


def ritter_sphere(points):
    """Ritter's approximate bounding sphere -> (center, radius)."""
    pts = np.asarray(points, dtype=np.float64)
    p0 = pts[0]
    p1 = pts[np.argmax(((pts - p0) ** 2).sum(1))]
    p2 = pts[np.argmax(((pts - p1) ** 2).sum(1))]
    center = (p1 + p2) / 2
    radius = np.linalg.norm(p2 - p1) / 2
    for p in pts:
        d = np.linalg.norm(p - center)
        if d > radius:
            new_r = (radius + d) / 2
            center = center + (d - new_r) / d * (p - center)
            radius = new_r
    # guard against rounding so every point is enclosed
    radius = max(radius, float(np.sqrt(((pts - center) ** 2).sum(1)).max()))
    return center, radius


class MeshModel:
    """Triangle mesh in model coordinates (meters) with symmetry metadata."""

    def __init__(self, vertices, triangles, symmetry=None, name="mesh"):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        self.symmetry = symmetry if symmetry is not None else SymmetrySpec()
        self.name = name
        if len(self.vertices) == 0:
            raise ContractError("mesh has no vertices")
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ContractError("triangle index out of range")
        diffs = self.vertices[:, None, :] - self.vertices[None, :, :]
        self.diameter = float(np.sqrt((diffs ** 2).sum(-1)).max())
        center, radius = ritter_sphere(self.vertices)
        self.bsphere_center = center
        self.bsphere_diameter = 2.0 * radius

    @property
    def axial(self):
        return self.symmetry.axial is not None

    def __repr__(self):
        return (f"MeshModel({self.name!r}, vertices={len(self.vertices)}, "
                f"triangles={len(self.triangles)}, diameter={self.diameter:.4f})")


def _check_mesh(model):
    if model is None or len(model.vertices) == 0:
        raise ContractError("empty mesh")


def add_distance(p, q, model):
    """Mean distance between corresponding model vertices under poses p and q."""
    _check_mesh(model)
    v = model.vertices
    return float(np.linalg.norm(p.transform(v) - q.transform(v), axis=1).mean())


def _axial_min(Rp, tp, g, target, vertices, axis, grid=72, tol=1e-4):
    """min over phi of mean |Rp A(phi) g v + tp - target| by grid + golden section."""
    gv = vertices @ g.T

    def f(phi):
        a = axis_angle_matrix(axis, phi)
        return np.linalg.norm(gv @ (Rp @ a).T + tp - target, axis=1).mean()

    phis = np.arange(grid) * (TWO_PI / grid)
    vals = np.array([f(phi) for phi in phis])
    k = int(np.argmin(vals))
    step = TWO_PI / grid
    lo, hi = phis[k] - step, phis[k] + step
    c, d = hi - _GOLDEN * (hi - lo), lo + _GOLDEN * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = f(d)
    return min(vals[k], fc, fd, f((lo + hi) / 2))


def sym_distance(p, q, model):
    """Symmetry-minimised mean vertex displacement between poses p o g and q."""
    _check_mesh(model)
    v = model.vertices
    target = q.transform(v)
    Rp = p.rotation
    sym = model.symmetry
    best = np.inf
    for g in sym.finite_rotations:
        if sym.axial is not None:
            d = _axial_min(Rp, p.t, g, target, v, sym.axial)
        else:
            d = np.linalg.norm(v @ (Rp @ g).T + p.t - target, axis=1).mean()
        best = min(best, d)
    return float(best)


def pose_arrays(poses):
    """Stack poses into rotation (N, 3, 3) and translation (N, 3) arrays."""
    if not poses:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    R = euler_to_matrix_batch([p.pitch for p in poses], [p.yaw for p in poses],
                              [p.roll for p in poses])
    t = np.stack([p.t for p in poses])
    return R, t


def pairwise_sym_distance(poses_a, poses_b, model):
    """Matrix of :func:`sym_distance` values for finite groups (vectorised).

    Falls back to the scalar routine when the model has axial symmetry.
    """
    _check_mesh(model)
    if model.axial:
        return np.array([[sym_distance(a, b, model) for b in poses_b] for a in poses_a])
    v = model.vertices
    Ra, ta = pose_arrays(poses_a)
    Rb, tb = pose_arrays(poses_b)
    xb = np.einsum("nij,vj->nvi", Rb, v) + tb[:, None, :]
    best = np.full((len(poses_a), len(poses_b)), np.inf)
    for g in model.symmetry.finite_rotations:
        xa = np.einsum("nij,vj->nvi", Ra, v @ g.T) + ta[:, None, :]
        d = np.linalg.norm(xa[:, None] - xb[None], axis=-1).mean(-1)
        best = np.minimum(best, d)
    return best


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box; (c_x, c_y) is the top-left corner in pixels."""

    c_x: float
    c_y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @property
    def center(self):
        return (self.c_x + self.w / 2.0, self.c_y + self.h / 2.0)

    @property
    def area(self):
        return self.w * self.h

    def as_array(self):
        return np.array([self.c_x, self.c_y, self.w, self.h], dtype=np.float64)

    def clip(self, width, height):
        x0, y0 = max(self.c_x, 0.0), max(self.c_y, 0.0)
        x1, y1 = min(self.c_x + self.w, width), min(self.c_y + self.h, height)
        return Box2D(x0, y0, max(x1 - x0, 1e-6), max(y1 - y0, 1e-6))

    def to_list(self):
        return [float(self.c_x), float(self.c_y), float(self.w), float(self.h)]


def box2d_iou(a, b):
    ix = min(a.c_x + a.w, b.c_x + b.w) - max(a.c_x, b.c_x)
    iy = min(a.c_y + a.h, b.c_y + b.h) - max(a.c_y, b.c_y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return float(inter / (a.area + b.area - inter))


def iou_matrix(a, b):
    """IoU between rows of (N, 4) and (M, 4) arrays of [c_x, c_y, w, h]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = (np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
          - np.maximum(a[:, None, 0], b[None, :, 0]))
    iy = (np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
          - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


@dataclass(frozen=True)
class Box3D:
    center: tuple
    half_extents: tuple

    def __post_init__(self):
        if any(h <= 0 for h in self.half_extents):
            raise ContractError("3D box half extents must be positive")

    @property
    def lo(self):
        return np.asarray(self.center) - np.asarray(self.half_extents)

    @property
    def hi(self):
        return np.asarray(self.center) + np.asarray(self.half_extents)


def box3d_overlaps(a, b):
    """True iff the boxes share a region of positive volume."""
    return bool(np.all(np.maximum(a.lo, b.lo) < np.minimum(a.hi, b.hi)))


def model_box3d(pose, model):
    _check_mesh(model)
    pts = pose.transform(model.vertices)
    lo, hi = pts.min(0), pts.max(0)
    return Box3D(tuple((lo + hi) / 2), tuple(np.maximum((hi - lo) / 2, 1e-12)))


def read_mesh(path, symmetry=None):
    """Parse a BPMESH file: header, counts, vertex lines, triangle lines."""
    with open(path) as fh:
        tokens = fh.read().split()
    if not tokens or tokens[0] != "BPMESH":
        raise ContractError(f"{path}: missing BPMESH header")
    nv, nt = int(tokens[1]), int(tokens[2])
    vals = tokens[3:]
    if len(vals) != 3 * nv + 3 * nt:
        raise ContractError(f"{path}: expected {nv} vertices and {nt} triangles")
    verts = np.array(vals[:3 * nv], dtype=np.float64).reshape(nv, 3)
    tris = np.array(vals[3 * nv:], dtype=np.int64).reshape(nt, 3)
    return MeshModel(verts, tris, symmetry, name=str(path))


def write_mesh(path, model):
    lines = ["BPMESH", f"{len(model.vertices)} {len(model.triangles)}"]
    lines += [" ".join(repr(float(c)) for c in v) for v in model.vertices]
    lines += [" ".join(str(int(i)) for i in t) for t in model.triangles]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
