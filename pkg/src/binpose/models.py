"""Built-in meshes and symmetry canonicalisation."""
import numpy as np

from .errors import ConfigError, ContractError
from .geometry import MeshModel, Pose6D, SymmetrySpec, axis_angle_matrix, read_mesh, rot_y


def zblock(cell=0.05, thickness=0.06):
    """Z-tetromino outline in the x-z plane extruded along +y from y=0.

    The origin sits on the bottom face, on the 2-fold symmetry axis (model y),
    so it is not the center of the silhouette.
    """
    outline = np.array([(-1.5, 1), (-0.5, 1), (0.5, 1), (0.5, 0), (1.5, 0),
                        (1.5, -1), (0.5, -1), (-0.5, -1), (-0.5, 0), (-1.5, 0)]) * cell
    n = len(outline)
    bottom = np.column_stack([outline[:, 0], np.zeros(n), outline[:, 1]])
    top = bottom + [0.0, thickness, 0.0]
    verts = np.vstack([bottom, top])
    # cap rectangles as outline indices (left, middle, right)
    rects = [(9, 8, 1, 0), (7, 6, 2, 1), (3, 4, 5, 6)]
    tris = []
    for a, b, c, d in rects:
        tris += [(a, b, c), (a, c, d)]
        tris += [(n + a, n + c, n + b), (n + a, n + d, n + c)]
    for i in range(n):
        j = (i + 1) % n
        tris += [(i, j, n + j), (i, n + j, n + i)]
    sym = SymmetrySpec([np.eye(3), rot_y(np.pi)])
    return MeshModel(verts, tris, sym, name="zblock")


def box(half_extents=(0.05, 0.03, 0.02), symmetric=False):
    hx, hy, hz = half_extents
    verts = np.array([[sx * hx, sy * hy, sz * hz]
                      for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    faces = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in faces:
        tris += [(a, b, c), (a, c, d)]
    sym = SymmetrySpec.from_axes([((1, 0, 0), 2), ((0, 1, 0), 2)]) if symmetric else None
    return MeshModel(verts, tris, sym, name="box")


def quad(half_size=1.0, z=0.0):
    """Single square in the plane z=const facing -z (two triangles)."""
    s = half_size
    verts = np.array([[-s, -s, z], [s, -s, z], [s, s, z], [-s, s, z]], dtype=np.float64)
    return MeshModel(verts, [(0, 1, 2), (0, 2, 3)], name="quad")


def icosphere(radius=1.0, subdivisions=2):
    """Geodesic sphere; one vertex points along -z (towards a camera on the z axis)."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts)
    # rotate vertex 0 onto -z
    target = np.array([0.0, 0.0, -1.0])
    src = v[0]
    axis = np.cross(src, target)
    angle = np.arccos(np.clip(src @ target, -1, 1))
    v = v @ axis_angle_matrix(axis, angle).T
    return MeshModel(v * radius, faces, name="icosphere")


BUILTIN = {"zblock": zblock, "box": box}


def load_model(spec):
    """Model from a builtin name or a BPMESH path.

    ``spec`` is a dict with ``mesh`` (name or path) and optional
    ``symmetry_generators`` ([[axis, order], ...]) and ``symmetry_axial`` (axis).
    """
    mesh = spec.get("mesh", "zblock")
    if mesh in BUILTIN:
        model = BUILTIN[mesh]()
    else:
        try:
            model = read_mesh(mesh)
        except OSError as exc:
            raise ConfigError(f"cannot read mesh {mesh!r}: {exc}") from exc
    gens = spec.get("symmetry_generators")
    axial = spec.get("symmetry_axial")
    if gens is not None or axial is not None:
        model.symmetry = SymmetrySpec.from_axes(
            [(tuple(a), int(n)) for a, n in (gens or [])],
            None if axial is None else np.asarray(axial, dtype=np.float64) / np.linalg.norm(axial))
    return model


def canonical_pose(pose, model):
    """Representative of ``pose`` modulo the model's symmetry group.

    Among the finite-group equivalents the one with the smallest pitch (then
    roll, then yaw) is chosen; an axial model must have its symmetry axis along
    model y, which makes pitch redundant, and gets pitch = 0.
    """
    sym = model.symmetry
    if sym.axial is not None and abs(abs(sym.axial[1]) - 1.0) > 1e-9:
        raise ContractError("axial symmetry must be about the model y axis")
    if sym.order == 1 and sym.axial is None:
        return pose
    R = pose.rotation
    best, best_key = None, None
    for g in sym.finite_rotations:
        M = R @ g
        cand = Pose6D.from_matrix(M, pose.t)
        if sym.axial is not None:
            cand = Pose6D.from_matrix(M @ rot_y(-cand.pitch), pose.t)
            cand = Pose6D(0.0, cand.yaw, cand.roll, pose.t)
        key = (round(cand.pitch, 9), round(cand.roll, 9), round(cand.yaw, 9))
        if best_key is None or key < best_key:
            best, best_key = cand, key
    return best
