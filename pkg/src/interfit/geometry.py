"""Meshes, rigid transforms, cameras, point clouds and the distance queries
every fitting term builds on.

All geometry is metric (meters), float64, right-handed. Rotations are stored
as axis-angle 3-vectors so a 6-DoF pose is a plain unconstrained 6-vector
during descent; rotation matrices are an internal detail.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Point cloud segment labels.
LABEL_BODY = 0
LABEL_OBJECT = 1
LABEL_GROUND = 2
LABEL_OTHER = 3
LABEL_NAMES = {LABEL_BODY: "body", LABEL_OBJECT: "object",
               LABEL_GROUND: "ground", LABEL_OTHER: "other"}
LABEL_CODES = {v: k for k, v in LABEL_NAMES.items()}


# ---------------------------------------------------------------------------
# rotations

def rotation_matrix(omega):
    """Axis-angle 3-vector to rotation matrix (Rodrigues), stable near zero."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    theta = np.sqrt(theta2)
    K = skew(omega)
    if theta < 1e-8:
        # 2nd-order Taylor of sin(t)/t and (1-cos(t))/t^2
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def rotation_log(R):
    """Rotation matrix to axis-angle 3-vector; handles angles near 0 and pi."""
    R = np.asarray(R, dtype=float)
    cos_t = (np.trace(R) - 1.0) / 2.0
    cos_t = min(1.0, max(-1.0, cos_t))
    theta = np.arccos(cos_t)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * w * (1.0 + theta * theta / 6.0)
    if theta > np.pi - 1e-5:
        # near pi the skew part vanishes; recover axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        k = int(np.argmax(axis))
        axis = A[:, k] / max(axis[k], 1e-12)
        axis = axis / np.linalg.norm(axis)
        # fix sign using the skew part (zero exactly at pi, any sign valid there)
        if w @ axis < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def rotation_jacobian(omega):
    """dR/d(omega_i) for i=0,1,2 as a (3, 3, 3) array (Gallego & Yezzi form)."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    R = rotation_matrix(omega)
    out = np.empty((3, 3, 3))
    if theta2 < 1e-18:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            out[i] = skew(e)
        return out
    ImR = np.eye(3) - R
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        out[i] = (omega[i] * skew(omega) + skew(np.cross(omega, ImR @ e))) @ R / theta2
    return out


def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def geodesic_angle(omega_a, omega_b):
    """Angle of the relative rotation between two axis-angle vectors (radians)."""
    Ra = rotation_matrix(omega_a)
    Rb = rotation_matrix(omega_b)
    cos_t = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(min(1.0, max(-1.0, cos_t))))


# ---------------------------------------------------------------------------
# core types

@dataclass
class RigidTransform:
    """6-DoF pose: axis-angle rotation (radians * unit axis) plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @staticmethod
    def identity():
        return RigidTransform(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_matrix(R, t):
        return RigidTransform(rotation_log(R), np.asarray(t, dtype=float))

    @staticmethod
    def from_vector(v):
        v = np.asarray(v, dtype=float).reshape(6)
        return RigidTransform(v[:3], v[3:])

    def as_vector(self):
        return np.concatenate([self.rotation, self.translation])

    def matrix(self):
        return rotation_matrix(self.rotation)

    def apply(self, points):
        """Transform one (3,) point or an (N, 3) array."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix().T + self.translation

    def inverse(self):
        R = self.matrix()
        return RigidTransform(-self.rotation, -(R.T @ self.translation))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition applying b first, then a."""
    Ra, Rb = a.matrix(), b.matrix()
    return RigidTransform(rotation_log(Ra @ Rb), Ra @ b.translation + a.translation)


@dataclass
class TriMesh:
    vertices: np.ndarray            # (N, 3) meters
    faces: np.ndarray               # (F, 3) vertex indices
    watertight: bool = False

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if self.faces.size and (
                (self.faces[:, 0] == self.faces[:, 1]).any()
                or (self.faces[:, 1] == self.faces[:, 2]).any()
                or (self.faces[:, 0] == self.faces[:, 2]).any()):
            raise ValueError("degenerate face repeats a vertex")
        if self.watertight and not self.is_closed():
            raise ValueError("mesh declared watertight but has boundary edges")

    def is_closed(self):
        """True when every edge is shared by exactly two faces."""
        if not len(self.faces):
            return False
        edges = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                self.faces[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool((counts == 2).all())

    def triangles(self, face_indices=None):
        """(F, 3, 3) corner array, optionally restricted to a face subset."""
        f = self.faces if face_indices is None else self.faces[face_indices]
        return self.vertices[f]

    def transformed(self, pose: RigidTransform) -> "TriMesh":
        return TriMesh(pose.apply(self.vertices), self.faces, self.watertight)


@dataclass
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def world_to_camera(self, points):
        return self.extrinsic.apply(points)

    def project_camera(self, pts_cam):
        """Pinhole projection of (N, 3) camera-frame points, no depth check."""
        pts_cam = np.asarray(pts_cam, dtype=float)
        z = pts_cam[..., 2]
        return np.stack([self.fx * pts_cam[..., 0] / z + self.cx,
                         self.fy * pts_cam[..., 1] / z + self.cy], axis=-1)

    def center(self):
        """Camera center in world coordinates."""
        return self.extrinsic.inverse().translation


def project(cam: PinholeCamera, point):
    """Project a single world point; raises on non-positive camera depth."""
    p_cam = cam.world_to_camera(np.asarray(point, dtype=float).reshape(1, 3))[0]
    if p_cam[2] <= 0:
        raise ValueError("point is behind the camera")
    return np.array([cam.fx * p_cam[0] / p_cam[2] + cam.cx,
                     cam.fy * p_cam[1] / p_cam[2] + cam.cy])


@dataclass
class PointCloud:
    points: np.ndarray              # (N, 3)
    labels: np.ndarray              # (N,) codes from LABEL_NAMES

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        if len(self.labels) != len(self.points):
            raise ValueError("labels length must equal points length")

    def select(self, label):
        if isinstance(label, str):
            label = LABEL_CODES[label]
        return self.points[self.labels == label]


@dataclass
class GroundPlane:
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float).reshape(3)
        self.normal = np.asarray(self.normal, dtype=float).reshape(3)
        n = np.linalg.norm(self.normal)
        if abs(n - 1.0) > 1e-9:
            if n == 0:
                raise ValueError("plane normal must be nonzero")
            self.normal = self.normal / n

    def height(self, points):
        """Signed distance of points above the plane (positive along normal)."""
        pts = np.asarray(points, dtype=float)
        return (pts - self.point) @ self.normal


# ---------------------------------------------------------------------------
# closest-point queries

def closest_point_on_triangles(p, tri):
    """Closest points to p on each triangle of a (F, 3, 3) array.

    Vectorized version of Ericson's region classification. Returns
    (distances (F,), closest (F, 3)).
    """
    p = np.asarray(p, dtype=float).reshape(3)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc

    out = np.empty_like(a)
    done = np.zeros(len(tri), dtype=bool)

    def assign(mask, value):
        m = mask & ~done
        out[m] = value if value.ndim == 1 else value[m]
        done[m] = True

    assign((d1 <= 0) & (d2 <= 0), a)                                    # vertex A
    assign((d3 >= 0) & (d4 <= d3), b)                                   # vertex B
    assign((d6 >= 0) & (d5 <= d6), c)                                   # vertex C
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(np.abs(d1 - d3) > 0, d1 / (d1 - d3), 0.0)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab)   # edge AB
        v_ac = np.where(np.abs(d2 - d6) > 0, d2 / (d2 - d6), 0.0)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + v_ac[:, None] * ac)   # edge AC
        num = d4 - d3
        den = (d4 - d3) + (d5 - d6)
        v_bc = np.where(np.abs(den) > 0, num / den, 0.0)
        assign((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
               b + v_bc[:, None] * (c - b))                                 # edge BC
        # interior
        safe = np.where(np.abs(denom) > 0, denom, 1.0)
        v = vb / safe
        w = vc / safe
        inner = a + v[:, None] * ab + w[:, None] * ac
    out[~done] = inner[~done]
    d = np.linalg.norm(out - p, axis=1)
    return d, out


def point_to_mesh(p, mesh: TriMesh, face_indices=None):
    """Distance from a point to a mesh surface and the realizing point."""
    tri = mesh.triangles(face_indices)
    if not len(tri):
        raise ValueError("mesh has no faces")
    d, cp = closest_point_on_triangles(p, tri)
    k = int(np.argmin(d))
    return float(d[k]), cp[k]


def points_to_mesh(points, mesh: TriMesh, face_indices=None, chunk=256):
    """Batched point_to_mesh: (distances (N,), closest (N, 3))."""
    tri = mesh.triangles(face_indices)
    if not len(tri):
        raise ValueError("mesh has no faces")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    dists = np.empty(len(points))
    closest = np.empty((len(points), 3))
    for i in range(0, len(points), chunk):
        for j in range(i, min(i + chunk, len(points))):
            d, cp = closest_point_on_triangles(points[j], tri)
            k = int(np.argmin(d))
            dists[j] = d[k]
            closest[j] = cp[k]
    return dists, closest


class TriangleGrid:
    """Uniform spatial subdivision over triangles for exact nearest queries.

    Cells store the triangles whose bounding boxes overlap them; a query
    expands Chebyshev rings until the unexplored shell cannot contain a
    closer triangle, so results are identical to the exhaustive scan.
    """

    def __init__(self, mesh: TriMesh, face_indices=None, resolution=16):
        self.tri = mesh.triangles(face_indices)
        lo = self.tri.min(axis=(0, 1))
        hi = self.tri.max(axis=(0, 1))
        span = np.maximum(hi - lo, 1e-9)
        self.lo = lo
        self.cell = float(span.max()) / resolution
        self.dims = np.maximum((span / self.cell).astype(int) + 1, 1)
        self.cells = {}
        tlo = ((self.tri.min(axis=1) - lo) / self.cell).astype(int)
        thi = ((self.tri.max(axis=1) - lo) / self.cell).astype(int)
        for t in range(len(self.tri)):
            for ix in range(tlo[t, 0], thi[t, 0] + 1):
                for iy in range(tlo[t, 1], thi[t, 1] + 1):
                    for iz in range(tlo[t, 2], thi[t, 2] + 1):
                        self.cells.setdefault((ix, iy, iz), []).append(t)

    def query(self, p):
        p = np.asarray(p, dtype=float).reshape(3)
        base = np.clip(((p - self.lo) / self.cell).astype(int), 0, self.dims - 1)
        best_d = np.inf
        best_cp = None
        seen = set()
        max_ring = int(self.dims.max()) + 1
        for ring in range(max_ring + 1):
            idxs = []
            for ix in range(base[0] - ring, base[0] + ring + 1):
                for iy in range(base[1] - ring, base[1] + ring + 1):
                    for iz in range(base[2] - ring, base[2] + ring + 1):
                        if max(abs(ix - base[0]), abs(iy - base[1]),
                               abs(iz - base[2])) != ring:
                            continue
                        for t in self.cells.get((ix, iy, iz), ()):
                            if t not in seen:
                                seen.add(t)
                                idxs.append(t)
            if idxs:
                d, cp = closest_point_on_triangles(p, self.tri[idxs])
                k = int(np.argmin(d))
                if d[k] < best_d:
                    best_d = float(d[k])
                    best_cp = cp[k]
            # distance to the nearest face of the unexplored shell
            lower = ring * self.cell - float(np.abs(p - self._cell_center(base)).max())
            if best_cp is not None and lower > best_d:
                break
        if best_cp is None:
            # grid exhausted without candidates (cannot happen for non-empty tri)
            d, cp = closest_point_on_triangles(p, self.tri)
            k = int(np.argmin(d))
            return float(d[k]), cp[k]
        return best_d, best_cp

    def _cell_center(self, idx):
        return self.lo + (np.asarray(idx) + 0.5) * self.cell


def chamfer(sources, mesh: TriMesh, vertex_ids=None):
    """Mean squared closest distance from sources to a mesh surface subset.

    When vertex_ids is given the target is the sub-surface made of faces
    whose three corners are all annotated, plus any annotated vertices that
    belong to no such face (kept as isolated point targets).
    """
    sources = np.asarray(sources, dtype=float).reshape(-1, 3)
    if not len(sources):
        raise ValueError("chamfer sources must be non-empty")
    face_indices, loose = restrict_to_vertices(mesh, vertex_ids)
    if face_indices is not None and not len(face_indices) and not len(loose):
        raise ValueError("chamfer target subset is empty")
    total = 0.0
    for p in sources:
        d = np.inf
        if face_indices is None or len(face_indices):
            d, _ = point_to_mesh(p, mesh, face_indices)
        if len(loose):
            d = min(d, float(np.linalg.norm(mesh.vertices[loose] - p, axis=1).min()))
        total += d * d
    return total / len(sources)


def restrict_to_vertices(mesh: TriMesh, vertex_ids):
    """Face subset fully inside a vertex set, plus leftover isolated vertices."""
    if vertex_ids is None:
        return None, np.empty(0, dtype=int)
    vertex_ids = np.asarray(sorted(set(int(v) for v in vertex_ids)), dtype=int)
    mask = np.zeros(len(mesh.vertices), dtype=bool)
    mask[vertex_ids] = True
    inside = mask[mesh.faces].all(axis=1)
    face_indices = np.nonzero(inside)[0]
    used = np.unique(mesh.faces[face_indices]) if len(face_indices) else np.empty(0, int)
    loose = np.setdiff1d(vertex_ids, used)
    return face_indices, loose


# ---------------------------------------------------------------------------
# inside tests (ray parity)

def points_inside_mesh(points, mesh: TriMesh):
    """Boolean inside flags via ray-crossing parity; mesh must be watertight."""
    if not mesh.watertight:
        raise ValueError("inside test requires a watertight mesh")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    # fixed irrational-ish direction avoids edge-grazing for axis-aligned meshes
    direction = np.array([0.577350269189626, 0.4472135954999579, 0.6832815729997477])
    direction = direction / np.linalg.norm(direction)
    tri = mesh.triangles()
    hits = _ray_hits(points, direction, tri)
    return hits % 2 == 1


def _ray_hits(origins, direction, tri):
    """Number of triangle crossings along +direction for each origin."""
    a = tri[:, 0]
    e1 = tri[:, 1] - a
    e2 = tri[:, 2] - a
    d = direction
    counts = np.zeros(len(origins), dtype=int)
    pvec = np.cross(d, e2)                       # (F, 3)
    det = (e1 * pvec).sum(1)
    ok_det = np.abs(det) > 1e-14
    inv_det = np.where(ok_det, 1.0 / np.where(ok_det, det, 1.0), 0.0)
    for i, o in enumerate(origins):
        tvec = o - a
        u = (tvec * pvec).sum(1) * inv_det
        qvec = np.cross(tvec, e1)
        v = (qvec * d[None, :]).sum(1) * inv_det
        t = (e2 * qvec).sum(1) * inv_det
        hit = ok_det & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
        counts[i] = int(hit.sum())
    return counts


def ray_blocked(origin, target, tri, skip_dist=1e-9):
    """True when a triangle lies strictly between origin and target."""
    o = np.asarray(origin, dtype=float)
    seg = np.asarray(target, dtype=float) - o
    length = np.linalg.norm(seg)
    if length == 0:
        return False
    d = seg / length
    a = tri[:, 0]
    e1 = tri[:, 1] - a
    e2 = tri[:, 2] - a
    pvec = np.cross(d, e2)
    det = (e1 * pvec).sum(1)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = o - a
    u = (tvec * pvec).sum(1) * inv_det
    qvec = np.cross(tvec, e1)
    v = (qvec * d[None, :]).sum(1) * inv_det
    t = (e2 * qvec).sum(1) * inv_det
    hit = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1 + 1e-12)
    hit &= (t > skip_dist) & (t < length - skip_dist)
    return bool(hit.any())


# ---------------------------------------------------------------------------
# ground plane fitting

def fit_ground_plane(points, toward=None) -> GroundPlane:
    """Least-squares plane through labeled floor points.

    The normal is the smallest-variance direction of the centered covariance,
    oriented so that `toward` (typically the scene centroid) sits on the
    positive side; +z is used when no reference point is given.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise ValueError("plane fit needs at least 3 points")
    centroid = pts.mean(axis=0)
    cov = np.cov((pts - centroid).T)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-12 * max(evals[2], 1e-30):
        raise ValueError("plane fit is degenerate (collinear points)")
    normal = evecs[:, 0]
    ref = np.array([centroid[0], centroid[1], centroid[2] + 1.0]) if toward is None \
        else np.asarray(toward, dtype=float)
    if (ref - centroid) @ normal < 0:
        normal = -normal
    return GroundPlane(centroid, normal)


# ---------------------------------------------------------------------------
# file formats

def save_obj(path, mesh: TriMesh):
    """ASCII OBJ with v/f records only."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path, watertight=False) -> TriMesh:
    verts = []
    faces = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64), watertight)


def save_xyz(path, cloud: PointCloud):
    """One `x y z label` line per point."""
    with open(path, "w") as fh:
        for p, lab in zip(cloud.points, cloud.labels):
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} "
                     f"{LABEL_NAMES[int(lab)]}\n")


def load_xyz(path) -> PointCloud:
    pts = []
    labs = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            pts.append([float(x) for x in parts[:3]])
            labs.append(LABEL_CODES[parts[3]])
    return PointCloud(np.array(pts).reshape(-1, 3), np.array(labs, dtype=np.int8))
