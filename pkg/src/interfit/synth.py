"""Ground-truth oracle: procedural objects, a toy body, scripted interaction
scenarios and corrupted multi-view observations with known answers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rendering as rnd
from .body import (LATENT_DIM, SHAPE_DIM, BodyModel, BodyParams, contact_subset,
                   pose_body, save_body_model)
from .geometry import (LABEL_BODY, LABEL_GROUND, LABEL_OBJECT, GroundPlane,
                       PinholeCamera, PointCloud, RigidTransform, TriMesh,
                       rotation_log, save_obj, save_xyz)

# ---------------------------------------------------------------------------
# mesh primitives


def _weld(points, faces, decimals=9):
    """Merge coincident vertices so subdivided boxes close up watertight."""
    keys = {}
    index = np.empty(len(points), dtype=np.int64)
    verts = []
    for i, p in enumerate(points):
        key = tuple(np.round(p, decimals))
        if key not in keys:
            keys[key] = len(verts)
            verts.append(p)
        index[i] = keys[key]
    faces = index[np.asarray(faces, dtype=np.int64)]
    keep = faces[:, 0] != faces[:, 1]
    keep &= faces[:, 1] != faces[:, 2]
    keep &= faces[:, 0] != faces[:, 2]
    return np.asarray(verts), faces[keep]


def box_mesh(dims, center=(0, 0, 0), subdiv=(1, 1, 1)):
    """Axis-aligned closed box; each face is an (n x m) grid of quads."""
    dims = np.asarray(dims, dtype=float)
    center = np.asarray(center, dtype=float)
    n = np.asarray(subdiv, dtype=int)
    pts = []
    faces = []

    def add_face(axis, sign):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        nu, nv = n[u_axis], n[v_axis]
        us = np.linspace(-dims[u_axis] / 2, dims[u_axis] / 2, nu + 1)
        vs = np.linspace(-dims[v_axis] / 2, dims[v_axis] / 2, nv + 1)
        base = len(pts)
        for u in us:
            for v in vs:
                p = np.zeros(3)
                p[axis] = sign * dims[axis] / 2
                p[u_axis] = u
                p[v_axis] = v
                pts.append(p + center)
        for i in range(nu):
            for j in range(nv):
                a = base + i * (nv + 1) + j
                b = a + nv + 1
                if sign > 0:
                    faces.append([a, b, b + 1])
                    faces.append([a, b + 1, a + 1])
                else:
                    faces.append([a, b + 1, b])
                    faces.append([a, a + 1, b + 1])

    for axis in range(3):
        for sign in (-1, 1):
            add_face(axis, sign)
    verts, faces = _weld(np.asarray(pts), faces)
    return verts, faces


def capsule_mesh(p0, p1, radius, n_seg=8, n_rings=3, cap=0.6):
    """Closed capsule-ish tube from p0 to p1 with apex caps."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    axis = axis / max(length, 1e-12)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(axis @ ref) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    angles = np.arange(n_seg) * 2 * np.pi / n_seg
    ring_dirs = np.outer(np.cos(angles), u) + np.outer(np.sin(angles), v)
    verts = []
    for t in np.linspace(0, 1, n_rings + 1):
        c = p0 + t * (p1 - p0)
        verts.extend(c + radius * ring_dirs)
    verts.append(p0 - cap * radius * axis)
    verts.append(p1 + cap * radius * axis)
    verts = np.asarray(verts)
    faces = []
    for r in range(n_rings):
        for s in range(n_seg):
            a = r * n_seg + s
            b = r * n_seg + (s + 1) % n_seg
            c = a + n_seg
            d = b + n_seg
            faces.append([a, b, d])
            faces.append([a, d, c])
    apex0 = len(verts) - 2
    apex1 = len(verts) - 1
    for s in range(n_seg):
        faces.append([apex0, (s + 1) % n_seg, s])
        top = n_rings * n_seg
        faces.append([apex1, top + s, top + (s + 1) % n_seg])
    return verts, np.asarray(faces, dtype=np.int64)


def cylinder_mesh(radius, height, n_seg=16):
    """Closed cylinder: 2n+2 vertices, 4n faces (two rings plus cap centers)."""
    angles = np.arange(n_seg) * 2 * np.pi / n_seg
    ring = np.column_stack([radius * np.cos(angles), radius * np.sin(angles),
                            np.zeros(n_seg)])
    bottom = ring + [0, 0, -height / 2]
    top = ring + [0, 0, height / 2]
    verts = np.vstack([bottom, top, [[0, 0, -height / 2]], [[0, 0, height / 2]]])
    faces = []
    for s in range(n_seg):
        a, b = s, (s + 1) % n_seg
        faces.append([a, b, n_seg + b])
        faces.append([a, n_seg + b, n_seg + a])
        faces.append([2 * n_seg, b, a])                    # bottom cap
        faces.append([2 * n_seg + 1, n_seg + a, n_seg + b])  # top cap
    return verts, np.asarray(faces, dtype=np.int64)


# ---------------------------------------------------------------------------
# objects

@dataclass
class ObjectModel:
    mesh: TriMesh
    contact_vertex_ids: np.ndarray
    name: str

    def __post_init__(self):
        self.contact_vertex_ids = np.asarray(self.contact_vertex_ids,
                                             dtype=np.int64)
        if len(self.contact_vertex_ids) and (
                self.contact_vertex_ids.max() >= len(self.mesh.vertices)
                or self.contact_vertex_ids.min() < 0):
            raise ValueError("contact vertex ids out of range")
        if not self.mesh.watertight:
            raise ValueError("object mesh must be watertight")


def make_object(kind, dims=None, seed=0):
    """Watertight primitive with a graspable contact annotation.

    kinds: cube (dims=side), cylinder (dims=(radius, height)),
    handle-box (dims=(w, d, h) of the main box).
    """
    del seed  # primitives are deterministic; the signature keeps rigs uniform
    if kind == "cube":
        side = float(dims if dims is not None else 0.1)
        if side <= 0:
            raise ValueError("cube side must be positive")
        verts, faces = box_mesh([side, side, side])
        mesh = TriMesh(verts, faces, watertight=True)
        top = np.nonzero(np.abs(verts[:, 2] - side / 2) < 1e-12)[0]
        return ObjectModel(mesh, top, "cube")
    if kind == "cylinder":
        radius, height = dims if dims is not None else (0.04, 0.16)
        if radius <= 0 or height <= 0:
            raise ValueError("cylinder dims must be positive")
        verts, faces = cylinder_mesh(float(radius), float(height))
        mesh = TriMesh(verts, faces, watertight=True)
        n_seg = (len(verts) - 2) // 2
        side_band = np.arange(2 * n_seg)
        return ObjectModel(mesh, side_band, "cylinder")
    if kind == "handle-box":
        w, d, h = dims if dims is not None else (0.18, 0.12, 0.10)
        if min(w, d, h) <= 0:
            raise ValueError("handle-box dims must be positive")
        body_v, body_f = box_mesh([w, d, h])
        bar_dims = [w * 0.95, d * 0.8, h * 0.25]
        gap = 0.002
        bar_center = [0, 0, h / 2 + gap + bar_dims[2] / 2]
        bar_v, bar_f = box_mesh(bar_dims, center=bar_center)
        verts = np.vstack([body_v, bar_v])
        faces = np.vstack([body_f, bar_f + len(body_v)])
        mesh = TriMesh(verts, faces, watertight=True)
        bar_top_z = bar_center[2] + bar_dims[2] / 2
        top = np.nonzero(np.abs(verts[:, 2] - bar_top_z) < 1e-12)[0]
        return ObjectModel(mesh, top, "handle-box")
    raise ValueError(f"unknown object kind: {kind}")


def plane_frame(points, outward_hint):
    """Orthonormal frame of a (near) planar point set.

    Returns (origin, u, v, n) with n oriented along outward_hint. The first
    two points fix u so the frame varies smoothly with a rigidly moving set.
    """
    pts = np.asarray(points, dtype=float)
    origin = pts.mean(axis=0)
    u = pts[1] - pts[0]
    u = u / np.linalg.norm(u)
    w = pts[-1] - pts[0]
    n = np.cross(u, w)
    n = n / np.linalg.norm(n)
    if n @ np.asarray(outward_hint, dtype=float) < 0:
        n = -n
    v = np.cross(n, u)
    return origin, u, v, n


def object_contact_frame(obj: ObjectModel):
    """Contact-plane frame of the graspable region, in object-local coords."""
    pts = obj.mesh.vertices[obj.contact_vertex_ids]
    hint = pts.mean(axis=0) - obj.mesh.vertices.mean(axis=0)
    if np.linalg.norm(hint) < 1e-9:
        hint = np.array([0.0, 0.0, 1.0])
    return plane_frame(pts, hint)


# ---------------------------------------------------------------------------
# toy body

_JOINTS = [
    # name, parent, rest position
    ("pelvis", -1, (0.00, 0.00, 1.00)),
    ("spine1", 0, (0.00, 0.00, 1.12)),
    ("spine2", 1, (0.00, 0.00, 1.24)),
    ("chest", 2, (0.00, 0.00, 1.36)),
    ("neck", 3, (0.00, 0.00, 1.50)),
    ("head", 4, (0.00, 0.00, 1.60)),
    ("l_collar", 3, (0.06, 0.00, 1.42)),
    ("l_shoulder", 6, (0.18, 0.00, 1.42)),
    ("l_elbow", 7, (0.46, 0.00, 1.42)),
    ("l_wrist", 8, (0.72, 0.00, 1.42)),
    ("l_curl", 9, (0.82, 0.00, 1.42)),
    ("r_collar", 3, (-0.06, 0.00, 1.42)),
    ("r_shoulder", 11, (-0.18, 0.00, 1.42)),
    ("r_elbow", 12, (-0.46, 0.00, 1.42)),
    ("r_wrist", 13, (-0.72, 0.00, 1.42)),
    ("r_curl", 14, (-0.82, 0.00, 1.42)),
    ("l_hip", 0, (0.10, 0.00, 0.96)),
    ("l_knee", 16, (0.11, 0.00, 0.55)),
    ("l_ankle", 17, (0.12, 0.00, 0.12)),
    ("l_foot", 18, (0.12, 0.12, 0.04)),
    ("r_hip", 0, (-0.10, 0.00, 0.96)),
    ("r_knee", 20, (-0.11, 0.00, 0.55)),
    ("r_ankle", 21, (-0.12, 0.00, 0.12)),
    ("r_foot", 22, (-0.12, 0.12, 0.04)),
]

HAND_JOINTS = ("l_wrist", "l_curl", "r_wrist", "r_curl")
POSE_SCALE = 0.3        # radians of joint rotation per unit latent


def _chain_weights(z, stops, ids):
    """Interpolate skinning along a vertical joint chain by height."""
    w = {}
    if z <= stops[0]:
        return {ids[0]: 1.0}
    if z >= stops[-1]:
        return {ids[-1]: 1.0}
    k = int(np.searchsorted(stops, z) - 1)
    t = (z - stops[k]) / (stops[k + 1] - stops[k])
    w[ids[k]] = 1.0 - t
    w[ids[k + 1]] = t
    return w


def _bone_ramp(t, owner, child, start=0.7, top=0.5):
    if t <= start:
        return {owner: 1.0}
    frac = min((t - start) / (1.0 - start), 1.0) * top
    return {owner: 1.0 - frac, child: frac}


def make_toy_body(config=None, seed=0) -> BodyModel:
    """Seeded procedural body honoring every BodyModel invariant."""
    config = dict(config or {})
    n_seg = int(config.get("capsule_segments", 10))
    n_rings = int(config.get("capsule_rings", 4))
    rng = np.random.default_rng(seed)

    names = [j[0] for j in _JOINTS]
    parents = np.array([j[1] for j in _JOINTS], dtype=np.int64)
    joints = np.array([j[2] for j in _JOINTS], dtype=float)
    jid = {n: i for i, n in enumerate(names)}

    def jp(name):
        return joints[jid[name]]

    def jitter(r):
        return r * (1.0 + 0.03 * rng.standard_normal())

    all_verts = []
    all_faces = []
    weights_rows = []       # list of dicts joint -> weight
    part_tags = []          # (part_name, local vertex array) for regions

    def add_part(name, verts, faces, weight_fn):
        base = len(all_verts)
        all_faces.extend((faces + base).tolist())
        for p in verts:
            all_verts.append(p)
            weights_rows.append(weight_fn(p))
        part_tags.append((name, base, len(verts)))

    # torso: pelvis..neck chain
    chain = ["pelvis", "spine1", "spine2", "chest", "neck"]
    stops = [jp(c)[2] for c in chain]
    ids = [jid[c] for c in chain]
    tv, tf = capsule_mesh(jp("pelvis") - [0, 0, 0.06], jp("neck"),
                          jitter(0.13), n_seg + 2, n_rings + 2)
    add_part("torso", tv, tf, lambda p: _chain_weights(p[2], stops, ids))

    hv, hf = capsule_mesh(jp("head") - [0, 0, 0.01], jp("head") + [0, 0, 0.11],
                          jitter(0.09), n_seg, 2)
    add_part("head", hv, hf, lambda p: {jid["head"]: 1.0})

    for side in ("l", "r"):
        sh, el, wr, cu = (jp(f"{side}_shoulder"), jp(f"{side}_elbow"),
                          jp(f"{side}_wrist"), jp(f"{side}_curl"))
        axis_len = np.linalg.norm(el - sh)
        uv, uf = capsule_mesh(sh, el, jitter(0.050), n_seg, n_rings)
        add_part(f"{side}_upper_arm", uv, uf,
                 lambda p, sh=sh, el=el, al=axis_len, s=side: _bone_ramp(
                     (p - sh) @ (el - sh) / al**2, jid[f"{s}_shoulder"],
                     jid[f"{s}_elbow"]))
        fv, ff = capsule_mesh(el, wr, jitter(0.042), n_seg, n_rings)
        add_part(f"{side}_forearm", fv, ff,
                 lambda p, el=el, wr=wr, s=side: _bone_ramp(
                     (p - el) @ (wr - el) / np.linalg.norm(wr - el)**2,
                     jid[f"{s}_elbow"], jid[f"{s}_wrist"]))
        # rigid paddle for the whole hand keeps the palm exactly planar
        sign = 1.0 if side == "l" else -1.0
        pv, pf = box_mesh([0.12, 0.06, 0.025],
                          center=cu + [sign * 0.01, 0, 0], subdiv=(4, 3, 1))
        add_part(f"{side}_hand", pv, pf, lambda p, s=side: {jid[f"{s}_curl"]: 1.0})

        hip, kn, an = (jp(f"{side}_hip"), jp(f"{side}_knee"), jp(f"{side}_ankle"))
        thv, thf = capsule_mesh(hip, kn, jitter(0.065), n_seg, n_rings)
        add_part(f"{side}_thigh", thv, thf,
                 lambda p, hip=hip, kn=kn, s=side: _bone_ramp(
                     (p - hip) @ (kn - hip) / np.linalg.norm(kn - hip)**2,
                     jid[f"{s}_hip"], jid[f"{s}_knee"]))
        shv, shf = capsule_mesh(kn, an, jitter(0.055), n_seg, n_rings)
        add_part(f"{side}_shin", shv, shf,
                 lambda p, kn=kn, an=an, s=side: _bone_ramp(
                     (p - kn) @ (an - kn) / np.linalg.norm(an - kn)**2,
                     jid[f"{s}_knee"], jid[f"{s}_ankle"]))
        fb_center = [hip[0], 0.06, 0.045]
        fbv, fbf = box_mesh([0.08, 0.20, 0.05], center=fb_center, subdiv=(2, 3, 1))
        add_part(f"{side}_foot", fbv, fbf, lambda p, s=side: {jid[f"{s}_foot"]: 1.0})

    verts = np.asarray(all_verts)
    faces = np.asarray(all_faces, dtype=np.int64)
    K = len(names)
    skin = np.zeros((len(verts), K))
    for i, row in enumerate(weights_rows):
        for j, w in row.items():
            skin[i, j] = w
    skin /= skin.sum(axis=1, keepdims=True)

    # contact regions: palmar grids, soles, seat band
    regions = {}
    spans = {name: (base, base + count) for name, base, count in part_tags}

    def part_ids(name, pred):
        lo, hi = spans[name]
        sel = np.nonzero(pred(verts[lo:hi]))[0] + lo
        return sel.astype(np.int64)

    for side in ("l", "r"):
        lo, hi = spans[f"{side}_hand"]
        zmin = verts[lo:hi, 2].min()
        regions[f"palm_{side}"] = part_ids(
            f"{side}_hand", lambda v, z=zmin: np.abs(v[:, 2] - z) < 1e-9)
        lo, hi = spans[f"{side}_foot"]
        zmin = verts[lo:hi, 2].min()
        regions[f"sole_{side}"] = part_ids(
            f"{side}_foot", lambda v, z=zmin: np.abs(v[:, 2] - z) < 1e-9)
    seat = part_ids("torso", lambda v: v[:, 2] < jp("pelvis")[2] + 0.02)
    thigh_band = np.concatenate([
        part_ids("l_thigh", lambda v: v[:, 2] > jp("l_hip")[2] - 0.12),
        part_ids("r_thigh", lambda v: v[:, 2] > jp("r_hip")[2] - 0.12)])
    regions["seat"] = np.unique(np.concatenate([seat, thigh_band]))

    # shape bases: height and width modes plus smooth seeded fields;
    # hand/foot parts translate rigidly with their joint so grids stay planar
    freqs = rng.uniform(0.5, 2.0, size=(SHAPE_DIM, 3))
    phases = rng.uniform(0, 2 * np.pi, size=(SHAPE_DIM, 3))
    amps = rng.uniform(0.005, 0.015, size=SHAPE_DIM)

    def shape_field(pos):
        out = np.zeros((3, SHAPE_DIM))
        out[2, 0] = 0.1 * pos[2]                       # height scale
        out[0, 1] = 0.08 * pos[0]                      # lateral scale
        for m in range(2, SHAPE_DIM):
            out[:, m] = amps[m] * np.sin(freqs[m] * pos + phases[m])
        return out

    joint_basis = np.stack([shape_field(joints[k]) for k in range(K)])
    rigid_parts = {f"{s}_{p}" for s in ("l", "r") for p in ("hand", "foot")}
    rigid_joint = {}
    for s in ("l", "r"):
        rigid_joint[f"{s}_hand"] = jid[f"{s}_curl"]
        rigid_joint[f"{s}_foot"] = jid[f"{s}_foot"]
    vertex_basis = np.empty((len(verts), 3, SHAPE_DIM))
    for name, base, count in part_tags:
        if name in rigid_parts:
            vertex_basis[base:base + count] = joint_basis[rigid_joint[name]]
        else:
            for i in range(base, base + count):
                vertex_basis[i] = shape_field(verts[i])

    # pose decoder: exact root block, seeded orthonormal columns elsewhere
    body_ids = [j for j in range(K) if names[j] not in HAND_JOINTS]
    n_body = len(body_ids)
    U = np.zeros((3 * n_body, LATENT_DIM))
    U[:3, :3] = np.eye(3)
    q, _ = np.linalg.qr(rng.standard_normal((3 * n_body - 3, LATENT_DIM - 3)))
    U[3:, 3:] = q
    decoder = POSE_SCALE * U

    hand_ids = np.array([jid[n] for n in HAND_JOINTS], dtype=np.int64)
    hand_axes = np.array([[0, 1, 0], [0, 1, 0], [0, 1, 0], [0, 1, 0]],
                         dtype=float)

    limit_joints = [
        (jid["l_elbow"], np.array([0.0, 0.0, 1.0]), -0.1, 2.4),
        (jid["r_elbow"], np.array([0.0, 0.0, 1.0]), -2.4, 0.1),
        (jid["l_knee"], np.array([1.0, 0.0, 0.0]), -0.1, 2.4),
        (jid["r_knee"], np.array([1.0, 0.0, 0.0]), -0.1, 2.4),
    ]

    spheres = []

    def bone_spheres(a, b, radius, count=2):
        pa, pb = jp(a), jp(b)
        for t in np.linspace(0.25, 0.75, count):
            pos = pa + t * (pb - pa)
            spheres.append((jid[a], pos - pa, radius))

    bone_spheres("pelvis", "chest", 0.12)
    spheres.append((jid["head"], np.array([0.0, 0.0, 0.06]), 0.09))
    for side in ("l", "r"):
        bone_spheres(f"{side}_shoulder", f"{side}_elbow", 0.05)
        bone_spheres(f"{side}_elbow", f"{side}_wrist", 0.042)
        spheres.append((jid[f"{side}_curl"], np.array([0.0, 0.0, 0.0]), 0.04))
        bone_spheres(f"{side}_hip", f"{side}_knee", 0.065)
        bone_spheres(f"{side}_knee", f"{side}_ankle", 0.055)

    marker_ids = np.unique(np.linspace(0, len(verts) - 1, 64).astype(np.int64))

    return BodyModel(
        template=TriMesh(verts, faces),
        parents=parents,
        joint_names=names,
        rest_joints_base=joints,
        shape_joint_basis=joint_basis,
        shape_vertex_basis=vertex_basis,
        skin_weights=skin,
        pose_decoder=decoder,
        hand_joint_ids=hand_ids,
        hand_axes=hand_axes,
        contact_regions=regions,
        limit_joints=limit_joints,
        proxy_spheres=spheres,
        marker_ids=marker_ids,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# scenarios

@dataclass
class NoiseConfig:
    keypoint_sigma: float = 0.0         # px
    keypoint_dropout: float = 0.0       # probability per joint-view
    depth_sigma: float = 0.0            # m
    mask_boundary_px: int = 0           # >0 dilates, <0 erodes the true mask
    distractors: int = 0                # extra candidate masks per view
    seed: int = 0
    max_cloud_points: int = 400         # per view after subsampling

    def __post_init__(self):
        if not 0 <= self.keypoint_dropout <= 1:
            raise ValueError("dropout must be a probability")
        if self.keypoint_sigma < 0 or self.depth_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.distractors < 0:
            raise ValueError("distractor count must be non-negative")


@dataclass
class Scenario:
    object_kind: str
    object_dims: object
    frames: int
    object_keyframes: list              # (frame, xi 6-vector)
    body_keyframes: list                # (frame, BodyParams)
    contact_window: tuple = None        # inclusive (t_start, t_end) or None
    grasp_hand: str = "r"
    num_cameras: int = 6
    ring_radius: float = 2.0
    ring_height: float = 1.2
    image_width: int = 160
    image_height: int = 120
    focal: float = 110.0
    name: str = "scenario"

    def __post_init__(self):
        if self.frames < 1 or self.num_cameras < 1:
            raise ValueError("scenario needs frames and at least one camera")
        if self.contact_window is not None:
            t0, t1 = self.contact_window
            if not (0 <= t0 <= t1 < self.frames):
                raise ValueError("contact window must satisfy 0 <= t0 <= t1 < T")


def ring_cameras(count, radius=2.0, height=1.2, width=160, height_px=120,
                 focal=110.0, target=(0.0, 0.0, 0.9)):
    """Evenly spaced inward-looking cameras on a ring (the capture layout)."""
    target = np.asarray(target, dtype=float)
    cams = []
    for i in range(count):
        ang = 2 * np.pi * i / count
        pos = np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        z_c = target - pos
        z_c /= np.linalg.norm(z_c)
        x_c = np.cross(z_c, [0.0, 0.0, 1.0])
        x_c /= np.linalg.norm(x_c)
        y_c = np.cross(z_c, x_c)
        R = np.stack([x_c, y_c, z_c])
        ext = RigidTransform.from_matrix(R, -R @ pos)
        cams.append(PinholeCamera(focal, focal, width / 2, height_px / 2,
                                  width, height_px, ext))
    return cams


def _interp_keyframes(keyframes, t, lerp):
    if not keyframes:
        raise ValueError("empty keyframe script")
    frames = [k for k, _ in keyframes]
    if t <= frames[0]:
        return keyframes[0][1]
    if t >= frames[-1]:
        return keyframes[-1][1]
    hi = int(np.searchsorted(frames, t, side="right"))
    (f0, v0), (f1, v1) = keyframes[hi - 1], keyframes[hi]
    if f0 == f1:
        return v1
    a = (t - f0) / (f1 - f0)
    return lerp(v0, v1, a)


def _lerp_params(a: BodyParams, b: BodyParams, t):
    return BodyParams(*(getattr(a, n) * (1 - t) + getattr(b, n) * t
                        for n in ("beta", "theta_b", "theta_h", "theta_f",
                                  "psi", "gamma")))


def _lerp_xi(a, b, t):
    return np.asarray(a) * (1 - t) + np.asarray(b) * t


def body_params_at(scenario: Scenario, t) -> BodyParams:
    return _interp_keyframes(scenario.body_keyframes, t, _lerp_params).copy()


def grasp_pose(body_model: BodyModel, params: BodyParams,
               object_model: ObjectModel, hand="r"):
    """Object pose placing its contact face exactly in the palm plane."""
    state = pose_body(body_model, params)
    ids = body_model.contact_regions[f"palm_{hand}"]
    palm = state.vertices[ids]
    curl = state.joints[list(body_model.joint_names).index(f"{hand}_curl")]
    hint = palm.mean(axis=0) - curl
    o_p, u_p, v_p, n_p = plane_frame(palm, hint)
    o_o, u_o, v_o, n_o = object_contact_frame(object_model)
    B_t = np.column_stack([u_p, -v_p, -n_p])
    B_o = np.column_stack([u_o, v_o, n_o])
    R = B_t @ B_o.T
    t = o_p - R @ o_o
    return np.concatenate([rotation_log(R), t])


def ground_truth_trajectories(scenario: Scenario, body_model: BodyModel,
                              object_model: ObjectModel):
    """Per-frame GT body params, object poses and the contact schedule.

    Inside the contact window the object is rigidly attached to the grasping
    palm (annotated vertices exactly on the contact surface); outside it the
    pose holds the window boundary value, or follows the keyframe script when
    there is no window.
    """
    T = scenario.frames
    frames = [body_params_at(scenario, t) for t in range(T)]
    q = np.zeros(T, dtype=np.int64)
    xis = np.zeros((T, 6))
    if scenario.contact_window is not None:
        t0, t1 = scenario.contact_window
        q[t0:t1 + 1] = 1
        for t in range(T):
            anchor = min(max(t, t0), t1)
            xis[t] = grasp_pose(body_model, frames[anchor], object_model,
                                scenario.grasp_hand)
    else:
        for t in range(T):
            xis[t] = _interp_keyframes(scenario.object_keyframes, t, _lerp_xi)
    return frames, xis, q


# ---------------------------------------------------------------------------
# observation generation

@dataclass
class ViewObservation:
    candidates: list                    # Silhouette candidates
    candidate_labels: list              # parallel labels; "object" marks truth
    depth: rnd.DepthImage
    keypoints: object                   # energy.KeypointDetection or None
    cloud: PointCloud


@dataclass
class FrameObservation:
    views: list


@dataclass
class SequenceObservation:
    cameras: list
    frames: list
    ground_points: np.ndarray

    def __post_init__(self):
        for fr in self.frames:
            if len(fr.views) != len(self.cameras):
                raise ValueError("view count must match the camera rig")

    def __len__(self):
        return len(self.frames)


def _shift(mask, dr, dc):
    out = np.zeros_like(mask)
    h, w = mask.shape
    rs = slice(max(dr, 0), h + min(dr, 0))
    cs = slice(max(dc, 0), w + min(dc, 0))
    rs_src = slice(max(-dr, 0), h + min(-dr, 0))
    cs_src = slice(max(-dc, 0), w + min(-dc, 0))
    out[rs, cs] = mask[rs_src, cs_src]
    return out


def morph_mask(mask, px):
    """Square dilation (px > 0) or erosion (px < 0) of a boolean mask."""
    out = mask.copy()
    for _ in range(abs(int(px))):
        acc = out.copy()
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                shifted = _shift(out, dr, dc)
                acc = acc | shifted if px > 0 else acc & shifted
        out = acc
    return out


def _ellipse_mask(height, width, rng):
    cy = rng.uniform(0.15, 0.85) * height
    cx = rng.uniform(0.15, 0.85) * width
    a = rng.uniform(4, 18)
    b = rng.uniform(4, 18)
    ang = rng.uniform(0, np.pi)
    ys, xs = np.mgrid[0:height, 0:width]
    x = (xs + 0.5) - cx
    y = (ys + 0.5) - cy
    xr = x * np.cos(ang) + y * np.sin(ang)
    yr = -x * np.sin(ang) + y * np.cos(ang)
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def _backproject(depth_values, owner, cam, want_tag, stride, max_points):
    rows, cols = np.nonzero((owner == want_tag) & (depth_values > 0))
    if not len(rows):
        return np.empty((0, 3))
    if stride > 1:
        keep = np.arange(0, len(rows), stride)
        rows, cols = rows[keep], cols[keep]
    if len(rows) > max_points:
        keep = np.linspace(0, len(rows) - 1, max_points).astype(int)
        rows, cols = rows[keep], cols[keep]
    z = depth_values[rows, cols]
    x = ((cols + 0.5) - cam.cx) / cam.fx * z
    y = ((rows + 0.5) - cam.cy) / cam.fy * z
    pts_cam = np.column_stack([x, y, z])
    return cam.extrinsic.inverse().apply(pts_cam)


def synth_sequence(scenario: Scenario, noise: NoiseConfig,
                   body_model: BodyModel, object_model: ObjectModel,
                   threads=1):
    """Ground truth plus corrupted multi-view observations.

    Returns (gt FittedSequence, SequenceObservation). Corruption is
    deterministic per (scenario, noise): every frame draws from its own
    seed ^ frame generator, so frames may be produced in parallel.
    """
    from .optim import FittedSequence, ObjectTrajectory

    cams = ring_cameras(scenario.num_cameras, scenario.ring_radius,
                        scenario.ring_height, scenario.image_width,
                        scenario.image_height, scenario.focal)
    frames_gt, xis_gt, q = ground_truth_trajectories(scenario, body_model,
                                                     object_model)
    T = scenario.frames

    rng_ground = np.random.default_rng(noise.seed ^ 0x67726E64)
    gx = rng_ground.uniform(-1.5, 1.5, size=160)
    gy = rng_ground.uniform(-1.5, 1.5, size=160)
    ground_points = np.column_stack([gx, gy, np.zeros_like(gx)])
    if noise.depth_sigma > 0:
        ground_points[:, 2] += rng_ground.normal(scale=noise.depth_sigma,
                                                 size=len(gx))

    def build_frame(t):
        rng = np.random.default_rng(noise.seed ^ t)
        state = pose_body(body_model, frames_gt[t])
        body_mesh = TriMesh(state.vertices, body_model.template.faces)
        pose = RigidTransform.from_vector(xis_gt[t])
        views = []
        for cam in cams:
            depth_img, owner = rnd.render_scene(
                [(body_mesh, RigidTransform.identity()),
                 (object_model.mesh, pose)], cam)
            vals = depth_img.values
            if noise.depth_sigma > 0:
                covered = vals > 0
                vals = vals.copy()
                vals[covered] += rng.normal(scale=noise.depth_sigma,
                                            size=int(covered.sum()))
                vals[covered] = np.maximum(vals[covered], 1e-3)
            noisy_depth = rnd.DepthImage(vals)

            true_mask = owner == 1
            if noise.mask_boundary_px:
                true_mask = morph_mask(true_mask, noise.mask_boundary_px)
            cands = [rnd.Silhouette(true_mask.astype(float))]
            labels = ["object"]
            for d in range(noise.distractors):
                cands.append(rnd.Silhouette(
                    _ellipse_mask(cam.height, cam.width, rng).astype(float)))
                labels.append(f"distractor_{d}")
            order = rng.permutation(len(cands))
            cands = [cands[i] for i in order]
            labels = [labels[i] for i in order]

            uv = np.empty((body_model.joint_count, 2))
            conf = np.ones(body_model.joint_count)
            pts_cam = cam.world_to_camera(state.joints)
            behind = pts_cam[:, 2] <= rnd.Z_NEAR
            with np.errstate(divide="ignore", invalid="ignore"):
                uv[:, 0] = cam.fx * pts_cam[:, 0] / pts_cam[:, 2] + cam.cx
                uv[:, 1] = cam.fy * pts_cam[:, 1] / pts_cam[:, 2] + cam.cy
            conf[behind] = 0.0
            uv[behind] = 0.0
            if noise.keypoint_sigma > 0:
                uv = uv + rng.normal(scale=noise.keypoint_sigma, size=uv.shape)
            if noise.keypoint_dropout > 0:
                drop = rng.random(body_model.joint_count) < \
                    noise.keypoint_dropout
                conf[drop] = 0.0
            from .energy import KeypointDetection
            kp = KeypointDetection(uv, conf)

            body_pts = _backproject(vals, owner, cam, 0, 2,
                                    noise.max_cloud_points)
            obj_pts = _backproject(vals, owner, cam, 1, 1,
                                   noise.max_cloud_points)
            cloud = PointCloud(
                np.vstack([body_pts, obj_pts]),
                np.concatenate([np.full(len(body_pts), LABEL_BODY),
                                np.full(len(obj_pts), LABEL_OBJECT)]
                               ).astype(np.int8))
            views.append(ViewObservation(cands, labels, noisy_depth, kp,
                                         cloud))
        return FrameObservation(views)

    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frame_obs = list(pool.map(build_frame, range(T)))
    else:
        frame_obs = [build_frame(t) for t in range(T)]

    obs = SequenceObservation(cams, frame_obs, ground_points)
    beta_star = frames_gt[0].beta.copy()
    gt = FittedSequence(beta_star, frames_gt,
                        ObjectTrajectory(xis_gt, np.zeros(T, dtype=bool)),
                        q, {"scenario": scenario.name})
    return gt, obs


# ---------------------------------------------------------------------------
# scenario presets

def make_scenario(preset, object_kind=None, frames=60, num_cameras=6,
                  seed=0, **kw) -> Scenario:
    """Named scenario builders.

    drift: free object motion (translation + slow tumble), swaying body.
    grasp: right-hand grasp with a scripted contact window.
    static: motionless object, standing body.
    """
    rng = np.random.default_rng(seed)
    rest = BodyParams()
    rest.gamma[:] = [0.0, -0.35, 0.0]        # step back from the ring center
    if preset == "static":
        kind = object_kind or "cube"
        xi0 = np.array([0, 0, 0, 0.55, 0.35, 0.5])
        return Scenario(kind, kw.get("dims"), frames,
                        [(0, xi0), (frames - 1, xi0)],
                        [(0, rest), (frames - 1, rest)],
                        None, num_cameras=num_cameras, name=f"static-{kind}",
                        **{k: v for k, v in kw.items() if k != "dims"})
    if preset == "drift":
        kind = object_kind or "cube"
        rot0 = rng.normal(scale=0.1, size=3)
        rot1 = rot0 + rng.normal(scale=0.15, size=3) + [0.25, 0.1, 0.2]
        start = np.concatenate([rot0, [0.45, 0.45, 0.45]])
        end = np.concatenate([rot1, [0.15, -0.05, 0.75]])
        sway = rest.copy()
        sway.theta_b[3:7] = rng.normal(scale=0.15, size=4)
        sway.gamma[0] += 0.05
        return Scenario(kind, kw.get("dims"), frames,
                        [(0, start), (frames - 1, end)],
                        [(0, rest), (frames - 1, sway)],
                        None, num_cameras=num_cameras, name=f"drift-{kind}",
                        **{k: v for k, v in kw.items() if k != "dims"})
    if preset == "grasp":
        kind = object_kind or "handle-box"
        t0 = kw.pop("contact_start", frames // 5)
        t1 = kw.pop("contact_end", frames - frames // 5)
        mid = rest.copy()
        mid.theta_b[3:9] = rng.normal(scale=0.25, size=6)
        mid.theta_h[:] = [0.0, 0.25, 0.1, 0.3]
        mid.gamma[:] = rest.gamma + [0.04, 0.02, -0.01]
        late = mid.copy()
        late.theta_b[3:9] = mid.theta_b[3:9] + rng.normal(scale=0.2, size=6)
        late.gamma[:] = mid.gamma + [-0.05, 0.03, 0.02]
        return Scenario(kind, kw.pop("dims", None), frames, [],
                        [(0, rest), (frames // 2, mid), (frames - 1, late)],
                        (t0, t1), num_cameras=num_cameras,
                        name=f"grasp-{kind}", **kw)
    raise ValueError(f"unknown scenario preset: {preset}")


# ---------------------------------------------------------------------------
# sequence directory layout

def _camera_to_dict(cam: PinholeCamera):
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "rotation": cam.extrinsic.rotation.tolist(),
            "translation": cam.extrinsic.translation.tolist()}


def _camera_from_dict(d):
    return PinholeCamera(d["fx"], d["fy"], d["cx"], d["cy"], d["width"],
                         d["height"],
                         RigidTransform(np.asarray(d["rotation"]),
                                        np.asarray(d["translation"])))


def _scenario_to_dict(s: Scenario):
    return {
        "object_kind": s.object_kind,
        "object_dims": s.object_dims if s.object_dims is None or
        np.isscalar(s.object_dims) else list(s.object_dims),
        "frames": s.frames,
        "object_keyframes": [[int(f), np.asarray(x).tolist()]
                             for f, x in s.object_keyframes],
        "body_keyframes": [[int(f), {
            "beta": p.beta.tolist(), "theta_b": p.theta_b.tolist(),
            "theta_h": p.theta_h.tolist(), "theta_f": p.theta_f.tolist(),
            "psi": p.psi.tolist(), "gamma": p.gamma.tolist()}]
            for f, p in s.body_keyframes],
        "contact_window": list(s.contact_window) if s.contact_window else None,
        "grasp_hand": s.grasp_hand,
        "num_cameras": s.num_cameras,
        "ring_radius": s.ring_radius,
        "ring_height": s.ring_height,
        "image_width": s.image_width,
        "image_height": s.image_height,
        "focal": s.focal,
        "name": s.name,
    }


def write_sequence(out_dir, gt, obs: SequenceObservation, scenario: Scenario,
                   body_model: BodyModel, object_model: ObjectModel,
                   contact_body_ids=None):
    """Write the full sequence tree consumed by the pipeline commands."""
    from .optim import fitted_to_json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cameras.json").write_text(json.dumps(
        [_camera_to_dict(c) for c in obs.cameras], sort_keys=True, indent=1))
    (out / "gt.json").write_text(fitted_to_json(gt))
    (out / "scenario.json").write_text(json.dumps(_scenario_to_dict(scenario),
                                                  sort_keys=True, indent=1))
    hand = scenario.grasp_hand
    body_ids = body_model.contact_regions[f"palm_{hand}"] \
        if contact_body_ids is None else np.asarray(contact_body_ids)
    (out / "contact.json").write_text(json.dumps({
        "q": gt.q.tolist(),
        "body_contact_ids": np.asarray(body_ids, dtype=int).tolist(),
        "object_contact_ids": object_model.contact_vertex_ids.tolist(),
        "hand": hand}, sort_keys=True, indent=1))
    save_body_model(out / "body_model.ifbm", body_model)
    save_obj(out / "object.obj", object_model.mesh)
    (out / "object_contact.json").write_text(json.dumps({
        "name": object_model.name,
        "contact_vertex_ids": object_model.contact_vertex_ids.tolist()},
        sort_keys=True, indent=1))
    save_xyz(out / "ground.xyz", PointCloud(
        obs.ground_points, np.full(len(obs.ground_points), 2, dtype=np.int8)))
    for t, frame in enumerate(obs.frames):
        fdir = out / f"frame_{t:04d}"
        fdir.mkdir(exist_ok=True)
        mask_index = {}
        for v, view in enumerate(frame.views):
            rnd.save_dpt(fdir / f"view_{v}.dpt", view.depth)
            entries = []
            for c, (cand, label) in enumerate(zip(view.candidates,
                                                  view.candidate_labels)):
                name = f"view_{v}_c{c:02d}.pgm"
                rnd.save_pgm(fdir / name, cand)
                entries.append({"file": name, "label": label})
            mask_index[f"view_{v}"] = entries
            kp = view.keypoints
            (fdir / f"view_{v}.kp.json").write_text(json.dumps({
                "positions": kp.positions.tolist(),
                "confidences": kp.confidences.tolist()},
                sort_keys=True, indent=1))
            save_xyz(fdir / f"view_{v}.xyz", view.cloud)
        (fdir / "masks.json").write_text(json.dumps(mask_index,
                                                    sort_keys=True, indent=1))


def read_sequence(seq_dir) -> SequenceObservation:
    from .energy import KeypointDetection
    from .geometry import load_xyz

    seq = Path(seq_dir)
    cam_file = seq / "cameras.json"
    if not cam_file.exists():
        raise FileNotFoundError(f"missing {cam_file}")
    cams = [_camera_from_dict(d) for d in json.loads(cam_file.read_text())]
    frames = []
    t = 0
    while (seq / f"frame_{t:04d}").exists():
        fdir = seq / f"frame_{t:04d}"
        mask_index = json.loads((fdir / "masks.json").read_text())
        views = []
        for v in range(len(cams)):
            entries = mask_index[f"view_{v}"]
            cands = [rnd.load_pgm(fdir / e["file"]) for e in entries]
            labels = [e["label"] for e in entries]
            depth = rnd.load_dpt(fdir / f"view_{v}.dpt")
            kp_doc = json.loads((fdir / f"view_{v}.kp.json").read_text())
            kp = KeypointDetection(np.asarray(kp_doc["positions"]),
                                   np.asarray(kp_doc["confidences"]))
            cloud = load_xyz(fdir / f"view_{v}.xyz")
            views.append(ViewObservation(cands, labels, depth, kp, cloud))
        frames.append(FrameObservation(views))
        t += 1
    if not frames:
        raise FileNotFoundError(f"no frame_0000 directory under {seq}")
    ground = load_xyz(seq / "ground.xyz").points if \
        (seq / "ground.xyz").exists() else np.empty((0, 3))
    return SequenceObservation(cams, frames, ground)
