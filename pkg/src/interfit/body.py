"""Procedural parametric articulated body: shape blendshapes, latent pose
decoding, forward kinematics, linear blend skinning and contact annotation.

The model stands in for a licensed statistical body: a kinematic tree of 24
joints (20 decoded from a 32-D pose latent, 2 per hand driven by explicit
angles), a 10-D shape space acting on both joints and vertices, and a capsule
surface skinned to the bones. Posing is

    v_i = sum_j w_ij ( R^w_j (v_rest_i(beta) - J_j(beta)) + t^w_j ) + gamma

with world transforms accumulated down the tree. Analytic Jacobians of posed
points w.r.t. (beta, theta_b, theta_h, gamma) are provided for descent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import TriMesh, rotation_jacobian, rotation_matrix

SHAPE_DIM = 10
LATENT_DIM = 32

JOINT_CLASS_BODY = 0
JOINT_CLASS_HAND = 1
JOINT_CLASS_FACE = 2


@dataclass
class BodyModel:
    template: TriMesh
    parents: np.ndarray                 # (K,), -1 at the root
    joint_names: list
    rest_joints_base: np.ndarray        # (K, 3)
    shape_joint_basis: np.ndarray       # (K, 3, 10)
    shape_vertex_basis: np.ndarray      # (N, 3, 10)
    skin_weights: np.ndarray            # (N, K), rows sum to 1
    pose_decoder: np.ndarray            # (3 * n_body_joints, 32)
    hand_joint_ids: np.ndarray          # (H,)
    hand_axes: np.ndarray               # (H, 3) unit rotation axes
    contact_regions: dict               # name -> vertex id array
    limit_joints: list                  # (joint_id, axis(3,), lo, hi)
    proxy_spheres: list                 # (joint_id, rest offset(3,), radius)
    marker_ids: np.ndarray              # default virtual-marker vertex ids
    seed: int = 0

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        K = len(self.parents)
        roots = np.nonzero(self.parents < 0)[0]
        if len(roots) != 1:
            raise ValueError("joint parents must form a single rooted tree")
        for j, p in enumerate(self.parents):
            if p >= j:
                raise ValueError("parents must precede children in joint order")
        row_sums = self.skin_weights.sum(axis=1)
        if np.abs(row_sums - 1.0).max() > 1e-9 or self.skin_weights.min() < 0:
            raise ValueError("skinning rows must be non-negative and sum to 1")
        n_verts = len(self.template.vertices)
        for ids in self.contact_regions.values():
            if len(ids) and (np.min(ids) < 0 or np.max(ids) >= n_verts):
                raise ValueError("contact region indices out of range")
        self._hand_set = set(int(j) for j in self.hand_joint_ids)
        self._body_joint_ids = np.array(
            [j for j in range(K) if j not in self._hand_set], dtype=np.int64)
        expected = 3 * len(self._body_joint_ids)
        if self.pose_decoder.shape != (expected, LATENT_DIM):
            raise ValueError("pose decoder must map 32 latents to body rotations")

    @property
    def joint_count(self):
        return len(self.parents)

    @property
    def vertex_count(self):
        return len(self.template.vertices)

    @property
    def body_joint_ids(self):
        return self._body_joint_ids

    @property
    def contact_vertex_ids(self):
        """Union of all annotated regions, sorted and order-stable."""
        ids = np.concatenate([np.asarray(v, dtype=np.int64)
                              for v in self.contact_regions.values()])
        return np.unique(ids)

    def joint_classes(self):
        cls = np.full(self.joint_count, JOINT_CLASS_BODY, dtype=np.int64)
        cls[self.hand_joint_ids] = JOINT_CLASS_HAND
        return cls


@dataclass
class BodyParams:
    beta: np.ndarray = field(default_factory=lambda: np.zeros(SHAPE_DIM))
    theta_b: np.ndarray = field(default_factory=lambda: np.zeros(LATENT_DIM))
    theta_h: np.ndarray = field(default_factory=lambda: np.zeros(4))
    theta_f: np.ndarray = field(default_factory=lambda: np.zeros(3))
    psi: np.ndarray = field(default_factory=lambda: np.zeros(SHAPE_DIM))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("beta", "theta_b", "theta_h", "theta_f", "psi", "gamma"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            setattr(self, name, arr)
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite entries in {name}")

    def copy(self):
        return BodyParams(self.beta.copy(), self.theta_b.copy(),
                          self.theta_h.copy(), self.theta_f.copy(),
                          self.psi.copy(), self.gamma.copy())


@dataclass
class BodyState:
    vertices: np.ndarray        # (N, 3) posed, world frame
    joints: np.ndarray          # (K, 3) posed joint positions
    joint_rot: np.ndarray       # (K, 3, 3) world rotations
    joint_pos: np.ndarray       # (K, 3) world translations incl. gamma
    sphere_centers: np.ndarray  # (S, 3) posed proxy-sphere centers
    sphere_radii: np.ndarray    # (S,)


def decode_pose(model: BodyModel, theta_b):
    """Latent to per-body-joint axis-angle rotations, (n_body, 3)."""
    theta_b = np.asarray(theta_b, dtype=float).reshape(LATENT_DIM)
    return (model.pose_decoder @ theta_b).reshape(-1, 3)


def shaped_joints(model: BodyModel, beta):
    """Rest joints under shape blendshapes: J(beta)."""
    beta = np.asarray(beta, dtype=float).reshape(SHAPE_DIM)
    return model.rest_joints_base + model.shape_joint_basis @ beta


def shaped_vertices(model: BodyModel, beta):
    beta = np.asarray(beta, dtype=float).reshape(SHAPE_DIM)
    return model.template.vertices + model.shape_vertex_basis @ beta


def joint_rotations(model: BodyModel, params: BodyParams):
    """Assemble per-joint local axis-angle rotations from the parameters."""
    omega = np.zeros((model.joint_count, 3))
    omega[model.body_joint_ids] = decode_pose(model, params.theta_b)
    for i, j in enumerate(model.hand_joint_ids):
        omega[j] = params.theta_h[i] * model.hand_axes[i]
    return omega


def _forward_transforms(model, omega, joints_rest):
    K = model.joint_count
    Rw = np.empty((K, 3, 3))
    tw = np.empty((K, 3))
    R_loc = np.stack([rotation_matrix(omega[j]) for j in range(K)])
    for j in range(K):
        p = model.parents[j]
        t_loc = joints_rest[j] - (joints_rest[p] if p >= 0 else 0.0)
        if p < 0:
            Rw[j] = R_loc[j]
            tw[j] = t_loc
        else:
            Rw[j] = Rw[p] @ R_loc[j]
            tw[j] = Rw[p] @ t_loc + tw[p]
    return Rw, tw, R_loc


def pose_body(model: BodyModel, params: BodyParams) -> BodyState:
    """Shape blendshapes, forward kinematics, LBS, then global translation."""
    omega = joint_rotations(model, params)
    joints_rest = shaped_joints(model, params.beta)
    verts_rest = shaped_vertices(model, params.beta)
    Rw, tw, _ = _forward_transforms(model, omega, joints_rest)

    verts = np.zeros_like(verts_rest)
    for j in range(model.joint_count):
        w = model.skin_weights[:, j]
        nz = np.nonzero(w)[0]
        if not len(nz):
            continue
        local = verts_rest[nz] - joints_rest[j]
        verts[nz] += w[nz, None] * (local @ Rw[j].T + tw[j])
    verts += params.gamma

    centers = np.empty((len(model.proxy_spheres), 3))
    radii = np.empty(len(model.proxy_spheres))
    for s, (j, offset, radius) in enumerate(model.proxy_spheres):
        centers[s] = Rw[j] @ offset + tw[j] + params.gamma
        radii[s] = radius
    return BodyState(verts, tw + params.gamma, Rw, tw + params.gamma,
                     centers, radii)


@dataclass
class PoseJacobians:
    """d(point)/d(beta | theta_b | theta_h) stacks; d/d(gamma) is identity.

    Row blocks: `vertex_ids` selects which posed vertices carry derivatives.
    Shapes: vertices (M, 3, dim), joints (K, 3, dim), spheres (S, 3, dim).
    """

    vertex_ids: np.ndarray
    d_vertices: dict
    d_joints: dict
    d_spheres: dict


def pose_body_jacobians(model: BodyModel, params: BodyParams, vertex_ids=None):
    """Forward pose plus analytic Jacobians for the requested vertices.

    Returns (BodyState, PoseJacobians). vertex_ids=None differentiates every
    vertex; pass a small id set in inner loops.
    """
    if vertex_ids is None:
        vertex_ids = np.arange(model.vertex_count)
    vertex_ids = np.asarray(vertex_ids, dtype=np.int64)

    omega = joint_rotations(model, params)
    joints_rest = shaped_joints(model, params.beta)
    verts_rest = shaped_vertices(model, params.beta)
    K = model.joint_count
    H = len(model.hand_joint_ids)
    body_ids = model.body_joint_ids
    n_body = len(body_ids)
    D = 3 * n_body + H       # rotation dofs: body omega components then hand angles

    dof_of_body = {int(j): 3 * i for i, j in enumerate(body_ids)}
    dof_of_hand = {int(j): 3 * n_body + i
                   for i, j in enumerate(model.hand_joint_ids)}

    Rw, tw, R_loc = _forward_transforms(model, omega, joints_rest)

    # world-transform sensitivities
    dRw = np.zeros((K, D, 3, 3))
    dtw = np.zeros((K, D, 3))
    dtw_beta = np.zeros((K, SHAPE_DIM, 3))
    for j in range(K):
        p = model.parents[j]
        t_loc = joints_rest[j] - (joints_rest[p] if p >= 0 else 0.0)
        dt_loc = model.shape_joint_basis[j] - (model.shape_joint_basis[p]
                                               if p >= 0 else 0.0)   # (3, 10)
        if p >= 0:
            dRw[j] = dRw[p] @ R_loc[j]
            dtw[j] = dRw[p] @ t_loc + dtw[p]
            dtw_beta[j] = (Rw[p] @ dt_loc).T + dtw_beta[p]
            R_parent = Rw[p]
        else:
            R_parent = np.eye(3)
            dtw_beta[j] = dt_loc.T
        dR_loc = rotation_jacobian(omega[j])        # (3, 3, 3)
        if int(j) in dof_of_body:
            base = dof_of_body[int(j)]
            for c in range(3):
                dRw[j, base + c] += R_parent @ dR_loc[c]
        elif int(j) in dof_of_hand:
            axis = model.hand_axes[list(model.hand_joint_ids).index(j)]
            seed = np.einsum("c,cab->ab", axis, dR_loc)
            dRw[j, dof_of_hand[int(j)]] += R_parent @ seed

    # vertices
    M = len(vertex_ids)
    dv_rot = np.zeros((M, 3, D))
    dv_beta = np.zeros((M, 3, SHAPE_DIM))
    verts = np.zeros((M, 3))
    w_sub = model.skin_weights[vertex_ids]
    local_all = verts_rest[vertex_ids]
    basis_sub = model.shape_vertex_basis[vertex_ids]      # (M, 3, 10)
    for j in range(K):
        w = w_sub[:, j]
        nz = np.nonzero(w)[0]
        if not len(nz):
            continue
        local = local_all[nz] - joints_rest[j]
        verts[nz] += w[nz, None] * (local @ Rw[j].T + tw[j])
        # rotation dofs: dR (D,3,3) applied to local + dt
        contrib = np.einsum("dab,mb->mad", dRw[j], local) + dtw[j].T[None]
        dv_rot[nz] += w[nz, None, None] * contrib
        dlocal = basis_sub[nz] - model.shape_joint_basis[j][None]     # (m, 3, 10)
        contrib_b = np.einsum("ab,mbs->mas", Rw[j], dlocal) \
            + dtw_beta[j].T[None]
        dv_beta[nz] += w[nz, None, None] * contrib_b
    verts += params.gamma

    # joints: posed joint position equals the world translation
    dj_rot = dtw.transpose(0, 2, 1)                  # (K, 3, D)
    dj_beta = dtw_beta.transpose(0, 2, 1)            # (K, 3, 10)

    # proxy spheres
    S = len(model.proxy_spheres)
    centers = np.empty((S, 3))
    radii = np.empty(S)
    ds_rot = np.zeros((S, 3, D))
    ds_beta = np.zeros((S, 3, SHAPE_DIM))
    for s, (j, offset, radius) in enumerate(model.proxy_spheres):
        centers[s] = Rw[j] @ offset + tw[j] + params.gamma
        radii[s] = radius
        ds_rot[s] = (np.einsum("dab,b->da", dRw[j], offset) + dtw[j]).T
        ds_beta[s] = dtw_beta[j].T

    # map rotation dofs onto theta_b via the decoder; hand dofs are direct
    dec = model.pose_decoder
    body_cols = slice(0, 3 * n_body)

    def split(d_rot):
        return {"theta_b": d_rot[..., body_cols] @ dec,
                "theta_h": d_rot[..., 3 * n_body:]}

    state = BodyState(
        _full_vertices(model, params, verts, vertex_ids, Rw, tw, joints_rest,
                       verts_rest),
        tw + params.gamma, Rw, tw + params.gamma, centers, radii)
    jac = PoseJacobians(
        vertex_ids,
        {"beta": dv_beta, **split(dv_rot)},
        {"beta": dj_beta, **split(dj_rot)},
        {"beta": ds_beta, **split(ds_rot)},
    )
    return state, jac


def _full_vertices(model, params, verts_sub, vertex_ids, Rw, tw, joints_rest,
                   verts_rest):
    """Posed positions for every vertex, reusing the subset already computed."""
    if len(vertex_ids) == model.vertex_count and \
            np.array_equal(vertex_ids, np.arange(model.vertex_count)):
        return verts_sub
    verts = np.zeros_like(verts_rest)
    for j in range(model.joint_count):
        w = model.skin_weights[:, j]
        nz = np.nonzero(w)[0]
        if not len(nz):
            continue
        local = verts_rest[nz] - joints_rest[j]
        verts[nz] += w[nz, None] * (local @ Rw[j].T + tw[j])
    verts += params.gamma
    return verts


def contact_subset(state: BodyState, model: BodyModel, ids=None):
    """Posed positions of the annotated contact vertices, order-stable."""
    if ids is None:
        ids = model.contact_vertex_ids
    ids = np.asarray(ids, dtype=np.int64)
    return state.vertices[ids]


# ---------------------------------------------------------------------------
# serialization (single self-describing binary file, magic "IFBM")

_MAGIC = b"IFBM"
_DTYPES = {0: "<f8", 1: "<i8"}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.int64): 1}


def _named_arrays(model: BodyModel):
    limit_ids = np.array([j for j, _, _, _ in model.limit_joints], dtype=np.int64)
    limit_axes = np.array([a for _, a, _, _ in model.limit_joints], dtype=float
                          ).reshape(-1, 3)
    limit_ranges = np.array([[lo, hi] for _, _, lo, hi in model.limit_joints],
                            dtype=float).reshape(-1, 2)
    sphere_ids = np.array([j for j, _, _ in model.proxy_spheres], dtype=np.int64)
    sphere_off = np.array([o for _, o, _ in model.proxy_spheres], dtype=float
                          ).reshape(-1, 3)
    sphere_rad = np.array([r for _, _, r in model.proxy_spheres], dtype=float)
    region_names = "\n".join(model.contact_regions.keys())
    region_name_codes = np.frombuffer(region_names.encode(), dtype=np.uint8
                                      ).astype(np.int64)
    region_lens = np.array([len(v) for v in model.contact_regions.values()],
                           dtype=np.int64)
    region_ids = np.concatenate(
        [np.asarray(v, dtype=np.int64) for v in model.contact_regions.values()]
    ) if region_lens.size else np.empty(0, dtype=np.int64)
    joint_names = "\n".join(model.joint_names)
    joint_name_codes = np.frombuffer(joint_names.encode(), dtype=np.uint8
                                     ).astype(np.int64)
    return [
        ("vertices", model.template.vertices.astype(float)),
        ("faces", model.template.faces.astype(np.int64)),
        ("parents", model.parents),
        ("joint_name_codes", joint_name_codes),
        ("rest_joints_base", model.rest_joints_base.astype(float)),
        ("shape_joint_basis", model.shape_joint_basis.astype(float)),
        ("shape_vertex_basis", model.shape_vertex_basis.astype(float)),
        ("skin_weights", model.skin_weights.astype(float)),
        ("pose_decoder", model.pose_decoder.astype(float)),
        ("hand_joint_ids", np.asarray(model.hand_joint_ids, dtype=np.int64)),
        ("hand_axes", model.hand_axes.astype(float)),
        ("region_name_codes", region_name_codes),
        ("region_lens", region_lens),
        ("region_ids", region_ids),
        ("limit_ids", limit_ids),
        ("limit_axes", limit_axes),
        ("limit_ranges", limit_ranges),
        ("sphere_ids", sphere_ids),
        ("sphere_offsets", sphere_off),
        ("sphere_radii", sphere_rad),
        ("marker_ids", np.asarray(model.marker_ids, dtype=np.int64)),
        ("seed", np.array([model.seed], dtype=np.int64)),
    ]


def save_body_model(path, model: BodyModel):
    arrays = _named_arrays(model)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", 1, len(arrays)))
        for name, arr in arrays:
            arr = np.ascontiguousarray(arr)
            code = _DTYPE_CODES[arr.dtype.newbyteorder("=")]
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            for s in arr.shape:
                fh.write(struct.pack("<Q", s))
            fh.write(arr.astype(_DTYPES[code]).tobytes())


def load_body_model(path) -> BodyModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"not an IFBM body model file: {path}")
        version, n_arrays = struct.unpack("<II", fh.read(8))
        if version != 1:
            raise ValueError(f"unsupported IFBM version {version}")
        arrs = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype=_DTYPES[code])
            arrs[name] = data.reshape(shape).copy()
    joint_names = bytes(arrs["joint_name_codes"].astype(np.uint8)
                        ).decode().split("\n")
    region_names = bytes(arrs["region_name_codes"].astype(np.uint8)
                         ).decode().split("\n") if arrs["region_name_codes"].size \
        else []
    regions = {}
    off = 0
    for name, ln in zip(region_names, arrs["region_lens"]):
        regions[name] = arrs["region_ids"][off:off + int(ln)]
        off += int(ln)
    limit_joints = [(int(j), arrs["limit_axes"][i], float(arrs["limit_ranges"][i, 0]),
                     float(arrs["limit_ranges"][i, 1]))
                    for i, j in enumerate(arrs["limit_ids"])]
    spheres = [(int(j), arrs["sphere_offsets"][i], float(arrs["sphere_radii"][i]))
               for i, j in enumerate(arrs["sphere_ids"])]
    return BodyModel(
        template=TriMesh(arrs["vertices"], arrs["faces"]),
        parents=arrs["parents"],
        joint_names=joint_names,
        rest_joints_base=arrs["rest_joints_base"],
        shape_joint_basis=arrs["shape_joint_basis"],
        shape_vertex_basis=arrs["shape_vertex_basis"],
        skin_weights=arrs["skin_weights"],
        pose_decoder=arrs["pose_decoder"],
        hand_joint_ids=arrs["hand_joint_ids"],
        hand_axes=arrs["hand_axes"],
        contact_regions=regions,
        limit_joints=limit_joints,
        proxy_spheres=spheres,
        marker_ids=arrs["marker_ids"],
        seed=int(arrs["seed"][0]),
    )
