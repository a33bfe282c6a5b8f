"""Energy terms for the staged fitting objective.

Every term returns a scalar; pass grad=True to also get gradients with
respect to the geometric quantities the term touches (posed points, object
pose vectors). The optimizer chains those with the body-pose Jacobians. The
object render term is the one exception: it is piecewise constant in mask
coverage, so its descent uses central finite differences over the 6 pose
parameters instead of an analytic gradient.

Nearest-neighbour style terms (depth, contact, penetration) follow the
envelope rule: their gradients hold the current correspondence fixed, which
equals the true gradient of the underlying distance-to-set function almost
everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import rendering as rnd
from .body import (BodyModel, BodyParams, BodyState, contact_subset,
                   decode_pose, pose_body)
from .geometry import (LABEL_BODY, GroundPlane, RigidTransform, TriMesh,
                       points_inside_mesh, points_to_mesh, restrict_to_vertices,
                       rotation_jacobian, rotation_matrix)

JOINT_CLASS_WEIGHTS = ("k_body", "k_hand", "k_face")


@dataclass
class EnergyWeights:
    """Steering weights; defaults ship here and are overridable via config."""

    lambda_segm: float = 1.0
    lambda_depth: float = 1.0
    lambda_D: float = 0.1
    lambda_theta_b: float = 1e-2
    lambda_theta_h: float = 1e-2
    lambda_theta_f: float = 1e-2
    lambda_alpha: float = 1e-2
    lambda_beta: float = 1e-3
    lambda_E: float = 1e-2
    lambda_P: float = 10.0
    lambda_G: float = 100.0
    lambda_Q: float = 10.0
    lambda_S: float = 1.0
    lambda_A: float = 1.0
    sigma_gm: float = 50.0
    k_body: float = 1.0
    k_hand: float = 0.5
    k_face: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            setattr(self, f.name, v)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {f.name} must be finite and >= 0")

    def replace(self, **kw):
        out = EnergyWeights(**{f.name: getattr(self, f.name) for f in fields(self)})
        for k, v in kw.items():
            if not hasattr(out, k):
                raise ValueError(f"unknown weight {k}")
            setattr(out, k, float(v))
        return out


@dataclass
class ContactSchedule:
    q: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.int64).reshape(-1)
        if not np.isin(self.q, (0, 1)).all():
            raise ValueError("contact flags must be 0 or 1")


@dataclass
class KeypointDetection:
    positions: np.ndarray       # (J, 2) pixels
    confidences: np.ndarray     # (J,) in [0, 1]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.confidences = np.asarray(self.confidences, dtype=float).reshape(-1)
        if len(self.confidences) != len(self.positions):
            raise ValueError("confidence count must match keypoint count")
        if self.confidences.min(initial=0.0) < 0 or \
                self.confidences.max(initial=0.0) > 1:
            raise ValueError("confidences must lie in [0, 1]")


# ---------------------------------------------------------------------------
# robustifier

def gm_rho(x, sigma):
    """Geman-McClure penalty: sigma^2 x^2 / (sigma^2 + x^2), bounded by sigma^2."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x2 = np.square(x)
    s2 = sigma * sigma
    return s2 * x2 / (s2 + x2)


def gm_rho_grad(x, sigma):
    s2 = sigma * sigma
    x2 = np.square(x)
    return 2 * s2 * s2 * x / (s2 + x2) ** 2


# ---------------------------------------------------------------------------
# keypoint term (E_J)

def e_keypoint(joints, cams, detections, weights: EnergyWeights, joint_classes,
               grad=False):
    """Robust multi-view 2D reprojection error of the posed joints.

    Joints behind a camera contribute the saturated sigma^2 instead of
    raising. detections[view] may be None to skip a view.
    """
    joints = np.asarray(joints, dtype=float).reshape(-1, 3)
    k = np.array([getattr(weights, JOINT_CLASS_WEIGHTS[c]) for c in joint_classes])
    sigma = weights.sigma_gm
    total = 0.0
    d_joints = np.zeros_like(joints) if grad else None
    for cam, det in zip(cams, detections):
        if det is None:
            continue
        R = rotation_matrix(cam.extrinsic.rotation)
        pts_cam = cam.world_to_camera(joints)
        z = pts_cam[:, 2]
        for i in range(len(joints)):
            kw = k[i] * det.confidences[i]
            if kw == 0:
                continue
            if z[i] <= rnd.Z_NEAR:
                total += kw * sigma * sigma     # saturated, zero gradient
                continue
            uv = np.array([cam.fx * pts_cam[i, 0] / z[i] + cam.cx,
                           cam.fy * pts_cam[i, 1] / z[i] + cam.cy])
            r2 = uv - det.positions[i]
            r = float(np.linalg.norm(r2))
            total += kw * gm_rho(r, sigma)
            if grad and r > 1e-12:
                drho = gm_rho_grad(r, sigma)
                duv = r2 / r
                x, y, zz = pts_cam[i]
                J_proj = np.array([[cam.fx / zz, 0, -cam.fx * x / zz ** 2],
                                   [0, cam.fy / zz, -cam.fy * y / zz ** 2]])
                d_joints[i] += kw * drho * (duv @ J_proj @ R)
    if grad:
        return total, d_joints
    return total


# ---------------------------------------------------------------------------
# depth term (E_D)

def build_depth_correspondences(vertices, clouds, visibilities):
    """Per view: (vertex ids, cloud points) pairing each body point with its
    nearest visible vertex. Views without visible vertices come back None."""
    vertices = np.asarray(vertices, dtype=float)
    out = []
    for cloud, vis in zip(clouds, visibilities):
        pts = cloud.select(LABEL_BODY) if hasattr(cloud, "select") else \
            np.asarray(cloud, dtype=float)
        vis_ids = np.nonzero(vis)[0]
        if not len(vis_ids) or not len(pts):
            out.append(None)
            continue
        vverts = vertices[vis_ids]
        d2 = ((pts[:, None, :] - vverts[None, :, :]) ** 2).sum(-1)
        nearest = vis_ids[np.argmin(d2, axis=1)]
        out.append((nearest, pts))
    return out


def e_depth_fixed(vertices, correspondences, grad=False):
    """E_D with frozen point-to-vertex assignments (inner-loop form)."""
    vertices = np.asarray(vertices, dtype=float)
    total = 0.0
    d_verts = np.zeros_like(vertices) if grad else None
    for corr in correspondences:
        if corr is None:
            continue
        vids, pts = corr
        diff = vertices[vids] - pts
        dist = np.linalg.norm(diff, axis=1)
        total += float(dist.sum())
        if grad:
            ok = dist > 1e-12
            np.add.at(d_verts, vids[ok], diff[ok] / dist[ok, None])
    if grad:
        return total, d_verts
    return total


def e_depth_body(vertices, clouds, visibilities, grad=False):
    """Sum over views and segmented body points of the distance to the nearest
    visible vertex (unsquared). Views with no visible vertex contribute 0 and
    are reported in the flag list."""
    corr = build_depth_correspondences(vertices, clouds, visibilities)
    flags = [i for i, c in enumerate(corr) if c is None]
    if grad:
        value, d_verts = e_depth_fixed(vertices, corr, grad=True)
        return value, d_verts, flags
    return e_depth_fixed(vertices, corr)


# ---------------------------------------------------------------------------
# object render term (E_O)

def e_object(xi, mesh: TriMesh, masks, depths, cams, weights: EnergyWeights,
             parts=False):
    """Render-and-compare loss against observed masks and depths.

    masks[view] is the selected observed Silhouette (None drops the view);
    depths[view] the observed DepthImage. Residuals are masked by the
    observed silhouette per the render-compare formulation.

    With parts=True the identical total splits into (smooth, coverage):
    the in-overlap depth residual, which varies smoothly with the pose, and
    the pixel-count-like penalty on observed-mask pixels the render misses.
    The descent engine differences the two at different step sizes.
    """
    pose = xi if isinstance(xi, RigidTransform) else RigidTransform.from_vector(xi)
    smooth = 0.0
    coverage = 0.0
    for cam, mask, depth in zip(cams, masks, depths):
        if mask is None:
            continue
        zbuf = np.full((cam.height, cam.width), np.inf)
        rnd._rasterize(rnd._normalized_image_verts(mesh, pose, cam), mesh.faces,
                       cam.width, cam.height, zbuf)
        covered = np.isfinite(zbuf)
        s = mask.values
        both = covered & (s > 0)
        missed = (~covered) & (s > 0)
        resid = (zbuf[both] - depth.values[both]) * s[both]
        smooth += weights.lambda_depth * float((resid ** 2).sum())
        coverage += weights.lambda_segm * float(
            (((1.0 - s[both]) * s[both]) ** 2).sum())
        coverage += weights.lambda_segm * float((s[missed] ** 4).sum())
        coverage += weights.lambda_depth * float(
            ((depth.values[missed] * s[missed]) ** 2).sum())
    if parts:
        return smooth, coverage
    return smooth + coverage


def e_object_supports(xi, mesh, masks, cams):
    """Per-view pixel sets covered by both render and observed mask."""
    pose = xi if isinstance(xi, RigidTransform) else RigidTransform.from_vector(xi)
    out = []
    for cam, mask in zip(cams, masks):
        if mask is None:
            out.append(None)
            continue
        zbuf = np.full((cam.height, cam.width), np.inf)
        rnd._rasterize(rnd._normalized_image_verts(mesh, pose, cam), mesh.faces,
                       cam.width, cam.height, zbuf)
        out.append(np.isfinite(zbuf) & (mask.values > 0))
    return out


def e_object_smooth_frozen(xi, mesh, masks, depths, cams,
                           weights: EnergyWeights, supports):
    """In-overlap depth residual on a frozen pixel support.

    Pixels the perturbed render fails to cover contribute zero residual, so
    finite differences over this value see only the smooth depth variation
    and no coverage-churn spikes. Used to estimate descent directions; step
    acceptance always checks the true objective.
    """
    pose = xi if isinstance(xi, RigidTransform) else RigidTransform.from_vector(xi)
    total = 0.0
    for cam, mask, depth, support in zip(cams, masks, depths, supports):
        if mask is None or support is None:
            continue
        zbuf = np.full((cam.height, cam.width), np.inf)
        rnd._rasterize(rnd._normalized_image_verts(mesh, pose, cam), mesh.faces,
                       cam.width, cam.height, zbuf)
        px = support & np.isfinite(zbuf)
        resid = (zbuf[px] - depth.values[px]) * mask.values[px]
        total += weights.lambda_depth * float((resid ** 2).sum())
    return total


# ---------------------------------------------------------------------------
# priors

def e_priors(params: BodyParams, weights: EnergyWeights, model: BodyModel,
             grad=False):
    """Pre-weighted squared-norm priors plus the joint-limit hinge."""
    w = weights
    value = (w.lambda_beta * params.beta @ params.beta
             + w.lambda_theta_b * params.theta_b @ params.theta_b
             + w.lambda_theta_h * params.theta_h @ params.theta_h
             + w.lambda_theta_f * params.theta_f @ params.theta_f
             + w.lambda_E * params.psi @ params.psi)
    grads = None
    if grad:
        grads = {"beta": 2 * w.lambda_beta * params.beta,
                 "theta_b": 2 * w.lambda_theta_b * params.theta_b,
                 "theta_h": 2 * w.lambda_theta_h * params.theta_h,
                 "theta_f": 2 * w.lambda_theta_f * params.theta_f,
                 "psi": 2 * w.lambda_E * params.psi,
                 "gamma": np.zeros(3)}
    # bending limits act on the decoded rotations of elbows and knees
    if w.lambda_alpha > 0 and model.limit_joints:
        omega = decode_pose(model, params.theta_b)
        row_of = {int(j): i for i, j in enumerate(model.body_joint_ids)}
        for j, axis, lo, hi in model.limit_joints:
            if int(j) not in row_of:
                continue
            row = row_of[int(j)]
            a = float(omega[row] @ axis)
            over = max(0.0, a - hi)
            under = max(0.0, lo - a)
            value += w.lambda_alpha * (over * over + under * under)
            if grad and (over > 0 or under > 0):
                da_dtheta = axis @ model.pose_decoder[3 * row:3 * row + 3]
                grads["theta_b"] = grads["theta_b"] + \
                    2 * w.lambda_alpha * (over - under) * da_dtheta
    if grad:
        return float(value), grads
    return float(value)


# ---------------------------------------------------------------------------
# penetration (E_P)

def _sphere_exclusions(model: BodyModel):
    """Pairs allowed to overlap: same or adjacent joints, or resting overlap."""
    rest = np.array([model.rest_joints_base[j] + off
                     for j, off, _ in model.proxy_spheres])
    radii = np.array([r for _, _, r in model.proxy_spheres])
    joints = [j for j, _, _ in model.proxy_spheres]
    S = len(radii)
    excluded = np.zeros((S, S), dtype=bool)
    for a in range(S):
        for b in range(a + 1, S):
            ja, jb = joints[a], joints[b]
            adjacent = (ja == jb or model.parents[ja] == jb
                        or model.parents[jb] == ja)
            rest_overlap = np.linalg.norm(rest[a] - rest[b]) < \
                radii[a] + radii[b] + 0.01
            excluded[a, b] = excluded[b, a] = adjacent or rest_overlap
    return excluded


def e_penetration(state: BodyState, model: BodyModel, obj_mesh: TriMesh,
                  xi=None, grad=False):
    """Body-object interpenetration plus proxy-sphere self-collision.

    Body-object: squared distance-to-surface for body vertices strictly
    inside the (watertight) object. Self: squared overlap of non-adjacent
    proxy spheres.
    """
    pose = _as_pose(xi)
    world_mesh = obj_mesh.transformed(pose)
    inside = points_inside_mesh(state.vertices, world_mesh)
    inside_ids = np.nonzero(inside)[0]
    value = 0.0
    d_verts = {}
    d_xi = np.zeros(6)
    if len(inside_ids):
        dists, closest = points_to_mesh(state.vertices[inside_ids], world_mesh)
        value += float((dists ** 2).sum())
        if grad:
            diff = state.vertices[inside_ids] - closest
            for row, vid in enumerate(inside_ids):
                d_verts[int(vid)] = d_verts.get(int(vid), 0) + 2 * diff[row]
            d_xi += _chain_to_xi(-2 * diff, closest, pose)
    self_value, d_spheres = _self_penetration(state, model, grad=grad)
    value += self_value
    if grad:
        return value, {"verts": d_verts, "xi": d_xi, "spheres": d_spheres}
    return value


def e_penetration_body_object(state, obj_mesh, xi=None, grad=False):
    """Only the body-object part (used by the joint-refinement assembly)."""
    pose = _as_pose(xi)
    world_mesh = obj_mesh.transformed(pose)
    inside = points_inside_mesh(state.vertices, world_mesh)
    inside_ids = np.nonzero(inside)[0]
    value = 0.0
    d_verts = {}
    d_xi = np.zeros(6)
    if len(inside_ids):
        dists, closest = points_to_mesh(state.vertices[inside_ids], world_mesh)
        value += float((dists ** 2).sum())
        if grad:
            diff = state.vertices[inside_ids] - closest
            for row, vid in enumerate(inside_ids):
                d_verts[int(vid)] = d_verts.get(int(vid), 0) + 2 * diff[row]
            d_xi += _chain_to_xi(-2 * diff, closest, pose)
    if grad:
        return value, {"verts": d_verts, "xi": d_xi}
    return value


def _self_penetration(state: BodyState, model: BodyModel, grad=False):
    excluded = _sphere_exclusions(model)
    centers = state.sphere_centers
    radii = state.sphere_radii
    S = len(radii)
    value = 0.0
    d_centers = np.zeros((S, 3)) if grad else None
    for a in range(S):
        for b in range(a + 1, S):
            if excluded[a, b]:
                continue
            delta = centers[a] - centers[b]
            d = float(np.linalg.norm(delta))
            overlap = radii[a] + radii[b] - d
            if overlap <= 0:
                continue
            value += overlap * overlap
            if grad and d > 1e-12:
                g = -2 * overlap * delta / d
                d_centers[a] += g
                d_centers[b] -= g
    return value, d_centers


def e_self_penetration(state: BodyState, model: BodyModel, grad=False):
    """Proxy-sphere self-collision alone (the stage-2 penetration term)."""
    value, d_centers = _self_penetration(state, model, grad=grad)
    if grad:
        return value, d_centers
    return value


# ---------------------------------------------------------------------------
# contact (E_C)

def e_contact(state: BodyState, model: BodyModel, object_model, xi=None,
              body_ids=None, grad=False):
    """Chamfer from annotated body-contact vertices to the object's annotated
    contact sub-surface under the current pose."""
    pose = _as_pose(xi)
    ids = model.contact_vertex_ids if body_ids is None else \
        np.asarray(body_ids, dtype=np.int64)
    if not len(ids):
        raise ValueError("body contact annotation is empty")
    if not len(object_model.contact_vertex_ids):
        raise ValueError("object contact annotation is empty")
    sources = state.vertices[ids]
    world_mesh = object_model.mesh.transformed(pose)
    face_idx, loose = restrict_to_vertices(world_mesh,
                                           object_model.contact_vertex_ids)
    closest = np.empty_like(sources)
    dists = np.empty(len(sources))
    for i, p in enumerate(sources):
        best = np.inf
        best_cp = None
        if len(face_idx):
            d, cp = _nearest_on(world_mesh, p, face_idx)
            best, best_cp = d, cp
        if len(loose):
            dv = np.linalg.norm(world_mesh.vertices[loose] - p, axis=1)
            k = int(np.argmin(dv))
            if dv[k] < best:
                best = float(dv[k])
                best_cp = world_mesh.vertices[loose[k]]
        dists[i] = best
        closest[i] = best_cp
    value = float((dists ** 2).mean())
    if not grad:
        return value
    diff = 2 * (sources - closest) / len(sources)
    d_verts = {int(v): diff[i] for i, v in enumerate(ids)}
    d_xi = _chain_to_xi(-diff, closest, pose)
    return value, {"verts": d_verts, "xi": d_xi, "ids": ids,
                   "d_rows": diff}


def _nearest_on(mesh, p, face_idx):
    from .geometry import point_to_mesh
    return point_to_mesh(p, mesh, face_idx)


# ---------------------------------------------------------------------------
# ground support (E_G / E_G')

def e_ground(points, plane: GroundPlane, grad=False):
    """Squared ReLU of below-plane depth, summed over points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    viol = np.maximum(0.0, -plane.height(pts))
    value = float((viol ** 2).sum())
    if grad:
        d_pts = -2 * viol[:, None] * plane.normal[None, :]
        return value, d_pts
    return value


# ---------------------------------------------------------------------------
# temporal smoothness (E_S, E_A)

def marker_positions(model: BodyModel, params: BodyParams, marker_ids):
    return pose_body(model, params).vertices[np.asarray(marker_ids)]


def e_smooth_body(trajectory, model: BodyModel, marker_ids=None, markers=None,
                  grad=False):
    """Mean squared second difference of virtual-marker positions.

    Pass precomputed markers (T, Q, 3) to skip reposing; otherwise each
    frame's BodyParams is posed with the model.
    """
    if marker_ids is None:
        marker_ids = model.marker_ids
    if markers is None:
        T = len(trajectory)
        if T < 3:
            raise ValueError("smoothness needs at least 3 frames")
        markers = np.stack([marker_positions(model, p, marker_ids)
                            for p in trajectory])
    else:
        markers = np.asarray(markers, dtype=float)
        T = len(markers)
        if T < 3:
            raise ValueError("smoothness needs at least 3 frames")
    Q = markers.shape[1]
    second = markers[2:] - 2 * markers[1:-1] + markers[:-2]      # (T-2, Q, 3)
    norm = Q * (T - 2)
    value = float((second ** 2).sum() / norm)
    if not grad:
        return value
    d_markers = np.zeros_like(markers)
    d_markers[2:] += second
    d_markers[1:-1] += -2 * second
    d_markers[:-2] += second
    return value, 2 * d_markers / norm


def e_accel_object(xis, mesh: TriMesh, grad=False):
    """Mean squared second difference of the flattened transformed vertices."""
    T = len(xis)
    if T < 3:
        raise ValueError("acceleration needs at least 3 frames")
    poses = [_as_pose(x) for x in xis]
    pts = np.stack([p.apply(mesh.vertices) for p in poses])      # (T, N, 3)
    second = pts[2:] - 2 * pts[1:-1] + pts[:-2]
    norm = T - 2
    value = float((second ** 2).sum() / norm)
    if not grad:
        return value
    d_pts = np.zeros_like(pts)
    d_pts[2:] += second
    d_pts[1:-1] += -2 * second
    d_pts[:-2] += second
    d_pts *= 2.0 / norm
    d_xis = np.stack([
        _chain_to_xi(d_pts[t], pts[t], poses[t], local=mesh.vertices)
        for t in range(T)])
    return value, d_xis


# ---------------------------------------------------------------------------
# pose-vector chain rule

def _as_pose(xi):
    if xi is None:
        return RigidTransform.identity()
    if isinstance(xi, RigidTransform):
        return xi
    return RigidTransform.from_vector(xi)


def _chain_to_xi(d_points, world_points, pose: RigidTransform, local=None):
    """Map dE/d(world point) rows onto the 6 pose parameters.

    world_points = R(omega) local + t; when `local` is omitted it is
    recovered by inverting the pose.
    """
    d_points = np.atleast_2d(np.asarray(d_points, dtype=float))
    world_points = np.atleast_2d(np.asarray(world_points, dtype=float))
    if local is None:
        local = pose.inverse().apply(world_points)
    dR = rotation_jacobian(pose.rotation)         # (3, 3, 3)
    out = np.zeros(6)
    for c in range(3):
        out[c] = float((d_points * (local @ dR[c].T)).sum())
    out[3:] = d_points.sum(axis=0)
    return out


# ---------------------------------------------------------------------------
# full assembly (Eq. 6 shape)

def e_body_frame(model, params, cams, detections, clouds, visibilities,
                 weights: EnergyWeights):
    """Per-frame body loss: keypoints + depth + priors + self-penetration."""
    state = pose_body(model, params)
    value = e_keypoint(state.joints, cams, detections, weights,
                       model.joint_classes())
    if weights.lambda_D > 0 and clouds is not None:
        value += weights.lambda_D * e_depth_body(state.vertices, clouds,
                                                 visibilities)
    value += e_priors(params, weights, model)
    value += weights.lambda_P * e_self_penetration(state, model)
    return value


def e_total(model, object_model, frame_params, xis, cams, detections, clouds,
            masks, depths, q, weights: EnergyWeights, ground_plane=None,
            marker_ids=None, contact_body_ids=None):
    """Full sequence objective with the staged structure:

    per-frame means of the object render loss, the body loss, body-object
    penetration (lambda_P) and schedule-gated contact (lambda_Q); ground
    support scaled by lambda_G; smoothness and acceleration terms global.
    Correspondences are computed fresh (this is the reference evaluation the
    optimizer's frozen surrogate is refreshed against). Every contribution
    carries a weight, so the all-zero weight vector yields exactly 0.
    """
    T = len(frame_params)
    if len(xis) != T or (q is not None and len(q) != T):
        raise ValueError("sequence lengths disagree")
    q_arr = np.ones(T, dtype=np.int64) if q is None else \
        np.asarray(q, dtype=np.int64)
    obj_mesh = object_model.mesh if object_model is not None else None
    total = 0.0
    for t in range(T):
        state = pose_body(model, frame_params[t])
        if obj_mesh is not None and masks is not None:
            total += e_object(xis[t], obj_mesh, masks[t], depths[t], cams,
                              weights) / T
        vis = None
        if clouds is not None and weights.lambda_D > 0:
            occl = [(obj_mesh, _as_pose(xis[t]))] if obj_mesh is not None else []
            vis = [rnd.visible_vertices(state.vertices, occl, cam,
                                        body_faces=model.template.faces)
                   for cam in cams]
        dets_t = detections[t] if detections is not None else [None] * len(cams)
        total += e_body_frame(model, frame_params[t], cams, dets_t,
                              clouds[t] if vis is not None else None, vis,
                              weights) / T
        if obj_mesh is not None:
            if weights.lambda_P > 0:
                total += weights.lambda_P / T * e_penetration_body_object(
                    state, obj_mesh, xis[t])
            if q_arr[t] and weights.lambda_Q > 0:
                total += weights.lambda_Q / T * e_contact(
                    state, model, object_model, xis[t],
                    body_ids=contact_body_ids)
        if ground_plane is not None and weights.lambda_G > 0:
            total += weights.lambda_G / T * e_ground(state.vertices, ground_plane)
            if obj_mesh is not None:
                total += weights.lambda_G / T * e_ground(
                    _as_pose(xis[t]).apply(obj_mesh.vertices), ground_plane)
    if weights.lambda_S > 0 and T >= 3:
        total += weights.lambda_S * e_smooth_body(frame_params, model,
                                                  marker_ids)
    if weights.lambda_A > 0 and T >= 3 and obj_mesh is not None:
        total += weights.lambda_A * e_accel_object(xis, obj_mesh)
    return float(total)
