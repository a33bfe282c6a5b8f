"""First-order minimization engine and the three-stage fitting pipeline:
sequential object tracking, per-frame body fitting, joint all-frame refinement.

The engine is block-scaled gradient descent with Armijo backtracking; it only
ever accepts non-increasing steps, so each stage's objective trace is
monotone. Render-based object terms use central finite differences over the
6 pose parameters; everything else is analytic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import energy as en
from . import rendering as rnd
from .body import (LATENT_DIM, SHAPE_DIM, BodyModel, BodyParams,
                   pose_body, pose_body_jacobians)
from .geometry import (LABEL_BODY, GroundPlane, RigidTransform,
                       fit_ground_plane, rotation_jacobian)

N_HAND = 4
N_FACE = 3


@dataclass
class OptimOptions:
    max_iters: int = 200                 # inner iterations per minimize call
    initial_step: float = 1.0
    backtrack: float = 0.5
    scale_rotation: float = 0.05
    scale_translation: float = 2e-3
    scale_shape: float = 0.2
    scale_pose_latent: float = 0.05
    tol: float = 1e-9                    # relative-decrease stop tolerance
    outer_iters: int = 1                 # visibility/correspondence refreshes
    armijo_c1: float = 1e-4
    min_alpha: float = 1e-12
    fd_rot_step: float = 2e-3            # fine scale, smooth depth residual
    fd_trans_step: float = 2e-4
    fd_rot_coarse: float = 5e-2          # coarse scale, mask-coverage staircase
    fd_trans_coarse: float = 8e-3
    iou_floor: float = 0.1
    first_frame_iters: int = 0           # 0: same as max_iters

    def __post_init__(self):
        if self.max_iters < 0 or self.outer_iters < 1:
            raise ValueError("iteration counts must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        for name in ("initial_step", "scale_rotation", "scale_translation",
                     "scale_shape", "scale_pose_latent", "tol", "armijo_c1",
                     "min_alpha", "fd_rot_step", "fd_trans_step",
                     "fd_rot_coarse", "fd_trans_coarse"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return OptimOptions(**d)

    def xi_scales(self):
        return np.concatenate([np.full(3, self.scale_rotation),
                               np.full(3, self.scale_translation)])

    def body_scales(self):
        return np.concatenate([
            np.full(SHAPE_DIM, self.scale_shape),
            np.full(LATENT_DIM, self.scale_pose_latent),
            np.full(N_HAND, self.scale_pose_latent),
            np.full(N_FACE, self.scale_pose_latent),
            np.full(SHAPE_DIM, self.scale_shape),
            np.full(3, self.scale_translation),
        ])


@dataclass
class ObjectTrajectory:
    xis: np.ndarray                      # (T, 6) pose vectors
    coasting: np.ndarray                 # (T,) bool
    selections: list = None              # per frame: list of per-view indices

    def __post_init__(self):
        self.xis = np.asarray(self.xis, dtype=float).reshape(-1, 6)
        self.coasting = np.asarray(self.coasting, dtype=bool).reshape(-1)
        if len(self.coasting) != len(self.xis):
            raise ValueError("trajectory flag length mismatch")

    def __len__(self):
        return len(self.xis)

    def pose(self, t):
        return RigidTransform.from_vector(self.xis[t])


@dataclass
class FittedSequence:
    beta_star: np.ndarray
    frames: list                         # per-frame BodyParams
    trajectory: ObjectTrajectory
    q: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.beta_star = np.asarray(self.beta_star, dtype=float).reshape(-1)
        if not np.isfinite(self.beta_star).all():
            raise ValueError("beta_star must be finite")
        self.q = np.asarray(self.q, dtype=np.int64).reshape(-1)
        if len(self.frames) != len(self.trajectory) or \
                len(self.q) != len(self.frames):
            raise ValueError("fitted sequence lengths disagree")

    def __len__(self):
        return len(self.frames)


def fitted_to_json(fitted: FittedSequence) -> str:
    doc = {
        "beta_star": fitted.beta_star.tolist(),
        "frames": [{
            "theta_b": p.theta_b.tolist(),
            "theta_h": p.theta_h.tolist(),
            "theta_f": p.theta_f.tolist(),
            "psi": p.psi.tolist(),
            "gamma": p.gamma.tolist(),
            "xi": fitted.trajectory.xis[t].tolist(),
        } for t, p in enumerate(fitted.frames)],
        "q": fitted.q.tolist(),
        "diagnostics": fitted.diagnostics,
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def fitted_from_json(text: str) -> FittedSequence:
    doc = json.loads(text)
    frames = []
    xis = []
    for fr in doc["frames"]:
        frames.append(BodyParams(
            beta=np.asarray(doc["beta_star"]),
            theta_b=np.asarray(fr["theta_b"]),
            theta_h=np.asarray(fr["theta_h"]),
            theta_f=np.asarray(fr["theta_f"]),
            psi=np.asarray(fr["psi"]),
            gamma=np.asarray(fr["gamma"])))
        xis.append(fr["xi"])
    diags = doc.get("diagnostics", {})
    coasting = np.asarray(diags.get("coasting", [False] * len(frames)),
                          dtype=bool)
    traj = ObjectTrajectory(np.asarray(xis), coasting,
                            diags.get("selected_candidates"))
    return FittedSequence(np.asarray(doc["beta_star"]), frames, traj,
                          np.asarray(doc["q"]), diags)


# ---------------------------------------------------------------------------
# descent engine

def minimize(value_and_grad, x0, opts: OptimOptions, scales=None,
             value_only=None, max_iters=None):
    """Backtracking gradient descent.

    value_and_grad(x) -> (f, g); value_only(x) -> f is used for line-search
    trials (defaults to value_and_grad). Accepted steps never increase the
    objective. Returns (x, f, iterations).
    """
    x = np.array(x0, dtype=float)
    if value_only is None:
        def value_only(z):
            return value_and_grad(z)[0]
    limit = opts.max_iters if max_iters is None else max_iters
    f, g = value_and_grad(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the initial point")
    if scales is None:
        scales = np.ones_like(x)
    step = opts.initial_step
    it = 0
    while it < limit:
        it += 1
        d = -scales * g
        gd = float(g @ d)
        if gd >= 0 or not np.isfinite(gd):
            break
        alpha = step
        accepted = False
        while alpha >= opts.min_alpha:
            x_new = x + alpha * d
            f_new = value_only(x_new)
            if np.isfinite(f_new) and f_new <= f + opts.armijo_c1 * alpha * gd:
                accepted = True
                break
            alpha *= opts.backtrack
        if not accepted:
            break
        decrease = f - f_new
        x = x_new
        f, g = value_and_grad(x)
        step = min(opts.initial_step, alpha * 4.0)
        if decrease <= opts.tol * max(1.0, abs(f)):
            break
    return x, float(f), it


def fd_gradient(value_fn, x, steps):
    """Central finite differences with per-coordinate steps."""
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = steps[i]
        g[i] = (value_fn(x + e) - value_fn(x - e)) / (2 * steps[i])
    return g


def object_fd_gradient(parts_fn, x, opts: OptimOptions):
    """Two-scale central differences for the render loss.

    parts_fn(x) -> (smooth, coverage). The smooth in-overlap depth residual
    is differenced at the fine step; the pixel-coverage staircase at the
    coarse step, where each evaluation averages many pixel flips into a
    usable slope.
    """
    fine = np.concatenate([np.full(3, opts.fd_rot_step),
                           np.full(3, opts.fd_trans_step)])
    coarse = np.concatenate([np.full(3, opts.fd_rot_coarse),
                             np.full(3, opts.fd_trans_coarse)])
    g = np.empty(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = fine[i]
        g[i] = (parts_fn(x + e)[0] - parts_fn(x - e)[0]) / (2 * fine[i])
        e[i] = coarse[i]
        g[i] += (parts_fn(x + e)[1] - parts_fn(x - e)[1]) / (2 * coarse[i])
    return g


# ---------------------------------------------------------------------------
# candidate selection

def select_candidate(prev_render: rnd.Silhouette, candidates, iou_floor=0.1):
    """Index of the candidate mask with the largest IoU against the previous
    render, or None when the best IoU falls below the floor. Ties break to
    the lowest index."""
    prev = prev_render.support()
    best = None
    best_iou = -1.0
    for i, cand in enumerate(candidates):
        sup = cand.support()
        if sup.shape != prev.shape:
            raise ValueError("candidate dimensions must match the render")
        union = np.logical_or(prev, sup).sum()
        iou = np.logical_and(prev, sup).sum() / union if union else 0.0
        if iou > best_iou:
            best_iou = iou
            best = i
    if best is None or best_iou < iou_floor:
        return None
    return best


# ---------------------------------------------------------------------------
# stage 1: sequential object tracking

def fit_object_pose(mesh, masks, depths, cams, weights, xi_init,
                    opts: OptimOptions):
    """Minimize the render loss over one frame's 6 pose parameters.

    Two phases share the full objective for line-search decisions. The first
    descends the composite two-scale gradient (mask alignment); the second
    follows only the smooth in-overlap depth gradient, which stays
    informative once the coverage staircase has plateaued.
    """
    def value(x):
        return en.e_object(x, mesh, masks, depths, cams, weights)

    def parts(x):
        return en.e_object(x, mesh, masks, depths, cams, weights, parts=True)

    def smooth_vag(z):
        return value(z), object_smooth_gradient(mesh, masks, depths, cams,
                                                weights, z, opts)

    def composite_vag(z):
        return value(z), object_fd_gradient(parts, z, opts)

    scales = opts.xi_scales()
    # smooth depth descent first (per-frame inits are nearly aligned), a
    # composite pass to pull in any residual mask misalignment, then polish
    x, f, _ = minimize(smooth_vag, np.asarray(xi_init, dtype=float), opts,
                       scales=scales, value_only=value)
    x, f, _ = minimize(composite_vag, x, opts, scales=scales,
                       value_only=value)
    x, f, _ = minimize(smooth_vag, x, opts, scales=scales, value_only=value)
    return x, f


def object_smooth_gradient(mesh, masks, depths, cams, weights, x,
                           opts: OptimOptions):
    """Fine-step FD of the in-overlap depth residual on the support frozen at
    x; immune to pixel-coverage churn."""
    supports = en.e_object_supports(x, mesh, masks, cams)
    fine = np.concatenate([np.full(3, opts.fd_rot_step),
                           np.full(3, opts.fd_trans_step)])
    return fd_gradient(
        lambda z: en.e_object_smooth_frozen(z, mesh, masks, depths, cams,
                                            weights, supports), x, fine)


def track_object(seq, object_model, xi_0, opts: OptimOptions,
                 weights: en.EnergyWeights) -> ObjectTrajectory:
    """Track the rigid object frame by frame from segmentation candidates.

    Each frame initializes from the previous solution, picks the best
    candidate mask per view by render-compare, and minimizes the render loss
    by finite-difference descent over the 6 pose parameters. Frames with no
    accepted candidate in any view coast on the previous pose.
    """
    T = len(seq.frames)
    if T == 0:
        raise ValueError("empty sequence")
    mesh = object_model.mesh
    cams = seq.cameras
    xis = np.zeros((T, 6))
    coasting = np.zeros(T, dtype=bool)
    selections = []
    xi_prev = np.asarray(
        xi_0.as_vector() if isinstance(xi_0, RigidTransform) else xi_0,
        dtype=float)
    scales = opts.xi_scales()
    for t in range(T):
        masks = []
        sel_t = []
        pose_prev = RigidTransform.from_vector(xi_prev)
        for v, cam in enumerate(cams):
            prev_sil = rnd.render_silhouette(mesh, pose_prev, cam)
            cands = seq.frames[t].views[v].candidates
            idx = select_candidate(prev_sil, cands, opts.iou_floor) \
                if cands else None
            sel_t.append(idx)
            masks.append(cands[idx] if idx is not None else None)
        selections.append(sel_t)
        if all(m is None for m in masks):
            xis[t] = xi_prev
            coasting[t] = True
            continue
        depths = [seq.frames[t].views[v].depth for v in range(len(cams))]
        xi_fit, _ = fit_object_pose(mesh, masks, depths, cams, weights,
                                    xi_prev, opts)
        xis[t] = xi_fit
        xi_prev = xi_fit
    return ObjectTrajectory(xis, coasting, selections)


# ---------------------------------------------------------------------------
# stage 2: per-frame body fitting

def _pack_body(p: BodyParams):
    return np.concatenate([p.beta, p.theta_b, p.theta_h, p.theta_f, p.psi,
                           p.gamma])


def _unpack_body(x):
    return BodyParams(beta=x[:10], theta_b=x[10:42], theta_h=x[42:46],
                      theta_f=x[46:49], psi=x[49:59], gamma=x[59:62])


def _chain(d_points, jac_block):
    """Contract dE/dpoints rows with a Jacobian block into body-vector layout."""
    out = np.zeros(62)
    out[:10] = np.einsum("md,mdp->p", d_points, jac_block["beta"])
    out[10:42] = np.einsum("md,mdp->p", d_points, jac_block["theta_b"])
    out[42:46] = np.einsum("md,mdp->p", d_points, jac_block["theta_h"])
    out[59:62] = d_points.sum(axis=0)
    return out


def _body_frame_value(model, params, cams, detections, corr, weights):
    state = pose_body(model, params)
    val = en.e_keypoint(state.joints, cams, detections, weights,
                        model.joint_classes())
    if corr is not None and weights.lambda_D > 0:
        val += weights.lambda_D * en.e_depth_fixed(state.vertices, corr)
    val += en.e_priors(params, weights, model)
    if weights.lambda_P > 0:
        val += weights.lambda_P * en.e_self_penetration(state, model)
    return val


def _body_frame_value_grad(model, params, cams, detections, corr, weights):
    corr_ids = np.unique(np.concatenate(
        [c[0] for c in corr if c is not None])) if corr is not None else \
        np.empty(0, dtype=np.int64)
    state, jac = pose_body_jacobians(model, params, vertex_ids=corr_ids)
    classes = model.joint_classes()
    val, d_joints = en.e_keypoint(state.joints, cams, detections, weights,
                                  classes, grad=True)
    g = _chain(d_joints, jac.d_joints)
    if corr is not None and weights.lambda_D > 0:
        vd, d_verts = en.e_depth_fixed(state.vertices, corr, grad=True)
        val += weights.lambda_D * vd
        rows = d_verts[corr_ids] * weights.lambda_D
        gc = _chain(rows, jac.d_vertices)
        gc[59:62] = weights.lambda_D * d_verts.sum(axis=0)
        g += gc
    vp, gp = en.e_priors(params, weights, model, grad=True)
    val += vp
    g[:10] += gp["beta"]
    g[10:42] += gp["theta_b"]
    g[42:46] += gp["theta_h"]
    g[46:49] += gp["theta_f"]
    g[49:59] += gp["psi"]
    if weights.lambda_P > 0:
        vs, d_sph = en.e_self_penetration(state, model, grad=True)
        val += weights.lambda_P * vs
        g += weights.lambda_P * _chain(d_sph, jac.d_spheres)
    return val, g


def fit_body_frames(seq, model: BodyModel, opts: OptimOptions,
                    weights: en.EnergyWeights):
    """Independent per-frame minimization of the body loss; frame t>0 starts
    from frame t-1's solution, frame 0 from rest pose at the body point-cloud
    centroid."""
    T = len(seq.frames)
    cams = seq.cameras
    any_detection = any(view.keypoints is not None
                        and view.keypoints.confidences.max(initial=0) > 0
                        for fr in seq.frames for view in fr.views)
    if not any_detection:
        raise ValueError("no keypoint detections in the sequence")
    out = []
    prev = None
    for t in range(T):
        if prev is None:
            init = BodyParams()
            body_pts = [v.cloud.select(LABEL_BODY) for v in seq.frames[t].views
                        if v.cloud is not None]
            body_pts = [p for p in body_pts if len(p)]
            if body_pts:
                centroid = np.concatenate(body_pts).mean(axis=0)
                init.gamma[:] = centroid - model.template.vertices.mean(axis=0)
        else:
            init = prev.copy()
        iters = opts.first_frame_iters if t == 0 and opts.first_frame_iters \
            else opts.max_iters
        fitted = _fit_single_frame(seq, t, model, init, opts, weights,
                                   max_iters=iters)
        out.append(fitted)
        prev = fitted
    return out


def _fit_single_frame(seq, t, model, init, opts, weights, max_iters=None):
    cams = seq.cameras
    views = seq.frames[t].views
    detections = [v.keypoints for v in views]
    clouds = [v.cloud for v in views]
    params = init.copy()
    scales = opts.body_scales()
    for outer in range(opts.outer_iters):
        corr = None
        if weights.lambda_D > 0 and any(c is not None for c in clouds):
            state = pose_body(model, params)
            vis = [rnd.visible_vertices(state.vertices, [], cam,
                                        body_faces=model.template.faces)
                   for cam in cams]
            corr = en.build_depth_correspondences(
                state.vertices, [c if c is not None else
                                 np.empty((0, 3)) for c in clouds], vis)

        def value(x, corr=corr):
            return _body_frame_value(model, _unpack_body(x), cams, detections,
                                     corr, weights)

        def value_and_grad(x, corr=corr):
            return _body_frame_value_grad(model, _unpack_body(x), cams,
                                          detections, corr, weights)

        x, _, _ = minimize(value_and_grad, _pack_body(params), opts,
                           scales=scales, value_only=value,
                           max_iters=max_iters)
        params = _unpack_body(x)
    return params


def mean_shape(betas):
    """Arithmetic per-component mean of the per-frame shape estimates."""
    betas = [np.asarray(b, dtype=float) for b in betas]
    if not betas:
        raise ValueError("mean shape needs at least one estimate")
    return np.mean(np.stack(betas), axis=0)


# ---------------------------------------------------------------------------
# stage 3: joint refinement over all frames

N_FRAME = LATENT_DIM + N_HAND + N_FACE + SHAPE_DIM + 3 + 6    # 58


def _pack_frame(p: BodyParams, xi):
    return np.concatenate([p.theta_b, p.theta_h, p.theta_f, p.psi, p.gamma, xi])


def _unpack_frame(x, beta):
    p = BodyParams(beta=beta, theta_b=x[:32], theta_h=x[32:36],
                   theta_f=x[36:39], psi=x[39:49], gamma=x[49:52])
    return p, x[52:58]


def _frame_chain(d_points, jac_block):
    """Like _chain but for the refinement layout (no beta, with xi slots)."""
    out = np.zeros(N_FRAME)
    out[:32] = np.einsum("md,mdp->p", d_points, jac_block["theta_b"])
    out[32:36] = np.einsum("md,mdp->p", d_points, jac_block["theta_h"])
    out[49:52] = d_points.sum(axis=0)
    return out


@dataclass
class _FrameCache:
    corr: list                      # depth correspondences
    contact_local: np.ndarray       # object-local chamfer targets, or None
    contact_ids: np.ndarray
    pen_ids: np.ndarray             # inside body vertex ids
    pen_local: np.ndarray           # object-local closest surface points
    masks: list
    depths: list


def _attract_value_grad(verts_world, targets_local, xi, reduce_mean, grad):
    """sum/mean of ||v - (R c + t)||^2 with frozen local targets c."""
    pose = RigidTransform.from_vector(xi)
    targets = pose.apply(targets_local)
    diff = verts_world - targets
    scale = 1.0 / len(verts_world) if reduce_mean else 1.0
    value = float((diff ** 2).sum() * scale)
    if not grad:
        return value, None, None
    d_pts = 2 * scale * diff
    dR = rotation_jacobian(pose.rotation)
    d_xi = np.zeros(6)
    for c in range(3):
        d_xi[c] = float((-d_pts * (targets_local @ dR[c].T)).sum())
    d_xi[3:] = -d_pts.sum(axis=0)
    return value, d_pts, d_xi


def joint_refine(init: FittedSequence, seq, model: BodyModel, object_model,
                 weights: en.EnergyWeights, opts: OptimOptions,
                 marker_ids=None, contact_body_ids=None,
                 ground_plane=None) -> FittedSequence:
    """Minimize the full sequence objective over all frames' pose, expression,
    translation and object pose, with the shape frozen to the stage-1/2 mean.

    Visibility and nearest-surface correspondences refresh each outer
    iteration; candidate masks stay frozen to the stage-1 selections. An
    outer iteration that fails to decrease the fresh objective is rolled
    back, so the final objective never exceeds the initial one.
    """
    T = len(init)
    if len(seq.frames) != T:
        raise ValueError("fitted sequence and observations disagree in length")
    cams = seq.cameras
    beta = init.beta_star.copy()
    if marker_ids is None:
        marker_ids = model.marker_ids
    marker_ids = np.asarray(marker_ids, dtype=np.int64)
    q = np.asarray(init.q, dtype=np.int64)
    mesh = object_model.mesh
    if ground_plane is None and getattr(seq, "ground_points", None) is not None \
            and len(seq.ground_points) >= 3:
        ground_plane = fit_ground_plane(
            seq.ground_points,
            toward=np.mean([p.gamma for p in init.frames], axis=0)
            + model.template.vertices.mean(axis=0))

    # frozen stage-1 candidate choices
    frame_masks = []
    frame_depths = []
    for t in range(T):
        sel = init.trajectory.selections[t] if init.trajectory.selections \
            else [None] * len(cams)
        masks = []
        for v in range(len(cams)):
            cands = seq.frames[t].views[v].candidates
            idx = sel[v] if sel else None
            masks.append(cands[idx] if (idx is not None and cands) else None)
        frame_masks.append(masks)
        frame_depths.append([seq.frames[t].views[v].depth
                             for v in range(len(cams))])

    def fresh_total(frames, xis):
        return en.e_total(model, object_model, frames, list(xis), cams,
                          [[v.keypoints for v in seq.frames[t].views]
                           for t in range(T)],
                          [[v.cloud for v in seq.frames[t].views]
                           for t in range(T)],
                          frame_masks, frame_depths, q, weights,
                          ground_plane=ground_plane, marker_ids=marker_ids,
                          contact_body_ids=contact_body_ids)

    x = np.concatenate([_pack_frame(init.frames[t], init.trajectory.xis[t])
                        for t in range(T)])
    scales = np.concatenate([np.concatenate([
        np.full(LATENT_DIM, opts.scale_pose_latent),
        np.full(N_HAND, opts.scale_pose_latent),
        np.full(N_FACE, opts.scale_pose_latent),
        np.full(SHAPE_DIM, opts.scale_shape),
        np.full(3, opts.scale_translation),
        opts.xi_scales()])] * T)

    best_x = x.copy()
    best_fresh = fresh_total(*_split(x, beta, T))
    for outer in range(opts.outer_iters):
        frames, xis = _split(x, beta, T)
        caches = [_refresh_frame_cache(model, object_model, frames[t], xis[t],
                                       seq.frames[t].views, cams, weights,
                                       contact_body_ids, frame_masks[t],
                                       frame_depths[t])
                  for t in range(T)]

        def value(z, caches=caches):
            return _sequence_value(z, beta, T, model, object_model, cams, seq,
                                   caches, q, weights, ground_plane,
                                   marker_ids)

        def value_and_grad(z, caches=caches):
            return _sequence_value_grad(z, beta, T, model, object_model, cams,
                                        seq, caches, q, weights, ground_plane,
                                        marker_ids, opts)

        x, _, _ = minimize(value_and_grad, x, opts, scales=scales,
                           value_only=value)
        fresh = fresh_total(*_split(x, beta, T))
        if fresh > best_fresh:
            x = best_x.copy()
            break
        best_fresh = fresh
        best_x = x.copy()

    frames, xis = _split(best_x, beta, T)
    traj = ObjectTrajectory(np.stack(xis), init.trajectory.coasting.copy(),
                            init.trajectory.selections)
    diags = dict(init.diagnostics)
    diags["refined_objective"] = best_fresh
    return FittedSequence(beta, frames, traj, q, diags)


def _split(x, beta, T):
    frames = []
    xis = []
    for t in range(T):
        p, xi = _unpack_frame(x[t * N_FRAME:(t + 1) * N_FRAME], beta)
        frames.append(p)
        xis.append(xi)
    return frames, xis


def _refresh_frame_cache(model, object_model, params, xi, views, cams, weights,
                         contact_body_ids, masks, depths):
    state = pose_body(model, params)
    pose = RigidTransform.from_vector(xi)
    inv = pose.inverse()
    mesh = object_model.mesh
    corr = None
    if weights.lambda_D > 0:
        vis = [rnd.visible_vertices(state.vertices, [(mesh, pose)], cam,
                                    body_faces=model.template.faces)
               for cam in cams]
        clouds = [v.cloud if v.cloud is not None else np.empty((0, 3))
                  for v in views]
        corr = en.build_depth_correspondences(state.vertices, clouds, vis)
    contact_local = None
    contact_ids = model.contact_vertex_ids if contact_body_ids is None else \
        np.asarray(contact_body_ids, dtype=np.int64)
    if weights.lambda_Q > 0 and len(contact_ids):
        _, g = en.e_contact(state, model, object_model, xi,
                            body_ids=contact_ids, grad=True)
        closest_world = state.vertices[contact_ids] - \
            g["d_rows"] * len(contact_ids) / 2.0
        contact_local = inv.apply(closest_world)
    pen_ids = np.empty(0, dtype=np.int64)
    pen_local = np.empty((0, 3))
    if weights.lambda_P > 0:
        from .geometry import points_inside_mesh, points_to_mesh
        world_mesh = mesh.transformed(pose)
        inside = points_inside_mesh(state.vertices, world_mesh)
        pen_ids = np.nonzero(inside)[0]
        if len(pen_ids):
            _, closest = points_to_mesh(state.vertices[pen_ids], world_mesh)
            pen_local = inv.apply(closest)
    return _FrameCache(corr, contact_local, contact_ids, pen_ids, pen_local,
                       masks, depths)


def _sequence_value(z, beta, T, model, object_model, cams, seq, caches, q,
                    weights, ground_plane, marker_ids, want_markers=False):
    frames, xis = _split(z, beta, T)
    mesh = object_model.mesh
    total = 0.0
    markers = np.empty((T, len(marker_ids), 3))
    obj_pts = np.empty((T, len(mesh.vertices), 3))
    for t in range(T):
        state = pose_body(model, frames[t])
        cache = caches[t]
        markers[t] = state.vertices[marker_ids]
        pose = RigidTransform.from_vector(xis[t])
        obj_pts[t] = pose.apply(mesh.vertices)
        total += en.e_object(xis[t], mesh, cache.masks, cache.depths, cams,
                             weights) / T
        dets = [v.keypoints for v in seq.frames[t].views]
        total += en.e_keypoint(state.joints, cams, dets, weights,
                               model.joint_classes()) / T
        if cache.corr is not None:
            total += weights.lambda_D / T * en.e_depth_fixed(state.vertices,
                                                             cache.corr)
        total += en.e_priors(frames[t], weights, model) / T
        if weights.lambda_P > 0:
            total += weights.lambda_P / T * en.e_self_penetration(state, model)
            if len(cache.pen_ids):
                v, _, _ = _attract_value_grad(state.vertices[cache.pen_ids],
                                              cache.pen_local, xis[t], False,
                                              False)
                total += weights.lambda_P / T * v
        if weights.lambda_Q > 0 and q[t] and cache.contact_local is not None:
            v, _, _ = _attract_value_grad(state.vertices[cache.contact_ids],
                                          cache.contact_local, xis[t], True,
                                          False)
            total += weights.lambda_Q / T * v
        if ground_plane is not None and weights.lambda_G > 0:
            total += weights.lambda_G / T * en.e_ground(state.vertices,
                                                        ground_plane)
            total += weights.lambda_G / T * en.e_ground(obj_pts[t],
                                                        ground_plane)
    if weights.lambda_S > 0 and T >= 3:
        total += weights.lambda_S * en.e_smooth_body(None, model, marker_ids,
                                                     markers=markers)
    if weights.lambda_A > 0 and T >= 3:
        total += weights.lambda_A * en.e_accel_object(xis, mesh)
    if want_markers:
        return total, markers
    return total


def _sequence_value_grad(z, beta, T, model, object_model, cams, seq, caches,
                         q, weights, ground_plane, marker_ids, opts):
    frames, xis = _split(z, beta, T)
    mesh = object_model.mesh
    classes = model.joint_classes()
    total = 0.0
    grad = np.zeros_like(z)
    markers = np.empty((T, len(marker_ids), 3))
    marker_jacs = []
    for t in range(T):
        sl = slice(t * N_FRAME, (t + 1) * N_FRAME)
        cache = caches[t]
        params = frames[t]
        state0 = pose_body(model, params)
        # vertex rows that need Jacobians this iteration
        needed = [marker_ids]
        if cache.corr is not None:
            needed += [c[0] for c in cache.corr if c is not None]
        if len(cache.pen_ids):
            needed.append(cache.pen_ids)
        if weights.lambda_Q > 0 and q[t] and cache.contact_local is not None:
            needed.append(cache.contact_ids)
        if ground_plane is not None and weights.lambda_G > 0:
            below = np.nonzero(ground_plane.height(state0.vertices) < 0)[0]
            if len(below):
                needed.append(below)
        vids = np.unique(np.concatenate(needed))
        row_of = {int(v): i for i, v in enumerate(vids)}
        state, jac = pose_body_jacobians(model, params, vertex_ids=vids)
        markers[t] = state.vertices[marker_ids]
        marker_jacs.append((vids, jac))

        # object render term: fine differences on the smooth in-overlap part
        # (poses arrive mask-aligned from tracking, where the coverage
        # staircase is a plateau whose coarse-FD slope is only noise)
        def eo_parts(xv):
            return en.e_object(xv, mesh, cache.masks, cache.depths, cams,
                               weights, parts=True)

        sm, cov = eo_parts(xis[t])
        total += (sm + cov) / T
        if any(m is not None for m in cache.masks):
            grad[sl][52:58] += object_smooth_gradient(
                mesh, cache.masks, cache.depths, cams, weights, xis[t],
                opts) / T

        val, d_joints = en.e_keypoint(state.joints, cams,
                                      [v.keypoints for v in seq.frames[t].views],
                                      weights, classes, grad=True)
        total += val / T
        grad[sl] += _frame_chain(d_joints, jac.d_joints) / T

        if cache.corr is not None:
            vd, d_verts = en.e_depth_fixed(state.vertices, cache.corr,
                                           grad=True)
            total += weights.lambda_D / T * vd
            rows = d_verts[vids]
            gc = _frame_chain(rows, jac.d_vertices)
            gc[49:52] = d_verts.sum(axis=0)
            grad[sl] += weights.lambda_D / T * gc

        vp, gp = en.e_priors(params, weights, model, grad=True)
        total += vp / T
        gpv = np.zeros(N_FRAME)
        gpv[:32] = gp["theta_b"]
        gpv[32:36] = gp["theta_h"]
        gpv[36:39] = gp["theta_f"]
        gpv[39:49] = gp["psi"]
        grad[sl] += gpv / T

        if weights.lambda_P > 0:
            vs, d_sph = en.e_self_penetration(state, model, grad=True)
            total += weights.lambda_P / T * vs
            grad[sl] += weights.lambda_P / T * _frame_chain(d_sph,
                                                            jac.d_spheres)
            if len(cache.pen_ids):
                v, d_pts, d_xi = _attract_value_grad(
                    state.vertices[cache.pen_ids], cache.pen_local, xis[t],
                    False, True)
                total += weights.lambda_P / T * v
                rows = np.zeros((len(vids), 3))
                for i, vid in enumerate(cache.pen_ids):
                    rows[row_of[int(vid)]] += d_pts[i]
                gc = _frame_chain(rows, jac.d_vertices)
                gc[49:52] = d_pts.sum(axis=0)
                grad[sl] += weights.lambda_P / T * gc
                grad[sl][52:58] += weights.lambda_P / T * d_xi

        if weights.lambda_Q > 0 and q[t] and cache.contact_local is not None:
            v, d_pts, d_xi = _attract_value_grad(
                state.vertices[cache.contact_ids], cache.contact_local,
                xis[t], True, True)
            total += weights.lambda_Q / T * v
            rows = np.zeros((len(vids), 3))
            for i, vid in enumerate(cache.contact_ids):
                rows[row_of[int(vid)]] += d_pts[i]
            gc = _frame_chain(rows, jac.d_vertices)
            gc[49:52] = d_pts.sum(axis=0)
            grad[sl] += weights.lambda_Q / T * gc
            grad[sl][52:58] += weights.lambda_Q / T * d_xi

        if ground_plane is not None and weights.lambda_G > 0:
            vg, d_pts = en.e_ground(state.vertices, ground_plane, grad=True)
            total += weights.lambda_G / T * vg
            nz = np.nonzero(np.abs(d_pts).sum(axis=1))[0]
            if len(nz):
                rows = np.zeros((len(vids), 3))
                for vid in nz:
                    rows[row_of[int(vid)]] += d_pts[vid]
                gc = _frame_chain(rows, jac.d_vertices)
                gc[49:52] = d_pts.sum(axis=0)
                grad[sl] += weights.lambda_G / T * gc
            pose = RigidTransform.from_vector(xis[t])
            opts_world = pose.apply(mesh.vertices)
            vg2, d_opts = en.e_ground(opts_world, ground_plane, grad=True)
            total += weights.lambda_G / T * vg2
            if np.abs(d_opts).max(initial=0) > 0:
                dR = rotation_jacobian(pose.rotation)
                d_xi = np.zeros(6)
                for c in range(3):
                    d_xi[c] = float((d_opts * (mesh.vertices @ dR[c].T)).sum())
                d_xi[3:] = d_opts.sum(axis=0)
                grad[sl][52:58] += weights.lambda_G / T * d_xi

    if weights.lambda_S > 0 and T >= 3:
        vs, d_markers = en.e_smooth_body(None, model, marker_ids,
                                         markers=markers, grad=True)
        total += weights.lambda_S * vs
        for t in range(T):
            sl = slice(t * N_FRAME, (t + 1) * N_FRAME)
            vids, jac = marker_jacs[t]
            row_idx = np.searchsorted(vids, marker_ids)
            sub = {k: v[row_idx] for k, v in jac.d_vertices.items()}
            gc = _frame_chain(d_markers[t], sub)
            gc[49:52] = d_markers[t].sum(axis=0)
            grad[sl] += weights.lambda_S * gc
    if weights.lambda_A > 0 and T >= 3:
        va, d_xis = en.e_accel_object(xis, mesh, grad=True)
        total += weights.lambda_A * va
        for t in range(T):
            grad[t * N_FRAME + 52:(t + 1) * N_FRAME] += weights.lambda_A * \
                d_xis[t]
    return total, grad
