"""Evaluation protocols: contact heatmaps, penetration statistics,
vertex-to-point-cloud accuracy, acceleration traces and synthetic-oracle pose
errors. Reports are plain CSV/JSON; plotting stays outside the engine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import BodyModel, pose_body
from .geometry import (LABEL_BODY, LABEL_OBJECT, RigidTransform, TriMesh,
                       geodesic_angle, points_inside_mesh, points_to_mesh)

CONTACT_THRESHOLD = 0.0045      # meters, inclusive


@dataclass
class ContactHeatmap:
    body: np.ndarray            # per body vertex, fraction of frames in contact
    object: np.ndarray          # per object vertex

    def __post_init__(self):
        for arr in (self.body, self.object):
            if len(arr) and (arr.min() < 0 or arr.max() > 1):
                raise ValueError("heatmap values must lie in [0, 1]")


@dataclass
class PenetrationReport:
    contact_frames: np.ndarray          # frame indices with any contact
    per_frame_max: np.ndarray           # mm, one entry per contact frame
    per_frame_mean: np.ndarray
    per_frame_median: np.ndarray
    histogram_edges: np.ndarray         # mm
    histogram_counts: np.ndarray
    cumulative_thresholds: np.ndarray   # mm
    cumulative_max: np.ndarray
    cumulative_mean: np.ndarray
    cumulative_median: np.ndarray
    overall_mean: float                 # mm

    def __post_init__(self):
        for curve in (self.cumulative_max, self.cumulative_mean,
                      self.cumulative_median):
            if len(curve):
                if (np.diff(curve) < -1e-12).any():
                    raise ValueError("cumulative curve must be monotone")
                if abs(curve[-1] - 1.0) > 1e-12:
                    raise ValueError("cumulative curve must terminate at 1")


def contact_map(body_vertices, obj_mesh: TriMesh, pose=None,
                threshold=CONTACT_THRESHOLD):
    """Per-vertex contact flags: distance to the object surface <= threshold
    (inclusive)."""
    world = obj_mesh if pose is None else obj_mesh.transformed(
        pose if isinstance(pose, RigidTransform)
        else RigidTransform.from_vector(pose))
    dists, _ = points_to_mesh(np.asarray(body_vertices, dtype=float), world)
    return dists <= threshold


def heatmap(maps) -> np.ndarray:
    """Per-vertex mean of binary contact maps over frames."""
    maps = np.asarray(maps, dtype=float)
    if maps.ndim != 2 or not len(maps):
        raise ValueError("heatmap needs at least one frame of contact maps")
    return maps.mean(axis=0)


def sequence_heatmaps(fitted, model: BodyModel, obj_mesh: TriMesh,
                      threshold=CONTACT_THRESHOLD) -> ContactHeatmap:
    """Contact likelihood per body vertex and per object vertex."""
    body_maps = []
    obj_maps = []
    for t in range(len(fitted)):
        state = pose_body(model, fitted.frames[t])
        pose = fitted.trajectory.pose(t)
        body_maps.append(contact_map(state.vertices, obj_mesh, pose,
                                     threshold))
        body_mesh = TriMesh(state.vertices, model.template.faces)
        obj_world = pose.apply(obj_mesh.vertices)
        d, _ = points_to_mesh(obj_world, body_mesh)
        obj_maps.append(d <= threshold)
    return ContactHeatmap(heatmap(body_maps), heatmap(obj_maps))


def penetration_depths(body_vertices, obj_mesh: TriMesh, pose=None):
    """Depths (m) of body vertices strictly inside the object; empty if none."""
    world = obj_mesh if pose is None else obj_mesh.transformed(
        pose if isinstance(pose, RigidTransform)
        else RigidTransform.from_vector(pose))
    inside = points_inside_mesh(np.asarray(body_vertices, dtype=float), world)
    ids = np.nonzero(inside)[0]
    if not len(ids):
        return np.empty(0)
    d, _ = points_to_mesh(np.asarray(body_vertices, dtype=float)[ids], world)
    return d


def penetration_stats(fitted, model: BodyModel, obj_mesh: TriMesh,
                      threshold=CONTACT_THRESHOLD,
                      bin_width_mm=1.0) -> PenetrationReport:
    """Per contact frame max/mean/median penetration depth plus histogram and
    cumulative curves. Contact frames are those with at least one vertex
    within the contact threshold; frames without penetrating vertices count
    as zero depth."""
    frames = []
    per_max = []
    per_mean = []
    per_med = []
    for t in range(len(fitted)):
        state = pose_body(model, fitted.frames[t])
        pose = fitted.trajectory.pose(t)
        cmap = contact_map(state.vertices, obj_mesh, pose, threshold)
        if not cmap.any():
            continue
        frames.append(t)
        depths_mm = penetration_depths(state.vertices, obj_mesh, pose) * 1000
        if len(depths_mm):
            per_max.append(float(depths_mm.max()))
            per_mean.append(float(depths_mm.mean()))
            per_med.append(float(np.median(depths_mm)))
        else:
            per_max.append(0.0)
            per_mean.append(0.0)
            per_med.append(0.0)
    per_max = np.asarray(per_max)
    per_mean = np.asarray(per_mean)
    per_med = np.asarray(per_med)
    if len(frames):
        top = max(1.0, per_max.max())
        edges = np.arange(0.0, top + bin_width_mm, bin_width_mm)
        counts, _ = np.histogram(per_mean, bins=edges)
        thresholds = np.concatenate([edges, [np.inf]])
        cum = {}
        for name, vals in (("max", per_max), ("mean", per_mean),
                           ("median", per_med)):
            cum[name] = np.array([(vals <= th).mean() for th in thresholds])
        overall = float(per_mean.mean())
    else:
        edges = np.zeros(0)
        counts = np.zeros(0, dtype=int)
        thresholds = np.zeros(0)
        cum = {"max": np.zeros(0), "mean": np.zeros(0), "median": np.zeros(0)}
        overall = 0.0
    return PenetrationReport(np.asarray(frames, dtype=int), per_max, per_mean,
                             per_med, edges, counts, thresholds, cum["max"],
                             cum["mean"], cum["median"], overall)


def vertex_to_pcl(vertices, cloud, label=LABEL_BODY):
    """Mean distance (mm) from mesh vertices to the nearest same-label point."""
    pts = cloud.select(label) if hasattr(cloud, "select") else \
        np.asarray(cloud, dtype=float)
    if not len(pts):
        raise ValueError("no points carry the requested label")
    vertices = np.asarray(vertices, dtype=float)
    d2 = ((vertices[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    return float(np.sqrt(d2.min(axis=1)).mean() * 1000)


def accel_trace(fitted, model: BodyModel, vertex_id):
    """Second-difference magnitude of one posed vertex per interior frame."""
    T = len(fitted)
    if T < 3:
        raise ValueError("acceleration trace needs at least 3 frames")
    pts = np.stack([pose_body(model, fitted.frames[t]).vertices[vertex_id]
                    for t in range(T)])
    second = pts[2:] - 2 * pts[1:-1] + pts[:-2]
    return np.linalg.norm(second, axis=1)


def pose_error(fitted, reference):
    """Synthetic-oracle errors: (mean joint position error mm, per-frame
    object rotation errors deg, per-frame translation errors mm).

    Joint positions are compared through the fitted model poses outside this
    helper; here both arguments are FittedSequence objects sharing a model.
    """
    if len(fitted) != len(reference):
        raise ValueError("sequence lengths disagree")
    rot = np.array([np.rad2deg(geodesic_angle(fitted.trajectory.xis[t, :3],
                                              reference.trajectory.xis[t, :3]))
                    for t in range(len(fitted))])
    trans = np.array([np.linalg.norm(fitted.trajectory.xis[t, 3:]
                                     - reference.trajectory.xis[t, 3:]) * 1000
                      for t in range(len(fitted))])
    return rot, trans


def joint_position_error(fitted, reference, model: BodyModel):
    """Mean 3D joint position error (mm) across frames and joints."""
    if len(fitted) != len(reference):
        raise ValueError("sequence lengths disagree")
    errs = []
    for t in range(len(fitted)):
        ja = pose_body(model, fitted.frames[t]).joints
        jb = pose_body(model, reference.frames[t]).joints
        errs.append(np.linalg.norm(ja - jb, axis=1))
    return float(np.mean(np.stack(errs)) * 1000)


# ---------------------------------------------------------------------------
# report files

def write_reports(report_dir, heat: ContactHeatmap, pen: PenetrationReport,
                  scalars):
    """CSV curves plus a JSON scalar summary under report_dir."""
    out = Path(report_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "penetration.csv", "w") as fh:
        fh.write("threshold_mm,fraction\n")
        for th, fr in zip(pen.cumulative_thresholds, pen.cumulative_mean):
            th_txt = "inf" if np.isinf(th) else f"{th!r}"
            fh.write(f"{th_txt},{fr!r}\n")
    for name, values in (("heatmap_body.csv", heat.body),
                         ("heatmap_object.csv", heat.object)):
        with open(out / name, "w") as fh:
            fh.write("vertex_id,likelihood\n")
            for i, v in enumerate(values):
                fh.write(f"{i},{float(v)!r}\n")
    summary = dict(scalars)
    summary.update({
        "contact_frame_count": int(len(pen.contact_frames)),
        "mean_penetration_mm": pen.overall_mean,
        "max_penetration_mm": float(pen.per_frame_max.max())
        if len(pen.per_frame_max) else 0.0,
    })
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True,
                                                 indent=1))
    return summary
