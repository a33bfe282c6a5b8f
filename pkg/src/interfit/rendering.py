"""Software rasterizer: silhouettes, z-buffered depth and vertex visibility.

Hard rasterization only: a pixel is covered when a front-of-camera triangle
contains its center. Pixel (row r, col c) has its center at continuous image
coordinates (c + 0.5, r + 0.5). Depth is perspective-correct (1/z linear in
screen space) and 0 encodes background.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import PinholeCamera, RigidTransform, TriMesh

EPS_VIS = 0.005     # visibility depth tolerance (m), absorbs raster quantization
Z_NEAR = 1e-6


@dataclass
class Silhouette:
    values: np.ndarray      # (H, W) floats in [0, 1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.min(initial=0.0) < 0 or self.values.max(initial=0.0) > 1:
            raise ValueError("silhouette values must lie in [0, 1]")

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    def support(self):
        return self.values > 0.5


@dataclass
class DepthImage:
    values: np.ndarray      # (H, W) meters, 0 == background

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        covered = self.values[self.values != 0]
        if covered.size and covered.min() <= 0:
            raise ValueError("covered depth pixels must be positive")

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]


def _rasterize(verts_cam, faces, width, height, zbuf, owner=None, tag=0):
    """Accumulate triangles into a (H, W) z-buffer (inf for background)."""
    z = verts_cam[:, 2]
    xs = verts_cam[:, 0] / np.where(z > Z_NEAR, z, 1.0)
    ys = verts_cam[:, 1] / np.where(z > Z_NEAR, z, 1.0)
    front = z > Z_NEAR
    for f in faces:
        if not (front[f[0]] and front[f[1]] and front[f[2]]):
            continue
        x0, x1, x2 = xs[f]
        y0, y1, y2 = ys[f]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0:
            continue
        c_lo = max(int(np.ceil(min(x0, x1, x2) - 0.5)), 0)
        c_hi = min(int(np.floor(max(x0, x1, x2) - 0.5)), width - 1)
        r_lo = max(int(np.ceil(min(y0, y1, y2) - 0.5)), 0)
        r_hi = min(int(np.floor(max(y0, y1, y2) - 0.5)), height - 1)
        if c_lo > c_hi or r_lo > r_hi:
            continue
        px = np.arange(c_lo, c_hi + 1) + 0.5
        py = (np.arange(r_lo, r_hi + 1) + 0.5)[:, None]
        w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
        w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        if area > 0:
            cover = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            cover = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
        if not cover.any():
            continue
        l0 = w0 / area
        l1 = w1 / area
        l2 = w2 / area
        zinv = l0 / z[f[0]] + l1 / z[f[1]] + l2 / z[f[2]]
        depth = np.where(cover & (zinv > 0), 1.0 / np.where(zinv > 0, zinv, 1.0),
                         np.inf)
        sub = zbuf[r_lo:r_hi + 1, c_lo:c_hi + 1]
        closer = depth < sub
        if owner is not None:
            owner[r_lo:r_hi + 1, c_lo:c_hi + 1][closer] = tag
        np.minimum(sub, depth, out=sub)


def _normalized_image_verts(mesh, pose, cam):
    verts_world = pose.apply(mesh.vertices)
    verts_cam = cam.world_to_camera(verts_world)
    # fold intrinsics into normalized coordinates so the rasterizer works in pixels
    out = verts_cam.copy()
    out[:, 0] = cam.fx * verts_cam[:, 0] + cam.cx * verts_cam[:, 2]
    out[:, 1] = cam.fy * verts_cam[:, 1] + cam.cy * verts_cam[:, 2]
    return out


def render_depth(mesh: TriMesh, pose: RigidTransform, cam: PinholeCamera) -> DepthImage:
    """Z-buffered nearest camera-frame depth; 0 where nothing projects."""
    zbuf = np.full((cam.height, cam.width), np.inf)
    _rasterize(_normalized_image_verts(mesh, pose, cam), mesh.faces,
               cam.width, cam.height, zbuf)
    out = np.where(np.isfinite(zbuf), zbuf, 0.0)
    return DepthImage(out)


def render_silhouette(mesh: TriMesh, pose: RigidTransform,
                      cam: PinholeCamera) -> Silhouette:
    zbuf = np.full((cam.height, cam.width), np.inf)
    _rasterize(_normalized_image_verts(mesh, pose, cam), mesh.faces,
               cam.width, cam.height, zbuf)
    return Silhouette(np.isfinite(zbuf).astype(float))


def render_scene(meshes_poses, cam: PinholeCamera):
    """Z-buffer several (mesh, pose) pairs at once.

    Returns (DepthImage, owner) where owner holds the index of the pair that
    won each pixel and -1 for background.
    """
    zbuf = np.full((cam.height, cam.width), np.inf)
    owner = np.full((cam.height, cam.width), -1, dtype=np.int32)
    for tag, (mesh, pose) in enumerate(meshes_poses):
        _rasterize(_normalized_image_verts(mesh, pose, cam), mesh.faces,
                   cam.width, cam.height, zbuf, owner, tag)
    return DepthImage(np.where(np.isfinite(zbuf), zbuf, 0.0)), owner


def visible_vertices(body_vertices, occluders, cam: PinholeCamera,
                     eps_vis=EPS_VIS, body_faces=None):
    """Per-vertex visibility against a z-buffer of the body plus occluders.

    body_vertices are world-frame points; occluders is a list of
    (TriMesh, RigidTransform). When body_faces is given the body surface
    itself also occludes (self-occlusion).
    """
    body_vertices = np.asarray(body_vertices, dtype=float).reshape(-1, 3)
    zbuf = np.full((cam.height, cam.width), np.inf)
    if body_faces is not None:
        body_mesh = TriMesh(body_vertices, body_faces)
        _rasterize(_normalized_image_verts(body_mesh, RigidTransform.identity(), cam),
                   body_faces, cam.width, cam.height, zbuf)
    for mesh, pose in occluders:
        _rasterize(_normalized_image_verts(mesh, pose, cam), mesh.faces,
                   cam.width, cam.height, zbuf)
    pts_cam = cam.world_to_camera(body_vertices)
    z = pts_cam[:, 2]
    ok = z > Z_NEAR
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pts_cam[:, 0] / np.where(ok, z, 1.0) + cam.cx
        v = cam.fy * pts_cam[:, 1] / np.where(ok, z, 1.0) + cam.cy
    cols = np.floor(u).astype(int)
    rows = np.floor(v).astype(int)
    inside = ok & (cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height)
    vis = np.zeros(len(body_vertices), dtype=bool)
    idx = np.nonzero(inside)[0]
    vis[idx] = z[idx] <= zbuf[rows[idx], cols[idx]] + eps_vis
    return vis


# ---------------------------------------------------------------------------
# image files

def save_pgm(path, sil: Silhouette):
    """Binary PGM (P5), 0/255."""
    data = (sil.support().astype(np.uint8)) * 255
    with open(path, "wb") as fh:
        fh.write(f"P5\n{sil.width} {sil.height}\n255\n".encode())
        fh.write(data.tobytes())


def load_pgm(path) -> Silhouette:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM: {path}")
        dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(width * height), dtype=np.uint8)
    values = (data.reshape(height, width) > maxval // 2).astype(float)
    return Silhouette(values)


def save_dpt(path, depth: DepthImage):
    """Raw little-endian float32 with an 8-byte width/height header."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", depth.width, depth.height))
        fh.write(depth.values.astype("<f4").tobytes())


def load_dpt(path) -> DepthImage:
    with open(path, "rb") as fh:
        width, height = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * width * height), dtype="<f4")
    return DepthImage(data.reshape(height, width).astype(float))
