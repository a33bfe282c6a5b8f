import numpy as np
import pytest

from interfit import geometry as geo
from oracles import chamfer_slow, point_to_mesh_slow, rel_error


def random_transform(rng, rot_scale=np.pi / 2, trans_scale=1.0):
    return geo.RigidTransform(rng.normal(size=3) * rot_scale / 3,
                              rng.normal(size=3) * trans_scale)


def random_mesh(rng, n_faces=20, scale=1.0):
    verts = rng.normal(size=(n_faces + 2, 3)) * scale
    faces = np.stack([rng.choice(len(verts), size=3, replace=False)
                      for _ in range(n_faces)])
    return geo.TriMesh(verts, faces)


# ---------------------------------------------------------------------------
# rigid transforms

def test_compose_identity():
    rng = np.random.default_rng(0)
    t = random_transform(rng)
    out = geo.compose(geo.RigidTransform.identity(), t)
    assert np.allclose(out.rotation, t.rotation)
    assert np.allclose(out.translation, t.translation)


def test_compose_inverse_is_identity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = random_transform(rng)
        out = geo.compose(t, t.inverse())
        assert np.linalg.norm(out.rotation) <= 1e-12
        assert np.linalg.norm(out.translation) <= 1e-12


def test_compose_commuting_translations():
    a = geo.RigidTransform(np.zeros(3), [0, 0, 0.1])
    b = geo.RigidTransform(np.zeros(3), [0, 0, 0.2])
    out = geo.compose(a, b)
    assert np.allclose(out.translation, [0, 0, 0.3])
    assert np.allclose(out.rotation, 0)


def test_compose_associative():
    rng = np.random.default_rng(2)
    for _ in range(30):
        a, b, c = (random_transform(rng) for _ in range(3))
        left = geo.compose(geo.compose(a, b), c)
        right = geo.compose(a, geo.compose(b, c))
        pts = rng.normal(size=(5, 3))
        assert np.abs(left.apply(pts) - right.apply(pts)).max() < 1e-10


def test_apply_matches_matrix_product():
    rng = np.random.default_rng(3)
    a, b = random_transform(rng), random_transform(rng)
    pts = rng.normal(size=(10, 3))
    assert np.allclose(geo.compose(a, b).apply(pts), a.apply(b.apply(pts)))


def test_rotation_log_roundtrip_near_pi():
    rng = np.random.default_rng(4)
    for _ in range(20):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        for angle in (1e-10, 1e-6, 1.0, np.pi - 1e-7, np.pi):
            omega = axis * angle
            R = geo.rotation_matrix(omega)
            back = geo.rotation_matrix(geo.rotation_log(R))
            assert np.abs(back - R).max() < 1e-7


def test_rotation_jacobian_matches_fd():
    rng = np.random.default_rng(5)
    for _ in range(10):
        omega = rng.normal(size=3)
        J = geo.rotation_jacobian(omega)
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-6
            fd = (geo.rotation_matrix(omega + e) - geo.rotation_matrix(omega - e)) / 2e-6
            assert rel_error(J[i], fd) < 1e-5


# ---------------------------------------------------------------------------
# projection

def test_project_optical_axis():
    cam = geo.PinholeCamera(500, 500, 320, 240, 640, 480)
    assert np.allclose(geo.project(cam, [0, 0, 2]), [320, 240])


def test_project_offset():
    cam = geo.PinholeCamera(500, 500, 320, 240, 640, 480)
    assert np.allclose(geo.project(cam, [0.2, 0, 2]), [370, 240])


def test_project_behind_camera_raises():
    cam = geo.PinholeCamera(500, 500, 320, 240, 640, 480)
    with pytest.raises(ValueError):
        geo.project(cam, [0, 0, -1])


def test_project_respects_extrinsic():
    ext = geo.RigidTransform([0, 0, 0], [0, 0, 3.0])
    cam = geo.PinholeCamera(100, 100, 80, 60, 160, 120, extrinsic=ext)
    # world origin maps 3 m in front of the camera
    assert np.allclose(geo.project(cam, [0, 0, 0]), [80, 60])


# ---------------------------------------------------------------------------
# closest-point queries

def test_point_to_mesh_on_vertex():
    mesh = geo.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    d, cp = geo.point_to_mesh(np.array([1.0, 0, 0]), mesh)
    assert d == 0
    assert np.allclose(cp, [1, 0, 0])


def test_point_to_mesh_above_face():
    mesh = geo.TriMesh([[-1, -1, 0], [1, -1, 0], [0, 2, 0]], [[0, 1, 2]])
    d, cp = geo.point_to_mesh(np.array([0.0, 0.0, 0.25]), mesh)
    assert abs(d - 0.25) < 1e-12
    assert np.allclose(cp, [0, 0, 0])


def test_point_to_mesh_matches_bruteforce():
    rng = np.random.default_rng(6)
    mesh = random_mesh(rng, n_faces=40)
    for _ in range(100):
        p = rng.normal(size=3) * 2
        d_fast, cp_fast = geo.point_to_mesh(p, mesh)
        d_slow, _ = point_to_mesh_slow(p, mesh.vertices, mesh.faces)
        assert abs(d_fast - d_slow) < 1e-9
        assert abs(np.linalg.norm(cp_fast - p) - d_slow) < 1e-9


def test_triangle_grid_matches_exhaustive():
    rng = np.random.default_rng(7)
    mesh = random_mesh(rng, n_faces=60)
    grid = geo.TriangleGrid(mesh)
    for _ in range(100):
        p = rng.normal(size=3) * 2
        d_grid, _ = grid.query(p)
        d_slow, _ = point_to_mesh_slow(p, mesh.vertices, mesh.faces)
        assert abs(d_grid - d_slow) < 1e-9


def test_chamfer_on_surface_zero():
    mesh = geo.TriMesh([[-1, -1, 0], [1, -1, 0], [0, 2, 0]], [[0, 1, 2]])
    sources = np.array([[0, 0, 0], [0.2, -0.5, 0], [0, 1, 0]])
    assert geo.chamfer(sources, mesh) < 1e-12


def test_chamfer_single_point():
    mesh = geo.TriMesh([[-1, -1, 0], [1, -1, 0], [0, 2, 0]], [[0, 1, 2]])
    assert abs(geo.chamfer([[0, 0, 0.3]], mesh) - 0.09) < 1e-12


def test_chamfer_matches_bruteforce():
    rng = np.random.default_rng(8)
    mesh = random_mesh(rng, n_faces=30)
    sources = rng.normal(size=(25, 3))
    fast = geo.chamfer(sources, mesh)
    slow = chamfer_slow(sources, mesh.vertices, mesh.faces)
    assert abs(fast - slow) < 1e-9


def test_chamfer_empty_sources_raises():
    mesh = geo.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    with pytest.raises(ValueError):
        geo.chamfer(np.empty((0, 3)), mesh)


def test_chamfer_vertex_subset():
    # two-triangle strip; restrict target to the first triangle only
    mesh = geo.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]],
                       [[0, 1, 2], [1, 3, 2]])
    far = [[0.9, 0.9, 0.0]]
    full = geo.chamfer(far, mesh)
    sub = geo.chamfer(far, mesh, vertex_ids=[0, 1, 2])
    assert full < 1e-12
    assert sub > 1e-4


# ---------------------------------------------------------------------------
# inside tests

def _cube(side=1.0, center=(0, 0, 0)):
    s = side / 2
    c = np.asarray(center, dtype=float)
    verts = np.array([[x, y, z] for x in (-s, s) for y in (-s, s) for z in (-s, s)]) + c
    faces = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
        [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
        [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
    ])
    return geo.TriMesh(verts, faces, watertight=True)


def test_points_inside_cube():
    cube = _cube()
    pts = np.array([[0, 0, 0], [0.4, 0.4, 0.4], [0.6, 0, 0], [2, 2, 2]])
    inside = geo.points_inside_mesh(pts, cube)
    assert inside.tolist() == [True, True, False, False]


def test_inside_requires_watertight():
    mesh = geo.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    with pytest.raises(ValueError):
        geo.points_inside_mesh(np.zeros((1, 3)), mesh)


# ---------------------------------------------------------------------------
# ground plane

def test_fit_ground_plane_exact():
    rng = np.random.default_rng(9)
    pts = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50),
                           np.zeros(50)])
    plane = geo.fit_ground_plane(pts)
    assert abs(abs(plane.normal[2]) - 1) < 1e-12
    assert plane.normal[2] > 0  # oriented toward +z by default
    assert np.abs(plane.height(pts)).max() < 1e-12


def test_fit_ground_plane_perturbed():
    rng = np.random.default_rng(10)
    pts = np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 200),
                           rng.normal(scale=1e-6, size=200)])
    plane = geo.fit_ground_plane(pts)
    angle = np.arccos(min(1.0, abs(plane.normal[2])))
    assert angle <= 1e-3


def test_fit_ground_plane_underdetermined():
    with pytest.raises(ValueError):
        geo.fit_ground_plane(np.array([[0, 0, 0], [1, 0, 0]]))


def test_fit_ground_plane_collinear():
    pts = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 0.5])
    with pytest.raises(ValueError):
        geo.fit_ground_plane(pts)


def test_fit_ground_plane_beats_random_candidates():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(60, 3)) * [1.0, 1.0, 0.05]
    plane = geo.fit_ground_plane(pts)
    fit_res = (plane.height(pts) ** 2).sum()
    for _ in range(100):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        p0 = pts.mean(axis=0) + rng.normal(size=3) * 0.01
        res = (((pts - p0) @ n) ** 2).sum()
        assert fit_res <= res + 1e-12


def test_fit_ground_plane_orientation_toward():
    rng = np.random.default_rng(12)
    pts = np.column_stack([rng.uniform(-1, 1, 30), rng.uniform(-1, 1, 30),
                           np.zeros(30)])
    plane = geo.fit_ground_plane(pts, toward=[0, 0, -5.0])
    assert plane.normal[2] < 0


# ---------------------------------------------------------------------------
# file formats

def test_obj_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    mesh = random_mesh(rng, n_faces=12)
    path = tmp_path / "m.obj"
    geo.save_obj(path, mesh)
    back = geo.load_obj(path)
    assert np.array_equal(back.faces, mesh.faces)
    assert np.abs(back.vertices - mesh.vertices).max() == 0


def test_xyz_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    cloud = geo.PointCloud(rng.normal(size=(20, 3)),
                           rng.integers(0, 4, size=20).astype(np.int8))
    path = tmp_path / "c.xyz"
    geo.save_xyz(path, cloud)
    back = geo.load_xyz(path)
    assert np.abs(back.points - cloud.points).max() == 0
    assert np.array_equal(back.labels, cloud.labels)


def test_trimesh_invariants():
    with pytest.raises(ValueError):
        geo.TriMesh([[0, 0, 0]], [[0, 0, 1]])
    with pytest.raises(ValueError):
        geo.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])
    with pytest.raises(ValueError):
        geo.TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], watertight=True)
