import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from pcad.descriptors import (
    FPFH_BINS,
    FPFH_DIM,
    assemble_f2,
    compute_fpfh,
    depth_gradient,
    extract_2d_features,
    pair_features,
    render_depth,
    write_pgm,
)
from pcad.geometry import PointCloud, estimate_normals


def random_surface(seed, n=300):
    """Bumpy sheet with analytic normals."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-1, 1, size=(n, 2))
    z = 0.3 * np.sin(2 * xy[:, 0]) * np.cos(3 * xy[:, 1])
    dzdx = 0.6 * np.cos(2 * xy[:, 0]) * np.cos(3 * xy[:, 1])
    dzdy = -0.9 * np.sin(2 * xy[:, 0]) * np.sin(3 * xy[:, 1])
    nrm = np.column_stack([-dzdx, -dzdy, np.ones(n)])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(np.column_stack([xy, z + 3.0]), nrm)


def sub_l1(a, b):
    return np.abs(a - b).reshape(len(a), 3, FPFH_BINS).sum(axis=2)


# ---------------------------------------------------------------- FPFH


def test_fpfh_normalisation():
    res = compute_fpfh(random_surface(0), 0.3)
    h = res.histograms
    assert h.shape == (300, FPFH_DIM)
    assert np.all(h >= 0)
    np.testing.assert_allclose(h.reshape(-1, 3, FPFH_BINS).sum(axis=2), 100.0, atol=1e-6)


def test_fpfh_coplanar_central_bins():
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(-1, 1, (150, 2)), np.full(150, 2.0)])
    cloud = PointCloud(pts, np.tile([0.0, 0.0, 1.0], (150, 1)))
    h = compute_fpfh(cloud, 0.4).histograms.reshape(-1, 3, FPFH_BINS)
    np.testing.assert_allclose(h[:, :, FPFH_BINS // 2], 100.0, atol=1e-9)


def test_fpfh_isolated_point_flat():
    pts = np.array([[0.0, 0, 1], [0.1, 0, 1], [5.0, 5, 1]])
    cloud = PointCloud(pts, np.tile([0.0, 0.0, 1.0], (3, 1)))
    res = compute_fpfh(cloud, 0.5)
    assert res.isolated.tolist() == [False, False, True]
    np.testing.assert_allclose(res.histograms[2], 100.0 / FPFH_BINS)


def test_fpfh_translation_exact():
    # dyadic coordinates and shifts are exact in binary floating point,
    # so every relative vector is reproduced bit for bit
    rng = np.random.default_rng(2)
    pts = rng.integers(-64, 64, size=(200, 3)) / 64.0
    cloud = estimate_normals(PointCloud(pts), k=10).cloud
    base = compute_fpfh(cloud, 0.3).histograms
    for shift in ([1.0, -2.0, 0.5], [8.0, 0.25, -4.0]):
        moved = cloud.with_(points=cloud.points + shift)
        assert np.array_equal(compute_fpfh(moved, 0.3).histograms, base)


def test_fpfh_translation_arbitrary_shift_close():
    cloud = random_surface(3)
    base = compute_fpfh(cloud, 0.3).histograms
    moved = cloud.with_(points=cloud.points + [0.123, -0.456, 0.789])
    assert sub_l1(compute_fpfh(moved, 0.3).histograms, base).max() < 1e-3


def test_fpfh_rotation_invariance():
    cloud = random_surface(4)
    base = compute_fpfh(cloud, 0.3).histograms
    for s in range(20):
        rot = Rotation.random(random_state=s).as_matrix()
        t = np.random.default_rng(s).normal(size=3)
        moved = PointCloud(cloud.points @ rot.T + t, cloud.normals @ rot.T)
        assert sub_l1(compute_fpfh(moved, 0.3).histograms, base).max() < 1e-3


def test_fpfh_sphere_vs_plane_separation():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(800, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    sphere = PointCloud(v + [0, 0, 3.0], v)
    # plane at matched density (sphere area 4 pi)
    side = np.sqrt(4 * np.pi)
    pl = np.column_stack([rng.uniform(0, side, (800, 2)), np.full(800, 3.0)])
    plane = PointCloud(pl, np.tile([0.0, 0.0, 1.0], (800, 1)))
    a = compute_fpfh(sphere, 0.4).histograms.mean(axis=0)
    b = compute_fpfh(plane, 0.4).histograms.mean(axis=0)
    assert np.abs(a - b).sum() > 10


def test_pair_features_swap_symmetry():
    rng = np.random.default_rng(6)
    ps, pt = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    ns = rng.normal(size=(50, 3))
    nt = rng.normal(size=(50, 3))
    ns /= np.linalg.norm(ns, axis=1, keepdims=True)
    nt /= np.linalg.norm(nt, axis=1, keepdims=True)
    a = pair_features(ps, ns, pt, nt)
    b = pair_features(pt, nt, ps, ns)
    for x, y in zip(a[:3], b[:3]):
        np.testing.assert_allclose(x, y, atol=1e-12)
    assert np.all(np.abs(a[2]) <= 1) and np.all(np.abs(a[1]) <= 1 + 1e-12)


# ---------------------------------------------------------------- depth rendering


def test_render_single_point():
    cloud = PointCloud(np.array([[0.5, 0.5, 2.0]]), np.array([[0.0, 0.0, 1.0]]))
    img = render_depth(cloud, (8, 8))
    assert img.occupied.sum() == 1
    r, c = img.pixel_of_point[0]
    assert img.depth[r, c] == 2.0
    np.testing.assert_array_equal(img.normals[r, c], [0.0, 0.0, 1.0])


def test_render_plane_constant_depth():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(0, 1, (500, 2)), np.full(500, 1.75)])
    img = render_depth(PointCloud(pts, np.tile([0.0, 0.0, 1.0], (500, 1))), (16, 16))
    occ = img.occupied
    np.testing.assert_allclose(img.depth[occ], 1.75, atol=1e-9)
    np.testing.assert_array_equal(img.normals[occ], np.tile([0.0, 0.0, 1.0], (occ.sum(), 1)))
    assert np.all(img.depth[~occ] == 0)


def test_render_zbuffer_nearest():
    pts = np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 1.0], [1.0, 1.0, 2.0]])
    nrm = np.tile([0.0, 0.0, 1.0], (3, 1))
    img = render_depth(PointCloud(pts, nrm), (4, 4))
    r, c = img.pixel_of_point[0]
    assert tuple(img.pixel_of_point[1]) == (r, c)
    assert img.depth[r, c] == 1.0 and img.point_of_pixel[r, c] == 1


def test_render_errors():
    nrm = np.tile([0.0, 0.0, 1.0], (2, 1))
    with pytest.raises(ValueError, match="degenerate projection extent"):
        render_depth(PointCloud(np.array([[0.0, 0, 1], [0.0, 0, 2]]), nrm))
    with pytest.raises(ValueError):
        render_depth(PointCloud(np.array([[0.0, 0, 1], [1.0, 1, -2]]), nrm))
    with pytest.raises(ValueError):
        render_depth(PointCloud(np.array([[0.0, 0, 1], [1.0, 1, 2]])))


def test_render_total_mapping():
    cloud = random_surface(7)
    img = render_depth(cloud, (20, 20))
    r, c = img.pixel_of_point.T
    assert np.all((r >= 0) & (r < 20) & (c >= 0) & (c < 20))
    assert np.all(img.occupied[r, c])
    owners = img.point_of_pixel[img.occupied]
    assert np.all(img.depth[img.occupied] > 0)
    # every occupied pixel is owned by a point that maps there
    assert np.all(np.all(img.pixel_of_point[owners] == np.argwhere(img.occupied), axis=1))


# ---------------------------------------------------------------- window statistics


def window_oracle(img, point, r):
    row, col = img.pixel_of_point[point]
    d, g, n = [], [], []
    grad = depth_gradient(img)
    for i in range(row - r, row + r + 1):
        for j in range(col - r, col + r + 1):
            if 0 <= i < img.height and 0 <= j < img.width and img.point_of_pixel[i, j] >= 0:
                d.append(img.depth[i, j])
                g.append(grad[i, j])
                n.append(img.normals[i, j])
    if not d:
        return np.zeros(7)
    d = np.array(d)
    return np.r_[d.mean(), d.std(), d.max() - d.min(), np.mean(g), np.mean(n, axis=0)]


def test_window_statistics_direct_enumeration():
    cloud = random_surface(8, 400)
    img = render_depth(cloud, (24, 24))
    stats, empty = extract_2d_features(img, (1, 2, 4))
    assert stats.shape == (400, 21)
    assert not empty.any()
    for p in (0, 17, 123, 399):
        for s, r in enumerate((1, 2, 4)):
            np.testing.assert_allclose(stats[p, 7 * s : 7 * s + 7], window_oracle(img, p, r), atol=1e-12)


def test_window_statistics_plane_flat():
    g = np.stack(np.meshgrid(np.linspace(0, 1, 20), np.linspace(0, 1, 20)), -1).reshape(-1, 2)
    pts = np.column_stack([g, np.full(len(g), 2.0)])
    img = render_depth(PointCloud(pts, np.tile([0.0, 0.0, 1.0], (len(g), 1))), (20, 20))
    stats, _ = extract_2d_features(img, (1, 2))
    for s in range(2):
        np.testing.assert_allclose(stats[:, 7 * s + 1 : 7 * s + 4], 0.0, atol=1e-12)


def test_gradient_step_edge():
    g = np.stack(np.meshgrid(np.linspace(0, 1, 16), np.linspace(0, 1, 16), indexing="ij"), -1).reshape(-1, 2)
    z = np.where(g[:, 1] < 0.5, 1.0, 2.0)
    img = render_depth(PointCloud(np.column_stack([g, z]), np.tile([0.0, 0.0, 1.0], (len(g), 1))), (16, 16))
    grad = depth_gradient(img)
    # y maps to image rows, so the step lies between rows 7 and 8
    assert grad[7].min() > grad[2].max()
    assert grad[8].min() > grad[13].max()


def test_occluded_duplicates_do_not_change_features():
    cloud = random_surface(9, 200)
    behind = cloud.points + [0.0, 0.0, 0.5]
    both = PointCloud(np.vstack([cloud.points, behind]), np.vstack([cloud.normals, cloud.normals]))
    a, _ = extract_2d_features(render_depth(cloud, (16, 16)), (1, 2))
    b, _ = extract_2d_features(render_depth(both, (16, 16)), (1, 2))
    np.testing.assert_array_equal(a, b[:200])


def test_empty_scales_error():
    img = render_depth(random_surface(1, 20), (4, 4))
    with pytest.raises(ValueError):
        extract_2d_features(img, ())


# ---------------------------------------------------------------- f2


def test_assemble_f2():
    stats = np.zeros((5, 21))
    fpfh = np.full((5, 33), 100.0 / 11)
    f2 = assemble_f2(stats, fpfh)
    assert f2.shape == (5, 54)
    assert np.all(f2[:, :21] == 0)
    np.testing.assert_array_equal(f2[:, 21:], fpfh)
    with pytest.raises(ValueError):
        assemble_f2(stats, fpfh[:4])


def test_write_pgm(tmp_path):
    img = render_depth(random_surface(2, 50), (6, 5))
    write_pgm(tmp_path / "d.pgm", img)
    raw = (tmp_path / "d.pgm").read_bytes()
    assert raw.startswith(b"P5\n5 6\n65535\n")
    assert len(raw) == len(b"P5\n5 6\n65535\n") + 2 * 30
