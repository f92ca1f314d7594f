import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from pcad.geometry import (
    NeighborIndex,
    PointCloud,
    build_index,
    estimate_normals,
    extract_patches,
    farthest_point_sample,
    load_cloud,
    median_spacing,
    radius_components,
    save_cloud,
)


def brute_knn(data, q, k):
    d = np.linalg.norm(data[None, :, :] - q[:, None, :], axis=2)
    order = np.lexsort((np.broadcast_to(np.arange(len(data)), d.shape), d), axis=1)[:, :k]
    return np.take_along_axis(d, order, axis=1), order


def brute_fps(pts, n, start):
    chosen = [start]
    for _ in range(1, n):
        mind = np.min(np.linalg.norm(pts[:, None] - pts[chosen][None], axis=2), axis=1)
        chosen.append(int(np.argmax(mind)))
    return np.array(chosen)


def union_find_components(pts, mask, r):
    sel = np.flatnonzero(mask)
    parent = list(range(len(sel)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(len(sel)):
        for j in range(i + 1, len(sel)):
            if np.linalg.norm(pts[sel[i]] - pts[sel[j]]) <= r:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(len(sel)):
        groups.setdefault(find(i), []).append(sel[i])
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


# ---------------------------------------------------------------- container


def test_cloud_validation():
    with pytest.raises(ValueError, match="empty point cloud"):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), normals=np.ones((2, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), labels=np.array([0, 2]))
    c = PointCloud(np.zeros((2, 3)), normals=np.tile([0.0, 0.0, 1.0], (2, 1)), labels=[0, 1])
    assert len(c) == 2


def test_empty_index_error():
    with pytest.raises(ValueError, match="empty point cloud"):
        NeighborIndex(np.zeros((0, 3)))


# ---------------------------------------------------------------- kNN


def test_self_query_single_point():
    idx = build_index(PointCloud(np.array([[1.0, 2.0, 3.0]])))
    d, i = idx.query(np.array([1.0, 2.0, 3.0]), 1)
    assert i.tolist() == [0] and d.tolist() == [0.0]


def test_collinear():
    idx = build_index(PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])))
    _, i = idx.query(np.zeros(3), 2)
    assert set(i.tolist()) == {0, 1}


def test_k_clipped_to_size():
    idx = NeighborIndex(np.eye(3))
    d, i = idx.query(np.zeros(3), 10)
    assert len(i) == 3 and np.all(np.diff(d) >= 0)


@pytest.mark.parametrize("dim", [3, 20, 54])
def test_knn_matches_exhaustive(dim):
    rng = np.random.default_rng(dim)
    for m in (5, 200, 500):
        data = rng.normal(size=(m, dim))
        q = rng.normal(size=(40, dim))
        d, i = NeighborIndex(data).query(q, 5)
        bd, bi = brute_knn(data, q, 5)
        assert np.array_equal(i, bi)
        np.testing.assert_allclose(d, bd, rtol=0, atol=1e-12)


@pytest.mark.parametrize("dim", [3, 33])
def test_knn_ties_break_by_index(dim):
    # integer grid with many equal distances
    rng = np.random.default_rng(1)
    data = rng.integers(0, 3, size=(300, dim)).astype(float)
    q = rng.integers(0, 3, size=(30, dim)).astype(float)
    _, i = NeighborIndex(data).query(q, 7)
    _, bi = brute_knn(data, q, 7)
    assert np.array_equal(i, bi)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_knn_property(m, k, seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(m, 3))
    d, i = NeighborIndex(data).query(data, k)
    assert i.shape == (m, min(k, m))
    assert np.all(d[:, 0] == 0.0)
    assert np.all(np.diff(d, axis=1) >= 0)


def test_query_radius_sorted():
    data = np.array([[0.0, 0, 0], [0.5, 0, 0], [3.0, 0, 0]])
    out = NeighborIndex(data).query_radius(np.zeros(3), 1.0)
    assert out[0].tolist() == [0, 1]


# ---------------------------------------------------------------- normals


def test_plane_normals():
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-1, 1, (200, 2)), np.zeros(200)])
    for k in (3, 8, 20):
        n = estimate_normals(PointCloud(pts), k=k).cloud.normals
        np.testing.assert_allclose(n, np.tile([0.0, 0.0, 1.0], (200, 1)), atol=1e-6)


def test_sphere_normals_outward():
    # Fibonacci lattice: evenly spread points on the unit sphere
    i = np.arange(2000) + 0.5
    z = 1 - 2 * i / 2000
    t = np.pi * (1 + 5**0.5) * i
    v = np.column_stack([np.sqrt(1 - z * z) * np.cos(t), np.sqrt(1 - z * z) * np.sin(t), z])
    est = estimate_normals(PointCloud(v), k=12, viewpoint=np.zeros(3), away=True).cloud.normals
    ang = np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", est, v), -1, 1)))
    assert ang.max() < 5.0


def test_degenerate_neighbourhood_flagged():
    est = estimate_normals(PointCloud(np.ones((3, 3))), k=3)
    assert est.warning_count == 3
    np.testing.assert_array_equal(est.cloud.normals, np.tile([0.0, 0.0, 1.0], (3, 1)))


def test_normals_k_range():
    with pytest.raises(ValueError):
        estimate_normals(PointCloud(np.eye(3)), k=2)
    with pytest.raises(ValueError):
        estimate_normals(PointCloud(np.eye(3)), k=4)


def test_normals_rotation_equivariant():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(300, 3)) * [1.0, 0.7, 0.1]
    rot = Rotation.random(random_state=3).as_matrix()
    a = estimate_normals(PointCloud(pts), k=10).cloud.normals
    b = estimate_normals(PointCloud(pts @ rot.T), k=10).cloud.normals
    ra = a @ rot.T
    sign = np.sign(np.einsum("ij,ij->i", ra, b))
    np.testing.assert_allclose(ra * sign[:, None], b, atol=1e-5)


# ---------------------------------------------------------------- sampling and patches


def test_fps_exhaustive_and_errors():
    pts = np.random.default_rng(0).normal(size=(7, 3))
    assert sorted(farthest_point_sample(pts, 7).tolist()) == list(range(7))
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 8)
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 0)


def test_fps_square():
    sq = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1, 0], [0.0, 1, 0]])
    assert farthest_point_sample(sq, 2, seed=0).tolist() == [0, 2]


def test_fps_matches_brute_force():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(100, 3))
    for seed in (0, 17, 250):
        got = farthest_point_sample(pts, 10, seed)
        assert got.tolist() == brute_fps(pts, 10, seed % 100).tolist()
        assert len(set(got.tolist())) == 10


def test_patch_single_point():
    (p,) = extract_patches(PointCloud(np.array([[1.0, 2, 3]])), [0], 1)
    assert p.member_indices.tolist() == [0]
    np.testing.assert_array_equal(p.centered_points, np.zeros((1, 3)))
    assert p.scale == 1.0


def test_patch_grid_ring():
    g = np.stack(np.meshgrid(np.arange(7.0), np.arange(7.0)), -1).reshape(-1, 2)
    pts = np.column_stack([g, np.zeros(len(g))])
    center = 3 * 7 + 3
    (p,) = extract_patches(PointCloud(pts), [center], 5)
    ring = {center, center - 1, center + 1, center - 7, center + 7}
    assert set(p.member_indices.tolist()) == ring
    assert center in p.member_indices


def test_patch_invariants_and_translation():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(200, 3))
    cloud = PointCloud(pts)
    centers = farthest_point_sample(cloud, 8)
    a = extract_patches(cloud, centers, 32)
    b = extract_patches(PointCloud(pts + [5.0, -3.0, 2.0]), centers, 32)
    for pa, pb in zip(a, b):
        assert pa.center_index in pa.member_indices
        assert np.abs(pa.centered_points.mean(axis=0)).max() < 1e-9
        assert pa.scale > 0
        np.testing.assert_array_equal(pa.member_indices, pb.member_indices)
        np.testing.assert_allclose(pa.centered_points, pb.centered_points, atol=1e-9)
    with pytest.raises(ValueError):
        extract_patches(cloud, centers, 201)


def test_patch_to_frame():
    rng = np.random.default_rng(4)
    cloud = PointCloud(rng.normal(size=(50, 3)))
    (p,) = extract_patches(cloud, [0], 10)
    np.testing.assert_allclose(p.to_frame(cloud.points[p.member_indices]), p.centered_points, atol=1e-12)


# ---------------------------------------------------------------- regions


def test_components_trivial_cases():
    pts = np.concatenate([np.zeros((3, 3)), np.full((3, 3), 10.0)]) + np.arange(6)[:, None] * 0.01
    cloud = PointCloud(pts)
    assert radius_components(cloud, np.zeros(6), 1.0) == []
    comps = radius_components(cloud, np.ones(6), 1.0)
    assert [c.tolist() for c in comps] == [[0, 1, 2], [3, 4, 5]]
    with pytest.raises(ValueError):
        radius_components(cloud, np.ones(6), 0.0)


def test_components_match_union_find():
    rng = np.random.default_rng(7)
    for t in range(5):
        centers = rng.uniform(-5, 5, size=(4, 3))
        pts = np.concatenate([c + rng.normal(0, 0.4, size=(20, 3)) for c in centers])
        mask = rng.random(len(pts)) < 0.6
        got = radius_components(PointCloud(pts), mask, 0.5)
        want = union_find_components(pts, mask, 0.5)
        assert [g.tolist() for g in got] == want
        allm = np.sort(np.concatenate(got)) if got else np.array([])
        assert allm.tolist() == np.flatnonzero(mask).tolist()


def test_median_spacing_grid():
    g = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0)), -1).reshape(-1, 2) * 0.5
    assert median_spacing(PointCloud(np.column_stack([g, np.zeros(25)]))) == 0.5


# ---------------------------------------------------------------- file format


def test_cloud_file_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    pts = rng.normal(size=(30, 3))
    n = rng.normal(size=(30, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    lab = (rng.random(30) < 0.3).astype(int)
    for cloud in (PointCloud(pts), PointCloud(pts, n), PointCloud(pts, n, lab)):
        path = tmp_path / "c.xyz"
        save_cloud(path, cloud)
        back = load_cloud(path)
        np.testing.assert_array_equal(back.points, cloud.points)
        if cloud.normals is not None:
            np.testing.assert_array_equal(back.normals, cloud.normals)
        if cloud.labels is not None:
            np.testing.assert_array_equal(back.labels, cloud.labels)


def test_cloud_file_comments(tmp_path):
    p = tmp_path / "c.xyz"
    p.write_text("# header\n0 0 1\n1 0 1\n")
    assert len(load_cloud(p)) == 2
    (tmp_path / "e.xyz").write_text("# nothing\n")
    with pytest.raises(ValueError, match="empty point cloud"):
        load_cloud(tmp_path / "e.xyz")
