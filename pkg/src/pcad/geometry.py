"""Point-cloud container, exact k-NN index, normals, sampling and patches."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

NORMAL_TOL = 1e-6
BRUTE_FORCE_DIM = 8


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be M x 3, got {self.points.shape}")
        if len(self.points) == 0:
            raise ValueError("empty point cloud")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite coordinates")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals shape must match points")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > NORMAL_TOL):
                raise ValueError("normals must be unit length")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise ValueError("labels must have length M")
            if np.any((self.labels != 0) & (self.labels != 1)):
                raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return len(self.points)

    def with_(self, **kwargs) -> PointCloud:
        return replace(self, **kwargs)


class NeighborIndex:
    """Exact Euclidean k-NN over a fixed point set (any dimension).

    Results are sorted by distance with ties broken by the smaller index,
    so equal inputs always give equal outputs.
    """

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("index data must be 2-D")
        if len(data) == 0:
            raise ValueError("empty point cloud")
        self.data = data
        self._kd = None
        self._sq = np.einsum("ij,ij->i", data, data)

    def __len__(self):
        return len(self.data)

    @property
    def _tree(self) -> cKDTree:
        if self._kd is None:
            self._kd = cKDTree(self.data)
        return self._kd

    def query(self, x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(dist, idx)`` of shape (Q, min(k, n)) for queries ``x`` (Q x d).

        A single query vector is accepted and gives 1-D results.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        n = len(self.data)
        k = min(int(k), n)
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.data.shape[1] > BRUTE_FORCE_DIM:
            dist, idx = self._query_brute(x, k)
        else:
            dist, idx = self._query_tree(x, k)
        if single:
            return dist[0], idx[0]
        return dist, idx

    def _query_tree(self, x, k):
        n = len(self.data)
        # over-fetch until the k-th distance is strictly below the last fetched one,
        # so every point tied at the boundary takes part in the index tie-break
        kk = min(n, k + 4)
        while True:
            dist, idx = self._tree.query(x, k=kk)
            dist = dist.reshape(len(x), kk)
            idx = idx.reshape(len(x), kk)
            if kk == n or np.all(dist[:, k - 1] < dist[:, -1]):
                break
            kk = min(n, 2 * kk)
        return _sorted_prefix(dist, idx, k)

    def _query_brute(self, x, k, chunk: int = 512):
        """Blocked brute force for high dimensions (kd-trees degrade there).

        Candidates come from expanded squared distances; the final ranking
        uses directly computed distances. A candidate set is accepted only
        when every excluded point is farther than the k-th candidate by more
        than the expansion's rounding bound.
        """
        n, d = self.data.shape
        dists, idxs = [], []
        for s in range(0, len(x), chunk):
            xc = x[s : s + chunk]
            xsq = np.einsum("ij,ij->i", xc, xc)
            d2 = xsq[:, None] + self._sq[None, :] - 2.0 * (xc @ self.data.T)
            tol = 64 * np.finfo(float).eps * (d + 2) * (xsq + self._sq.max())
            kk = min(n, k + 8)
            while kk < n:
                part = np.argpartition(d2, kk, axis=1)
                cand = part[:, :kk]
                outside = np.take_along_axis(d2, part[:, kk : kk + 1], axis=1)[:, 0]
                kth = np.partition(np.take_along_axis(d2, cand, axis=1), k - 1, axis=1)[:, k - 1]
                if np.all(outside > kth + 2 * tol):
                    break
                kk = min(n, 2 * kk)
            if kk >= n:
                cand = np.broadcast_to(np.arange(n), (len(xc), n))
            exact = np.linalg.norm(self.data[cand] - xc[:, None, :], axis=2)
            dd, ii = _sorted_prefix(exact, np.asarray(cand), k)
            dists.append(dd)
            idxs.append(ii)
        return np.vstack(dists), np.vstack(idxs)

    def query_radius(self, x: np.ndarray, r: float) -> list[np.ndarray]:
        """Sorted index arrays of stored points within distance ``r`` of each query."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return [np.asarray(sorted(ids), dtype=np.int64) for ids in self._tree.query_ball_point(x, r)]


def _sorted_prefix(dist, idx, k):
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(dist, order, axis=1)[:, :k], np.take_along_axis(idx, order, axis=1)[:, :k]


def build_index(cloud: PointCloud) -> NeighborIndex:
    return NeighborIndex(cloud.points)


@dataclass
class NormalEstimate:
    cloud: PointCloud
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def warning_count(self) -> int:
        return int(self.degenerate.sum())


def estimate_normals(
    cloud: PointCloud,
    k: int = 16,
    viewpoint: np.ndarray | None = None,
    direction: np.ndarray = (0.0, 0.0, 1.0),
    away: bool = False,
    index: NeighborIndex | None = None,
) -> NormalEstimate:
    """PCA normals from the k-neighbourhood covariance.

    Normals are flipped to face ``direction`` (a viewpoint at infinity) or,
    when ``viewpoint`` is given, the point ``viewpoint``. ``away=True``
    orients them away from it instead. Neighbourhoods whose covariance has
    rank < 2 get the view direction as normal and are flagged.
    """
    m = len(cloud)
    if not 3 <= k <= m:
        raise ValueError(f"need 3 <= k <= M, got k={k}, M={m}")
    index = index or build_index(cloud)
    _, nbr = index.query(cloud.points, k)
    nb = cloud.points[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    if viewpoint is None:
        view = np.broadcast_to(np.asarray(direction, dtype=np.float64), (m, 3))
    else:
        view = np.asarray(viewpoint, dtype=np.float64) - cloud.points
    view_unit = view / np.maximum(np.linalg.norm(view, axis=1, keepdims=True), 1e-300)
    if away:
        view_unit = -view_unit

    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-12 * scale
    degenerate |= evals[:, 2] <= 1e-300
    normals[degenerate] = view_unit[degenerate]

    flip = np.einsum("ij,ij->i", normals, view_unit) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if degenerate.any():
        logger.warning("%d degenerate neighbourhoods got the fallback normal", int(degenerate.sum()))
    return NormalEstimate(cloud.with_(normals=normals), degenerate)


def farthest_point_sample(cloud_or_points, n: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; the first pick is ``seed mod M``.

    Ties in the max-min distance go to the smaller index (``argmax``).
    """
    pts = cloud_or_points.points if isinstance(cloud_or_points, PointCloud) else np.asarray(cloud_or_points, dtype=np.float64)
    m = len(pts)
    if n > m:
        raise ValueError(f"cannot sample {n} of {m} points")
    if n < 1:
        raise ValueError("n must be >= 1")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = seed % m
    mind = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


@dataclass
class Patch:
    center_index: int
    member_indices: np.ndarray
    centered_points: np.ndarray
    centroid: np.ndarray
    scale: float

    def to_frame(self, x: np.ndarray) -> np.ndarray:
        """Map world coordinates into this patch's centred, unit-ball frame."""
        return (np.asarray(x, dtype=np.float64) - self.centroid) / self.scale


def extract_patches(
    cloud: PointCloud, centers, patch_size: int, index: NeighborIndex | None = None
) -> list[Patch]:
    if patch_size > len(cloud):
        raise ValueError("patch_size exceeds cloud size")
    index = index or build_index(cloud)
    centers = np.asarray(centers, dtype=np.int64)
    _, members = index.query(cloud.points[centers], patch_size)
    patches = []
    for c, mem in zip(centers, members):
        pts = cloud.points[mem]
        centroid = pts.mean(axis=0)
        rel = pts - centroid
        scale = float(np.max(np.linalg.norm(rel, axis=1)))
        if scale <= 0.0:
            scale = 1.0
        centered = rel / scale
        # remove the rounding residue so the centroid is the origin
        centered -= centered.mean(axis=0)
        patches.append(Patch(int(c), mem.copy(), centered, centroid, scale))
    return patches


def radius_components(cloud: PointCloud, mask, radius: float) -> list[np.ndarray]:
    """Connected components of the radius graph restricted to mask-1 points."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    sel = np.flatnonzero(np.asarray(mask).astype(bool))
    if len(sel) == 0:
        return []
    tree = cKDTree(cloud.points[sel])
    pairs = tree.query_pairs(radius, output_type="ndarray")
    n = len(sel)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else coo_matrix((n, n))
    _, lab = connected_components(graph, directed=False)
    comps = [sel[lab == c] for c in np.unique(lab)]
    comps.sort(key=lambda c: int(c[0]))
    return comps


def median_spacing(cloud: PointCloud, index: NeighborIndex | None = None) -> float:
    """Median distance from each point to its nearest other point."""
    if len(cloud) < 2:
        return 0.0
    index = index or build_index(cloud)
    d, _ = index.query(cloud.points, 2)
    return float(np.median(d[:, 1]))


def load_cloud(path) -> PointCloud:
    """Read whitespace-separated ``x y z [nx ny nz [label]]`` rows ('#' comments)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # empty input is reported below
        data = np.loadtxt(path, comments="#", ndmin=2, dtype=np.float64)
    if data.size == 0:
        raise ValueError("empty point cloud")
    ncol = data.shape[1]
    if ncol == 3:
        return PointCloud(data)
    if ncol == 6:
        return PointCloud(data[:, :3], _renorm(data[:, 3:6]))
    if ncol == 7:
        return PointCloud(data[:, :3], _renorm(data[:, 3:6]), data[:, 6].astype(np.int64))
    raise ValueError(f"{path}: expected 3, 6 or 7 columns, got {ncol}")


def _renorm(n):
    # repr-written files round-trip exactly; only touch visibly sloppy rows
    norms = np.linalg.norm(n, axis=1)
    bad = np.abs(norms - 1.0) > 1e-9
    n = n.copy()
    n[bad] /= norms[bad, None]
    return n


def save_cloud(path, cloud: PointCloud, labels=None) -> None:
    labels = cloud.labels if labels is None else np.asarray(labels)
    cols = [cloud.points]
    if cloud.normals is not None:
        cols.append(cloud.normals)
    elif labels is not None:
        raise ValueError("the ASCII format needs normals before a label column")
    if labels is not None:
        cols.append(np.asarray(labels, dtype=np.float64)[:, None])
    data = np.hstack(cols)
    lines = []
    for row in data:
        vals = [repr(float(v)) for v in row]
        if labels is not None:
            vals[-1] = str(int(row[-1]))
        lines.append(" ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")
