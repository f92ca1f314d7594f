"""Per-point geometric descriptors: FPFH, frontal depth rendering, depth-window statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix

from .geometry import NeighborIndex, PointCloud, build_index

logger = logging.getLogger(__name__)

FPFH_BINS = 11
FPFH_DIM = 3 * FPFH_BINS
STATS_PER_SCALE = 7


@dataclass
class FpfhResult:
    histograms: np.ndarray  # (M, 33)
    isolated: np.ndarray  # (M,) bool, no neighbour inside the radius


def pair_features(ps, ns, pt, nt):
    """Darboux-frame angle features for point pairs (rows).

    Returns ``(theta, alpha, phi, valid)``. The source of each pair is the
    end whose normal makes the smaller angle with the connecting line.
    Coincident points or a line parallel to the source normal are invalid.
    """
    d = pt - ps
    dist = np.linalg.norm(d, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    a1 = np.einsum("ij,ij->i", ns, d) / safe
    a2 = np.einsum("ij,ij->i", nt, d) / safe
    swap = np.arccos(np.clip(np.abs(a1), 0.0, 1.0)) > np.arccos(np.clip(np.abs(a2), 0.0, 1.0))
    n1 = np.where(swap[:, None], nt, ns)
    n2 = np.where(swap[:, None], ns, nt)
    d = np.where(swap[:, None], -d, d)
    phi = np.where(swap, -a2, a1)

    v = np.cross(d, n1)
    vnorm = np.linalg.norm(v, axis=1)
    valid = (dist > 0) & (vnorm > 0)
    v = v / np.where(vnorm > 0, vnorm, 1.0)[:, None]
    w = np.cross(n1, v)
    alpha = np.einsum("ij,ij->i", v, n2)
    theta = np.arctan2(np.einsum("ij,ij->i", w, n2), np.einsum("ij,ij->i", n1, n2))
    return theta, alpha, phi, valid


def _bin(x, lo, hi):
    b = np.floor(FPFH_BINS * (x - lo) / (hi - lo)).astype(np.int64)
    return np.clip(b, 0, FPFH_BINS - 1)


def _neighbour_pairs(cloud, radius, index):
    nbrs = index.query_radius(cloud.points, radius)
    src = np.concatenate([np.full(len(n), i, dtype=np.int64) for i, n in enumerate(nbrs)])
    dst = np.concatenate(nbrs)
    keep = src != dst
    return src[keep], dst[keep]


def compute_spfh(cloud: PointCloud, radius: float, index: NeighborIndex | None = None, pairs=None):
    """Simplified point feature histograms, percentage-normalised per sub-histogram.

    Returns ``(hist, isolated)``; isolated points get a flat histogram.
    """
    if cloud.normals is None:
        raise ValueError("FPFH needs normals")
    if radius <= 0:
        raise ValueError("radius must be positive")
    m = len(cloud)
    if pairs is None:
        pairs = _neighbour_pairs(cloud, radius, index or build_index(cloud))
    src, dst = pairs
    p, n = cloud.points, cloud.normals
    theta, alpha, phi, valid = pair_features(p[src], n[src], p[dst], n[dst])
    src, dst = src[valid], dst[valid]
    theta, alpha, phi = theta[valid], alpha[valid], phi[valid]

    counts = np.bincount(src, minlength=m).astype(np.float64)
    hist = np.zeros((m, FPFH_DIM))
    for offset, b in (
        (0, _bin(theta, -np.pi, np.pi)),
        (FPFH_BINS, _bin(alpha, -1.0, 1.0)),
        (2 * FPFH_BINS, _bin(phi, -1.0, 1.0)),
    ):
        np.add.at(hist, (src, offset + b), 1.0)
    isolated = counts == 0
    hist[~isolated] *= (100.0 / counts[~isolated])[:, None]
    hist[isolated] = 100.0 / FPFH_BINS
    return hist, isolated


def compute_fpfh(cloud: PointCloud, radius: float, index: NeighborIndex | None = None) -> FpfhResult:
    """FPFH = own SPFH + mean over neighbours of SPFH / distance, renormalised to 100 per block."""
    if cloud.normals is None:
        raise ValueError("FPFH needs normals")
    if radius <= 0:
        raise ValueError("radius must be positive")
    pairs = _neighbour_pairs(cloud, radius, index or build_index(cloud))
    spfh, isolated = compute_spfh(cloud, radius, pairs=pairs)
    m = len(cloud)
    # the weighting pass uses every radius neighbour, not only pairs with valid angles
    src, dst = pairs
    dist = np.linalg.norm(cloud.points[dst] - cloud.points[src], axis=1)
    keep = dist > 0
    src, dst, dist = src[keep], dst[keep], dist[keep]
    k = np.bincount(src, minlength=m).astype(np.float64)
    w = 1.0 / (k[src] * dist)
    agg = csr_matrix((w, (src, dst)), shape=(m, m)) @ spfh
    fpfh = spfh + agg
    fpfh = fpfh.reshape(m, 3, FPFH_BINS)
    fpfh = 100.0 * fpfh / fpfh.sum(axis=2, keepdims=True)
    if isolated.any():
        logger.debug("%d points without FPFH neighbours", int(isolated.sum()))
    return FpfhResult(fpfh.reshape(m, FPFH_DIM), isolated)


@dataclass
class DepthImage:
    depth: np.ndarray  # (h, w), 0 where empty
    normals: np.ndarray  # (h, w, 3)
    pixel_of_point: np.ndarray  # (M, 2) row, col
    point_of_pixel: np.ndarray  # (h, w), -1 where empty

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def occupied(self) -> np.ndarray:
        return self.point_of_pixel >= 0


def render_depth(
    cloud: PointCloud,
    resolution: tuple[int, int] = (128, 128),
    bounds: tuple[float, float, float, float] | None = None,
    near: float = 0.0,
) -> DepthImage:
    """Orthographic frontal z-buffer rendering.

    The image plane is ``z = near`` and the view looks along +z, so a pixel
    keeps the point of smallest depth ``z - near``. ``bounds`` fixes the
    (xmin, xmax, ymin, ymax) footprint; by default it is the cloud's box.
    """
    if cloud.normals is None:
        raise ValueError("depth rendering needs normals")
    h, w = resolution
    p = cloud.points
    if bounds is None:
        xmin, ymin = p[:, 0].min(), p[:, 1].min()
        xmax, ymax = p[:, 0].max(), p[:, 1].max()
    else:
        xmin, xmax, ymin, ymax = bounds
    ex, ey = xmax - xmin, ymax - ymin
    if ex <= 0 or ey <= 0:
        if len(cloud) > 1 or bounds is not None:
            raise ValueError("degenerate projection extent")
        ex = ey = 1.0
    depth = p[:, 2] - near
    if np.any(depth <= 0):
        raise ValueError("points on or behind the image plane")

    col = np.clip(np.floor((p[:, 0] - xmin) / ex * w).astype(np.int64), 0, w - 1)
    row = np.clip(np.floor((p[:, 1] - ymin) / ey * h).astype(np.int64), 0, h - 1)
    pix = row * w + col
    # nearest point per pixel, ties to the smaller index
    order = np.lexsort((np.arange(len(p)), depth, pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    winners = order[first]

    owner = np.full(h * w, -1, dtype=np.int64)
    owner[pix[winners]] = winners
    dimg = np.zeros(h * w)
    dimg[pix[winners]] = depth[winners]
    nimg = np.zeros((h * w, 3))
    nimg[pix[winners]] = cloud.normals[winners]
    return DepthImage(
        dimg.reshape(h, w),
        nimg.reshape(h, w, 3),
        np.stack([row, col], axis=1),
        owner.reshape(h, w),
    )


def depth_gradient(img: DepthImage) -> np.ndarray:
    """Per-pixel depth gradient magnitude using only occupied neighbours."""
    d, occ = img.depth, img.occupied
    g2 = np.zeros_like(d)
    for axis in (0, 1):
        dp = np.zeros_like(d)
        dm = np.zeros_like(d)
        op = np.zeros_like(occ)
        om = np.zeros_like(occ)
        if axis == 0:
            dp[:-1], op[:-1] = d[1:], occ[1:]
            dm[1:], om[1:] = d[:-1], occ[:-1]
        else:
            dp[:, :-1], op[:, :-1] = d[:, 1:], occ[:, 1:]
            dm[:, 1:], om[:, 1:] = d[:, :-1], occ[:, :-1]
        g = np.where(op & om, (dp - dm) / 2.0, np.where(op, dp - d, np.where(om, d - dm, 0.0)))
        g2 += g * g
    return np.where(occ, np.sqrt(g2), 0.0)


def extract_2d_features(img: DepthImage, scales=(1, 2, 4)):
    """Window statistics around each point's pixel, 7 values per scale.

    Per scale r, over the occupied pixels of the (2r+1)^2 window: depth mean,
    std, max-min range, mean gradient magnitude and the mean normal (3).
    Returns ``(stats, empty)`` where ``empty`` flags points whose window had
    no occupied pixel (their statistics are zero).
    """
    scales = list(scales)
    if not scales:
        raise ValueError("scales must be non-empty")
    rmax = max(scales)
    occ = np.pad(img.occupied, rmax)
    dep = np.pad(img.depth, rmax)
    grad = np.pad(depth_gradient(img), rmax)
    nrm = np.pad(img.normals, ((rmax, rmax), (rmax, rmax), (0, 0)))
    rows = img.pixel_of_point[:, 0] + rmax
    cols = img.pixel_of_point[:, 1] + rmax
    m = len(rows)

    out = np.zeros((m, STATS_PER_SCALE * len(scales)))
    empty = np.zeros(m, dtype=bool)
    for s, r in enumerate(scales):
        dr, dc = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        rr = rows[:, None] + dr.ravel()[None, :]
        cc = cols[:, None] + dc.ravel()[None, :]
        o = occ[rr, cc]
        cnt = o.sum(axis=1)
        ok = cnt > 0
        empty |= ~ok
        c = np.maximum(cnt, 1)
        dv = dep[rr, cc]
        mean = np.where(o, dv, 0.0).sum(axis=1) / c
        dev = np.where(o, dv - mean[:, None], 0.0)
        std = np.sqrt((dev * dev).sum(axis=1) / c)
        hi = np.where(o, dv, -np.inf).max(axis=1)
        lo = np.where(o, dv, np.inf).min(axis=1)
        rng = np.where(ok, hi - lo, 0.0)
        gmean = np.where(o, grad[rr, cc], 0.0).sum(axis=1) / c
        nmean = np.where(o[..., None], nrm[rr, cc], 0.0).sum(axis=1) / c[:, None]
        block = np.column_stack([mean, std, rng, gmean, nmean])
        block[~ok] = 0.0
        out[:, STATS_PER_SCALE * s : STATS_PER_SCALE * (s + 1)] = block
    return out, empty


def assemble_f2(stats: np.ndarray, fpfh: np.ndarray) -> np.ndarray:
    stats = np.asarray(stats, dtype=np.float64)
    fpfh = np.asarray(fpfh, dtype=np.float64)
    if len(stats) != len(fpfh):
        raise ValueError(f"length mismatch: {len(stats)} stats vs {len(fpfh)} FPFH rows")
    return np.hstack([stats, fpfh])


def write_pgm(path, img: DepthImage) -> None:
    """16-bit binary PGM of the depth channel, scaled so the max depth is 65535."""
    d = img.depth
    peak = d.max()
    q = np.zeros(d.shape, dtype=">u2") if peak <= 0 else np.round(d / peak * 65535).astype(">u2")
    header = f"P5\n{img.width} {img.height}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())
