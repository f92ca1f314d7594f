"""Procedural normal clouds (sphere, plane, torus) with analytic normals.

Every shape sits in front of the depth camera (z > 0).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PointCloud

SHAPES = ("sphere", "plane", "torus")
CENTER = np.array([0.0, 0.0, 4.0])


def sphere(n: int, rng, radius: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v, v.copy()


def plane(n: int, rng, half: float = 1.0, wave: float = 0.08) -> tuple[np.ndarray, np.ndarray]:
    """Gently waved square sheet z = wave * sin(pi x) * cos(pi y)."""
    xy = rng.uniform(-half, half, size=(n, 2))
    x, y = xy[:, 0], xy[:, 1]
    z = wave * np.sin(np.pi * x) * np.cos(np.pi * y)
    dzdx = wave * np.pi * np.cos(np.pi * x) * np.cos(np.pi * y)
    dzdy = -wave * np.pi * np.sin(np.pi * x) * np.sin(np.pi * y)
    nrm = np.column_stack([-dzdx, -dzdy, np.ones(n)])
    # face the camera at z -> -inf
    nrm = -nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return np.column_stack([x, y, z]), nrm


def torus(n: int, rng, major: float = 1.0, minor: float = 0.35) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform torus samples by rejection on the tube angle."""
    out_u = np.empty(0)
    out_v = np.empty(0)
    while len(out_u) < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(0, 1, size=2 * n) < (major + minor * np.cos(v)) / (major + minor)
        out_u = np.r_[out_u, u[keep]]
        out_v = np.r_[out_v, v[keep]]
    u, v = out_u[:n], out_v[:n]
    nrm = np.column_stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)])
    pts = np.column_stack([(major + minor * np.cos(v)) * np.cos(u), (major + minor * np.cos(v)) * np.sin(u), minor * np.sin(v)])
    return pts, nrm


_MAKERS = {"sphere": sphere, "plane": plane, "torus": torus}


def make_shape(kind: str, n: int, rng, noise: float = 0.0, max_tilt_deg: float = 10.0) -> PointCloud:
    """One normal cloud: random small tilt, optional Gaussian jitter, centred at ``CENTER``."""
    if kind not in _MAKERS:
        raise ValueError(f"unknown shape {kind!r}")
    pts, nrm = _MAKERS[kind](n, rng)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = Rotation.from_rotvec(axis * np.deg2rad(rng.uniform(0, max_tilt_deg))).as_matrix()
    pts = pts @ rot.T
    nrm = nrm @ rot.T
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts + CENTER, nrm)


def make_clouds(kind: str, count: int, n_points: int, seed, noise: float = 0.0) -> list[PointCloud]:
    """``count`` clouds; cloud i uses the generator seeded with (*seed, i)."""
    base = list(np.atleast_1d(seed).astype(int).tolist())
    return [make_shape(kind, n_points, np.random.default_rng([*base, i]), noise) for i in range(count)]
