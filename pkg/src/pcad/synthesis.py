"""Cut-Paste pseudo-anomaly generation for fusion training data."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import PointCloud, build_index, median_spacing

MASK_KINDS = ("sphere", "box", "ellipsoid")


class MaskError(RuntimeError):
    pass


@dataclass
class SynthesisConfig:
    kinds: tuple = MASK_KINDS
    f_min: float = 0.005
    f_max: float = 0.05
    max_attempts: int = 20
    radius_scale: float = 1.0  # multiplies the radius drawn from the fraction bounds
    max_angle_deg: float = 30.0
    scale_range: tuple = (0.8, 1.2)
    height_range: tuple = (0.02, 0.1)  # x footprint radius of the mask
    merge_radius: float = 0.0
    mode: str = "replace"  # or "insert"
    normal_fraction: float = 0.25

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.scale_range = tuple(self.scale_range)
        self.height_range = tuple(self.height_range)
        if not 0 < self.f_min <= self.f_max < 1:
            raise ValueError("need 0 < f_min <= f_max < 1")
        if self.mode not in ("replace", "insert"):
            raise ValueError("mode must be 'replace' or 'insert'")
        for k in self.kinds:
            if k not in MASK_KINDS:
                raise ValueError(f"unknown mask kind {k!r}")


@dataclass
class AnomalyMask:
    indices: np.ndarray
    kind: str = "sphere"
    center_index: int = -1
    radius: float = 0.0
    extents: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    @classmethod
    def null(cls) -> AnomalyMask:
        return cls(np.zeros(0, dtype=np.int64), "none")

    def params(self) -> dict:
        return {
            "kind": self.kind,
            "center_index": int(self.center_index),
            "radius": float(self.radius),
            "extents": [float(e) for e in self.extents],
            "size": int(len(self.indices)),
        }


@dataclass
class LabeledSample:
    cloud: PointCloud  # carries the labels
    provenance: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return self.cloud.labels


def _shape_members(points, center, kind, radius, extents, rot):
    local = (points - center) @ rot  # coordinates in the mask frame
    if kind == "sphere":
        return np.linalg.norm(local, axis=1) <= radius
    if kind == "box":
        return np.all(np.abs(local) <= np.asarray(extents), axis=1)
    return np.sum((local / np.asarray(extents)) ** 2, axis=1) <= 1.0


def make_mask(cloud: PointCloud, rng: np.random.Generator, cfg: SynthesisConfig | None = None) -> AnomalyMask:
    """Random sphere/box/ellipsoid footprint around a random surface point.

    The radius is drawn from the surface-density estimate of the fraction
    bounds and redrawn until the covered fraction lies in [f_min, f_max].
    """
    cfg = cfg or SynthesisConfig()
    m = len(cloud)
    spacing = median_spacing(cloud) or 1.0
    lo_n, hi_n = cfg.f_min * m, cfg.f_max * m
    # area per point lies between spacing^2 (grid) and (2 spacing)^2 (Poisson)
    r_lo = spacing * np.sqrt(lo_n / np.pi)
    r_hi = 2.0 * spacing * np.sqrt(hi_n / np.pi)
    for _ in range(cfg.max_attempts):
        kind = cfg.kinds[rng.integers(len(cfg.kinds))]
        center_index = int(rng.integers(m))
        radius = float(rng.uniform(r_lo, r_hi)) * cfg.radius_scale
        rot = Rotation.random(random_state=rng).as_matrix()
        shape = rng.uniform(0.6, 1.0, size=3) if kind != "sphere" else np.ones(3)
        extents = radius * shape
        inside = _shape_members(cloud.points, cloud.points[center_index], kind, radius, extents, rot)
        count = int(inside.sum())
        if count >= 1 and lo_n <= count <= hi_n and count < m:
            return AnomalyMask(np.flatnonzero(inside), kind, center_index, radius, tuple(extents), tuple(map(tuple, rot)))
    raise MaskError(f"no mask within [{cfg.f_min}, {cfg.f_max}] of M after {cfg.max_attempts} attempts")


def _region_frame(points, normals):
    c = points.mean(axis=0)
    if normals is not None:
        n = normals.mean(axis=0)
        if np.linalg.norm(n) > 1e-12:
            return c, n / np.linalg.norm(n)
    if len(points) >= 3:
        _, _, vt = np.linalg.svd(points - c)
        n = vt[-1]
        return c, n if n[2] >= 0 else -n
    return c, np.array([0.0, 0.0, 1.0])


def _align(a, b):
    """Rotation matrix taking unit vector a onto unit vector b."""
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(np.dot(a, b))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: half-turn about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        return Rotation.from_rotvec(np.pi * axis / np.linalg.norm(axis)).as_matrix()
    return Rotation.from_rotvec(v / s * np.arctan2(s, c)).as_matrix()


def cut_paste(
    target: PointCloud,
    source: PointCloud,
    mask: AnomalyMask,
    rng: np.random.Generator,
    cfg: SynthesisConfig | None = None,
) -> LabeledSample:
    """Replace the masked target points with a transformed region cut from ``source``.

    The cut region (as many source points as the mask holds, nearest to a
    random source point) is aligned to the target's local normal, rotated by
    a bounded random angle, scaled, and lifted along the normal.
    """
    cfg = cfg or SynthesisConfig()
    m = len(target)
    labels = np.zeros(m, dtype=np.int64)
    if len(mask.indices) == 0:
        return LabeledSample(target.with_(labels=labels), {"mask": mask.params(), "transform": None})
    n = len(mask.indices)
    if n > len(source):
        raise ValueError("source cloud smaller than the mask")

    src_center = int(rng.integers(len(source)))
    _, region = build_index(source).query(source.points[src_center], n)
    sp = source.points[region]
    sn = source.normals[region] if source.normals is not None else None
    tp = target.points[mask.indices]
    tn = target.normals[mask.indices] if target.normals is not None else None
    c_s, n_s = _region_frame(sp, sn)
    c_t, n_t = _region_frame(tp, tn)

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-cfg.max_angle_deg, cfg.max_angle_deg))
    rot = Rotation.from_rotvec(axis * angle).as_matrix() @ _align(n_s, n_t)
    scale = float(rng.uniform(*cfg.scale_range))
    footprint = float(np.max(np.linalg.norm(tp - c_t, axis=1))) or median_spacing(target)
    height = float(rng.uniform(*cfg.height_range)) * footprint
    pasted = c_t + height * n_t + scale * (sp - c_s) @ rot.T
    pasted_n = None
    if target.normals is not None:
        base_n = sn if sn is not None else np.broadcast_to(n_s, sp.shape)
        pasted_n = base_n @ rot.T
        pasted_n /= np.linalg.norm(pasted_n, axis=1, keepdims=True)

    if cfg.mode == "replace":
        pts = target.points.copy()
        pts[mask.indices] = pasted
        nrm = None
        if target.normals is not None:
            nrm = target.normals.copy()
            nrm[mask.indices] = pasted_n
        labels[mask.indices] = 1
        pasted_idx = mask.indices
    else:
        pts = np.vstack([target.points, pasted])
        nrm = np.vstack([target.normals, pasted_n]) if target.normals is not None else None
        labels = np.concatenate([labels, np.ones(n, dtype=np.int64)])
        pasted_idx = np.arange(m, m + n)

    if cfg.merge_radius > 0:
        near = cKDTree(pts[pasted_idx]).query_ball_point(pts, cfg.merge_radius, return_length=True)
        labels[near > 0] = 1

    record = {
        "mask": mask.params(),
        "transform": {
            "source_center": src_center,
            "rotation": rot.tolist(),
            "scale": scale,
            "height": height,
            "angle_deg": float(np.rad2deg(angle)),
        },
    }
    return LabeledSample(PointCloud(pts, nrm, labels), record)


def generate_dataset(
    clouds: list[PointCloud], n_samples: int, seed: int = 0, cfg: SynthesisConfig | None = None
) -> list[LabeledSample]:
    """Labelled samples: Cut-Paste defects plus a fraction of untouched normals.

    Sample i draws from its own generator seeded with (seed, i), so any
    sample can be regenerated alone.
    """
    cfg = cfg or SynthesisConfig()
    if len(clouds) < 2:
        raise ValueError("need at least two clouds (source differs from target)")
    n_normal = int(round(cfg.normal_fraction * n_samples))
    normal_ids = set(np.random.default_rng([seed, 2**31]).permutation(n_samples)[:n_normal].tolist())
    out = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        t = int(rng.integers(len(clouds)))
        target = clouds[t]
        if i in normal_ids:
            out.append(LabeledSample(target.with_(labels=np.zeros(len(target), dtype=np.int64)),
                                     {"seed": [seed, i], "target_id": t, "source_id": None, "mask": None}))
            continue
        s = int(rng.integers(len(clouds) - 1))
        s = s + 1 if s >= t else s
        mask = make_mask(target, rng, cfg)
        sample = cut_paste(target, clouds[s], mask, rng, cfg)
        sample.provenance.update({"seed": [seed, i], "target_id": t, "source_id": s})
        out.append(sample)
    return out


def config_dict(cfg: SynthesisConfig) -> dict:
    d = asdict(cfg)
    for k in ("kinds", "scale_range", "height_range"):
        d[k] = list(d[k])
    return d
