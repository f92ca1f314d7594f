"""Both experts end to end: feature extraction, training and per-point scoring."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .descriptors import assemble_f2, compute_fpfh, extract_2d_features, render_depth
from .geometry import PointCloud, build_index, estimate_normals, extract_patches, farthest_point_sample, median_spacing
from .memory import DualMemoryBank, build_dual_bank, object_scores, score_x2
from .sdf import SdfConfig, SdfModel, encode_batch, pretrain_sdf, score_x1

logger = logging.getLogger(__name__)


@dataclass
class ExpertConfig:
    normal_k: int = 16
    estimate_normals: bool = True
    fpfh_radius_factor: float = 5.0  # x median spacing
    depth_resolution: tuple = (64, 64)
    scales: tuple = (1, 2, 4)
    retention_fraction: float = 0.1
    max_retained: int | None = None
    k1: int = 3
    k2: int = 3
    sdf: SdfConfig = field(default_factory=SdfConfig)

    def __post_init__(self):
        if isinstance(self.sdf, dict):
            self.sdf = SdfConfig(**self.sdf)
        self.depth_resolution = tuple(self.depth_resolution)
        self.scales = tuple(self.scales)
        if not 0.0 < self.retention_fraction <= 1.0:
            raise ValueError("retention fraction must be in (0, 1]")
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth_resolution"] = list(self.depth_resolution)
        d["scales"] = list(self.scales)
        d["sdf"]["encoder_hidden"] = list(self.sdf.encoder_hidden)
        d["sdf"]["decoder_hidden"] = list(self.sdf.decoder_hidden)
        return d


@dataclass
class CloudFeatures:
    cloud: PointCloud  # with normals
    patches: list
    f2: np.ndarray  # (M, d2), not standardised


def prepare(cloud: PointCloud, cfg: ExpertConfig) -> PointCloud:
    if cfg.estimate_normals:
        return estimate_normals(cloud, k=min(cfg.normal_k, len(cloud))).cloud
    if cloud.normals is None:
        raise ValueError("cloud has no normals and normal estimation is disabled")
    return cloud


def cloud_features(cloud: PointCloud, cfg: ExpertConfig) -> CloudFeatures:
    cloud = prepare(cloud, cfg)
    index = build_index(cloud)
    n_p = min(cfg.sdf.n_patches, len(cloud))
    centers = farthest_point_sample(cloud, n_p, cfg.sdf.seed)
    patches = extract_patches(cloud, centers, min(cfg.sdf.patch_size, len(cloud)), index)
    radius = cfg.fpfh_radius_factor * (median_spacing(cloud, index) or 1.0)
    fpfh = compute_fpfh(cloud, radius, index).histograms
    stats, _ = extract_2d_features(render_depth(cloud, cfg.depth_resolution), cfg.scales)
    return CloudFeatures(cloud, patches, assemble_f2(stats, fpfh))


def patch_latents(model: SdfModel, patches) -> np.ndarray:
    f1, _, _ = encode_batch(model.encoder, np.stack([p.centered_points for p in patches]))
    return f1


@dataclass
class Experts:
    model: SdfModel
    bank: DualMemoryBank
    config: ExpertConfig
    history: list = field(default_factory=list)


def train_experts(clouds: list[PointCloud], cfg: ExpertConfig | None = None) -> Experts:
    """Pretrain the SDF expert on normal clouds, then populate the dual bank."""
    cfg = cfg or ExpertConfig()
    if not clouds:
        raise ValueError("empty training set")
    feats = [cloud_features(c, cfg) for c in clouds]
    result = pretrain_sdf([f.cloud for f in feats], cfg.sdf)
    f1 = [patch_latents(result.model, f.patches) for f in feats]
    members = [[p.member_indices for p in f.patches] for f in feats]
    bank = build_dual_bank(f1, members, [f.f2 for f in feats], cfg.retention_fraction, cfg.sdf.seed, cfg.max_retained)
    return Experts(result.model, bank, cfg, result.history)


@dataclass
class ExpertScores:
    x1: np.ndarray
    x2: np.ndarray
    cloud: PointCloud  # with the normals used for scoring

    @property
    def object_scores(self) -> tuple[float, float]:
        return object_scores(self.x1, self.x2)


def score_cloud(experts: Experts, cloud: PointCloud) -> ExpertScores:
    """Per-point maps X1 (|SDF| under reconstructed latents) and X2 (f2 reconstruction distance)."""
    feats = cloud_features(cloud, experts.config)
    x1 = score_x1(experts.model, feats.cloud, feats.patches, experts.bank.bank3d, experts.config.k1)
    x2 = score_x2(experts.bank.bank2d, experts.bank.normalize_f2(feats.f2), experts.config.k2)
    return ExpertScores(x1, x2, feats.cloud)
