"""Desk-scale synthetic benchmark: procedural shapes with Cut-Paste defects.

Per shape (one category) and seed: train both experts on normal clouds,
synthesise a labelled fusion set from held-out normal clouds, score
everything, fit the fusers and evaluate on a separately seeded test set.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .experts import ExpertConfig, Experts, score_cloud, train_experts
from .fusion import (
    FusionSample,
    IafConfig,
    LinearFuser,
    baseline_fuse,
    fuse_object_scores,
    fuse_point_scores,
    normalize_scores,
    train_iaf,
)
from .metrics import evaluate_all, gt_regions
from .sdf import SdfConfig
from .shapes import SHAPES, make_clouds
from .synthesis import SynthesisConfig, generate_dataset

logger = logging.getLogger(__name__)

METHODS = ("x1", "x2", "iaf", "iaf_no_selector_loss", "max", "add", "linear")
ROLE_TRAIN, ROLE_SYNTH, ROLE_TEST = 0, 1, 2


def small_expert_config(seed: int = 0) -> ExpertConfig:
    """Expert sizes that keep the whole benchmark within minutes on one CPU."""
    return ExpertConfig(
        depth_resolution=(64, 64),
        max_retained=64,
        sdf=SdfConfig(
            n_patches=32,
            patch_size=64,
            latent_dim=32,
            encoder_hidden=(32, 64),
            decoder_hidden=(64, 64),
            queries_per_patch=64,
            epochs=10,
            seed=seed,
        ),
    )


@dataclass
class BenchmarkConfig:
    shapes: tuple = SHAPES
    seeds: tuple = (0, 1, 2, 3, 4)
    n_points: int = 1024
    n_train: int = 50
    n_synth_clouds: int = 16
    n_synth: int = 64
    n_test: int = 40
    noise: float = 0.003
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    test_defects: SynthesisConfig = field(default_factory=lambda: SynthesisConfig(height_range=(0.1, 0.3)))
    iaf: IafConfig = field(default_factory=lambda: IafConfig(max_rows=4096))


@dataclass
class CategoryResult:
    shape: str
    seed: int
    metrics: dict  # method -> {"p_auroc", "o_auroc", "aupro_30", ...}
    seconds: float


def _fusion_samples(experts: Experts, samples) -> list[FusionSample]:
    out = []
    for s in samples:
        sc = score_cloud(experts, s.cloud)
        out.append(FusionSample(sc.x1, sc.x2, s.labels))
    return out


def _report(point_scores, object_scores, test, regions) -> dict:
    rep = evaluate_all(point_scores, object_scores, [s.labels for s in test], regions)
    return rep.row()


@dataclass
class ScoredCategory:
    """Expert score maps of one category: the fusion set D' and the test set."""

    fit: list  # FusionSample per D' sample
    evals: list  # FusionSample per test sample
    test: list  # LabeledSample per test sample
    regions: list  # ground-truth regions per test sample


def score_category(shape: str, seed: int, cfg: BenchmarkConfig, expert_cfg: ExpertConfig | None = None) -> ScoredCategory:
    k = SHAPES.index(shape) if shape in SHAPES else 0
    expert_cfg = expert_cfg or small_expert_config(seed)
    train = make_clouds(shape, cfg.n_train, cfg.n_points, (seed, k, ROLE_TRAIN), cfg.noise)
    experts = train_experts(train, expert_cfg)

    synth_pool = make_clouds(shape, cfg.n_synth_clouds, cfg.n_points, (seed, k, ROLE_SYNTH), cfg.noise)
    d_prime = generate_dataset(synth_pool, cfg.n_synth, seed, cfg.synthesis)
    test_pool = make_clouds(shape, cfg.n_test, cfg.n_points, (seed, k, ROLE_TEST), cfg.noise)
    test = generate_dataset(test_pool, cfg.n_test, seed + 10_000, cfg.test_defects)
    return ScoredCategory(
        _fusion_samples(experts, d_prime),
        _fusion_samples(experts, test),
        test,
        [gt_regions(s.cloud, s.labels) for s in test],
    )


def two_expert_samples(
    seed,
    informative: int = 0,
    n_samples: int = 50,
    points_per_sample: int = 100,
    sigma: float = 0.1,
    anomaly_rate: float = 0.1,
    identical: bool = False,
) -> list[FusionSample]:
    """Synthetic score maps: one expert is labels + N(0, sigma^2), the other pure N(0, 1) noise.

    With ``identical`` both channels carry the same informative map.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        y = (rng.random(points_per_sample) < anomaly_rate).astype(np.int64)
        good = y + rng.normal(0.0, sigma, points_per_sample)
        other = good.copy() if identical else rng.normal(0.0, 1.0, points_per_sample)
        x = [good, other] if informative == 0 else [other, good]
        out.append(FusionSample(x[0], x[1], y))
    return out


def asymmetric_importance(seed: int, iaf_cfg: IafConfig | None = None) -> dict:
    """Mean selector weight per channel with the informative expert in either column."""
    out = {}
    for informative in (0, 1):
        cfg = IafConfig(**{**(iaf_cfg or IafConfig()).__dict__, "seed": seed})
        model = train_iaf(two_expert_samples([seed, informative, 0], informative), cfg)
        test = two_expert_samples([seed, informative, 1], informative)
        S = model.importance(np.concatenate([s.x1 for s in test]), np.concatenate([s.x2 for s in test]))
        out[f"informative_col{informative}"] = {
            "informative": float(S[:, informative].mean()),
            "noisy": float(S[:, 1 - informative].mean()),
        }
    return out


def run_category(shape: str, seed: int, cfg: BenchmarkConfig, expert_cfg: ExpertConfig | None = None) -> CategoryResult:
    t0 = time.perf_counter()
    sc = score_category(shape, seed, cfg, expert_cfg)
    metrics = _evaluate_methods(sc.fit, sc.evals, sc.test, sc.regions, cfg.iaf)
    return CategoryResult(shape, seed, metrics, time.perf_counter() - t0)


def _evaluate_methods(fit, evals, test, regions, iaf_cfg: IafConfig) -> dict:
    full = train_iaf(fit, iaf_cfg)
    no_ls = train_iaf(fit, IafConfig(**{**iaf_cfg.__dict__, "lam": 0.0}))
    stats = full.stats
    rows = normalize_scores(np.concatenate([s.x1 for s in fit]), np.concatenate([s.x2 for s in fit]), stats)
    linear = LinearFuser.fit(rows, np.concatenate([s.labels for s in fit]))

    out = {}
    obj = [s.object_scores for s in evals]
    out["x1"] = _report([s.x1 for s in evals], [o[0] for o in obj], test, regions)
    out["x2"] = _report([s.x2 for s in evals], [o[1] for o in obj], test, regions)
    for name, model in (("iaf", full), ("iaf_no_selector_loss", no_ls)):
        out[name] = _report(
            [fuse_point_scores(model, s.x1, s.x2) for s in evals],
            [fuse_object_scores(model, *o) for o in obj],
            test,
            regions,
        )
    for name in ("max", "add", "linear"):
        lin = linear if name == "linear" else None
        out[name] = _report(
            [baseline_fuse(s.x1, s.x2, name, stats, lin) for s in evals],
            [float(baseline_fuse([o[0]], [o[1]], name, stats, lin)[0]) for o in obj],
            test,
            regions,
        )
    return out


@dataclass
class BenchmarkResult:
    categories: list  # CategoryResult per (seed, shape)
    asymmetric: dict  # seed -> asymmetric_importance(seed)
    seconds: float


def run_benchmark(cfg: BenchmarkConfig | None = None, expert_cfg_for_seed=small_expert_config) -> BenchmarkResult:
    cfg = cfg or BenchmarkConfig()
    t0 = time.perf_counter()
    results = []
    asym = {}
    for seed in cfg.seeds:
        for shape in cfg.shapes:
            r = run_category(shape, seed, cfg, expert_cfg_for_seed(seed))
            logger.info("%s seed %d done in %.1fs", shape, seed, r.seconds)
            results.append(r)
        asym[seed] = asymmetric_importance(seed, cfg.iaf)
    return BenchmarkResult(results, asym, time.perf_counter() - t0)


def seed_means(results: list[CategoryResult], metric: str) -> dict:
    """seed -> method -> mean of ``metric`` over categories."""
    out = {}
    for seed in sorted({r.seed for r in results}):
        rs = [r for r in results if r.seed == seed]
        out[seed] = {m: float(np.mean([r.metrics[m][metric] for r in rs])) for m in rs[0].metrics}
    return out
