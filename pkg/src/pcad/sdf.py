"""3D expert: PointNet patch encoder + signed-distance decoder."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .geometry import Patch, PointCloud, build_index, extract_patches, farthest_point_sample
from .memory import MemoryBank, reconstruct

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SdfConfig:
    n_patches: int = 64
    patch_size: int = 256
    latent_dim: int = 128
    encoder_hidden: tuple = (64, 128)
    decoder_hidden: tuple = (128, 128)
    queries_per_patch: int = 64
    off_surface_fraction: float = 0.5
    sigma: float = 0.1  # off-surface offset std, in patch-scale units
    epochs: int = 40
    batch_patches: int = 8
    lr: float = 3e-3
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.off_surface_fraction <= 1.0:
            raise ValueError("off_surface_fraction must be in (0, 1]: zero-only targets admit a constant solution")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)


@dataclass
class SdfModel:
    encoder: nn.Mlp
    decoder: nn.Mlp

    @classmethod
    def create(cls, cfg: SdfConfig, rng: np.random.Generator) -> SdfModel:
        enc_dims = [3, *cfg.encoder_hidden, cfg.latent_dim]
        enc = nn.Mlp.create(enc_dims, ["relu"] * (len(enc_dims) - 2) + ["identity"], rng)
        dec_dims = [3 + cfg.latent_dim, *cfg.decoder_hidden, 1]
        dec = nn.Mlp.create(dec_dims, ["relu"] * (len(dec_dims) - 2) + ["identity"], rng)
        return cls(enc, dec)

    @property
    def latent_dim(self) -> int:
        return self.encoder.dims[-1]

    def to_dict(self) -> dict:
        return {"pointnet": self.encoder.to_dict(), "sdf_decoder": self.decoder.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> SdfModel:
        return cls(nn.Mlp.from_dict(d["pointnet"]), nn.Mlp.from_dict(d["sdf_decoder"]))


def encode_patch(enc: nn.Mlp, patch: Patch | np.ndarray) -> np.ndarray:
    pts = patch.centered_points if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("empty patch")
    return enc(pts).max(axis=0)


def encode_batch(enc: nn.Mlp, pts: np.ndarray):
    """Encode (B, P, 3) patches; returns ``(f1 (B, d), trace, argmax (B, d))``."""
    b, p, _ = pts.shape
    tr = enc.forward(pts.reshape(b * p, 3))
    emb = tr.output.reshape(b, p, -1)
    arg = emb.argmax(axis=1)
    f1 = np.take_along_axis(emb, arg[:, None, :], axis=1)[:, 0]
    return f1, tr, arg


def sdf_eval(dec: nn.Mlp, q: np.ndarray, f1: np.ndarray) -> np.ndarray:
    """Signed distance for query points ``q`` (N x 3 or 3,) under latent ``f1``."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    x = np.hstack([q, np.broadcast_to(f1, (len(q), len(f1)))])
    s = dec(x)[:, 0]
    return s[0] if single else s


def training_patches(clouds: list[PointCloud], cfg: SdfConfig):
    """Patches (centred points + normals) used for SDF pretraining."""
    pts, nrm = [], []
    for cloud in clouds:
        if cloud.normals is None:
            raise ValueError("pretraining clouds need normals")
        index = build_index(cloud)
        size = min(cfg.patch_size, len(cloud))
        centers = farthest_point_sample(cloud, min(cfg.n_patches, len(cloud)), cfg.seed)
        for patch in extract_patches(cloud, centers, size, index):
            pts.append(patch.centered_points)
            nrm.append(cloud.normals[patch.member_indices])
    return np.stack(pts), np.stack(nrm)


def sample_queries(pts, nrm, n_query, off_fraction, sigma, rng):
    """On-surface (target 0) and normal-offset (target = offset) queries per patch."""
    b, p, _ = pts.shape
    pick = rng.integers(0, p, size=(b, n_query))
    base = np.take_along_axis(pts, pick[..., None], axis=1)
    nb = np.take_along_axis(nrm, pick[..., None], axis=1)
    n_off = int(round(off_fraction * n_query))
    delta = np.zeros((b, n_query))
    delta[:, :n_off] = rng.normal(0.0, sigma, size=(b, n_off))
    return base + delta[..., None] * nb, delta


@dataclass
class SdfTrainResult:
    model: SdfModel
    history: list = field(default_factory=list)


def _step(model: SdfModel, pts, q, target):
    b, nq, _ = q.shape
    f1, tr_enc, arg = encode_batch(model.encoder, pts)
    d = f1.shape[1]
    x = np.concatenate([q, np.broadcast_to(f1[:, None, :], (b, nq, d))], axis=2).reshape(b * nq, 3 + d)
    tr_dec = model.decoder.forward(x)
    resid = tr_dec.output[:, 0] - target.ravel()
    loss = float(np.mean(resid**2))
    g_out = (2.0 / resid.size) * resid[:, None]
    g_dec, g_in = model.decoder.backward(tr_dec, g_out)
    g_f1 = g_in[:, 3:].reshape(b, nq, d).sum(axis=1)
    g_emb = np.zeros((b, pts.shape[1], d))
    np.put_along_axis(g_emb, arg[:, None, :], g_f1[:, None, :], axis=1)
    g_enc, _ = model.encoder.backward(tr_enc, g_emb.reshape(-1, d))
    return loss, g_enc + g_dec


def sdf_loss_and_grads(model: SdfModel, pts, q, target):
    """Mean squared SDF error and gradients (encoder params then decoder params)."""
    return _step(model, pts, q, target)


def pretrain_sdf(clouds: list[PointCloud], cfg: SdfConfig, model: SdfModel | None = None) -> SdfTrainResult:
    """Fit encoder + decoder so that on-surface queries map to 0 and offsets to their signed offset."""
    if not clouds:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    model = model or SdfModel.create(cfg, rng)
    pts, nrm = training_patches(clouds, cfg)
    n = len(pts)
    steps_per_epoch = -(-n // cfg.batch_patches)
    sched = nn.CosineSchedule(cfg.lr, cfg.epochs * steps_per_epoch)
    opt = nn.AdamW(weight_decay=cfg.weight_decay)
    params = model.encoder.params + model.decoder.params
    history = []
    step = 0
    bad = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(steps_per_epoch):
            sel = order[s * cfg.batch_patches : (s + 1) * cfg.batch_patches]
            q, target = sample_queries(pts[sel], nrm[sel], cfg.queries_per_patch, cfg.off_surface_fraction, cfg.sigma, rng)
            loss, grads = _step(model, pts[sel], q, target)
            opt.step(params, grads, nn.lr_at(sched, step))
            step += 1
            total += loss * len(sel)
        history.append(total / n)
        bad = bad + 1 if history[-1] > 10 * history[0] else 0
        if bad >= 20:
            raise TrainingDiverged(f"SDF loss above 10x initial for 20 epochs (epoch {epoch})")
        logger.debug("sdf epoch %d loss %.6f", epoch, history[-1])
    return SdfTrainResult(model, history)


def score_x1(
    model: SdfModel,
    cloud: PointCloud,
    patches: list[Patch],
    bank3d: MemoryBank,
    k1: int = 3,
) -> np.ndarray:
    """Per-point |SDF| under bank-reconstructed latents, averaged over covering patches.

    Points outside every patch get the mean score of the covered points.
    """
    if len(bank3d) == 0:
        raise ValueError("empty memory bank")
    m = len(cloud)
    sizes = {len(p.member_indices) for p in patches}
    total = np.zeros(m)
    count = np.zeros(m)
    if len(sizes) == 1:
        pts = np.stack([p.centered_points for p in patches])
        f1, _, _ = encode_batch(model.encoder, pts)
        f1_hat = reconstruct(bank3d, f1, k1)
        b, n, _ = pts.shape
        x = np.concatenate([pts, np.broadcast_to(f1_hat[:, None, :], (b, n, f1_hat.shape[1]))], axis=2)
        scores = np.abs(model.decoder(x.reshape(b * n, -1))[:, 0]).reshape(b, n)
    else:
        scores = [np.abs(sdf_eval(model.decoder, p.centered_points, reconstruct(bank3d, encode_patch(model.encoder, p), k1)))
                  for p in patches]
    for patch, s in zip(patches, scores):  # fixed summation order by patch index
        np.add.at(total, patch.member_indices, s)
        np.add.at(count, patch.member_indices, 1.0)
    covered = count > 0
    out = np.empty(m)
    out[covered] = total[covered] / count[covered]
    out[~covered] = out[covered].mean() if covered.any() else 0.0
    return out


def config_dict(cfg: SdfConfig) -> dict:
    d = asdict(cfg)
    d["encoder_hidden"] = list(cfg.encoder_hidden)
    d["decoder_hidden"] = list(cfg.decoder_hidden)
    return d
