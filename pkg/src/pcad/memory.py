"""Dual memory banks of normal patch (f1) and point (f2) features."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import NeighborIndex, farthest_point_sample

IDW_EPS = 1e-9
BANK_MAGIC = b"PCADBNK1"
_HEADER = struct.Struct("<8sQQQQQ")


class MemoryBank:
    """Stored feature vectors with an exact k-NN index and the (cloud, patch/point) origin of each."""

    def __init__(self, features: np.ndarray, provenance=None):
        features = np.ascontiguousarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError("features must be 2-D")
        self.features = features
        self.provenance = [tuple(p) for p in provenance] if provenance is not None else [(0, i) for i in range(len(features))]
        if len(self.provenance) != len(features):
            raise ValueError("one provenance entry per feature")
        self.index = NeighborIndex(features) if len(features) else None

    def __len__(self):
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def reconstruct(bank: MemoryBank, f: np.ndarray, k: int = 3) -> np.ndarray:
    """Inverse-distance-weighted mean of the k nearest stored features.

    Accepts one feature or a (Q, d) batch; k = 1 returns the nearest feature itself.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(bank) == 0:
        raise ValueError("empty memory bank")
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    dist, idx = bank.index.query(np.atleast_2d(f), k)
    if idx.shape[1] == 1:
        out = bank.features[idx[:, 0]].copy()
    else:
        w = 1.0 / (dist + IDW_EPS)
        out = np.einsum("qk,qkd->qd", w, bank.features[idx]) / w.sum(axis=1, keepdims=True)
    return out[0] if single else out


def score_x2(bank2d: MemoryBank, f2: np.ndarray, k2: int = 3) -> np.ndarray:
    """Per-point L2 distance between each feature and its bank reconstruction."""
    f2 = np.atleast_2d(np.asarray(f2, dtype=np.float64))
    return np.linalg.norm(f2 - reconstruct(bank2d, f2, k2), axis=1)


def object_scores(x1, x2) -> tuple[float, float]:
    x1, x2 = np.asarray(x1), np.asarray(x2)
    if x1.size == 0 or x2.size == 0:
        raise ValueError("empty score map")
    return float(x1.max()), float(x2.max())


def greedy_retention(features: np.ndarray, fraction: float, seed: int = 0, max_retained: int | None = None) -> np.ndarray:
    """Indices kept by farthest-first coverage in feature space, in pick order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("retention fraction must be in (0, 1]")
    n = len(features)
    keep = max(1, math.ceil(fraction * n - 1e-9))
    if max_retained is not None:
        keep = min(keep, max_retained)
    return farthest_point_sample(features, keep, seed)


@dataclass
class DualMemoryBank:
    bank3d: MemoryBank
    bank2d: MemoryBank
    links: list  # per bank3d entry, array of bank2d rows
    f2_shift: np.ndarray | None = None
    f2_scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.links) != len(self.bank3d):
            raise ValueError("one link set per 3D entry")
        reach = np.zeros(len(self.bank2d), dtype=bool)
        for ln in self.links:
            ln = np.asarray(ln, dtype=np.int64)
            if len(ln) and (ln.min() < 0 or ln.max() >= len(self.bank2d)):
                raise ValueError("link target out of range")
            reach[ln] = True
        if not reach.all():
            raise ValueError("every 2D entry must be linked from a 3D entry")

    def normalize_f2(self, f2: np.ndarray) -> np.ndarray:
        if self.f2_shift is None:
            return np.asarray(f2, dtype=np.float64)
        return (f2 - self.f2_shift) / self.f2_scale

    def save(self, path, extra: dict | None = None) -> None:
        """Binary feature payload at ``path`` plus a JSON sidecar ``path + '.json'``."""
        path = Path(path)
        norm = [] if self.f2_shift is None else [self.f2_shift, self.f2_scale]
        d2 = self.bank2d.features.shape[1]
        header = _HEADER.pack(BANK_MAGIC, len(self.bank3d), self.bank3d.dim, len(self.bank2d), d2, len(norm))
        payload = [self.bank3d.features, self.bank2d.features] + [np.asarray(v)[None, :] for v in norm]
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in payload)
        path.write_bytes(header + body)
        side = {
            "provenance3d": [list(map(int, p)) for p in self.bank3d.provenance],
            "provenance2d": [list(map(int, p)) for p in self.bank2d.provenance],
            "links": [np.asarray(ln).tolist() for ln in self.links],
            "meta": self.meta,
        }
        if extra:
            side.update(extra)
        sidecar_path(path).write_text(json.dumps(side, sort_keys=True))

    @classmethod
    def load(cls, path) -> tuple[DualMemoryBank, dict]:
        path = Path(path)
        raw = path.read_bytes()
        magic, n3, d3, n2, d2, n_norm = _HEADER.unpack_from(raw)
        if magic != BANK_MAGIC:
            raise ValueError(f"{path}: not a bank file")
        arr = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
        expect = n3 * d3 + n2 * d2 + n_norm * d2
        if arr.size != expect:
            raise ValueError(f"{path}: truncated payload")
        f3 = arr[: n3 * d3].reshape(n3, d3)
        f2 = arr[n3 * d3 : n3 * d3 + n2 * d2].reshape(n2, d2)
        norm = arr[n3 * d3 + n2 * d2 :].reshape(n_norm, d2)
        side = json.loads(sidecar_path(path).read_text())
        bank = cls(
            MemoryBank(f3, side["provenance3d"]),
            MemoryBank(f2, side["provenance2d"]),
            [np.asarray(ln, dtype=np.int64) for ln in side["links"]],
            norm[0].copy() if n_norm else None,
            norm[1].copy() if n_norm else None,
            side.get("meta", {}),
        )
        return bank, side


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def build_dual_bank(
    patch_features: list[np.ndarray],
    patch_members: list[list[np.ndarray]],
    point_features: list[np.ndarray],
    retention_fraction: float = 0.1,
    seed: int = 0,
    max_retained: int | None = None,
    normalize_f2: bool = True,
    scale_floor: float = 0.1,
) -> DualMemoryBank:
    """Retain salient patch features and pair each with its points' f2 features.

    ``patch_features[c]`` holds the f1 rows of cloud c, ``patch_members[c][j]``
    the point indices of its patch j and ``point_features[c]`` the f2 rows of
    all its points. With ``normalize_f2`` the stored f2 are standardised per
    dimension using statistics of every training point; each scale is floored
    at ``scale_floor`` times the mean scale so that dimensions which barely
    vary on normal data cannot blow up the distances.
    """
    if not patch_features:
        raise ValueError("empty training set")
    f1_all = np.vstack(patch_features)
    tags = [(c, j) for c, f in enumerate(patch_features) for j in range(len(f))]
    kept = greedy_retention(f1_all, retention_fraction, seed, max_retained)

    shift = scale = None
    if normalize_f2:
        stacked = np.vstack(point_features)
        shift = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        scale = np.maximum(std, max(scale_floor * std.mean(), 1e-6))

    keys = sorted({(tags[i][0], int(p)) for i in kept for p in patch_members[tags[i][0]][tags[i][1]]})
    row_of = {key: r for r, key in enumerate(keys)}
    f2 = np.array([point_features[c][p] for c, p in keys]).reshape(len(keys), -1)
    if normalize_f2:
        f2 = (f2 - shift) / scale
    links = [np.array(sorted(row_of[(tags[i][0], int(p))] for p in patch_members[tags[i][0]][tags[i][1]]), dtype=np.int64) for i in kept]
    return DualMemoryBank(
        MemoryBank(f1_all[kept], [tags[i] for i in kept]),
        MemoryBank(f2, keys),
        links,
        shift,
        scale,
        {"retention_fraction": retention_fraction, "candidates": len(f1_all)},
    )
