"""Importance-aware fusion of two expert score maps.

A selector network turns each (x1, x2) score row into simplex weights S; a
predictor network classifies the weighted row x * S. The predictor is fitted
by cross-entropy; the selector by an entropy term gated by how far the fused
cross-entropy sits above the best single calibrated expert (constant ``b``)
plus a margin.

Column 0 always holds the 3D expert (X1), column 1 the 2D expert (X2).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import nn

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> NormStats:
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_norm_stats(x1, x2) -> NormStats:
    x = np.column_stack([np.ravel(x1), np.ravel(x2)]).astype(np.float64)
    return NormStats(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))


def normalize_scores(x1, x2, stats: NormStats) -> np.ndarray:
    """Z-normalise both channels with frozen training statistics -> (N, 2) rows."""
    x = np.column_stack([np.ravel(x1), np.ravel(x2)]).astype(np.float64)
    return (x - stats.mean) / stats.std


# ---------------------------------------------------------------- baseline b


def _logistic_ce(params, x, y):
    a, c = params
    z = a * x + c
    # mean of log(1 + e^z) - y z, and its gradient
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    p = np.exp(-np.logaddexp(0.0, -z))
    g = p - y
    return loss, np.array([np.mean(g * x), np.mean(g)])


def calibrate_channel(x, y, tol: float = 1e-8) -> tuple[float, float, float]:
    """Fit p(y=1|x) = sigmoid(a x + c) by minimum cross-entropy -> (a, c, ce)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    res = minimize(_logistic_ce, np.zeros(2), args=(x, y), jac=True, method="L-BFGS-B",
                   options={"gtol": tol, "ftol": 1e-15, "maxiter": 5000})
    a, c = res.x
    return float(a), float(c), float(res.fun)


@dataclass
class BaselineConstant:
    b: float
    c_3d: float
    c_2d: float
    calibration: dict = field(default_factory=dict)  # channel -> [scale, offset]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> BaselineConstant:
        return cls(d["b"], d["c_3d"], d["c_2d"], d.get("calibration", {}))


def compute_baseline_b(rows: np.ndarray, labels) -> BaselineConstant:
    """b = min of the two experts' calibrated cross-entropies on the batch."""
    labels = np.asarray(labels).ravel()
    if labels.min() == labels.max():
        raise ValueError("cannot calibrate: one class absent")
    a3, o3, c3 = calibrate_channel(rows[:, 0], labels)
    a2, o2, c2 = calibrate_channel(rows[:, 1], labels)
    return BaselineConstant(min(c3, c2), c3, c2, {"3d": [a3, o3], "2d": [a2, o2]})


# ---------------------------------------------------------------- networks


@dataclass
class IafConfig:
    margin: float = 0.1
    lam: float = 1.0
    epochs: int = 150
    batch: int = 32  # samples (score maps) per step; their rows are pooled
    lr: float = 0.01
    hidden: tuple = (16, 16)
    activation: str = "tanh"
    weight_decay: float = 1e-2
    routing: str = "separate"  # or "joint"
    entropy: bool = True
    object_weight: float = 1.0
    max_rows: int | None = None  # cap on pooled point rows per step (random subset)
    warmup_epochs: int = 0  # predictor-only epochs; the selector stays frozen at (0.5, 0.5)
    selector_lr_scale: float = 0.3  # selector step size relative to lr
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.selector_lr_scale <= 0:
            raise ValueError("selector_lr_scale must be > 0")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.routing not in ("separate", "joint"):
            raise ValueError("routing must be 'separate' or 'joint'")


def create_selector(cfg: IafConfig, rng) -> nn.Mlp:
    """Zero final layer, so an untrained selector outputs (0.5, 0.5)."""
    dims = [2, *cfg.hidden, 2]
    return nn.Mlp.create(dims, [cfg.activation] * len(cfg.hidden) + ["softmax"], rng, zero_last=True)


def create_predictor(cfg: IafConfig, rng) -> nn.Mlp:
    dims = [2, *cfg.hidden, 2]
    return nn.Mlp.create(dims, [cfg.activation] * len(cfg.hidden) + ["softmax"], rng)


def selector_forward(sel: nn.Mlp, rows) -> np.ndarray:
    return sel(np.atleast_2d(rows))


def predictor_forward(pred: nn.Mlp, rows, S):
    """Class probabilities of the weighted rows and the anomaly score A = p(class 1)."""
    rows = np.atleast_2d(rows)
    S = np.atleast_2d(S)
    if rows.shape != S.shape:
        raise ValueError(f"rows {rows.shape} vs weights {S.shape}")
    probs = pred(rows * S)
    return probs, probs[:, 1]


def _default_weights(n, weights):
    return np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)


def _objectives(sel: nn.Mlp, pred: nn.Mlp, rows, labels, b: float, m: float, weights, entropy: bool, need_selector: bool = True):
    """Both losses and all four gradient blocks from one shared forward pass."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    w = _default_weights(n, weights)
    tr_s = sel.forward(rows)
    S = tr_s.output
    tr_p = pred.forward(rows * S)
    P = tr_p.output
    out = {}

    # predictor cross-entropy
    l_p, g_probs = nn.cross_entropy(P, labels, w)
    out["l_p"] = l_p
    out["phi_p"], g_xs = pred.backward(tr_p, g_probs)
    out["theta_p"], _ = sel.backward(tr_s, g_xs * rows)
    if not need_selector:
        return out

    # gated entropy:  r = max(m - b + ce, 0)
    p_y = P[np.arange(n), labels]
    p_c = np.clip(p_y, nn.LOG_CLAMP, 1.0)
    r = np.maximum(m - b - np.log(p_c), 0.0)
    if entropy:
        logS = np.log(np.clip(S, nn.LOG_CLAMP, 1.0))
        H = -(S * logS).sum(axis=1)
    else:
        H = np.ones(n)
    out["l_s"] = float((w * r * H).sum())
    # d r / d P_y through the clamp and the max; max'(0) = 0
    open_gate = (r > 0) & (p_y >= nn.LOG_CLAMP)
    g_probs = np.zeros_like(P)
    g_probs[np.arange(n), labels] = np.where(open_gate, -w * H / p_c, 0.0)
    out["phi_s"], g_xs = pred.backward(tr_p, g_probs)
    g_S = g_xs * rows
    if entropy:
        g_S = g_S + (w * r)[:, None] * -(logS + 1.0)
    out["theta_s"], _ = sel.backward(tr_s, g_S)
    return out


def predictor_loss(sel: nn.Mlp, pred: nn.Mlp, rows, labels, weights=None):
    """Cross-entropy of the predictor with the selector output held fixed.

    Returns ``(loss, grads_phi, grads_theta)``; ``grads_theta`` is what joint
    routing would add to the selector.
    """
    o = _objectives(sel, pred, rows, labels, 0.0, 0.0, weights, True, need_selector=False)
    return o["l_p"], o["phi_p"], o["theta_p"]


def selector_loss(sel: nn.Mlp, pred: nn.Mlp, rows, labels, b: float, m: float, weights=None, entropy: bool = True):
    """Gated entropy loss  sum_x w(x) * r(x) * H(S(x)).

    r(x) = max(m - (b + log f_y(x * S(x))), 0) and H = -sum_c S_c log S_c.
    Gradients flow to the selector through both H and r (the predictor is
    held fixed). With ``entropy=False`` H is replaced by 1.

    Returns ``(loss, grads_theta, grads_phi)``.
    """
    o = _objectives(sel, pred, rows, labels, b, m, weights, entropy)
    return o["l_s"], o["theta_s"], o["phi_s"]


def final_loss(l_p: float, l_s: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return l_p + lam * l_s


# ---------------------------------------------------------------- training


@dataclass
class IafModel:
    selector: nn.Mlp
    predictor: nn.Mlp
    baseline: BaselineConstant
    stats: NormStats
    config: IafConfig
    history: list = field(default_factory=list)

    def point_rows(self, x1, x2) -> np.ndarray:
        return normalize_scores(x1, x2, self.stats)

    def importance(self, x1, x2) -> np.ndarray:
        return selector_forward(self.selector, self.point_rows(x1, x2))

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["hidden"] = list(self.config.hidden)
        return {
            "selector": self.selector.to_dict(),
            "predictor": self.predictor.to_dict(),
            "b": self.baseline.b,
            "c_2d": self.baseline.c_2d,
            "c_3d": self.baseline.c_3d,
            "calibration": self.baseline.calibration,
            "normalization": self.stats.to_dict(),
            "config": cfg,
        }

    @classmethod
    def from_dict(cls, d) -> IafModel:
        return cls(
            nn.Mlp.from_dict(d["selector"]),
            nn.Mlp.from_dict(d["predictor"]),
            BaselineConstant(d["b"], d["c_3d"], d["c_2d"], d["calibration"]),
            NormStats.from_dict(d["normalization"]),
            IafConfig(**d["config"]),
        )


def fuse_point_scores(model: IafModel, x1, x2) -> np.ndarray:
    rows = model.point_rows(x1, x2)
    _, a = predictor_forward(model.predictor, rows, selector_forward(model.selector, rows))
    return a


def fuse_object_scores(model: IafModel, s1: float, s2: float) -> float:
    """Object-level fusion through the same (shared per-row) networks."""
    return float(fuse_point_scores(model, [s1], [s2])[0])


@dataclass
class FusionSample:
    """Expert score maps and point labels of one synthetic sample."""

    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray

    @property
    def object_scores(self) -> tuple[float, float]:
        return float(np.max(self.x1)), float(np.max(self.x2))


def _batch(samples, stats, object_weight, max_rows=None, rng=None):
    rows = normalize_scores(np.concatenate([s.x1 for s in samples]), np.concatenate([s.x2 for s in samples]), stats)
    labels = np.concatenate([s.labels for s in samples]).astype(np.int64)
    if max_rows is not None and len(labels) > max_rows:
        keep = np.sort(rng.choice(len(labels), max_rows, replace=False))
        rows, labels = rows[keep], labels[keep]
    n_p = len(labels)
    w = np.full(n_p, 1.0 / n_p)
    if object_weight > 0:
        obj = np.array([s.object_scores for s in samples])
        obj_rows = normalize_scores(obj[:, 0], obj[:, 1], stats)
        obj_labels = np.array([int(np.any(s.labels)) for s in samples], dtype=np.int64)
        rows = np.vstack([rows, obj_rows])
        labels = np.concatenate([labels, obj_labels])
        w = np.concatenate([w, np.full(len(samples), object_weight / len(samples))])
    return rows, labels, w


def train_iaf(samples: list[FusionSample], cfg: IafConfig | None = None) -> IafModel:
    """Fit selector and predictor on labelled score maps (AdamW, cosine schedule).

    ``b`` and the normalisation statistics are computed once from all samples
    before training.
    """
    cfg = cfg or IafConfig()
    if not samples:
        raise ValueError("no training samples")
    all_x1 = np.concatenate([s.x1 for s in samples])
    all_x2 = np.concatenate([s.x2 for s in samples])
    all_y = np.concatenate([s.labels for s in samples])
    if all_y.min() == all_y.max():
        raise ValueError("training data must contain both classes")
    stats = fit_norm_stats(all_x1, all_x2)
    baseline = compute_baseline_b(normalize_scores(all_x1, all_x2, stats), all_y)

    rng = np.random.default_rng(cfg.seed)
    sel = create_selector(cfg, rng)
    pred = create_predictor(cfg, rng)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch)
    sched = nn.CosineSchedule(cfg.lr, cfg.epochs * steps_per_epoch)
    opt_theta = nn.AdamW(weight_decay=cfg.weight_decay)
    opt_phi = nn.AdamW(weight_decay=cfg.weight_decay)
    history = []
    step = 0
    bad = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        sums = np.zeros(3)
        for s in range(steps_per_epoch):
            chunk = [samples[i] for i in order[s * cfg.batch : (s + 1) * cfg.batch]]
            rows, labels, w = _batch(chunk, stats, cfg.object_weight, cfg.max_rows, rng)
            o = _objectives(sel, pred, rows, labels, baseline.b, cfg.margin, w, cfg.entropy)
            l_p, l_s = o["l_p"], o["l_s"]
            warm = epoch < cfg.warmup_epochs
            lr = nn.lr_at(sched, step)
            if cfg.routing == "separate":
                g_theta = [cfg.lam * g for g in o["theta_s"]]
                g_phi = o["phi_p"]
            else:
                lam = 0.0 if warm else cfg.lam
                g_theta = [a + lam * g for a, g in zip(o["theta_p"], o["theta_s"])]
                g_phi = [a + lam * g for a, g in zip(o["phi_p"], o["phi_s"])]
            if not warm:
                opt_theta.step(sel.params, g_theta, lr * cfg.selector_lr_scale)
            opt_phi.step(pred.params, g_phi, lr)
            step += 1
            sums += [l_p, l_s, final_loss(l_p, l_s, cfg.lam)]
        history.append(dict(zip(("l_p", "l_s", "l_final"), (sums / steps_per_epoch).tolist())))
        bad = bad + 1 if history[-1]["l_final"] > 10 * history[0]["l_final"] else 0
        if bad >= 20:
            raise RuntimeError(f"fusion training diverged at epoch {epoch}")
    return IafModel(sel, pred, baseline, stats, cfg, history)


# ---------------------------------------------------------------- baselines


@dataclass
class LinearFuser:
    weights: np.ndarray  # w1, w2, w0

    @classmethod
    def fit(cls, rows: np.ndarray, labels) -> LinearFuser:
        a = np.column_stack([rows, np.ones(len(rows))])
        w, *_ = np.linalg.lstsq(a, np.asarray(labels, dtype=np.float64), rcond=None)
        return cls(w)

    def __call__(self, rows):
        return rows @ self.weights[:2] + self.weights[2]


def baseline_fuse(x1, x2, strategy: str, stats: NormStats | None = None, linear: LinearFuser | None = None) -> np.ndarray:
    """Elementwise max / sum / fitted linear combination of the two channels.

    With ``stats`` the channels are z-normalised first.
    """
    x1 = np.asarray(x1, dtype=np.float64).ravel()
    x2 = np.asarray(x2, dtype=np.float64).ravel()
    if x1.shape != x2.shape:
        raise ValueError("score maps differ in length")
    rows = normalize_scores(x1, x2, stats) if stats is not None else np.column_stack([x1, x2])
    if strategy == "max":
        return rows.max(axis=1)
    if strategy == "add":
        return rows.sum(axis=1)
    if strategy == "linear":
        if linear is None:
            raise ValueError("linear fusion needs fitted weights")
        return linear(rows)
    raise ValueError(f"unknown fusion strategy {strategy!r}")
