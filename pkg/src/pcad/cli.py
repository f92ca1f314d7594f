"""Command-line pipeline: train experts, synthesise D', train fusion, score and evaluate.

Every command reads one JSON config (``--config`` or $PCAD_CONFIG), lets
flags override it and writes its artifacts under ``--out``. Artifacts carry a
hash of the resolved config; a later stage refuses artifacts whose hash
differs from its own.

Exit codes: 0 ok, 1 internal error, 2 input or artifact error, 3 metric undefined.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .experts import ExpertConfig, Experts, score_cloud, train_experts
from .fusion import (
    FusionSample,
    IafConfig,
    IafModel,
    LinearFuser,
    baseline_fuse,
    fuse_object_scores,
    fuse_point_scores,
    normalize_scores,
    train_iaf,
)
from .geometry import PointCloud, estimate_normals, load_cloud, save_cloud
from .memory import DualMemoryBank
from .metrics import DEFAULT_LIMITS, MetricUndefined, aupro_key, evaluate_all, gt_regions, write_reports
from .sdf import SdfModel
from .shapes import SHAPES, make_clouds
from .synthesis import SynthesisConfig, generate_dataset

logger = logging.getLogger("pcad")

FUSIONS = ("iaf", "max", "add", "linear")
SDF_FILE = "sdf.json"
BANK_FILE = "bank.bin"
IAF_FILE = "iaf.json"
MANIFEST = "manifest.json"
SYNTH_DIR = "synthetic"
CLOUD_SUFFIXES = (".txt", ".xyz")


class InputError(Exception):
    """Bad input or missing/mismatched artifact (exit code 2)."""


# ---------------------------------------------------------------- config


def default_config() -> dict:
    iaf = asdict(IafConfig())
    iaf["hidden"] = list(iaf["hidden"])
    synth = SynthesisConfig()
    return {
        "train_dir": None,
        "test_dir": None,
        "synthesis_source_dir": None,  # defaults to train_dir
        "seed": 0,
        "experts": ExpertConfig().to_dict(),
        "synthesis": {**_plain(asdict(synth)), "n_samples": 64},
        "iaf": iaf,
        "eval": {"fusion": "iaf", "limits": list(DEFAULT_LIMITS)},
    }


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if k not in base:
            raise InputError(f"unknown config key {k!r}")
        out[k] = _merge(base[k], v) if isinstance(base[k], dict) and isinstance(v, dict) else v
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    """Defaults <- JSON file (``path`` or $PCAD_CONFIG) <- flag overrides."""
    cfg = default_config()
    path = path or os.environ.get("PCAD_CONFIG")
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise InputError(f"config {path}: {e}") from None
    cfg = _merge(cfg, {k: v for k, v in (overrides or {}).items() if v is not None})
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        expert_config(cfg)
        iaf_config(cfg)
        synthesis_config(cfg)
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid config: {e}") from None
    if cfg["eval"]["fusion"] not in FUSIONS:
        raise InputError(f"unknown fusion {cfg['eval']['fusion']!r}")
    if not all(0 < x <= 1 for x in cfg["eval"]["limits"]):
        raise InputError("integration limits must lie in (0, 1]")
    if int(cfg["synthesis"]["n_samples"]) < 1:
        raise InputError("synthesis.n_samples must be >= 1")


def config_hash(cfg: dict) -> str:
    """Hash of everything but the data paths."""
    core = {k: v for k, v in cfg.items() if not k.endswith("_dir")}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()[:16]


def expert_config(cfg: dict) -> ExpertConfig:
    e = dict(cfg["experts"])
    e["sdf"] = {**e["sdf"], "seed": cfg["seed"]}
    return ExpertConfig(**e)


def iaf_config(cfg: dict) -> IafConfig:
    return IafConfig(**{**cfg["iaf"], "seed": cfg["seed"]})


def synthesis_config(cfg: dict) -> SynthesisConfig:
    return SynthesisConfig(**{k: v for k, v in cfg["synthesis"].items() if k != "n_samples"})


# ---------------------------------------------------------------- io helpers


def cloud_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix in CLOUD_SUFFIXES)


def _read_cloud(path) -> PointCloud:
    try:
        return load_cloud(path)
    except (OSError, ValueError) as e:
        raise InputError(f"{path}: {e}") from None


def _dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"missing artifact: {path}") from None


def _check_hash(found, expected, what) -> None:
    if found != expected:
        raise InputError(f"config hash mismatch for {what}: artifact {found}, current config {expected}")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def load_experts(out: Path, cfg: dict) -> Experts:
    h = config_hash(cfg)
    ckpt = _load_json(out / SDF_FILE)
    _check_hash(ckpt.get("config_hash"), h, SDF_FILE)
    if not (out / BANK_FILE).exists():
        raise InputError(f"missing artifact: {out / BANK_FILE}")
    try:
        bank, side = DualMemoryBank.load(out / BANK_FILE)
    except (OSError, ValueError) as e:
        raise InputError(f"{out / BANK_FILE}: {e}") from None
    _check_hash(side.get("config_hash"), h, BANK_FILE)
    return Experts(SdfModel.from_dict(ckpt["model"]), bank, expert_config(cfg), ckpt.get("history", []))


def load_bundle(out: Path, cfg: dict) -> tuple[IafModel, LinearFuser]:
    d = _load_json(out / IAF_FILE)
    _check_hash(d.get("config_hash"), config_hash(cfg), IAF_FILE)
    return IafModel.from_dict(d["model"]), LinearFuser(np.asarray(d["linear"], dtype=np.float64))


# ---------------------------------------------------------------- commands


def cmd_train_experts(cfg: dict, out: Path) -> dict:
    if not cfg["train_dir"]:
        raise InputError("train_dir is not set")
    files = cloud_files(cfg["train_dir"])
    if not files:
        raise InputError("empty training set")
    clouds = [_read_cloud(p) for p in files]
    try:
        experts = train_experts(clouds, expert_config(cfg))
    except ValueError as e:
        raise InputError(str(e)) from None
    h = config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / SDF_FILE, {"config_hash": h, "model": experts.model.to_dict(), "history": experts.history})
    experts.bank.save(out / BANK_FILE, {"config_hash": h, "train_files": [p.name for p in files]})
    _write_csv(out / "train_experts_log.csv", ["epoch", "sdf_loss"], [[i, repr(v)] for i, v in enumerate(experts.history)])
    return {"config_hash": h, "n_train": len(files), "bank3d": len(experts.bank.bank3d), "bank2d": len(experts.bank.bank2d)}


def cmd_synthesize(cfg: dict, out: Path) -> dict:
    src = cfg["synthesis_source_dir"] or cfg["train_dir"]
    if not src:
        raise InputError("neither synthesis_source_dir nor train_dir is set")
    files = cloud_files(src)
    clouds = [_read_cloud(p) for p in files]
    try:
        samples = generate_dataset(clouds, int(cfg["synthesis"]["n_samples"]), cfg["seed"], synthesis_config(cfg))
    except ValueError as e:
        raise InputError(str(e)) from None
    d = out / SYNTH_DIR
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    hist = {"0": 0, "1": 0}
    for i, s in enumerate(samples):
        name = f"sample_{i:04d}.txt"
        cloud = s.cloud if s.cloud.normals is not None else estimate_normals(s.cloud).cloud
        save_cloud(d / name, cloud, s.labels)
        n1 = int(s.labels.sum())
        hist["1"] += n1
        hist["0"] += len(s.labels) - n1
        entries.append({"file": name, "anomalous_points": n1, "provenance": _plain(s.provenance)})
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "source_files": [p.name for p in files],
        "samples": entries,
        "label_histogram": hist,
    }
    _dump(d / MANIFEST, manifest)
    return {"n_samples": len(samples), "label_histogram": hist}


def _labeled(cloud: PointCloud) -> np.ndarray:
    if cloud.labels is None:
        raise InputError("cloud has no label column")
    return np.asarray(cloud.labels, dtype=np.int64)


def cmd_train_iaf(cfg: dict, out: Path) -> dict:
    experts = load_experts(out, cfg)
    manifest = _load_json(out / SYNTH_DIR / MANIFEST)
    _check_hash(manifest.get("config_hash"), config_hash(cfg), MANIFEST)
    samples = []
    for e in manifest["samples"]:
        cloud = _read_cloud(out / SYNTH_DIR / e["file"])
        sc = score_cloud(experts, cloud)
        samples.append(FusionSample(sc.x1, sc.x2, _labeled(cloud)))
    try:
        model = train_iaf(samples, iaf_config(cfg))
    except ValueError as e:
        raise InputError(str(e)) from None
    rows = normalize_scores(np.concatenate([s.x1 for s in samples]), np.concatenate([s.x2 for s in samples]), model.stats)
    linear = LinearFuser.fit(rows, np.concatenate([s.labels for s in samples]))
    _dump(out / IAF_FILE, {"config_hash": config_hash(cfg), "model": model.to_dict(), "linear": linear.weights.tolist()})
    _write_csv(
        out / "train_iaf_log.csv",
        ["epoch", "l_p", "l_s", "l_final"],
        [[i, repr(h["l_p"]), repr(h["l_s"]), repr(h["l_final"])] for i, h in enumerate(model.history)],
    )
    return {"b": model.baseline.b, "c_3d": model.baseline.c_3d, "c_2d": model.baseline.c_2d, "epochs": len(model.history)}


def fuse(strategy: str, model: IafModel, linear: LinearFuser, x1, x2) -> tuple[np.ndarray, float]:
    """Point map and object score of one cloud under ``strategy``."""
    s1, s2 = float(np.max(x1)), float(np.max(x2))
    if strategy == "iaf":
        return fuse_point_scores(model, x1, x2), fuse_object_scores(model, s1, s2)
    lin = linear if strategy == "linear" else None
    a = baseline_fuse(x1, x2, strategy, model.stats, lin)
    return a, float(baseline_fuse([s1], [s2], strategy, model.stats, lin)[0])


def cmd_score(cfg: dict, out: Path, cloud_path, svg_path=None, fusion: str | None = None) -> dict:
    experts = load_experts(out, cfg)
    model, linear = load_bundle(out, cfg)
    cloud = _read_cloud(cloud_path)
    sc = score_cloud(experts, cloud)
    a, s = fuse(fusion or cfg["eval"]["fusion"], model, linear, sc.x1, sc.x2)
    result = {
        "point_scores": a.tolist(),
        "object_score": s,
        "expert_scores": {"x1": sc.x1.tolist(), "x2": sc.x2.tolist(), "s1": float(sc.x1.max()), "s2": float(sc.x2.max())},
    }
    if svg_path:
        Path(svg_path).write_text(score_svg(sc.cloud, a))
    return result


def cmd_eval(cfg: dict, out: Path, fusions=None) -> tuple[list[dict], int]:
    """Report rows, one per fusion strategy, and the exit code."""
    if not cfg["test_dir"]:
        raise InputError("test_dir is not set")
    experts = load_experts(out, cfg)
    model, linear = load_bundle(out, cfg)
    files = cloud_files(cfg["test_dir"])
    if not files:
        raise InputError("empty test set")
    clouds, labels, scores = [], [], []
    for p in files:
        c = _read_cloud(p)
        labels.append(_labeled(c))
        clouds.append(c)
        scores.append(score_cloud(experts, c))
    regions = [gt_regions(c, y) for c, y in zip(clouds, labels)]
    limits = tuple(cfg["eval"]["limits"])
    rows, code = [], 0
    for strategy in fusions or [cfg["eval"]["fusion"]]:
        fused = [fuse(strategy, model, linear, s.x1, s.x2) for s in scores]
        row = {"category": strategy, "sample_count": len(files)}
        try:
            rep = evaluate_all([f[0] for f in fused], [f[1] for f in fused], labels, regions, limits, [p.name for p in files])
            row.update(rep.row())
        except MetricUndefined as e:
            row.update({k: "" for k in ["o_auroc", "p_auroc"] + [aupro_key(x) for x in limits]})
            row["error"] = str(e)
            code = 3
        rows.append(row)
    write_reports(rows, out / "report.csv", out / "report.json")
    return rows, code


def cmd_make_benchmark(out: Path, shape: str, seed: int, n_train: int, n_test: int, n_points: int) -> dict:
    """Write procedural train clouds and a labelled Cut-Paste test set to disk."""
    if shape not in SHAPES:
        raise InputError(f"unknown shape {shape!r}; choose from {SHAPES}")
    k = SHAPES.index(shape)
    train = make_clouds(shape, n_train, n_points, (seed, k, 0), 0.003)
    pool = make_clouds(shape, max(n_test, 2), n_points, (seed, k, 2), 0.003)
    test = generate_dataset(pool, n_test, seed + 10_000, SynthesisConfig(height_range=(0.1, 0.3)))
    for sub in ("train", "test"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(train):
        save_cloud(out / "train" / f"{shape}_{i:03d}.txt", c)
    for i, s in enumerate(test):
        save_cloud(out / "test" / f"{shape}_{i:03d}.txt", s.cloud, s.labels)
    return {"train_dir": str(out / "train"), "test_dir": str(out / "test")}


# ---------------------------------------------------------------- svg


def _color(v: float) -> str:
    v = min(max(v, 0.0), 1.0)
    return f"#{int(round(255 * v)):02x}00{int(round(255 * (1 - v))):02x}"


def score_svg(cloud: PointCloud, scores, size: int = 400) -> str:
    """Frontal projection (view along +z) with points coloured blue (low) to red (high)."""
    p = cloud.points
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    v = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
    xy = p[:, :2]
    mn = xy.min(axis=0)
    ext = max(float((xy.max(axis=0) - mn).max()), 1e-12)
    uv = (xy - mn) / ext * (size - 20) + 10
    order = np.argsort(-p[:, 2], kind="stable")  # far points first, near points drawn on top
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for i in order:
        parts.append(f'<circle cx="{uv[i, 0]:.2f}" cy="{size - uv[i, 1]:.2f}" r="2" fill="{_color(v[i])}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcad", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config (default: $PCAD_CONFIG)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="pcad_out", help="artifact directory")
        p.add_argument("--train-dir")
        p.add_argument("--test-dir")
        return p

    common(sub.add_parser("train-experts", help="pretrain the SDF expert and build the dual memory bank"))
    common(sub.add_parser("synthesize", help="write the Cut-Paste fusion set D' and its manifest"))
    common(sub.add_parser("train-iaf", help="score D' with both experts and train the fusion networks"))
    p = common(sub.add_parser("score", help="fused scores of one cloud as JSON"))
    p.add_argument("cloud")
    p.add_argument("--svg", help="also render the fused map to this SVG file")
    p.add_argument("--json", help="write the result here instead of stdout")
    p.add_argument("--fusion", choices=FUSIONS)
    p = common(sub.add_parser("eval", help="metrics on a labelled test directory"))
    g = p.add_mutually_exclusive_group()
    g.add_argument("--fusion", choices=FUSIONS)
    g.add_argument("--all-fusions", action="store_true")
    p = common(sub.add_parser("run", help="train-experts, synthesize, train-iaf and eval in sequence"))
    p.add_argument("--all-fusions", action="store_true")
    p = sub.add_parser("make-benchmark", help="write a procedural train/test set for one shape")
    p.add_argument("--out", required=True)
    p.add_argument("--shape", default="sphere", choices=SHAPES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--n-points", type=int, default=1024)
    return ap


def _print(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    if args.command == "make-benchmark":
        _print(cmd_make_benchmark(out, args.shape, args.seed, args.n_train, args.n_test, args.n_points))
        return 0
    cfg = load_config(args.config, {"seed": args.seed, "train_dir": args.train_dir, "test_dir": args.test_dir})
    if args.command == "train-experts":
        _print(cmd_train_experts(cfg, out))
    elif args.command == "synthesize":
        _print(cmd_synthesize(cfg, out))
    elif args.command == "train-iaf":
        _print(cmd_train_iaf(cfg, out))
    elif args.command == "score":
        res = cmd_score(cfg, out, args.cloud, args.svg, args.fusion)
        if args.json:
            _dump(args.json, res)
        else:
            _print(res)
    elif args.command in ("eval", "run"):
        if args.command == "run":
            for step in (cmd_train_experts, cmd_synthesize, cmd_train_iaf):
                logger.info("%s: %s", step.__name__, step(cfg, out))
        fusions = list(FUSIONS) if args.all_fusions else [getattr(args, "fusion", None) or cfg["eval"]["fusion"]]
        rows, code = cmd_eval(cfg, out, fusions)
        _print(rows)
        return code
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MetricUndefined as e:
        print(f"evaluation undefined: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - last-resort guard for the exit code contract
        logger.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
