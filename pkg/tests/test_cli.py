import json
import shutil

import numpy as np
import pytest

from pcad import cli
from pcad.geometry import load_cloud

TINY = {
    "experts": {
        "depth_resolution": [32, 32],
        "max_retained": 16,
        "sdf": {"n_patches": 8, "patch_size": 32, "latent_dim": 8, "encoder_hidden": [16], "decoder_hidden": [16], "epochs": 3},
    },
    "synthesis": {"n_samples": 10},
    "iaf": {"epochs": 5},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    data = root / "data"
    assert run("make-benchmark", "--out", data, "--n-train", 3, "--n-test", 6, "--n-points", 400) == 0
    art = root / "art"
    common = ("--config", cfg, "--out", art, "--train-dir", data / "train", "--test-dir", data / "test")
    for cmd in ("train-experts", "synthesize", "train-iaf"):
        assert run(cmd, *common) == 0
    return root, cfg, data, art, common


def test_train_experts_artifacts(pipeline):
    _, _, _, art, _ = pipeline
    for name in ("sdf.json", "bank.bin", "bank.bin.json", "train_experts_log.csv"):
        assert (art / name).exists()
    ckpt = json.loads((art / "sdf.json").read_text())
    side = json.loads((art / "bank.bin.json").read_text())
    assert ckpt["config_hash"] == side["config_hash"]
    assert len(ckpt["history"]) == 3


def test_rerun_is_bitwise_identical(pipeline, tmp_path):
    _, cfg, data, art, _ = pipeline
    other = tmp_path / "again"
    common = ("--config", cfg, "--out", other, "--train-dir", data / "train")
    for cmd in ("train-experts", "synthesize", "train-iaf"):
        assert run(cmd, *common) == 0
    for name in ("sdf.json", "bank.bin", "bank.bin.json", "iaf.json", "synthetic/manifest.json", "synthetic/sample_0003.txt"):
        assert (other / name).read_bytes() == (art / name).read_bytes(), name


def test_empty_training_set(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run("train-experts", "--out", tmp_path / "o", "--train-dir", tmp_path / "empty") == 2
    assert "empty training set" in capsys.readouterr().err


def test_missing_normals_without_estimation(tmp_path, capsys):
    d = tmp_path / "raw"
    d.mkdir()
    pts = np.random.default_rng(0).normal(size=(50, 3)) + [0, 0, 5]
    np.savetxt(d / "a.txt", pts)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"experts": {**TINY["experts"], "estimate_normals": False}}))
    assert run("train-experts", "--config", cfg, "--out", tmp_path / "o", "--train-dir", d) == 2
    assert "no normals" in capsys.readouterr().err


def test_synthesize_manifest(pipeline):
    _, _, _, art, _ = pipeline
    d = art / "synthetic"
    manifest = json.loads((d / "manifest.json").read_text())
    assert len(manifest["samples"]) == 10
    assert len(list(d.glob("sample_*.txt"))) == 10
    hist = {"0": 0, "1": 0}
    for e in manifest["samples"]:
        lab = load_cloud(d / e["file"]).labels
        hist["1"] += int(lab.sum())
        hist["0"] += int((lab == 0).sum())
        assert e["anomalous_points"] == int(lab.sum())
    assert hist == manifest["label_histogram"]


def test_train_iaf_bundle_echoes_defaults(pipeline):
    _, _, _, art, _ = pipeline
    bundle = json.loads((art / "iaf.json").read_text())
    c = bundle["model"]["config"]
    assert (c["margin"], c["lam"], c["batch"]) == (0.1, 1.0, 32)
    assert cli.default_config()["iaf"]["epochs"] == 150
    assert bundle["model"]["b"] == min(bundle["model"]["c_3d"], bundle["model"]["c_2d"])
    rows = (art / "train_iaf_log.csv").read_text().splitlines()
    assert rows[0] == "epoch,l_p,l_s,l_final" and len(rows) == 6


def test_hash_mismatch_refused(pipeline, capsys):
    _, _, data, art, common = pipeline
    assert run("score", *common, "--seed", 7, data / "test" / "sphere_000.txt") == 2
    assert "config hash mismatch" in capsys.readouterr().err


def test_score_outputs(pipeline, tmp_path, capsys):
    _, _, data, _, common = pipeline
    cloud = data / "test" / "sphere_001.txt"
    capsys.readouterr()
    assert run("score", *common, cloud) == 0
    res = json.loads(capsys.readouterr().out)
    m = len(load_cloud(cloud))
    assert len(res["point_scores"]) == len(res["expert_scores"]["x1"]) == len(res["expert_scores"]["x2"]) == m
    assert 0 <= res["object_score"] <= 1
    assert not list(tmp_path.glob("*.svg"))
    svg = tmp_path / "map.svg"
    out_json = tmp_path / "s.json"
    assert run("score", *common, cloud, "--svg", svg, "--json", out_json) == 0
    text = svg.read_text()
    assert text.startswith("<svg") and text.count("<circle") == m
    assert json.loads(out_json.read_text()) == res


def test_training_cloud_scores_below_synthetic_anomalies(pipeline, capsys):
    _, _, data, art, common = pipeline
    train_cloud = sorted((data / "train").iterdir())[0]
    capsys.readouterr()
    run("score", *common, train_cloud)
    normal = json.loads(capsys.readouterr().out)["object_score"]
    manifest = json.loads((art / "synthetic" / "manifest.json").read_text())
    anomalous = []
    for e in manifest["samples"]:
        if e["anomalous_points"]:
            run("score", *common, art / "synthetic" / e["file"])
            anomalous.append(json.loads(capsys.readouterr().out)["object_score"])
    assert normal < np.median(anomalous)


def test_eval_all_fusions(pipeline, capsys):
    _, _, _, art, common = pipeline
    capsys.readouterr()
    assert run("eval", *common, "--all-fusions") == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["category"] for r in rows] == ["iaf", "max", "add", "linear"]
    header = (art / "report.csv").read_text().splitlines()[0].split(",")
    assert header == ["category", "sample_count", "o_auroc", "p_auroc", "aupro_30", "aupro_20", "aupro_10",
                      "aupro_07", "aupro_05", "aupro_03", "aupro_01"]
    assert json.loads((art / "report.json").read_text()) == rows
    assert all(0 <= r["p_auroc"] <= 1 for r in rows)


def test_eval_single_class_exit_3(pipeline, tmp_path, capsys):
    _, cfg, data, art, _ = pipeline
    normal = tmp_path / "normal"
    normal.mkdir()
    for p in sorted((data / "test").iterdir()):
        if not load_cloud(p).labels.any():
            shutil.copy(p, normal / p.name)
    assert any(normal.iterdir())
    out = tmp_path / "art"
    shutil.copytree(art, out)
    capsys.readouterr()
    assert run("eval", "--config", cfg, "--out", out, "--test-dir", normal, "--train-dir", data / "train") == 3
    rows = json.loads(capsys.readouterr().out)
    assert "undefined AUROC" in rows[0]["error"]


def test_missing_artifact(tmp_path, pipeline, capsys):
    _, cfg, data, _, _ = pipeline
    assert run("train-iaf", "--config", cfg, "--out", tmp_path, "--train-dir", data / "train") == 2
    assert "missing artifact" in capsys.readouterr().err


def test_config_env_fallback_and_errors(pipeline, monkeypatch, tmp_path):
    _, cfg, data, _, _ = pipeline
    monkeypatch.setenv("PCAD_CONFIG", str(cfg))
    loaded = cli.load_config(None)
    assert loaded["synthesis"]["n_samples"] == 10
    assert cli.load_config(None, {"seed": 4})["seed"] == 4
    assert cli.config_hash(loaded) == cli.config_hash(cli.load_config(None, {"train_dir": "elsewhere"}))
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"iaf": {"margin": -1}}))
    assert run("synthesize", "--config", bad, "--out", tmp_path) == 2
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert run("synthesize", "--config", bad, "--out", tmp_path) == 2
    assert run("synthesize", "--config", tmp_path / "nope.json", "--out", tmp_path) == 2


def test_internal_error_exit_1(monkeypatch, pipeline, tmp_path):
    _, cfg, data, _, _ = pipeline

    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "generate_dataset", boom)
    assert run("synthesize", "--config", cfg, "--out", tmp_path, "--train-dir", data / "train") == 1


def test_json_roundtrip():
    cfg = cli.default_config()
    assert json.loads(json.dumps(cfg)) == cfg
    assert cli.load_config(None) == cfg
