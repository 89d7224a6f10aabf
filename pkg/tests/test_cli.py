import hashlib
import json

import numpy as np
import pytest
import yaml
from PIL import Image

from symfuse.cli import main
from symfuse.config import DEFAULTS, ConfigError, load_config
from symfuse.geometry import write_labels, write_scan

SMALL = {
    "seed": 3,
    "dataset": {
        "train_frames": 6,
        "eval_frames": 3,
        "synthetic": {"height": 16, "width": 16, "density": 128, "focal": 16.0},
    },
    "model": {"widths": [4, 4, 6, 6]},
    "training": {"iterations": 20, "warmup": 4, "incremental_iterations": 8},
}


def write_config(tmp_path, tree=SMALL, name="run.yaml", out="out"):
    tree = json.loads(json.dumps(tree))
    tree.setdefault("output_dir", out)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(tree))
    return path


def digests(directory):
    return {p.relative_to(directory).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.rglob("*")) if p.is_file()}


# configuration


def test_defaults_load_and_validate():
    cfg = load_config()
    assert cfg.tree == DEFAULTS
    assert cfg.plan().schedule.step_count == 1
    assert len(cfg.digest) == 64


def test_digest_ignores_output_dir(tmp_path):
    a = load_config(write_config(tmp_path, out="a"))
    b = load_config(write_config(tmp_path, out="b", name="b.yaml"))
    assert a.digest == b.digest
    c = load_config(write_config(tmp_path, name="c.yaml"), {"seed": 4})
    assert c.digest != a.digest


def test_overrides_and_kd_none(tmp_path):
    cfg = load_config(write_config(tmp_path), {"continual": {"preset": "2-1-1", "kd": "none"}})
    plan = cfg.plan()
    assert plan.kd_variant is None
    assert plan.schedule.sizes == [2, 1, 1]


@pytest.mark.parametrize("tree", [
    {"bogus": 1},
    {"model": {"r": 1.5}},
    {"continual": {"kd": "both"}},
    {"continual": {"preset": "11-8"}},
    {"dataset": {"num_classes": 1}},
    {"dataset": {"source": "external"}},
    {"training": {"incremental_lr": [0.1]}},
    {"continual": {"split_file": "missing.txt"}},
])
def test_invalid_configs_rejected(tmp_path, tree):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, tree))


def test_split_file_relative_to_config(tmp_path):
    (tmp_path / "split.txt").write_text("4,3\n2\n1\n")
    cfg = load_config(write_config(tmp_path, {"continual": {"split_file": "split.txt"}}))
    assert cfg.schedule().steps == ((4, 3), (2,), (1,))


# command line


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["train", "--config", str(write_config(tmp_path, {"bogus": 1}))]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert "config error" in capsys.readouterr().err


def test_generate_data_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    da, db = digests(tmp_path / "a"), digests(tmp_path / "b")
    assert da == db and "data/manifest.json" in da
    manifest = json.loads((tmp_path / "a/data/manifest.json").read_text())
    assert manifest["config_digest"] == load_config(cfg).digest
    assert manifest["frames"] == {"train": 6, "eval": 3}


def test_train_from_generated_data(tmp_path):
    tree = json.loads(json.dumps(SMALL))
    tree["dataset"]["dir"] = "data"
    cfg = write_config(tmp_path, tree)
    assert main(["generate-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    (tmp_path / "data/train_labels.npy").write_bytes(b"corrupt")
    assert main(["train", "--config", str(cfg)]) == 3


def test_full_pipeline_is_byte_identical(tmp_path):
    cfg = str(write_config(tmp_path))
    for out in ("r1", "r2"):
        base = ["--config", cfg, "--out", str(tmp_path / out), "--preset", "2-1-1", "--kd", "cross"]
        assert main(["train"] + base) == 0
        assert main(["evaluate"] + base) == 0
        assert main(["evaluate", "--modality", "rgb"] + base) == 0
        assert main(["report"] + base) == 0
    d1, d2 = digests(tmp_path / "r1"), digests(tmp_path / "r2")
    assert d1 == d2
    assert {"report.csv", "manifest.json", "modality_table.csv", "eval_rgb.csv", "per_class.csv",
            "checkpoints/step0.ckpt", "checkpoints/step2.ckpt"} <= set(d1)
    digest = load_config(cfg, {"continual": {"preset": "2-1-1", "kd": "cross"}}).digest
    for name in ("report.csv", "modality_table.csv", "eval_rgb.csv", "per_class.csv"):
        assert (tmp_path / "r1" / name).read_text().startswith(f"# config_digest={digest}\n")
    assert json.loads((tmp_path / "r1/manifest.json").read_text())["config_digest"] == digest


def test_checkpoint_digest_mismatch_rejected(tmp_path, capsys):
    cfg = str(write_config(tmp_path))
    out = str(tmp_path / "run")
    assert main(["train", "--config", cfg, "--out", out]) == 0
    assert main(["evaluate", "--config", cfg, "--out", out]) == 0
    assert main(["evaluate", "--config", cfg, "--out", out, "--kd", "pcd"]) == 2
    assert "digest" in capsys.readouterr().err
    assert main(["report", "--config", cfg, "--out", out, "--kd", "pcd"]) == 2


def test_oracle_evaluation_is_perfect(tmp_path):
    cfg = str(write_config(tmp_path))
    out = tmp_path / "run"
    assert main(["evaluate", "--config", cfg, "--out", str(out), "--modality", "both", "--oracle"]) == 0
    lines = (out / "oracle_eval_both.csv").read_text().splitlines()
    means = [ln for ln in lines if ",mean," in ln]
    assert means == ["color,mean,1.000000", "lidar,mean,1.000000"]


def test_divergence_exit_code(tmp_path):
    tree = json.loads(json.dumps(SMALL))
    tree["training"].update({"peak_lr": 1e9, "adam_peak_lr": 1e9, "warmup": 0, "iterations": 30})
    assert main(["train", "--config", str(write_config(tmp_path, tree))]) == 4


def test_gradcheck_command(tmp_path, capsys):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--out", str(out)]) == 0
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["failed"] == []
    assert report["max_relative_error"] < 1e-4
    assert "PASS" in capsys.readouterr().out


def test_external_source(tmp_path, rng):
    h, w = 16, 16
    records = []
    for i in range(3):
        n = 150
        pts = np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(2, 6, n)])
        write_scan(tmp_path / f"{i}.bin", pts, rng.random(n))
        write_labels(tmp_path / f"{i}.label", rng.choice([40, 50, 70, 10], size=n))
        Image.fromarray((rng.random((h, w, 3)) * 255).astype(np.uint8)).save(tmp_path / f"{i}.png")
        records.append({"scan": f"{i}.bin", "labels": f"{i}.label", "image": f"{i}.png"})
    (tmp_path / "map.txt").write_text("40: 1\n50: 2\n70: 3\n10: 4\n")
    tree = json.loads(json.dumps(SMALL))
    tree["dataset"].update({
        "source": "external",
        "external": {"train": records[:2], "eval": records[2:], "label_map": "map.txt",
                     "intrinsics": {"fx": 8.0, "fy": 8.0, "cx": 8.0, "cy": 8.0,
                                    "height": h, "width": w}},
    })
    cfg = str(write_config(tmp_path, tree))
    assert main(["train", "--config", cfg]) == 0
    assert main(["evaluate", "--config", cfg, "--modality", "lidar"]) == 0
    (tmp_path / "1.label").write_bytes(b"\0" * 10)
    assert main(["train", "--config", cfg]) == 3
