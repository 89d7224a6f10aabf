"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Runtime bounds are measured inside each test and are part of the verdict.
"""
import hashlib
import json
import math
import time

import numpy as np
import yaml

from symfuse.cli import main, synthetic_frames
from symfuse.config import load_config
from symfuse.continual import TrainData, run_continual, run_offline
from symfuse.dataset import build_schedule
from symfuse.diffcore import Tensor
from symfuse.geometry import PointCloud, ProjectionConfig, project
from symfuse.gradcheck import run_all
from symfuse.losses import inpaint_labels, kd_composite
from symfuse.metrics import SETTINGS, ConfusionMatrix, iou, modality_table
from symfuse.network import (
    BRANCHES,
    ModalityAvailability,
    ModelConfig,
    PredictionPair,
    SymmetricFusionNet,
    fuse,
)

from conftest import make_frame, record_criterion


def _probs(rng, c, h, w):
    z = np.exp(rng.normal(size=(c, h, w)) * 2)
    return z / z.sum(axis=0, keepdims=True)


def _pair(rng, c, h, w):
    return PredictionPair(Tensor(_probs(rng, c, h, w)), Tensor(_probs(rng, c, h, w)))


def test_criterion_01_kd_algebra():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        teacher, student = _pair(rng, 3, 4, 4), _pair(rng, 4, 4, 4)
        v = {k: kd_composite(k, teacher, student).item() for k in ("same", "img", "pcd", "cross")}
        worst = max(worst, abs(v["cross"] - (v["img"] + v["pcd"] - v["same"])))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 10
    record_criterion(1, "KD algebra", ok, f"max |cross-(img+pcd-same)| = {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_gradients():
    start = time.perf_counter()
    results = run_all(seed=0)
    elapsed = time.perf_counter() - start
    names = {r.name.split(":")[0] for r in results}
    covered = {"seg_ce", "feature_align_level0", "kd_same_lidar_student", "kd_img_lidar_student",
               "kd_pcd_color_student", "kd_cross_color_student", "network"} <= names
    worst = max(results, key=lambda r: r.error)
    ok = covered and worst.error < 1e-4 and elapsed < 300
    record_criterion(2, "gradient correctness", ok,
                     f"{len(results)} checks, max rel. error {worst.error:.2e} ({worst.name}), "
                     f"{elapsed:.1f}s")
    assert ok


def test_criterion_03_fusion_boundaries():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    exact = True
    for _ in range(200):
        shape = tuple(rng.integers(1, 6, size=3))
        a = Tensor(rng.normal(size=shape) * 10 ** rng.uniform(-3, 3))
        b = Tensor(rng.normal(size=shape) * 10 ** rng.uniform(-3, 3))
        exact &= np.array_equal(fuse(a, b, 1.0).data, a.data)
        exact &= np.array_equal(fuse(a, b, 0.0).data, b.data)
    invariant = True
    model = SymmetricFusionNet(ModelConfig(widths=(4, 8, 8, 8)), (1, 2, 3))
    for _ in range(5):
        xc, xl = rng.normal(size=(3, 32, 32)), rng.normal(size=(5, 32, 32))
        for avail, perturb in ((ModalityAvailability(True, False), lambda c, l: (c, l * 37 + 5)),
                               (ModalityAvailability(False, True), lambda c, l: (rng.normal(size=c.shape), l))):
            base, _, _ = model.forward_arrays(xc, xl, avail)
            moved, _, _ = model.forward_arrays(*perturb(xc, xl), avail)
            for b in BRANCHES:
                invariant &= np.array_equal(base.branch(b).data, moved.branch(b).data)
    elapsed = time.perf_counter() - start
    ok = exact and invariant and elapsed < 60
    record_criterion(3, "fusion boundaries", ok,
                     f"bit-exact r in {{0,1}}: {exact}, missing-modality invariance: {invariant}, "
                     f"{elapsed:.1f}s")
    assert ok


def _replay(cloud, cfg):
    best = {}
    for i, (x, y, z) in enumerate(cloud.points):
        if z < cfg.near:
            continue
        u, v = math.floor(cfg.fx * x / z + cfg.cx), math.floor(cfg.fy * y / z + cfg.cy)
        if 0 <= u < cfg.width and 0 <= v < cfg.height:
            d = math.sqrt(x * x + y * y + z * z)
            if (v, u) not in best or d < best[(v, u)][0]:
                best[(v, u)] = (d, i)
    return best


def test_criterion_04_projection():
    rng = np.random.default_rng(4)
    cfg = ProjectionConfig.centered(24, 32, 12.0)
    start = time.perf_counter()
    worst_d, matches = 0.0, 0
    for _ in range(100):
        n = int(rng.integers(1, 400))
        pts = np.column_stack([rng.uniform(-8, 8, n), rng.uniform(-6, 6, n), rng.uniform(-3, 15, n)])
        cloud = PointCloud(pts, rng.random(n), rng.integers(1, 6, n))
        frame = project(cloud, cfg, np.zeros((24, 32, 3)))
        v = frame.valid_mask
        d, xyz = frame.lidar[..., 0], frame.lidar[..., 1:4]
        if v.any():
            worst_d = max(worst_d, float(np.abs(d[v] - np.sqrt((xyz[v] ** 2).sum(-1))).max()))
        best = _replay(cloud, cfg)
        same = set(zip(*np.nonzero(v))) == set(best) and all(
            frame.labels[p] == cloud.labels[i] and frame.lidar[p][0] == dd for p, (dd, i) in best.items())
        matches += same
    elapsed = time.perf_counter() - start
    ok = worst_d < 1e-6 and matches == 100 and elapsed < 60
    record_criterion(4, "projection consistency", ok,
                     f"max d error {worst_d:.1e}, {matches}/100 clouds match replay, {elapsed:.1f}s")
    assert ok


def test_criterion_05_schedules():
    start = time.perf_counter()
    expected = {"offline": 1, "11-8": 2, "6-5-8": 3, "11-1": 9, "6-1": 14}
    got = {p: build_schedule(p, 19) for p in expected}
    counts = {p: s.step_count for p, s in got.items()}
    sums = all(sum(s.sizes) == 19 for s in got.values())
    elapsed = time.perf_counter() - start
    ok = counts == expected and sums and elapsed < 1
    record_criterion(5, "schedule fidelity", ok, f"step counts {counts}, {elapsed * 1000:.1f}ms")
    assert ok


def _inpaint_oracle(labels, valid, color, lidar):
    avg = (color + lidar) / 2
    out = labels.copy()
    for i in range(labels.shape[0]):
        for j in range(labels.shape[1]):
            if labels[i, j] == 0 and valid[i, j]:
                out[i, j] = int(np.argmax(avg[:, i, j])) + 1
    return out


def test_criterion_06_inpainting():
    rng = np.random.default_rng(6)
    start = time.perf_counter()
    failures = 0
    for _ in range(200):
        h, w = (int(x) for x in rng.integers(2, 20, size=2))
        frame = make_frame(rng, h, w, num_classes=5, valid_fraction=rng.random(),
                           unlabeled_fraction=rng.random())
        teacher = _pair(rng, 4, h, w)
        out = inpaint_labels(frame, teacher).labels
        labelled = frame.labels != 0
        ok = (np.array_equal(out[labelled], frame.labels[labelled])
              and not out[~frame.valid_mask].any()
              and np.array_equal(out, _inpaint_oracle(frame.labels, frame.valid_mask,
                                                      teacher.color_probs.data,
                                                      teacher.lidar_probs.data)))
        failures += not ok
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 60
    record_criterion(6, "inpainting contract", ok, f"{200 - failures}/200 frames exact, {elapsed:.1f}s")
    assert ok


def test_criterion_07_fail_safe_protocol():
    cfg = load_config(overrides={"seed": 0})
    assert cfg.num_classes == 4 and cfg.tree["training"]["iterations"] <= 1000
    start = time.perf_counter()
    train, held_out = synthetic_frames(cfg)
    untrained = SymmetricFusionNet(cfg.model_config(), tuple(range(1, 5)))
    baseline = modality_table(untrained, held_out, 4)
    model, _ = run_offline(cfg.plan(), TrainData(train, held_out, 4), cfg.model_config())
    table = modality_table(model, held_out, 4)
    elapsed = time.perf_counter() - start
    e = table.entries
    finite = all(math.isfinite(v) for v in e.values())
    dominant = all(e[("both", b)] >= e[(s, b)] for b in BRANCHES for s in ("rgb", "lidar"))
    graceful = all(e[(s, b)] > 1.5 * baseline.entries[(s, b)] for b in BRANCHES for s in ("rgb", "lidar"))
    ok = finite and dominant and graceful and elapsed < 900
    cells = ", ".join(f"{s}/{b} {e[(s, b)]:.3f} (untrained {baseline.entries[(s, b)]:.3f})"
                      for s in SETTINGS for b in BRANCHES)
    record_criterion(7, "fail-safe protocol", ok,
                     f"finite {finite}, both-dominant {dominant}, >1.5x untrained {graceful}; "
                     f"{cells}; {elapsed:.0f}s")
    assert ok


def test_criterion_08_forgetting():
    cfg = load_config(overrides={"seed": 0, "continual": {"preset": "2-1-1"}})
    train, held_out = synthetic_frames(cfg)
    data = TrainData(train, held_out, 4)
    old = cfg.schedule().steps[0]
    last = cfg.schedule().step_count - 1
    start = time.perf_counter()

    def final_old(kd, inpainting):
        plan = load_config(overrides={"seed": 0, "continual": {
            "preset": "2-1-1", "kd": kd, "inpainting": inpainting}}).plan()
        _, rep = run_continual(plan, data, cfg.model_config())
        return {b: rep.step_miou(last, b, old) for b in BRANCHES}

    baseline = final_old("none", False)
    results = {v: final_old(v, True) for v in ("same", "img", "pcd", "cross")}
    elapsed = time.perf_counter() - start
    beats = {v: all(r[b] > baseline[b] for b in BRANCHES) for v, r in results.items()}
    ok = all(beats.values()) and elapsed < 1800
    detail = ", ".join(f"{v} {r['color']:.3f}/{r['lidar']:.3f}" for v, r in results.items())
    record_criterion(8, "forgetting mitigation", ok,
                     f"final old-class mIoU color/lidar: no-KD {baseline['color']:.3f}/"
                     f"{baseline['lidar']:.3f}, {detail}; {elapsed:.0f}s")
    assert ok


def test_criterion_09_metrics():
    start = time.perf_counter()
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[5, 1], [2, 4]]
    per_class, miou = iou(cm)
    hand = (abs(per_class[0] - 0.625) < 1e-4 and abs(per_class[1] - 0.5714) < 1e-4
            and abs(miou - 0.5982) < 1e-4)
    rng = np.random.default_rng(9)
    exact = True
    for _ in range(50):
        frame = make_frame(rng, 12, 14, num_classes=3)
        pred = rng.integers(1, 4, size=(12, 14))
        oracle = np.zeros((3, 3), dtype=np.int64)
        for i in range(12):
            for j in range(14):
                t = frame.labels[i, j]
                if frame.valid_mask[i, j] and t:
                    oracle[t - 1, pred[i, j] - 1] += 1
        exact &= np.array_equal(ConfusionMatrix(3).accumulate(pred, frame).counts, oracle)
    elapsed = time.perf_counter() - start
    ok = hand and exact and elapsed < 60
    record_criterion(9, "metrics oracle", ok,
                     f"IoU {per_class[0]:.4f}/{per_class[1]:.4f}, mIoU {miou:.4f}; "
                     f"recounts exact {exact}; {elapsed:.1f}s")
    assert ok


def _hashes(directory):
    return {p.relative_to(directory).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(tmp_path):
    tree = {
        "seed": 7,
        "dataset": {"dir": "data", "train_frames": 8, "eval_frames": 4,
                    "synthetic": {"height": 16, "width": 16, "density": 128, "focal": 16.0}},
        "model": {"widths": [4, 4, 8, 8]},
        "training": {"iterations": 40, "warmup": 5, "incremental_iterations": 10},
        "continual": {"preset": "2-1-1", "kd": "cross"},
    }
    start = time.perf_counter()
    runs = []
    for name in ("first", "second"):
        root = tmp_path / name
        root.mkdir()
        (root / "run.yaml").write_text(yaml.safe_dump(dict(tree, output_dir="out")))
        cfg = ["--config", str(root / "run.yaml")]
        codes = [main(["generate-data"] + cfg), main(["train"] + cfg), main(["evaluate"] + cfg),
                 main(["evaluate", "--modality", "lidar"] + cfg), main(["gradcheck"] + cfg),
                 main(["report"] + cfg)]
        runs.append((codes, _hashes(root)))
    elapsed = time.perf_counter() - start
    (codes_a, files_a), (codes_b, files_b) = runs
    manifests = [json.loads((tmp_path / "first" / f).read_text())
                 for f in ("out/manifest.json", "data/manifest.json", "out/gradcheck.json")]
    ok = (codes_a == codes_b == [0] * 6 and files_a == files_b and len(files_a) >= 17
          and len({m["config_digest"] for m in manifests}) == 1)
    record_criterion(10, "determinism", ok,
                     f"{len(files_a)} files (data, checkpoints, CSV, JSON) across 5 subcommands byte-identical: "
                     f"{files_a == files_b}, exit codes {codes_a}; {elapsed:.1f}s")
    assert ok
