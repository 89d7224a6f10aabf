import math

import numpy as np
import pytest

from symfuse.continual import (
    SGD,
    Adam,
    DivergenceError,
    PlanError,
    StepPlan,
    TrainData,
    _train_step,
    linear_decay,
    run_continual,
    run_offline,
    step_labels,
    warmup_cosine,
)
from symfuse.dataset import SceneSpec, build_schedule, generate_frames
from symfuse.diffcore import Tensor
from symfuse.network import ModelConfig, SymmetricFusionNet, param_digest, snapshot_teacher

TINY = ModelConfig(widths=(4, 4, 6, 6), seed=0)


@pytest.fixture(scope="module")
def tiny_data():
    spec = SceneSpec(seed=5, height=16, width=16, density=128, focal=16.0)
    return TrainData(generate_frames(spec, 4), generate_frames(spec, 2, offset=100), 4)


def tiny_plan(preset="2-1-1", **kw):
    base = dict(iterations=12, warmup=3, incremental_iterations=6)
    base.update(kw)
    return StepPlan(build_schedule(preset, 4), **base)


# schedules


def test_warmup_cosine_closed_form():
    total, warm, peak = 50, 10, 0.2
    for it in range(total):
        expected = peak * it / warm if it < warm else \
            peak / 2 * (1 + math.cos(math.pi * (it - warm) / (total - warm)))
        assert warmup_cosine(it, total, warm, peak) == pytest.approx(expected, abs=1e-15)
    assert warmup_cosine(0, total, warm, peak) == 0.0
    assert warmup_cosine(warm, total, warm, peak) == pytest.approx(peak)


def test_linear_decay_endpoints():
    lrs = [linear_decay(i, 11, 1e-3, 5e-4) for i in range(11)]
    assert lrs[0] == 1e-3 and lrs[-1] == pytest.approx(5e-4)
    assert np.allclose(np.diff(lrs), -5e-5)


# optimizers


def test_sgd_nesterov_two_steps():
    p = Tensor([1.0], requires_grad=True)
    opt = SGD([p], momentum=0.9, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step(0.1)  # buf = 1, update = g + 0.9 * buf = 1.9
    assert p.data[0] == pytest.approx(1 - 0.19)
    p.grad = np.array([1.0])
    opt.step(0.1)  # buf = 1.9, update = 1 + 0.9 * 1.9 = 2.71
    assert p.data[0] == pytest.approx(1 - 0.19 - 0.271)


def test_weight_decay_applied():
    p = Tensor([2.0], requires_grad=True)
    p.grad = np.array([0.0])
    SGD([p], momentum=0.0, weight_decay=0.5).step(0.1)
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 1.0)


def test_adam_first_step_is_lr_sized():
    p = Tensor([0.0, 0.0], requires_grad=True)
    p.grad = np.array([3.0, -0.01])
    Adam([p], weight_decay=0.0).step(0.01)
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-5)


# plans


def test_plan_validation():
    s = build_schedule("offline", 4)
    with pytest.raises(PlanError):
        StepPlan(s, iterations=0)
    with pytest.raises(PlanError):
        StepPlan(s, iterations=10, warmup=11)
    with pytest.raises(PlanError):
        StepPlan(s, peak_lr=0.0)
    with pytest.raises(PlanError):
        StepPlan(s, kd_variant="both")


def test_no_frames_rejected():
    with pytest.raises(PlanError):
        run_offline(tiny_plan("offline"), TrainData([], [], 4), TINY)


def test_wrong_schedule_kind_rejected(tiny_data):
    with pytest.raises(PlanError):
        run_offline(tiny_plan("2-1-1"), tiny_data, TINY)
    with pytest.raises(PlanError):
        run_continual(tiny_plan("offline"), tiny_data, TINY)
    with pytest.raises(PlanError):
        run_continual(tiny_plan("1-1-1-1"), tiny_data, TINY)


def test_divergence_aborts(tiny_data):
    with pytest.raises(DivergenceError):
        run_offline(tiny_plan("offline", iterations=30, warmup=0, peak_lr=1e9, adam_peak_lr=1e9),
                    tiny_data, TINY)


# runs


def test_offline_deterministic(tiny_data):
    _, a = run_offline(tiny_plan("offline"), tiny_data, TINY)
    _, b = run_offline(tiny_plan("offline"), tiny_data, TINY)
    assert a == b
    assert a.csv_text() == b.csv_text()
    assert len(a.rows) == 2 * 4
    assert len(a.losses) == 1 and len(a.losses[0]) == 12


def test_continual_report_shape(tiny_data):
    models, rep = run_continual(tiny_plan(), tiny_data, TINY)
    assert [m.num_classes for m in models] == [2, 3, 4]
    assert [len(c) for c in rep.losses] == [12, 6, 6]
    assert {(s, b, c) for s, b, c, _ in rep.rows} == {
        (s, b, c) for s in range(3) for b in ("color", "lidar") for c in range(1, 5)}
    assert rep.schedule == [[1, 2], [3], [4]]
    man = rep.manifest()
    assert "wall_clock" not in man and man["config_digest"] == rep.config_digest


def test_variant_does_not_touch_bookkeeping(tiny_data):
    _, same = run_continual(tiny_plan(kd_variant="same"), tiny_data, TINY)
    _, cross = run_continual(tiny_plan(kd_variant="cross"), tiny_data, TINY)
    assert same.schedule == cross.schedule
    assert [r[:3] for r in same.rows] == [r[:3] for r in cross.rows]
    assert [len(c) for c in same.losses] == [len(c) for c in cross.losses]
    assert same.losses[0] == cross.losses[0]  # step 0 has no teacher
    assert same.losses[1] != cross.losses[1]


def test_teacher_frozen_during_step(tiny_data):
    plan = tiny_plan()
    model = SymmetricFusionNet(TINY, (1, 2))
    teacher = snapshot_teacher(model)
    before = param_digest(teacher)
    out = teacher.forward(tiny_data.train[0])[0].color_probs.data.copy()
    model.extend_classifier([3])
    student_before = param_digest(model)
    _train_step(model, plan, tiny_data, 1, teacher, incremental=True)
    assert param_digest(model) != student_before
    assert param_digest(teacher) == before
    np.testing.assert_array_equal(teacher.forward(tiny_data.train[0])[0].color_probs.data, out)


def test_step_supervision_classes(tiny_data):
    frame = tiny_data.train[0]
    masked = step_labels(frame, (3,))
    assert set(np.unique(masked.labels)) <= {0, 3}
    teacher = snapshot_teacher(SymmetricFusionNet(TINY, (1, 2)))
    inpainted = step_labels(frame, (3,), teacher)
    assert set(np.unique(inpainted.labels)) <= {0, 1, 2, 3}
    np.testing.assert_array_equal(inpainted.labels[masked.labels == 3], 3)


@pytest.mark.slow
def test_offline_two_class_quality():
    spec = SceneSpec(seed=1_000_000, num_classes=2)
    held = SceneSpec(seed=2_000_000, num_classes=2)
    data = TrainData(generate_frames(spec, 40), generate_frames(held, 20), 2)
    plan = StepPlan(build_schedule("offline", 2), iterations=300, warmup=30)
    _, rep = run_offline(plan, data, ModelConfig())
    for b in ("color", "lidar"):
        assert rep.step_miou(0, b, (1, 2)) > 0.80, b


@pytest.mark.slow
def test_kd_bounds_forgetting():
    spec = SceneSpec(seed=1_000_000)
    held = SceneSpec(seed=2_000_000)
    data = TrainData(generate_frames(spec, 40), generate_frames(held, 20), 4)
    plan = StepPlan(build_schedule("2-1-1", 4), kd_variant="same")
    _, rep = run_continual(plan, data, ModelConfig())
    for b in ("color", "lidar"):
        assert rep.step_miou(2, b, (1, 2)) >= 0.5 * rep.step_miou(0, b, (1, 2)), b
