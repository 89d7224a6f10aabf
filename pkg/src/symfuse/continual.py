"""Offline and class-incremental training of the two-branch model.

Offline runs (and step 0 of incremental runs) optimise the color branch with
Nesterov SGD and the LiDAR branch with Adam under a linear-warmup cosine
schedule.  Incremental steps use SGD for both branches with a linearly
decaying learning rate, distil from a frozen copy of the previous model and
optionally inpaint unknown labels with its averaged prediction.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import ClassSchedule, mask_labels
from .diffcore import Tensor
from .geometry import ProjectedFrame
from .losses import KD_VARIANTS, LossWeights, inpaint_labels, labels_to_channels, total_loss
from .metrics import evaluate, iou, mean_iou_over
from .network import BRANCHES, ModelConfig, SymmetricFusionNet, snapshot_teacher

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


class PlanError(ValueError):
    pass


# learning-rate schedules


def warmup_cosine(it: int, total: int, warmup: int, peak: float) -> float:
    """Linear 0 -> peak over ``warmup`` iterations, then cosine towards 0."""
    if it < warmup:
        return peak * it / warmup
    span = max(1, total - warmup)
    return 0.5 * peak * (1.0 + math.cos(math.pi * (it - warmup) / span))


def linear_decay(it: int, total: int, start: float, end: float) -> float:
    """Straight line from ``start`` at iteration 0 to ``end`` at ``total - 1``."""
    if total <= 1:
        return start
    return start + (end - start) * it / (total - 1)


# optimizers


class SGD:
    """SGD with (Nesterov) momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9,
                 weight_decay: float = 1e-5, nesterov: bool = True):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.buffers = [None] * len(self.params)

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            if self.momentum:
                buf = self.buffers[i]
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[i] = buf
                g = g + self.momentum * buf if self.nesterov else buf
            p.data -= lr * g


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-5):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            p.data -= lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


# plans and reports


@dataclass(frozen=True)
class StepPlan:
    schedule: ClassSchedule
    kd_variant: Optional[str] = "same"
    inpainting: bool = True
    iterations: int = 1000
    warmup: int = 100
    peak_lr: float = 0.1  # SGD, color branch
    adam_peak_lr: float = 3e-3  # Adam, LiDAR branch
    incremental_lr: tuple[float, float] = (0.005, 0.0025)
    incremental_iterations: Optional[int] = 400
    momentum: float = 0.9
    weight_decay: float = 1e-5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations < 1:
            raise PlanError("iterations must be at least 1")
        if not 0 <= self.warmup <= self.iterations:
            raise PlanError("warmup must lie in [0, iterations]")
        if self.peak_lr <= 0 or self.adam_peak_lr <= 0:
            raise PlanError("peak learning rates must be positive")
        if self.kd_variant is not None and self.kd_variant not in KD_VARIANTS:
            raise PlanError(f"unknown KD variant {self.kd_variant!r}")

    def step_iterations(self, k: int) -> int:
        if k == 0 or self.incremental_iterations is None:
            return self.iterations
        return self.incremental_iterations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = {"name": self.schedule.name, "total_classes": self.schedule.total_classes,
                         "steps": [list(s) for s in self.schedule.steps]}
        d["incremental_lr"] = list(self.incremental_lr)
        return d

    def digest(self, model_cfg: ModelConfig) -> str:
        blob = json.dumps({"plan": self.to_dict(), "model": model_cfg.to_dict()},
                          sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class TrainData:
    train: list[ProjectedFrame]
    held_out: list[ProjectedFrame]
    num_classes: int


@dataclass
class TrainReport:
    rows: list[tuple[int, str, int, float]] = field(default_factory=list)  # step, branch, class, IoU
    losses: list[list[float]] = field(default_factory=list)  # per step, per iteration
    config_digest: str = ""
    seeds: dict = field(default_factory=dict)
    schedule: list[list[int]] = field(default_factory=list)
    wall_clock: float = field(default=0.0, compare=False)

    def iou_table(self, step: int, branch: str, num_classes: int) -> np.ndarray:
        out = np.full(num_classes, np.nan)
        for s, b, c, v in self.rows:
            if s == step and b == branch:
                out[c - 1] = v
        return out

    def step_miou(self, step: int, branch: str, classes: Sequence[int]) -> float:
        n = max(c for _, _, c, _ in self.rows)
        return mean_iou_over(self.iou_table(step, branch, n), classes)

    def csv_text(self) -> str:
        lines = [f"# config_digest={self.config_digest}", "step,branch,class,iou"]
        lines += [f"{s},{b},{c},{v:.6f}" for s, b, c, v in self.rows]
        return "\n".join(lines) + "\n"

    def manifest(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "seeds": self.seeds,
            "schedule": self.schedule,
            "final_loss": [curve[-1] if curve else None for curve in self.losses],
            "loss_curves": self.losses,
        }


# training


def step_labels(frame: ProjectedFrame, step_classes: Sequence[int],
                teacher: Optional[SymmetricFusionNet] = None) -> ProjectedFrame:
    """Labels visible at one step, optionally inpainted by ``teacher``."""
    masked = mask_labels(frame, step_classes)
    if teacher is None:
        return masked
    pair, _, _ = teacher.forward(frame)
    return inpaint_labels(masked, pair, teacher.class_ids)


def _check_data(data: TrainData) -> None:
    if not data.train:
        raise PlanError("no training frames")


def _train_step(model: SymmetricFusionNet, plan: StepPlan, data: TrainData, k: int,
                teacher: Optional[SymmetricFusionNet], incremental: bool) -> list[float]:
    step_classes = plan.schedule.steps[k]
    use_teacher = teacher is not None
    targets = []
    teacher_out = []
    for frame in data.train:
        lab = step_labels(frame, step_classes, teacher if (use_teacher and plan.inpainting) else None)
        targets.append(labels_to_channels(lab.labels, model.class_ids))
        if use_teacher and plan.kd_variant is not None:
            teacher_out.append(teacher.forward(frame)[0])

    color_params = model.branch_params("color") + model.shared_params()
    lidar_params = model.branch_params("lidar")
    iters = plan.step_iterations(k)
    if incremental:
        opt_c = SGD(color_params, plan.momentum, plan.weight_decay)
        opt_l = SGD(lidar_params, plan.momentum, plan.weight_decay)
        lr_c = lr_l = [linear_decay(i, iters, *plan.incremental_lr) for i in range(iters)]
    else:
        opt_c = SGD(color_params, plan.momentum, plan.weight_decay)
        opt_l = Adam(lidar_params, weight_decay=plan.weight_decay)
        lr_c = [warmup_cosine(i, iters, plan.warmup, plan.peak_lr) for i in range(iters)]
        lr_l = [warmup_cosine(i, iters, plan.warmup, plan.adam_peak_lr) for i in range(iters)]

    rng = np.random.default_rng([plan.seed, k])
    order: list[int] = []
    curve = []
    for it in range(iters):
        if not order:
            order = list(rng.permutation(len(data.train)))
        idx = order.pop()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                pair, pyr_c, pyr_l = model.forward(data.train[idx])
                loss, parts = total_loss(
                    pair, pyr_c, pyr_l, targets[idx], plan.weights,
                    teacher=teacher_out[idx] if teacher_out else None,
                    kd_variant=plan.kd_variant if teacher_out else None)
        except FloatingPointError as err:
            raise DivergenceError(f"non-finite activations at step {k}, iteration {it}: {err}") from err
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {k}, iteration {it}: {parts}")
        model.zero_grad()
        loss.backward()
        opt_c.step(lr_c[it])
        opt_l.step(lr_l[it])
        curve.append(value)
    return curve


def _report_step(report: TrainReport, model: SymmetricFusionNet, data: TrainData, k: int) -> None:
    cms = evaluate(model, data.held_out or data.train, data.num_classes)
    for b in BRANCHES:
        per_class, _ = iou(cms[b])
        for c in range(1, data.num_classes + 1):
            report.rows.append((k, b, c, float(per_class[c - 1])))


def _new_report(plan: StepPlan, model_cfg: ModelConfig) -> TrainReport:
    return TrainReport(
        config_digest=plan.digest(model_cfg),
        seeds={"plan": plan.seed, "model": model_cfg.seed},
        schedule=[list(s) for s in plan.schedule.steps],
    )


def run_offline(plan: StepPlan, data: TrainData, model_cfg: ModelConfig = ModelConfig()):
    """Train from scratch on every class at once; returns ``(model, report)``."""
    _check_data(data)
    if plan.schedule.step_count != 1:
        raise PlanError("offline training needs a single-step schedule")
    start = time.perf_counter()
    report = _new_report(plan, model_cfg)
    model = SymmetricFusionNet(model_cfg, plan.schedule.steps[0])
    report.losses.append(_train_step(model, plan, data, 0, None, incremental=False))
    _report_step(report, model, data, 0)
    report.wall_clock = time.perf_counter() - start
    return model, report


def run_continual(plan: StepPlan, data: TrainData, model_cfg: ModelConfig = ModelConfig()):
    """Train step by step; returns ``(models per step, report)``."""
    _check_data(data)
    sched = plan.schedule
    if sched.step_count < 2:
        raise PlanError("continual training needs at least two steps")
    if len(sched.steps[0]) < 2:
        raise PlanError("step 0 must introduce at least two classes")
    start = time.perf_counter()
    report = _new_report(plan, model_cfg)
    model = SymmetricFusionNet(model_cfg, sched.steps[0])
    report.losses.append(_train_step(model, plan, data, 0, None, incremental=False))
    _report_step(report, model, data, 0)
    models = [model.copy()]
    for k in range(1, sched.step_count):
        teacher = snapshot_teacher(model)
        model.extend_classifier(sched.steps[k])
        use_teacher = plan.kd_variant is not None or plan.inpainting
        curve = _train_step(model, plan, data, k, teacher if use_teacher else None, incremental=True)
        report.losses.append(curve)
        _report_step(report, model, data, k)
        models.append(model.copy())
        log.info("step %d done, final loss %.4f", k, curve[-1])
    report.wall_clock = time.perf_counter() - start
    return models, report
