"""Central-difference checks of every primitive, loss and the full network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, finite_difference_check
from .losses import (
    KD_VARIANTS,
    feature_align_loss,
    kd_composite,
    kd_pair,
    seg_ce,
    total_loss,
    LossWeights,
)
from .network import (
    FeaturePyramid,
    FusionConfig,
    ModelConfig,
    PredictionPair,
    SymmetricFusionNet,
    fuse,
)

EPS = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _random_probs(rng, c, h, w):
    z = np.exp(rng.normal(size=(c, h, w)))
    return z / z.sum(axis=0, keepdims=True)


def _weighted_sum(rng, shape):
    """Random linear read-out turning any tensor into a scalar objective."""
    weights = Tensor(rng.normal(size=shape))
    return lambda t: dc.tsum(dc.mul(t, weights))


def primitive_checks(rng: np.random.Generator) -> list[tuple[str, Callable, Tensor]]:
    """(name, objective, parameter) triples, one per primitive."""
    checks = []
    x = Tensor(rng.normal(size=(3, 4)))
    y = Tensor(rng.normal(size=(3, 4)))
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
    read = _weighted_sum(rng, (3, 4))
    read_row = _weighted_sum(rng, (1, 4))
    checks += [
        ("add", lambda t: read(dc.add(t, y)), x),
        ("sub", lambda t: read(dc.sub(y, t)), x),
        ("mul", lambda t: read(dc.mul(t, y)), x),
        ("div", lambda t: read(dc.div(y, t)), pos),
        ("scale", lambda t: read(dc.scale(t, -1.7)), x),
        ("negate", lambda t: read(dc.negate(t)), x),
        ("relu", lambda t: read(dc.relu(t)), Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1, size=(3, 4)))),
        ("exp", lambda t: read(dc.exp(t)), x),
        ("log", lambda t: read(dc.log(t)), pos),
        ("sqrt", lambda t: read(dc.sqrt(t)), pos),
        ("sum_axis", lambda t: read_row(dc.tsum(t, axis=0, keepdims=True)), x),
        ("softmax", lambda t: read(dc.softmax(t, axis=0)), x),
        ("l2_norm", lambda t: dc.l2_norm(t), x),
        ("cosine", lambda t: dc.cosine_similarity(t, y), x),
    ]
    xi = Tensor(rng.normal(size=(2, 6, 6)))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)))
    read_c1 = _weighted_sum(rng, (3, 6, 6))
    read_c2 = _weighted_sum(rng, (3, 3, 3))
    checks += [
        ("conv2d_input", lambda t: read_c1(dc.conv2d(t, k, 1, 1)), xi),
        ("conv2d_kernel", lambda t: read_c1(dc.conv2d(xi, t, 1, 1)), k),
        ("conv2d_stride2_input", lambda t: read_c2(dc.conv2d(t, k, 2, 1)), xi),
        ("conv2d_stride2_kernel", lambda t: read_c2(dc.conv2d(xi, t, 2, 1)), k),
    ]
    up = Tensor(rng.normal(size=(2, 3, 3)))
    read_up = _weighted_sum(rng, (2, 6, 6))
    a = Tensor(rng.normal(size=(2, 3, 3)))
    checks += [
        ("upsample", lambda t: read_up(dc.upsample_nearest(t, 2)), up),
        ("fuse", lambda t: read_up(dc.upsample_nearest(fuse(t, a, 0.3), 2)), up),
    ]
    return checks


def loss_checks(rng: np.random.Generator) -> list[tuple[str, Callable, Tensor]]:
    c, h, w = 3, 4, 4
    labels = rng.integers(0, c + 1, size=(h, w))
    labels[0, 0] = 1
    logits = Tensor(rng.normal(size=(c, h, w)))
    checks = [("seg_ce", lambda t: seg_ce(dc.softmax(t, 0), labels), logits)]

    shapes = [(2, 4, 4), (3, 2, 2), (2, 2, 2), (4, 1, 1)]
    other = FeaturePyramid(tuple(Tensor(rng.uniform(0, 1, size=s)) for s in shapes))
    fixed = [Tensor(rng.uniform(0, 1, size=s)) for s in shapes]
    for level, s in enumerate(shapes):
        def align(t, level=level):
            mine = FeaturePyramid(tuple(t if i == level else f for i, f in enumerate(fixed)))
            return feature_align_loss(mine, other)

        checks.append((f"feature_align_level{level}", align, Tensor(rng.uniform(0, 1, size=s))))

    teacher = PredictionPair(Tensor(_random_probs(rng, 2, h, w)), Tensor(_random_probs(rng, 2, h, w)))
    fixed_color = Tensor(rng.normal(size=(c, h, w)))
    checks.append(("kd_pair", lambda t: kd_pair(teacher.color_probs, dc.softmax(t, 0)), logits))
    checks.append(("kd_pair_temperature",
                   lambda t: kd_pair(teacher.color_probs, dc.softmax(t, 0), temperature=2.0), logits))
    for variant in KD_VARIANTS:
        def composite(t, variant=variant):
            student = PredictionPair(dc.softmax(fixed_color, 0), dc.softmax(t, 0))
            return kd_composite(variant, teacher, student)

        def composite_color(t, variant=variant):
            student = PredictionPair(dc.softmax(t, 0), dc.softmax(fixed_color, 0))
            return kd_composite(variant, teacher, student)

        checks.append((f"kd_{variant}_lidar_student", composite, Tensor(rng.normal(size=(c, h, w)))))
        checks.append((f"kd_{variant}_color_student", composite_color, Tensor(rng.normal(size=(c, h, w)))))
    return checks


def network_checks(rng: np.random.Generator, seed: int = 0, coords_per_param: int = 6):
    """Full forward plus total loss, differentiated w.r.t. sampled parameter entries."""
    cfg = ModelConfig(widths=(3, 4, 4, 5), fusion=FusionConfig(r=0.4), seed=seed)
    model = SymmetricFusionNet(cfg, (1, 2, 3))
    teacher = SymmetricFusionNet(ModelConfig(widths=(3, 4, 4, 5), seed=seed + 1), (1, 2))
    teacher.freeze()
    h = w = 16
    xc = rng.uniform(0, 1, size=(3, h, w))
    xl = rng.normal(size=(5, h, w))
    labels = rng.integers(0, 4, size=(h, w))
    t_pair, _, _ = teacher.forward_arrays(xc, xl)
    weights = LossWeights(feature=0.1, kd=1.0)

    def objective(_):
        pair, pc, pl = model.forward_arrays(xc, xl)
        loss, _ = total_loss(pair, pc, pl, labels, weights, teacher=t_pair, kd_variant="cross")
        return loss

    out = []
    for name, p in model.params.items():
        n = min(coords_per_param, p.size)
        idx = rng.choice(p.size, size=n, replace=False)
        out.append((f"network:{name}", objective, p, idx))
    return out


def run_all(seed: int = 0, network_coords: int = 6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, f, theta in primitive_checks(rng) + loss_checks(rng):
        results.append(CheckResult(name, finite_difference_check(f, theta, EPS)))
    for name, f, p, idx in network_checks(rng, seed, network_coords):
        err = finite_difference_check(f, p, EPS, indices=idx)
        results.append(CheckResult(name, err))
    return results
