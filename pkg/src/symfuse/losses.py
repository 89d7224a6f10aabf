"""Training objectives for the two-branch model.

Probability maps are channel-first ``[C, H, W]``; channel ``j`` belongs to the
``j``-th class the model knows (``model.class_ids[j]``).  Label maps handed to
:func:`seg_ce` use channel numbering shifted by one, so 0 stays free for the
ignore label.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import ProjectedFrame
from .network import FeaturePyramid, PredictionPair

KD_VARIANTS = ("same", "img", "pcd", "cross")

# (teacher branch, student branch) terms summed by each variant
KD_TERMS = {
    "same": (("color", "color"), ("lidar", "lidar")),
    "img": (("color", "color"), ("lidar", "lidar"), ("color", "lidar")),
    "pcd": (("color", "color"), ("lidar", "lidar"), ("lidar", "color")),
    "cross": (("color", "color"), ("lidar", "lidar"), ("color", "lidar"), ("lidar", "color")),
}


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    feature: float = 0.01
    kd: float = 1.0
    temperature: float = 1.0


def labels_to_channels(labels: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    """Map global class ids to ``channel + 1``; unknown ids become 0."""
    lut = np.zeros(max(max(class_ids), int(labels.max(initial=0))) + 1, dtype=np.int64)
    lut[np.asarray(class_ids)] = np.arange(1, len(class_ids) + 1)
    return lut[labels]


def seg_ce(probs: Tensor, labels: np.ndarray, ignore_id: int = 0) -> Tensor:
    """Mean ``-log p`` of the labelled channel over non-ignored pixels.

    ``labels`` holds ``channel + 1`` per pixel.  Returns 0 when nothing is
    labelled.
    """
    c = probs.shape[0]
    labels = np.asarray(labels)
    if labels.shape != probs.shape[1:]:
        raise LossError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > c:
        raise LossError(f"labels must lie in [0, {c}]")
    rows, cols = np.nonzero(labels != ignore_id)
    if len(rows) == 0:
        return Tensor(0.0)
    picked = dc.take(probs, (labels[rows, cols] - 1, rows, cols))
    return dc.negate(dc.mean(dc.safe_log(picked)))


def _as_array(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


def _sharpen(p: Tensor, temperature: float) -> Tensor:
    if temperature == 1.0:
        return p
    q = dc.exp(dc.scale(dc.safe_log(p), 1.0 / temperature))
    return dc.div(q, dc.tsum(q, axis=0, keepdims=True))


def kd_pair(teacher_probs, student_probs: Tensor, temperature: float = 1.0) -> Tensor:
    """Distillation cross-entropy ``mean_pixels(-sum_c t_c log s_c)``.

    The student is restricted to the teacher's classes (its leading channels)
    and renormalised.  The teacher is a constant.
    """
    t = _as_array(teacher_probs)
    c_old = t.shape[0]
    if t.shape[1:] != student_probs.shape[1:]:
        raise LossError(f"spatial mismatch: {t.shape} vs {student_probs.shape}")
    if student_probs.shape[0] < c_old:
        raise LossError("student knows fewer classes than the teacher")
    s = student_probs
    if s.shape[0] > c_old:
        s = dc.take(s, slice(0, c_old))
    s = dc.div(s, dc.tsum(s, axis=0, keepdims=True))
    if temperature != 1.0:
        t = _sharpen(Tensor(t), temperature).data
        s = _sharpen(s, temperature)
    pixels = t.shape[1] * t.shape[2]
    return dc.scale(dc.tsum(dc.mul(Tensor(t), dc.safe_log(s))), -1.0 / pixels)


def kd_terms(teacher: PredictionPair, student: PredictionPair,
             temperature: float = 1.0) -> dict[tuple[str, str], Tensor]:
    """All four teacher-branch -> student-branch distillation terms."""
    return {(tb, sb): kd_pair(teacher.branch(tb), student.branch(sb), temperature)
            for tb in ("color", "lidar") for sb in ("color", "lidar")}


def kd_composite(variant: str, teacher: PredictionPair, student: PredictionPair,
                 temperature: float = 1.0) -> Tensor:
    """Sum of the distillation terms selected by ``variant``.

    same: CC + LL; img: adds color->lidar; pcd: adds lidar->color; cross: both.
    """
    try:
        terms = KD_TERMS[variant]
    except KeyError:
        raise LossError(f"unknown KD variant {variant!r}") from None
    total = None
    for tb, sb in terms:
        term = kd_pair(teacher.branch(tb), student.branch(sb), temperature)
        total = term if total is None else dc.add(total, term)
    return total


def feature_align_loss(color: FeaturePyramid, lidar: FeaturePyramid) -> Tensor:
    """Sum over levels of ``||F_c - F_l||_2 + (1 - cos(F_c, F_l))``."""
    total = None
    for fc, fl in zip(color, lidar):
        if fc.shape != fl.shape:
            raise LossError(f"level shapes differ: {fc.shape} vs {fl.shape}")
        term = dc.l2_norm(dc.sub(fc, fl)) + (1.0 - dc.cosine_similarity(fc, fl))
        total = term if total is None else total + term
    return total


def averaged_prediction(teacher: PredictionPair) -> np.ndarray:
    return (_as_array(teacher.color_probs) + _as_array(teacher.lidar_probs)) / 2


def inpaint_labels(masked: ProjectedFrame, teacher: PredictionPair,
                   class_ids: Union[Sequence[int], None] = None) -> ProjectedFrame:
    """Fill unknown labels at LiDAR pixels with the averaged teacher argmax.

    ``class_ids`` names the teacher's channels (default ``1..C``).  Labelled
    pixels and pixels outside the valid mask are left as they are.
    """
    avg = averaged_prediction(teacher)
    if avg.shape[1:] != masked.labels.shape:
        raise LossError(f"teacher size {avg.shape[1:]} differs from frame {masked.labels.shape}")
    ids = np.arange(1, avg.shape[0] + 1) if class_ids is None else np.asarray(class_ids)
    pseudo = ids[avg.argmax(axis=0)]
    fill = (masked.labels == 0) & masked.valid_mask
    return masked.with_labels(np.where(fill, pseudo, masked.labels))


def total_loss(pair: PredictionPair, pyr_color: FeaturePyramid, pyr_lidar: FeaturePyramid,
               channel_labels: np.ndarray, weights: LossWeights = LossWeights(),
               teacher: PredictionPair = None, kd_variant: str = None) -> tuple[Tensor, dict]:
    """Supervised, alignment and (optionally) distillation terms, weighted."""
    parts = {
        "ce_color": seg_ce(pair.color_probs, channel_labels),
        "ce_lidar": seg_ce(pair.lidar_probs, channel_labels),
    }
    loss = parts["ce_color"] + parts["ce_lidar"]
    if weights.feature:
        parts["align"] = feature_align_loss(pyr_color, pyr_lidar)
        loss = loss + weights.feature * parts["align"]
    if teacher is not None and kd_variant is not None and weights.kd:
        parts["kd"] = kd_composite(kd_variant, teacher, pair, weights.temperature)
        loss = loss + weights.kd * parts["kd"]
    return loss, {k: float(v.item()) for k, v in parts.items()}
