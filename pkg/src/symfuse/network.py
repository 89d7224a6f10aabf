"""Symmetric two-branch encoder-decoder with weighted-sum feature fusion.

Each branch (color, LiDAR) runs four stride-2 conv+relu stages.  After stage
``i`` the two branch features are mixed as ``r * F_color + (1 - r) * F_lidar``.
With ``write_back`` the mixed feature is the input of stage ``i + 1`` in both
branches.  Both decoders upsample from the deepest mixed feature, add the
shallower mixed features as skips, and emit per-pixel class probabilities.

A missing modality is fed as zeros and the mixing weight is forced to pick
the present branch at every level.

All maps are channel-first ``[C, H, W]``.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import ProjectedFrame

BRANCHES = ("color", "lidar")

CHECKPOINT_MAGIC = b"SYMFNET\x00"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class BranchConfig:
    in_channels: int
    widths: tuple[int, ...] = (8, 16, 32, 64)
    num_classes: int = 2

    def __post_init__(self):
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ModelError(f"need 4 positive level widths, got {self.widths}")
        if self.num_classes < 2:
            raise ModelError("class count must be at least 2")
        if self.in_channels < 1:
            raise ModelError("in_channels must be positive")


@dataclass(frozen=True)
class FusionConfig:
    r: float = 0.5
    write_back: bool = True
    learnable: bool = False

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ModelError(f"fusion weight must be in [0, 1], got {self.r}")


@dataclass(frozen=True)
class ModalityAvailability:
    color_present: bool = True
    lidar_present: bool = True

    def __post_init__(self):
        if not (self.color_present or self.lidar_present):
            raise ModelError("at least one modality must be present")

    @classmethod
    def from_name(cls, name: str) -> "ModalityAvailability":
        try:
            return {"both": cls(True, True), "rgb": cls(True, False),
                    "lidar": cls(False, True)}[name]
        except KeyError:
            raise ModelError(f"unknown modality setting {name!r}") from None


@dataclass
class FeaturePyramid:
    levels: tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ModelError("a feature pyramid has exactly 4 levels")

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.levels)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __len__(self) -> int:
        return 4


@dataclass
class PredictionPair:
    color_probs: Tensor  # [C, H, W]
    lidar_probs: Tensor  # [C, H, W]

    def branch(self, name: str) -> Tensor:
        return self.color_probs if name == "color" else self.lidar_probs

    def detached(self) -> "PredictionPair":
        return PredictionPair(self.color_probs.detach(), self.lidar_probs.detach())


def fuse(f_color: Tensor, f_lidar: Tensor, r) -> Tensor:
    """Convex combination ``r * f_color + (1 - r) * f_lidar``.

    ``r`` is a float or a single-element Tensor.
    """
    if f_color.shape != f_lidar.shape:
        raise dc.ShapeError(f"cannot fuse {f_color.shape} with {f_lidar.shape}")
    if isinstance(r, Tensor):
        return dc.add(dc.mul(r, f_color), dc.mul(dc.sub(Tensor(1.0), r), f_lidar))
    r = float(r)
    if not 0.0 <= r <= 1.0:
        raise ModelError(f"fusion weight must be in [0, 1], got {r}")
    return dc.add(dc.scale(f_color, r), dc.scale(f_lidar, 1.0 - r))


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = (8, 16, 32, 64)
    color_channels: int = 3
    lidar_channels: int = 5
    fusion: FusionConfig = field(default_factory=FusionConfig)
    lidar_scale: float = 20.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["fusion"] = FusionConfig(**d["fusion"])
        return cls(**d)


def _param_rng(seed: int, name: str, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode()), salt])


def _uniform_init(seed: int, name: str, shape, fan_in: int, salt: int = 0) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return _param_rng(seed, name, salt).uniform(-bound, bound, size=shape)


class SymmetricFusionNet:
    """Two symmetric branches sharing information through weighted-sum fusion."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), class_ids: Sequence[int] = (1, 2)):
        self.cfg = cfg
        self.class_ids = tuple(int(c) for c in class_ids)
        if len(self.class_ids) < 2:
            raise ModelError("class count must be at least 2")
        self.branch_cfgs = {
            "color": BranchConfig(cfg.color_channels, tuple(cfg.widths), len(self.class_ids)),
            "lidar": BranchConfig(cfg.lidar_channels, tuple(cfg.widths), len(self.class_ids)),
        }
        self.params: dict[str, Tensor] = {}
        self.frozen = False
        for b in BRANCHES:
            self._init_branch(b)
        if cfg.fusion.learnable:
            for i in range(4):
                self.params[f"fusion.r{i}"] = Tensor(np.array(cfg.fusion.r), requires_grad=True)

    # parameters

    def _add(self, name: str, shape, fan_in: int) -> None:
        data = _uniform_init(self.cfg.seed, name, shape, fan_in)
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _init_branch(self, b: str) -> None:
        bc = self.branch_cfgs[b]
        w = bc.widths
        cin = bc.in_channels
        for i in range(4):
            self._add(f"{b}.enc{i}.w", (w[i], cin, 3, 3), cin * 9)
            self._add(f"{b}.enc{i}.b", (w[i], 1, 1), cin * 9)
            cin = w[i]
        for i in (2, 1, 0):
            self._add(f"{b}.dec{i}.w", (w[i], w[i + 1], 3, 3), w[i + 1] * 9)
            self._add(f"{b}.dec{i}.b", (w[i], 1, 1), w[i + 1] * 9)
        self._add(f"{b}.head.w", (w[0], w[0], 3, 3), w[0] * 9)
        self._add(f"{b}.head.b", (w[0], 1, 1), w[0] * 9)
        self._add(f"{b}.cls.w", (bc.num_classes, w[0], 1, 1), w[0])
        self._add(f"{b}.cls.b", (bc.num_classes, 1, 1), w[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def branch_params(self, branch: str) -> list[Tensor]:
        return [p for n, p in self.params.items() if n.startswith(branch + ".")]

    def shared_params(self) -> list[Tensor]:
        return [p for n, p in self.params.items() if n.startswith("fusion.")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def copy(self) -> "SymmetricFusionNet":
        other = SymmetricFusionNet.__new__(SymmetricFusionNet)
        other.cfg = self.cfg
        other.class_ids = self.class_ids
        other.branch_cfgs = dict(self.branch_cfgs)
        other.frozen = False
        other.params = {n: Tensor(p.data.copy(), requires_grad=True, name=n)
                        for n, p in self.params.items()}
        return other

    # forward

    def inputs_from_frame(self, frame: ProjectedFrame) -> tuple[np.ndarray, np.ndarray]:
        # centred inputs keep stage-0 relus from dying together
        xc = np.array(frame.color.transpose(2, 0, 1), dtype=np.float64) - 0.5
        xl = np.array(frame.lidar.transpose(2, 0, 1), dtype=np.float64)
        xl[:4] /= self.cfg.lidar_scale
        xl[4] -= 0.5
        return xc, xl

    def fusion_weight(self, level: int, avail: ModalityAvailability):
        if not avail.lidar_present:
            return 1.0
        if not avail.color_present:
            return 0.0
        if self.cfg.fusion.learnable:
            return dc.clamp(self.params[f"fusion.r{level}"], 0.0, 1.0)
        return self.cfg.fusion.r

    def _stage(self, b: str, i: int, x: Tensor) -> Tensor:
        p = self.params
        return dc.relu(dc.conv2d(x, p[f"{b}.enc{i}.w"], stride=2, padding=1) + p[f"{b}.enc{i}.b"])

    def _logits(self, b: str, fused: Sequence[Tensor]) -> Tensor:
        p = self.params
        x = fused[3]
        for i in (2, 1, 0):
            up = dc.upsample_nearest(x, 2)
            x = dc.relu(dc.conv2d(up, p[f"{b}.dec{i}.w"], 1, 1) + p[f"{b}.dec{i}.b"]) + fused[i]
        x = dc.upsample_nearest(x, 2)
        x = dc.relu(dc.conv2d(x, p[f"{b}.head.w"], 1, 1) + p[f"{b}.head.b"])
        return dc.conv2d(x, p[f"{b}.cls.w"], 1, 0) + p[f"{b}.cls.b"]

    def _decode(self, b: str, fused: Sequence[Tensor]) -> Tensor:
        return dc.softmax(self._logits(b, fused), axis=0)

    def forward_arrays(self, x_color, x_lidar, avail: ModalityAvailability = ModalityAvailability()):
        """Run both branches on channel-first inputs.

        Returns ``(PredictionPair, color pyramid, lidar pyramid)``; the pyramids
        hold the pre-fusion branch features.
        """
        fused, feats_c, feats_l = self._encode(x_color, x_lidar, avail)
        pair = PredictionPair(self._decode("color", fused), self._decode("lidar", fused))
        return pair, FeaturePyramid(tuple(feats_c)), FeaturePyramid(tuple(feats_l))

    def logits_arrays(self, x_color, x_lidar,
                      avail: ModalityAvailability = ModalityAvailability()) -> dict[str, np.ndarray]:
        """Pre-softmax class scores per branch, ``[C, H, W]`` arrays."""
        fused, _, _ = self._encode(x_color, x_lidar, avail)
        return {b: self._logits(b, fused).data for b in BRANCHES}

    def _encode(self, x_color, x_lidar, avail: ModalityAvailability):
        x_color = np.asarray(x_color, dtype=np.float64)
        x_lidar = np.asarray(x_lidar, dtype=np.float64)
        _, h, w = x_color.shape
        if x_lidar.shape[1:] != (h, w):
            raise ModelError(f"input sizes differ: {x_color.shape} vs {x_lidar.shape}")
        if h % 16 or w % 16:
            raise ModelError(f"input size {h}x{w} must be divisible by 16")
        if not avail.color_present:
            x_color = np.zeros_like(x_color)
        if not avail.lidar_present:
            x_lidar = np.zeros_like(x_lidar)

        in_c, in_l = Tensor(x_color), Tensor(x_lidar)
        feats_c, feats_l, fused = [], [], []
        for i in range(4):
            fc = self._stage("color", i, in_c)
            fl = self._stage("lidar", i, in_l)
            f = fuse(fc, fl, self.fusion_weight(i, avail))
            feats_c.append(fc)
            feats_l.append(fl)
            fused.append(f)
            if self.cfg.fusion.write_back:
                in_c = in_l = f
            else:
                in_c, in_l = fc, fl
        return fused, feats_c, feats_l

    def forward(self, frame: ProjectedFrame, avail: ModalityAvailability = ModalityAvailability()):
        return self.forward_arrays(*self.inputs_from_frame(frame), avail)

    def predict(self, frame: ProjectedFrame, avail: ModalityAvailability = ModalityAvailability()):
        """Per-branch class-id maps ``{"color": [H, W], "lidar": [H, W]}``."""
        pair, _, _ = self.forward(frame, avail)
        ids = np.asarray(self.class_ids)
        return {b: ids[pair.branch(b).data.argmax(axis=0)] for b in BRANCHES}

    # incremental classes

    def extend_classifier(self, new_class_ids: Sequence[int]) -> "SymmetricFusionNet":
        """Append output channels for ``new_class_ids`` (in place).

        Existing channels keep their weights bit-exactly.
        """
        new_class_ids = tuple(int(c) for c in new_class_ids)
        if any(c in self.class_ids for c in new_class_ids):
            raise ModelError("classes already known to the model")
        if not new_class_ids:
            return self
        n_old = self.num_classes
        n_new = n_old + len(new_class_ids)
        w0 = self.cfg.widths[0]
        for b in BRANCHES:
            for suffix, shape in (("cls.w", (n_new - n_old, w0, 1, 1)), ("cls.b", (n_new - n_old, 1, 1))):
                name = f"{b}.{suffix}"
                extra = _uniform_init(self.cfg.seed, name, shape, w0, salt=n_new)
                old = self.params[name]
                self.params[name] = Tensor(np.concatenate([old.data, extra]),
                                           requires_grad=not self.frozen, name=name)
            self.branch_cfgs[b] = BranchConfig(self.branch_cfgs[b].in_channels,
                                               tuple(self.cfg.widths), n_new)
        self.class_ids = self.class_ids + new_class_ids
        return self

    # checkpoints

    def to_bytes(self, config_digest: str = "") -> bytes:
        """Serialise to the flat checkpoint layout.

        ``magic | u32 version | 32-byte digest | u32 header length | JSON header |
        u32 parameter count | per parameter: u16 name length, name, u8 ndim,
        u32 dims, float64 values`` -- all little-endian.
        """
        digest = bytes.fromhex(config_digest) if config_digest else b""
        if len(digest) not in (0, 32):
            raise ModelError("config digest must be 32 bytes of hex")
        header = json.dumps({"model": self.cfg.to_dict(), "class_ids": list(self.class_ids)},
                            sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        buf.write(digest.ljust(32, b"\x00"))
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        buf.write(struct.pack("<I", len(self.params)))
        for name, p in self.params.items():
            raw = name.encode()
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", p.data.ndim))
            buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            buf.write(p.data.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["SymmetricFusionNet", str]:
        """Inverse of :meth:`to_bytes`; returns ``(model, config digest hex)``."""
        try:
            return cls._parse(memoryview(blob))
        except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as err:
            if isinstance(err, ModelError):
                raise
            raise ModelError(f"malformed checkpoint: {err}") from err

    @classmethod
    def _parse(cls, view: memoryview) -> tuple["SymmetricFusionNet", str]:
        blob = view
        if bytes(view[:8]) != CHECKPOINT_MAGIC:
            raise ModelError("not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", view, 8)
        if version != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {version}")
        digest = bytes(view[12:44])
        (hlen,) = struct.unpack_from("<I", view, 44)
        header = json.loads(bytes(view[48:48 + hlen]))
        at = 48 + hlen
        model = cls(ModelConfig.from_dict(header["model"]), header["class_ids"])
        (count,) = struct.unpack_from("<I", view, at)
        at += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, at)
            name = bytes(view[at + 2:at + 2 + nlen]).decode()
            at += 2 + nlen
            (ndim,) = struct.unpack_from("<B", view, at)
            shape = struct.unpack_from(f"<{ndim}I", view, at + 1)
            at += 1 + 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(view, dtype="<f8", count=n, offset=at).astype(np.float64)
            at += 8 * n
            params[name] = Tensor(data.reshape(shape), requires_grad=True, name=name)
        if at != len(blob):
            raise ModelError(f"trailing bytes after offset {at}")
        if set(params) != set(model.params):
            raise ModelError("checkpoint parameters do not match the architecture")
        model.params = params
        return model, (digest.hex() if any(digest) else "")

    def save(self, path, config_digest: str = "") -> None:
        Path(path).write_bytes(self.to_bytes(config_digest))

    @classmethod
    def load(cls, path) -> tuple["SymmetricFusionNet", str]:
        return cls.from_bytes(Path(path).read_bytes())


def snapshot_teacher(model: SymmetricFusionNet) -> SymmetricFusionNet:
    """Frozen deep copy: no parameter takes part in gradient computation."""
    teacher = model.copy()
    teacher.freeze()
    return teacher


def param_digest(model: SymmetricFusionNet) -> str:
    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode())
        h.update(p.data.astype("<f8").tobytes())
    return h.hexdigest()


def extend_classifier(model: SymmetricFusionNet, new_class_count: int,
                      new_class_ids: Optional[Sequence[int]] = None) -> SymmetricFusionNet:
    """Grow ``model`` to ``new_class_count`` output classes.

    New class ids default to the integers following the current largest id.
    """
    extra = new_class_count - model.num_classes
    if extra < 0:
        raise ModelError(f"cannot shrink classifier from {model.num_classes} to {new_class_count}")
    if new_class_ids is None:
        start = max(model.class_ids) + 1
        new_class_ids = range(start, start + extra)
    new_class_ids = tuple(new_class_ids)
    if len(new_class_ids) != extra:
        raise ModelError(f"{len(new_class_ids)} new ids for {extra} new classes")
    return model.extend_classifier(new_class_ids)
