"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on a :class:`Tensor` that requires gradients records a node
holding its parents and a backward closure.  :meth:`Tensor.backward` orders the
recorded nodes topologically, replays them in reverse and accumulates
gradients into every ancestor that requires them.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

# probabilities are clamped to this floor before any log
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense float64 array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # basic introspection

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # gradient plumbing

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g.reshape(self.shape)

    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``grad`` on every ancestor that requires it.

        Gradients accumulate across calls; clear them with :meth:`zero_grad`.
        The recorded graph is released afterwards unless ``retain_graph``.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")

        tape: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        pending = {id(self): np.ones(self.shape)}
        for node in reversed(tape):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None

    # operator sugar

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _wrap(other))

    def __neg__(self):
        return negate(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _binary_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    # equal shapes, a scalar operand, or one operand broadcasting into the other
    if a.shape == b.shape:
        return a.shape
    if a.size == 1:
        return b.shape
    if b.size == 1:
        return a.shape
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    if out is not None and out in (a.shape, b.shape):
        return out
    raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.full(shape, g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, a.shape),
                            _unbroadcast(-g * out / bd, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def negate(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def safe_log(p: Tensor) -> Tensor:
    """log of probabilities clamped to [PROB_FLOOR, 1]."""
    return log(clamp(p, PROB_FLOOR, 1.0))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "negate": negate,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    ``scale-by-constant`` takes a float as ``b``; binary kinds take a Tensor.
    """
    if kind == "scale-by-constant":
        if b is None:
            raise ValueError("scale-by-constant needs a constant")
        return scale(a, float(b))
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{kind} is binary")
        return fn(a, _wrap(b))
    return fn(a)


# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def take(a: Tensor, index) -> Tensor:
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index], dtype=np.float64), (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=axis), parts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


# network primitives


def softmax(logits: Tensor, axis: int = 0) -> Tensor:
    """Max-stabilised softmax along ``axis``."""
    x = logits.data
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax received non-finite logits")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    p = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (logits,), backward)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [C_in, H, W] with ``w`` [C_out, C_in, k, k]."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [O,C,k,k], got {x.shape}, {w.shape}")
    c_in, h, wd = x.shape
    c_out, wc, k, k2 = w.shape
    if wc != c_in or k != k2:
        raise ShapeError(f"kernel {w.shape} does not fit input {x.shape}")
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"non-positive conv output size {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    # windows: [C_in, ho, wo, k, k]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * k * k)
    wmat = w.data.reshape(c_out, c_in * k * k)
    out = (cols @ wmat.T).T.reshape(c_out, ho, wo)

    def backward(g):
        gm = g.reshape(c_out, ho * wo)
        gw = (gm @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(c_in, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + wd]
        return (gx, gw)

    return _make(out, (x, w), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of a [C, H, W] tensor."""
    f = int(factor)
    out = x.data.repeat(f, axis=1).repeat(f, axis=2)
    c, h, w = x.shape
    return _make(out, (x,), lambda g: (g.reshape(c, h, f, w, f).sum(axis=(2, 4)),))


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of the flattened tensor; zero subgradient at 0."""
    n = float(np.sqrt((a.data ** 2).sum()))
    ad = a.data

    def backward(g):
        if n == 0.0:
            return (np.zeros_like(ad),)
        return (g * ad / n,)

    return _make(np.array(n), (a,), backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two flattened tensors.

    Defined as 1 when both are zero and 0 when exactly one is.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na, nb = float(np.sqrt((ad ** 2).sum())), float(np.sqrt((bd ** 2).sum()))
    if na == 0.0 and nb == 0.0:
        return _make(np.array(1.0), (a, b), lambda g: (np.zeros_like(ad), np.zeros_like(bd)))
    if na == 0.0 or nb == 0.0:
        return _make(np.array(0.0), (a, b), lambda g: (np.zeros_like(ad), np.zeros_like(bd)))
    cos = float((ad * bd).sum()) / (na * nb)

    def backward(g):
        ga = g * (bd / (na * nb) - cos * ad / na ** 2)
        gb = g * (ad / (na * nb) - cos * bd / nb ** 2)
        return (ga, gb)

    return _make(np.array(cos), (a, b), backward)


# verification


class GradCheckError(FloatingPointError):
    pass


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    theta: Tensor,
    eps: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between autograd and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``indices`` restricts the check to a subset of flat coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta.data = np.ascontiguousarray(theta.data)
    theta.requires_grad = True
    theta.grad = None
    loss = f(theta)
    if not np.all(np.isfinite(loss.data)):
        raise GradCheckError("objective is not finite at the base point")
    loss.backward()
    analytic = np.zeros(theta.size) if theta.grad is None else theta.grad.reshape(-1).copy()
    theta.grad = None

    flat = theta.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(theta).item()
        flat[i] = orig - eps
        fm = f(theta).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"objective is not finite near coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
