"""Reverse-mode automatic differentiation over numpy arrays.

Tensors are NCHW where spatial. Every op records a node holding its parents
and a closure that maps the output gradient to parent gradients. ``backward``
linearizes the reachable nodes into a :class:`GraphTape` and replays it in
reverse. Tapes are single-shot: once a loss has been backpropagated its graph
is released and cannot be replayed.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, DataError, NumericalError, UsageError

IGNORE_LABEL = 255

_grad_enabled = True
_strict = False
_node_ids = itertools.count()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block; used for frozen stages and evaluation."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def strict_mode(enabled: bool = True) -> Iterator[None]:
    """Raise NumericalError as soon as any op outputs NaN or infinity."""
    global _strict
    prev, _strict = _strict, enabled
    try:
        yield
    finally:
        _strict = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("id", "op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: tuple["Tensor", ...], backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """An ndarray plus an optional gradient and a link into the graph."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        op = self.node.op if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={op}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def _raise_nonscalar():
    raise UsageError("item() needs a single-element tensor")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _strict and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


# --------------------------------------------------------------------------
# graph replay


@dataclass
class GraphTape:
    """Operations reachable from a loss, in topological order (inputs first)."""

    tensors: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "GraphTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.tensors)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate into any existing ``.grad`` so callers zero
    parameter gradients between optimizer steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    if loss.node is not None and loss.node.consumed:
        raise UsageError("graph already backpropagated; rebuild it with a new forward pass")

    tape = GraphTape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        t.grad = g
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
        t.node.consumed = True
        t.node.backward_fn = _consumed
        t.node.parents = ()


def _consumed(_g):
    raise UsageError("graph already backpropagated")


# --------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "sub":
        return sub(a, b)
    raise ConfigurationError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make("mul", ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


# --------------------------------------------------------------------------
# channel plumbing


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ConfigurationError("concat_channels needs at least one part")
    b, _, h, w = parts[0].shape
    for p in parts:
        if p.data.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (b, h, w):
            raise ConfigurationError(
                f"concat_channels: part shape {p.shape} does not match batch/spatial {(b, h, w)}"
            )
    if len(parts) == 1:
        return parts[0]
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _make("concat", np.concatenate([p.data for p in parts], axis=1), parts, bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make("slice", x.data[:, start:stop], (x,), bw)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    b, c, h, w = x.shape

    def bw(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make("upsample", out, (x,), bw)


def softmax_channels(logits: Tensor) -> Tensor:
    if logits.data.ndim != 4 or logits.shape[1] < 2:
        raise ConfigurationError(f"softmax_channels expects [B,N>=2,H,W], got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make("softmax", p, (logits,), bw)


# --------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """View of shape (B, Ho, Wo, k, k, C) over a padded channels-last input; no copy."""
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    return as_strided(
        xp,
        shape=(b, ho, wo, k, k, c),
        strides=(sb, sh * stride, sw * stride, sh * dilation, sw * dilation, sc),
        writeable=False,
    )


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Zero-padded 2-D cross-correlation via one im2col GEMM.

    Shapes are NCHW, but the output array is a transposed view of a
    channels-last buffer: the window gather and its scatter-add adjoint are
    several times faster on that layout, and elementwise ops preserve it.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ConfigurationError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if padding < 0 or dilation < 1 or stride < 1:
        raise ConfigurationError("conv2d: need padding >= 0, dilation >= 1, stride >= 1")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv2d: non-positive output extent {ho}x{wo}")

    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xp = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = np.ascontiguousarray(xh)
    # column order (kh, kw, cin) to match the window view
    wm = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    cols = _windows(xp, k, stride, dilation, ho, wo).reshape(b * ho * wo, k * k * cin)
    out = cols @ wm.T
    del cols
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = gx = gb = None
        if weight.requires_grad:
            c = _windows(xp, k, stride, dilation, ho, wo).reshape(b * ho * wo, k * k * cin)
            gw = (gm.T @ c).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            gcols = (gm @ wm).reshape(b, ho, wo, k, k, cin)
            gxp = np.zeros(xp.shape, dtype=gcols.dtype)
            span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    hi, wj = i * dilation, j * dilation
                    gxp[:, hi : hi + span_h : stride, wj : wj + span_w : stride, :] += gcols[:, :, :, i, j, :]
            if padding:
                gxp = gxp[:, padding : padding + h, padding : padding + w, :]
            gx = gxp.transpose(0, 3, 1, 2)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make("conv2d", out, parents, bw)


# --------------------------------------------------------------------------
# losses


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    target = _as_tensor(target)
    if prediction.shape != target.shape:
        raise ConfigurationError(f"mse_loss: shape {prediction.shape} != {target.shape}")
    diff = prediction.data - target.data
    n = diff.size

    def bw(g):
        gp = diff * (2.0 * g / n)
        return gp, -gp

    return _make("mse", np.asarray(np.mean(diff * diff)), (prediction, target), bw)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_LABEL) -> Tensor:
    """Mean negative log-likelihood over pixels whose label is not ``ignore_index``."""
    labels = np.asarray(labels)
    if logits.data.ndim != 4:
        raise ConfigurationError(f"cross_entropy_loss expects [B,N,H,W] logits, got {logits.shape}")
    b, n, h, w = logits.shape
    if labels.shape != (b, h, w):
        raise ConfigurationError(f"cross_entropy_loss: labels {labels.shape} vs logits {logits.shape}")
    valid = labels != ignore_index
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= n):
        raise DataError(f"cross_entropy_loss: label outside [0, {n}) and not the ignore sentinel")
    safe = np.where(valid, labels, 0).astype(np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    nll = (lse - picked) * valid
    value = nll.sum() / count if count else 0.0

    def bw(g):
        if not count:
            return (np.zeros_like(logits.data),)
        p = np.exp(z - lse[:, None])
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0, axis=1)
        return (p * (valid[:, None] * (g / count)),)

    return _make("cross_entropy", np.asarray(value, dtype=logits.dtype), (logits,), bw)


# --------------------------------------------------------------------------
# gradient checking


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    epsilon: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest per-coordinate relative error between analytic and central-difference gradients.

    ``max_coords`` limits the check to a seeded random subset of coordinates,
    which keeps checks on whole networks affordable.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigurationError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        idx = np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False)
    worst = 0.0
    with no_grad():
        for i in idx:
            plus, minus = flat.copy(), flat.copy()
            plus[i] += epsilon
            minus[i] -= epsilon
            fp = float(f(Tensor(plus.reshape(base.shape))).data)
            fm = float(f(Tensor(minus.reshape(base.shape))).data)
            numeric = (fp - fm) / (2 * epsilon)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
