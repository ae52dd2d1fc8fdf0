"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` when one is active and at least
one input requires a gradient, so inference outside a tape carries no
bookkeeping cost::

    with Tape() as tape:
        loss = weighted_sum(conv2d_valid(x, k, b))
    grads = backprop(tape, loss)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels as K
from .errors import ContractError, DimensionError, NumericError

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """Row-major numeric array that can participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _not_scalar(t):
    raise ContractError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable
    index: int


class Tape:
    """Ordered record of executed ops; nodes are appended in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


_TAPES: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` in a Tensor and log the op when gradients are needed.

    ``backward(gout)`` must return one gradient (or None) per input.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, tuple(inputs), out, backward, len(tape.nodes)))
    return out


def backprop(tape: Tape, loss: Tensor) -> dict:
    """Propagate d(loss) back through ``tape``.

    Leaf tensors with ``requires_grad`` receive (accumulate) ``.grad``.
    Returns a mapping from each such leaf to its gradient for this call.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    owners = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        owners.pop(id(node.output), None)
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = t
    result = {}
    for key, g in grads.items():
        t = owners[key]
        if not t.requires_grad:
            continue
        g = g.astype(t.dtype, copy=False).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = g
    return result


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------


def conv2d_valid(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Unpadded 2D cross-correlation of ``[C_in,H,W]`` with ``[C_out,C_in,kh,kw]``."""
    if x.ndim != 3 or kernel.ndim != 4 or bias.ndim != 1:
        raise DimensionError(
            f"conv2d_valid expects input[C,H,W], kernel[O,C,kh,kw], bias[O]; "
            f"got {x.shape}, {kernel.shape}, {bias.shape}")
    O, C, kh, kw = kernel.shape
    if x.shape[0] != C:
        raise DimensionError(f"input channel axis 0 has {x.shape[0]} but kernel axis 1 expects {C}")
    if bias.shape[0] != O:
        raise DimensionError(f"bias axis 0 has {bias.shape[0]} but kernel axis 0 has {O}")
    if kh > x.shape[1] or kw > x.shape[2]:
        raise DimensionError(f"kernel spatial axes {(kh, kw)} exceed input spatial axes {x.shape[1:]}")
    xd, wd = x.data, kernel.data
    out = K.conv2d_forward(xd, wd, bias.data)

    def backward(g):
        gx, gw, gb = K.conv2d_backward(xd, wd, g)
        return gx, gw, gb

    return record("conv2d_valid", out, (x, kernel, bias), backward)


def maxpool2(x: Tensor):
    """2x2 max pooling with stride 2; returns ``(output, argmax offsets)``.

    Offsets are 0..3 in row-major window order; ties keep the first maximum.
    """
    if x.ndim != 3:
        raise DimensionError(f"maxpool2 expects [C,H,W], got {x.shape}")
    H, W = x.shape[1:]
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2 needs even spatial axes, got H={H}, W={W}")
    out, idx = K.maxpool2_forward(x.data)

    def backward(g):
        return (K.maxpool2_backward(g, idx),)

    return record("maxpool2", out, (x,), backward), idx


def upconv2(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-2 transposed convolution with a ``[C_in,C_out,2,2]`` kernel."""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[2:] != (2, 2):
        raise DimensionError(f"upconv2 expects input[C,H,W], kernel[C,O,2,2]; got {x.shape}, {kernel.shape}")
    if x.shape[0] != kernel.shape[0]:
        raise DimensionError(f"input channel axis 0 has {x.shape[0]} but kernel axis 0 expects {kernel.shape[0]}")
    if bias.shape != (kernel.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match kernel axis 1 ({kernel.shape[1]})")
    xd, wd = x.data, kernel.data
    out = K.upconv2_forward(xd, wd, bias.data)

    def backward(g):
        return K.upconv2_backward(xd, wd, g)

    return record("upconv2", out, (x, kernel, bias), backward)


def crop_offsets(src_hw, dst_hw):
    """Top-left offsets of a centered ``dst_hw`` window inside ``src_hw``."""
    dy, dx = src_hw[0] - dst_hw[0], src_hw[1] - dst_hw[1]
    if dy < 0 or dx < 0 or dy % 2 or dx % 2:
        raise DimensionError(f"cannot center-crop spatial axes {tuple(src_hw)} to {tuple(dst_hw)}")
    return dy // 2, dx // 2


def center_crop(x: Tensor, hw) -> Tensor:
    if tuple(x.shape[1:]) == tuple(hw):
        return x
    oy, ox = crop_offsets(x.shape[1:], hw)
    h, w = hw
    out = x.data[:, oy:oy + h, ox:ox + w].copy()
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, oy:oy + h, ox:ox + w] = g
        return (gx,)

    return record("center_crop", out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack channels of ``a`` before ``b``; ``a`` is center-cropped to ``b``'s extent."""
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(f"concat_channels expects [C,H,W] inputs, got {a.shape} and {b.shape}")
    if a.shape[1:] != b.shape[1:]:
        a = center_crop(a, b.shape[1:])
    c1 = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def backward(g):
        return g[:c1], g[c1:]

    return record("concat_channels", out, (a, b), backward)


def split_channels(x: Tensor, c1: int):
    """Inverse of :func:`concat_channels` for uncropped inputs."""
    a = record("split_a", x.data[:c1].copy(), (x,),
               lambda g: (np.concatenate([g, np.zeros_like(x.data[c1:])]),))
    b = record("split_b", x.data[c1:].copy(), (x,),
               lambda g: (np.concatenate([np.zeros_like(x.data[:c1]), g]),))
    return a, b


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 1 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"dense expects x[F_in] and weight[F_out,F_in]; got {x.shape}, {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match weight axis 0 ({weight.shape[0]})")
    xd, wd = x.data, weight.data
    out = wd @ xd
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = (wd.T @ g, np.outer(g, xd))
        return grads + (g,) if bias is not None else grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("dense", out, inputs, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return record("relu", out, (x,), lambda g: (g * mask,))


def _stable_sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def pointwise(x: Tensor, fn: str) -> Tensor:
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown pointwise function {fn!r}")


def spatial_mean(x: Tensor) -> Tensor:
    """Per-channel mean over the spatial axes: ``[F,H,W] -> [F]``."""
    n = x.shape[1] * x.shape[2]
    shape = x.shape
    out = x.data.mean(axis=(1, 2))
    return record("spatial_mean", out, (x,),
                  lambda g: (np.broadcast_to((g / n)[:, None, None], shape).copy(),))


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply channel ``f`` of ``x[F,H,W]`` by ``s[f]``."""
    if s.ndim != 1 or x.ndim != 3 or s.shape[0] != x.shape[0]:
        raise DimensionError(f"channel_scale expects x[F,H,W] and s[F]; got {x.shape}, {s.shape}")
    xd, sd = x.data, s.data
    out = xd * sd[:, None, None]

    def backward(g):
        return g * sd[:, None, None], (g * xd).sum(axis=(1, 2))

    return record("channel_scale", out, (x, s), backward)


def moments(features: Sequence[Tensor]) -> Tensor:
    """Elementwise mean and population std across a list: ``n x [F,h,w] -> [2F,h,w]``."""
    if len(features) == 0:
        raise ContractError("moments needs at least one feature map")
    shape = features[0].shape
    for f in features:
        if f.shape != shape:
            raise DimensionError(f"feature maps disagree: {f.shape} vs {shape}")
    n = len(features)
    stack = np.stack([f.data for f in features])
    mean = stack.mean(axis=0)
    dev = stack - mean
    std = np.sqrt((dev * dev).mean(axis=0))
    out = np.concatenate([mean, std], axis=0)
    F = shape[0]

    def backward(g):
        gm, gs = g[:F], g[F:]
        safe = np.where(std > 0, std, 1)
        dstd = np.where(std > 0, gs / (n * safe), 0)
        return tuple(gm / n + dev[i] * dstd for i in range(n))

    return record("moments", out, tuple(features), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add expects equal shapes, got {a.shape} and {b.shape}")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul expects equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(())
    return record("sum", out, (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(x * w)`` for a constant array ``w``; handy as a probe loss."""
    w = np.asarray(w, dtype=x.dtype)
    out = np.asarray((x.data * w).sum(), dtype=x.dtype).reshape(())
    return record("weighted_sum", out, (x,), lambda g: (g * w,))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    registry_index: int

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def size(self):
        return self.tensor.size


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def xavier_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ParameterRegistry:
    """Ordered, name-unique collection of trainable tensors."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: list[Parameter] = []
        self._by_name: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._by_name:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        p = Parameter(name, t, len(self._params))
        self._params.append(p)
        self._by_name[name] = p
        return t

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name) -> Parameter:
        return self._by_name[name]

    def __contains__(self, name):
        return name in self._by_name

    def count(self) -> int:
        return sum(p.size for p in self._params)

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self._params]

    def zero_grad(self):
        for p in self._params:
            p.tensor.grad = None

    def snapshot(self) -> list[np.ndarray]:
        return [p.tensor.data.copy() for p in self._params]

    def restore(self, values):
        if len(values) != len(self._params):
            raise ContractError(f"expected {len(self._params)} arrays, got {len(values)}")
        for p, v in zip(self._params, values):
            if v.shape != p.shape:
                raise DimensionError(f"parameter {p.name}: shape {v.shape} != {p.shape}")
            p.tensor.data = np.array(v, dtype=self.dtype)

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for p in self._params:
            p.tensor.data = p.tensor.data.astype(dtype)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(builder: Callable, seed: int, h: float = 1e-5, max_entries: Optional[int] = None) -> float:
    """Compare tape gradients against central finite differences.

    ``builder(rng)`` returns ``(loss_fn, params)``: a zero-argument callable
    producing a scalar Tensor and the list of f64 tensors to differentiate.
    With ``max_entries`` only that many randomly chosen entries per tensor are
    perturbed. Returns the max over entries of
    ``|g_a - g_n| / max(1e-8, |g_a| + |g_n|)``.
    """
    rng = np.random.default_rng(seed)
    loss_fn, params = builder(rng)
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 tensors, {p.name or 'tensor'} is {p.dtype}")
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    analytic = backprop(tape, loss)
    worst = 0.0
    for p in params:
        ga = analytic.get(p)
        ga = np.zeros(p.shape) if ga is None else ga
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            gn = (up - down) / (2 * h)
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError("non-finite loss during finite differences")
            a = float(ga.reshape(-1)[i])
            err = abs(a - gn) / max(1e-8, abs(a) + abs(gn))
            worst = max(worst, err)
    return worst
