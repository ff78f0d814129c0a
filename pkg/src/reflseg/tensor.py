"""Minimal dense tensor library with tape-based reverse-mode autodiff.

Covers exactly the operations the segmentation pipeline needs: elementwise
arithmetic, relu/sigmoid, 2d convolution (k in {1, 3}), masked average
pooling, cosine similarity, channel softmax, binary cross-entropy, flips,
min-max normalization, channel concat/stack and max reduction.

Everything is float64 and unbatched. Gradients are recorded on an explicit
`Tape`; with no active tape, ops are plain numpy computations.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class EmptyMaskError(ValueError):
    """A binary mask required to have foreground is all zero."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, non-scalar root, or no recording."""


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops, replayed in reverse by backward().

    Use as a context manager around the forward pass. A tape can be consumed
    by backward() exactly once.
    """

    def __init__(self):
        self._nodes = []  # (out, inputs, backward_fn)
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense float64 array with optional gradient participation.

    `grad` is a same-shape buffer present iff `requires_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self):
        """Run reverse-mode accumulation from this scalar over its tape."""
        if self.data.size != 1:
            raise TapeError("backward root must be a scalar")
        tape = self._tape
        if tape is None:
            raise TapeError("tensor is not attached to a tape")
        if tape._consumed:
            raise TapeError("tape already consumed; re-record before backward")
        tape._consumed = True
        self.grad += 1.0
        for out, inputs, backward_fn in reversed(tape._nodes):
            grads = backward_fn(out.grad)
            for t, g in zip(inputs, grads):
                if t.requires_grad and g is not None:
                    t.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; floats are coerced to constant tensors
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return mul(self, _coerce(-1.0))

    def __sub__(self, other):
        return add(self, -_coerce(other))

    def __rsub__(self, other):
        return add(_coerce(other), -self)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording `backward_fn` on the active tape.

    `backward_fn(out_grad)` must return per-input gradient arrays (or None)
    in input order. With no active tape, or no differentiable input, the
    result is a plain constant tensor.
    """
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out._tape = tape
        tape._nodes.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar <-> array broadcasting is supported
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return record_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    return record_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0.0
    return record_op(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,))


def sigmoid(t: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-t.data))
    return record_op(y, (t,), lambda g: (g * y * (1.0 - y),))


def sum_all(t: Tensor) -> Tensor:
    return record_op(
        np.asarray(t.data.sum()), (t,), lambda g: (np.full_like(t.data, float(g)),)
    )


def mean_all(t: Tensor) -> Tensor:
    n = t.data.size
    return record_op(
        np.asarray(t.data.mean()),
        (t,),
        lambda g: (np.full_like(t.data, float(g) / n),),
    )


def reshape(t: Tensor, shape) -> Tensor:
    return record_op(
        t.data.reshape(shape), (t,), lambda g: (g.reshape(t.data.shape),)
    )


def flip_h(t: Tensor) -> Tensor:
    """Reverse the last (width) axis; its own gradient is another flip."""
    if t.data.ndim < 2:
        raise ShapeError("flip_h requires rank >= 2")
    return record_op(t.data[..., ::-1].copy(), (t,), lambda g: (g[..., ::-1].copy(),))


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate rank-3 tensors along the channel (first) axis."""
    parts = list(parts)
    for p in parts:
        if p.data.ndim != 3:
            raise ShapeError("concat_channels expects rank-3 tensors")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return record_op(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def stack_maps(maps: Iterable[Tensor]) -> Tensor:
    """Stack rank-2 maps into a [n, H, W] tensor."""
    maps = list(maps)
    for m in maps:
        if m.data.ndim != 2:
            raise ShapeError("stack_maps expects rank-2 tensors")

    def backward(g):
        return tuple(g[i] for i in range(len(maps)))

    return record_op(np.stack([m.data for m in maps], axis=0), maps, backward)


def channel(t: Tensor, i: int) -> Tensor:
    """Select channel i of a rank-3 tensor as a [H, W] map."""
    if t.data.ndim != 3:
        raise ShapeError("channel expects a rank-3 tensor")

    def backward(g):
        full = np.zeros_like(t.data)
        full[i] = g
        return (full,)

    return record_op(t.data[i].copy(), (t,), backward)


def broadcast_vector(v: Tensor, h: int, w: int) -> Tensor:
    """Spatially broadcast a C-vector to a [C, h, w] feature map."""
    if v.data.ndim != 1:
        raise ShapeError("broadcast_vector expects a rank-1 tensor")
    data = np.broadcast_to(v.data[:, None, None], (v.shape[0], h, w)).copy()
    return record_op(data, (v,), lambda g: (g.sum(axis=(1, 2)),))


def max_all(t: Tensor):
    """Max over all elements; returns (value tensor, flat argmax index).

    The gradient is routed to the single max element; ties break to the
    lowest flat index.
    """
    idx = int(np.argmax(t.data))
    val = t.data.flat[idx]

    def backward(g):
        full = np.zeros_like(t.data)
        full.flat[idx] = float(g)
        return (full,)

    return record_op(np.asarray(val), (t,), backward), idx


def channel_max(t: Tensor, start: int = 0) -> Tensor:
    """Per-pixel max over channels c >= start of a [Cls, H, W] tensor.

    Gradient routes to the argmax channel; ties break to the lowest channel.
    """
    if t.data.ndim != 3:
        raise ShapeError("channel_max expects a rank-3 tensor")
    sub = t.data[start:]
    arg = np.argmax(sub, axis=0)
    vals = np.take_along_axis(sub, arg[None], axis=0)[0]

    def backward(g):
        full = np.zeros_like(t.data)
        np.put_along_axis(full[start:], arg[None], g[None], axis=0)
        return (full,)

    return record_op(vals, (t,), backward)


def minmax_norm(t: Tensor) -> Tensor:
    """Per-map min-max normalization to [0, 1]; constant maps map to zero.

    Min/max gradients route to the (lowest-flat-index) argmin/argmax.
    """
    lo_i = int(np.argmin(t.data))
    hi_i = int(np.argmax(t.data))
    lo = t.data.flat[lo_i]
    hi = t.data.flat[hi_i]
    r = hi - lo
    if r < 1e-12:
        return record_op(np.zeros_like(t.data), (t,), lambda g: (np.zeros_like(t.data),))
    y = (t.data - lo) / r

    def backward(g):
        gx = g / r
        gx.flat[lo_i] += float((g * (t.data - hi)).sum()) / (r * r)
        gx.flat[hi_i] += float((g * (lo - t.data)).sum()) / (r * r)
        return (gx,)

    return record_op(y, (t,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    """2d cross-correlation of [Cin, H, W] with [Cout, Cin, k, k] weights.

    k must be 1 or 3; pad defaults to (k - 1) // 2 ("same" at stride 1).
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects x rank 3 and weight rank 4")
    cin, h, w = x.shape
    cout, cin_w, k, k2 = weight.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"kernel must be square with k in {{1, 3}}, got {k}x{k2}")
    if cin_w != cin:
        raise ShapeError(f"input has {cin} channels, weight expects {cin_w}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    if pad is None:
        pad = (k - 1) // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        xp = np.zeros((cin, h + 2 * pad, w + 2 * pad))
        xp[:, pad:pad + h, pad:pad + w] = x.data
    else:
        xp = x.data
    # im2col: one BLAS matmul for the whole conv
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    col = windows[:, ::stride, ::stride]            # cin, ho, wo, k, k
    col = col.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
    wf = weight.data.reshape(cout, cin * k * k)
    out = (wf @ col + bias.data[:, None]).reshape(cout, ho, wo)

    def backward(g):
        gf = g.reshape(cout, ho * wo)
        gw = (gf @ col.T).reshape(weight.shape)
        gcol = (wf.T @ gf).reshape(cin, k, k, ho, wo)
        gxp = np.zeros((cin, h + 2 * pad, w + 2 * pad))
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                    gcol[:, ki, kj]
        gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        gb = gf.sum(axis=1)
        return np.ascontiguousarray(gx), gw, gb

    return record_op(out, (x, weight, bias), backward)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return conv2d(x, weight, bias, stride=1, pad=0)


def _as_mask(m) -> np.ndarray:
    data = m.data if isinstance(m, Tensor) else np.asarray(m)
    return data.astype(np.float64)


def masked_avg_pool(f: Tensor, mask) -> Tensor:
    """Per-channel average of f over the foreground of a binary mask.

    Differentiable w.r.t. f; the mask is a constant.
    """
    m = _as_mask(mask)
    if f.data.ndim != 3 or m.shape != f.shape[1:]:
        raise ShapeError(f"feature {f.shape} / mask {m.shape} mismatch")
    n = m.sum()
    if n < 1.0:
        raise EmptyMaskError("mask has no foreground pixels")
    out = (f.data * m).sum(axis=(1, 2)) / n
    return record_op(out, (f,), lambda g: (g[:, None, None] * m / n,))


_NORM_EPS = 1e-12


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two C-vectors; near-zero vectors give 0."""
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError("cosine expects two equal-length vectors")
    na = np.linalg.norm(a.data)
    nb = np.linalg.norm(b.data)
    if na < _NORM_EPS or nb < _NORM_EPS:
        return record_op(
            np.asarray(0.0), (a, b),
            lambda g: (np.zeros_like(a.data), np.zeros_like(b.data)),
        )
    c = float(a.data @ b.data) / (na * nb)

    def backward(g):
        g = float(g)
        ga = g * (b.data / (na * nb) - c * a.data / (na * na))
        gb = g * (a.data / (na * nb) - c * b.data / (nb * nb))
        return ga, gb

    return record_op(np.asarray(c), (a, b), backward)


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over the channel (first) axis of a [Cls, H, W] tensor."""
    if logits.data.ndim != 3:
        raise ShapeError("softmax_channels expects a rank-3 tensor")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)
    return record_op(p, (logits,), lambda g: (p * (g - (g * p).sum(axis=0, keepdims=True)),))


def softmax2(logits: Tensor) -> Tensor:
    """Two-way channel softmax: channel 0 background, channel 1 foreground."""
    if logits.data.ndim != 3 or logits.shape[0] != 2:
        raise ShapeError("softmax2 expects a [2, H, W] tensor")
    return softmax_channels(logits)


_PROB_CLAMP = 1e-7


def bce(pred: Tensor, gt_mask) -> Tensor:
    """Binary cross-entropy of a [2, H, W] probability map against a binary mask.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log; the
    gradient is zero where the clamp is active.
    """
    m = _as_mask(gt_mask)
    if pred.data.ndim != 3 or pred.shape[0] != 2 or pred.shape[1:] != m.shape:
        raise ShapeError(f"pred {pred.shape} / mask {m.shape} mismatch")
    n = m.size
    inside = (pred.data > _PROB_CLAMP) & (pred.data < 1.0 - _PROB_CLAMP)
    p = np.clip(pred.data, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    loss = -(m * np.log(p[1]) + (1.0 - m) * np.log(p[0])).mean()

    def backward(g):
        gp = np.zeros_like(pred.data)
        gp[1] = -m / p[1]
        gp[0] = -(1.0 - m) / p[0]
        return (float(g) / n * gp * inside,)

    return record_op(np.asarray(loss), (pred,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean per-pixel cross-entropy of [Cls, H, W] logits vs integer labels."""
    lab = np.asarray(labels)
    if logits.data.ndim != 3 or lab.shape != logits.shape[1:]:
        raise ShapeError(f"logits {logits.shape} / labels {lab.shape} mismatch")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)
    n = lab.size
    picked = np.take_along_axis(p, lab[None], axis=0)[0]
    loss = -np.log(np.maximum(picked, 1e-300)).mean()

    def backward(g):
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, lab[None], 1.0, axis=0)
        return (float(g) / n * (p - onehot),)

    return record_op(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# serialization: magic "RSTN", u32 rank, u32 dims (LE), f64 data row-major
# ---------------------------------------------------------------------------

_MAGIC = b"RSTN"


def write_tensor(fobj, t: Tensor | np.ndarray) -> int:
    """Write one tensor record to a binary file object; returns byte length."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = _MAGIC + struct.pack("<I", data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    payload = np.ascontiguousarray(data, dtype="<f8").tobytes()
    fobj.write(header)
    fobj.write(payload)
    return len(header) + len(payload)


def read_tensor(fobj) -> np.ndarray:
    magic = fobj.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fobj.read(4))
    dims = struct.unpack(f"<{rank}I", fobj.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(fobj.read(8 * count), dtype="<f8").astype(np.float64)
    return data.reshape(dims)


def save_tensor(path, t: Tensor | np.ndarray):
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
