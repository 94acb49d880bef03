"""Dense 4-D tensors with tape-based reverse-mode differentiation.

Everything in the pipeline moves through ``Tensor``: a (batch, channels,
height, width) array of float64 with an optional gradient buffer. Ops are
plain functions; when a ``Tape`` is active they record a backward closure,
and ``Tape.backward`` replays the closures in exact reverse execution
order. Convolutions are lowered to BLAS matmuls via im2col, which is what
keeps CPU training tractable.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "conv2d",
    "relu",
    "maxpool2",
    "avgpool2",
    "global_avgpool",
    "concat_channels",
    "slice_channels",
    "add",
    "scale",
    "reduce_sum",
    "l2_loss",
    "save_tensor",
    "load_tensor",
]

TENSOR_MAGIC = b"TNSR"


class Tensor:
    """A (B, C, H, W) float64 array, optionally carrying a gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"tensor data must be 4-D (B,C,H,W), got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def accumulate_grad(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """Ordered record of executed ops for one forward pass.

    Use as a context manager; ops executed inside record their backward
    closures. ``backward`` walks them once in reverse execution order and
    raises if called again before ``reset``. Tapes are tracked per thread,
    so independent tapes may run on separate threads.
    """

    _stacks = threading.local()

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._spent = False

    @classmethod
    def _stack(cls) -> list["Tape"]:
        stack = getattr(cls._stacks, "stack", None)
        if stack is None:
            stack = []
            cls._stacks.stack = stack
        return stack

    @classmethod
    def current(cls) -> Optional["Tape"]:
        stack = cls._stack()
        return stack[-1] if stack else None

    def __enter__(self) -> "Tape":
        self._stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = self._stack().pop()
        assert popped is self
        return False

    def record(self, backward_fn: Callable[[], None]):
        self._ops.append(backward_fn)

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor):
        """Seed ``loss`` with a unit gradient and run all closures in reverse."""
        if self._spent:
            raise TapeError("backward() already called on this tape; call reset() first")
        if loss.size != 1:
            raise ValueError(f"backward() expects a scalar loss tensor, shape is {loss.shape}")
        loss.accumulate_grad(np.ones_like(loss.data))
        for fn in reversed(self._ops):
            fn()
        self._spent = True

    def reset(self):
        self._ops.clear()
        self._spent = False


def _maybe_record(out: Tensor, backward_fn: Callable[[], None]):
    tape = Tape.current()
    if tape is not None and out.requires_grad:
        tape.record(backward_fn)


# ---------------------------------------------------------------------------
# ops


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), stride fixed to 1.

    ``kernel`` is (outC, inC, kh, kw) with odd kh, kw; ``bias`` is
    (1, outC, 1, 1). With pad = (k-1)/2 the spatial size is preserved.
    """
    B, C, H, W = x.shape
    O, Ci, kh, kw = kernel.shape
    if Ci != C:
        raise ValueError(f"kernel expects {Ci} input channels, input has {C}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}x{kw}")
    if bias.shape != (1, O, 1, 1):
        raise ValueError(f"bias must have shape (1,{O},1,1), got {bias.shape}")
    if pad < 0:
        raise ValueError("pad must be non-negative")

    Ho = H + 2 * pad - kh + 1
    Wo = W + 2 * pad - kw + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"kernel {kh}x{kw} with pad {pad} does not fit input {H}x{W}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B,C,Ho,Wo,kh,kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    kmat = kernel.data.reshape(O, C * kh * kw)
    out_mat = cols @ kmat.T
    out_data = out_mat.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2) + bias.data
    out = Tensor(out_data, requires_grad=x.requires_grad or kernel.requires_grad or bias.requires_grad)

    def backward():
        g = out.grad
        if g is None:
            return
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        if bias.requires_grad:
            bias.accumulate_grad(gmat.sum(axis=0).reshape(1, O, 1, 1))
        if kernel.requires_grad:
            kernel.accumulate_grad((gmat.T @ cols).reshape(O, C, kh, kw))
        if x.requires_grad:
            # dX is the full correlation of g with the flipped kernel mapping
            # output channels back to input channels; one im2col + one gemm
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))  # (B,O,H+2p,W+2p,kh,kw)
            gcols = np.ascontiguousarray(gwin.transpose(0, 2, 3, 1, 4, 5)).reshape(
                B * (H + 2 * pad) * (W + 2 * pad), O * kh * kw
            )
            kflip = np.ascontiguousarray(
                kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            ).reshape(C, O * kh * kw)
            dxp = (gcols @ kflip.T).reshape(B, H + 2 * pad, W + 2 * pad, C).transpose(0, 3, 1, 2)
            if pad:
                dxp = dxp[:, :, pad : pad + H, pad : pad + W]
            x.accumulate_grad(np.ascontiguousarray(dxp))

    _maybe_record(out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken to be 0."""
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=x.requires_grad)

    def backward():
        if out.grad is None or not x.requires_grad:
            return
        x.accumulate_grad(out.grad * (x.data > 0.0))

    _maybe_record(out, backward)
    return out


def _pool_windows(data: np.ndarray) -> np.ndarray:
    """(B,C,H,W) -> (B,C,H/2,W/2,4) with window entries in row-major order."""
    B, C, H, W = data.shape
    v = data.reshape(B, C, H // 2, 2, W // 2, 2)
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 3, 5)).reshape(B, C, H // 2, W // 2, 4)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties route to the first entry in row-major window order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 requires even spatial dims, got {H}x{W}")
    win = _pool_windows(x.data)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], requires_grad=x.requires_grad)

    def backward():
        if out.grad is None or not x.requires_grad:
            return
        g4 = np.zeros_like(win)
        np.put_along_axis(g4, idx[..., None], out.grad[..., None], axis=-1)
        g = g4.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        x.accumulate_grad(np.ascontiguousarray(g))

    _maybe_record(out, backward)
    return out


def avgpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping average pooling."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avgpool2 requires even spatial dims, got {H}x{W}")
    out = Tensor(x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5)), requires_grad=x.requires_grad)

    def backward():
        if out.grad is None or not x.requires_grad:
            return
        g = np.repeat(np.repeat(out.grad, 2, axis=2), 2, axis=3) * 0.25
        x.accumulate_grad(g)

    _maybe_record(out, backward)
    return out


def global_avgpool(x: Tensor) -> Tensor:
    """Average over the full spatial extent, output is (B, C, 1, 1)."""
    B, C, H, W = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True), requires_grad=x.requires_grad)

    def backward():
        if out.grad is None or not x.requires_grad:
            return
        x.accumulate_grad(np.broadcast_to(out.grad / (H * W), x.shape).copy())

    _maybe_record(out, backward)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; batch and spatial dims must match."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels needs matching batch/spatial dims, got {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1), requires_grad=a.requires_grad or b.requires_grad)

    def backward():
        if out.grad is None:
            return
        if a.requires_grad:
            a.accumulate_grad(out.grad[:, :ca])
        if b.requires_grad:
            b.accumulate_grad(out.grad[:, ca:])

    _maybe_record(out, backward)
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Copy channels [start, stop) into a new tensor."""
    if not (0 <= start < stop <= x.shape[1]):
        raise ValueError(f"invalid channel slice [{start},{stop}) for {x.shape[1]} channels")
    out = Tensor(x.data[:, start:stop].copy(), requires_grad=x.requires_grad)

    def backward():
        if out.grad is None or not x.requires_grad:
            return
        g = np.zeros_like(x.data)
        g[:, start:stop] = out.grad
        x.accumulate_grad(g)

    _maybe_record(out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add requires identical shapes, got {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward():
        if out.grad is None:
            return
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(out.grad)

    _maybe_record(out, backward)
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    out = Tensor(x.data * factor, requires_grad=x.requires_grad)

    def backward():
        if out.grad is None or not x.requires_grad:
            return
        x.accumulate_grad(out.grad * factor)

    _maybe_record(out, backward)
    return out


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a (1,1,1,1) scalar tensor."""
    out = Tensor(np.full((1, 1, 1, 1), x.data.sum()), requires_grad=x.requires_grad)

    def backward():
        if out.grad is None or not x.requires_grad:
            return
        x.accumulate_grad(np.broadcast_to(out.grad.reshape(()), x.shape).copy())

    _maybe_record(out, backward)
    return out


def l2_loss(pred: Tensor, target: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean of squared differences, optionally restricted by a 0/1 mask.

    The mask may be any array broadcastable to the tensor shape (e.g. a
    per-channel (1, C, 1, 1) mask); the mean runs over unmasked elements
    only. Returns a (1,1,1,1) scalar tensor.
    """
    if pred.shape != target.shape:
        raise ValueError(f"l2_loss requires identical shapes, got {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=np.float64), pred.shape)
        n = m.sum()
        if n == 0:
            raise ValueError("l2_loss mask excludes every element")
        value = float((m * diff * diff).sum() / n)
    else:
        m = None
        n = diff.size
        value = float((diff * diff).mean())
    out = Tensor(np.full((1, 1, 1, 1), value), requires_grad=pred.requires_grad or target.requires_grad)

    def backward():
        if out.grad is None:
            return
        g = out.grad.reshape(())
        base = (2.0 / n) * diff if m is None else (2.0 / n) * m * diff
        if pred.requires_grad:
            pred.accumulate_grad(g * base)
        if target.requires_grad:
            target.accumulate_grad(-g * base)

    _maybe_record(out, backward)
    return out


# ---------------------------------------------------------------------------
# serialization: "TNSR" + 4 x uint32-LE dims + float64-LE row-major payload


def write_tensor_stream(fh, t: Tensor):
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<4I", *t.shape))
    fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_tensor_stream(fh, context: str = "stream") -> Tensor:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{context}: bad tensor magic {magic!r}")
    header = fh.read(16)
    if len(header) != 16:
        raise FormatError(f"{context}: truncated tensor header")
    shape = struct.unpack("<4I", header)
    count = int(np.prod(shape))
    payload = fh.read(count * 8)
    if len(payload) != count * 8:
        raise FormatError(f"{context}: truncated tensor payload")
    data = np.frombuffer(payload, dtype="<f8").reshape(shape)
    return Tensor(data.copy())


def save_tensor(t: Tensor, path):
    with open(path, "wb") as fh:
        write_tensor_stream(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        t = read_tensor_stream(fh, context=str(path))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
        return t


def stack_batch(tensors: Sequence[Tensor]) -> Tensor:
    """Stack single-batch tensors along the batch axis (data only, no grad flow)."""
    if not tensors:
        raise ValueError("stack_batch needs at least one tensor")
    return Tensor(np.concatenate([t.data for t in tensors], axis=0))
