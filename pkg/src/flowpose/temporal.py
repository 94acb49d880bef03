"""Temporal pooling of warped heatmap stacks.

The 2n+1 stacks warped to a reference frame are combined per joint into one
composite confidence map. The learnable variant is a 1x1 cross-channel
convolution with one weight per (temporal offset, joint) pair -- exactly
t x k parameters, sign-unconstrained, no bias, and no rectifier afterwards.
Sum- and max-pooling over the temporal axis serve as fixed baselines.

Weight learning is plain full-batch gradient descent with momentum on the
mean squared error to target heatmaps; the objective is quadratic in the
weights, so the step size can be bounded safely from the data (see
learn_pooling_weights) and no tuning is required.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import FormatError
from .heatmap import JOINT_NAMES
from .tensor import Tape, Tensor, add, l2_loss, scale

__all__ = [
    "PoolingWeights",
    "pool_parametric",
    "pool_sum",
    "pool_max",
    "learn_pooling_weights",
    "save_weights_csv",
    "load_weights_csv",
]


@dataclass
class PoolingWeights:
    """A (2n+1) x k real matrix; row tau weights temporal offset tau - n."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError(f"weights must be 2-D (t, k), got shape {self.matrix.shape}")
        if self.matrix.shape[0] % 2 == 0:
            raise ValueError(f"temporal extent must be odd (2n+1), got {self.matrix.shape[0]}")

    @property
    def t(self) -> int:
        return self.matrix.shape[0]

    @property
    def k(self) -> int:
        return self.matrix.shape[1]

    @property
    def n(self) -> int:
        return (self.t - 1) // 2

    @classmethod
    def uniform(cls, n: int, k: int) -> "PoolingWeights":
        t = 2 * n + 1
        return cls(np.full((t, k), 1.0 / t))

    @classmethod
    def one_hot_center(cls, n: int, k: int) -> "PoolingWeights":
        m = np.zeros((2 * n + 1, k))
        m[n] = 1.0
        return cls(m)


def _as_stack(warped: Union[Tensor, Sequence[Tensor]]) -> tuple[np.ndarray, list[Tensor]]:
    """Normalize input to ((t,k,H,W) data, list of source tensors)."""
    if isinstance(warped, Tensor):
        return warped.data, [warped]
    tensors = list(warped)
    if not tensors:
        raise ValueError("need at least one heatmap stack")
    shape = tensors[0].shape
    if shape[0] != 1:
        raise ValueError(f"each stack must have batch size 1, got {shape}")
    for t in tensors:
        if t.shape != shape:
            raise ValueError(f"stack shapes differ: {t.shape} vs {shape}")
    return np.concatenate([t.data for t in tensors], axis=0), tensors


def _scatter_grad(sources: list[Tensor], grad: np.ndarray):
    if len(sources) == 1 and sources[0].shape[0] == grad.shape[0]:
        if sources[0].requires_grad:
            sources[0].accumulate_grad(grad)
        return
    for tau, src in enumerate(sources):
        if src.requires_grad:
            src.accumulate_grad(grad[tau : tau + 1])


def pool_parametric(
    warped: Union[Tensor, Sequence[Tensor]],
    weights: Union[PoolingWeights, Tensor],
) -> Tensor:
    """composite[c] = sum_tau w[tau, c] * warped[tau][c].

    ``warped`` is either a list of 2n+1 stacks of shape (1, k, H, W) or one
    stacked (2n+1, k, H, W) tensor. ``weights`` may be a PoolingWeights (a
    constant) or a (t, k, 1, 1) tensor so gradients can flow into it.
    Differentiable w.r.t. both weights and inputs; no rectifier is applied.
    """
    data, sources = _as_stack(warped)
    if isinstance(weights, PoolingWeights):
        wt = Tensor(weights.matrix.reshape(*weights.matrix.shape, 1, 1))
    else:
        wt = weights
    t, k = wt.shape[:2]
    if wt.shape[2:] != (1, 1):
        raise ValueError(f"weight tensor must be (t,k,1,1), got {wt.shape}")
    if data.shape[0] != t or data.shape[1] != k:
        raise ValueError(
            f"weights are {t}x{k} but stacks are {data.shape[0]}x{data.shape[1]} (temporal x joints)"
        )
    out_data = (data * wt.data).sum(axis=0, keepdims=True)
    needs = wt.requires_grad or any(s.requires_grad for s in sources)
    out = Tensor(out_data, requires_grad=needs)

    def backward():
        g = out.grad
        if g is None:
            return
        if wt.requires_grad:
            wt.accumulate_grad((data * g).sum(axis=(2, 3)).reshape(t, k, 1, 1))
        _scatter_grad(sources, wt.data * g)

    tape = Tape.current()
    if tape is not None and needs:
        tape.record(backward)
    return out


def pool_sum(warped: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """Per-pixel, per-joint sum over the temporal axis."""
    data, sources = _as_stack(warped)
    needs = any(s.requires_grad for s in sources)
    out = Tensor(data.sum(axis=0, keepdims=True), requires_grad=needs)

    def backward():
        if out.grad is None:
            return
        _scatter_grad(sources, np.broadcast_to(out.grad, data.shape).copy())

    tape = Tape.current()
    if tape is not None and needs:
        tape.record(backward)
    return out


def pool_max(warped: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """Per-pixel, per-joint max over the temporal axis (ties: earliest frame)."""
    data, sources = _as_stack(warped)
    idx = data.argmax(axis=0)
    needs = any(s.requires_grad for s in sources)
    out = Tensor(np.take_along_axis(data, idx[None], axis=0), requires_grad=needs)

    def backward():
        if out.grad is None:
            return
        g = np.zeros_like(data)
        np.put_along_axis(g, idx[None], out.grad, axis=0)
        _scatter_grad(sources, g)

    tape = Tape.current()
    if tape is not None and needs:
        tape.record(backward)
    return out


def learn_pooling_weights(
    samples: Sequence[tuple[Union[Tensor, Sequence[Tensor]], Tensor]],
    lr: Optional[float] = None,
    momentum: float = 0.9,
    iterations: int = 400,
) -> PoolingWeights:
    """Fit pooling weights by backpropagation on (warped stacks, target) pairs.

    Initialization is uniform 1/(2n+1), i.e. plain temporal averaging, so
    any improvement is learned. The loss (mean l2 over the samples) is
    quadratic in the weights; when lr is not given it defaults to 1/trace of
    the worst per-joint Hessian, which is always a stable step size.
    """
    if not samples:
        raise ValueError("need at least one training sample")
    stacks = []
    targets = []
    t = None
    for warped, target in samples:
        data, _ = _as_stack(warped)
        if t is None:
            t = data.shape[0]
        elif data.shape[0] != t:
            raise ValueError(f"inconsistent stack counts: {data.shape[0]} vs {t}")
        if target.shape != (1,) + data.shape[1:]:
            raise ValueError(f"target shape {target.shape} does not match stacks {data.shape}")
        stacks.append(Tensor(data))
        targets.append(target)
    if t % 2 == 0:
        raise ValueError(f"temporal extent must be odd (2n+1), got {t}")
    k = stacks[0].shape[1]
    n_pix = stacks[0].shape[2] * stacks[0].shape[3]

    if lr is None:
        # per-joint Hessian trace: (2 / (n_pix * S)) * sum_s sum_tau ||stack||^2
        trace = np.zeros(k)
        for s in stacks:
            trace += 2.0 * (s.data ** 2).sum(axis=(0, 2, 3)) / (n_pix * len(stacks))
        lr = 1.0 / float(trace.max())

    wt = Tensor(np.full((t, k, 1, 1), 1.0 / t), requires_grad=True)
    velocity = np.zeros_like(wt.data)
    for _ in range(iterations):
        wt.grad = None
        with Tape() as tape:
            total = None
            for stack, target in zip(stacks, targets):
                loss = l2_loss(pool_parametric(stack, wt), target)
                total = loss if total is None else add(total, loss)
            total = scale(total, 1.0 / len(stacks))
            tape.backward(total)
        velocity = momentum * velocity - lr * wt.grad
        wt.data = wt.data + velocity
    return PoolingWeights(wt.data[:, :, 0, 0])


# ---------------------------------------------------------------------------
# CSV interchange: rows are temporal offsets -n..n, columns are joints


def _joint_headers(k: int) -> list[str]:
    if k == len(JOINT_NAMES):
        return list(JOINT_NAMES)
    return [f"joint{i}" for i in range(k)]


def save_weights_csv(weights: PoolingWeights, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["offset"] + _joint_headers(weights.k))
        for tau in range(weights.t):
            row = [tau - weights.n] + [f"{x:.17g}" for x in weights.matrix[tau]]
            writer.writerow(row)


def load_weights_csv(path) -> PoolingWeights:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "offset":
            raise FormatError(f"{path}: not a pooling-weights CSV")
        rows = [[float(x) for x in row[1:]] for row in reader]
    if not rows:
        raise FormatError(f"{path}: no weight rows")
    return PoolingWeights(np.asarray(rows))
