"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations needed by the tight frame U-net, its training loss and
the synthesis solver are provided. Tensors are immutable; an operation
records itself on the active :class:`Tape` whenever one of its inputs
requires a gradient.

Convolutions use cross-correlation semantics with zero padding, matching
the usual deep-learning convention.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-d float64 array that may take part in differentiation.

    Parameters
    ----------
    data : array_like
        Values; copied and converted to float64.
    requires_grad : bool
        Whether gradients should flow to this tensor.
    name : str, optional
        Label used in error messages and persistence.
    """

    __slots__ = ("__weakref__", "data", "name", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, op: str) -> Tensor:
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        _check_finite(arr, op)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data.item())

    def detach(self) -> Tensor:
        """Same values, no gradient tracking (shares the read-only buffer)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.name = self.name
        return t

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Gradients:
    """Mapping from recorded tensors to gradient arrays.

    Leaves that took part in the recording but did not contribute to the
    root report a zero gradient of their own shape.
    """

    def __init__(self, grads: dict[int, np.ndarray], leaves: dict[int, Tensor]):
        self._grads = grads
        self._leaves = leaves

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is not None:
            return g
        if id(t) in self._leaves:
            return np.zeros(t.shape)
        raise KeyError(f"{t!r} was not recorded on this tape")

    def get(self, t: Tensor) -> np.ndarray:
        """Gradient of ``t``, zero when ``t`` did not take part in the recording."""
        g = self._grads.get(id(t))
        return g if g is not None else np.zeros(t.shape)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads or id(t) in self._leaves

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are appended in execution order.
    A tape belongs to the thread that created it.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = l2_norm_squared(x)
    >>> tape.backward(y)[x]
    array([2., 4.])
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], vjp, op: str) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._produced.add(id(output))
        self.nodes.append(_Node(output, inputs, vjp, op))

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> Gradients:
        """Propagate gradients from ``root`` back to every recorded tensor.

        ``root`` must be a scalar unless an explicit ``seed`` (the cotangent
        of ``root``) is supplied, in which case a vector-Jacobian product is
        computed.
        """
        if id(root) not in self._produced and id(root) not in self._leaves:
            raise ValueError("root was not produced on this tape")
        if seed is None:
            if root.size != 1:
                raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
            seed = np.ones(root.shape)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != root.shape:
                raise ValueError(f"seed shape {seed.shape} does not match root shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        return Gradients(grads, self._leaves)


def _emit(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs, op)
    if needs:
        tape.record(out, inputs, vjp, op)
    return out


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.size != 1 and a.size != 1:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def vjp(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _emit(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def vjp(g):
        return g * b.data, g * a.data

    return _emit(a.data * b.data, (a, b), vjp, "mul")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def vjp(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _emit(np.array(out, dtype=np.float64), (a,), vjp, "getitem")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of a (B, C, H, W) tensor."""
    if not 0 <= start <= stop <= a.shape[1]:
        raise ValueError(f"channel range {start}:{stop} outside 0:{a.shape[1]}")
    return getitem(a, (slice(None), slice(start, stop)))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat of nothing")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ValueError(f"stack: shape mismatch {ref} vs {t.shape}")

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit(np.stack([t.data for t in tensors], axis=axis), tensors, vjp, "stack")


def sum(a: Tensor) -> Tensor:
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, np.asarray(g).item()),), "sum")


def l1_norm(a: Tensor) -> Tensor:
    # sign(0) = 0 is the subgradient used at the kink
    return _emit(np.array(np.abs(a.data).sum()), (a,), lambda g: (np.asarray(g).item() * np.sign(a.data),), "l1_norm")


def l2_norm_squared(a: Tensor) -> Tensor:
    return _emit(np.array(np.square(a.data).sum()), (a,), lambda g: (2.0 * np.asarray(g).item() * a.data,), "l2_norm_squared")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# --------------------------------------------------------------------------
# convolutions


def _check_conv(x_shape, w_shape, in_axis: int, stride: int, padding: int) -> None:
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ValueError(f"expected 4-d input and kernel, got {x_shape} and {w_shape}")
    if w_shape[2] != w_shape[3]:
        raise ValueError(f"kernel must be square, got {w_shape[2:]}")
    if x_shape[1] != w_shape[in_axis]:
        raise ValueError(f"channel mismatch: input has {x_shape[1]}, kernel expects {w_shape[in_axis]}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def _correlate(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    """Raw forward correlation; returns (out, cols) with cols kept for backward."""
    B = x.shape[0]
    D, C, k, _ = w.shape
    xp = _pad(x, padding)
    Hp, Wp = xp.shape[2:]
    if Hp < k or Wp < k:
        raise ValueError(f"input {x.shape[2:]} smaller than kernel {k}x{k}")
    Ho, Wo = (Hp - k) // stride + 1, (Wp - k) // stride + 1
    cols = kernels.im2col(xp, k, stride)
    out = cols @ w.reshape(D, -1).T
    return out.reshape(B, Ho, Wo, D).transpose(0, 3, 1, 2), cols


def _correlate_adjoint(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_correlate` with respect to its input."""
    B, D, Ho, Wo = g.shape
    _, C, k, _ = w.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, D)
    dcols = np.ascontiguousarray(g2 @ w.reshape(D, -1))
    Hp, Wp = in_hw[0] + 2 * padding, in_hw[1] + 2 * padding
    return _unpad(kernels.col2im(dcols, B, C, Hp, Wp, k, stride), padding)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate (B, C, H, W) input with a (D, C, k, k) kernel.

    Output spatial size is ``floor((H + 2*padding - k) / stride) + 1``.
    """
    _check_conv(x.shape, kernel.shape, 1, stride, padding)
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
    out, cols = _correlate(x.data, kernel.data, stride, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    D = kernel.shape[0]

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, D)
        gx = _correlate_adjoint(g, kernel.data, x.shape[2:], stride, padding) if x.requires_grad else None
        gw = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit(out, inputs, vjp, "conv2d")


def conv2d_transpose(
    y: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    output_size: tuple[int, int] | None = None,
) -> Tensor:
    """Adjoint of :func:`conv2d` for the same (D, C, k, k) kernel.

    Maps (B, D, H, W) to (B, C, H', W') with
    ``H' = (H - 1) * stride + k - 2 * padding`` unless ``output_size`` is
    given (needed when the forward size was rounded down).
    """
    _check_conv(y.shape, kernel.shape, 0, stride, padding)
    k = kernel.shape[2]
    if output_size is None:
        output_size = ((y.shape[2] - 1) * stride + k - 2 * padding, (y.shape[3] - 1) * stride + k - 2 * padding)
    expect = ((output_size[0] + 2 * padding - k) // stride + 1, (output_size[1] + 2 * padding - k) // stride + 1)
    if expect != tuple(y.shape[2:]):
        raise ValueError(f"output_size {output_size} inconsistent with input {y.shape[2:]}")
    out = _correlate_adjoint(y.data, kernel.data, output_size, stride, padding)
    D = kernel.shape[0]

    def vjp(g):
        gy = gw = None
        if y.requires_grad or kernel.requires_grad:
            gy_full, cols = _correlate(g, kernel.data, stride, padding)
            if y.requires_grad:
                gy = gy_full
            if kernel.requires_grad:
                y2 = y.data.transpose(0, 2, 3, 1).reshape(-1, D)
                gw = (y2.T @ cols).reshape(kernel.shape)
        return gy, gw

    return _emit(out, (y, kernel), vjp, "conv2d_transpose")


# --------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (mutable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> BatchNormState:
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)

    def copy(self) -> BatchNormState:
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel batch normalisation of a (B, C, H, W) tensor.

    In ``"train"`` mode the batch statistics over (B, H, W) are used and the
    running statistics in ``state`` are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``, with the
    unbiased variance. ``"eval"`` mode uses the running statistics.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if B == 0:
        raise ValueError("batchnorm on an empty batch")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"gamma/beta must have shape ({C},)")
    if state.eps <= 0:
        raise ValueError("batchnorm epsilon must be positive")
    eps = state.eps
    gam = gamma.data[None, :, None, None]
    if mode == "train":
        n = B * H * W
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mean
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_var = m * state.running_var + (1 - m) * unbiased

        def vjp(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gx = (gam * inv_std[None, :, None, None] / n) * (
                    n * g - gb[None, :, None, None] - xhat * gg[None, :, None, None]
                )
            return gx, gg, gb

    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def vjp(g):
            gx = g * gam * inv_std[None, :, None, None] if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    out = gam * xhat + beta.data[None, :, None, None]
    return _emit(out, (x, gamma, beta), vjp, "batchnorm")


__all__ = [
    "BatchNormState",
    "Gradients",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "batchnorm",
    "concat",
    "conv2d",
    "conv2d_transpose",
    "getitem",
    "l1_norm",
    "l2_norm_squared",
    "mul",
    "relu",
    "reshape",
    "scale",
    "slice_channels",
    "stack",
    "sub",
    "sum",
]
