"""Dense tensors with reverse-mode automatic differentiation.

The engine is tape based: while a ``Tape`` is active (``with Tape() as t:``),
every operation whose inputs require gradients records an entry holding the
input/output handles and a backward rule.  ``backward(tape, loss)`` replays
the entries in exact reverse order, applying the chain rule and accumulating
gradients additively across fan-out.

Outside an active tape all operations are plain numpy computations, which is
what inference uses.  Tapes are tracked per thread, so independent tapes may
run concurrently; a single tape must not be shared between threads.

Element type is float32 by default (training/serving) and float64 for
gradient checks.  Binary operations require matching dtypes; there are no
mixed-precision paths.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DimensionError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional real array, optionally participating in a gradient tape.

    ``data`` is a numpy array; ``grad`` is populated (same shape, same dtype)
    by ``backward`` for every tensor with ``requires_grad=True`` and is never
    touched otherwise.  Tensors are treated as immutable after creation except
    for gradient accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (
                np.float32,
                np.float64,
            ) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; same-shape only, mirroring the op functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


def apply_op(
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap a computed result, recording it on the active tape when needed.

    ``backward_fn`` maps the upstream gradient of the output to one gradient
    array (or None) per input.  Modules outside this one (instance norm, for
    example) register their own differentiable ops through this hook.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from loss.

    Gradients accumulate additively across fan-out and across repeated
    backward calls (callers zero grads between steps).
    """
    if loss.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                holders[key] = inp
    for key, g in grads.items():
        t = holders[key]
        if not t.requires_grad:
            continue
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype)
        else:
            t.grad = t.grad + g.astype(t.data.dtype, copy=False)


def _check_same_shape(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} differ")
    if a.dtype != b.dtype:
        raise DimensionError(f"{opname}: dtypes {a.dtype} and {b.dtype} differ")


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return apply_op((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return apply_op((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op((a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return apply_op((a,), a.data * a.data.dtype.type(c), lambda g: (g * a.data.dtype.type(c),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply_op((a,), np.where(mask, a.data, a.data.dtype.type(0)), lambda g: (g * mask,))


def mean(a: Tensor) -> Tensor:
    n = a.data.dtype.type(a.size)
    return apply_op(
        (a,),
        np.asarray(a.data.mean(), dtype=a.dtype),
        lambda g: (np.full_like(a.data, g / n),),
    )


def tsum(a: Tensor) -> Tensor:
    return apply_op(
        (a,),
        np.asarray(a.data.sum(), dtype=a.dtype),
        lambda g: (np.full_like(a.data, g),),
    )


def sqdiff_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean of elementwise squared difference (the training loss kernel)."""
    _check_same_shape(a, b, "sqdiff_mean")
    diff = a.data - b.data
    n = a.data.dtype.type(a.size)

    def bwd(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return apply_op((a, b), np.asarray((diff * diff).mean(), dtype=a.dtype), bwd)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return apply_op((a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g):
        pieces = []
        start = 0
        for s in sizes:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + s)
            pieces.append(g[tuple(idx)])
            start += s
        return pieces

    return apply_op(tuple(tensors), out, bwd)


def narrow(a: Tensor, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along the first axis."""
    if start < 0 or start + length > a.shape[0]:
        raise DimensionError(f"narrow: [{start}, {start + length}) outside axis of size {a.shape[0]}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start : start + length] = g
        return (full,)

    return apply_op((a,), a.data[start : start + length].copy(), bwd)


# ---------------------------------------------------------------------------
# Linear algebra / convolution
# ---------------------------------------------------------------------------


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias for a vector x: the fully connected building block."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise DimensionError(
            f"affine: expected vector/matrix/vector, got {x.shape}/{weight.shape}/{bias.shape}"
        )
    n, m = weight.shape
    if x.shape[0] != m or bias.shape[0] != n:
        raise DimensionError(f"affine: weight {weight.shape} incompatible with x {x.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data

    def bwd(g):
        return wd.T @ g, np.outer(g, xd), g

    return apply_op((x, weight, bias), wd @ xd + bias.data, bwd)


def _conv_out_size(size: int, pad: int, dil: int, k: int, stride: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over [N, C, H, W] with zero padding.

    The kernel is laid out [C_out, C_in, k, k] and is not flipped.  Gradients
    flow to both the input and the kernel.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input/kernel, got {x.shape}/{kernel.shape}")
    n, cin, h, w = x.shape
    cout, ck, kh, kw = kernel.shape
    if ck != cin:
        raise DimensionError(f"conv2d: kernel expects {ck} input channels, input has {cin} (input {x.shape}, kernel {kernel.shape})")
    if x.dtype != kernel.dtype:
        raise DimensionError(f"conv2d: dtypes {x.dtype} and {kernel.dtype} differ")
    ho = _conv_out_size(h, padding, dilation, kh, stride)
    wo = _conv_out_size(w, padding, dilation, kw, stride)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: empty output for input {x.shape}, kernel {kernel.shape}, stride {stride}, dilation {dilation}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kd = kernel.data

    def patch(arr, i, j, hh, ww):
        return arr[:, :, i : i + stride * (hh - 1) + 1 : stride, j : j + stride * (ww - 1) + 1 : stride]

    acc = np.zeros((cout, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(kd[:, :, i, j], patch(xp, i * dilation, j * dilation, ho, wo), axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    def bwd(g):
        gk = np.empty_like(kd)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                p = patch(xp, i * dilation, j * dilation, ho, wo)
                gk[:, :, i, j] = np.tensordot(g, p, axes=([0, 2, 3], [0, 2, 3]))
                contrib = np.tensordot(kd[:, :, i, j], g, axes=([0], [1]))  # [cin, n, ho, wo]
                patch(gxp, i * dilation, j * dilation, ho, wo)[...] += contrib.transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return apply_op((x, kernel), out, bwd)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution (the gradient of conv2d w.r.t. its input, as a forward op).

    Kernel layout is [C_in, C_out, k, k]; output spatial size is
    (H-1)*stride - 2*padding + k.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv_transpose2d: expected 4-D input/kernel, got {x.shape}/{kernel.shape}")
    n, cin, h, w = x.shape
    ck, cout, kh, kw = kernel.shape
    if ck != cin:
        raise DimensionError(f"conv_transpose2d: kernel expects {ck} input channels, input has {cin}")
    if x.dtype != kernel.dtype:
        raise DimensionError(f"conv_transpose2d: dtypes {x.dtype} and {kernel.dtype} differ")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d: empty output for input {x.shape}, kernel {kernel.shape}, stride {stride}, padding {padding}")
    fh = (h - 1) * stride + kh
    fw = (w - 1) * stride + kw
    kd = kernel.data

    def scatter_slice(arr, i, j):
        return arr[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride]

    full = np.zeros((n, cout, fh, fw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(kd[:, :, i, j], x.data, axes=([0], [1]))  # [cout, n, h, w]
            scatter_slice(full, i, j)[...] += contrib.transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(full[:, :, padding : padding + ho, padding : padding + wo])

    def bwd(g):
        gfull = np.zeros((n, cout, fh, fw), dtype=x.dtype)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gx = np.zeros_like(x.data)
        gk = np.empty_like(kd)
        for i in range(kh):
            for j in range(kw):
                p = scatter_slice(gfull, i, j)  # [n, cout, h, w]
                gx += np.tensordot(kd[:, :, i, j], p, axes=([1], [1])).transpose(1, 0, 2, 3)
                gk[:, :, i, j] = np.tensordot(x.data, p, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gk

    return apply_op((x, kernel), out, bwd)
