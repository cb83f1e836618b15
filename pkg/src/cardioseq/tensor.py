"""Reverse-mode automatic differentiation over dense numpy buffers.

Tensors hold row-major float32 (training) or float64 (gradient checking)
values.  Operations executed while a :class:`Tape` is active are recorded in
order; ``backward`` replays the records strictly in reverse, which makes
gradients bitwise reproducible for identical inputs.  With no active tape the
same functions run forward-only, which is what evaluation uses.

Every forward kernel validates its output for NaN/Inf and raises
:class:`NumericError` naming the operation, so a diverging training run
aborts at the first bad value instead of silently poisoning the model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    NumericError,
    TapeError,
    UnsupportedKernelError,
)

_FLOAT_DTYPES = (np.float32, np.float64)

# Stack of active tapes; ops record onto the innermost one.  Tapes and their
# tensors are confined to a single thread of execution.
_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """Dense n-d array with an optional same-shape gradient buffer.

    ``tape``/``tape_id`` link a tensor to the operation that produced it on
    the recording tape; leaf tensors (parameters, constants, eval results)
    have both set to None.
    """

    __slots__ = ("values", "grad", "tape", "tape_id")

    def __init__(self, values, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.values: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional["Tape"] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.values.dtype})"


def as_tensor(values, dtype=None) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values, dtype=dtype)


@dataclass
class _Record:
    name: str
    inputs: tuple
    out: Tensor
    backward_fn: Callable[[np.ndarray], None]


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the scalar loss.  A tape may be consumed by backward
    exactly once.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def _append(self, name, inputs, out, backward_fn) -> int:
        self._records.append(_Record(name, inputs, out, backward_fn))
        return len(self._records) - 1

    def backward(self, loss: Tensor):
        """Populate gradient buffers of everything reachable from ``loss``.

        Records are visited in exact reverse recording order; contributions
        to each buffer accumulate in that fixed order, so gradients are
        bitwise deterministic for identical inputs.
        """
        if loss.tape is None:
            raise TapeError("backward on a tensor detached from any tape")
        if loss.tape is not self:
            raise TapeError("loss was recorded on a different tape")
        if loss.values.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {tuple(loss.shape)}"
            )
        if self._consumed:
            raise ContractError("backward called twice on the same tape")
        self._consumed = True

        loss.ensure_grad()
        loss.grad[...] = 1.0
        for rec in reversed(self._records):
            g = rec.out.grad
            if g is None:
                continue
            rec.backward_fn(g)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def backward(loss: Tensor):
    """Run reverse-mode differentiation from a scalar loss tensor."""
    if loss.tape is None:
        raise TapeError("backward on a tensor detached from any tape")
    loss.tape.backward(loss)


def _accum(t: Tensor, delta):
    t.ensure_grad()
    t.grad += delta


def _finish(name: str, out_values: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    if not np.all(np.isfinite(out_values)):
        raise NumericError(f"operation '{name}' produced non-finite values")
    out = Tensor(out_values)
    tape = active_tape()
    if tape is not None:
        out.tape = tape
        out.tape_id = tape._append(name, inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a @ b.

    ``a`` may be 1-d (treated as a single row, result squeezed back to 1-d)
    or 2-d; ``b`` must be 2-d.
    """
    if b.values.ndim != 2:
        raise DimensionError(f"matmul rhs must be 2-d, got shape {tuple(b.shape)}")
    if a.values.ndim not in (1, 2):
        raise DimensionError(f"matmul lhs must be 1-d or 2-d, got shape {tuple(a.shape)}")
    vec = a.values.ndim == 1
    a2 = a.values[None, :] if vec else a.values
    if a2.shape[1] != b.values.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    out = a2 @ b.values

    def bwd(g):
        g2 = g[None, :] if vec else g
        da = g2 @ b.values.T
        _accum(a, da[0] if vec else da)
        _accum(b, a2.T @ g2)

    return _finish("matmul", out[0] if vec else out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-d bias broadcast over the last
    axis of ``a``."""
    bias = a.values.shape != b.values.shape
    if bias:
        if b.values.ndim != 1 or a.values.shape[-1] != b.values.shape[0]:
            raise DimensionError(
                f"add shapes incompatible: {tuple(a.shape)} + {tuple(b.shape)}"
            )
    out = a.values + b.values

    def bwd(g):
        _accum(a, g)
        if bias:
            _accum(b, g.reshape(-1, b.values.shape[0]).sum(axis=0))
        else:
            _accum(b, g)

    return _finish("add", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.values.shape != b.values.shape:
        raise DimensionError(
            f"mul shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    out = a.values * b.values

    def bwd(g):
        _accum(a, g * b.values)
        _accum(b, g * a.values)

    return _finish("mul", out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = a.values * a.values.dtype.type(c)

    def bwd(g):
        _accum(a, g * a.values.dtype.type(c))

    return _finish("scale", out, (a,), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)

    def bwd(g):
        _accum(x, g * (1.0 - y * y))

    return _finish("tanh", y, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp for large |x|.
    v = x.values
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)

    def bwd(g):
        _accum(x, g * y * (1.0 - y))

    return _finish("sigmoid", y, (x,), bwd)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation kind '{kind}'")


def softmax(x: Tensor) -> Tensor:
    """Stabilised softmax along the last axis (subtract the rowwise max)."""
    v = x.values
    m = v.max(axis=-1, keepdims=True)
    e = np.exp(v - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return _finish("softmax", y, (x,), bwd)


def conv2d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    x: (H, W, Cin); kernel: (kh, kw, Cin, Cout) with kh, kw odd;
    bias: (Cout,).  Output: (H, W, Cout).
    """
    if x.values.ndim != 3:
        raise DimensionError(f"conv2d_same input must be HxWxC, got {tuple(x.shape)}")
    if kernel.values.ndim != 4:
        raise DimensionError(
            f"conv2d_same kernel must be kh x kw x Cin x Cout, got {tuple(kernel.shape)}"
        )
    kh, kw, cin_k, cout = kernel.values.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise UnsupportedKernelError(
            f"conv2d_same requires odd kernel sizes, got {kh}x{kw}"
        )
    h, w, cin = x.values.shape
    if cin != cin_k:
        raise DimensionError(
            f"conv2d_same channel mismatch: input has {cin}, kernel expects {cin_k}"
        )
    if bias.values.shape != (cout,):
        raise DimensionError(
            f"conv2d_same bias shape {tuple(bias.shape)} does not match Cout={cout}"
        )
    ph, pw = kh // 2, kw // 2
    xpad = np.pad(x.values, ((ph, ph), (pw, pw), (0, 0)))
    # im2col: (H, W, kh, kw, Cin) -> (H*W, kh*kw*Cin), then one GEMM.
    win = np.lib.stride_tricks.sliding_window_view(xpad, (kh, kw), axis=(0, 1))
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * w, kh * kw * cin)
    k2 = kernel.values.reshape(kh * kw * cin, cout)
    out = (cols @ k2 + bias.values).reshape(h, w, cout)

    def bwd(g):
        g2 = g.reshape(h * w, cout)
        _accum(kernel, (cols.T @ g2).reshape(kernel.values.shape))
        _accum(bias, g2.sum(axis=0))
        # input gradient: scatter each kernel offset's contribution back
        # into the padded frame, then crop the padding
        dcols = g2 @ k2.T  # (H*W, kh*kw*Cin)
        dpad = np.zeros_like(xpad)
        dview = dcols.reshape(h, w, kh, kw, cin)
        for i in range(kh):
            for j in range(kw):
                dpad[i:i + h, j:j + w, :] += dview[:, :, i, j, :]
        _accum(x, dpad[ph:ph + h, pw:pw + w, :])

    return _finish("conv2d_same", out, (x, kernel, bias), bwd)


def pool2d(x: Tensor, kind: str, window: int, stride: int) -> Tensor:
    """Max or average pooling over (H, W, C) input.

    Output spatial size is floor((D - window) / stride) + 1.  Max pooling
    routes the gradient to the first maximum in row-major window order.
    """
    if kind not in ("max", "avg"):
        raise ContractError(f"unknown pool kind '{kind}'")
    if window < 1 or stride < 1:
        raise ContractError(f"pool window/stride must be >= 1, got {window}/{stride}")
    if x.values.ndim != 3:
        raise DimensionError(f"pool2d input must be HxWxC, got {tuple(x.shape)}")
    h, w, c = x.values.shape
    if window > h or window > w:
        raise DimensionError(
            f"pool window {window} larger than input {h}x{w}"
        )
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.values, (window, window), axis=(0, 1))
    win = win[::stride, ::stride]                    # (ho, wo, C, window, window)
    flat = win.reshape(ho, wo, c, window * window)

    if kind == "max":
        arg = flat.argmax(axis=-1)                   # first max, row-major in window
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def bwd(g):
            di, dj = np.divmod(arg, window)
            ii, jj, cc = np.meshgrid(
                np.arange(ho), np.arange(wo), np.arange(c), indexing="ij"
            )
            rows = ii * stride + di
            cols = jj * stride + dj
            x.ensure_grad()
            np.add.at(x.grad, (rows, cols, cc), g)

        return _finish("pool2d_max", np.ascontiguousarray(out), (x,), bwd)

    out = flat.mean(axis=-1)

    def bwd(g):
        share = g / x.values.dtype.type(window * window)
        x.ensure_grad()
        for i in range(window):
            for j in range(window):
                x.grad[i:i + (ho - 1) * stride + 1:stride,
                       j:j + (wo - 1) * stride + 1:stride, :] += share

    return _finish("pool2d_avg", np.ascontiguousarray(out), (x,), bwd)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; all leading axes must agree.

    For image tensors (H, W, C_i) this stacks channels in argument order;
    the same operation joins feature vectors end to end.
    """
    if not inputs:
        raise DimensionError("concat_channels of an empty list")
    lead = inputs[0].values.shape[:-1]
    for t in inputs[1:]:
        if t.values.shape[:-1] != lead:
            raise DimensionError(
                "concat_channels leading dimensions differ: "
                f"{tuple(inputs[0].shape)} vs {tuple(t.shape)}"
            )
    sizes = [t.values.shape[-1] for t in inputs]
    out = np.concatenate([t.values for t in inputs], axis=-1)

    def bwd(g):
        off = 0
        for t, n in zip(inputs, sizes):
            _accum(t, g[..., off:off + n])
            off += n

    return _finish("concat_channels", out, tuple(inputs), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    """Row-major reshape; element count must be preserved."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.values.size:
        raise DimensionError(
            f"reshape {tuple(x.shape)} -> {shape} changes element count"
        )
    out = x.values.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.values.shape))

    return _finish("reshape", out.copy(), (x,), bwd)


def transpose2d(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise DimensionError(f"transpose2d needs a 2-d tensor, got {tuple(x.shape)}")
    out = x.values.T.copy()

    def bwd(g):
        _accum(x, g.T)

    return _finish("transpose2d", out, (x,), bwd)


def take_row(x: Tensor, t: int) -> Tensor:
    """Row t of a 2-d tensor as a 1-d tensor."""
    if x.values.ndim != 2:
        raise DimensionError(f"take_row needs a 2-d tensor, got {tuple(x.shape)}")
    if not 0 <= t < x.values.shape[0]:
        raise DimensionError(f"row {t} out of range for shape {tuple(x.shape)}")
    out = x.values[t].copy()

    def bwd(g):
        x.ensure_grad()
        x.grad[t] += g

    return _finish("take_row", out, (x,), bwd)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-d tensors of equal length into a (T, d) tensor."""
    if not rows:
        raise DimensionError("stack_rows of an empty list")
    d = rows[0].values.shape
    for r in rows[1:]:
        if r.values.shape != d:
            raise DimensionError("stack_rows inputs must share a shape")
    out = np.stack([r.values for r in rows], axis=0)

    def bwd(g):
        for i, r in enumerate(rows):
            _accum(r, g[i])

    return _finish("stack_rows", out, tuple(rows), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.values.sum(), dtype=x.values.dtype)

    def bwd(g):
        _accum(x, np.full_like(x.values, g.reshape(())))

    return _finish("sum_all", out, (x,), bwd)


def sum_squares(x: Tensor) -> Tensor:
    out = np.asarray((x.values * x.values).sum(), dtype=x.values.dtype)

    def bwd(g):
        _accum(x, 2.0 * x.values * g.reshape(()))

    return _finish("sum_squares", out, (x,), bwd)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 of a (T, d) tensor -> (d,)."""
    if x.values.ndim != 2:
        raise DimensionError(f"mean_rows needs a 2-d tensor, got {tuple(x.shape)}")
    t = x.values.shape[0]
    out = x.values.mean(axis=0)

    def bwd(g):
        _accum(x, np.broadcast_to(g / x.values.dtype.type(t), x.values.shape))

    return _finish("mean_rows", out, (x,), bwd)


def row_normalize(x: Tensor) -> Tensor:
    """Divide each row by its sum along the last axis."""
    s = x.values.sum(axis=-1, keepdims=True)
    y = x.values / s

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, (g - dot) / s)

    return _finish("row_normalize", y, (x,), bwd)


PROB_FLOOR = 1e-12


def neg_log_pick(probs: Tensor, index: int) -> Tensor:
    """-log(probs[index]) with the probability clamped to >= 1e-12.

    The elementary cross-entropy term for one sample; inside the clamped
    region the value is constant so its gradient is zero.
    """
    if probs.values.ndim != 1:
        raise DimensionError(f"neg_log_pick needs a 1-d tensor, got {tuple(probs.shape)}")
    if not 0 <= index < probs.values.shape[0]:
        raise DimensionError(f"class index {index} out of range")
    p = float(probs.values[index])
    clamped = max(p, PROB_FLOOR)
    out = np.asarray(-np.log(clamped), dtype=probs.values.dtype)

    def bwd(g):
        if p >= PROB_FLOOR:
            probs.ensure_grad()
            probs.grad[index] += -g.reshape(()) / probs.values.dtype.type(clamped)

    return _finish("neg_log_pick", out, (probs,), bwd)


def mean_scalars(terms: Sequence[Tensor]) -> Tensor:
    """Mean of scalar tensors, accumulated in argument order."""
    if not terms:
        raise DimensionError("mean_scalars of an empty list")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return scale(total, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: Optional[str]


def grad_check(forward_fn, params, eps: float = 1e-5) -> GradCheckResult:
    """Compare tape gradients against central finite differences.

    ``forward_fn`` is a zero-argument callable returning a scalar Tensor; it
    must be deterministic (two evaluations are compared bitwise, and a
    mismatch raises ContractError).  ``params`` maps parameter paths to the
    Tensors the function closes over.  The relative error for each scalar
    parameter is |g - fd| / max(|g|, |fd|, 1e-4); the worst one is returned
    together with the offending parameter path.
    """
    if eps <= 0:
        raise ContractError("grad_check eps must be positive")

    def run_value() -> float:
        out = forward_fn()
        if out.values.size != 1:
            raise ContractError("grad_check forward_fn must return a scalar")
        return float(out.values.reshape(()))

    with Tape() as tape:
        loss = forward_fn()
    if loss.values.size != 1:
        raise ContractError("grad_check forward_fn must return a scalar")
    base = float(loss.values.reshape(()))
    if run_value() != base:
        raise ContractError("non-deterministic forward detected during grad_check")

    for t in params.values():
        t.grad = np.zeros_like(t.values)
    tape.backward(loss)

    worst = 0.0
    worst_path = None
    for path, t in params.items():
        flat = t.values.reshape(-1)
        gflat = t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = run_value()
            flat[i] = orig - eps
            f_minus = run_value()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            g = float(gflat[i])
            rel = abs(g - fd) / max(abs(g), abs(fd), 1e-4)
            if rel > worst:
                worst = rel
                worst_path = f"{path}[{i}]"
    return GradCheckResult(worst, worst_path)
