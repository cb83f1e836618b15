"""Neural layers built on the autodiff primitives.

Each layer is a plain parameter dataclass plus a pure forward function, so
the same code runs under a recording tape for training and tape-free for
evaluation.  Recurrent and attention layers operate on single sequences
(no batch axis); batching is done by looping samples under one tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


def glorot_uniform(gen: np.random.Generator, fan_in: int, fan_out: int,
                   shape, dtype=np.float32) -> np.ndarray:
    """Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

@dataclass
class DenseParams:
    W: Tensor          # (d_in, d_out)
    b: Tensor          # (d_out,)
    activation: str = "none"   # "tanh" | "none"


def dense_forward(x: Tensor, p: DenseParams) -> Tensor:
    out = T.add(T.matmul(x, p.W), p.b)
    if p.activation == "tanh":
        return T.tanh(out)
    if p.activation == "none":
        return out
    raise ContractError(f"dense activation must be 'tanh' or 'none', got '{p.activation}'")


# ---------------------------------------------------------------------------
# convolution blocks
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    kernel: Tensor     # (kh, kw, Cin, Cout)
    bias: Tensor       # (Cout,)


def conv_tanh_forward(x: Tensor, p: ConvParams) -> Tensor:
    return T.tanh(T.conv2d_same(x, p.kernel, p.bias))


@dataclass
class InceptionBlockParams:
    """Three parallel same-padded conv branches (1x1, 3x3, 5x5) whose tanh
    outputs are concatenated along channels."""
    branch1: ConvParams
    branch3: ConvParams
    branch5: ConvParams


def inception_block_forward(x: Tensor, p: InceptionBlockParams) -> Tensor:
    return T.concat_channels([
        conv_tanh_forward(x, p.branch1),
        conv_tanh_forward(x, p.branch3),
        conv_tanh_forward(x, p.branch5),
    ])


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmCellParams:
    """Gate weights act on the concatenation [x_t; h_prev].

    Shapes: W_* are (d_in + hidden, hidden), b_* are (hidden,).  The forget
    bias is initialised to 1.0 so early training does not erase state.
    """
    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    @property
    def hidden_size(self) -> int:
        return self.W_i.shape[1]


def lstm_cell_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
                   p: LstmCellParams) -> tuple[Tensor, Tensor]:
    """One step of the standard LSTM recurrence; returns (h_t, c_t)."""
    z = T.concat_channels([x_t, h_prev])
    i = T.sigmoid(T.add(T.matmul(z, p.W_i), p.b_i))
    f = T.sigmoid(T.add(T.matmul(z, p.W_f), p.b_f))
    o = T.sigmoid(T.add(T.matmul(z, p.W_o), p.b_o))
    g = T.tanh(T.add(T.matmul(z, p.W_g), p.b_g))
    c_t = T.add(T.mul(f, c_prev), T.mul(i, g))
    h_t = T.mul(o, T.tanh(c_t))
    return h_t, c_t


def lstm_scan(xs: Tensor, p: LstmCellParams, reverse: bool = False) -> list[Tensor]:
    """Run the cell over a (T, d) sequence; returns hidden states, one per
    timestep, indexed in the original sequence order."""
    if xs.values.ndim != 2:
        raise DimensionError(f"lstm_scan expects (T, d) input, got {tuple(xs.shape)}")
    steps = xs.shape[0]
    if steps == 0:
        raise DimensionError("lstm_scan on an empty sequence")
    hidden = p.hidden_size
    h = Tensor(np.zeros(hidden, dtype=xs.values.dtype))
    c = Tensor(np.zeros(hidden, dtype=xs.values.dtype))
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    out: list[Optional[Tensor]] = [None] * steps
    for t in order:
        h, c = lstm_cell_step(T.take_row(xs, t), h, c, p)
        out[t] = h
    return out  # type: ignore[return-value]


@dataclass
class BiLstmParams:
    forward_cell: LstmCellParams
    backward_cell: LstmCellParams


def bilstm_forward(xs: Tensor, p: BiLstmParams) -> Tensor:
    """Bidirectional LSTM over (T, d) -> (T, 2*hidden).

    Row t concatenates the forward state after reading x_0..x_t with the
    backward state after reading x_{T-1}..x_t.
    """
    fwd = lstm_scan(xs, p.forward_cell, reverse=False)
    bwd = lstm_scan(xs, p.backward_cell, reverse=True)
    rows = [T.concat_channels([f, b]) for f, b in zip(fwd, bwd)]
    return T.stack_rows(rows)


# ---------------------------------------------------------------------------
# self-attention
# ---------------------------------------------------------------------------

@dataclass
class SelfAttentionParams:
    """Sigmoid-scored self-attention with a symmetric locality window.

    Projections are linear dense layers; scores are Q.K^T, scaled by
    1/sqrt(d_k) when scale_scores is set (the default), passed through a
    sigmoid, masked to |t - u| <= attention_width / 2, and sum-normalised
    per row before weighting V.
    """
    query: DenseParams
    key: DenseParams
    value: DenseParams
    attention_width: int
    scale_scores: bool = True


def attention_mask(seq_len: int, width: int) -> np.ndarray:
    """Binary (T, T) mask, 1 where |t - u| <= width / 2."""
    idx = np.arange(seq_len)
    return (np.abs(idx[:, None] - idx[None, :]) <= width / 2).astype(np.float64)


def self_attention_forward(xs: Tensor, p: SelfAttentionParams) -> tuple[Tensor, Tensor]:
    """Returns (context, weights): context is (T, d_v), weights the (T, T)
    normalised attention map (useful for inspection)."""
    if xs.values.ndim != 2:
        raise DimensionError(f"attention expects (T, d) input, got {tuple(xs.shape)}")
    q = dense_forward(xs, p.query)
    k = dense_forward(xs, p.key)
    v = dense_forward(xs, p.value)
    scores = T.matmul(q, T.transpose2d(k))
    if p.scale_scores:
        scores = T.scale(scores, 1.0 / np.sqrt(q.shape[1]))
    a = T.sigmoid(scores)
    seq_len = xs.shape[0]
    mask = attention_mask(seq_len, p.attention_width)
    if not mask.all():
        # constant mask: multiplying keeps gradients only inside the window
        a = T.mul(a, Tensor(mask.astype(a.values.dtype)))
    weights = T.row_normalize(a)
    context = T.matmul(weights, v)
    return context, weights


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

@dataclass
class DropoutSpec:
    rate: float
    mode: str = "train"    # "train" | "eval"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ContractError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("train", "eval"):
            raise ContractError(f"dropout mode must be 'train' or 'eval', got '{self.mode}'")


def dropout_forward(x: Tensor, spec: DropoutSpec,
                    gen: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: train mode zeroes each unit with probability rate
    and scales survivors by 1/(1-rate); eval mode is the identity, so no
    rescaling is ever needed at inference."""
    if spec.mode == "eval" or spec.rate == 0.0:
        return x
    if gen is None:
        raise ContractError("train-mode dropout needs a random generator")
    keep = (gen.random(x.values.shape) >= spec.rate)
    mask = keep.astype(x.values.dtype) / x.values.dtype.type(1.0 - spec.rate)
    return T.mul(x, Tensor(mask))
