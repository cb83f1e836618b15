"""Model assembly: the three ablation variants over a shared inception-style
convolutional backbone.

Parameters live in a flat ordered mapping keyed by hierarchical path
(e.g. ``backbone/block2/branch3/W``); weight leaves start with ``W`` and
bias leaves with ``b``, which is how the L2 penalty and initialiser tell
them apart.  The canonical shape table is a pure function of the config, so
parameter counts and checkpoint layouts are reproducible without a model
instance.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .rng import DeterministicRng
from .tensor import Tensor


class Variant(str, Enum):
    CNN_ONLY = "cnn_only"
    CNN_LSTM = "cnn_lstm"
    CNN_BILSTM_ATTN = "cnn_bilstm_attn"


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The backbone halves the spatial side once at the stem and once after
    each inception block, then an average pool with stride 1 brings the
    map to a side t with t*t*C == feature_dim.  feature_dim must factor as
    seq_len * feat_dim, the sequence layout handed to the recurrent stage.
    """
    variant: Variant = Variant.CNN_BILSTM_ATTN
    input_size: int = 96
    input_channels: int = 3
    stem_channels: int = 16
    blocks: tuple = ((4, 8, 4), (8, 16, 8), (32, 64, 32))
    feature_dim: int = 2048
    seq_len: int = 1
    feat_dim: int = 2048
    lstm_hidden: int = 128
    attention_dim: int = 64
    attention_width: int = 256
    head_hidden: int = 64
    dropout_rate: float = 0.5
    num_classes: int = 2

    def __post_init__(self):
        if not isinstance(self.variant, Variant):
            self.variant = Variant(self.variant)
        self.blocks = tuple(tuple(int(c) for c in blk) for blk in self.blocks)
        self.validate()

    def validate(self):
        if self.num_classes != 2:
            raise ConfigError(f"num_classes must be 2, got {self.num_classes}")
        if self.seq_len * self.feat_dim != self.feature_dim:
            raise ConfigError(
                f"seq_len*feat_dim = {self.seq_len}*{self.feat_dim} "
                f"!= feature_dim {self.feature_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.lstm_hidden < 1 or self.attention_dim < 1 or self.head_hidden < 1:
            raise ConfigError("hidden sizes must be >= 1")
        if self.attention_width < 0:
            raise ConfigError("attention_width must be >= 0")
        if not self.blocks or any(len(b) != 3 for b in self.blocks):
            raise ConfigError("blocks must be a non-empty list of (c1, c3, c5) triples")
        # spatial plan: each of the 1 + len(blocks) max-pools halves the side
        side = self.input_size
        for _ in range(1 + len(self.blocks)):
            if side % 2 != 0:
                raise ConfigError(
                    f"input_size {self.input_size} does not survive "
                    f"{1 + len(self.blocks)} spatial halvings")
            side //= 2
        c_final = sum(self.blocks[-1])
        if self.feature_dim % c_final != 0:
            raise ConfigError(
                f"feature_dim {self.feature_dim} not divisible by final "
                f"channel count {c_final}")
        t2 = self.feature_dim // c_final
        t = math.isqrt(t2)
        if t * t != t2:
            raise ConfigError(
                f"feature_dim/{c_final} = {t2} is not a perfect square; "
                "cannot form a square feature map")
        if t > side:
            raise ConfigError(
                f"target feature side {t} exceeds backbone output side {side}")

    @property
    def backbone_side(self) -> int:
        """Spatial side after the pooling halvings, before the final pool."""
        return self.input_size >> (1 + len(self.blocks))

    @property
    def feature_side(self) -> int:
        """Side t of the final t x t x C feature map."""
        return math.isqrt(self.feature_dim // sum(self.blocks[-1]))


def _conv_paths(prefix, k, cin, cout):
    return [(f"{prefix}/W", (k, k, cin, cout)), (f"{prefix}/b", (cout,))]


def _cell_paths(prefix, d_in, hidden):
    out = []
    for gate in ("i", "f", "o", "g"):
        out.append((f"{prefix}/W{gate}", (d_in + hidden, hidden)))
    for gate in ("i", "f", "o", "g"):
        out.append((f"{prefix}/b{gate}", (hidden,)))
    return out


def _dense_paths(prefix, d_in, d_out):
    return [(f"{prefix}/W", (d_in, d_out)), (f"{prefix}/b", (d_out,))]


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Canonical path -> shape table; defines checkpoint tensor order."""
    entries = []
    entries += _conv_paths("backbone/stem", 3, cfg.input_channels, cfg.stem_channels)
    cin = cfg.stem_channels
    for i, (c1, c3, c5) in enumerate(cfg.blocks, start=1):
        entries += _conv_paths(f"backbone/block{i}/branch1", 1, cin, c1)
        entries += _conv_paths(f"backbone/block{i}/branch3", 3, cin, c3)
        entries += _conv_paths(f"backbone/block{i}/branch5", 5, cin, c5)
        cin = c1 + c3 + c5

    if cfg.variant is Variant.CNN_ONLY:
        entries += _dense_paths("head/fc1", cfg.feature_dim, cfg.head_hidden)
        entries += _dense_paths("head/out", cfg.head_hidden, cfg.num_classes)
    elif cfg.variant is Variant.CNN_LSTM:
        entries += _cell_paths("lstm/fwd", cfg.feat_dim, cfg.lstm_hidden)
        entries += _dense_paths("head/out", cfg.lstm_hidden, cfg.num_classes)
    else:
        entries += _cell_paths("lstm/fwd", cfg.feat_dim, cfg.lstm_hidden)
        entries += _cell_paths("lstm/bwd", cfg.feat_dim, cfg.lstm_hidden)
        for name in ("query", "key", "value"):
            entries += _dense_paths(f"attn/{name}", 2 * cfg.lstm_hidden,
                                    cfg.attention_dim)
        entries += _dense_paths("head/fc1", cfg.attention_dim, cfg.head_hidden)
        entries += _dense_paths("head/out", cfg.head_hidden, cfg.num_classes)
    return OrderedDict(entries)


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def is_weight_path(path: str) -> bool:
    return path.rsplit("/", 1)[-1].startswith("W")


class ModelParams:
    """Ordered path -> Tensor mapping for one model instance."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    def __getitem__(self, path: str) -> Tensor:
        return self.tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self.tensors

    def paths(self):
        return list(self.tensors.keys())

    def items(self):
        return self.tensors.items()

    def weight_items(self):
        return [(p, t) for p, t in self.tensors.items() if is_weight_path(p)]

    def count(self) -> int:
        return sum(t.values.size for t in self.tensors.values())

    def clone(self) -> "ModelParams":
        out = OrderedDict()
        for path, t in self.tensors.items():
            nt = Tensor(t.values.copy())
            out[path] = nt
        return ModelParams(out)

    def astype(self, dtype) -> "ModelParams":
        out = OrderedDict()
        for path, t in self.tensors.items():
            out[path] = Tensor(t.values.astype(dtype))
        return ModelParams(out)


def _fans(shape) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:
        kh, kw, cin, cout = shape
        return kh * kw * cin, kh * kw * cout
    raise ContractError(f"no fan rule for weight shape {shape}")


def build_model(cfg: ModelConfig, rng: DeterministicRng,
                dtype=np.float32) -> ModelParams:
    """Allocate and initialise all parameters.

    Weights are Glorot-uniform from a per-path rng substream, so adding or
    removing one parameter does not shift any other parameter's draw.
    Biases start at zero except LSTM forget biases, which start at 1.0.
    """
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for path, shape in parameter_shapes(cfg).items():
        if is_weight_path(path):
            gen = rng.substream(f"init/{path}")
            fan_in, fan_out = _fans(shape)
            values = L.glorot_uniform(gen, fan_in, fan_out, shape, dtype=dtype)
        elif path.rsplit("/", 1)[-1] == "bf":
            values = np.ones(shape, dtype=dtype)
        else:
            values = np.zeros(shape, dtype=dtype)
        tensors[path] = Tensor(values)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# parameter views as layer structs
# ---------------------------------------------------------------------------

def _conv(p: ModelParams, prefix: str) -> L.ConvParams:
    return L.ConvParams(kernel=p[f"{prefix}/W"], bias=p[f"{prefix}/b"])


def _dense(p: ModelParams, prefix: str, activation: str = "none") -> L.DenseParams:
    return L.DenseParams(W=p[f"{prefix}/W"], b=p[f"{prefix}/b"],
                         activation=activation)


def _cell(p: ModelParams, prefix: str) -> L.LstmCellParams:
    return L.LstmCellParams(
        W_i=p[f"{prefix}/Wi"], W_f=p[f"{prefix}/Wf"],
        W_o=p[f"{prefix}/Wo"], W_g=p[f"{prefix}/Wg"],
        b_i=p[f"{prefix}/bi"], b_f=p[f"{prefix}/bf"],
        b_o=p[f"{prefix}/bo"], b_g=p[f"{prefix}/bg"])


def _attention(p: ModelParams, cfg: ModelConfig) -> L.SelfAttentionParams:
    return L.SelfAttentionParams(
        query=_dense(p, "attn/query"), key=_dense(p, "attn/key"),
        value=_dense(p, "attn/value"),
        attention_width=cfg.attention_width)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def backbone_forward(p: ModelParams, cfg: ModelConfig, image: Tensor) -> Tensor:
    """Image (S, S, C) -> feature map (t, t, C_final)."""
    h = T.tanh(T.conv2d_same(image, p["backbone/stem/W"], p["backbone/stem/b"]))
    h = T.pool2d(h, "max", 2, 2)
    for i in range(1, len(cfg.blocks) + 1):
        blk = L.InceptionBlockParams(
            branch1=_conv(p, f"backbone/block{i}/branch1"),
            branch3=_conv(p, f"backbone/block{i}/branch3"),
            branch5=_conv(p, f"backbone/block{i}/branch5"))
        h = L.inception_block_forward(h, blk)
        h = T.pool2d(h, "max", 2, 2)
    side, t = cfg.backbone_side, cfg.feature_side
    if t < side:
        # stride-1 average pool shrinking side -> t without losing channels
        h = T.pool2d(h, "avg", side - t + 1, 1)
    return h


def feature_reshape(fmap: Tensor, seq_len: int, feat_dim: int) -> Tensor:
    """Row-major (H, W, C) -> (seq_len, feat_dim); element count must match."""
    if fmap.values.size != seq_len * feat_dim:
        raise DimensionError(
            f"feature map has {fmap.values.size} elements, cannot reshape to "
            f"{seq_len}x{feat_dim}")
    return T.reshape(fmap, (seq_len, feat_dim))


def model_forward(p: ModelParams, cfg: ModelConfig, image: Tensor, mode: str,
                  gen: Optional[np.random.Generator] = None,
                  ) -> tuple[Tensor, Optional[Tensor]]:
    """Full forward pass -> (probs: (2,), attention map or None).

    ``mode`` selects dropout behaviour; train mode on the attention variant
    needs ``gen`` for the dropout masks (drawn in a fixed order, so one
    generator per sample keeps runs reproducible).
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got '{mode}'")
    expect = (cfg.input_size, cfg.input_size, cfg.input_channels)
    if tuple(image.shape) != expect:
        raise DimensionError(
            f"image shape {tuple(image.shape)} does not match model input {expect}")

    fmap = backbone_forward(p, cfg, image)

    if cfg.variant is Variant.CNN_ONLY:
        flat = T.reshape(fmap, (cfg.feature_dim,))
        h = L.dense_forward(flat, _dense(p, "head/fc1", "tanh"))
        probs = T.softmax(L.dense_forward(h, _dense(p, "head/out")))
        return probs, None

    if cfg.variant is Variant.CNN_LSTM:
        seq = feature_reshape(fmap, cfg.seq_len, cfg.feat_dim)
        states = L.lstm_scan(seq, _cell(p, "lstm/fwd"))
        probs = T.softmax(L.dense_forward(states[-1], _dense(p, "head/out")))
        return probs, None

    drop = L.DropoutSpec(cfg.dropout_rate, mode)
    fmap = L.dropout_forward(fmap, drop, gen)
    seq = feature_reshape(fmap, cfg.seq_len, cfg.feat_dim)
    states = L.bilstm_forward(
        seq, L.BiLstmParams(_cell(p, "lstm/fwd"), _cell(p, "lstm/bwd")))
    states = L.dropout_forward(states, drop, gen)
    ctx, attn = L.self_attention_forward(states, _attention(p, cfg))
    pooled = T.mean_rows(ctx)
    pooled = L.dropout_forward(pooled, drop, gen)
    h = L.dense_forward(pooled, _dense(p, "head/fc1", "tanh"))
    probs = T.softmax(L.dense_forward(h, _dense(p, "head/out")))
    return probs, attn


def predict(p: ModelParams, cfg: ModelConfig, image: Tensor) -> tuple[int, float]:
    """Eval-mode prediction -> (label, prob_ischemic).

    Label is the argmax of the class probabilities; an exact tie resolves
    to 0 (non-ischemic).
    """
    probs, _ = model_forward(p, cfg, image, "eval")
    v = probs.values
    label = 0 if v[0] >= v[1] else 1
    return label, float(v[1])


def tiny_config(variant: Variant) -> ModelConfig:
    """Small config for finite-difference checks: 12x12 input, one block,
    4x3 sequence, hidden size 4."""
    return ModelConfig(
        variant=variant, input_size=12, input_channels=3, stem_channels=2,
        blocks=((1, 1, 1),), feature_dim=12, seq_len=4, feat_dim=3,
        lstm_hidden=4, attention_dim=4, attention_width=256, head_hidden=4,
        dropout_rate=0.5)
