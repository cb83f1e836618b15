"""Finite-difference verification suites.

Every layer type and all three end-to-end tiny-model variants are checked
in 64-bit with central differences (eps 1e-5).  All fixtures are built
from fixed seeds, so repeated runs report identical worst errors.  The
pass threshold used by the CLI is 1e-4.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import layers as L
from . import model as M
from . import tensor as T
from .errors import ConfigError
from .rng import DeterministicRng
from .tensor import GradCheckResult, Tensor

PASS_THRESHOLD = 1e-4


def _g(seed):
    return np.random.default_rng(seed)


def _t(gen, *shape, scale=1.0):
    return Tensor(gen.standard_normal(shape) * scale)


def _proj_loss(out: T.Tensor, proj: Tensor) -> T.Tensor:
    return T.sum_all(T.mul(out, proj))


def _check_dense():
    gen = _g(101)
    p = L.DenseParams(_t(gen, 5, 4), _t(gen, 4), "tanh")
    x = _t(gen, 5)
    proj = _t(gen, 4)
    return T.grad_check(
        lambda: _proj_loss(L.dense_forward(x, p), proj),
        {"x": x, "W": p.W, "b": p.b})


def _check_conv():
    gen = _g(102)
    x = _t(gen, 6, 5, 2)
    k = _t(gen, 3, 3, 2, 3, scale=0.5)
    b = _t(gen, 3, scale=0.1)
    proj = _t(gen, 6, 5, 3)
    return T.grad_check(
        lambda: _proj_loss(T.conv2d_same(x, k, b), proj),
        {"x": x, "kernel": k, "bias": b})


def _check_pool_max():
    gen = _g(103)
    # distinct well-separated values keep the argmax stable under eps shifts
    x = Tensor(gen.permutation(6 * 6 * 2).astype(np.float64).reshape(6, 6, 2))
    proj = _t(gen, 3, 3, 2)
    return T.grad_check(
        lambda: _proj_loss(T.pool2d(x, "max", 2, 2), proj), {"x": x})


def _check_pool_avg():
    gen = _g(104)
    x = _t(gen, 6, 6, 2)
    proj = _t(gen, 3, 3, 2)
    return T.grad_check(
        lambda: _proj_loss(T.pool2d(x, "avg", 2, 2), proj), {"x": x})


def _check_softmax_ce():
    gen = _g(105)
    z = _t(gen, 2)
    return T.grad_check(
        lambda: T.neg_log_pick(T.softmax(z), 1), {"logits": z})


def _check_inception():
    gen = _g(106)
    blk = L.InceptionBlockParams(
        L.ConvParams(_t(gen, 1, 1, 2, 1, scale=0.5), _t(gen, 1, scale=0.1)),
        L.ConvParams(_t(gen, 3, 3, 2, 1, scale=0.5), _t(gen, 1, scale=0.1)),
        L.ConvParams(_t(gen, 5, 5, 2, 1, scale=0.5), _t(gen, 1, scale=0.1)))
    x = _t(gen, 5, 5, 2)
    proj = _t(gen, 5, 5, 3)
    params = {"x": x,
              "branch1/W": blk.branch1.kernel, "branch1/b": blk.branch1.bias,
              "branch3/W": blk.branch3.kernel, "branch3/b": blk.branch3.bias,
              "branch5/W": blk.branch5.kernel, "branch5/b": blk.branch5.bias}
    return T.grad_check(
        lambda: _proj_loss(L.inception_block_forward(x, blk), proj), params)


def _make_cell(gen, d_in, hidden):
    return L.LstmCellParams(
        W_i=_t(gen, d_in + hidden, hidden, scale=0.4),
        W_f=_t(gen, d_in + hidden, hidden, scale=0.4),
        W_o=_t(gen, d_in + hidden, hidden, scale=0.4),
        W_g=_t(gen, d_in + hidden, hidden, scale=0.4),
        b_i=_t(gen, hidden, scale=0.1), b_f=_t(gen, hidden, scale=0.1),
        b_o=_t(gen, hidden, scale=0.1), b_g=_t(gen, hidden, scale=0.1))


def _cell_param_dict(prefix, cell):
    out = {}
    for gate in ("i", "f", "o", "g"):
        out[f"{prefix}W_{gate}"] = getattr(cell, f"W_{gate}")
        out[f"{prefix}b_{gate}"] = getattr(cell, f"b_{gate}")
    return out


def _check_lstm_cell():
    gen = _g(107)
    cell = _make_cell(gen, 3, 4)
    x = _t(gen, 4, 3)
    proj = _t(gen, 4, 4)
    params = {"x": x, **_cell_param_dict("", cell)}
    return T.grad_check(
        lambda: _proj_loss(T.stack_rows(L.lstm_scan(x, cell)), proj), params)


def _check_bilstm():
    gen = _g(108)
    p = L.BiLstmParams(_make_cell(gen, 2, 3), _make_cell(gen, 2, 3))
    x = _t(gen, 3, 2)
    proj = _t(gen, 3, 6)
    params = {"x": x,
              **_cell_param_dict("fwd/", p.forward_cell),
              **_cell_param_dict("bwd/", p.backward_cell)}
    return T.grad_check(
        lambda: _proj_loss(L.bilstm_forward(x, p), proj), params)


def _attn_params(gen, d_in, d_k, width):
    return L.SelfAttentionParams(
        query=L.DenseParams(_t(gen, d_in, d_k), _t(gen, d_k)),
        key=L.DenseParams(_t(gen, d_in, d_k), _t(gen, d_k)),
        value=L.DenseParams(_t(gen, d_in, d_k), _t(gen, d_k)),
        attention_width=width)


def _attn_param_dict(p):
    return {"q/W": p.query.W, "q/b": p.query.b,
            "k/W": p.key.W, "k/b": p.key.b,
            "v/W": p.value.W, "v/b": p.value.b}


def _check_attention():
    gen = _g(109)
    p = _attn_params(gen, 3, 4, width=100)   # window covers the sequence
    x = _t(gen, 4, 3)
    proj = _t(gen, 4, 4)
    return T.grad_check(
        lambda: _proj_loss(L.self_attention_forward(x, p)[0], proj),
        {"x": x, **_attn_param_dict(p)})


def _check_attention_masked():
    gen = _g(110)
    p = _attn_params(gen, 3, 4, width=2)     # |t-u| <= 1
    x = _t(gen, 5, 3)
    proj = _t(gen, 5, 4)
    return T.grad_check(
        lambda: _proj_loss(L.self_attention_forward(x, p)[0], proj),
        {"x": x, **_attn_param_dict(p)})


def _check_dropout_fixed_mask():
    gen = _g(111)
    x = _t(gen, 6, 5)
    proj = _t(gen, 6, 5)
    mask = (np.random.default_rng(7).random((6, 5)) >= 0.5) / 0.5
    mask_t = Tensor(mask)
    return T.grad_check(
        lambda: _proj_loss(T.mul(x, mask_t), proj), {"x": x})


def _check_model_variant(variant: M.Variant):
    cfg = M.tiny_config(variant)
    params = M.build_model(cfg, DeterministicRng(112), dtype=np.float64)
    gen = _g(113)
    img = Tensor(gen.random((cfg.input_size, cfg.input_size,
                             cfg.input_channels)) * 2 - 1)

    def loss():
        probs, _ = M.model_forward(params, cfg, img, "eval")
        return T.neg_log_pick(probs, 1)

    return T.grad_check(loss, dict(params.items()))


_LAYER_CHECKS = OrderedDict([
    ("dense", _check_dense),
    ("conv2d_same", _check_conv),
    ("pool2d_max", _check_pool_max),
    ("pool2d_avg", _check_pool_avg),
    ("softmax_cross_entropy", _check_softmax_ce),
    ("inception_block", _check_inception),
    ("lstm_cell", _check_lstm_cell),
    ("bilstm", _check_bilstm),
    ("self_attention", _check_attention),
    ("self_attention_masked", _check_attention_masked),
    ("dropout_fixed_mask", _check_dropout_fixed_mask),
])

_MODEL_CHECKS = OrderedDict([
    ("model_cnn_only", lambda: _check_model_variant(M.Variant.CNN_ONLY)),
    ("model_cnn_lstm", lambda: _check_model_variant(M.Variant.CNN_LSTM)),
    ("model_cnn_bilstm_attn",
     lambda: _check_model_variant(M.Variant.CNN_BILSTM_ATTN)),
])


def run_gradcheck_suite(module: str = "all") -> "OrderedDict[str, GradCheckResult]":
    """Run the named suite ('layers', 'model', or 'all') and return the
    per-component worst relative errors in a stable order."""
    if module == "layers":
        checks = _LAYER_CHECKS
    elif module == "model":
        checks = _MODEL_CHECKS
    elif module == "all":
        checks = OrderedDict(list(_LAYER_CHECKS.items())
                             + list(_MODEL_CHECKS.items()))
    else:
        raise ConfigError(
            f"gradcheck module must be 'all', 'layers' or 'model', got '{module}'")
    return OrderedDict((name, fn()) for name, fn in checks.items())
