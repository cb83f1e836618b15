"""Binary checkpoint serialization (format `CSQ1`).

Layout, all integers little-endian:

    4 bytes   magic "CSQ1"
    u32       format version (1)
    u32       config text length, then UTF-8 `key = value` lines
              (model config plus the run seed)
    u32       tensor count
    per tensor:
        u32   name length, UTF-8 name
        u32   rank, then u32 dims[rank]
        u8    dtype code (1 = 32-bit float; the only supported code)
        raw   values, little-endian float32, row-major
    optionally (when optimizer state is saved):
        u32   tensor count (2 per parameter)
        ...   same tensor encoding, names `adam/m/<path>` then `adam/v/<path>`
        u64   Adam step

Loading validates magic, version, and the tensor name/shape table against
the canonical table derived from the embedded config, so a checkpoint can
never silently load into the wrong architecture.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import ModelConfig, ModelParams, Variant, parameter_shapes
from .tensor import Tensor
from .training import AdamState, Checkpoint, atomic_write_bytes

MAGIC = b"CSQ1"
VERSION = 1
_DTYPE_F32 = 1


# ---------------------------------------------------------------------------
# config text block
# ---------------------------------------------------------------------------

_CONFIG_KEYS = (
    "variant", "input_size", "input_channels", "stem_channels", "blocks",
    "feature_dim", "seq_len", "feat_dim", "lstm_hidden", "attention_dim",
    "attention_width", "head_hidden", "dropout_rate", "num_classes", "seed",
)


def _blocks_to_text(blocks) -> str:
    return ";".join(",".join(str(c) for c in blk) for blk in blocks)


def _blocks_from_text(text: str):
    try:
        return tuple(tuple(int(c) for c in blk.split(","))
                     for blk in text.split(";"))
    except ValueError as exc:
        raise CheckpointError(f"bad blocks value '{text}' in checkpoint") from exc


def config_to_text(cfg: ModelConfig, seed: int) -> str:
    values = {
        "variant": cfg.variant.value,
        "input_size": cfg.input_size,
        "input_channels": cfg.input_channels,
        "stem_channels": cfg.stem_channels,
        "blocks": _blocks_to_text(cfg.blocks),
        "feature_dim": cfg.feature_dim,
        "seq_len": cfg.seq_len,
        "feat_dim": cfg.feat_dim,
        "lstm_hidden": cfg.lstm_hidden,
        "attention_dim": cfg.attention_dim,
        "attention_width": cfg.attention_width,
        "head_hidden": cfg.head_hidden,
        "dropout_rate": repr(cfg.dropout_rate),
        "num_classes": cfg.num_classes,
        "seed": seed,
    }
    return "".join(f"{k} = {values[k]}\n" for k in _CONFIG_KEYS)


def config_from_text(text: str) -> tuple[ModelConfig, int]:
    parsed = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(
                f"checkpoint config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_KEYS:
            raise CheckpointError(
                f"checkpoint config line {lineno}: unknown key '{key}'")
        parsed[key] = value
    missing = [k for k in _CONFIG_KEYS if k not in parsed]
    if missing:
        raise CheckpointError(
            f"checkpoint config missing keys: {', '.join(missing)}")
    try:
        cfg = ModelConfig(
            variant=Variant(parsed["variant"]),
            input_size=int(parsed["input_size"]),
            input_channels=int(parsed["input_channels"]),
            stem_channels=int(parsed["stem_channels"]),
            blocks=_blocks_from_text(parsed["blocks"]),
            feature_dim=int(parsed["feature_dim"]),
            seq_len=int(parsed["seq_len"]),
            feat_dim=int(parsed["feat_dim"]),
            lstm_hidden=int(parsed["lstm_hidden"]),
            attention_dim=int(parsed["attention_dim"]),
            attention_width=int(parsed["attention_width"]),
            head_hidden=int(parsed["head_hidden"]),
            dropout_rate=float(parsed["dropout_rate"]),
            num_classes=int(parsed["num_classes"]))
    except (ValueError, ConfigError) as exc:
        raise CheckpointError(f"invalid checkpoint config: {exc}") from exc
    try:
        seed = int(parsed["seed"])
    except ValueError as exc:
        raise CheckpointError(f"invalid checkpoint seed: {parsed['seed']}") from exc
    return cfg, seed


# ---------------------------------------------------------------------------
# binary encoding
# ---------------------------------------------------------------------------

def _encode_tensor(name: str, values: np.ndarray) -> bytes:
    if values.dtype != np.float32:
        raise CheckpointError(
            f"tensor '{name}' has dtype {values.dtype}; checkpoints store "
            "float32 only")
    raw_name = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw_name)), raw_name,
             struct.pack("<I", values.ndim)]
    parts += [struct.pack("<I", d) for d in values.shape]
    parts.append(struct.pack("<B", _DTYPE_F32))
    parts.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes, path: str):
        self.payload = payload
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.payload[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def at_end(self) -> bool:
        return self.pos == len(self.payload)


def _read_tensor(r: _Reader) -> tuple[str, np.ndarray]:
    name = r.take(r.u32()).decode("utf-8")
    rank = r.u32()
    if rank > 8:
        raise CheckpointError(f"{r.path}: implausible tensor rank {rank}")
    shape = tuple(r.u32() for _ in range(rank))
    code = r.u8()
    if code != _DTYPE_F32:
        raise CheckpointError(
            f"{r.path}: tensor '{name}' has unsupported dtype code {code}")
    count = int(np.prod(shape)) if shape else 1
    raw = r.take(count * 4)
    values = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return name, values


def save_checkpoint(ckpt: Checkpoint, path):
    config_text = config_to_text(ckpt.config, ckpt.seed).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(config_text)), config_text]
    items = list(ckpt.params.items())
    parts.append(struct.pack("<I", len(items)))
    for name, tensor in items:
        parts.append(_encode_tensor(name, tensor.values))
    if ckpt.adam is not None:
        parts.append(struct.pack("<I", 2 * len(items)))
        for name, _ in items:
            parts.append(_encode_tensor(f"adam/m/{name}", ckpt.adam.m[name]))
        for name, _ in items:
            parts.append(_encode_tensor(f"adam/v/{name}", ckpt.adam.v[name]))
        parts.append(struct.pack("<Q", ckpt.adam.t))
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(payload, str(path))
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a CSQ1 checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    try:
        config_text = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: config block is not UTF-8") from exc
    cfg, seed = config_from_text(config_text)
    expected = parameter_shapes(cfg)

    count = r.u32()
    if count != len(expected):
        raise CheckpointError(
            f"{path}: tensor count {count} does not match config "
            f"({len(expected)} parameters)")
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for want_name, want_shape in expected.items():
        name, values = _read_tensor(r)
        if name != want_name:
            raise CheckpointError(
                f"{path}: tensor order mismatch: found '{name}', "
                f"expected '{want_name}'")
        if values.shape != tuple(want_shape):
            raise CheckpointError(
                f"{path}: tensor '{name}' has shape {values.shape}, "
                f"config requires {tuple(want_shape)}")
        tensors[name] = Tensor(values)
    params = ModelParams(tensors)

    adam = None
    if not r.at_end():
        adam_count = r.u32()
        if adam_count != 2 * len(expected):
            raise CheckpointError(
                f"{path}: optimizer section has {adam_count} tensors, "
                f"expected {2 * len(expected)}")
        m, v = {}, {}
        for prefix, target in (("adam/m/", m), ("adam/v/", v)):
            for want_name, want_shape in expected.items():
                name, values = _read_tensor(r)
                if name != prefix + want_name:
                    raise CheckpointError(
                        f"{path}: optimizer tensor order mismatch: found "
                        f"'{name}', expected '{prefix + want_name}'")
                if values.shape != tuple(want_shape):
                    raise CheckpointError(
                        f"{path}: optimizer tensor '{name}' shape mismatch")
                target[want_name] = values
        step = r.u64()
        adam = AdamState(m=m, v=v, t=step)
    if not r.at_end():
        raise CheckpointError(f"{path}: trailing bytes after checkpoint data")
    return Checkpoint(cfg, params, seed, adam)
