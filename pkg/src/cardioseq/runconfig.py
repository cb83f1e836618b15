"""Flat `key = value` run configuration files.

Every key is optional; defaults reproduce the reference training setup
(lr 1e-4 with decay 1e-6, L2 0.01, dropout 0.5, 1 x 2048 sequence layout,
LSTM hidden 128, attention width 256, 65-image train split).  Unknown keys
are rejected with the key name and line number.  Lines starting with `#`
are comments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig, Variant
from .training import TrainConfig


@dataclass
class RunSettings:
    variant: str = Variant.CNN_BILSTM_ATTN.value
    seq_len: int = 1
    feat_dim: int = 2048
    lstm_hidden: int = 128
    attention_width: int = 256
    learning_rate: float = 1e-4
    decay: float = 1e-6
    l2_lambda: float = 0.01
    dropout: float = 0.5
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    manifest: Optional[str] = None   # resolved relative to the config file
    train_count: int = 65
    seed: int = 1
    out_dir: str = "out"

    def model_config(self, variant: Optional[str] = None) -> ModelConfig:
        try:
            var = Variant(variant if variant is not None else self.variant)
        except ValueError:
            raise ConfigError(
                f"model.variant must be one of "
                f"{[v.value for v in Variant]}, got '{self.variant}'") from None
        return ModelConfig(
            variant=var,
            feature_dim=self.seq_len * self.feat_dim,
            seq_len=self.seq_len,
            feat_dim=self.feat_dim,
            lstm_hidden=self.lstm_hidden,
            attention_width=self.attention_width,
            dropout_rate=self.dropout)

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            decay=self.decay,
            l2_lambda=self.l2_lambda,
            dropout_rate=self.dropout,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed if seed is None else seed)


def _to_int(raw: str, key: str, lineno: int) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(
            f"line {lineno}: key '{key}' needs an integer, got '{raw}'") from None


def _to_float(raw: str, key: str, lineno: int) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(
            f"line {lineno}: key '{key}' needs a number, got '{raw}'") from None


# key -> (RunSettings attribute, converter); converters get (raw, key, lineno)
_KEYS = {
    "model.variant": ("variant", lambda raw, k, n: raw),
    "model.seq_len": ("seq_len", _to_int),
    "model.feat_dim": ("feat_dim", _to_int),
    "model.lstm_hidden": ("lstm_hidden", _to_int),
    "model.attention_width": ("attention_width", _to_int),
    "train.learning_rate": ("learning_rate", _to_float),
    "train.decay": ("decay", _to_float),
    "train.l2_lambda": ("l2_lambda", _to_float),
    "train.dropout": ("dropout", _to_float),
    "train.batch_size": ("batch_size", _to_int),
    "train.max_epochs": ("max_epochs", _to_int),
    "train.patience": ("patience", _to_int),
    "data.manifest": ("manifest", lambda raw, k, n: raw),
    "data.train_count": ("train_count", _to_int),
    "seed": ("seed", _to_int),
    "out_dir": ("out_dir", lambda raw, k, n: raw),
}


def parse_run_config(path) -> RunSettings:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config {path} is not valid UTF-8: {exc}") from exc

    settings = RunSettings()
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{path} line {lineno}: expected 'key = value', got '{stripped}'")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _KEYS:
            raise ConfigError(f"{path} line {lineno}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"{path} line {lineno}: duplicate key '{key}'")
        seen.add(key)
        attr, convert = _KEYS[key]
        settings = replace(settings, **{attr: convert(raw, key, lineno)})

    if settings.manifest is not None and not os.path.isabs(settings.manifest):
        settings = replace(settings,
                           manifest=os.path.join(base, settings.manifest))
    # fail fast on bad values rather than at first use
    settings.model_config()
    settings.train_config()
    return settings


def default_settings() -> RunSettings:
    return RunSettings()
