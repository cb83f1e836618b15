"""Training harness: cross-entropy + L2 objective, Adam with inverse-time
learning-rate decay, the epoch loop with patience-based convergence, and
evaluation/report emission.

Everything is deterministic given the config seed: parameter init,
augmentation, dropout masks, and batch order all come from keyed rng
substreams, and backward passes replay in fixed order, so two runs with
the same seed produce bitwise-identical checkpoints and reports.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as D
from . import tensor as T
from .errors import ConfigError, ContractError, DataError, NumericError
from .model import ModelConfig, ModelParams, build_model, model_forward
from .rng import DeterministicRng
from .tensor import Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    decay: float = 1e-6
    l2_lambda: float = 0.01
    dropout_rate: float = 0.5
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10          # epochs without train-loss improvement > 1e-4
    seed: int = 1

    MIN_IMPROVEMENT = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.decay < 0:
            raise ConfigError(f"decay must be >= 0, got {self.decay}")
        if self.l2_lambda < 0:
            raise ConfigError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


# ---------------------------------------------------------------------------
# objective pieces
# ---------------------------------------------------------------------------

def cross_entropy_loss(probs: Tensor, label: int) -> Tensor:
    """-log p(label); the probability is clamped to >= 1e-12 before the log."""
    if label not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {label}")
    return T.neg_log_pick(probs, label)


def l2_penalty(params: ModelParams, lam: float) -> Tensor:
    """lam * sum of squared entries over weight tensors (biases excluded)."""
    if lam < 0:
        raise ContractError(f"l2 lambda must be >= 0, got {lam}")
    weights = params.weight_items()
    if lam == 0.0 or not weights:
        dtype = weights[0][1].values.dtype if weights else np.float64
        return Tensor(np.asarray(0.0, dtype=dtype))
    total = T.sum_squares(weights[0][1])
    for _, w in weights[1:]:
        total = T.add(total, T.sum_squares(w))
    return T.scale(total, lam)


def effective_lr(base_lr: float, decay: float, step: int) -> float:
    """Inverse-time decay: base_lr / (1 + decay * step)."""
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    return base_lr / (1.0 + decay * step)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "AdamState":
        return cls(m={p: np.zeros_like(t.values) for p, t in params.items()},
                   v={p: np.zeros_like(t.values) for p, t in params.items()},
                   t=0)

    def clone(self) -> "AdamState":
        return AdamState(m={p: a.copy() for p, a in self.m.items()},
                         v={p: a.copy() for p, a in self.v.items()},
                         t=self.t)


def adam_step(state: AdamState, params: ModelParams, lr_t: float):
    """One Adam update over all parameters; clears gradients afterwards.

    Moment updates and bias correction follow the standard formulation:
    m = b1*m + (1-b1)*g; v = b2*v + (1-b2)*g^2; mhat = m/(1-b1^t);
    vhat = v/(1-b2^t); theta -= lr_t * mhat / (sqrt(vhat) + eps).
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for path, tensor in params.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.values)
        if g.shape != tensor.values.shape:
            raise ContractError(
                f"gradient shape {g.shape} mismatches parameter "
                f"'{path}' shape {tensor.values.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{path}'")
        m = state.m[path]
        v = state.v[path]
        m[...] = BETA1 * m + (1.0 - BETA1) * g
        v[...] = BETA2 * v + (1.0 - BETA2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        tensor.values[...] = tensor.values - lr_t * mhat / (np.sqrt(vhat) + EPSILON)
        tensor.grad = None


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> Optional[float]:
        return (self.tp + self.tn) / self.total if self.total else None

    @property
    def sensitivity(self) -> Optional[float]:
        d = self.tp + self.fn
        return self.tp / d if d else None

    @property
    def specificity(self) -> Optional[float]:
        d = self.tn + self.fp
        return self.tn / d if d else None


def metrics_from_pairs(pairs) -> Metrics:
    """Confusion counts from (true_label, predicted_label) pairs; the
    positive class is ischemic (label 1)."""
    m = Metrics()
    for true, pred in pairs:
        if true == 1:
            if pred == 1:
                m.tp += 1
            else:
                m.fn += 1
        else:
            if pred == 1:
                m.fp += 1
            else:
                m.tn += 1
    return m


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: Optional[float] = None
    val_accuracy: Optional[float] = None


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    seed: int
    adam: Optional[AdamState] = None


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _predict_from_probs(values: np.ndarray) -> int:
    return 0 if values[0] >= values[1] else 1


def _eval_pass(params: ModelParams, cfg: ModelConfig, samples, lam: float):
    """Eval-mode loss/accuracy over loaded samples -> (loss, accuracy)."""
    ce_sum = 0.0
    correct = 0
    for s in samples:
        probs, _ = model_forward(params, cfg, s.pixels, "eval")
        p = max(float(probs.values[s.label]), T.PROB_FLOOR)
        ce_sum += -math.log(p)
        if _predict_from_probs(probs.values) == s.label:
            correct += 1
    penalty = float(l2_penalty(params, lam).values)
    return ce_sum / len(samples) + penalty, correct / len(samples)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, split: D.DatasetSplit,
          aug_cfg: Optional[D.AugmentationConfig] = None,
          log=None) -> tuple[Checkpoint, list[EpochRecord]]:
    """Full training run -> (best-by-train-loss checkpoint, epoch records).

    Reported train loss/accuracy are the running train-mode values over the
    epoch's batches (loss includes the L2 term); validation metrics are
    eval-mode over the held-out entries, or absent when there are none.
    Stops at max_epochs or after ``patience`` consecutive epochs whose
    train loss fails to improve on the best by more than 1e-4.
    """
    if aug_cfg is None:
        aug_cfg = D.AugmentationConfig()
    rng = DeterministicRng(train_cfg.seed)
    model_cfg.dropout_rate = train_cfg.dropout_rate
    params = build_model(model_cfg, rng)
    adam = AdamState.fresh(params)

    train_samples = [D.load_image(e, model_cfg.input_size) for e in split.train]
    test_samples = [D.load_image(e, model_cfg.input_size) for e in split.test]

    best = Checkpoint(model_cfg, params.clone(), train_cfg.seed, adam.clone())
    best_loss = math.inf
    patience_best = math.inf
    stale = 0
    records: list[EpochRecord] = []

    for epoch in range(1, train_cfg.max_epochs + 1):
        loss_sum = 0.0
        correct = 0
        indices = list(range(len(train_samples)))
        for batch in D.batch_iter(indices, train_cfg.batch_size,
                                  train_cfg.seed, epoch):
            try:
                with T.Tape() as tape:
                    terms = []
                    for idx in batch:
                        sample = D.augment(train_samples[idx], aug_cfg,
                                           rng.substream("augment", idx, epoch))
                        gen = rng.substream("dropout", idx, epoch)
                        probs, _ = model_forward(params, model_cfg,
                                                 sample.pixels, "train", gen)
                        if _predict_from_probs(probs.values) == sample.label:
                            correct += 1
                        terms.append(cross_entropy_loss(probs, sample.label))
                    batch_loss = T.add(T.mean_scalars(terms),
                                       l2_penalty(params, train_cfg.l2_lambda))
                tape.backward(batch_loss)
                lr_t = effective_lr(train_cfg.learning_rate, train_cfg.decay,
                                    adam.t + 1)
                adam_step(adam, params, lr_t)
            except NumericError as exc:
                raise NumericError(
                    f"epoch {epoch}, step {adam.t + 1}: {exc}") from exc
            loss_sum += float(batch_loss.values) * len(batch)

        train_loss = loss_sum / len(train_samples)
        train_acc = correct / len(train_samples)
        val_loss = val_acc = None
        if test_samples:
            val_loss, val_acc = _eval_pass(params, model_cfg, test_samples,
                                           train_cfg.l2_lambda)
        rec = EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc)
        records.append(rec)
        if log is not None:
            log(rec)

        if train_loss < best_loss:
            best_loss = train_loss
            best = Checkpoint(model_cfg, params.clone(), train_cfg.seed,
                              adam.clone())
        if patience_best - train_loss > TrainConfig.MIN_IMPROVEMENT:
            patience_best = train_loss
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break

    return best, records


def evaluate(checkpoint: Checkpoint, entries) -> tuple[Metrics, list]:
    """Eval-mode pass over manifest entries -> (Metrics, misclassified).

    Misclassified rows are (path, true, predicted, prob_ischemic), sorted
    by descending confidence in the wrong class (ties by path).
    """
    if not entries:
        raise DataError("evaluate needs at least one manifest entry")
    cfg = checkpoint.config
    pairs = []
    wrong = []
    for entry in entries:
        sample = D.load_image(entry, cfg.input_size)
        probs, _ = model_forward(checkpoint.params, cfg, sample.pixels, "eval")
        pred = _predict_from_probs(probs.values)
        prob_ischemic = float(probs.values[1])
        pairs.append((entry.label, pred))
        if pred != entry.label:
            confidence = prob_ischemic if pred == 1 else 1.0 - prob_ischemic
            wrong.append((confidence, entry.path, entry.label, pred,
                          prob_ischemic))
    wrong.sort(key=lambda r: (-r[0], r[1]))
    misclassified = [(p, t, pr, prob) for _, p, t, pr, prob in wrong]
    return metrics_from_pairs(pairs), misclassified


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def atomic_write_bytes(path, payload: bytes):
    """Write via temp file + rename so readers never see partial output."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(value)


def write_curves(records: list[EpochRecord], path):
    lines = ["epoch,train_loss,train_accuracy,val_loss,val_accuracy"]
    for r in records:
        lines.append(",".join([
            str(r.epoch), repr(r.train_loss), repr(r.train_accuracy),
            _fmt(r.val_loss), _fmt(r.val_accuracy)]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def parse_curves(path) -> list[EpochRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != "epoch,train_loss,train_accuracy,val_loss,val_accuracy":
        raise DataError(f"curves file {path}: bad header")
    out = []
    for ln in lines[1:]:
        if not ln:
            continue
        parts = ln.split(",")
        if len(parts) != 5:
            raise DataError(f"curves file {path}: malformed row '{ln}'")
        out.append(EpochRecord(
            int(parts[0]), float(parts[1]), float(parts[2]),
            float(parts[3]) if parts[3] else None,
            float(parts[4]) if parts[4] else None))
    return out


def _pct(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:.2f}"


def format_metrics_table(rows, footer_lines=()) -> str:
    """rows: list of (model_name, Metrics).  Percentages to 2 decimals with
    raw confusion counts alongside, so rounded figures stay auditable."""
    name_w = max(20, *(len(name) for name, _ in rows)) if rows else 20
    lines = [f"{'Model':<{name_w}}  {'Accuracy':>9}  {'Sensitivity':>11}  "
             f"{'Specificity':>11}"]
    for name, m in rows:
        lines.append(f"{name:<{name_w}}  {_pct(m.accuracy):>9}  "
                     f"{_pct(m.sensitivity):>11}  {_pct(m.specificity):>11}")
    lines.append("")
    for name, m in rows:
        lines.append(f"counts {name}: TP={m.tp} FP={m.fp} FN={m.fn} TN={m.tn}")
    for extra in footer_lines:
        lines.append(extra)
    return "\n".join(lines) + "\n"


def write_misclassified(misclassified, path):
    lines = ["path,true_label,predicted_label,prob_ischemic"]
    for p, true, pred, prob in misclassified:
        lines.append(f"{p},{true},{pred},{repr(prob)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def emit_reports(records, metrics_rows, misclassified, out_dir,
                 footer_lines=()):
    """Write curves.csv, metrics.txt and misclassified.csv into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    if records is not None:
        write_curves(records, os.path.join(out_dir, "curves.csv"))
    if metrics_rows is not None:
        atomic_write_text(os.path.join(out_dir, "metrics.txt"),
                          format_metrics_table(metrics_rows, footer_lines))
    if misclassified is not None:
        write_misclassified(misclassified,
                            os.path.join(out_dir, "misclassified.csv"))
