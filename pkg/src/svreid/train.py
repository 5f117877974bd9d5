"""RMSprop training of the Siamese verification network."""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .backbone import ModelParams, forward_features
from .checkpoint import export_checkpoint
from .data import IdentityDataset, PairBatch, positive_pairs, sample_pair_batch
from .errors import ContractViolation, DivergenceError
from .head import VerificationHead, head_logits, score_descriptors, square_layer
from .imaging import AugmentConfig
from .ops import softmax_cross_entropy
from .tensor import Tensor, backward, zero_grad

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.svr1"
LOG_NAME = "train_log.csv"
LOG_HEADER = "epoch,loss,pair_accuracy,seconds"


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from one run seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def derive_seed(seed: int, name: str) -> int:
    """Integer seed for APIs that take one, drawn from the named sub-stream."""
    return int(substream(seed, name).integers(2**31))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 18
    batch_size: int = 48
    rho: float = 0.9
    eps: float = 1e-7
    dropout: float = 0.5
    pos_ratio: float = 0.5
    steps_per_epoch: Optional[int] = None  # default: one pass over the positive pairs
    steps: Optional[int] = None  # total step budget; overrides epochs when set
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or not 0 < self.rho < 1 or self.eps <= 0 or self.epochs < 1:
            raise ContractViolation(f"invalid training config {self}")
        if self.batch_size < 1 or (self.steps is not None and self.steps < 0):
            raise ContractViolation(f"invalid training config {self}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ContractViolation(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")


@dataclass
class OptimizerState:
    """RMSprop running average of squared gradients, one array per parameter."""

    v: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float = 1e-4,
    rho: float = 0.9,
    eps: float = 1e-7,
) -> None:
    """v <- rho v + (1 - rho) g^2;  p <- p - lr g / (sqrt(v) + eps).

    Parameter arrays are replaced, not written in place. Only names present
    in ``grads`` are touched, so running statistics are never updated here.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractViolation(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        dtype = p.data.dtype
        v = state.v.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = (rho * v + (1 - rho) * (g * g)).astype(dtype)
        state.v[name] = v
        p.data = (p.data - lr * g / (np.sqrt(v) + eps)).astype(dtype)


@dataclass
class EpochRow:
    epoch: int
    loss: float
    pair_accuracy: float
    seconds: float

    def csv(self) -> str:
        return f"{self.epoch},{self.loss:.8f},{self.pair_accuracy:.6f},{self.seconds:.3f}"


@dataclass
class TrainLog:
    rows: list[EpochRow] = field(default_factory=list)
    config: Optional[TrainConfig] = None
    seed: int = 0
    checkpoint: Optional[Path] = None

    def to_csv(self) -> str:
        return "\n".join([LOG_HEADER] + [r.csv() for r in self.rows]) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


@dataclass
class StepResult:
    loss: float
    probs: np.ndarray


def trainable_tensors(params: ModelParams, head: VerificationHead) -> dict[str, Tensor]:
    out = dict(params.trainable())
    out.update(head.tensors())
    return out


def pair_predictions(p_same: np.ndarray) -> np.ndarray:
    """Predicted "same" strictly above 0.5; exact ties count as "different"."""
    return np.asarray(p_same) > 0.5


def train_step(
    params: ModelParams,
    head: VerificationHead,
    batch: PairBatch,
    state: OptimizerState,
    config: TrainConfig,
    dropout_rng: np.random.Generator,
) -> StepResult:
    """One forward/backward/update on a pair batch; both branches read the same ``params``."""
    f1 = forward_features(params, Tensor(batch.images1), training=True)
    f2 = forward_features(params, Tensor(batch.images2), training=True)
    logits = head_logits(head, square_layer(f1, f2), training=True, rng=dropout_rng)
    loss, probs = softmax_cross_entropy(logits, batch.labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"loss became non-finite ({value})")
    tensors = trainable_tensors(params, head)
    zero_grad(tensors.values())
    grads = backward(loss, tensors)
    rmsprop_step(tensors, grads, state, config.lr, config.rho, config.eps)
    return StepResult(value, probs)


def default_steps_per_epoch(dataset: IdentityDataset, config: TrainConfig) -> int:
    per_batch = max(1.0, config.batch_size * config.pos_ratio)
    return max(1, math.ceil(len(positive_pairs(dataset)) / per_batch))


def evaluate_pair_accuracy(params: ModelParams, head: VerificationHead, batch: PairBatch) -> float:
    """Eval-mode fraction of pairs classified correctly at threshold 0.5."""
    if len(batch) == 0:
        return float("nan")
    f1 = forward_features(params, Tensor(batch.images1), training=False).data
    f2 = forward_features(params, Tensor(batch.images2), training=False).data
    predicted_same = pair_predictions(score_descriptors(head, f1, f2))
    return float(np.mean(predicted_same == (batch.labels == 0)))


def train(
    dataset: IdentityDataset,
    params: ModelParams,
    head: VerificationHead,
    config: TrainConfig,
    augment_config: Optional[AugmentConfig] = None,
    out_dir=None,
) -> tuple[Optional[Path], TrainLog]:
    """Train in place; returns (final checkpoint path or None, per-epoch log).

    With ``out_dir`` set, the checkpoint is rewritten after every epoch and
    the CSV log after every epoch. On a non-finite loss the parameters from
    before the failing step are saved and DivergenceError is raised.
    """
    augment_config = augment_config if augment_config is not None else AugmentConfig()
    head.dropout = config.dropout
    spe = config.steps_per_epoch or default_steps_per_epoch(dataset, config)
    total = config.steps if config.steps is not None else spe * config.epochs
    n_epochs = math.ceil(total / spe) if total else 0

    sampler_rng = substream(config.seed, "sampler")
    augment_rng = substream(config.seed, "augment")
    dropout_rng = substream(config.seed, "dropout")
    state = OptimizerState()
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / CHECKPOINT_NAME if out is not None else None
    train_log = TrainLog(config=config, seed=config.seed, checkpoint=ckpt)

    step = 0
    for epoch in range(1, n_epochs + 1):
        start = time.perf_counter()
        losses, correct, seen = [], 0, 0
        for _ in range(min(spe, total - step)):
            batch = sample_pair_batch(
                dataset, config.batch_size, config.pos_ratio, augment_config, sampler_rng, augment_rng
            )
            try:
                result = train_step(params, head, batch, state, config, dropout_rng)
            except DivergenceError:
                if ckpt is not None:
                    export_checkpoint(params, ckpt, head)
                    train_log.write_csv(out / LOG_NAME)
                raise
            step += 1
            losses.append(result.loss)
            correct += int(np.sum(pair_predictions(result.probs[:, 0]) == (batch.labels == 0)))
            seen += len(batch)
        row = EpochRow(epoch, float(np.mean(losses)), correct / seen, time.perf_counter() - start)
        train_log.rows.append(row)
        log.info("epoch %d: loss %.4f pair accuracy %.3f (%.1fs)", row.epoch, row.loss, row.pair_accuracy, row.seconds)
        if out is not None:
            export_checkpoint(params, ckpt, head)
            train_log.write_csv(out / LOG_NAME)
    if out is not None:
        export_checkpoint(params, ckpt, head)
        train_log.write_csv(out / LOG_NAME)
    return ckpt, train_log
