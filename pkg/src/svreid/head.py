"""Pair comparison: square layer, dropout, two-way projection, softmax."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .backbone import ModelParams, forward_features
from .errors import ContractViolation
from .tensor import Tensor


class PairLabel(enum.IntEnum):
    """Class index into the two logits; SAME has one-hot target (1, 0)."""

    SAME = 0
    DIFFERENT = 1

    @property
    def one_hot(self) -> tuple[int, int]:
        return (1, 0) if self is PairLabel.SAME else (0, 1)


@dataclass
class VerificationHead:
    weight: Tensor  # 2 x D
    bias: Tensor  # 2
    dropout: float = 0.5

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[0] != 2:
            raise ContractViolation(f"head weight must be 2 x D, got {self.weight.shape}")
        if self.bias.shape != (2,):
            raise ContractViolation(f"head bias must have shape (2,), got {self.bias.shape}")

    @classmethod
    def zeros(cls, dim: int, dropout: float = 0.5, dtype=np.float32) -> "VerificationHead":
        return cls(
            Tensor(np.zeros((2, dim), dtype=dtype), requires_grad=True),
            Tensor(np.zeros(2, dtype=dtype), requires_grad=True),
            dropout,
        )

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"head.bias": self.bias, "head.weight": self.weight}

    def astype(self, dtype) -> "VerificationHead":
        return VerificationHead(
            Tensor(self.weight.data.astype(dtype), requires_grad=True),
            Tensor(self.bias.data.astype(dtype), requires_grad=True),
            self.dropout,
        )


def square_layer(f1: Tensor, f2: Tensor) -> Tensor:
    """Elementwise (f1 - f2)^2. Exactly symmetric because IEEE negation is exact."""
    if f1.shape != f2.shape:
        raise ContractViolation(f"square layer needs equal shapes, got {f1.shape} and {f2.shape}")
    return ops.square(ops.sub(f1, f2))


def head_logits(
    head: VerificationHead, fs: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None
) -> Tensor:
    if fs.ndim != 2 or fs.shape[1] != head.dim:
        raise ContractViolation(f"head expects N x {head.dim} input, got {fs.shape}")
    h = ops.dropout(fs, head.dropout, training, rng)
    return ops.linear(h, head.weight, head.bias)


def verification_forward(
    head: VerificationHead, fs: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """N x 2 probabilities; column 0 is P(same)."""
    return ops.softmax(head_logits(head, fs, training, rng).data)


def verification_loss(q_hat: np.ndarray, labels) -> float:
    """Mean over rows of -sum_i q_i log q_hat_i with one-hot q."""
    q_hat = np.asarray(q_hat, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = q_hat[np.arange(len(labels)), labels]
    with np.errstate(divide="ignore"):
        return float(np.mean(-np.log(picked)))


def describe(model: ModelParams, image: np.ndarray) -> Tensor:
    """Eval-mode descriptor of a single 3 x H x W image (batch of one)."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ContractViolation(f"expected a 3 x H x W image, got {image.shape}")
    return forward_features(model, Tensor(image[None].astype(model["stem.conv.weight"].dtype)), training=False)


def score_descriptors(head: VerificationHead, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    """Eval-mode P(same) for aligned rows of descriptors."""
    fs = square_layer(Tensor(np.atleast_2d(f1)), Tensor(np.atleast_2d(f2)))
    return verification_forward(head, fs)[:, 0]


def pair_score(model: ModelParams, head: VerificationHead, img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Probability that two standardized images show the same person."""
    fa = describe(model, img_a).data
    fb = describe(model, img_b).data
    return float(score_descriptors(head, fa, fb)[0])
