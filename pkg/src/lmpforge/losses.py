"""Training objectives for the price GAN.

Matrix losses reduce over the last two axes, so a batch ``N x m x n`` yields one
value per sample; the trainer sums those per-sample terms over the minibatch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

from .tensor import DimensionError, Tensor, as_tensor

PROB_EPSILON = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 0.2
    lambda_lp: float = 1.0
    lambda_gdl: float = 1.0
    p: int = 2

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_lp", "lambda_gdl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.lambda_adv == self.lambda_lp == self.lambda_gdl == 0:
            raise ValueError("at least one loss weight must be positive")
        if int(self.p) != self.p or self.p < 1:
            raise ValueError(f"norm order p must be an integer >= 1, got {self.p}")


def bce(prob, label: float) -> Tensor:
    """Binary cross-entropy ``-[s ln k + (1 - s) ln(1 - k)]`` with ``k`` clamped to [eps, 1 - eps]."""
    k = as_tensor(prob).clip(PROB_EPSILON, 1.0 - PROB_EPSILON)
    if label == 1:
        return -k.log()
    if label == 0:
        return -(1.0 - k).log()
    return -(k.log() * label + (1.0 - k).log() * (1.0 - label))


def d_loss(d_real, d_fake) -> Tensor:
    """Discriminator loss: real scored as 1, generated scored as 0."""
    return bce(d_real, 1) + bce(d_fake, 0)


def g_adv_loss(d_fake) -> Tensor:
    return bce(d_fake, 1)


def _check_pair(y_hat: Tensor, y: Tensor, name: str) -> None:
    if y_hat.shape != y.shape:
        raise DimensionError(f"{name}: prediction shape {y_hat.shape} != target shape {y.shape}")
    if y_hat.ndim < 2:
        raise DimensionError(f"{name}: expects matrices, got shape {y_hat.shape}")


def lp_loss(y_hat, y, p: int = 2) -> Tensor:
    """``sum |y_hat - y|^p`` over the matrix entries (p-th power of the entry-wise p-norm)."""
    y_hat, y = as_tensor(y_hat), as_tensor(y)
    _check_pair(y_hat, y, "lp_loss")
    return ((y_hat - y).abs() ** p).sum(axis=(-2, -1))


def gdl_loss(y_hat, y) -> Tensor:
    """Gradient difference loss with absolute (exponent 1) differences.

    Vertical terms cover row pairs (i-1, i), horizontal terms column pairs
    (j-1, j); boundary cells without a neighbour contribute nothing.
    """
    y_hat, y = as_tensor(y_hat), as_tensor(y)
    _check_pair(y_hat, y, "gdl_loss")
    if y.shape[-2] < 2 or y.shape[-1] < 2:
        raise DimensionError(f"gdl_loss needs at least a 2 x 2 matrix, got {y.shape[-2:]}")
    true_v = (y[..., 1:, :] - y[..., :-1, :]).abs()
    pred_v = (y_hat[..., 1:, :] - y_hat[..., :-1, :]).abs()
    true_h = (y[..., :, :-1] - y[..., :, 1:]).abs()
    pred_h = (y_hat[..., :, :-1] - y_hat[..., :, 1:]).abs()
    return (true_v - pred_v).abs().sum(axis=(-2, -1)) + (true_h - pred_h).abs().sum(axis=(-2, -1))


class GeneratorLoss(NamedTuple):
    total: Tensor
    adv: Tensor
    lp: Tensor
    gdl: Tensor


def combine_generator_losses(d_fake, y_hat, y, weights: LossWeights) -> GeneratorLoss:
    """Weighted generator objective from a discriminator score and a forecast."""
    adv = g_adv_loss(d_fake)
    lp = lp_loss(y_hat, y, weights.p)
    gdl = gdl_loss(y_hat, y)
    total = adv * weights.lambda_adv + lp * weights.lambda_lp + gdl * weights.lambda_gdl
    return GeneratorLoss(total, adv, lp, gdl)


def g_total_loss(
    history,
    y,
    weights: LossWeights,
    generator: Callable[[Tensor], Tensor],
    discriminator: Callable[[Tensor, Tensor], Tensor],
) -> GeneratorLoss:
    """Run ``generator`` on ``history`` and score the result against ``y``.

    ``discriminator(history, candidate)`` must return the probability that the
    candidate is the true next step.
    """
    y_hat = generator(as_tensor(history))
    d_fake = discriminator(as_tensor(history), y_hat)
    return combine_generator_losses(d_fake, y_hat, y, weights)
