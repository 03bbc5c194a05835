"""Alternating minibatch SGD training of the discriminator and generator.

Each iteration does exactly one discriminator update followed by one generator
update, each on its own fresh minibatch drawn uniformly with replacement:

* D step: ``W_D -= rho_D * sum_i d/dW_D [bce(D(X_i, Y_i), 1) + bce(D(X_i, G(X_i)), 0)]``
  with ``G`` frozen;
* G step: ``W_G -= rho_G * sum_i d/dW_G [l_adv * bce(D(X_i, G(X_i)), 1)
  + l_p * |G(X_i) - Y_i|_p^p + l_gdl * gdl(G(X_i), Y_i)]`` with ``D`` frozen.

Per-sample losses are summed, not averaged. Batch norm runs on batch
statistics throughout training; running statistics are refreshed only for the
network being updated.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import nn
from .data import WindowDataset
from .losses import LossWeights, combine_generator_losses, d_loss
from .models import GAN, discriminator_forward, generator_forward
from .tensor import Tensor, gradients

log = logging.getLogger(__name__)

CASE_RATES = {"case1": (0.0005, 0.0005), "case2": (0.00001, 0.000005)}  # (rho_D, rho_G)
LOG_COLUMNS = ["iteration", "d_loss", "g_total", "g_adv", "g_lp", "g_gdl", "d_real_mean", "d_fake_mean", "seconds"]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: "TrainRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    case: str = "case1"
    rho_d: float | None = None
    rho_g: float | None = None
    lambda_adv: float = 0.2
    lambda_lp: float = 1.0
    lambda_gdl: float = 1.0
    p: int = 2
    batch_size: int = 4
    history: int = 4
    max_iterations: int = 20000
    convergence_window: int = 200
    convergence_tol: float = 0.005
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.case not in CASE_RATES:
            raise ValueError(f"case must be one of {sorted(CASE_RATES)}, got {self.case!r}")
        default_d, default_g = CASE_RATES[self.case]
        self.rho_d = default_d if self.rho_d is None else float(self.rho_d)
        self.rho_g = default_g if self.rho_g is None else float(self.rho_g)
        if self.rho_d < 0 or self.rho_g < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size (M) must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        self.weights  # validates the loss weights

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_adv, self.lambda_lp, self.lambda_gdl, self.p)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainRecord:
    iteration: int
    d_loss: float
    g_total: float
    g_adv: float
    g_lp: float
    g_gdl: float
    d_real_mean: float
    d_fake_mean: float
    seconds: float
    d_indices: np.ndarray = field(repr=False, default=None)
    g_indices: np.ndarray = field(repr=False, default=None)

    def row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


class TrainLog(list):
    """Append-only list of :class:`TrainRecord`, optionally streamed to CSV."""

    def __init__(self, path=None):
        super().__init__()
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(LOG_COLUMNS)

    def append(self, record: TrainRecord) -> None:
        super().append(record)
        if self._fh is not None:
            self._writer.writerow(
                [record.iteration] + [f"{v:.9g}" for v in record.row()[1:-1]] + [f"{record.seconds:.3f}"]
            )
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self])


def sample_minibatch(n_samples: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``batch_size`` samples drawn uniformly with replacement."""
    if n_samples < 1:
        raise ValueError("cannot sample from an empty dataset")
    return rng.integers(0, n_samples, size=batch_size)


class DiscriminatorTerms(NamedTuple):
    per_sample: Tensor  # M losses
    d_real: Tensor
    d_fake: Tensor


def discriminator_terms(gan: GAN, dataset: WindowDataset, index: np.ndarray, rng: np.random.Generator,
                        *, update_stats: bool = True) -> DiscriminatorTerms:
    """Per-sample discriminator losses on the minibatch ``index`` (generator frozen).

    Real and generated candidates pass through D together as one 2M batch.
    """
    g_in, d_hist, target = dataset.batch(index)
    fake = generator_forward(gan.generator, g_in, "train", frozen=True).data
    m = len(index)
    history = np.concatenate([d_hist, d_hist])
    candidates = np.concatenate([target, fake])
    probs = discriminator_forward(gan.discriminator, history, candidates, "train", rng=rng, update_stats=update_stats)
    d_real, d_fake = probs[:m], probs[m:]
    return DiscriminatorTerms(d_loss(d_real, d_fake), d_real, d_fake)


def generator_terms(gan: GAN, dataset: WindowDataset, index: np.ndarray, weights: LossWeights,
                    rng: np.random.Generator, *, update_stats: bool = True):
    """Per-sample weighted generator losses on ``index`` (discriminator frozen)."""
    g_in, d_hist, target = dataset.batch(index)
    y_hat = generator_forward(gan.generator, g_in, "train", update_stats=update_stats)
    d_fake = discriminator_forward(gan.discriminator, d_hist, y_hat, "train", rng=rng, frozen=True)
    return combine_generator_losses(d_fake, y_hat, target, weights), d_fake


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


def train_step(gan: GAN, cfg: TrainConfig, dataset: WindowDataset, rng: np.random.Generator,
               iteration: int = 0) -> TrainRecord:
    """One discriminator update followed by one generator update, in place."""
    t0 = time.perf_counter()
    d_idx = sample_minibatch(len(dataset), cfg.batch_size, rng)
    d_terms = discriminator_terms(gan, dataset, d_idx, rng)
    d_total = d_terms.per_sample.sum()
    d_params = gan.discriminator.parameters()
    d_grads = gradients(d_total, d_params)

    def record(g_losses=None, d_fake_g=None, g_idx=None) -> TrainRecord:
        nan = float("nan")
        return TrainRecord(
            iteration=iteration,
            d_loss=d_total.item(),
            g_total=g_losses.total.data.sum() if g_losses else nan,
            g_adv=g_losses.adv.data.sum() if g_losses else nan,
            g_lp=g_losses.lp.data.sum() if g_losses else nan,
            g_gdl=g_losses.gdl.data.sum() if g_losses else nan,
            d_real_mean=float(d_terms.d_real.data.mean()),
            d_fake_mean=float(d_terms.d_fake.data.mean()),
            seconds=time.perf_counter() - t0,
            d_indices=d_idx,
            g_indices=g_idx,
        )

    if not _finite(d_total.item()) or not all(np.isfinite(g).all() for g in d_grads):
        raise TrainingDiverged(f"non-finite discriminator loss at iteration {iteration}", record())
    nn.sgd_step(d_params, d_grads, cfg.rho_d)

    g_idx = sample_minibatch(len(dataset), cfg.batch_size, rng)
    g_losses, d_fake_g = generator_terms(gan, dataset, g_idx, cfg.weights, rng)
    g_params = gan.generator.parameters()
    g_grads = gradients(g_losses.total.sum(), g_params)
    rec = record(g_losses, d_fake_g, g_idx)
    if not _finite(rec.g_total) or not all(np.isfinite(g).all() for g in g_grads):
        raise TrainingDiverged(f"non-finite generator loss at iteration {iteration}", rec)
    nn.sgd_step(g_params, g_grads, cfg.rho_g)
    rec.seconds = time.perf_counter() - t0
    return rec


def converged(g_totals: np.ndarray, window: int, tol: float) -> bool:
    """True when the mean G loss of the last ``window`` iterations moved < ``tol`` (relative)
    from the mean of the ``window`` before it. Checked only at multiples of ``window``."""
    if window <= 0 or tol <= 0 or len(g_totals) < 2 * window or len(g_totals) % window:
        return False
    last = g_totals[-window:].mean()
    prev = g_totals[-2 * window : -window].mean()
    return abs(last - prev) < tol * abs(prev)


def smoothed(values: np.ndarray, window: int = 100) -> np.ndarray:
    """Trailing moving average; entry ``i`` averages ``values[max(0, i-window+1) .. i]``."""
    values = np.asarray(values, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def train(
    gan: GAN,
    cfg: TrainConfig,
    dataset: WindowDataset,
    out_dir=None,
    *,
    save_extra: Callable[[Path], None] | None = None,
) -> TrainLog:
    """Run :func:`train_step` until convergence or ``cfg.max_iterations``.

    With ``out_dir`` the log streams to ``trainlog.csv``, a checkpoint is written
    every ``cfg.checkpoint_every`` iterations (``ckpt_<iteration>.ckpt``) and the
    final state goes to ``checkpoint.ckpt``. On divergence the last good
    checkpoints are left in place and :class:`TrainingDiverged` propagates.
    """
    if len(dataset) < 1:
        raise ValueError("training dataset is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trainlog = TrainLog(out / "trainlog.csv" if out is not None else None)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    try:
        for it in range(1, cfg.max_iterations + 1):
            try:
                rec = train_step(gan, cfg, dataset, rng, it)
            except TrainingDiverged as exc:
                trainlog.append(exc.record)
                log.error("%s; last good checkpoint kept", exc)
                raise
            trainlog.append(rec)
            if it % 100 == 0:
                log.info("iter %d  d_loss %.4f  g_total %.4f  g_lp %.4f", it, rec.d_loss, rec.g_total, rec.g_lp)
            if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                gan.save(out / f"ckpt_{it:06d}.ckpt")
            if converged(trainlog.series("g_total"), cfg.convergence_window, cfg.convergence_tol):
                log.info("converged at iteration %d", it)
                break
    finally:
        trainlog.close()
    if out is not None:
        gan.save(out / "checkpoint.ckpt")
        if save_extra is not None:
            save_extra(out)
    return trainlog
