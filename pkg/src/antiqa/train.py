"""Losses, optimizer and the two-stage training loop.

Both training stages (proxy pretraining on mapped OCR confidence, then
finetuning on MOS labels) minimize the same objective: a convex
combination alpha * mse + (1 - alpha) * rank of a regression term and a
pairwise ordering term. Optimization is AdamW with decoupled weight
decay and a stepped learning-rate schedule.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict
from typing import Dict, Iterable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contained NaN or infinity."""


@dataclass(frozen=True)
class LossConfig:
    """alpha weighs the regression term; (1 - alpha) weighs the ranking term."""
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class OptimConfig:
    """AdamW and schedule hyperparameters.

    Defaults follow the reference recipe: lr 1e-4, weight decay 0.5,
    batch size 4, 20 + 20 epochs, lr halved every 5 epochs, seed 42.
    Adam betas/eps are the conventional (0.9, 0.999)/1e-8.
    """
    lr: float = 1e-4
    weight_decay: float = 0.5
    batch_size: int = 4
    epochs_pretrain: int = 20
    epochs_finetune: int = 20
    lr_step: int = 5
    lr_gamma: float = 0.5
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.lr_step, self.eps) <= 0:
            raise ValueError("lr, batch_size, lr_step and eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise ValueError("lr_gamma must be in (0, 1]")
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise ValueError("epoch counts must be >= 0")


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error between predictions and fixed targets."""
    t = np.asarray(target, dtype=pred.data.dtype)
    if pred.data.ndim != 1 or t.shape != pred.shape:
        raise ValueError(f"mse_loss needs matching 1-d vectors, got {pred.shape} and {t.shape}")
    if pred.data.size == 0:
        raise ValueError("mse_loss on empty vectors")
    diff = pred - Tensor(t)
    return T.tmean(diff * diff)


def rank_pairs(target: np.ndarray):
    """Index pairs (i, j), i < j, with unequal targets, plus comparison signs."""
    t = np.asarray(target, dtype=np.float64)
    n = t.shape[0]
    ii, jj = np.triu_indices(n, k=1)
    keep = t[ii] != t[jj]
    return ii[keep], jj[keep], np.sign(t[ii[keep]] - t[jj[keep]])


def rank_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Pairwise ordering loss: mean over non-tied pairs of
    softplus(-sign(y_i - y_j) * (p_i - p_j)).

    Tied-target pairs carry zero gradient and a constant ln 2 offset, so
    they are excluded from both the sum and the pair count. If every
    pair is tied the loss is 0 and a warning is emitted.
    """
    if pred.data.ndim != 1 or pred.data.size < 2:
        raise ValueError(f"rank_loss needs a 1-d vector of length >= 2, got {pred.shape}")
    ii, jj, signs = rank_pairs(target)
    if len(ii) == 0:
        warnings.warn("rank_loss: all target pairs are tied; returning 0", stacklevel=2)
        return Tensor(np.zeros((), dtype=pred.data.dtype))
    diff = T.take(pred, ii) - T.take(pred, jj)
    margin = diff * Tensor((-signs).astype(pred.data.dtype))
    return T.tmean(T.softplus(margin))


def total_loss(pred: Tensor, target: np.ndarray, config: LossConfig):
    """alpha * mse + (1 - alpha) * rank; returns (loss, mse_value, rank_value)."""
    mse = mse_loss(pred, target)
    if pred.data.size >= 2:
        rank = rank_loss(pred, target)
    else:
        rank = Tensor(np.zeros((), dtype=pred.data.dtype))
    loss = mse * config.alpha + rank * (1.0 - config.alpha)
    return loss, float(mse.data), float(rank.data)


def lr_at(epoch: int, config: OptimConfig) -> float:
    """Stepped schedule: lr * gamma^floor(epoch / step)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.lr_gamma ** (epoch // config.lr_step)


def decayed_param(name: str) -> bool:
    """Weight decay applies to weights only, not biases or norm affines."""
    return name.endswith(".weight")


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Moments are float64 regardless of the parameter dtype, keyed by
    parameter path so they can be checkpointed.
    """

    def __init__(self, params: Dict[str, Tensor], config: OptimConfig):
        self.params = params
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros(t.shape, dtype=np.float64) for k, t in params.items()}
        self.v = {k: np.zeros(t.shape, dtype=np.float64) for k, t in params.items()}

    def step(self, lr: Optional[float] = None):
        """One update from the gradients currently stored on the params."""
        cfg = self.config
        if lr is None:
            lr = cfg.lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient in {name}")
            g = g.astype(np.float64, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay > 0.0 and decayed_param(name):
                update = update + lr * cfg.weight_decay * p.data
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        """Moment arrays for checkpointing, in a stable order."""
        out = {}
        for name in self.params:
            out[f"adam_m.{name}"] = self.m[name]
            out[f"adam_v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step_count: int):
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam_m.{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"adam_v.{name}"], dtype=np.float64)
        self.step_count = step_count


@dataclass
class EpochLog:
    stage: str
    epoch: int
    lr: float
    loss_total: float
    loss_mse: float
    loss_rank: float
    n_batches: int

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class StageResult:
    params: Dict[str, Tensor]
    optimizer: AdamW
    log: list
    aborted: bool = False
    abort_reason: Optional[str] = None


def train_stage(features: np.ndarray, targets: np.ndarray, net,
                loss_config: LossConfig, optim_config: OptimConfig,
                epochs: int, rng: np.random.Generator,
                stage: str = "train",
                optimizer: Optional[AdamW] = None,
                on_epoch=None) -> StageResult:
    """Run one training stage over an in-memory dataset.

    ``features`` is (N, C, S, S) in the model dtype; ``targets`` is (N,)
    with values on the MOS scale. Minibatches are drawn by seeded
    shuffling each epoch; a non-finite loss or gradient aborts the stage
    and the parameters are rolled back to the end of the last completed
    epoch. ``on_epoch`` (if given) is called with each EpochLog.
    """
    n = features.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match {n} samples")
    if targets.min() < 0.0 or targets.max() > 5.0:
        raise ValueError("targets must lie in [0, 5]")

    params = net.params
    opt = optimizer if optimizer is not None else AdamW(params, optim_config)
    dropout_rng = rng
    logs: list = []
    bs = optim_config.batch_size
    snapshot = {k: t.data.copy() for k, t in params.items()}

    for epoch in range(epochs):
        lr = lr_at(epoch, optim_config)
        order = rng.permutation(n)
        tot = tot_mse = tot_rank = 0.0
        seen = 0
        n_batches = 0
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            xb = Tensor(features[idx])
            tape = T.GraphTape()
            with tape:
                pred = net.forward(xb, train=True, rng=dropout_rng)
                loss, mse_v, rank_v = total_loss(pred, targets[idx], loss_config)
            loss_v = float(loss.data)
            if not np.isfinite(loss_v):
                _rollback(params, snapshot)
                return StageResult(params, opt, logs, aborted=True,
                                   abort_reason=f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            tape.backward(loss)
            try:
                opt.step(lr=lr)
            except NonFiniteGradientError as exc:
                _rollback(params, snapshot)
                return StageResult(params, opt, logs, aborted=True, abort_reason=str(exc))
            k = len(idx)
            tot += loss_v * k
            tot_mse += mse_v * k
            tot_rank += rank_v * k
            seen += k
            n_batches += 1
        entry = EpochLog(stage=stage, epoch=epoch, lr=lr,
                         loss_total=tot / seen, loss_mse=tot_mse / seen,
                         loss_rank=tot_rank / seen, n_batches=n_batches)
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        snapshot = {k: t.data.copy() for k, t in params.items()}

    return StageResult(params, opt, logs)


def _rollback(params: Dict[str, Tensor], snapshot: Dict[str, np.ndarray]):
    for k, t in params.items():
        t.data = snapshot[k].copy()
