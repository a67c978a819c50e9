"""Losses, optimizers, learning-rate schedule and the training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError, TrainingDivergedError

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    lam: float = 0.1
    intervals: tuple = (1,)

    def __post_init__(self):
        self.intervals = tuple(int(i) for i in self.intervals)
        if self.lam < 0:
            raise ConfigError("must be >= 0", key="loss.lam")
        if not self.intervals or any(i < 1 for i in self.intervals):
            raise ConfigError("intervals must be positive integers", key="loss.intervals")


@dataclass
class OptimizerConfig:
    lr: float = 5e-3
    decay: float = 0.1
    milestones: tuple = (80, 90, 100)
    epochs: int = 110
    batch_size: int = 256
    weight_decay: float = 1e-5
    method: str = "adam"
    betas: tuple = (0.9, 0.999)
    beta3: float = 0.999
    eps: float = 1e-8
    max_steps: int | None = None

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.betas = tuple(float(b) for b in self.betas)
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError("must be ascending", key="optim.milestones")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ConfigError(f"milestone {self.milestones[-1]} not below epochs={self.epochs}",
                              key="optim.milestones")
        if self.method not in ("adam", "adamod"):
            raise ConfigError("expected 'adam' or 'adamod'", key="optim.method")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", key="optim.batch_size")
        if self.lr < 0:
            raise ConfigError("must be >= 0", key="optim.lr")


def learning_rate(cfg: OptimizerConfig, epoch: int) -> float:
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * cfg.decay ** passed


# ---------------------------------------------------------------------- losses


def _check_pair(pred, gt):
    pred, gt = nx.as_tensor(pred), nx.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")
    return pred, gt


def mpjpe_loss(pred, gt):
    """Mean Euclidean joint error over every leading axis."""
    pred, gt = _check_pair(pred, gt)
    return nx.mean(nx.norm_lastdim(pred - gt))


def motion_loss(pred, gt, intervals=(1,)):
    """Mean L2 error of temporal displacement vectors ``p[t + d] - p[t]``.

    Works on (B, T, J, 3); the result is averaged over intervals.
    """
    pred, gt = _check_pair(pred, gt)
    T = pred.shape[1]
    if T < 2:
        raise ShapeError(f"motion loss needs at least 2 frames, got {T}")
    terms = []
    for d in intervals:
        if not 0 < d < T:
            raise ShapeError(f"motion interval {d} must lie in (0, {T})")
        dp = pred[:, d:] - pred[:, :-d]
        dg = gt[:, d:] - gt[:, :-d]
        terms.append(nx.mean(nx.norm_lastdim(dp - dg)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return nx.scale(total, 1.0 / len(terms))


def total_loss(pred, gt, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    lp = mpjpe_loss(pred, gt)
    if cfg.lam == 0:
        return lp
    return lp + nx.scale(motion_loss(pred, gt, cfg.intervals), cfg.lam)


# ------------------------------------------------------------------ optimizers


class Adam:
    """Adam with optional AdaMod step bounding and L2 decay on selected params.

    With ``method="adamod"`` the per-element step size is clipped by its own
    exponential moving average (smoothing ``beta3``).
    """

    def __init__(self, named_params, cfg: OptimizerConfig, decay_names=()):
        self.params = list(named_params)
        self.cfg = cfg
        self.decay_names = set(decay_names)
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.s = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr):
        cfg = self.cfg
        b1, b2 = cfg.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for n, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if cfg.weight_decay and n in self.decay_names:
                g = g + cfg.weight_decay * p.data
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            rate = (1.0 / c1) / (np.sqrt(self.v[n] / c2) + cfg.eps)
            if cfg.method == "adamod":
                self.s[n] = cfg.beta3 * self.s[n] + (1 - cfg.beta3) * rate
                rate = np.minimum(rate, self.s[n])
            p.data -= lr * rate * self.m[n]


# ------------------------------------------------------------------ data model


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_mpjpe: float
    val_mpjpe: float
    steps: int
    wall_time: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1
    steps: int = 0
    step_losses: list = field(default_factory=list)

    def losses(self):
        return [e.train_loss for e in self.epochs]

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for e in self.epochs:
                fh.write(json.dumps(asdict(e)) + "\n")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate_mpjpe(model, x, y, batch_size=64):
    total, count = 0.0, 0
    for i in range(0, len(x), batch_size):
        pred = model.predict(x[i:i + batch_size])
        err = np.linalg.norm(pred - y[i:i + batch_size], axis=-1)
        total += err.sum()
        count += err.size
    return total / count


def train(model, dataset, opt_cfg: OptimizerConfig, loss_cfg: LossConfig, rng,
          val=None, out_dir=None, save_fn=None, log_fn=None) -> TrainReport:
    """Fit ``model`` on ``dataset.x`` / ``dataset.y`` windows.

    ``val`` is an optional ``(x, y)`` pair; the training windows are used when
    it is missing. When ``out_dir`` is given the best model is checkpointed
    there through ``save_fn(path, model)``.
    """
    x, y = dataset.x, dataset.y
    if len(x) == 0:
        raise ValueError("training dataset is empty")
    if val is None:
        val = (x, y)
    opt = Adam(model.named_parameters(), opt_cfg, model.conv_weight_names())
    report = TrainReport()
    for epoch in range(opt_cfg.epochs):
        if opt_cfg.max_steps is not None and report.steps >= opt_cfg.max_steps:
            break
        lr = learning_rate(opt_cfg, epoch)
        start = time.perf_counter()
        losses, errs = [], []
        for idx in _batches(len(x), opt_cfg.batch_size, rng):
            if opt_cfg.max_steps is not None and report.steps >= opt_cfg.max_steps:
                break
            opt.zero_grad()
            with nx.Tape() as tape:
                pred = model.forward(x[idx], train=True, rng=rng)
                loss = total_loss(pred, y[idx], loss_cfg)
                err = mpjpe_loss(pred, y[idx]).item()
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, step {report.steps}")
            tape.backward(loss)
            for name, p in opt.params:
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise TrainingDivergedError(f"non-finite gradient in {name} at step {report.steps}")
            opt.step(lr)
            report.steps += 1
            model.step += 1
            report.step_losses.append(value)
            losses.append(value)
            errs.append(err)
        val_err = evaluate_mpjpe(model, *val)
        rec = EpochRecord(epoch, lr, float(np.mean(losses)), float(np.mean(errs)),
                          float(val_err), report.steps, time.perf_counter() - start)
        report.epochs.append(rec)
        log.info("epoch %d lr %.2e loss %.5f val %.5f", epoch, lr, rec.train_loss, val_err)
        if log_fn is not None:
            log_fn(rec)
        if val_err < report.best_val:
            report.best_val, report.best_epoch = val_err, epoch
            if out_dir is not None and save_fn is not None:
                save_fn(os.path.join(out_dir, "best.ckpt"), model)
    return report
