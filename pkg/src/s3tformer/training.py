"""BPTT training: AdamW, warmup + cosine schedule, global-norm clipping and the epoch loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint
from .config import TrainConfig
from .data import iterate_batches
from .model import S3TFormer, predict, tet_loss

NO_DECAY = ("bn.gamma", "bn.beta", "alpha_logit", "decay_logit", "tau_logit")


class NumericError(FloatingPointError):
    pass


def decays(name: str) -> bool:
    return not any(name.endswith(s) for s in NO_DECAY)


class AdamW:
    """Adam with decoupled weight decay, applied multiplicatively before the moment update."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, no_decay: Callable[[str], bool] | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decays = (lambda n: not no_decay(n)) if no_decay else decays
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name}")
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay and self.decays(name):
                p *= 1 - lr * self.weight_decay
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {**{f"m.{k}": v for k, v in self.m.items()}, **{f"v.{k}": v for k, v in self.v.items()}}

    def load_arrays(self, tensors: dict[str, np.ndarray], step: int) -> None:
        for k in self.params:
            self.m[k][...] = tensors[f"optim.m.{k}"]
            self.v[k][...] = tensors[f"optim.v.{k}"]
        self.t = step


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class Schedule:
    base_lr: float = 0.01
    warmup_epochs: int = 10
    total_epochs: int = 250
    final_lr: float = 1e-5

    @classmethod
    def from_config(cls, c: TrainConfig) -> "Schedule":
        return cls(c.lr, c.warmup_epochs, c.epochs, c.final_lr)


def lr_at(epoch: float, s: Schedule) -> float:
    """Linear warmup to ``base_lr``, then cosine down to ``final_lr`` at the last epoch."""
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs})")
    if epoch < s.warmup_epochs:
        return s.base_lr * (epoch + 1) / s.warmup_epochs
    span = s.total_epochs - s.warmup_epochs - 1
    progress = (epoch - s.warmup_epochs) / span if span > 0 else 1.0
    return s.final_lr + 0.5 * (s.base_lr - s.final_lr) * (1 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------- #


def run_batches(model: S3TFormer, X: np.ndarray, batch_size: int, mode: str = "infer") -> np.ndarray:
    """Readout trajectories ``[T, S, C]`` for samples ``X [S, T, 3, N, M]``."""
    outs = []
    for idx in iterate_batches(len(X), batch_size):
        outs.append(model.forward(X[idx].swapaxes(0, 1), mode).u_traj)
    if not outs:
        return np.zeros((model.cfg.T, 0, model.cfg.n_classes))
    return np.concatenate(outs, axis=1)


def accuracy(u_traj: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(u_traj[-1], axis=-1) == y))


def evaluate(model: S3TFormer, X: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    return accuracy(run_batches(model, X, batch_size), y)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_val: float = float("-inf")
    best_epoch: int = -1
    seconds: float = 0.0

    @property
    def final(self) -> dict:
        return self.history[-1]


def train_epoch(model: S3TFormer, opt: AdamW, X, y, c: TrainConfig, epoch: int, sched: Schedule):
    lr = lr_at(epoch, sched)
    rng = np.random.default_rng([c.seed, epoch])
    loss_sum, correct, n = 0.0, 0, 0
    events: dict[str, list[int]] = {}
    for idx in iterate_batches(len(X), c.batch_size, rng):
        model.store.zero_grad()
        out = model.forward(X[idx].swapaxes(0, 1), "train")
        loss, g = tet_loss(model.readout_logits(out), y[idx], return_grad=True)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        model.backward(g)
        clip_grad_norm(model.grads, c.clip_norm)
        opt.step(model.grads, lr)
        loss_sum += loss * len(idx)
        correct += int(np.sum(predict(out) == y[idx]))
        n += len(idx)
        for k, (e, s) in out.spike_stats.items():
            acc = events.setdefault(k, [0, 0])
            acc[0] += e
            acc[1] += s
    fr = {k: e / s for k, (e, s) in events.items() if s}
    return lr, loss_sum / n, correct / n, fr


def train(model: S3TFormer, X, y, X_val, y_val, c: TrainConfig, out_dir: str | Path | None = None,
          resume: str | Path | None = None, log: Callable[[dict], None] | None = None) -> TrainResult:
    """Train in place.  With ``out_dir`` set, writes ``metrics.jsonl``, ``last.ckpt`` and ``best.ckpt``.

    The best checkpoint tracks validation accuracy (training accuracy when no
    validation set is given); ties keep the earlier epoch.
    """
    if len(X) == 0:
        raise ValueError("empty training set")
    sched = Schedule.from_config(c)
    opt = AdamW(model.params, c.lr, tuple(c.betas), c.eps, c.weight_decay)
    res = TrainResult()
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        _, tensors, meta = checkpoint.read(resume)
        checkpoint.restore(model, tensors)
        opt.load_arrays(tensors, meta["optim_step"])
        start = meta["epoch"] + 1
        res.best_val, res.best_epoch = meta["best_val"], meta["best_epoch"]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.jsonl"
        if resume is None:
            metrics.write_text("")
    t0 = time.perf_counter()
    for epoch in range(start, c.epochs):
        lr, loss, train_acc, fr = train_epoch(model, opt, X, y, c, epoch, sched)
        val_acc = evaluate(model, X_val, y_val, c.eval_batch_size) if len(y_val) else None
        row = {"epoch": epoch, "lr": lr, "train_loss": loss, "train_acc": train_acc, "val_acc": val_acc, "fr": fr}
        res.history.append(row)
        score = val_acc if val_acc is not None else train_acc
        improved = score > res.best_val
        if improved:
            res.best_val, res.best_epoch = score, epoch
        if out is not None:
            with open(metrics, "a") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")
            meta = {"epoch": epoch, "best_val": res.best_val, "best_epoch": res.best_epoch}
            checkpoint.save(out / "last.ckpt", model, opt, meta)
            if improved:
                checkpoint.save(out / "best.ckpt", model, opt, meta)
        if log is not None:
            log(row)
    res.seconds = time.perf_counter() - t0
    return res
