"""Desk-scale benchmark task: a 5-class synthetic set on a 9-joint chain and a small model.

Shared by the acceptance suite and the scripts in ``scripts/`` so both run the
same recipe.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import SynthSpec, synth_generate
from .model import S3TFormer
from .training import TrainResult, train


def desk_spec(noise_sigma: float = 0.01, seed: int = 0) -> SynthSpec:
    return SynthSpec(graph="chain(9)", n_classes=5, samples_per_class=60, n_subjects=10, noise_sigma=noise_sigma, seed=seed)


def desk_model(seed: int = 0, **kw) -> ModelConfig:
    return ModelConfig(T=16, D=48, L=2, H=2, M=1, n_classes=5, graph="chain(9)", seed=seed, **kw)


def desk_train(seed: int = 0, **kw) -> TrainConfig:
    """Desk recipe; warmup defaults to a tenth of the epochs."""
    base = dict(epochs=40, batch_size=16, eval_batch_size=100, seed=seed)
    base.update(kw)
    base.setdefault("warmup_epochs", base["epochs"] // 10)
    return TrainConfig(**base)


@dataclass
class DeskRun:
    seed: int
    train_acc: float
    test_acc: float
    seconds: float
    result: TrainResult
    model: S3TFormer


def desk_arrays(noise_sigma: float = 0.01, data_seed: int = 0, T: int = 16):
    tr, te = synth_generate(desk_spec(noise_sigma, data_seed)).split("subject")
    return (*tr.to_arrays(T, 0, 1), *te.to_arrays(T, 0, 1))


def run_desk(mcfg: ModelConfig, tcfg: TrainConfig, arrays, out_dir=None, log=None) -> DeskRun:
    """Train one model on preloaded ``(X, y, X_test, y_test)``; accuracies are from the last epoch."""
    X, y, Xv, yv = arrays
    model = S3TFormer(mcfg)
    t0 = time.perf_counter()
    res = train(model, X, y, Xv, yv, tcfg, out_dir=out_dir, log=log)
    return DeskRun(tcfg.seed, res.final["train_acc"], res.final["val_acc"], time.perf_counter() - t0, res, model)


def seeded(mcfg: ModelConfig, tcfg: TrainConfig, seed: int):
    return dataclasses.replace(mcfg, seed=seed), dataclasses.replace(tcfg, seed=seed)


def summarize(runs: list[DeskRun]) -> dict:
    return {
        "seeds": [r.seed for r in runs],
        "train_acc": [r.train_acc for r in runs],
        "test_acc": [r.test_acc for r in runs],
        "mean_test_acc": float(np.mean([r.test_acc for r in runs])),
        "seconds": [round(r.seconds, 1) for r in runs],
    }
