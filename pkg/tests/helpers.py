"""Shared oracles for the test suite."""

import numpy as np

from s3tformer.config import ModelConfig
from s3tformer.model import S3TFormer, tet_loss


def tiny_config(**kw) -> ModelConfig:
    base = dict(T=4, D=6, L=1, H=2, M=1, n_classes=3, graph="chain(3)", dtype="float64", seed=0)
    base.update(kw)
    return ModelConfig(**base)


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place, then restored)."""
    g = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-7) -> np.ndarray:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def model_gradcheck(model: S3TFormer, x, y, mode: str = "train", h: float = 1e-6, floor: float = 1e-6):
    """Per-scalar relative errors of analytic vs finite-difference gradients, keyed by parameter name.

    Running statistics are restored around every evaluation so train-mode
    batch norm stays a pure function of the parameters.
    """
    buffers = {k: v.copy() for k, v in model.store.buffers.items()}

    def reset():
        for k, v in buffers.items():
            model.store.buffers[k][...] = v

    def loss():
        out = model.forward(x, mode, soft=True)
        reset()
        return tet_loss(model.readout_logits(out), y)

    model.store.zero_grad()
    model.loss_and_grad(x, y, mode, soft=True)
    reset()
    errs = {}
    for name, p in model.params.items():
        num = central_diff(loss, p, h)
        errs[name] = rel_err(model.grads[name], num, floor)
    return errs
