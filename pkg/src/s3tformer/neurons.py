"""LIF / parametric-LIF spiking neurons with hard reset, and the IF readout integrator.

``soft=True`` replaces the Heaviside emission with the smooth primal whose
derivative is the arctangent surrogate, and differentiates the reset exactly.
It exists so that the hand-written backward passes can be checked against
finite differences; training always runs with ``soft=False``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ParamStore, check_finite, logit, sigmoid

HALF_PI = np.pi / 2


@dataclass
class LIFParams:
    tau: float = 0.5
    u_th: float = 0.5
    tau_learnable: bool = False
    tau_logit: float | None = None
    surrogate_alpha: float = 2.0

    def __post_init__(self):
        if self.tau_learnable and self.tau_logit is None:
            self.tau_logit = logit(self.tau)
        if not 0 < self.leak < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.leak}")
        if self.u_th <= 0:
            raise ValueError("u_th must be > 0")
        if self.surrogate_alpha <= 0:
            raise ValueError("surrogate_alpha must be > 0")

    @property
    def leak(self) -> float:
        """Effective leak factor (sigmoid of the logit when learnable)."""
        if self.tau_learnable:
            return float(sigmoid(self.tau_logit))
        return self.tau


@dataclass
class MembraneState:
    u: np.ndarray

    @classmethod
    def rest(cls, shape, dtype=np.float32) -> "MembraneState":
        return cls(np.zeros(shape, dtype))

    def reset(self) -> None:
        self.u[...] = 0


@dataclass
class SavedTrace:
    u_pre: np.ndarray  # potentials before reset, [T, ...]
    spikes: np.ndarray  # emitted spikes (soft values in soft mode)
    v_prev: np.ndarray  # post-reset potential carried into each step
    soft: bool = False

    def __len__(self) -> int:
        return self.u_pre.shape[0]


def surrogate_grad(x, alpha: float = 2.0):
    """Arctangent surrogate ``alpha / (2 (1 + (pi/2 alpha x)^2))``."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    return alpha / (2.0 * (1.0 + np.square(HALF_PI * alpha * np.asarray(x))))


def soft_spike(x, alpha: float = 2.0):
    """Smooth primal of the arctangent surrogate (its derivative is :func:`surrogate_grad`)."""
    return np.arctan(HALF_PI * alpha * np.asarray(x)) / np.pi + 0.5


def lif_forward(currents: np.ndarray, p: LIFParams, state: MembraneState | None = None, soft: bool = False):
    """Run ``U[t] = tau U[t-1] + I[t]``, fire on ``U >= u_th`` and hard-reset to 0.

    Returns ``(spikes, trace)``; spikes share the dtype of ``currents``.
    """
    currents = np.asarray(currents)
    T = currents.shape[0]
    tau = currents.dtype.type(p.leak)
    th = currents.dtype.type(p.u_th)
    u = np.zeros(currents.shape[1:], currents.dtype) if state is None else state.u.astype(currents.dtype)
    u_pre = np.empty_like(currents)
    spikes = np.empty_like(currents)
    v_prev = np.empty_like(currents)
    for t in range(T):
        if not np.all(np.isfinite(currents[t])):
            raise FloatingPointError(f"non-finite input current at time step {t}")
        v_prev[t] = u
        u = tau * u + currents[t]
        u_pre[t] = u
        if soft:
            s = soft_spike(u - th, p.surrogate_alpha).astype(currents.dtype)
        else:
            s = (u >= th).astype(currents.dtype)
        spikes[t] = s
        u = u * (1 - s)
    if state is not None:
        state.u = u
    return spikes, SavedTrace(u_pre, spikes, v_prev, soft)


def lif_backward(trace: SavedTrace, grad_spikes: np.ndarray, p: LIFParams):
    """Reverse-time BPTT through :func:`lif_forward`.

    Returns ``(grad_currents, grad_tau_logit)``; the second item is ``None``
    for a fixed leak.  In hard mode the reset gate ``1 - S[t]`` is treated as a
    constant; in soft mode it is differentiated through the smooth spike.
    """
    if grad_spikes.shape != trace.u_pre.shape:
        raise ValueError(f"gradient shape {grad_spikes.shape} does not match trace {trace.u_pre.shape}")
    tau = p.leak
    T = len(trace)
    grad_in = np.empty_like(grad_spikes)
    g_next = np.zeros(grad_spikes.shape[1:], grad_spikes.dtype)
    g_tau = 0.0
    for t in range(T - 1, -1, -1):
        u = trace.u_pre[t]
        s = trace.spikes[t]
        sg = surrogate_grad(u - p.u_th, p.surrogate_alpha).astype(grad_spikes.dtype)
        g_v = tau * g_next
        g_u = grad_spikes[t] * sg + g_v * (1 - s)
        if trace.soft:
            g_u -= g_v * u * sg
        g_tau += float(np.sum(g_u * trace.v_prev[t], dtype=np.float64))
        grad_in[t] = g_u
        g_next = g_u
    g_logit = g_tau * tau * (1 - tau) if p.tau_learnable else None
    return grad_in, g_logit


def if_accumulate(currents: np.ndarray) -> np.ndarray:
    """Non-spiking integrate-and-fire readout: exact running sum over time (64-bit)."""
    currents = np.asarray(currents)
    check_finite(currents, "readout current")
    return np.cumsum(currents, axis=0, dtype=np.float64)


class LIF:
    """A LIF layer bound to a :class:`ParamStore` (for a learnable leak) and a stats map."""

    def __init__(self, store: ParamStore, name: str, params: LIFParams, dtype=np.float32):
        self.name = name
        self.store = store
        self.params = params
        if params.tau_learnable:
            store.add(f"{name}.tau_logit", np.array([params.tau_logit], dtype=dtype))
        self._trace: SavedTrace | None = None
        self.last_events = 0
        self.last_steps = 0

    def _sync(self) -> LIFParams:
        if self.params.tau_learnable:
            self.params.tau_logit = float(self.store.params[f"{self.name}.tau_logit"][0])
        return self.params

    def forward(self, currents: np.ndarray, soft: bool = False) -> np.ndarray:
        spikes, self._trace = lif_forward(currents, self._sync(), soft=soft)
        self.last_events = int(spikes.sum(dtype=np.float64)) if not soft else float(spikes.sum())
        self.last_steps = spikes.size
        return spikes

    def backward(self, grad_spikes: np.ndarray) -> np.ndarray:
        grad, g_logit = lif_backward(self._trace, grad_spikes, self._sync())
        if g_logit is not None:
            self.store.grads[f"{self.name}.tau_logit"][0] += g_logit
        return grad
