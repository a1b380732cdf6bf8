"""Full network: embedding, stacked S3T blocks, pooled readout and the TET objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import BlockOptions, S3TBlock
from .config import ModelConfig
from .energy import OpCounter
from .mase import MASE, derive_modality
from .neurons import LIF, LIFParams, if_accumulate
from .tensor import ParamStore
from .topology import build_base_topology, resolve_graph


@dataclass
class ModelOutput:
    u_traj: np.ndarray  # [T, B, C] readout potentials (spike counts when UR is off), float64
    i_traj: np.ndarray  # [T, B, C] per-step classification currents
    spike_stats: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def prediction(self) -> np.ndarray:
        return predict(self)

    def firing_rates(self) -> dict[str, float]:
        return {k: e / n for k, (e, n) in self.spike_stats.items() if n}


def predict(output: ModelOutput) -> np.ndarray:
    """Argmax of the terminal readout; ties go to the lowest class index."""
    return np.argmax(output.u_traj[-1], axis=-1)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def tet_loss(u_traj: np.ndarray, labels, return_grad: bool = False):
    """Cross-entropy at every step, averaged over time steps and batch.

    ``u_traj`` is ``[T, B, C]`` (or ``[T, C]`` for a single sample).
    """
    u = np.asarray(u_traj, dtype=np.float64)
    single = u.ndim == 2
    if single:
        u = u[:, None]
    labels = np.atleast_1d(np.asarray(labels))
    T, B, C = u.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"label out of range [0, {C})")
    logp = log_softmax(u)
    nll = -logp[:, np.arange(B), labels]
    loss = float(nll.mean())
    if not return_grad:
        return loss
    grad = np.exp(logp)
    grad[:, np.arange(B), labels] -= 1
    grad /= T * B
    return loss, grad[:, 0] if single else grad


class S3TFormer:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype).type
        self.graph = resolve_graph(cfg.graph)
        self.N = self.graph.n_nodes
        self.a_base = build_base_topology(self.graph)
        rng = np.random.default_rng(cfg.seed)
        self.store = ParamStore()
        lif = LIFParams(cfg.tau, cfg.u_th, cfg.learnable_tau, None, cfg.surrogate_alpha)
        self.embed = MASE(self.store, self.graph, cfg.c_in, cfg.D, lif, rng, cfg.use_mase, self.dtype)
        opts = BlockOptions(
            D=cfg.D, H=cfg.H, gamma=cfg.gamma, use_atg=cfg.use_atg, use_lstr=cfg.use_lstr, use_s3=cfg.use_s3,
            s3_input=cfg.s3_input, decay_mode=cfg.decay_mode, decay_fixed=cfg.decay_fixed,
            alpha_init=cfg.alpha_init, mlp_ratio=cfg.mlp_ratio,
        )
        self.blocks = [
            S3TBlock(self.store, f"block{i + 1}", opts, self.a_base, lif, rng, self.dtype, input_bound=1 + 2 * i)
            for i in range(cfg.L)
        ]
        bound = 1.0 / np.sqrt(cfg.D)
        self.fc_w = self.store.add("head.fc.weight", rng.uniform(-bound, bound, (cfg.n_classes, cfg.D)).astype(self.dtype))
        self.fc_b = self.store.add("head.fc.bias", rng.uniform(-bound, bound, cfg.n_classes).astype(self.dtype))
        self.head_lif = None if cfg.use_u_readout else LIF(self.store, "head.lif", LIFParams(cfg.tau, cfg.u_th, False, None, cfg.surrogate_alpha), self.dtype)
        self._c: dict = {}

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.store.params

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return self.store.grads

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def lif_layers(self):
        yield "embed.LIF", self.embed.lif
        for blk in self.blocks:
            for n, lif in blk.lifs.items():
                yield f"{blk.name}.{n}", lif
        if self.head_lif is not None:
            yield "head.LIF", self.head_lif

    # ------------------------------------------------------------------ #

    def prepare(self, x: np.ndarray) -> np.ndarray:
        """``[T, B, C, N, M]`` (or ``[T, B, C, N]``) joint input -> ``[T, B*M, C, N]`` in the configured modality."""
        cfg = self.cfg
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 4:
            x = x[..., None]
        if x.ndim != 5:
            raise ValueError(f"input must be [T,B,C,N,M], got shape {x.shape}")
        T, B, C, N, M = x.shape
        for axis, got, want in (("T", T, cfg.T), ("C", C, cfg.c_in), ("N", N, self.N), ("M", M, cfg.M)):
            if got != want:
                raise ValueError(f"input axis {axis} has size {got}, config expects {want}")
        x = np.ascontiguousarray(x.transpose(0, 1, 4, 2, 3)).reshape(T, B * M, C, N)
        if cfg.modality != "joint":
            x = derive_modality(x, cfg.modality, self.graph).x
        return x

    def forward(self, x: np.ndarray, mode: str = "train", soft: bool = False, counter: OpCounter | None = None,
                folded: bool = False) -> ModelOutput:
        cfg = self.cfg
        xin = self.prepare(x)
        T, BM, _, N = xin.shape
        B = BM // cfg.M
        s = self.embed.forward(xin, mode, soft, counter, folded)
        for blk in self.blocks:
            s = blk.forward(s, mode, soft, counter, folded)
        pooled = s.mean(axis=3).reshape(T, B, cfg.M, cfg.D).mean(axis=2)
        i_traj = pooled @ self.fc_w.T + self.fc_b
        if cfg.use_u_readout:
            u = if_accumulate(i_traj)
            head_spikes = None
        else:
            head_spikes = self.head_lif.forward(i_traj, soft)
            u = np.cumsum(head_spikes, axis=0, dtype=np.float64)
        if counter is not None:
            counter.acs("misc", s.size)  # GAP sums over nodes
            counter.macs("misc", T * BM * cfg.D + T * B * cfg.D * (cfg.M - 1))
            counter.synapse("head.FC", pooled, cfg.n_classes, "real")
            if head_spikes is None:
                counter.acs("head.Readout", i_traj.size)
            else:
                counter.neurons("head.LIF", head_spikes)
                counter.acs("head.Readout", int(head_spikes.sum()), dense=i_traj.size)
        self._c = dict(pooled=pooled, B=B)
        stats = {name: (lif.last_events, lif.last_steps) for name, lif in self.lif_layers()}
        return ModelOutput(u, i_traj, stats)

    def backward(self, grad_u: np.ndarray) -> None:
        """Accumulate parameter gradients given ``dLoss/du_traj`` from the last forward."""
        cfg = self.cfg
        g = np.asarray(grad_u, dtype=np.float64)
        if cfg.tet_target == "potential" or not cfg.use_u_readout:
            g = np.flip(np.cumsum(np.flip(g, 0), axis=0), 0)  # through the running sum
        if not cfg.use_u_readout:
            g = self.head_lif.backward(g.astype(self.dtype))
        g_i = g.astype(self.dtype)
        pooled = self._c["pooled"]
        self.grads["head.fc.weight"] += np.einsum("tbk,tbd->kd", g_i, pooled, optimize=True)
        self.grads["head.fc.bias"] += g_i.sum(axis=(0, 1))
        g_pool = g_i @ self.fc_w
        T, B, D = g_pool.shape
        g_pool = np.repeat(g_pool[:, :, None, :] / cfg.M, cfg.M, axis=2).reshape(T, B * cfg.M, D)
        g_s = np.repeat(g_pool[..., None] / self.N, self.N, axis=3)
        for blk in reversed(self.blocks):
            g_s = blk.backward(g_s)
        self.embed.backward(g_s)

    def loss_and_grad(self, x, labels, mode: str = "train", soft: bool = False):
        """Forward, TET loss and backward; gradients are accumulated into ``self.grads``."""
        out = self.forward(x, mode, soft)
        loss, g = tet_loss(self.readout_logits(out), labels, return_grad=True)
        self.backward(g)
        return loss, out

    def readout_logits(self, out: ModelOutput) -> np.ndarray:
        """The per-step trajectory the TET loss is applied to."""
        if self.cfg.use_u_readout and self.cfg.tet_target == "current":
            return out.i_traj.astype(np.float64)
        return out.u_traj

    def topology(self, block: int) -> np.ndarray:
        """Routing matrices ``[H, N, N]`` of 1-based ``block``."""
        if not 1 <= block <= len(self.blocks):
            raise IndexError(f"block {block} out of range [1, {len(self.blocks)}]")
        return np.array(self.blocks[block - 1].topology())
