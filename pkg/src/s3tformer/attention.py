"""The S3T block: ATG-QKV spike generation, local binding, topology routing and the S3 scan."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import OpCounter
from .neurons import LIF, LIFParams, lif_forward
from .tensor import ParamStore, Projection, logit, sigmoid, softmax_rows, softmax_rows_backward

DECAY_MIN, DECAY_MAX = 0.01, 0.99


# --------------------------------------------------------------------------- #
# functional pieces


def check_spike_counts(x: np.ndarray) -> None:
    """Block inputs are spikes plus residual spikes: non-negative integers."""
    if np.any(x < 0) or np.any(x != np.round(x)):
        raise ValueError("block input must hold non-negative integer spike counts")


def temporal_gradient(s: np.ndarray) -> np.ndarray:
    """``|s[t] - s[t-1]|`` with the first step zero."""
    g = np.zeros_like(s)
    g[1:] = np.abs(s[1:] - s[:-1])
    return g


def soft_atg(s: np.ndarray, alpha: np.ndarray):
    """Blend the temporal gradient with the raw stream channel-wise; returns ``(s_dyn, s_grad)``."""
    a = alpha[None, None, :, None]
    s_grad = temporal_gradient(s)
    return a * s_grad + (1 - a) * s, s_grad


def local_bind(k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Elementwise AND of two spike tensors."""
    if k.shape != v.shape:
        raise ValueError(f"shape mismatch: k {k.shape} vs v {v.shape}")
    return k * v


def dynamic_topology(a_base: np.ndarray, a_learned: np.ndarray, gamma: float) -> np.ndarray:
    """Per-head row-stochastic routing matrices ``softmax(a_base + gamma * a_learned[h])``."""
    return softmax_rows(a_base[None] + gamma * a_learned)


def route(a_dyn: np.ndarray, kv: np.ndarray) -> np.ndarray:
    """Dense node mixing: ``out[t,b,c,i] = sum_j a_dyn[head(c), i, j] kv[t,b,c,j]``."""
    T, B, D, N = kv.shape
    H = a_dyn.shape[0]
    if D % H:
        raise ValueError(f"channel count {D} not divisible by head count {H}")
    kv5 = kv.reshape(T, B, H, D // H, N)
    return np.matmul(kv5, np.swapaxes(a_dyn, 1, 2)).reshape(T, B, D, N)


def route_events(a_dyn: np.ndarray, kv: np.ndarray) -> np.ndarray:
    """Event-driven routing: for every active ``kv`` entry add the matching ``a_dyn`` column.

    Equivalent to :func:`route` for binary ``kv`` but touches only active
    events, which is how accumulate-only hardware would execute it.
    """
    T, B, D, N = kv.shape
    H = a_dyn.shape[0]
    dh = D // H
    out = np.zeros(kv.shape, dtype=np.float64)
    for t, b, c, j in np.argwhere(kv != 0):
        out[t, b, c, :] += kv[t, b, c, j] * a_dyn[c // dh, :, j]
    return out.astype(kv.dtype)


def route_backward(a_dyn: np.ndarray, kv: np.ndarray, grad_out: np.ndarray):
    T, B, D, N = kv.shape
    H = a_dyn.shape[0]
    g5 = grad_out.reshape(T, B, H, D // H, N)
    kv5 = kv.reshape(T, B, H, D // H, N)
    g_kv = np.matmul(g5, a_dyn).reshape(kv.shape)
    g_a = np.einsum("tbhci,tbhcj->hij", g5, kv5, optimize=True)
    return g_kv, g_a


def lstr_route(kv_local, a_base, a_learned, gamma: float, buffer: LIFParams | None = None):
    """Route bound spikes over the dynamic topology and re-spike them with a buffer LIF.

    Returns ``(kv_spikes, a_dyn)``.
    """
    a_dyn = dynamic_topology(a_base, a_learned, gamma)
    spatial = route(a_dyn.astype(kv_local.dtype), kv_local)
    spikes, _ = lif_forward(spatial, buffer or LIFParams())
    return spikes, a_dyn


def decay_factor(decay_logit: np.ndarray) -> np.ndarray:
    return np.clip(sigmoid(decay_logit), DECAY_MIN, DECAY_MAX)


def s3_scan(kv: np.ndarray, q: np.ndarray, lam: np.ndarray, return_memory: bool = False):
    """Linear-time memory ``M[t] = lam M[t-1] + (1 - lam) kv[t]``, read out as ``q[t] * M[t]``.

    ``lam`` is per channel (shape ``[D]``) or a scalar.
    """
    lam = np.asarray(lam, dtype=kv.dtype)
    lam_b = lam[:, None] if lam.ndim == 1 else lam
    m = np.zeros(kv.shape[1:], kv.dtype)
    out = np.empty_like(kv)
    mem = np.empty_like(kv)
    for t in range(kv.shape[0]):
        m = lam_b * m + (1 - lam_b) * kv[t]
        mem[t] = m
        out[t] = q[t] * m
    return (out, mem) if return_memory else out


def s3_scan_backward(kv, q, lam, mem, grad_out):
    """Return ``(grad_kv, grad_q, grad_lam)``; ``grad_lam`` is summed to ``lam``'s shape."""
    lam = np.asarray(lam, dtype=kv.dtype)
    lam_b = lam[:, None] if lam.ndim == 1 else lam
    g_kv = np.empty_like(kv)
    g_q = grad_out * mem
    g_m = np.zeros(kv.shape[1:], kv.dtype)
    g_lam = np.zeros(kv.shape[1:], np.float64)
    for t in range(kv.shape[0] - 1, -1, -1):
        g_m = g_m + grad_out[t] * q[t]
        g_kv[t] = (1 - lam_b) * g_m
        prev = mem[t - 1] if t > 0 else 0
        g_lam += g_m * (prev - kv[t])
        g_m = lam_b * g_m
    g_lam = g_lam.sum(axis=0)
    g_lam = g_lam.sum(axis=-1) if lam.ndim == 1 else g_lam.sum()
    return g_kv, g_q, g_lam


# --------------------------------------------------------------------------- #


@dataclass
class BlockOptions:
    D: int
    H: int
    gamma: float = 0.5
    use_atg: bool = True
    use_lstr: bool = True
    use_s3: bool = True
    s3_input: str = "post_buffer"  # or "pre_buffer"
    decay_mode: str = "learnable"  # learnable | fixed | linear
    decay_fixed: float = 0.5
    alpha_init: float = 0.8
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.D % self.H:
            raise ValueError(f"D={self.D} is not divisible by H={self.H}")
        if self.s3_input not in ("post_buffer", "pre_buffer"):
            raise ValueError(f"s3_input must be post_buffer or pre_buffer, got {self.s3_input!r}")
        if self.decay_mode not in ("learnable", "fixed", "linear"):
            raise ValueError(f"unknown decay_mode {self.decay_mode!r}")


def linear_decay(D: int, H: int) -> np.ndarray:
    """Fixed multi-timescale decays, linearly spaced across the channels of each head."""
    return np.tile(np.linspace(DECAY_MIN, DECAY_MAX, D // H), H)


LIF_NAMES = ("Q", "K", "V", "Topo Buffer", "Attn Out", "MLP 1", "MLP 2")


class S3TBlock:
    def __init__(
        self,
        store: ParamStore,
        name: str,
        opts: BlockOptions,
        a_base: np.ndarray,
        lif: LIFParams,
        rng: np.random.Generator,
        dtype=np.float32,
        input_bound: int = 1,
    ):
        D, H, N = opts.D, opts.H, a_base.shape[0]
        self.name, self.opts, self.store = name, opts, store
        self.a_base = a_base.astype(dtype)
        self.input_bound = input_bound  # largest integer value the block input can take
        self.dtype = dtype
        p = lambda k: f"{name}.{k}"
        self.alpha_logit = store.add(p("alpha_logit"), np.full(D, logit(opts.alpha_init), dtype))
        self.a_learned = store.add(p("a_learned"), rng.uniform(-0.01, 0.01, (H, N, N)).astype(dtype))
        if opts.decay_mode == "learnable":
            self.decay_logit = store.add(p("decay_logit"), np.zeros(D, dtype))
        self.fq = Projection(store, p("fq"), D, D, rng, dtype)
        self.fk = Projection(store, p("fk"), D, D, rng, dtype)
        self.fv = Projection(store, p("fv"), D, D, rng, dtype)
        self.fout = Projection(store, p("fout"), D, D, rng, dtype)
        self.fmlp1 = Projection(store, p("mlp1"), D, opts.mlp_ratio * D, rng, dtype)
        self.fmlp2 = Projection(store, p("mlp2"), opts.mlp_ratio * D, D, rng, dtype)
        self.lifs = {n: LIF(store, p(f"lif_{n.lower().replace(' ', '_')}"), LIFParams(**vars(lif)), dtype) for n in LIF_NAMES}
        self._c: dict = {}

    # -- parameters derived per forward

    @property
    def alpha(self) -> np.ndarray:
        return sigmoid(self.alpha_logit)

    def decay(self) -> np.ndarray:
        o = self.opts
        if o.decay_mode == "learnable":
            return decay_factor(self.decay_logit)
        if o.decay_mode == "fixed":
            return np.full(o.D, o.decay_fixed, self.dtype)
        return linear_decay(o.D, o.H).astype(self.dtype)

    def topology(self) -> np.ndarray:
        """Routing matrices ``[H, N, N]`` used by this block (identity when routing is disabled)."""
        H, N = self.opts.H, self.a_base.shape[0]
        if not self.opts.use_lstr:
            return np.broadcast_to(np.eye(N, dtype=self.dtype), (H, N, N))
        return dynamic_topology(self.a_base, self.a_learned, self.opts.gamma).astype(self.dtype)

    # -- forward / backward

    def forward(self, x: np.ndarray, mode="train", soft=False, counter: OpCounter | None = None, folded=False):
        o, L, c = self.opts, self.lifs, {}
        if not soft:
            check_spike_counts(x)
        if o.use_atg:
            alpha = self.alpha
            s_dyn, s_grad = soft_atg(x, alpha)
            c.update(alpha=alpha, s_grad=s_grad)
        else:
            s_dyn = x
        q = L["Q"].forward(self.fq.forward(s_dyn, mode, folded), soft)
        k = L["K"].forward(self.fk.forward(s_dyn, mode, folded), soft)
        v = L["V"].forward(self.fv.forward(x, mode, folded), soft)
        kv = local_bind(k, v)
        a_dyn = self.topology()
        spatial = route(a_dyn, kv) if o.use_lstr else kv
        kv_spk = L["Topo Buffer"].forward(spatial, soft)
        mem_in = kv_spk if o.s3_input == "post_buffer" else spatial
        lam = self.decay()
        if o.use_s3:
            attn_in, mem = s3_scan(mem_in, q, lam, return_memory=True)
            c.update(mem=mem)
        else:
            attn_in = q * mem_in
        attn = L["Attn Out"].forward(self.fout.forward(attn_in, mode, folded), soft)
        x1 = attn + x
        h = L["MLP 1"].forward(self.fmlp1.forward(x1, mode, folded), soft)
        y = L["MLP 2"].forward(self.fmlp2.forward(h, mode, folded), soft)
        c.update(x=x, q=q, k=k, v=v, kv=kv, a_dyn=a_dyn, mem_in=mem_in, lam=lam)
        self._c = c
        if counter is not None:
            self._count(counter, x, c, spatial, attn_in, x1, h)
        return y + x1

    def backward(self, g_out: np.ndarray) -> np.ndarray:
        o, L, c, G = self.opts, self.lifs, self._c, self.store.grads
        g_x1 = g_out + self.fmlp1.backward(L["MLP 1"].backward(self.fmlp2.backward(L["MLP 2"].backward(g_out))))
        g_x = g_x1.copy()
        g_attn_in = self.fout.backward(L["Attn Out"].backward(g_x1))
        q, mem_in = c["q"], c["mem_in"]
        if o.use_s3:
            g_mem_in, g_q, g_lam = s3_scan_backward(mem_in, q, c["lam"], c["mem"], g_attn_in)
            if o.decay_mode == "learnable":
                sig = sigmoid(self.decay_logit)
                inside = (sig > DECAY_MIN) & (sig < DECAY_MAX)
                G[f"{self.name}.decay_logit"] += (g_lam * sig * (1 - sig) * inside).astype(self.dtype)
        else:
            g_mem_in, g_q = g_attn_in * q, g_attn_in * mem_in
        g_spatial = L["Topo Buffer"].backward(g_mem_in) if o.s3_input == "post_buffer" else g_mem_in
        if o.use_lstr:
            g_kv, g_a = route_backward(c["a_dyn"], c["kv"], g_spatial)
            g_logits = softmax_rows_backward(c["a_dyn"], g_a)
            G[f"{self.name}.a_learned"] += o.gamma * g_logits
        else:
            g_kv = g_spatial
        g_k, g_v = g_kv * c["v"], g_kv * c["k"]
        g_dyn = self.fq.backward(L["Q"].backward(g_q)) + self.fk.backward(L["K"].backward(g_k))
        g_x += self.fv.backward(L["V"].backward(g_v))
        if o.use_atg:
            x, alpha, s_grad = c["x"], c["alpha"], c["s_grad"]
            a = alpha[None, None, :, None]
            g_x += (1 - a) * g_dyn
            G[f"{self.name}.alpha_logit"] += ((g_dyn * (s_grad - x)).sum(axis=(0, 1, 3)) * alpha * (1 - alpha)).astype(self.dtype)
            g_sg = a * g_dyn
            sign = np.sign(x[1:] - x[:-1])
            g_x[1:] += sign * g_sg[1:]
            g_x[:-1] -= sign * g_sg[1:]
        else:
            g_x += g_dyn
        return g_x

    # -- accounting

    def _count(self, counter: OpCounter, x, c, spatial, attn_in, x1, h) -> None:
        o, L = self.opts, self.lifs
        key = lambda n: f"{self.name}.{n}"
        D, H = o.D, o.H
        N = self.a_base.shape[0]
        bound = self.input_bound
        # alpha is folded into two pre-scaled weight sets, one per integer input stream
        qk_in = np.concatenate([c["s_grad"], x], axis=2) if o.use_atg else x
        for n in ("Q", "K"):
            counter.synapse(key(n), qk_in, D, "integer", max_value=bound)
        counter.synapse(key("V"), x, D, "integer", max_value=bound)
        counter.bitand(key("Bind"), c["kv"].size)
        a = c["a_dyn"]
        nnz = (a != 0).sum(axis=1)  # [H, N] fan-out of each source node
        fan = np.repeat(nnz, D // H, axis=0)[None, None]  # [1, 1, D, N]
        counter.synapse(key("Topo Buffer"), c["kv"], fan, "binary")
        if o.use_lstr:
            counter.macs("misc", 3 * H * N * N * x.shape[1])  # routing softmax, charged per sample so shards add up
        # S3 engine: lam*M is real x real, (1-lam)*kv and q*M are spike-gated
        n_el = c["mem_in"].size
        if o.use_s3:
            counter.macs(key("S3-Engine"), n_el, dense=n_el)
            if o.s3_input == "post_buffer":
                counter.acs(key("S3-Engine"), int(c["mem_in"].sum()), dense=n_el)
            else:
                counter.macs(key("S3-Engine"), n_el, dense=n_el)
            counter.acs(key("S3-Engine"), int(c["q"].sum()), dense=n_el)
        elif o.s3_input == "post_buffer":
            counter.bitand(key("S3-Engine"), n_el)
        else:
            counter.acs(key("S3-Engine"), int(c["q"].sum()), dense=n_el)
        real_attn = o.use_s3 or o.s3_input == "pre_buffer"
        counter.synapse(key("Attn Out"), attn_in, D, "real" if real_attn else "binary")
        counter.acs("misc", x.size)  # residual add
        counter.synapse(key("MLP 1"), x1, o.mlp_ratio * D, "integer", max_value=bound + 1)
        counter.synapse(key("MLP 2"), h, D, "binary")
        counter.acs("misc", x.size)
        for n, lif in L.items():
            rec = counter.record(key(n))
            rec.neuron_steps += lif.last_steps
            rec.spike_events += int(lif.last_events)
