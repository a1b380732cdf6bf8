import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import central_diff, rel_err
from s3tformer.attention import (
    LIF_NAMES,
    BlockOptions,
    S3TBlock,
    decay_factor,
    dynamic_topology,
    linear_decay,
    local_bind,
    route,
    route_backward,
    route_events,
    s3_scan,
    s3_scan_backward,
    soft_atg,
    temporal_gradient,
)
from s3tformer.energy import FIRING_COLUMNS, OpCounter
from s3tformer.neurons import LIFParams
from s3tformer.tensor import ParamStore, softmax_rows
from s3tformer.topology import build_base_topology, chain, star


def spikes(r, shape, p=0.3):
    return (r.random(shape) < p).astype(np.float64)


def make_block(N=4, D=8, H=2, seed=0, **kw):
    store = ParamStore()
    a_base = build_base_topology(chain(N))
    blk = S3TBlock(store, "block1", BlockOptions(D=D, H=H, **kw), a_base, LIFParams(), np.random.default_rng(seed), np.float64)
    return blk, store


class TestATG:
    def test_static_stream(self, rng):
        s = np.repeat(spikes(rng, (1, 2, 3, 4)), 5, axis=0)
        alpha = np.full(3, 0.8)
        s_dyn, s_grad = soft_atg(s, alpha)
        assert not s_grad.any()
        np.testing.assert_allclose(s_dyn, 0.2 * s)

    def test_falling_edge(self):
        s = np.zeros((2, 1, 1, 1))
        s[0] = 1
        s_dyn, _ = soft_atg(s, np.array([0.8]))
        assert s_dyn[1, 0, 0, 0] == pytest.approx(0.8)

    def test_gradient_of_counts(self):
        s = np.array([0.0, 2.0, 1.0, 1.0])[:, None, None, None]
        np.testing.assert_array_equal(temporal_gradient(s).ravel(), [0, 2, 1, 0])

    def test_alpha_limit_silences_qk_on_static_input(self, rng):
        blk, store = make_block()
        for k in store.params:
            if k.endswith(".bias"):
                store.params[k][...] = 0
        store.params["block1.alpha_logit"][...] = 40.0  # alpha == 1 to machine precision
        store.params["block1.fv.weight"][...] = 1.0
        x = np.repeat(spikes(rng, (1, 2, 8, 4), 0.6), 4, axis=0)
        blk.forward(x, "infer")
        L = blk.lifs
        assert L["Q"].last_events == 0 and L["K"].last_events == 0
        assert L["V"].last_events > 0

    @given(st.integers(0, 10_000))
    def test_qk_rates_fall_as_alpha_rises(self, seed):
        r = np.random.default_rng(seed)
        blk, store = make_block(seed=seed)
        for k in store.params:
            if k.endswith(".bias"):
                store.params[k][...] = 0  # a bias could turn a shrinking negative drive into more spikes
        x = np.repeat(spikes(r, (1, 3, 8, 4), 0.5), 6, axis=0)
        rates = []
        for a in (0.0, 0.25, 0.5, 0.75, 0.95):
            store.params["block1.alpha_logit"][...] = np.log(a / (1 - a)) if a > 0 else -40.0
            blk.forward(x, "infer")
            rates.append(blk.lifs["Q"].last_events + blk.lifs["K"].last_events)
        assert all(a >= b for a, b in zip(rates, rates[1:]))


class TestBind:
    def test_truth_table(self):
        k = np.array([1.0, 0.0, 1.0, 0.0])
        v = np.array([1.0, 1.0, 0.0, 0.0])
        np.testing.assert_array_equal(local_bind(k, v), [1, 0, 0, 0])

    def test_identity_mask_and_minimum(self, rng):
        v = spikes(rng, (3, 2, 4, 5))
        np.testing.assert_array_equal(local_bind(np.ones_like(v), v), v)
        k = spikes(rng, v.shape)
        np.testing.assert_array_equal(local_bind(k, v), np.minimum(k, v))


class TestTopology:
    def test_single_node(self):
        a = dynamic_topology(np.ones((1, 1)), np.zeros((3, 1, 1)), 0.5)
        np.testing.assert_array_equal(a, np.ones((3, 1, 1)))
        kv = np.ones((2, 1, 6, 1))
        np.testing.assert_array_equal(route(a, kv), kv)

    def test_zero_offset_shared_across_heads(self):
        a_base = build_base_topology(star(3))
        a = dynamic_topology(a_base, np.zeros((4, 4, 4)), 0.7)
        for h in range(4):
            np.testing.assert_allclose(a[h], softmax_rows(a_base), rtol=1e-12)

    def test_two_node_hand_value(self):
        a_dyn = np.array([[[0.5, 0.5], [1 / (1 + np.e), np.e / (1 + np.e)]]])
        kv = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
        assert route(a_dyn, kv)[0, 0, 0, 1] == pytest.approx(0.269, abs=1e-3)

    @given(st.integers(0, 10_000), st.integers(1, 25), st.sampled_from([1, 2, 4, 8]))
    def test_dense_equals_event_gather(self, seed, N, H):
        r = np.random.default_rng(seed)
        g = chain(N) if seed % 2 else star(max(N - 1, 1))
        a_dyn = dynamic_topology(build_base_topology(g), r.uniform(-1, 1, (H, g.n_nodes, g.n_nodes)), 0.5)
        kv = spikes(r, (3, 2, 2 * H, g.n_nodes))
        assert rel_err(route(a_dyn, kv), route_events(a_dyn, kv), 1e-12).max() <= 1e-6

    @given(st.integers(0, 10_000))
    def test_rows_sum_to_one(self, seed):
        r = np.random.default_rng(seed)
        a = dynamic_topology(build_base_topology(chain(7)), r.normal(0, 3, (8, 7, 7)), 0.5)
        np.testing.assert_allclose(a.sum(axis=-1), 1, atol=1e-6)

    def test_route_backward_matches_fd(self, rng):
        a = softmax_rows(rng.normal(size=(2, 3, 3)))
        kv = rng.normal(size=(2, 2, 4, 3))
        g = rng.normal(size=kv.shape)
        f = lambda: float(np.sum(route(a, kv) * g))
        g_kv, g_a = route_backward(a, kv, g)
        np.testing.assert_allclose(g_kv, central_diff(f, kv), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(g_a, central_diff(f, a), rtol=1e-6, atol=1e-9)


class TestScan:
    def test_geometric_series(self):
        kv = np.ones((3, 1, 1, 1))
        _, mem = s3_scan(kv, np.ones_like(kv), np.array([0.5]), return_memory=True)
        np.testing.assert_allclose(mem.ravel(), [0.5, 0.75, 0.875])

    def test_zero_input_and_closed_gate(self, rng):
        z = np.zeros((4, 2, 3, 2))
        assert not s3_scan(z, np.ones_like(z), np.full(3, 0.3)).any()
        kv = spikes(rng, (4, 2, 3, 2))
        q = np.ones_like(kv)
        q[2] = 0
        assert not s3_scan(kv, q, np.full(3, 0.3))[2].any()

    @given(st.integers(0, 10_000))
    def test_memory_bounded(self, seed):
        r = np.random.default_rng(seed)
        kv = spikes(r, (20, 2, 4, 3), r.uniform())
        _, mem = s3_scan(kv, np.ones_like(kv), r.uniform(0.01, 0.99, 4), return_memory=True)
        assert mem.min() >= 0 and mem.max() <= 1

    def test_causal(self, rng):
        kv, q = spikes(rng, (10, 1, 4, 3)), spikes(rng, (10, 1, 4, 3))
        lam = rng.uniform(0.1, 0.9, 4)
        out = s3_scan(kv, q, lam)
        for t in range(10):
            kv2, q2 = kv.copy(), q.copy()
            kv2[t + 1 :] = 1 - kv2[t + 1 :]
            q2[t + 1 :] = 1 - q2[t + 1 :]
            np.testing.assert_array_equal(s3_scan(kv2, q2, lam)[: t + 1], out[: t + 1])
            np.testing.assert_array_equal(s3_scan(kv[: t + 1], q[: t + 1], lam), out[: t + 1])

    def test_backward_matches_fd(self, rng):
        kv, q = rng.normal(size=(5, 2, 3, 2)), rng.normal(size=(5, 2, 3, 2))
        lam = rng.uniform(0.2, 0.8, 3)
        g = rng.normal(size=kv.shape)
        f = lambda: float(np.sum(s3_scan(kv, q, lam) * g))
        _, mem = s3_scan(kv, q, lam, return_memory=True)
        g_kv, g_q, g_lam = s3_scan_backward(kv, q, lam, mem, g)
        np.testing.assert_allclose(g_kv, central_diff(f, kv), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(g_q, central_diff(f, q), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(g_lam, central_diff(f, lam), rtol=1e-6, atol=1e-9)

    def test_decay_clipped(self):
        lam = decay_factor(np.array([-50.0, 0.0, 50.0]))
        np.testing.assert_allclose(lam, [0.01, 0.5, 0.99])

    def test_linear_decay_per_head(self):
        lam = linear_decay(8, 2)
        np.testing.assert_allclose(lam[:4], np.linspace(0.01, 0.99, 4))
        np.testing.assert_array_equal(lam[:4], lam[4:])


class TestBlock:
    def test_quiescent(self):
        blk, store = make_block()
        for k in store.params:
            if k.endswith(".bias"):
                store.params[k][...] = 0
        assert not blk.forward(np.zeros((4, 2, 8, 4)), "infer").any()

    def test_layer_names_match_report_columns(self):
        assert LIF_NAMES == FIRING_COLUMNS
        blk, _ = make_block()
        assert list(blk.lifs) == list(FIRING_COLUMNS)

    def test_masked_local_attention_when_ls_and_s3_off(self, rng):
        blk, _ = make_block(use_lstr=False, use_s3=False)
        x = spikes(rng, (4, 2, 8, 4))
        y = blk.forward(x, "infer")
        c = blk._c
        np.testing.assert_array_equal(c["a_dyn"], np.broadcast_to(np.eye(4), (2, 4, 4)))
        # memoryless: the attention input is q gated by the buffered bound spikes at the same step
        kv_spk = c["mem_in"]
        np.testing.assert_array_equal(kv_spk, c["kv"])  # identity routing of binary spikes re-spikes them unchanged
        assert np.all(y == np.round(y)) and y.min() >= 0

    def test_rejects_non_count_input(self):
        blk, _ = make_block()
        with pytest.raises(ValueError, match="non-negative integer"):
            blk.forward(np.full((2, 1, 8, 4), 0.5), "infer")

    @pytest.mark.parametrize("kw", [{}, {"use_s3": False}, {"use_lstr": False}, {"s3_input": "pre_buffer"}])
    def test_attention_path_has_no_macs(self, rng, kw):
        blk, _ = make_block(**kw)
        c = OpCounter()
        x = spikes(rng, (4, 2, 8, 4)) + spikes(rng, (4, 2, 8, 4))
        blk.forward(x, "infer", counter=c)
        assert c.records["block1.Bind"].executed_macs == 0
        assert c.records["block1.Topo Buffer"].executed_macs == 0
        s3 = c.records["block1.S3-Engine"]
        n_el = x.size
        if kw.get("use_s3", True):
            extra = n_el if kw.get("s3_input") == "pre_buffer" else 0
            assert s3.executed_macs == n_el + extra  # only the decay blend (and real-valued input gating)
        else:
            assert s3.executed_macs == 0
        for name in ("Q", "K", "V", "MLP 1", "MLP 2"):
            assert c.records[f"block1.{name}"].executed_macs == 0
