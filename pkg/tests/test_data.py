import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from s3tformer.data import (
    Archetype,
    BadMagicError,
    NodeCountError,
    SkeletonDataset,
    SkeletonSequence,
    SynthSpec,
    TruncatedError,
    decode_skl,
    encode_skl,
    iterate_batches,
    read_skl,
    resample_and_center,
    skl_size,
    synth_generate,
    write_skl,
)
from s3tformer.mase import temporal_difference
from s3tformer.topology import chain


def small_spec(**kw):
    base = dict(graph="chain(5)", n_classes=3, samples_per_class=6, n_subjects=4, t_raw_min=8, t_raw_max=12)
    base.update(kw)
    return SynthSpec(**base)


def frames_equal(a: SkeletonDataset, b: SkeletonDataset) -> bool:
    if len(a) != len(b):
        return False
    return all(
        x.frames.tobytes() == y.frames.tobytes() and (x.label, x.subject_id, x.view_id) == (y.label, y.subject_id, y.view_id)
        for x, y in zip(a.sequences, b.sequences)
    )


class TestSynth:
    def test_deterministic(self):
        assert frames_equal(synth_generate(small_spec(noise_sigma=0)), synth_generate(small_spec(noise_sigma=0)))
        assert frames_equal(synth_generate(small_spec()), synth_generate(small_spec()))
        assert not frames_equal(synth_generate(small_spec()), synth_generate(small_spec(seed=1)))

    def test_default_counts(self):
        tr, te = synth_generate(SynthSpec()).split("subject")
        assert (len(tr), len(te)) == (200, 100)

    def test_static_class_has_silent_temporal_stream(self):
        arch = [Archetype(2, [1, 0, 0], amplitude_m=0.0), Archetype(3, [0, 1, 0], amplitude_m=0.1)]
        ds = synth_generate(small_spec(n_classes=2, archetypes=arch, noise_sigma=0))
        for s in ds.sequences:
            if s.label == 0:
                x = resample_and_center(s, 8, 0)
                assert not temporal_difference(x[: s.frames.shape[0]]).any()

    def test_degenerate_rejected(self):
        arch = [Archetype(1, [1, 0, 0], amplitude_m=0.0), Archetype(2, [1, 0, 0], amplitude_m=0.0)]
        with pytest.raises(ValueError, match="zero amplitude"):
            synth_generate(small_spec(n_classes=2, archetypes=arch))

    def test_margin_enforced(self):
        arch = [Archetype(1, [1, 0, 0], 1.0), Archetype(1, [1, 0, 0], 1.1)]
        with pytest.raises(ValueError, match="not separated"):
            synth_generate(small_spec(n_classes=2, archetypes=arch, margin=0.25))

    def test_nearest_neighbour_oracle(self):
        arch = [Archetype(2, [1, 0, 0], 1.0, 0.15, 0.0), Archetype(3, [0, 0, 1], 2.0, 0.15, 0.0)]
        spec = small_spec(n_classes=2, archetypes=arch, noise_sigma=0, samples_per_class=30, margin=0.5, frequency_jitter=0)
        tr, te = synth_generate(spec).split("subject")
        Xtr, ytr = tr.to_arrays(16, 0)
        Xte, yte = te.to_arrays(16, 0)
        a, b = Xtr.reshape(len(Xtr), -1), Xte.reshape(len(Xte), -1)
        d = ((b[:, None, :] - a[None, :, :]) ** 2).sum(-1)
        assert np.mean(ytr[d.argmin(1)] == yte) >= 0.99

    def test_split_disjoint(self):
        tr, te = synth_generate(small_spec()).split("subject")
        assert set(tr.subjects).isdisjoint(te.subjects)
        assert set(tr.labels) == set(te.labels) == {0, 1, 2}

    def test_two_persons(self):
        ds = synth_generate(small_spec(persons=2))
        assert ds.sequences[0].frames.shape[3] == 2


class TestResample:
    def seq(self, T_raw, N=3, M=1, seed=0):
        return SkeletonSequence(np.random.default_rng(seed).normal(size=(T_raw, 3, N, M)), 0)

    def test_floor_indices(self):
        s = self.seq(4)
        out = resample_and_center(s, 2, 0)
        ref = s.frames[[0, 2]] - s.frames[0, :, 0, 0][None, :, None, None]
        np.testing.assert_array_equal(out, ref)

    def test_same_length_only_centers(self):
        s = self.seq(5)
        np.testing.assert_array_equal(resample_and_center(s, 5, 1), s.frames - s.frames[0, :, 1, 0][None, :, None, None])

    def test_pad_after_centering(self):
        s = self.seq(3)
        out = resample_and_center(s, 6, 0)
        assert out.shape[0] == 6 and not out[3:].any()
        assert out[1:3].any()

    @given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2), st.integers(0, 1000))
    def test_root_origin_and_idempotent(self, T_raw, T, root, seed):
        s = self.seq(T_raw, M=2, seed=seed)
        once = resample_and_center(s, T, root)
        assert once.shape == (T, 3, 3, 2)
        assert not once[0, :, root, 0].any()
        twice = resample_and_center(SkeletonSequence(once, 0), T, root)
        np.testing.assert_array_equal(twice, once)

    def test_bad_T(self):
        with pytest.raises(ValueError):
            resample_and_center(self.seq(3), 0, 0)

    def test_sequence_validation(self):
        with pytest.raises(ValueError):
            SkeletonSequence(np.full((2, 3, 3, 1), np.nan), 0)
        with pytest.raises(ValueError):
            SkeletonSequence(np.zeros((2, 3, 3, 3)), 0)


class TestSkl:
    def test_round_trip_bitwise(self, tmp_path):
        ds = synth_generate(small_spec(persons=2))
        write_skl(tmp_path / "a.skl", ds)
        back = read_skl(tmp_path / "a.skl", expected_nodes=5)
        assert frames_equal(ds, back)
        assert encode_skl(back) == (tmp_path / "a.skl").read_bytes()

    def test_size_by_construction(self):
        ds = SkeletonDataset([SkeletonSequence(np.zeros((2, 3, 3, 1)), 1)], 3)
        buf = encode_skl(ds)
        assert len(buf) == 4 + 4 + (4 + 1 + 1 + 2 + 2 + 2) + 2 * 3 * 3 * 1 * 4 == 92
        assert skl_size([(2, 3, 1)]) == 92

    def test_layout(self):
        f = np.arange(2 * 3 * 2 * 1, dtype=np.float32).reshape(2, 3, 2, 1)
        buf = encode_skl(SkeletonDataset([SkeletonSequence(f, 7, 3, 2)], 2))
        assert buf[:4] == b"SKL1" and buf[4:8] == (1).to_bytes(4, "little")
        assert buf[8:20] == (2).to_bytes(4, "little") + bytes([2, 1]) + (7).to_bytes(2, "little") + (3).to_bytes(2, "little") + (2).to_bytes(2, "little")
        np.testing.assert_array_equal(np.frombuffer(buf[20:], "<f4"), np.arange(12))

    def test_distinct_errors(self):
        buf = encode_skl(synth_generate(small_spec()))
        with pytest.raises(BadMagicError):
            decode_skl(b"SKL2" + buf[4:])
        with pytest.raises(TruncatedError, match="byte offset") as e:
            decode_skl(buf[:-5])
        assert e.value.offset > 8
        with pytest.raises(NodeCountError):
            decode_skl(buf, expected_nodes=25)
        with pytest.raises(TruncatedError):
            decode_skl(b"SK")

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        write_skl(tmp_path / "d" / "x.skl", synth_generate(small_spec()))
        assert [p.name for p in (tmp_path / "d").iterdir()] == ["x.skl"]


class TestBatches:
    @given(st.integers(0, 50), st.integers(1, 16), st.integers(0, 100))
    def test_partition(self, n, bs, seed):
        idx = list(iterate_batches(n, bs, np.random.default_rng(seed)))
        flat = np.concatenate(idx) if idx else np.zeros(0, int)
        assert sorted(flat.tolist()) == list(range(n))
        assert all(len(b) <= bs for b in idx)

    def test_seeded_order(self):
        a = np.concatenate(list(iterate_batches(20, 6, np.random.default_rng(3))))
        b = np.concatenate(list(iterate_batches(20, 6, np.random.default_rng(3))))
        np.testing.assert_array_equal(a, b)

    def test_to_arrays_pads_persons(self):
        ds = synth_generate(small_spec())
        X, y = ds.to_arrays(10, 0, M=2)
        assert X.shape == (len(ds), 10, 3, 5, 2) and not X[..., 1].any()
        assert chain(5).n_nodes == X.shape[3]
