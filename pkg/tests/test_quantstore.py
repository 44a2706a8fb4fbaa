import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semsearch import quantstore as qs
from semsearch.errors import ContractError, InputError, NotFoundError


class TestCalibrate:
    def test_direct_min_max(self):
        p = qs.calibrate(np.array([[-1.0, 0.0], [1.0, 2.0]]))
        assert np.array_equal(p.s_min, [-1.0, 0.0])
        assert np.array_equal(p.s_max, [1.0, 2.0])
        assert np.allclose(p.interval, 2.0 / 255)
        assert p.widened == []

    def test_single_vector_widened(self):
        p = qs.calibrate(np.array([[0.5, -0.5]]))
        assert p.widened == [0, 1]
        assert np.all(p.s_max > p.s_min)

    def test_l_is_255(self):
        p = qs.calibrate(np.random.default_rng(0).uniform(-1, 1, (10, 4)))
        assert p.n_intervals == 255

    def test_empty_sample_rejected(self):
        with pytest.raises(ContractError):
            qs.calibrate(np.zeros((0, 3)))


def unit_params():
    return qs.calibrate(np.array([[-1.0], [1.0]]))


class TestQuantize:
    def test_lower_bound_is_zero(self):
        p = unit_params()
        assert qs.quantize(np.array([-1.0]), p)[0] == 0

    def test_midpoint_value(self):
        p = unit_params()
        assert qs.quantize(np.array([0.0]), p)[0] == 127

    def test_upper_bound_clamps_to_255(self):
        p = unit_params()
        assert qs.quantize(np.array([1.0]), p)[0] == 255
        assert qs.quantize(np.array([99.0]), p)[0] == 255
        assert qs.quantize(np.array([-99.0]), p)[0] == 0

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            qs.quantize(np.zeros(3), unit_params())

    def test_monotone_per_dimension(self):
        p = unit_params()
        rng = np.random.default_rng(1)
        vals = np.sort(rng.uniform(-1, 1, 500))
        idx = [qs.quantize(np.array([v]), p)[0] for v in vals]
        assert all(a <= b for a, b in zip(idx, idx[1:]))


class TestDequantize:
    def test_index_127_recovers_exact_zero(self):
        p = unit_params()
        assert qs.dequantize(np.array([127], dtype=np.uint8), p)[0] == 0.0

    def test_index_zero_is_smin_plus_half_interval(self):
        p = unit_params()
        expect = p.s_min[0] + p.interval[0] / 2
        assert qs.dequantize(np.array([0], dtype=np.uint8), p)[0] == expect

    def test_round_trip_bounded_by_half_interval(self):
        rng = np.random.default_rng(2)
        sample = rng.uniform(-3, 5, (200, 8))
        p = qs.calibrate(sample)
        for v in sample[:50]:
            back = qs.dequantize(qs.quantize(v, p), p)
            assert np.all(np.abs(v - back) <= p.interval / 2 + 1e-15)

    @settings(max_examples=200)
    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4))
    def test_round_trip_property(self, vals):
        p = qs.calibrate(np.array([[-1.0] * 4, [1.0] * 4]))
        v = np.array(vals)
        back = qs.dequantize(qs.quantize(v, p), p)
        assert np.all(np.abs(v - back) <= p.interval / 2 + 1e-15)


class TestStore:
    def make_store(self, n=32, dim=8, seed=3):
        rng = np.random.default_rng(seed)
        embeddings = {int(i * 7): rng.uniform(-1, 1, dim) for i in range(n)}
        return qs.build_store(embeddings), embeddings

    def test_put_get_identical_bytes(self):
        store, _ = self.make_store()
        qv = store.get(7)
        again = store.get(7)
        assert np.array_equal(qv, again)
        assert qv.dtype == np.uint8

    def test_get_unknown_id(self):
        store, _ = self.make_store()
        with pytest.raises(NotFoundError):
            store.get(123456)

    def test_duplicate_put_rejected(self):
        store, _ = self.make_store()
        with pytest.raises(ContractError):
            store.put(7, np.zeros(8, dtype=np.uint8))

    def test_persist_load_round_trip(self, tmp_path):
        store, _ = self.make_store(n=1000, dim=16)
        path = tmp_path / "store.bin"
        store.persist(path)
        loaded = qs.EmbeddingStore.load(path)
        assert loaded.doc_ids() == store.doc_ids()
        for doc_id in store.doc_ids():
            assert np.array_equal(loaded.get(doc_id), store.get(doc_id))
        assert np.array_equal(loaded.params.s_min, store.params.s_min)
        assert np.array_equal(loaded.params.s_max, store.params.s_max)

    def test_persist_bit_identical(self, tmp_path):
        store, _ = self.make_store()
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        store.persist(a)
        store.persist(b)
        assert a.read_bytes() == b.read_bytes()

    def test_storage_per_document_is_dim_bytes(self, tmp_path):
        dim, n = 16, 50
        store, _ = self.make_store(n=n, dim=dim)
        path = tmp_path / "store.bin"
        store.persist(path)
        header = 4 + 16 + 8 * dim * 2 + 4
        assert path.stat().st_size == header + n * (8 + dim)
        # 4x reduction vs 32-bit floats on the embedding payload itself
        assert dim == (dim * 4) // 4

    def test_load_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"nope")
        with pytest.raises(InputError):
            qs.EmbeddingStore.load(path)

    def test_dequantized_lookup(self):
        store, embeddings = self.make_store()
        v = store.get_dequantized(0)
        assert np.all(np.abs(v - embeddings[0]) <= store.params.interval / 2 + 1e-15)
