import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_HASHER, unit_rows
from knn_el.core import Mention
from knn_el.datastore import (
    Datastore,
    build_datastore,
    build_index,
    load_datastore,
    query_knn,
    query_knn_indexed,
    save_datastore,
)
from knn_el.encoder import FeatureHasherConfig, encode, init_params
from knn_el.errors import (
    CorruptFileError,
    IndexNotBuiltError,
    InvalidInputError,
    VersionMismatchError,
)

FP = bytes(range(32))


def store_from(keys, values=None):
    keys = np.asarray(keys, dtype=np.float64)
    values = values or tuple(f"E{i % 3}" for i in range(len(keys)))
    return Datastore(keys, tuple(values), tuple(f"m{i}" for i in range(len(keys))), FP)


def brute(store, q, k):
    sims = store.keys @ q
    order = sorted(range(store.size), key=lambda i: (-sims[i], i))[:k]
    return [(i, sims[i]) for i in order]


class TestBuild:
    def test_row_per_instance(self, tiny_dataset):
        params = init_params(TINY_HASHER, 16)
        store = build_datastore(tiny_dataset.train, params, tiny_dataset.ontology)
        assert store.size == len(tiny_dataset.train)
        assert store.values == tuple(m.gold for m in tiny_dataset.train)
        assert store.provenance == tuple(m.surface for m in tiny_dataset.train)
        assert store.fingerprint == params.fingerprint()

    def test_aap_sized_input(self):
        data = [Mention(f"term {i % 5000} variant {i % 7}", f"E{i % 40}") for i in range(16_826)]
        params = init_params(FeatureHasherConfig(feature_dim=512), 8)
        assert build_datastore(data, params).size == 16_826

    def test_keys_are_f32_encodings(self, tiny_dataset):
        params = init_params(TINY_HASHER, 16)
        store = build_datastore(tiny_dataset.train[:5], params)
        for m, key in zip(tiny_dataset.train[:5], store.keys):
            exact = encode(m.surface, params)
            assert np.array_equal(key, exact.astype(np.float32).astype(np.float64))

    def test_empty(self):
        store = build_datastore([], init_params(TINY_HASHER, 16))
        assert store.size == 0 and store.dim == 16
        assert query_knn(store, np.ones(16) / 4, 5) == []

    def test_duplicates_kept(self):
        data = [Mention("cold", "A"), Mention("cold", "B")]
        store = build_datastore(data, init_params(TINY_HASHER, 8))
        assert store.size == 2 and np.array_equal(store.keys[0], store.keys[1])
        hits = query_knn(store, store.keys[0], 2)
        assert [h.entity for h in hits] == ["A", "B"]

    def test_unknown_gold(self, tiny_dataset):
        with pytest.raises(InvalidInputError):
            build_datastore([Mention("x", "nope")], init_params(TINY_HASHER, 8), tiny_dataset.ontology)


class TestQuery:
    def test_self_hit(self, rng):
        store = store_from(unit_rows(rng, 20, 4))
        hit = query_knn(store, store.keys[7], 1)[0]
        assert hit.row == 7 and hit.similarity == pytest.approx(1.0, abs=1e-12)

    def test_k_exceeds_size(self, rng):
        store = store_from(unit_rows(rng, 6, 3))
        q = unit_rows(rng, 1, 3)[0]
        hits = query_knn(store, q, 50)
        assert [h.row for h in hits] == [i for i, _ in brute(store, q, 50)]

    def test_hand_set_ties(self):
        keys = [[1, 0], [0, 1], [0.6, 0.8], [0.8, 0.6], [0.6, 0.8], [-1, 0]]
        store = store_from(keys)
        q = np.array([0.6, 0.8])
        hits = query_knn(store, q, 6)
        assert [h.row for h in hits] == [i for i, _ in brute(store, q, 6)]
        assert [h.row for h in hits][:2] == [2, 4]
        assert [h.row for h in query_knn(store, q, 1)] == [2]

    def test_entity_matches_value(self, rng):
        store = store_from(unit_rows(rng, 30, 5))
        for h in query_knn(store, unit_rows(rng, 1, 5)[0], 10):
            assert h.entity == store.values[h.row]

    def test_dim_and_k_checked(self, rng):
        store = store_from(unit_rows(rng, 4, 3))
        with pytest.raises(InvalidInputError):
            query_knn(store, np.ones(4), 1)
        with pytest.raises(InvalidInputError):
            query_knn(store, np.ones(3), 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 60), st.integers(1, 70), st.integers(0, 2**31))
    def test_matches_brute_force(self, m, k, seed):
        rng = np.random.default_rng(seed)
        # coarse grid so that ties are common
        keys = np.round(unit_rows(rng, m, 3) * 2) / 2
        keys[np.all(keys == 0, axis=1)] = [1, 0, 0]
        store = store_from(keys)
        q = np.round(unit_rows(rng, 1, 3)[0] * 2) / 2
        hits = query_knn(store, q, k)
        assert [h.row for h in hits] == [i for i, _ in brute(store, q, k)]
        sims = [h.similarity for h in hits]
        assert all(a >= b for a, b in zip(sims, sims[1:]))

    def test_repeatable(self, rng):
        store = store_from(unit_rows(rng, 50, 8))
        q = unit_rows(rng, 1, 8)[0]
        assert query_knn(store, q, 9) == query_knn(store, q, 9)


class TestIndex:
    def test_requires_index(self, rng):
        store = store_from(unit_rows(rng, 5, 3))
        with pytest.raises(IndexNotBuiltError):
            query_knn_indexed(store, store.keys[0], 1)

    @pytest.mark.parametrize("k", [1, 4, 37, 500])
    def test_identical_to_exact(self, rng, k):
        store = build_index(store_from(unit_rows(rng, 400, 16)))
        for q in unit_rows(rng, 20, 16):
            assert query_knn_indexed(store, q, k) == query_knn(store, q, k)

    def test_ties_identical(self):
        keys = np.array([[1, 0], [0, 1], [0.6, 0.8], [0.8, 0.6], [0.6, 0.8], [-1, 0]] * 5, dtype=float)
        store = build_index(store_from(keys), n_clusters=4)
        for q in keys[:6]:
            for k in (1, 3, 7, 30):
                assert query_knn_indexed(store, q, k) == query_knn(store, q, k)

    def test_empty_and_self(self, rng):
        empty = build_index(store_from(np.zeros((0, 4))))
        assert query_knn_indexed(empty, np.ones(4) / 2, 3) == []
        store = build_index(store_from(unit_rows(rng, 64, 4)))
        assert query_knn_indexed(store, store.keys[10], 1)[0].row == 10

    def test_index_not_part_of_equality(self, rng):
        store = store_from(unit_rows(rng, 10, 3))
        assert build_index(store) == store


class TestPersistence:
    def make(self, tiny_dataset):
        return build_datastore(tiny_dataset.train, init_params(TINY_HASHER, 16), tiny_dataset.ontology)

    def test_round_trip(self, tiny_dataset, tmp_path):
        store = self.make(tiny_dataset)
        path = tmp_path / "s.kels"
        save_datastore(store, path)
        loaded = load_datastore(path)
        assert loaded == store
        assert np.array_equal(loaded.keys, store.keys)
        again = tmp_path / "again.kels"
        save_datastore(loaded, again)
        assert path.read_bytes() == again.read_bytes()

    def test_unicode_provenance(self, tmp_path):
        store = Datastore(np.eye(2), ("A", "B"), ("Sjögren syndrome", "β-thalassemia"), FP)
        save_datastore(store, tmp_path / "u.kels")
        assert load_datastore(tmp_path / "u.kels") == store

    def test_empty_round_trip(self, tmp_path):
        store = store_from(np.zeros((0, 5)))
        save_datastore(store, tmp_path / "e.kels")
        assert load_datastore(tmp_path / "e.kels") == store

    def test_truncated(self, tiny_dataset, tmp_path):
        path = tmp_path / "s.kels"
        save_datastore(self.make(tiny_dataset), path)
        data = path.read_bytes()
        for cut in (0, 10, 60, 500, len(data) - 1):
            path.write_bytes(data[:cut])
            with pytest.raises(CorruptFileError) as info:
                load_datastore(path)
            assert info.value.category == "corrupt-store" and info.value.exit_code == 3

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "s.kels"
        save_datastore(store_from(np.eye(3)), path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(CorruptFileError):
            load_datastore(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "s.kels"
        save_datastore(store_from(np.eye(3)), path)
        path.write_bytes(b"KELX" + path.read_bytes()[4:])
        with pytest.raises(CorruptFileError):
            load_datastore(path)

    def test_version_names_both(self, tmp_path):
        path = tmp_path / "s.kels"
        save_datastore(store_from(np.eye(3)), path)
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError, match="version 2.*version 1") as info:
            load_datastore(path)
        assert info.value.category == "version-mismatch"

    def test_fingerprint_preserved(self, tiny_dataset, tmp_path):
        params = init_params(TINY_HASHER, 16, seed=3)
        store = build_datastore(tiny_dataset.train[:10], params)
        save_datastore(store, tmp_path / "f.kels")
        assert load_datastore(tmp_path / "f.kels").fingerprint == params.fingerprint()
