import numpy as np
import pytest

from pnma.dataio import Instance, build_vocab
from pnma.encoder import init_encoder_params
from pnma.errors import CapacityError, DimensionError, DomainError, FormatError
from pnma.memory import (
    ActivationMemory,
    build_memory,
    deserialize_memory,
    knn_entry_ids,
    knn_query,
    serialize_memory,
)
from pnma.numeric import make_rng


def naive_knn(query, memory, k, excluded_ids=()):
    """Independent reference scan: per-entry squared distance, tie by id."""
    q = query.astype(np.float64)
    rows = []
    for i in range(len(memory)):
        if i in excluded_ids:
            continue
        m = memory.vectors[i].astype(np.float64)
        rows.append((float(np.square(q - m).sum()), i))
    rows.sort()
    top = rows[:k]
    ids = np.array([i for _, i in top], dtype=np.int64)
    dists = np.sqrt(np.array([d for d, _ in top]))
    return ids, dists


def random_memory(rng, n=50, d=8, n_labels=4, duplicates=0):
    vectors = rng.normal(size=(n, d)).astype(np.float32)
    for i in range(duplicates):
        vectors[n - 1 - i] = vectors[i]  # plant exact ties
    labels = rng.integers(0, n_labels, size=n)
    provenance = [(f"s{i // 5}", i % 5) for i in range(n)]
    return ActivationMemory(vectors=vectors, labels=labels, provenance=provenance)


class TestKnnQuery:
    def test_self_match_rank_one(self):
        rng = make_rng(1)
        mem = random_memory(rng)
        q = mem.vectors[17]
        res = knn_query(q, mem, 3)
        assert res.entry_ids[0] == 17
        assert res.distances[0] == 0.0

    def test_brute_force_oracle_1000_entries(self):
        rng = make_rng(2)
        mem = random_memory(rng, n=1000, d=16, duplicates=25)
        queries = rng.normal(size=(100, 16)).astype(np.float32)
        # make some queries exact duplicates of stored vectors too
        queries[:10] = mem.vectors[:10]
        results = knn_query(queries, mem, 8)
        for qi in range(100):
            ids, dists = naive_knn(queries[qi], mem, 8)
            np.testing.assert_array_equal(results[qi].entry_ids, ids)
            np.testing.assert_array_equal(results[qi].distances, dists)

    def test_duplicate_vectors_tie_by_lower_entry_id(self):
        vecs = np.zeros((4, 3), dtype=np.float32)
        mem = ActivationMemory(
            vectors=vecs, labels=np.zeros(4, dtype=np.int64),
            provenance=[("s", i) for i in range(4)],
        )
        res = knn_query(np.zeros(3, dtype=np.float32), mem, 3)
        np.testing.assert_array_equal(res.entry_ids, [0, 1, 2])

    def test_capacity_error(self):
        rng = make_rng(3)
        mem = random_memory(rng, n=10)
        with pytest.raises(CapacityError):
            knn_query(mem.vectors[0], mem, 11)

    def test_capacity_counts_exclusions(self):
        rng = make_rng(4)
        mem = random_memory(rng, n=10)
        exclude = [mem.provenance[0]]
        with pytest.raises(CapacityError):
            knn_query(mem.vectors[0], mem, 10, exclude=exclude)

    def test_excluded_provenance_never_returned(self):
        rng = make_rng(5)
        mem = random_memory(rng, n=30)
        q = mem.vectors[4]
        res = knn_query(q, mem, 5, exclude=[mem.provenance[4]])
        assert 4 not in res.entry_ids
        ids, dists = naive_knn(q, mem, 5, excluded_ids={4})
        np.testing.assert_array_equal(res.entry_ids, ids)
        np.testing.assert_array_equal(res.distances, dists)

    def test_per_query_exclusions(self):
        rng = make_rng(6)
        mem = random_memory(rng, n=20)
        queries = mem.vectors[:2]
        exclude = [[mem.provenance[0]], [mem.provenance[1]]]
        res = knn_query(queries, mem, 4, exclude=exclude)
        assert 0 not in res[0].entry_ids
        assert 1 not in res[1].entry_ids

    def test_batched_equals_one_at_a_time(self):
        rng = make_rng(7)
        mem = random_memory(rng, n=200, d=12)
        queries = rng.normal(size=(33, 12)).astype(np.float32)
        batch = knn_query(queries, mem, 6)
        for qi in range(33):
            single = knn_query(queries[qi], mem, 6)
            np.testing.assert_array_equal(batch[qi].entry_ids, single.entry_ids)
            np.testing.assert_array_equal(batch[qi].distances, single.distances)

    def test_threads_do_not_change_results(self):
        rng = make_rng(8)
        mem = random_memory(rng, n=300, d=10)
        queries = rng.normal(size=(150, 10)).astype(np.float32)
        a, da = knn_entry_ids(queries, mem, 5, threads=1)
        b, db = knn_entry_ids(queries, mem, 5, threads=4)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(da, db)

    def test_distances_nondecreasing(self):
        rng = make_rng(9)
        mem = random_memory(rng, n=64)
        res = knn_query(rng.normal(size=8).astype(np.float32), mem, 20)
        assert np.all(np.diff(res.distances) >= 0)

    def test_width_mismatch(self):
        rng = make_rng(10)
        mem = random_memory(rng, d=8)
        with pytest.raises(DimensionError):
            knn_query(np.zeros(5, dtype=np.float32), mem, 2)


def synthetic_corpus():
    return [
        Instance("t-0", ("the", "cat", "runs"), 2, (0, 0, 1), ("B-A0", "I-A0", "B-V")),
        Instance("t-1", ("a", "dog", "runs"), 2, (0, 0, 1), ("B-A0", "I-A0", "B-V")),
        Instance("t-2", ("the", "dog", "sits"), 2, (0, 0, 1), ("B-A0", "I-A0", "B-V")),
    ]


class TestBuildMemory:
    def setup_method(self):
        self.instances = synthetic_corpus()
        self.vocab = build_vocab(self.instances, min_frequency=1)
        self.encoder = init_encoder_params(
            self.vocab.n_words, d_word=4, d_pred=3, d_hidden=6, n_layers=2,
            rng=make_rng(0),
        )

    def test_fraction_one_keeps_every_token(self):
        mem = build_memory(self.encoder, self.vocab, self.instances, fraction=1.0)
        assert len(mem) == 9

    def test_default_fraction_is_fifteen_percent(self):
        import inspect

        sig = inspect.signature(build_memory)
        assert sig.parameters["fraction"].default == 0.15

    def test_same_seed_same_provenance(self):
        a = build_memory(self.encoder, self.vocab, self.instances, fraction=0.5, seed=3)
        b = build_memory(self.encoder, self.vocab, self.instances, fraction=0.5, seed=3)
        assert a.provenance == b.provenance
        np.testing.assert_array_equal(a.vectors, b.vectors)
        c = build_memory(self.encoder, self.vocab, self.instances, fraction=0.5, seed=4)
        assert a.provenance != c.provenance

    def test_vectors_match_eval_encoding(self):
        from pnma.encoder import encode_sequence

        mem = build_memory(self.encoder, self.vocab, self.instances, fraction=1.0)
        h0 = encode_sequence(self.instances[0], self.encoder, self.vocab).h_final
        idx = mem.provenance.index(("t-0", 1))
        np.testing.assert_array_equal(mem.vectors[idx], h0[1].astype(np.float32))

    def test_labels_and_provenance_stored(self):
        mem = build_memory(self.encoder, self.vocab, self.instances, fraction=1.0)
        idx = mem.provenance.index(("t-2", 2))
        assert self.vocab.tag_labels[mem.labels[idx]] == "B-V"

    def test_stratified_mode_covers_every_label(self):
        mem = build_memory(
            self.encoder, self.vocab, self.instances, fraction=0.34, stratified=True
        )
        assert set(mem.labels.tolist()) == {0, 1, 2}

    def test_empty_training_set(self):
        with pytest.raises(DomainError, match="empty"):
            build_memory(self.encoder, self.vocab, [], fraction=0.5)

    def test_bad_fraction(self):
        with pytest.raises(DomainError):
            build_memory(self.encoder, self.vocab, self.instances, fraction=0.0)

    def test_memory_is_immutable(self):
        mem = build_memory(self.encoder, self.vocab, self.instances, fraction=1.0)
        with pytest.raises(ValueError):
            mem.vectors[0, 0] = 1.0


class TestSerialization:
    def _mem(self, n=100, d=7):
        rng = make_rng(11)
        return ActivationMemory(
            vectors=rng.normal(size=(n, d)).astype(np.float32),
            labels=rng.integers(0, 5, size=n),
            provenance=[(f"sent-{i:03d}", i % 9) for i in range(n)],
            seed=42,
            fraction=0.15,
            source_digest="abc123",
        )

    def test_round_trip_bit_identical(self, tmp_path):
        mem = self._mem()
        path = str(tmp_path / "m.mem")
        serialize_memory(mem, path)
        back = deserialize_memory(path)
        np.testing.assert_array_equal(back.vectors, mem.vectors)
        np.testing.assert_array_equal(back.labels, mem.labels)
        assert back.provenance == mem.provenance
        assert back.seed == mem.seed
        assert back.fraction == mem.fraction
        assert back.source_digest == mem.source_digest
        # and the file bytes themselves are stable
        path2 = str(tmp_path / "m2.mem")
        serialize_memory(back, path2)
        assert open(path, "rb").read() == open(path2, "rb").read()

    def test_empty_memory_round_trips(self, tmp_path):
        mem = ActivationMemory(
            vectors=np.zeros((0, 4), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
            provenance=[],
        )
        path = str(tmp_path / "e.mem")
        serialize_memory(mem, path)
        back = deserialize_memory(path)
        assert len(back) == 0
        assert back.d == 4

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.mem"
        path.write_bytes(b"NOTAMEM1" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            deserialize_memory(str(path))

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v2.mem"
        path.write_bytes(b"PNMAMEM2" + b"\x00" * 64)
        with pytest.raises(FormatError, match="version"):
            deserialize_memory(str(path))

    def test_truncation(self, tmp_path):
        mem = self._mem(n=10)
        path = str(tmp_path / "t.mem")
        serialize_memory(mem, path)
        blob = open(path, "rb").read()
        path2 = tmp_path / "trunc.mem"
        path2.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            deserialize_memory(str(path2))

    def test_digest_mismatch(self, tmp_path):
        mem = self._mem(n=10)
        path = str(tmp_path / "d.mem")
        serialize_memory(mem, path)
        blob = bytearray(open(path, "rb").read())
        blob[20] ^= 0xFF  # flip one payload byte
        path2 = tmp_path / "corrupt.mem"
        path2.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="digest"):
            deserialize_memory(str(path2))
