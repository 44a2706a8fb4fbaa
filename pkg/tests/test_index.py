import math

import numpy as np
import pytest

from semsearch import index as idx
from semsearch.errors import ContractError, InputError


def random_embeddings(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    return {i: rng.normal(size=dim) for i in range(n)}


def full_scan_oracle(embeddings, q, k):
    scored = sorted(((float(np.dot(v, q)), doc_id) for doc_id, v in embeddings.items()),
                    key=lambda t: (-t[0], t[1]))
    return [(doc_id, s) for s, doc_id in scored[:k]]


class TestBuildAnn:
    def test_single_doc_flat(self):
        index = idx.build_ann({7: np.ones(3)}, mode="flat")
        assert len(index) == 1

    def test_two_separated_clusters_share_centroids(self):
        rng = np.random.default_rng(1)
        embeddings = {}
        for i in range(20):
            embeddings[i] = np.array([10.0, 10.0]) + rng.normal(scale=0.1, size=2)
            embeddings[100 + i] = np.array([-10.0, -10.0]) + rng.normal(scale=0.1, size=2)
        index = idx.build_ann(embeddings, mode="ivf", n_clusters=2, seed=3)
        low = {index.assignment[i] for i, d in enumerate(index.doc_ids) if d < 100}
        high = {index.assignment[i] for i, d in enumerate(index.doc_ids) if d >= 100}
        assert len(low) == 1 and len(high) == 1 and low != high

    def test_every_doc_in_exactly_one_cluster(self):
        index = idx.build_ann(random_embeddings(60, 4), mode="ivf", n_clusters=5, seed=0)
        assert index.assignment.shape == (60,)
        covered = sum(len(m) for m in index._cluster_members)
        assert covered == 60

    def test_rebuild_same_seed_identical(self):
        embeddings = random_embeddings(40, 3, seed=2)
        a = idx.build_ann(embeddings, mode="ivf", n_clusters=4, seed=9)
        b = idx.build_ann(embeddings, mode="ivf", n_clusters=4, seed=9)
        assert np.array_equal(a.centroids, b.centroids)
        assert np.array_equal(a.assignment, b.assignment)

    def test_too_many_clusters(self):
        with pytest.raises(ContractError):
            idx.build_ann(random_embeddings(3, 2), mode="ivf", n_clusters=4)

    def test_empty_input(self):
        with pytest.raises(ContractError):
            idx.build_ann({}, mode="flat")

    def test_unknown_mode(self):
        with pytest.raises(ContractError):
            idx.build_ann({0: np.ones(2)}, mode="hnsw")


class TestAnnSearch:
    def test_matching_unit_vector_wins(self):
        embeddings = {0: np.array([1.0, 0.0, 0.0]),
                      1: np.array([0.0, 1.0, 0.0]),
                      2: np.array([0.0, 0.0, 1.0])}
        index = idx.build_ann(embeddings, mode="flat")
        results, truncated = idx.ann_search(index, np.array([0.0, 1.0, 0.0]), 1)
        assert results[0].doc_id == 1 and not truncated

    def test_flat_equals_full_scan_oracle(self):
        embeddings = random_embeddings(200, 6, seed=4)
        index = idx.build_ann(embeddings, mode="flat")
        rng = np.random.default_rng(5)
        for _ in range(20):
            q = rng.normal(size=6)
            results, _ = idx.ann_search(index, q, 10)
            assert [(r.doc_id, pytest.approx(r.score, abs=1e-9)) for r in results] == \
                full_scan_oracle(embeddings, q, 10)

    def test_ivf_full_probing_equals_flat(self):
        embeddings = random_embeddings(120, 5, seed=6)
        flat = idx.build_ann(embeddings, mode="flat")
        ivf = idx.build_ann(embeddings, mode="ivf", n_clusters=8, n_probe=8, seed=1)
        q = np.random.default_rng(7).normal(size=5)
        rf, _ = idx.ann_search(flat, q, 15)
        ri, _ = idx.ann_search(ivf, q, 15)
        assert [(r.doc_id, r.score) for r in ri] == [(r.doc_id, r.score) for r in rf]

    def test_scores_descending_and_recomputable(self):
        embeddings = random_embeddings(80, 4, seed=8)
        index = idx.build_ann(embeddings, mode="ivf", n_clusters=6, n_probe=3, seed=2)
        q = np.random.default_rng(9).normal(size=4)
        results, _ = idx.ann_search(index, q, 12)
        scores = [r.score for r in results]
        assert scores == sorted(scores, reverse=True)
        for r in results:
            assert abs(r.score - float(np.dot(embeddings[r.doc_id], q))) < 1e-9

    def test_k_beyond_corpus_returns_all_flagged(self):
        index = idx.build_ann(random_embeddings(5, 3), mode="flat")
        results, truncated = idx.ann_search(index, np.ones(3), 50)
        assert len(results) == 5 and truncated

    def test_tie_broken_by_lower_doc_id(self):
        embeddings = {9: np.array([1.0, 0.0]), 3: np.array([1.0, 0.0]),
                      5: np.array([0.0, 1.0])}
        index = idx.build_ann(embeddings, mode="flat")
        results, _ = idx.ann_search(index, np.array([1.0, 0.0]), 2)
        assert [r.doc_id for r in results] == [3, 9]

    def test_bad_k_and_dim(self):
        index = idx.build_ann(random_embeddings(4, 3), mode="flat")
        with pytest.raises(ContractError):
            idx.ann_search(index, np.ones(3), 0)
        with pytest.raises(ContractError):
            idx.ann_search(index, np.ones(4), 1)

    def test_ivf_recall_smoke(self):
        # small-scale version of the clustered-corpus recall check
        rng = np.random.default_rng(10)
        centers = rng.normal(scale=5.0, size=(10, 8))
        embeddings = {i: centers[i % 10] + rng.normal(scale=0.5, size=8)
                      for i in range(1000)}
        flat = idx.build_ann(embeddings, mode="flat")
        ivf = idx.build_ann(embeddings, mode="ivf", n_clusters=10, n_probe=3, seed=0)
        hits = total = 0
        for _ in range(30):
            q = centers[rng.integers(10)] + rng.normal(scale=0.5, size=8)
            truth = {r.doc_id for r in idx.ann_search(flat, q, 10)[0]}
            got = {r.doc_id for r in idx.ann_search(ivf, q, 10)[0]}
            hits += len(truth & got)
            total += 10
        assert hits / total >= 0.9


class TestAnnPersistence:
    def test_flat_round_trip(self, tmp_path):
        index = idx.build_ann(random_embeddings(30, 4, seed=11), mode="flat")
        path = tmp_path / "flat.ann"
        index.persist(path)
        loaded = idx.AnnIndex.load(path)
        assert loaded.mode == "flat"
        assert np.array_equal(loaded.doc_ids, index.doc_ids)
        assert np.array_equal(loaded.vectors, index.vectors)

    def test_ivf_round_trip_same_results(self, tmp_path):
        index = idx.build_ann(random_embeddings(50, 4, seed=12), mode="ivf",
                              n_clusters=5, n_probe=2, seed=3)
        path = tmp_path / "ivf.ann"
        index.persist(path)
        loaded = idx.AnnIndex.load(path)
        q = np.random.default_rng(13).normal(size=4)
        assert ([(r.doc_id, r.score) for r in idx.ann_search(loaded, q, 7)[0]]
                == [(r.doc_id, r.score) for r in idx.ann_search(index, q, 7)[0]])

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "x.ann"
        path.write_bytes(b"garbage!")
        with pytest.raises(InputError):
            idx.AnnIndex.load(path)


class TestInvertedIndex:
    def test_term_frequencies(self):
        index = idx.build_inverted({1: ["aa", "bb", "aa"]})
        assert index.postings["aa"] == [(1, 2)]
        assert index.postings["bb"] == [(1, 1)]

    def test_term_in_every_doc(self):
        index = idx.build_inverted({i: ["common", f"t{i}"] for i in range(5)})
        assert index.document_frequency("common") == 5

    def test_postings_sorted_by_doc_id(self):
        index = idx.build_inverted({9: ["x"], 2: ["x"], 5: ["x"]})
        assert index.postings["x"] == [(2, 1), (5, 1), (9, 1)]

    def test_empty_corpus(self):
        with pytest.raises(ContractError):
            idx.build_inverted({})

    def test_round_trip_byte_exact(self, tmp_path):
        index = idx.build_inverted({i: ["alpha", "beta", f"term{i % 3}"]
                                    for i in range(20)})
        a, b = tmp_path / "a.inv", tmp_path / "b.inv"
        index.persist(a)
        loaded = idx.InvertedIndex.load(a)
        assert loaded.postings == index.postings
        assert loaded.doc_lengths == index.doc_lengths
        loaded.persist(b)
        assert a.read_bytes() == b.read_bytes()


def hand_bm25(tf, df, n_docs, doc_len, avgdl, k1=1.2, b=0.75):
    idf = math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)
    return idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc_len / avgdl))


class TestBm25Search:
    CORPUS = {1: ["apple", "banana"],
              2: ["apple", "apple", "cherry"],
              3: ["cherry"]}

    def test_three_doc_hand_oracle(self):
        index = idx.build_inverted(self.CORPUS)
        results, _ = idx.bm25_search(index, ["apple"], 3)
        expect = sorted(
            [(1, hand_bm25(1, 2, 3, 2, 2.0)), (2, hand_bm25(2, 2, 3, 3, 2.0))],
            key=lambda t: -t[1])
        assert len(results) == 2
        for r, (doc_id, score) in zip(results, expect):
            assert r.doc_id == doc_id
            assert abs(r.score - score) < 1e-9

    def test_absent_term_contributes_nothing(self):
        index = idx.build_inverted(self.CORPUS)
        base, _ = idx.bm25_search(index, ["cherry"], 3)
        with_junk, _ = idx.bm25_search(index, ["cherry", "durian"], 3)
        assert [(r.doc_id, r.score) for r in base] == \
            [(r.doc_id, r.score) for r in with_junk]

    def test_identical_docs_tie_by_doc_id(self):
        index = idx.build_inverted({4: ["kiwi"], 2: ["kiwi"]})
        results, _ = idx.bm25_search(index, ["kiwi"], 2)
        assert [r.doc_id for r in results] == [2, 4]
        assert results[0].score == results[1].score

    def test_all_stopword_query_flagged_empty(self):
        index = idx.build_inverted(self.CORPUS)
        results, empty = idx.bm25_search(index, ["the", "of"], 3)
        assert results == [] and empty

    def test_score_non_increasing_in_document_frequency(self):
        # same tf/doc length for the probe doc, growing df for the term
        scores = []
        for df in range(1, 6):
            corpus = {0: ["target", "pad"]}
            for j in range(1, df):
                corpus[j] = ["target", "pad"]
            for j in range(10, 15):
                corpus[j] = ["other", "pad"]
            index = idx.build_inverted(corpus)
            results, _ = idx.bm25_search(index, ["target"], 10)
            scores.append(next(r.score for r in results if r.doc_id == 0))
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_bad_k(self):
        index = idx.build_inverted(self.CORPUS)
        with pytest.raises(ContractError):
            idx.bm25_search(index, ["apple"], 0)
