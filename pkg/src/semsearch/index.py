"""Retrieval substrates: dot-product ANN indexes and a BM25 inverted index.

The ANN index has two modes: ``flat`` performs an exact full scan and is the
correctness oracle; ``ivf`` clusters vectors with seeded k-means and searches
only the ``n_probe`` most promising clusters. The inverted index stores
term -> (doc_id, tf) postings plus the corpus statistics Okapi BM25 needs.
Both structures are immutable after build and round-trip through versioned
little-endian binary files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .textproc import STOPWORDS

ANN_MAGIC = b"SSAN"
INV_MAGIC = b"SSIV"
INDEX_VERSION = 1

KMEANS_ITERATIONS = 25
BM25_K1 = 1.2
BM25_B = 0.75


@dataclass
class SearchResult:
    doc_id: int
    score: float


def _top_k(doc_ids: np.ndarray, scores: np.ndarray, k: int) -> list[SearchResult]:
    """Top-k by score descending, ties broken by lower doc_id."""
    order = np.lexsort((doc_ids, -scores))[:k]
    return [SearchResult(int(doc_ids[i]), float(scores[i])) for i in order]


def _kmeans(vectors: np.ndarray, n_clusters: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Plain Lloyd's k-means with seeded distinct-point initialization.

    Returns (centroids, assignment). Empty clusters are re-seeded from the
    point currently farthest from its centroid so every cluster stays live.
    """
    rng = np.random.default_rng(seed)
    unique = np.unique(vectors, axis=0)
    if len(unique) >= n_clusters:
        centroids = unique[rng.choice(len(unique), size=n_clusters, replace=False)].copy()
    else:
        picks = rng.choice(len(vectors), size=n_clusters, replace=True)
        centroids = vectors[picks].copy()
    assign = np.zeros(len(vectors), dtype=np.int64)
    sq_v = (vectors ** 2).sum(axis=1)
    for _ in range(KMEANS_ITERATIONS):
        d2 = (sq_v[:, None] - 2.0 * vectors @ centroids.T
              + (centroids ** 2).sum(axis=1)[None, :])
        assign = d2.argmin(axis=1)
        for c in range(n_clusters):
            members = vectors[assign == c]
            if len(members) == 0:
                worst = int(d2[np.arange(len(vectors)), assign].argmax())
                centroids[c] = vectors[worst]
                assign[worst] = c
            else:
                centroids[c] = members.mean(axis=0)
    return centroids, assign


class AnnIndex:
    """Dot-product nearest-neighbor index, exact (flat) or clustered (ivf)."""

    def __init__(self, doc_ids: np.ndarray, vectors: np.ndarray, mode: str,
                 centroids: np.ndarray | None = None,
                 assignment: np.ndarray | None = None,
                 n_probe: int = 1, seed: int = 0):
        self.doc_ids = doc_ids
        self.vectors = vectors
        self.mode = mode
        self.centroids = centroids
        self.assignment = assignment
        self.n_probe = n_probe
        self.seed = seed
        if mode == "ivf":
            self._cluster_members = [np.flatnonzero(assignment == c)
                                     for c in range(len(centroids))]

    def __len__(self) -> int:
        return len(self.doc_ids)

    @property
    def n_clusters(self) -> int:
        return 0 if self.centroids is None else len(self.centroids)

    def persist(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(ANN_MAGIC)
            mode_flag = 0 if self.mode == "flat" else 1
            n, dim = self.vectors.shape
            fh.write(struct.pack("<IIQIIq", INDEX_VERSION, mode_flag, n, dim,
                                 self.n_probe, self.seed))
            fh.write(np.ascontiguousarray(self.doc_ids, dtype="<u8").tobytes())
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())
            if self.mode == "ivf":
                fh.write(struct.pack("<I", len(self.centroids)))
                fh.write(np.ascontiguousarray(self.centroids, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(self.assignment, dtype="<u4").tobytes())

    @classmethod
    def load(cls, path) -> "AnnIndex":
        with open(path, "rb") as fh:
            if fh.read(4) != ANN_MAGIC:
                raise InputError(f"{path} is not an ANN index file")
            version, mode_flag, n, dim, n_probe, seed = struct.unpack(
                "<IIQIIq", fh.read(32))
            if version != INDEX_VERSION:
                raise InputError(f"unsupported ANN index version {version}")
            doc_ids = np.frombuffer(fh.read(8 * n), dtype="<u8").astype(np.uint64)
            vectors = np.frombuffer(fh.read(8 * n * dim), dtype="<f8").reshape(n, dim).copy()
            if mode_flag == 0:
                return cls(doc_ids, vectors, "flat", seed=seed)
            (n_clusters,) = struct.unpack("<I", fh.read(4))
            centroids = np.frombuffer(fh.read(8 * n_clusters * dim),
                                      dtype="<f8").reshape(n_clusters, dim).copy()
            assignment = np.frombuffer(fh.read(4 * n), dtype="<u4").astype(np.int64)
            return cls(doc_ids, vectors, "ivf", centroids=centroids,
                       assignment=assignment, n_probe=n_probe, seed=seed)


def build_ann(embeddings: dict[int, np.ndarray], mode: str = "flat",
              n_clusters: int = 0, n_probe: int = 1, seed: int = 0) -> AnnIndex:
    """Build a flat or IVF index over a doc_id -> float vector map."""
    if not embeddings:
        raise ContractError("cannot build an ANN index over zero embeddings")
    if mode not in ("flat", "ivf"):
        raise ContractError(f"unknown ANN mode {mode!r}")
    ids = sorted(embeddings)
    doc_ids = np.array(ids, dtype=np.uint64)
    vectors = np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in ids])
    if mode == "flat":
        return AnnIndex(doc_ids, vectors, "flat", seed=seed)
    if n_clusters < 1 or n_clusters > len(ids):
        raise ContractError(
            f"n_clusters={n_clusters} must be in [1, n_docs={len(ids)}]")
    centroids, assignment = _kmeans(vectors, n_clusters, seed)
    return AnnIndex(doc_ids, vectors, "ivf", centroids=centroids,
                    assignment=assignment, n_probe=n_probe, seed=seed)


def ann_search(index: AnnIndex, query_emb: np.ndarray, k: int,
               n_probe: int | None = None) -> tuple[list[SearchResult], bool]:
    """Top-k docs by dot product, descending.

    Returns (results, truncated) where truncated flags k exceeding the number
    of documents actually scanned.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    q = np.asarray(query_emb, dtype=np.float64)
    if q.shape != (index.vectors.shape[1],):
        raise ContractError(
            f"query dim {q.shape} does not match index dim {index.vectors.shape[1]}")
    if index.mode == "flat":
        scores = index.vectors @ q
        return _top_k(index.doc_ids, scores, k), k > len(index)
    probes = index.n_probe if n_probe is None else n_probe
    probes = min(max(probes, 1), index.n_clusters)
    # probe clusters whose centroids score highest under the query
    cluster_order = np.argsort(-(index.centroids @ q), kind="stable")[:probes]
    rows = np.concatenate([index._cluster_members[c] for c in cluster_order])
    if len(rows) == 0:
        return [], True
    scores = index.vectors[rows] @ q
    return _top_k(index.doc_ids[rows], scores, k), k > len(rows)


class InvertedIndex:
    """Term postings plus the corpus statistics used by Okapi BM25."""

    def __init__(self, postings: dict[str, list[tuple[int, int]]],
                 doc_lengths: dict[int, int]):
        self.postings = postings          # term -> [(doc_id, tf)] sorted by doc_id
        self.doc_lengths = doc_lengths
        self.n_docs = len(doc_lengths)
        total = sum(doc_lengths.values())
        self.avg_doc_length = total / self.n_docs if self.n_docs else 0.0

    def document_frequency(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def persist(self, path) -> None:
        payload = {
            "postings": {t: p for t, p in sorted(self.postings.items())},
            "doc_lengths": {str(d): n for d, n in sorted(self.doc_lengths.items())},
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(INV_MAGIC)
            fh.write(struct.pack("<IQ", INDEX_VERSION, len(blob)))
            fh.write(blob)

    @classmethod
    def load(cls, path) -> "InvertedIndex":
        with open(path, "rb") as fh:
            if fh.read(4) != INV_MAGIC:
                raise InputError(f"{path} is not an inverted index file")
            version, size = struct.unpack("<IQ", fh.read(12))
            if version != INDEX_VERSION:
                raise InputError(f"unsupported inverted index version {version}")
            payload = json.loads(fh.read(size).decode("utf-8"))
        postings = {t: [(int(d), int(tf)) for d, tf in p]
                    for t, p in payload["postings"].items()}
        doc_lengths = {int(d): int(n) for d, n in payload["doc_lengths"].items()}
        return cls(postings, doc_lengths)


def build_inverted(corpus: dict[int, list[str]]) -> InvertedIndex:
    """Index a doc_id -> token list corpus; stop-words are excluded."""
    if not corpus:
        raise ContractError("cannot build an inverted index over an empty corpus")
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_lengths: dict[int, int] = {}
    for doc_id in sorted(corpus):
        tokens = [t for t in corpus[doc_id] if t not in STOPWORDS]
        doc_lengths[doc_id] = len(tokens)
        counts: dict[str, int] = {}
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1
        for term, tf in counts.items():
            postings.setdefault(term, []).append((doc_id, tf))
    for plist in postings.values():
        plist.sort()
    return InvertedIndex(postings, doc_lengths)


def bm25_idf(index: InvertedIndex, term: str) -> float:
    df = index.document_frequency(term)
    return float(np.log((index.n_docs - df + 0.5) / (df + 0.5) + 1.0))


def bm25_search(index: InvertedIndex, query_tokens: list[str],
                k: int) -> tuple[list[SearchResult], bool]:
    """Okapi BM25 top-k; returns (results, empty_query) where the flag marks
    an all-stopword (or all-unknown) query that produced no scores."""
    if k < 1:
        raise ContractError("k must be >= 1")
    terms = [t for t in query_tokens if t not in STOPWORDS]
    scores: dict[int, float] = {}
    for term in terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = bm25_idf(index, term)
        for doc_id, tf in plist:
            norm = 1.0 - BM25_B + BM25_B * index.doc_lengths[doc_id] / index.avg_doc_length
            gain = idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
            scores[doc_id] = scores.get(doc_id, 0.0) + gain
    if not scores:
        return [], True
    doc_ids = np.array(sorted(scores), dtype=np.uint64)
    vals = np.array([scores[int(d)] for d in doc_ids])
    return _top_k(doc_ids, vals, k), False
