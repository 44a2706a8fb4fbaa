"""Online retrieval workflow: dual-channel candidate generation and filtering.

A query runs through two independent channels — BM25 over the inverted index
and embedding dot-product search over the ANN index — whose results merge
into a deduplicated candidate pool. Semantic scores are then completed for
text-only candidates from the quantized embedding store, every candidate gets
a feature vector (statistical features, BM25 score, semantic score), and a
pairwise-trained linear ranker narrows the pool to the final n_out.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import index as idx
from .encoder import EncoderModel
from .errors import ContractError, InputError
from .quantstore import EmbeddingStore
from .textproc import tokenize

logger = logging.getLogger(__name__)

SEMANTIC_FEATURE = "f_semantic"
BM25_FEATURE = "f_bm25"

DEFAULT_K_SEM = 100
DEFAULT_K_TEXT = 100
DEFAULT_N_OUT = 20


@dataclass
class CandidateEntry:
    doc_id: int
    sources: set = field(default_factory=set)      # subset of {"text", "semantic"}
    semantic_score: float | None = None
    bm25_score: float | None = None


@dataclass
class CandidatePool:
    entries: dict[int, CandidateEntry] = field(default_factory=dict)
    empty_flagged: bool = False

    def __len__(self) -> int:
        return len(self.entries)

    def merge(self, doc_id: int, source: str, score: float) -> None:
        entry = self.entries.setdefault(doc_id, CandidateEntry(doc_id))
        entry.sources.add(source)
        if source == "semantic":
            entry.semantic_score = score
        else:
            entry.bm25_score = score


@dataclass
class FeatureVector:
    """Named feature values for one candidate; the semantic matching score
    must be populated before ranking."""
    values: dict[str, float]

    def as_array(self, names: list[str]) -> np.ndarray:
        return np.array([self.values[n] for n in names], dtype=np.float64)


class LinearRanker:
    """Affine scorer over a fixed feature-name order, persisted as JSON."""

    def __init__(self, feature_names: list[str], weights: np.ndarray, bias: float = 0.0):
        if len(feature_names) != len(weights):
            raise ContractError("one weight per feature name required")
        self.feature_names = list(feature_names)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)

    def score(self, fv: FeatureVector) -> float:
        return float(self.weights @ fv.as_array(self.feature_names) + self.bias)

    def to_json(self) -> str:
        return json.dumps({"feature_names": self.feature_names,
                           "weights": self.weights.tolist(),
                           "bias": self.bias}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LinearRanker":
        try:
            obj = json.loads(text)
            return cls(obj["feature_names"], np.array(obj["weights"]), obj["bias"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"malformed ranker file: {exc}") from None

    def persist(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "LinearRanker":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def retrieve(query_text: str, model: EncoderModel, ann_index: idx.AnnIndex | None,
             inverted_index: idx.InvertedIndex | None,
             k_sem: int = DEFAULT_K_SEM, k_text: int = DEFAULT_K_TEXT) -> CandidatePool:
    """Run both retrieval channels and merge their results by doc_id.

    Either channel can be disabled with k=0 (or a None index); semantic
    scores found during ANN search are kept on the entries for reuse.
    """
    if k_sem < 0 or k_text < 0:
        raise ContractError("channel depths must be non-negative")
    pool = CandidatePool()
    if k_text > 0 and inverted_index is not None:
        results, _ = idx.bm25_search(inverted_index, tokenize(query_text), k_text)
        for r in results:
            pool.merge(r.doc_id, "text", r.score)
    if k_sem > 0 and ann_index is not None:
        if model.vocab is None:
            raise ContractError("model has no vocabulary; cannot embed the query")
        seq = model.vocab.encode(query_text, model.config.max_len)
        q_emb = model.embed_query(seq).data
        results, _ = idx.ann_search(ann_index, q_emb, k_sem)
        for r in results:
            pool.merge(r.doc_id, "semantic", r.score)
    if not pool.entries:
        pool.empty_flagged = True
        logger.warning("retrieve(%r): both channels returned nothing", query_text)
    return pool


def backfill_semantic(pool: CandidatePool, query_emb: np.ndarray,
                      store: EmbeddingStore | None,
                      model: EncoderModel | None = None,
                      titles: dict[int, str] | None = None) -> list[int]:
    """Complete semantic scores for text-only candidates.

    Scores already present (from ANN search) are left bitwise-unchanged.
    Missing store entries fall back to encoding the title on demand; with no
    title either, the entry is dropped. Returns the dropped doc_ids.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    dropped = []
    for doc_id, entry in list(pool.entries.items()):
        if entry.semantic_score is not None:
            continue
        if store is not None and doc_id in store:
            entry.semantic_score = float(store.get_dequantized(doc_id) @ q)
        elif model is not None and titles is not None and doc_id in titles:
            seq = model.vocab.encode(titles[doc_id], model.config.max_len)
            entry.semantic_score = float(model.embed_document(seq).data @ q)
        else:
            dropped.append(doc_id)
            del pool.entries[doc_id]
    if dropped:
        logger.warning("backfill dropped %d candidates with no embedding", len(dropped))
    return dropped


def build_features(pool: CandidatePool,
                   stats: dict[int, dict[str, float]] | None = None,
                   stat_names: list[str] | None = None) -> dict[int, FeatureVector]:
    """Assemble per-candidate feature vectors from the pool and statistics.

    BM25 imputes to 0 for docs the text channel did not return; missing
    statistical features impute to the mean over candidates that have them.
    """
    stats = stats or {}
    if stat_names is None:
        stat_names = sorted({n for s in stats.values() for n in s})
    means = {}
    for name in stat_names:
        have = [s[name] for s in stats.values() if name in s]
        means[name] = float(np.mean(have)) if have else 0.0
    features = {}
    for doc_id, entry in pool.entries.items():
        if entry.semantic_score is None:
            raise ContractError(f"candidate {doc_id} missing semantic score; "
                                "run backfill_semantic first")
        values = {SEMANTIC_FEATURE: entry.semantic_score,
                  BM25_FEATURE: entry.bm25_score if entry.bm25_score is not None else 0.0}
        doc_stats = stats.get(doc_id, {})
        for name in stat_names:
            values[name] = float(doc_stats.get(name, means[name]))
        features[doc_id] = FeatureVector(values)
    return features


def filter_rank(pool: CandidatePool, features: dict[int, FeatureVector],
                ranker: LinearRanker, n_out: int = DEFAULT_N_OUT) -> list[tuple[int, float]]:
    """Rank the pool with the linear model; top-n_out, ties by lower doc_id."""
    if n_out < 1:
        raise ContractError("n_out must be >= 1")
    scored = []
    for doc_id in pool.entries:
        if doc_id not in features:
            raise ContractError(f"no feature vector for candidate {doc_id}")
        scored.append((doc_id, ranker.score(features[doc_id])))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:n_out]


def train_ranker(pairs: list[tuple[FeatureVector, FeatureVector]],
                 feature_names: list[str] | None = None,
                 lam: float = 1e-3, lr: float = 0.1,
                 max_iters: int = 5000, tol: float = 1e-6) -> LinearRanker:
    """Pairwise hinge regression: minimize
    mean_i max(0, 1 - w·(x_better_i - x_worse_i)) + lam * ||w||^2."""
    if not pairs:
        raise ContractError("need at least one preference pair")
    if feature_names is None:
        feature_names = sorted(pairs[0][0].values)
    diffs = np.stack([b.as_array(feature_names) - w.as_array(feature_names)
                      for b, w in pairs])
    degenerate = int(np.sum(np.all(diffs == 0.0, axis=1)))
    if degenerate:
        logger.warning("%d identical preference pairs contribute constant loss",
                       degenerate)
    w = np.zeros(len(feature_names))
    for _ in range(max_iters):
        margin = diffs @ w
        active = margin < 1.0
        grad = -(diffs[active].sum(axis=0) / len(diffs)) + 2.0 * lam * w
        if float(np.linalg.norm(grad)) < tol:
            break
        w = w - lr * grad
    return LinearRanker(feature_names, w, bias=0.0)


def pairwise_accuracy(ranker: LinearRanker,
                      pairs: list[tuple[FeatureVector, FeatureVector]]) -> float:
    if not pairs:
        raise ContractError("no pairs to evaluate")
    correct = sum(1 for b, w in pairs if ranker.score(b) > ranker.score(w))
    return correct / len(pairs)
