"""Deterministic synthetic benchmark generator.

Stands in for production search data: a topic-clustered corpus of document
titles and queries that share topical tokens, click logs whose click and
dwell behavior correlates with topical relevance, graded labels (0-4)
derived from token overlap, disjoint train/validation/test query splits, and
a low-frequency "tail" query subset. Everything is a pure function of the
spec's seed, so regenerated files are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .textproc import Vocab, tokenize
from .training import (ClickLogRecord, GradedLabelRecord, StageData,
                       ValidationSet, mine_from_click_log,
                       mine_from_graded_labels)


@dataclass
class SyntheticCorpusSpec:
    n_topics: int = 8
    docs_per_topic: int = 12
    queries_per_topic: int = 8
    vocab_size: int = 96            # generator word inventory, split across topics
    query_length: tuple = (2, 4)
    title_length: tuple = (4, 7)
    tail_fraction: float = 0.2
    noise_rate: float = 0.1
    impressions_per_query: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < self.n_topics:
            raise ContractError(
                f"vocab_size={self.vocab_size} must be >= n_topics={self.n_topics}")
        if not (0.0 <= self.noise_rate < 1.0 and 0.0 <= self.tail_fraction <= 1.0):
            raise ContractError("rates must lie in [0, 1)")
        if self.n_topics < 2:
            raise ContractError("need at least 2 topics for cross-topic negatives")


@dataclass
class SyntheticCorpus:
    docs: dict[int, str]                      # doc_id -> title
    doc_topic: dict[int, int]
    queries: dict[str, str]                   # query_id -> text
    query_topic: dict[str, int]
    query_frequency: dict[str, int]           # simulated weekly search counts
    click_log: list[ClickLogRecord]
    graded_labels: list[GradedLabelRecord]
    splits: dict[str, list[str]]              # train / validation / test
    tail_queries: list[str] = field(default_factory=list)

    def relevant(self, query_id: str) -> set:
        topic = self.query_topic[query_id]
        return {d for d, t in self.doc_topic.items() if t == topic}


def _word(i: int) -> str:
    return f"w{i:04d}"


def token_overlap(query_text: str, title: str) -> float:
    q = set(tokenize(query_text))
    return len(q & set(tokenize(title))) / len(q) if q else 0.0


def _grade_from_overlap(overlap: float) -> int:
    return int(min(4, np.floor(overlap * 5.0)))


def generate(spec: SyntheticCorpusSpec) -> SyntheticCorpus:
    rng = np.random.default_rng(spec.seed)
    per_topic = spec.vocab_size // spec.n_topics
    topic_words = [[_word(t * per_topic + j) for j in range(per_topic)]
                   for t in range(spec.n_topics)]
    all_words = [_word(i) for i in range(spec.vocab_size)]

    def draw_text(topic: int, lo: int, hi: int) -> str:
        length = int(rng.integers(lo, hi + 1))
        # every text opens with its topic's marker word, so a query always
        # shares at least one token with every same-topic title
        words = [topic_words[topic][0]]
        for _pos in range(length - 1):
            if rng.random() < spec.noise_rate:
                words.append(all_words[rng.integers(len(all_words))])
            else:
                words.append(topic_words[topic][rng.integers(per_topic)])
        return " ".join(words)

    docs, doc_topic = {}, {}
    for topic in range(spec.n_topics):
        for j in range(spec.docs_per_topic):
            doc_id = topic * spec.docs_per_topic + j
            docs[doc_id] = draw_text(topic, *spec.title_length)
            doc_topic[doc_id] = topic

    queries, query_topic = {}, {}
    for topic in range(spec.n_topics):
        for j in range(spec.queries_per_topic):
            qid = f"q{topic * spec.queries_per_topic + j:04d}"
            queries[qid] = draw_text(topic, *spec.query_length)
            query_topic[qid] = topic

    qids = sorted(queries)
    order = list(rng.permutation(qids))
    n_tail = int(round(spec.tail_fraction * len(qids)))
    tail_queries = sorted(order[:n_tail])
    query_frequency = {}
    for qid in qids:
        if qid in tail_queries:
            query_frequency[qid] = int(rng.integers(1, 11))
        else:
            query_frequency[qid] = int(rng.integers(11, 500))

    n_train = int(round(0.6 * len(qids)))
    n_val = int(round(0.2 * len(qids)))
    splits = {"train": sorted(order[:n_train]),
              "validation": sorted(order[n_train:n_train + n_val]),
              "test": sorted(order[n_train + n_val:])}

    doc_ids = sorted(docs)
    click_log: list[ClickLogRecord] = []
    graded_labels: list[GradedLabelRecord] = []
    for qid in qids:
        topic = query_topic[qid]
        same = [d for d in doc_ids if doc_topic[d] == topic]
        other = [d for d in doc_ids if doc_topic[d] != topic]
        n_rel = max(1, spec.impressions_per_query // 2)
        shown = (list(rng.choice(same, size=min(n_rel, len(same)), replace=False))
                 + list(rng.choice(other, size=spec.impressions_per_query - n_rel,
                                   replace=False)))
        for doc_id in shown:
            doc_id = int(doc_id)
            relevant = doc_topic[doc_id] == topic
            p_click = 0.85 if relevant else 0.08
            clicked = bool(rng.random() < p_click)
            if clicked:
                median = 40.0 if relevant else 6.0
                dwell = float(np.exp(np.log(median) + 0.5 * rng.standard_normal()))
            else:
                dwell = 0.0
            click_log.append(ClickLogRecord(
                query_id=qid, query_text=queries[qid], doc_id=doc_id,
                doc_title=docs[doc_id], clicked=clicked, dwell_time=round(dwell, 3)))
            graded_labels.append(GradedLabelRecord(
                query_id=qid, query_text=queries[qid], doc_id=doc_id,
                doc_title=docs[doc_id],
                grade=_grade_from_overlap(token_overlap(queries[qid], docs[doc_id]))))

    return SyntheticCorpus(docs=docs, doc_topic=doc_topic, queries=queries,
                           query_topic=query_topic, query_frequency=query_frequency,
                           click_log=click_log, graded_labels=graded_labels,
                           splits=splits, tail_queries=tail_queries)


def doc_statistics(click_log: list[ClickLogRecord]) -> dict[int, dict[str, float]]:
    """Per-doc click-through rate and mean dwell over clicked impressions."""
    shown: dict[int, int] = {}
    clicks: dict[int, int] = {}
    dwell: dict[int, list[float]] = {}
    for r in click_log:
        shown[r.doc_id] = shown.get(r.doc_id, 0) + 1
        if r.clicked:
            clicks[r.doc_id] = clicks.get(r.doc_id, 0) + 1
            dwell.setdefault(r.doc_id, []).append(r.dwell_time)
    stats = {}
    for doc_id, n in shown.items():
        c = clicks.get(doc_id, 0)
        stats[doc_id] = {
            "ctr": c / n,
            "mean_dwell": float(np.mean(dwell[doc_id])) if doc_id in dwell else 0.0,
        }
    return stats


# ---------------------------------------------------------------------------
# File round-trip
# ---------------------------------------------------------------------------

def write_corpus(corpus: SyntheticCorpus, out_dir) -> dict[str, str]:
    """Write the corpus as JSONL/JSON files; returns name -> path."""
    import os
    paths = {}

    def jsonl(name, rows):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        paths[name] = path

    jsonl("docs.jsonl", [{"doc_id": d, "title": corpus.docs[d],
                          "topic": corpus.doc_topic[d]} for d in sorted(corpus.docs)])
    jsonl("queries.jsonl", [{"query_id": q, "text": corpus.queries[q],
                             "topic": corpus.query_topic[q],
                             "frequency": corpus.query_frequency[q]}
                            for q in sorted(corpus.queries)])
    jsonl("click_log.jsonl", [vars(r) for r in corpus.click_log])
    jsonl("graded_labels.jsonl", [vars(r) for r in corpus.graded_labels])
    path = os.path.join(out_dir, "splits.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"splits": corpus.splits, "tail_queries": corpus.tail_queries},
                  fh, sort_keys=True, indent=2)
    paths["splits.json"] = path
    return paths


def load_corpus(data_dir) -> SyntheticCorpus:
    import os

    def rows(name):
        with open(os.path.join(data_dir, name), encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    docs, doc_topic = {}, {}
    for r in rows("docs.jsonl"):
        docs[r["doc_id"]] = r["title"]
        doc_topic[r["doc_id"]] = r["topic"]
    queries, query_topic, query_frequency = {}, {}, {}
    for r in rows("queries.jsonl"):
        queries[r["query_id"]] = r["text"]
        query_topic[r["query_id"]] = r["topic"]
        query_frequency[r["query_id"]] = r["frequency"]
    click_log = [ClickLogRecord(**r) for r in rows("click_log.jsonl")]
    graded = [GradedLabelRecord(**r) for r in rows("graded_labels.jsonl")]
    with open(os.path.join(data_dir, "splits.json"), encoding="utf-8") as fh:
        extra = json.load(fh)
    return SyntheticCorpus(docs=docs, doc_topic=doc_topic, queries=queries,
                           query_topic=query_topic, query_frequency=query_frequency,
                           click_log=click_log, graded_labels=graded,
                           splits=extra["splits"], tail_queries=extra["tail_queries"])


# ---------------------------------------------------------------------------
# Bridging into the training paradigm
# ---------------------------------------------------------------------------

def build_vocab(corpus: SyntheticCorpus, max_size: int | None = None) -> Vocab:
    texts = [corpus.docs[d] for d in sorted(corpus.docs)]
    texts += [corpus.queries[q] for q in sorted(corpus.queries)]
    return Vocab.build(texts, max_size)


def stage_datasets(corpus: SyntheticCorpus, vocab: Vocab, max_len: int,
                   seed: int = 0) -> dict[str, StageData]:
    """Assemble the four stage datasets plus the shared validation set."""
    rng = np.random.default_rng(seed)
    train_q = set(corpus.splits["train"])
    val_q = set(corpus.splits["validation"])

    train_clicks = [r for r in corpus.click_log if r.query_id in train_q]
    click_pairs = [(r.query_text, r.doc_title) for r in train_clicks if r.clicked]
    click_examples, _ = mine_from_click_log(train_clicks, vocab, max_len, rng=rng)
    graded_train = [r for r in corpus.graded_labels if r.query_id in train_q]
    graded_examples, _ = mine_from_graded_labels(graded_train, vocab, max_len)

    validation = ValidationSet(
        doc_seqs={d: vocab.encode(t, max_len) for d, t in corpus.docs.items()},
        query_seqs={q: vocab.encode(corpus.queries[q], max_len) for q in sorted(val_q)},
        relevant={q: corpus.relevant(q) for q in sorted(val_q)},
        graded=[r for r in corpus.graded_labels if r.query_id in val_q])

    titles = [corpus.docs[d] for d in sorted(corpus.docs)]
    return {
        "pretrain": StageData(doc_titles=titles, validation=validation),
        "post_pretrain": StageData(click_pairs=click_pairs, validation=validation),
        "intermediate_ft": StageData(examples=click_examples, validation=validation),
        "target_ft": StageData(examples=graded_examples, validation=validation),
    }
