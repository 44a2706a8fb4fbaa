"""Evaluation metrics: PNR, Recall@k, DCG, interleaved comparison, GSB.

All functions are pure over immutable inputs. The interleaving simulator
stands in for live traffic: it merges two ranked lists per query with
balanced interleaving and drives a position-biased click model over the
merged list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .errors import ContractError

PNR_CAP_DEFAULT = 100.0


# ---------------------------------------------------------------------------
# offline metrics
# ---------------------------------------------------------------------------

@dataclass
class QueryScores:
    """Per-query labeled documents with model scores."""
    query_id: str
    docs: list[tuple[int, float, float]]   # (doc_id, label y, model score f)


@dataclass
class PnrReport:
    per_query: dict[str, float]
    average: float
    capped: list[str]     # zero-discordant queries reported at the cap
    skipped: list[str]    # queries with no strictly-ordered label pair


def pnr(queries: list[QueryScores], cap: float = PNR_CAP_DEFAULT) -> PnrReport:
    """Concordant/discordant ordered-pair ratio per query, then averaged.

    A pair counts as concordant when the higher-labeled document also has
    the strictly higher score, discordant when it has the strictly lower
    score; score ties count to neither side. Queries with no discordant
    pair are capped; queries with no strictly-ordered label pair at all are
    skipped.
    """
    per_query: dict[str, float] = {}
    capped: list[str] = []
    skipped: list[str] = []
    for q in queries:
        concordant = discordant = ordered = 0
        for i, (_, yi, fi) in enumerate(q.docs):
            for _, yj, fj in q.docs:
                if yi > yj:
                    ordered += 1
                    if fi > fj:
                        concordant += 1
                    elif fi < fj:
                        discordant += 1
        if ordered == 0:
            skipped.append(q.query_id)
            continue
        if discordant == 0:
            per_query[q.query_id] = cap
            capped.append(q.query_id)
        else:
            per_query[q.query_id] = concordant / discordant
    if not per_query:
        raise ContractError("no query had a strictly-ordered label pair")
    return PnrReport(per_query=per_query,
                     average=float(np.mean(list(per_query.values()))),
                     capped=capped, skipped=skipped)


def recall_at_k(retrieved, ground_truth, k: int = 10) -> float:
    """|retrieved ∩ ground_truth| / k (denominator is k by definition)."""
    retrieved = list(retrieved)
    if len(retrieved) > k:
        raise ContractError(f"got {len(retrieved)} retrieved ids for k={k}")
    return len(set(retrieved) & set(ground_truth)) / k


def dcg_at_k(grades, k: int = 4, exponential: bool = False) -> float:
    """Sum of discounted gains over the top k; gain is the raw grade by
    default, 2^g - 1 with ``exponential``."""
    top = list(grades)[:k]
    total = 0.0
    for i, g in enumerate(top, start=1):
        gain = (2.0 ** g - 1.0) if exponential else float(g)
        total += gain / math.log2(i + 1)
    return total


# ---------------------------------------------------------------------------
# interleaved comparison
# ---------------------------------------------------------------------------

@dataclass
class InterleaveEvent:
    query_id: str
    winner: str            # "A", "B" or "tie"
    dwell_time: float = 0.0

    def __post_init__(self):
        if self.winner not in ("A", "B", "tie"):
            raise ContractError(f"winner must be A/B/tie, got {self.winner!r}")
        if self.dwell_time < 0:
            raise ContractError("dwell_time must be nonnegative")


def _delta_from_counters(wins_a: float, wins_b: float, ties: float) -> float:
    total = wins_a + wins_b + ties
    if total <= 0:
        raise ContractError("empty interleave log")
    return (wins_a + 0.5 * ties) / total - 0.5


def delta_ab(log: list[InterleaveEvent]) -> float:
    """Interleaved-comparison gain of A over B from win/tie counts."""
    wins_a = sum(1 for e in log if e.winner == "A")
    wins_b = sum(1 for e in log if e.winner == "B")
    ties = sum(1 for e in log if e.winner == "tie")
    return _delta_from_counters(wins_a, wins_b, ties)


def dwell_weight(t: float, center: float = 30.0, scale: float = 10.0) -> float:
    """Sigmoid map of dwell seconds to [0, 1]."""
    return 1.0 / (1.0 + math.exp(-(t - center) / scale))


def delta_ab_tw(log: list[InterleaveEvent], center: float = 30.0,
                scale: float = 10.0) -> float:
    """Time-weighted variant: each event's counter increment is the
    sigmoid-mapped dwell time."""
    wins_a = sum(dwell_weight(e.dwell_time, center, scale) for e in log if e.winner == "A")
    wins_b = sum(dwell_weight(e.dwell_time, center, scale) for e in log if e.winner == "B")
    ties = sum(dwell_weight(e.dwell_time, center, scale) for e in log if e.winner == "tie")
    return _delta_from_counters(wins_a, wins_b, ties)


def delta_gsb(good: int, same: int, bad: int) -> float:
    """(good - bad) / (good + same + bad) from side-by-side judgments."""
    total = good + same + bad
    if total <= 0:
        raise ContractError("good + same + bad must be positive")
    return (good - bad) / total


def sign_test_pvalue(log: list[InterleaveEvent]) -> float:
    """Two-sided paired sign test over A/B wins (ties discarded)."""
    wins_a = sum(1 for e in log if e.winner == "A")
    wins_b = sum(1 for e in log if e.winner == "B")
    n = wins_a + wins_b
    if n == 0:
        return 1.0
    return float(binomtest(wins_a, n, 0.5).pvalue)


# ---------------------------------------------------------------------------
# interleaving simulation
# ---------------------------------------------------------------------------

@dataclass
class ClickModel:
    """Position-biased examination x graded attraction, dwell log-normal in grade."""
    grades: dict                       # (query_id, doc_id) -> grade 0..4
    examination_decay: float = 0.75    # P(examine position i) = decay**i
    attraction_scale: float = 0.65     # P(click | examined) = scale * grade / 4
    dwell_sigma: float = 0.4

    def grade(self, query_id, doc_id) -> int:
        return self.grades.get((query_id, doc_id), 0)

    def sample_dwell(self, grade: int, rng: np.random.Generator) -> float:
        # medians roughly 8s (grade 0) to 55s (grade 4)
        return float(rng.lognormal(math.log(8.0 + 12.0 * grade), self.dwell_sigma))


def balanced_interleave(list_a, list_b, a_first: bool, depth: int) -> list:
    """Balanced merge of two ranked lists (no duplicates), up to ``depth``."""
    merged: list = []
    seen = set()
    ka = kb = 0
    while len(merged) < depth and (ka < len(list_a) or kb < len(list_b)):
        take_a = (ka < kb) or (ka == kb and a_first)
        if take_a and ka < len(list_a):
            doc = list_a[ka]
            ka += 1
        elif kb < len(list_b):
            doc = list_b[kb]
            kb += 1
        else:
            doc = list_a[ka]
            ka += 1
        if doc not in seen:
            seen.add(doc)
            merged.append(doc)
    return merged


def simulate_interleave(results_a: dict, results_b: dict, click_model: ClickModel,
                        seed: int, impressions_per_query: int = 1,
                        depth: int = 10) -> list[InterleaveEvent]:
    """Simulate user impressions over balanced-interleaved result lists.

    ``results_a``/``results_b`` map query_id to ranked doc-id lists. Each
    impression credits the system that ranks the highest-clicked document
    better; no click or equal ranks is a tie. Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    events: list[InterleaveEvent] = []
    for query_id in sorted(results_a):
        list_a = results_a[query_id]
        list_b = results_b.get(query_id, [])
        if not list_a or not list_b:
            continue
        for _ in range(impressions_per_query):
            merged = balanced_interleave(list_a, list_b, bool(rng.integers(2)), depth)
            clicked = None
            for pos, doc in enumerate(merged):
                if rng.random() >= click_model.examination_decay ** pos:
                    continue
                grade = click_model.grade(query_id, doc)
                if rng.random() < click_model.attraction_scale * grade / 4.0:
                    clicked = doc
                    break   # credit the highest-ranked clicked result
            if clicked is None:
                events.append(InterleaveEvent(query_id, "tie", 0.0))
                continue
            rank_a = list_a.index(clicked) if clicked in list_a else math.inf
            rank_b = list_b.index(clicked) if clicked in list_b else math.inf
            dwell = click_model.sample_dwell(click_model.grade(query_id, clicked), rng)
            if rank_a < rank_b:
                events.append(InterleaveEvent(query_id, "A", dwell))
            elif rank_b < rank_a:
                events.append(InterleaveEvent(query_id, "B", dwell))
            else:
                events.append(InterleaveEvent(query_id, "tie", dwell))
    return events
