"""Training: data mining, contrastive objective, MLM/NSP, staged pipeline.

The paradigm runs up to four ordered stages: token-level pretraining on the
document corpus, post-pretraining on query+title click pairs (both with
MLM and next-pair prediction), then contrastive fine-tuning on click-log
triplets and finally on graded-label triplets. Each batch of B triplets
scores every query against all 2B batch documents, so each query sees its
positive, its strong negative and 2(B-1) random negatives borrowed from
the other triplets.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import Tensor
from .encoder import EncoderModel
from .errors import ContractError, InputError
from .textproc import MASK_ID, N_SPECIAL, Vocab

log = logging.getLogger(__name__)

STAGE_ORDER = {"pretrain": 1, "post_pretrain": 2, "intermediate_ft": 3, "target_ft": 4}

# the paper-scale optimizer settings, kept for reference/config defaults at
# production size; desk-scale runs override them (see StageConfig defaults)
PRODUCTION_DEFAULTS = {
    "learning_rate": 2e-5,
    "batch_size": 160,
    "warmup_steps": 4000,
    "decay": 0.01,
}


# ---------------------------------------------------------------------------
# records and mining
# ---------------------------------------------------------------------------

@dataclass
class ClickLogRecord:
    query_id: str
    query_text: str
    doc_id: int
    doc_title: str
    clicked: bool
    dwell_time: float = 0.0

    def __post_init__(self):
        if self.dwell_time < 0:
            raise InputError("dwell_time must be nonnegative")


@dataclass
class GradedLabelRecord:
    query_id: str
    query_text: str
    doc_id: int
    doc_title: str
    grade: int

    def __post_init__(self):
        if self.grade not in (0, 1, 2, 3, 4):
            raise InputError(f"grade must be in 0..4, got {self.grade}")


@dataclass
class TrainExample:
    query: list[int]
    positive: list[int]
    strong_negative: list[int]
    query_id: str = ""
    positive_id: int = -1
    negative_id: int = -1

    def __post_init__(self):
        if self.positive_id >= 0 and self.positive_id == self.negative_id:
            raise ContractError("positive and strong negative must differ")


def read_click_log(path) -> list[ClickLogRecord]:
    """Line-delimited JSON, one record per line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(ClickLogRecord(**json.loads(line)))
    return records


def read_graded_labels(path) -> list[GradedLabelRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(GradedLabelRecord(**json.loads(line)))
    return records


def _group_by_query(records):
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.query_id, []).append(r)
    return groups


def mine_from_click_log(records: list[ClickLogRecord], vocab: Vocab, max_len: int,
                        rng: np.random.Generator | None = None,
                        policy: str = "one") -> tuple[list[TrainExample], int]:
    """Triplets from click logs: clicked = positive, exposed-unclicked = strong negative.

    ``policy`` "one" pairs each positive with one sampled negative (needs
    ``rng``); "all" enumerates every positive x negative pair. Returns the
    examples and the count of queries that yielded none.
    """
    if policy == "one" and rng is None:
        raise ContractError("sampling policy 'one' requires an rng")
    examples: list[TrainExample] = []
    skipped = 0
    for qid, recs in _group_by_query(records).items():
        positives = [r for r in recs if r.clicked]
        negatives = [r for r in recs if not r.clicked]
        if not positives or not negatives:
            skipped += 1
            continue
        qseq = vocab.encode(recs[0].query_text, max_len)
        for pos in positives:
            chosen = negatives if policy == "all" else \
                [negatives[int(rng.integers(len(negatives)))]]
            for neg in chosen:
                examples.append(TrainExample(
                    query=qseq,
                    positive=vocab.encode(pos.doc_title, max_len),
                    strong_negative=vocab.encode(neg.doc_title, max_len),
                    query_id=qid, positive_id=pos.doc_id, negative_id=neg.doc_id))
    return examples, skipped


def mine_from_graded_labels(records: list[GradedLabelRecord], vocab: Vocab,
                            max_len: int) -> tuple[list[TrainExample], int]:
    """One triplet per strictly-ordered same-query grade pair."""
    examples: list[TrainExample] = []
    skipped = 0
    for qid, recs in _group_by_query(records).items():
        qseq = vocab.encode(recs[0].query_text, max_len)
        emitted = False
        for hi in recs:
            for lo in recs:
                if hi.grade > lo.grade:
                    emitted = True
                    examples.append(TrainExample(
                        query=qseq,
                        positive=vocab.encode(hi.doc_title, max_len),
                        strong_negative=vocab.encode(lo.doc_title, max_len),
                        query_id=qid, positive_id=hi.doc_id, negative_id=lo.doc_id))
        if not emitted:
            skipped += 1
    return examples, skipped


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def build_in_batch_scores(model: EncoderModel, examples: list[TrainExample],
                          mode: str = "train", train_mode: bool = False,
                          rng: np.random.Generator | None = None) -> Tensor:
    """B x 2B score matrix: every query against all batch documents.

    Document column layout: positives 0..B-1 then strong negatives B..2B-1,
    so query i's positive is column i and its strong negative column B+i;
    the other 2(B-1) columns act as random negatives. Computed as one
    matrix product over compressed embeddings, max- or mean-pooled over the
    context codes by ``mode``.
    """
    b = len(examples)
    if b < 2:
        raise ContractError("in-batch negatives need a batch of at least 2")
    q_parts = []
    for ex in examples:
        p, _ = model.attend_codes(model.encode(ex.query, train_mode, rng))
        q_parts.append(model.compress(p))
    qp = ad.concat_rows(q_parts)                              # (B*m, dc)
    doc_seqs = [ex.positive for ex in examples] + [ex.strong_negative for ex in examples]
    dmat = ad.stack_rows([model.compress(model.encode(s, train_mode, rng).cls)
                          for s in doc_seqs])                 # (2B, dc)
    s3 = ad.reshape(ad.matmul(qp, ad.transpose(dmat)), (b, model.config.m, 2 * b))
    return ad.tmax(s3, axis=1) if mode == "train" else ad.tmean(s3, axis=1)


def contrastive_loss(scores: Tensor, temperature: float = 1.0,
                     positive_cols: list[int] | None = None) -> Tensor:
    """Mean over queries of -log softmax probability of the positive column."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    b, _ = scores.shape
    cols = positive_cols if positive_cols is not None else list(range(b))
    onehot = np.zeros(scores.shape)
    onehot[np.arange(b), cols] = 1.0
    ls = ad.log_softmax(ad.scale(scores, 1.0 / temperature))
    return ad.scale(ad.tsum(ad.mul(ls, Tensor(onehot))), -1.0 / b)


def mlm_loss(model: EncoderModel, seq: list[int], mask_ratio: float,
             rng: np.random.Generator, train_mode: bool = False,
             dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Cross-entropy over true ids at masked positions only.

    Positions are whole content tokens; the rounded share ``mask_ratio`` of
    them is replaced by the mask id. Zero masked positions yield loss 0 by
    convention (reported, not trained).
    """
    maskable = [i for i, t in enumerate(seq) if i > 0 and t >= N_SPECIAL]
    if not maskable:
        raise ContractError("sequence has no maskable content tokens")
    n_mask = int(round(mask_ratio * len(maskable)))
    if n_mask == 0:
        return Tensor(0.0)
    chosen = sorted(rng.choice(len(maskable), size=n_mask, replace=False).tolist())
    positions = [maskable[i] for i in chosen]
    masked_seq = list(seq)
    for i in positions:
        masked_seq[i] = MASK_ID
    out = model.encode(masked_seq, train_mode, dropout_rng)
    logits = ad.add(ad.matmul(ad.gather_rows(out.full, positions), model.params["mlm_w"]),
                    model.params["mlm_b"])
    onehot = np.zeros((n_mask, model.config.vocab_size))
    onehot[np.arange(n_mask), [seq[i] for i in positions]] = 1.0
    return ad.scale(ad.tsum(ad.mul(ad.log_softmax(logits), Tensor(onehot))), -1.0 / n_mask)


def nsp_loss(model: EncoderModel, seq_a: list[int], seq_b: list[int], is_next: bool,
             train_mode: bool = False,
             dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Binary cross-entropy of the next-pair classifier over [CLS].

    ``seq_a`` keeps its [CLS]; ``seq_b``'s leading [CLS] is stripped and its
    tail truncated if the concatenation would exceed max_len.
    """
    body = [t for t in seq_b[1:]]
    room = model.config.max_len - len(seq_a)
    if len(body) > room:
        log.warning("next-pair concatenation truncated from %d to %d tokens",
                    len(seq_a) + len(body), model.config.max_len)
        body = body[:room]
    seq = seq_a + body
    segments = [0] * len(seq_a) + [1] * len(body)
    out = model.encode(seq, train_mode, dropout_rng, segments=segments)
    logit = ad.add(ad.dot(out.cls, model.params["nsp_w"]), model.params["nsp_b"])
    # -[y log p + (1-y) log(1-p)] = softplus(logit) - y * logit
    return ad.sub(ad.softplus(logit), ad.scale(logit, 1.0 if is_next else 0.0))


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * p.grad
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * p.grad ** 2
            p.data -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def learning_rate_at(step: int, peak: float, warmup_steps: int, total_steps: int,
                     floor_fraction: float = 0.01) -> float:
    """Linear warmup from 0, then linear decay to floor_fraction * peak."""
    if warmup_steps > 0 and step <= warmup_steps:
        return peak * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak * (1.0 - (1.0 - floor_fraction) * min(frac, 1.0))


# ---------------------------------------------------------------------------
# staged training
# ---------------------------------------------------------------------------

@dataclass
class StageConfig:
    stage: str
    learning_rate: float = 1e-3
    batch_size: int = 8
    warmup_steps: int = 20
    epochs: int = 1
    temperature: float = 1.0
    mask_ratio: float = 0.15
    decay_floor: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_ORDER:
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")


@dataclass
class ValidationSet:
    doc_seqs: dict[int, list[int]]          # corpus: doc_id -> token sequence
    query_seqs: dict[str, list[int]]        # query_id -> token sequence
    relevant: dict[str, set[int]]           # query_id -> ground-truth doc ids
    graded: list[GradedLabelRecord] = field(default_factory=list)


@dataclass
class StageData:
    doc_titles: list[str] = field(default_factory=list)        # pretrain
    click_pairs: list[tuple[str, str]] = field(default_factory=list)  # post_pretrain
    examples: list[TrainExample] = field(default_factory=list)  # fine-tuning stages
    validation: ValidationSet | None = None


def evaluate_model(model: EncoderModel, val: ValidationSet,
                   scoring: str = "predict") -> dict:
    """Recall@10 over the validation corpus and PNR over graded records."""
    doc_ids = sorted(val.doc_seqs)
    dmat = np.stack([model.embed_document(val.doc_seqs[d]).data for d in doc_ids])
    recalls = []
    for qid in sorted(val.query_seqs):
        qemb = _query_embedding(model, val.query_seqs[qid], scoring)
        if scoring == "train":
            scores = (qemb @ dmat.T).max(axis=0)
        else:
            scores = dmat @ qemb
        order = np.lexsort((doc_ids, -scores))[:10]
        top = [doc_ids[i] for i in order]
        recalls.append(metrics.recall_at_k(top, val.relevant.get(qid, set()), k=10))
    result = {"recall_at_10": float(np.mean(recalls)) if recalls else float("nan")}
    if val.graded:
        result["pnr"] = pnr_over_records(model, val.graded, scoring).average
    return result


def _query_embedding(model: EncoderModel, seq: list[int], scoring: str):
    if scoring == "train":
        p, _ = model.attend_codes(model.encode(seq))
        return model.compress(p).data          # (m, dc): caller max-pools
    return model.embed_query(seq).data


def pnr_over_records(model: EncoderModel, records: list[GradedLabelRecord],
                     scoring: str = "predict") -> metrics.PnrReport:
    """Score every graded pair with the model and compute PNR."""
    if model.vocab is None:
        raise ContractError("model has no vocabulary attached")
    max_len = model.config.max_len
    queries = []
    for qid, recs in _group_by_query(records).items():
        qemb = _query_embedding(model, model.vocab.encode(recs[0].query_text, max_len),
                                scoring)
        docs = []
        for r in recs:
            demb = model.embed_document(model.vocab.encode(r.doc_title, max_len)).data
            score = float((qemb @ demb).max()) if scoring == "train" else float(qemb @ demb)
            docs.append((r.doc_id, float(r.grade), score))
        queries.append(metrics.QueryScores(qid, docs))
    return metrics.pnr(queries)


def _token_stage_loss(model, cfg, items, rng, drop_rng, all_titles_seqs):
    """Mean MLM + next-pair loss over one batch of stage-1/2 items."""
    parts = []
    for item in items:
        if cfg.stage == "pretrain":
            seq = item
            content = seq[1:]
            if len(content) >= 2:
                half = len(content) // 2
                a = [seq[0]] + content[:half]
                if rng.random() < 0.5:
                    b_part, label = [seq[0]] + content[half:], True
                else:
                    other = all_titles_seqs[int(rng.integers(len(all_titles_seqs)))]
                    b_part, label = other, False
                parts.append(nsp_loss(model, a, b_part, label, True, drop_rng))
            parts.append(mlm_loss(model, seq, cfg.mask_ratio, rng, True, drop_rng))
        else:  # post_pretrain: (query seq, clicked title seq)
            qseq, tseq = item
            joint = qseq + tseq[1:]
            joint = joint[: model.config.max_len]
            parts.append(mlm_loss(model, joint, cfg.mask_ratio, rng, True, drop_rng))
            if rng.random() < 0.5:
                parts.append(nsp_loss(model, qseq, tseq, True, True, drop_rng))
            else:
                other = all_titles_seqs[int(rng.integers(len(all_titles_seqs)))]
                parts.append(nsp_loss(model, qseq, other, False, True, drop_rng))
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return ad.scale(total, 1.0 / len(parts))


def run_stage(model: EncoderModel, cfg: StageConfig, data: StageData) -> dict:
    """Train one stage in place; returns the stage report."""
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)
    if model.vocab is None:
        raise ContractError("model needs a vocabulary before training")
    max_len = model.config.max_len

    if cfg.stage == "pretrain":
        items = [model.vocab.encode(t, max_len) for t in data.doc_titles]
        title_pool = items
    elif cfg.stage == "post_pretrain":
        items = [(model.vocab.encode(q, max_len), model.vocab.encode(t, max_len))
                 for q, t in data.click_pairs]
        title_pool = [t for _, t in items]
    else:
        items = data.examples
        title_pool = None
    if not items:
        raise ContractError(f"stage {cfg.stage} received no training data")

    adam = Adam(model.params)
    n_batches = max(1, len(items) // cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    report = {"stage": cfg.stage, "config": cfg.__dict__.copy(), "epochs": []}
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        losses = []
        for bi in range(n_batches):
            batch = [items[i] for i in order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]]
            if cfg.stage in ("intermediate_ft", "target_ft") and len(batch) < 2:
                continue
            step += 1
            lr = learning_rate_at(step, cfg.learning_rate, cfg.warmup_steps,
                                  total_steps, cfg.decay_floor)
            model.zero_grads()
            with ad.Tape() as tape:
                if cfg.stage in ("pretrain", "post_pretrain"):
                    loss = _token_stage_loss(model, cfg, batch, rng, drop_rng, title_pool)
                else:
                    scores = build_in_batch_scores(model, batch, "train", True, drop_rng)
                    loss = contrastive_loss(scores, cfg.temperature)
            tape.backward(loss)
            adam.step(lr)
            losses.append(float(loss.data))
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        if data.validation is not None:
            entry.update(evaluate_model(model, data.validation))
        report["epochs"].append(entry)
    report["final"] = dict(report["epochs"][-1])
    return report


def train_pipeline(model: EncoderModel, cfgs: list[StageConfig],
                   datasets: dict[str, StageData]) -> list[dict]:
    """Chain stages in paradigm order (gaps allowed for ablation)."""
    if not cfgs:
        raise ContractError("empty stage list")
    ranks = [STAGE_ORDER[c.stage] for c in cfgs]
    if ranks != sorted(ranks) or len(set(ranks)) != len(ranks):
        raise ContractError(f"stages out of paradigm order: {[c.stage for c in cfgs]}")
    reports = []
    for cfg in cfgs:
        if cfg.stage not in datasets:
            raise ContractError(f"no dataset provided for stage {cfg.stage}")
        reports.append(run_stage(model, cfg, datasets[cfg.stage]))
    return reports
