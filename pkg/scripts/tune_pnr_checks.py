"""Check the quantized-PNR and mean-vs-max-PNR margins on a trained model."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from semsearch import metrics
from semsearch import synthetic as syn
from semsearch.encoder import EncoderConfig, EncoderModel
from semsearch.quantstore import build_store
from semsearch.training import (StageConfig, evaluate_model, pnr_over_records,
                                run_stage)

from tune_stage_trend import ENC, SPEC, STAGES

t0 = time.time()
corpus = syn.generate(SPEC)
vocab = syn.build_vocab(corpus)
cfg = EncoderConfig(vocab_size=len(vocab), **ENC)
model = EncoderModel(cfg, seed=0, vocab=vocab)
data = syn.stage_datasets(corpus, vocab, cfg.max_len, seed=0)
for name, overrides in STAGES:
    run_stage(model, StageConfig(stage=name, warmup_steps=10, seed=0, **overrides),
              data[name])
val = data["target_ft"].validation
print("trained in %.1fs" % (time.time() - t0))

pnr_max = pnr_over_records(model, val.graded, scoring="train").average
pnr_mean = pnr_over_records(model, val.graded, scoring="predict").average
print(f"PNR max-pool={pnr_max:.4f} mean-pool={pnr_mean:.4f} "
      f"rel diff={abs(pnr_mean - pnr_max) / pnr_max:.4%}")

# quantized vs full-precision PNR under predict scoring
doc_embs = {d: model.embed_document(val.doc_seqs[d]).data for d in val.doc_seqs}
store = build_store(doc_embs)
groups = {}
for r in val.graded:
    groups.setdefault(r.query_id, []).append(r)


def pnr_with(doc_vec):
    qs = []
    for qid, recs in sorted(groups.items()):
        seq = val.query_seqs.get(qid)
        if seq is None:
            continue
        q = model.embed_query(seq).data
        qs.append(metrics.QueryScores(qid, [
            (r.doc_id, r.grade, float(doc_vec(r.doc_id) @ q)) for r in recs]))
    return metrics.pnr(qs).average


full = pnr_with(lambda d: doc_embs[d])
quant = pnr_with(store.get_dequantized)
print(f"PNR full={full:.4f} quantized={quant:.4f} "
      f"rel diff={abs(quant - full) / full:.4%}")
