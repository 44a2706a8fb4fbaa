"""Empirical tuning harness for the staged-training acceptance trend.

Not part of the package: measures untrained vs per-stage Recall@10 and
runtime so the acceptance-test corpus and stage configs can be sized.
"""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from semsearch import synthetic as syn
from semsearch.encoder import EncoderConfig, EncoderModel
from semsearch.training import StageConfig, evaluate_model, run_stage

SPEC = syn.SyntheticCorpusSpec(
    n_topics=8, docs_per_topic=8, queries_per_topic=8, vocab_size=96,
    title_length=(4, 7), query_length=(2, 4), noise_rate=0.1,
    impressions_per_query=6, seed=100)

ENC = dict(n_layers=1, d_model=16, n_heads=2, d_ff=32, max_len=10,
           m=2, d_compress=8, dropout=0.1)

STAGES = [
    ("pretrain", dict(epochs=4, batch_size=8, learning_rate=1e-3)),
    ("post_pretrain", dict(epochs=8, batch_size=8, learning_rate=1e-3)),
    ("intermediate_ft", dict(epochs=12, batch_size=8, learning_rate=3e-3)),
    ("target_ft", dict(epochs=10, batch_size=8, learning_rate=2e-3)),
]


def run_seed(seed):
    spec = syn.SyntheticCorpusSpec(**{**vars(SPEC), "seed": SPEC.seed + seed})
    corpus = syn.generate(spec)
    vocab = syn.build_vocab(corpus)
    cfg = EncoderConfig(vocab_size=len(vocab), **ENC)
    model = EncoderModel(cfg, seed=seed, vocab=vocab)
    data = syn.stage_datasets(corpus, vocab, cfg.max_len, seed=seed)
    val = data["target_ft"].validation
    recalls = [evaluate_model(model, val)["recall_at_10"]]
    for name, overrides in STAGES:
        scfg = StageConfig(stage=name, warmup_steps=10, seed=seed, **overrides)
        run_stage(model, scfg, data[name])
        recalls.append(evaluate_model(model, val)["recall_at_10"])
    return recalls


if __name__ == "__main__":
    t0 = time.time()
    all_recalls = []
    for seed in range(5):
        t = time.time()
        r = run_seed(seed)
        all_recalls.append(r)
        print(f"seed {seed}: {['%.3f' % x for x in r]}  ({time.time()-t:.1f}s)",
              flush=True)
    mean = np.mean(all_recalls, axis=0)
    print("mean:", ["%.3f" % x for x in mean])
    print("checkpoints: untrained, pre, post_pre, inter, target")
    print("monotone(post_pre..target vs untrained):",
          all(a <= b + 1e-12 for a, b in zip(
              [mean[0], mean[2], mean[3]], [mean[2], mean[3], mean[4]])))
    print("ratio target/untrained: %.2f" % (mean[4] / mean[0]))
    print("total %.1fs" % (time.time() - t0))
