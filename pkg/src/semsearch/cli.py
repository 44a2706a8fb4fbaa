"""Command-line surface tying the library into the full retrieval workflow.

Subcommands: gen-data, train, build-index, quantize, retrieve, eval, serve,
ablate. Each command reads a YAML config (flags override config fields, which
override built-in defaults), writes its resolved configuration next to its
outputs, and is deterministic for a fixed seed. Failures exit nonzero with a
machine-readable JSON error on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np
import yaml

from . import index as idx
from . import reporting, retrieval, synthetic
from .encoder import EncoderConfig, EncoderModel
from .errors import SemSearchError
from .quantstore import EmbeddingStore, build_store
from .training import StageConfig, evaluate_model, train_pipeline

STAGE_NUMBERS = {1: "pretrain", 2: "post_pretrain",
                 3: "intermediate_ft", 4: "target_ft"}

DEFAULT_CONFIG = {
    "seed": 0,
    "corpus": {"n_topics": 8, "docs_per_topic": 12, "queries_per_topic": 8,
               "vocab_size": 96, "tail_fraction": 0.2, "noise_rate": 0.1},
    "encoder": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32,
                "max_len": 12, "m": 2, "d_compress": 8, "dropout": 0.1},
    "stages": {name: {"learning_rate": 1e-3, "batch_size": 8,
                      "warmup_steps": 20, "epochs": 1}
               for name in STAGE_NUMBERS.values()},
    "index": {"ann_mode": "flat", "n_clusters": 8, "n_probe": 2},
    "pool": {"k_sem": 100, "k_text": 100, "n_out": 20},
}


def _deep_update(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise SemSearchError(f"config file {path} must hold a mapping")
        cfg = _deep_update(cfg, loaded)
    return _deep_update(cfg, overrides)


def write_resolved_config(cfg: dict, out_dir: str) -> str:
    path = os.path.join(out_dir, "resolved_config.yaml")
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    return path


def _load_world(cfg: dict, data_dir: str):
    corpus = synthetic.load_corpus(data_dir)
    vocab = synthetic.build_vocab(corpus)
    return corpus, vocab


def _encoder_config(cfg: dict, vocab) -> EncoderConfig:
    return EncoderConfig(vocab_size=len(vocab), **cfg["encoder"])


def _doc_embeddings(model: EncoderModel, corpus) -> dict[int, np.ndarray]:
    max_len = model.config.max_len
    return {d: model.embed_document(model.vocab.encode(t, max_len)).data
            for d, t in sorted(corpus.docs.items())}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed} if args.seed is not None else {})
    os.makedirs(args.out, exist_ok=True)
    spec = synthetic.SyntheticCorpusSpec(seed=cfg["seed"], **cfg["corpus"])
    corpus = synthetic.generate(spec)
    synthetic.write_corpus(corpus, args.out)
    write_resolved_config(cfg, args.out)
    print(json.dumps({"docs": len(corpus.docs), "queries": len(corpus.queries),
                      "click_records": len(corpus.click_log), "out": args.out}))
    return 0


def _parse_stage_list(text: str) -> list[str]:
    try:
        numbers = sorted({int(s) for s in text.split(",") if s.strip()})
        return [STAGE_NUMBERS[n] for n in numbers]
    except (ValueError, KeyError):
        raise SemSearchError(
            f"--stages must be comma-separated values from 1-4, got {text!r}")


def _train_once(cfg: dict, corpus, vocab, stages: list[str], seed: int):
    model = EncoderModel(_encoder_config(cfg, vocab), seed=seed, vocab=vocab)
    datasets = synthetic.stage_datasets(corpus, vocab, model.config.max_len, seed=seed)
    stage_cfgs = [StageConfig(stage=name, seed=seed, **cfg["stages"][name])
                  for name in stages]
    reports = train_pipeline(model, stage_cfgs, datasets)
    return model, datasets, reports


def cmd_train(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    cfg = load_config(args.config, overrides)
    corpus, vocab = _load_world(cfg, args.data)
    stages = _parse_stage_list(args.stages)
    os.makedirs(args.out, exist_ok=True)
    model, _, reports = _train_once(cfg, corpus, vocab, stages, cfg["seed"])
    ckpt = os.path.join(args.out, "model.ckpt")
    model.save(ckpt)
    reporting.render_training_report(reports, args.out)
    write_resolved_config(cfg, args.out)
    print(json.dumps({"checkpoint": ckpt, "stages": stages,
                      "final": reports[-1]["final"]}))
    return 0


def cmd_build_index(args) -> int:
    overrides = {"index": {}}
    if args.ann_mode:
        overrides["index"]["ann_mode"] = args.ann_mode
    if args.n_clusters is not None:
        overrides["index"]["n_clusters"] = args.n_clusters
    if args.n_probe is not None:
        overrides["index"]["n_probe"] = args.n_probe
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    corpus, vocab = _load_world(cfg, args.data)
    model = EncoderModel.load(args.model)
    os.makedirs(args.out, exist_ok=True)
    embeddings = _doc_embeddings(model, corpus)
    ix = cfg["index"]
    ann = idx.build_ann(embeddings, mode=ix["ann_mode"],
                        n_clusters=ix["n_clusters"], n_probe=ix["n_probe"],
                        seed=cfg["seed"])
    ann_path = os.path.join(args.out, "ann.idx")
    ann.persist(ann_path)
    from .textproc import tokenize
    inv = idx.build_inverted({d: tokenize(t) for d, t in corpus.docs.items()})
    inv_path = os.path.join(args.out, "inverted.idx")
    inv.persist(inv_path)
    write_resolved_config(cfg, args.out)
    print(json.dumps({"ann": ann_path, "inverted": inv_path,
                      "mode": ix["ann_mode"], "docs": len(embeddings)}))
    return 0


def cmd_quantize(args) -> int:
    cfg = load_config(args.config, {})
    corpus, vocab = _load_world(cfg, args.data)
    model = EncoderModel.load(args.model)
    os.makedirs(args.out, exist_ok=True)
    store = build_store(_doc_embeddings(model, corpus))
    path = os.path.join(args.out, "embeddings.store")
    store.persist(path)
    write_resolved_config(cfg, args.out)
    print(json.dumps({"store": path, "docs": len(store),
                      "widened_dims": store.params.widened}))
    return 0


def _serve_artifacts(args, cfg):
    corpus, _ = _load_world(cfg, args.data)
    model = EncoderModel.load(args.model)
    ann = idx.AnnIndex.load(os.path.join(args.artifacts, "ann.idx"))
    inv = idx.InvertedIndex.load(os.path.join(args.artifacts, "inverted.idx"))
    store_path = os.path.join(args.artifacts, "embeddings.store")
    store = EmbeddingStore.load(store_path) if os.path.exists(store_path) else None
    ranker_path = os.path.join(args.artifacts, "ranker.json")
    if os.path.exists(ranker_path):
        ranker = retrieval.LinearRanker.load(ranker_path)
    else:
        ranker = retrieval.LinearRanker(
            [retrieval.SEMANTIC_FEATURE, retrieval.BM25_FEATURE],
            np.array([1.0, 0.0]))
    stats = synthetic.doc_statistics(corpus.click_log)
    return corpus, model, ann, inv, store, ranker, stats


def _answer_query(query: str, k: int, corpus, model, ann, inv, store, ranker,
                  stats, pool_cfg) -> list[dict]:
    pool = retrieval.retrieve(query, model, ann, inv,
                              k_sem=pool_cfg["k_sem"], k_text=pool_cfg["k_text"])
    q_emb = model.embed_query(model.vocab.encode(query, model.config.max_len)).data
    retrieval.backfill_semantic(pool, q_emb, store, model=model, titles=corpus.docs)
    features = retrieval.build_features(pool, stats)
    ranked = retrieval.filter_rank(pool, features, ranker, n_out=max(k, 1))
    return [{"doc_id": d, "title": corpus.docs.get(d, ""), "score": s,
             "sources": sorted(pool.entries[d].sources)}
            for d, s in ranked[:k]]


def cmd_retrieve(args) -> int:
    cfg = load_config(args.config, {})
    world = _serve_artifacts(args, cfg)
    results = _answer_query(args.query, args.k, *world, cfg["pool"])
    for r in results:
        print(json.dumps(r, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    cfg = load_config(args.config, {})
    world = _serve_artifacts(args, cfg)
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            results = _answer_query(req["query"], int(req.get("k", 10)),
                                    *world, cfg["pool"])
            print(json.dumps({"results": results}, sort_keys=True), flush=True)
        except (SemSearchError, KeyError, ValueError) as exc:
            print(json.dumps({"error": str(exc)}), flush=True)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, {})
    corpus, vocab = _load_world(cfg, args.data)
    model = EncoderModel.load(args.model)
    datasets = synthetic.stage_datasets(corpus, vocab, model.config.max_len,
                                        seed=cfg["seed"])
    os.makedirs(args.out, exist_ok=True)
    metrics = evaluate_model(model, datasets["target_ft"].validation)
    reporting.render_eval_report(metrics, args.out)
    write_resolved_config(cfg, args.out)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    cfg = load_config(args.config, overrides)
    corpus, vocab = _load_world(cfg, args.data)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for arm in args.stages.split(";"):
        stages = _parse_stage_list(arm)
        _, datasets, reports = _train_once(cfg, corpus, vocab, stages, cfg["seed"])
        final = reports[-1]["final"]
        row = {"label": "stages " + ",".join(
            str(n) for n, name in STAGE_NUMBERS.items() if name in stages)}
        for key in ("recall_at_10", "pnr"):
            if key in final:
                row[key] = final[key]
        rows.append(row)
    reporting.render_ablation_report(rows, args.out)
    write_resolved_config(cfg, args.out)
    print(json.dumps(rows))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semsearch",
        description="Desk-scale hybrid text + semantic retrieval engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, model=False, out=True, seed=True):
        p.add_argument("--config", help="YAML config file")
        if data:
            p.add_argument("--data", required=True, help="corpus directory")
        if model:
            p.add_argument("--model", required=True, help="model checkpoint")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the staged training pipeline")
    common(p)
    p.add_argument("--stages", default="1,2,3,4",
                   help="comma-separated stage numbers, e.g. 3 or 1,2,3,4")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-index", help="build ANN + inverted indexes")
    common(p, model=True)
    p.add_argument("--ann-mode", choices=["flat", "ivf"], default=None)
    p.add_argument("--n-clusters", type=int, default=None)
    p.add_argument("--n-probe", type=int, default=None)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("quantize", help="build the quantized embedding store")
    common(p, model=True, seed=False)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("retrieve", help="answer one query end to end")
    common(p, model=True, out=False, seed=False)
    p.add_argument("--artifacts", required=True, help="index/store directory")
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("serve", help="line-JSON query loop on stdin/stdout")
    common(p, model=True, out=False, seed=False)
    p.add_argument("--artifacts", required=True)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    common(p, model=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare training-stage subsets")
    common(p)
    p.add_argument("--stages", required=True,
                   help="semicolon-separated arms, e.g. '3;1,2,3,4'")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SemSearchError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": "FileNotFound", "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
