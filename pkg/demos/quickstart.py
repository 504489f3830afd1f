"""Miniature end-to-end run: catalog -> vocab -> pretrain -> search.

Everything here is scaled down (a few dozen products, a 2-layer encoder,
60 optimizer steps) so the whole script finishes in well under a minute on
one CPU while still exercising the real pipeline. For the desk-scale
recipe, see demos/walkthrough_cli.sh.

    python demos/quickstart.py
"""

import tempfile

import numpy as np

from prodembed.bpe import train_bpe
from prodembed.model import ModelConfig, load_checkpoint
from prodembed.retrieval import (QueryResult, RetrievalRun, embed_catalog,
                                 map_at_k, mar_at_k, topk)
from prodembed.synth import SynthConfig, generate_catalog
from prodembed.trainer import OptimConfig, pretrain

rng = np.random.default_rng(0)

# --- 1. a synthetic product catalog -----------------------------------------
# Index products carry an image, a noisy title, a leaf category and a match
# group; queries are held-out products whose group members are the relevant
# answers for retrieval.
cfg = SynthConfig(n_meta=2, n_leaf=6, n_index_products=90, n_queries=8,
                  image_side=32, noise_level=0.2, seed=0)
index, queries = generate_catalog(cfg)
print(f"catalog: {len(index)} index products, {len(queries)} queries")
print(f"example title: {index[0].title!r}")

# --- 2. a BPE vocabulary over the titles ------------------------------------
vocab = train_bpe([r.title for r in index], target_size=400)
print(f"vocab: {vocab.size} tokens (undersized={vocab.undersized})")

# --- 3. a short pretraining run ----------------------------------------------
# Five objectives share the encoder: ITM plus the local and global masked
# token/patch losses. A few hundred steps is enough for the tiny world to move.
model_cfg = ModelConfig(vocab_size=vocab.size, layers=2, hidden_dim=32,
                        heads=2, ffn_dim=64, max_title_len=16, image_side=32,
                        patch_size=16, dropout=0.0)
optim_cfg = OptimConfig(peak_lr=2e-3, warmup_steps=20, total_steps=300,
                        batch_size=16, eval_every=100, log_every=100)
train, valid = index[:72], index[72:]
with tempfile.TemporaryDirectory() as out:
    ckpt_path = pretrain(train, valid, vocab, model_cfg, optim_cfg, seed=0,
                         out_dir=out, quiet=False)
    params, model_cfg, extra = load_checkpoint(ckpt_path)
print(f"best checkpoint from step {extra['step']} "
      f"(valid total {extra['valid_total']:.4f})")

# --- 4. triple-embedding retrieval -------------------------------------------
# Every record gets a global ([CLS]), text-mean and vision-mean embedding;
# query-index scores take the max over the three channels.
index_store = embed_catalog(index, params, model_cfg, vocab)
query_store = embed_catalog(queries, params, model_cfg, vocab)

by_group = {}
for rec in index:
    by_group.setdefault(rec.match_group, []).append(rec.id)

results = []
for row, q in enumerate(queries):
    ranked_ids, scores = topk(query_store.triple(row), index_store, k=5)
    results.append(QueryResult(query_id=q.id, ranked_ids=ranked_ids,
                               scores=scores,
                               relevant=frozenset(by_group[q.match_group])))

first = results[0]
print(f"\ntop-5 for {first.query_id} (relevant: {sorted(first.relevant)}):")
for rank, (pid, score) in enumerate(zip(first.ranked_ids, first.scores), 1):
    marker = " <- relevant" if pid in first.relevant else ""
    print(f"  {rank}. {pid}  score {score:+.6f}{marker}")

run = RetrievalRun(results)
print(f"\nMAR@5 {mar_at_k(run, 5):.4f}   MAP@5 {map_at_k(run, 5):.4f}")
