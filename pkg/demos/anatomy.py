"""A guided tour of one training example: layout, masking, losses.

Builds the smallest sensible world, then prints what the model actually
sees -- the single-stream sequence layout, which positions got masked and
how, and the per-objective loss report at initialization.

    python demos/anatomy.py
"""

import numpy as np

from prodembed.bpe import encode_title, train_bpe
from prodembed.masking import MASK, make_batch, make_example
from prodembed.model import (ModelConfig, forward, init_params,
                             sequence_layout)
from prodembed.images import augment, patchify
from prodembed.objectives import LossWeights, compute_losses
from prodembed.synth import SynthConfig, generate_catalog

rng = np.random.default_rng(7)

index, _ = generate_catalog(SynthConfig(n_meta=2, n_leaf=4,
                                        n_index_products=40, n_queries=3,
                                        image_side=32, seed=7))
vocab = train_bpe([r.title for r in index], target_size=300)
cfg = ModelConfig(vocab_size=vocab.size, layers=2, hidden_dim=32, heads=2,
                  ffn_dim=64, max_title_len=12, image_side=32, patch_size=16,
                  dropout=0.0)

# --- the single-stream layout ------------------------------------------------
# [CLS] | patch_0..patch_{N-1} | [SEP] | title tokens | [SEP] | padding
layout = sequence_layout(cfg, title_len=cfg.max_title_len)
print("sequence layout:")
for name, value in sorted(layout.items()):
    print(f"  {name:>12} = {value}")

# --- one masked training example ---------------------------------------------
record = index[0]
print(f"\nproduct {record.id}: {record.title!r}")


def enc(title):
    return encode_title(title, vocab, cfg.max_title_len)


def patch(image):
    return patchify(augment(image, rng, True, cfg.image_side),
                    cfg.patch_size).patches


example = make_example(record, index, vocab, rng, enc, patch, train_mode=True)
print(f"ITM label: {example.itm_label} "
      f"({'matched title' if example.itm_label else 'random other title'})")

shown = example.token_ids
originals = dict(example.token_targets)
print("title positions after masking:")
for pos, tok in enumerate(shown):
    if pos in originals:
        how = "[MASK]" if tok == MASK else (
            "kept" if tok == originals[pos] else f"random id {tok}")
        print(f"  pos {pos}: target id {originals[pos]} shown as {how}")
n_patches = len(example.patch_vectors)
print(f"masked patches: {sorted(int(p) for p, _ in example.patch_targets)} "
      f"of {n_patches}")

# --- the loss report at init ------------------------------------------------
# MIM/GMIM regress masked patches (summed squared error per patch); the
# G-heads see the encoder only through [CLS]. Weighted magnitudes land
# within one order of magnitude of each other at init by design.
batch = make_batch([make_example(r, index, vocab, rng, enc, patch)
                    for r in index[:8]], cfg.max_title_len)
params = init_params(cfg, seed=0)
outputs, _ = forward(params, cfg, batch, train_mode=False)
report, _ = compute_losses(outputs, batch, LossWeights())
w = LossWeights()
print("\nper-objective losses at init (raw -> weighted):")
for name, weight in [("itm", w.itm), ("mlm", w.mlm), ("gmlm", w.gmlm),
                     ("mim", w.mim), ("gmim", w.gmim)]:
    raw = getattr(report, name)
    print(f"  {name:>4}: {raw:8.4f} -> {weight * raw:7.4f}")
print(f"  total: {report.total:.4f} "
      f"({report.masked_tokens} masked tokens, "
      f"{report.masked_patches} masked patches)")
