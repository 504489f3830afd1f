"""Pretraining example assembly: pair sampling, masking, batch packing.

One sampling pass selects the masked positions; both the local heads
(MLM/MIM) and the global-representation heads (GMLM/GMIM) reconstruct the
same positions, so targets are shared by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bpe import MASK, MAX_TITLE_LEN, PAD, Vocab, encode_title
from .images import augment, patchify

TOKEN_MASK_RATE = 0.15
TOKEN_MASK_SPLIT = (0.8, 0.1, 0.1)   # mask token / random token / unchanged
PATCH_MASK_RATE = 0.15
PATCH_MASK_SPLIT = (0.8, 0.2)        # zero placeholder / unchanged


@dataclass
class TrainingExample:
    token_ids: list[int]                       # post-mask
    token_targets: list[tuple[int, int]]       # (position, original id), ascending
    patch_vectors: np.ndarray                  # (N_p, D_p) post-mask
    patch_targets: list[tuple[int, np.ndarray]]
    itm_label: int                             # 1 matched, 0 mismatched
    patch_replaced: list[int] = field(default_factory=list)  # zero-placeholder slots


@dataclass
class TrainingBatch:
    """Array view of a list of examples, padded to the batch's max title length."""

    token_ids: np.ndarray       # (B, T) int64, PAD-filled
    token_valid: np.ndarray     # (B, T) bool, False on padding
    patches: np.ndarray         # (B, N_p, D_p) float32
    patch_replaced: np.ndarray  # (B, N_p) bool
    itm_labels: np.ndarray      # (B,) int64
    tok_t_ex: np.ndarray        # masked-token targets: example / position / original id
    tok_t_pos: np.ndarray
    tok_t_id: np.ndarray
    pat_t_ex: np.ndarray        # masked-patch targets: example / position / original vector
    pat_t_pos: np.ndarray
    pat_t_vec: np.ndarray       # (M_p, D_p) float32

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]

    @property
    def title_len(self) -> int:
        return self.token_ids.shape[1]


def sample_itm_pair(record, catalog, rng: np.random.Generator):
    """Return (image, title, itm_label) for image-text matching.

    With p=0.5 the record's own title (label 1), otherwise the title of a
    uniformly drawn different record (label 0).
    """
    if len(catalog) < 2:
        raise ValueError("need at least 2 records to sample mismatched pairs")
    if rng.random() < 0.5:
        return record.image, record.title, 1
    while True:
        other = catalog[int(rng.integers(0, len(catalog)))]
        if other.id != record.id:
            return record.image, other.title, 0


def mask_tokens(ids, vocab: Vocab, rng: np.random.Generator):
    """BERT-style token masking.

    Each position is selected independently with p=0.15; of the selected,
    80% become [MASK], 10% a random non-special token, 10% stay unchanged.
    All selected positions are recorded with their original ids.
    """
    n = len(ids)
    if n == 0:
        return [], []
    sel = rng.random(n) < TOKEN_MASK_RATE
    action = rng.random(n)
    rand_ids = rng.integers(vocab.n_specials, vocab.size, size=n)
    out = list(ids)
    targets = []
    for i in range(n):
        if not sel[i]:
            continue
        targets.append((i, ids[i]))
        if action[i] < TOKEN_MASK_SPLIT[0]:
            out[i] = MASK
        elif action[i] < TOKEN_MASK_SPLIT[0] + TOKEN_MASK_SPLIT[1]:
            out[i] = int(rand_ids[i])
    return out, targets


def mask_patches(patches: np.ndarray, rng: np.random.Generator):
    """Patch masking: select 15%, zero out 80% of those, keep 20% visible.

    Returns (masked patches, targets, replaced positions). Targets store the
    original vectors for every selected patch; replaced positions name the
    zero placeholders that receive the learned mask bias inside the model.
    """
    n = patches.shape[0]
    sel = rng.random(n) < PATCH_MASK_RATE
    action = rng.random(n)
    replaced = sel & (action < PATCH_MASK_SPLIT[0])
    masked = patches.copy()
    masked[replaced] = 0.0
    targets = [(i, patches[i].copy()) for i in np.flatnonzero(sel)]
    return masked, targets, [int(i) for i in np.flatnonzero(replaced)]


def make_example(record, catalog, vocab: Vocab, rng: np.random.Generator,
                 encode, augment_patchify, train_mode: bool = True) -> TrainingExample:
    """Build one pretraining example: sample pair, encode, mask both sides.

    ``encode`` maps a title to ids; ``augment_patchify`` maps an image to a
    (N_p, D_p) patch matrix. In eval mode nothing is masked and the pair is
    always matched (for embedding extraction).
    """
    if train_mode:
        image, title, label = sample_itm_pair(record, catalog, rng)
    else:
        image, title, label = record.image, record.title, 1
    ids = encode(title)
    patches = augment_patchify(image)
    if train_mode:
        masked_ids, tok_targets = mask_tokens(ids, vocab, rng)
        masked_patches, pat_targets, replaced = mask_patches(patches, rng)
    else:
        masked_ids, tok_targets = list(ids), []
        masked_patches, pat_targets, replaced = patches, [], []
    return TrainingExample(
        token_ids=masked_ids, token_targets=tok_targets,
        patch_vectors=masked_patches, patch_targets=pat_targets,
        itm_label=label, patch_replaced=replaced,
    )


def eval_batch(records, vocab: Vocab, image_side: int, patch_size: int,
               max_title_len: int = MAX_TITLE_LEN) -> TrainingBatch:
    """Unmasked, unaugmented, matched batch over records (for embedding)."""
    examples = [
        make_example(
            r, records, vocab, None,
            lambda t: encode_title(t, vocab, max_title_len),
            lambda img: patchify(augment(img, None, False, image_side), patch_size).patches,
            train_mode=False)
        for r in records
    ]
    return make_batch(examples, max_title_len)


def make_batch(examples: list[TrainingExample], max_title_len: int = 36,
               pad_id: int = PAD) -> TrainingBatch:
    """Pack examples into padded arrays; patch count must be uniform."""
    b = len(examples)
    if b == 0:
        raise ValueError("empty batch")
    n_p, d_p = examples[0].patch_vectors.shape
    if any(e.patch_vectors.shape != (n_p, d_p) for e in examples):
        raise ValueError("examples disagree on patch geometry")
    t = min(max(max(len(e.token_ids) for e in examples), 1), max_title_len)

    token_ids = np.full((b, t), pad_id, dtype=np.int64)
    token_valid = np.zeros((b, t), dtype=bool)
    patches = np.zeros((b, n_p, d_p), dtype=np.float32)
    patch_replaced = np.zeros((b, n_p), dtype=bool)
    itm = np.zeros(b, dtype=np.int64)
    tok_t = [(i, p, orig) for i, e in enumerate(examples) for p, orig in e.token_targets if p < t]
    pat_t = [(i, p, v) for i, e in enumerate(examples) for p, v in e.patch_targets]
    for i, e in enumerate(examples):
        k = min(len(e.token_ids), t)
        token_ids[i, :k] = e.token_ids[:k]
        token_valid[i, :k] = True
        patches[i] = e.patch_vectors
        patch_replaced[i, e.patch_replaced] = True
        itm[i] = e.itm_label
    return TrainingBatch(
        token_ids=token_ids, token_valid=token_valid,
        patches=patches, patch_replaced=patch_replaced, itm_labels=itm,
        tok_t_ex=np.array([x[0] for x in tok_t], dtype=np.int64),
        tok_t_pos=np.array([x[1] for x in tok_t], dtype=np.int64),
        tok_t_id=np.array([x[2] for x in tok_t], dtype=np.int64),
        pat_t_ex=np.array([x[0] for x in pat_t], dtype=np.int64),
        pat_t_pos=np.array([x[1] for x in pat_t], dtype=np.int64),
        pat_t_vec=(np.stack([x[2] for x in pat_t]).astype(np.float32)
                   if pat_t else np.zeros((0, d_p), dtype=np.float32)),
    )
