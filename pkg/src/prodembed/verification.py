"""Independent oracles backing the acceptance checks.

These share no arithmetic with the implementations they test: gradients are
re-derived by central finite differences, masking rates are measured
empirically, and retrieval metrics are recomputed with plain loops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import masking, retrieval
from .masking import TrainingBatch
from .model import ModelConfig, backward, forward, init_params
from .objectives import LossWeights, compute_losses


@dataclass
class OracleReport:
    name: str
    deviation: float       # max abs or rel deviation, whichever the check uses
    tolerance: float
    passed: bool
    n_samples: int

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "deviation": self.deviation,
                           "tolerance": self.tolerance, "passed": self.passed,
                           "n_samples": self.n_samples})


def _report(name, deviation, tolerance, n_samples) -> OracleReport:
    return OracleReport(name=name, deviation=float(deviation), tolerance=tolerance,
                        passed=bool(deviation <= tolerance), n_samples=n_samples)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def tiny_config(vocab_size: int = 50) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, layers=2, hidden_dim=16, heads=2,
                       ffn_dim=32, max_title_len=8, image_side=32,
                       patch_size=16, dropout=0.0)


def _toy_batch(cfg: ModelConfig, rng: np.random.Generator) -> TrainingBatch:
    """A handcrafted batch covering every head: mixed lengths, pads, masks."""
    b, t, n_p, d_p = 3, 6, cfg.n_patches, cfg.patch_dim
    v = cfg.vocab_size
    token_ids = rng.integers(5, v, size=(b, t))
    token_valid = np.ones((b, t), dtype=bool)
    token_valid[1, 4:] = False
    token_valid[2, 1:] = False
    patches = rng.random((b, n_p, d_p)).astype(np.float32)
    patch_replaced = np.zeros((b, n_p), dtype=bool)
    patch_replaced[0, 1] = True
    patch_replaced[2, 0] = True
    patches[patch_replaced] = 0.0

    tok_t_ex = np.array([0, 0, 1], dtype=np.int64)
    tok_t_pos = np.array([1, 4, 0], dtype=np.int64)
    tok_t_id = rng.integers(5, v, size=3)
    token_ids[0, 1] = 3  # [MASK]
    pat_t_ex = np.array([0, 2], dtype=np.int64)
    pat_t_pos = np.array([1, 0], dtype=np.int64)
    pat_t_vec = rng.random((2, d_p)).astype(np.float32)
    return TrainingBatch(
        token_ids=token_ids, token_valid=token_valid, patches=patches,
        patch_replaced=patch_replaced,
        itm_labels=np.array([1, 0, 1], dtype=np.int64),
        tok_t_ex=tok_t_ex, tok_t_pos=tok_t_pos, tok_t_id=tok_t_id,
        pat_t_ex=pat_t_ex, pat_t_pos=pat_t_pos, pat_t_vec=pat_t_vec,
    )


def _total_loss(params, cfg, batch, weights):
    outputs, _ = forward(params, cfg, batch, train_mode=False)
    report, _ = compute_losses(outputs, batch, weights)
    return report.total


def grad_check(cfg: ModelConfig | None = None, seed: int = 0,
               coords_per_tensor: int = 4, h: float = 1e-6,
               weights: LossWeights | None = None):
    """Central finite differences vs. analytic gradients in float64.

    Samples coords_per_tensor coordinates from every parameter tensor
    (>=200 total on the tiny config). Returns (OracleReport, worst) where
    worst names the tensor with the largest relative error.
    """
    cfg = cfg or tiny_config()
    weights = weights or LossWeights()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C4D]))
    params = init_params(cfg, seed, dtype=np.float64)
    batch = _toy_batch(cfg, rng)

    outputs, cache = forward(params, cfg, batch, train_mode=False)
    _, (d_itm, d_mlm, d_mim, d_gmlm, d_gmim) = compute_losses(outputs, batch, weights)
    analytic, _ = backward(params, cfg, cache, outputs,
                           d_itm, d_mlm, d_mim, d_gmlm, d_gmim)

    max_rel = 0.0
    worst = ""
    n_checked = 0
    for name, tensor in params.items():
        flat_idx = rng.choice(tensor.size, size=min(coords_per_tensor, tensor.size),
                              replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, tensor.shape)
            keep = tensor[idx]
            tensor[idx] = keep + h
            up = _total_loss(params, cfg, batch, weights)
            tensor[idx] = keep - h
            down = _total_loss(params, cfg, batch, weights)
            tensor[idx] = keep
            fd = (up - down) / (2 * h)
            ana = analytic[name][idx]
            rel = abs(ana - fd) / max(abs(ana), abs(fd), 1e-8)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}{[int(i) for i in idx]}"
    return _report("grad_check", max_rel, 1e-3, n_checked), worst


def gmlm_isolation(seed: int = 0) -> OracleReport:
    """Gradient of the G-head losses must reach hidden states only at [CLS]."""
    cfg = tiny_config()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x150A]))
    params = init_params(cfg, seed, dtype=np.float64)
    batch = _toy_batch(cfg, rng)
    weights = LossWeights(itm=0.0, mlm=0.0, gmlm=1.0, mim=0.0, gmim=1.0)
    outputs, cache = forward(params, cfg, batch, train_mode=False)
    _, grads_out = compute_losses(outputs, batch, weights)
    _, hidden_grad = backward(params, cfg, cache, outputs, *grads_out,
                              want_hidden_grad=True)
    leak = float(np.abs(hidden_grad[:, 1:, :]).max())
    return _report("gmlm_isolation", leak, 0.0, int(hidden_grad[:, 1:, :].size))


# ---------------------------------------------------------------------------
# masking statistics
# ---------------------------------------------------------------------------

def masking_stats(n_positions: int = 1_000_000, seed: int = 0,
                  vocab_size: int = 1000) -> list[OracleReport]:
    """Empirical mask rates/splits vs. the 0.15 / 80-10-10 / 80-20 targets."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3A7]))
    vocab = _flat_vocab(vocab_size)
    seq_len = 1000
    n_seqs = n_positions // seq_len

    n_sel = n_mask = n_rand = n_keep = 0
    for _ in range(n_seqs):
        ids = rng.integers(5, vocab_size, size=seq_len).tolist()
        out, targets = masking.mask_tokens(ids, vocab, rng)
        n_sel += len(targets)
        for pos, orig in targets:
            if out[pos] == masking.MASK:
                n_mask += 1
            elif out[pos] == orig:
                n_keep += 1
            else:
                n_rand += 1
    rate_dev = abs(n_sel / n_positions - masking.TOKEN_MASK_RATE)
    split_dev = max(abs(n_mask / n_sel - 0.8), abs(n_rand / n_sel - 0.1),
                    abs(n_keep / n_sel - 0.1))
    reports = [
        _report("token_mask_rate", rate_dev, 0.005, n_positions),
        _report("token_mask_split", split_dev, 0.01, n_sel),
    ]

    p_sel = p_zero = p_keep = 0
    n_patch_draws = n_positions
    chunk = 1000
    for _ in range(n_patch_draws // chunk):
        patches = rng.random((chunk, 4), dtype=np.float32) + 0.5
        masked, targets, replaced = masking.mask_patches(patches, rng)
        p_sel += len(targets)
        p_zero += len(replaced)
        p_keep += len(targets) - len(replaced)
    rate_dev = abs(p_sel / n_patch_draws - masking.PATCH_MASK_RATE)
    split_dev = max(abs(p_zero / p_sel - 0.8), abs(p_keep / p_sel - 0.2))
    reports += [
        _report("patch_mask_rate", rate_dev, 0.005, n_patch_draws),
        _report("patch_mask_split", split_dev, 0.01, p_sel),
    ]
    return reports


def _flat_vocab(size: int):
    from .bpe import SPECIAL_TOKENS, Vocab
    tokens = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
    for i in range(len(SPECIAL_TOKENS), size):
        tokens[f"w{i}"] = i
    return Vocab(merges=[], token_to_id=tokens)


# ---------------------------------------------------------------------------
# retrieval metric oracles
# ---------------------------------------------------------------------------

def _oracle_recall(ranked, k, relevant) -> float:
    hits = 0
    for rid in ranked[:k]:
        for rel in relevant:
            if rid == rel:
                hits += 1
    return hits / len(relevant)


def _oracle_ap(ranked, k, relevant) -> float:
    precisions = []
    seen = 0
    for rank, rid in enumerate(ranked[:k], start=1):
        if any(rid == rel for rel in relevant):
            seen += 1
            precisions.append(seen / rank)
    denom = k if k < len(relevant) else len(relevant)
    return sum(precisions) / denom


def _oracle_acc(logits, labels, k) -> float:
    correct = 0
    for row, label in zip(logits, labels):
        better = 0
        for j, val in enumerate(row):
            if val > row[label] or (val == row[label] and j < label):
                better += 1
        if better < k:
            correct += 1
    return correct / len(labels)


def metric_oracle(n_trials: int = 1000, seed: int = 0) -> OracleReport:
    """Random small instances: module metrics vs. loop-based recomputation."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0E7C]))
    max_dev = 0.0
    for _ in range(n_trials):
        n = int(rng.integers(5, 30))
        k = int(rng.integers(1, 15))
        ids = [f"i{j:03d}" for j in range(n)]
        results = []
        for q in range(int(rng.integers(1, 4))):
            order = rng.permutation(n)
            depth = int(rng.integers(1, n + 1))
            ranked = [ids[j] for j in order[:depth]]
            n_rel = int(rng.integers(1, min(6, n + 1)))
            relevant = frozenset(ids[j] for j in rng.choice(n, n_rel, replace=False))
            results.append(retrieval.QueryResult(
                query_id=f"q{q}", ranked_ids=ranked,
                scores=[0.0] * len(ranked), relevant=relevant))
        run = retrieval.RetrievalRun(results)
        mar = retrieval.mar_at_k(run, k)
        map_ = retrieval.map_at_k(run, k)
        o_mar = sum(_oracle_recall(r.ranked_ids, k, sorted(r.relevant))
                    for r in results) / len(results)
        o_map = sum(_oracle_ap(r.ranked_ids, k, sorted(r.relevant))
                    for r in results) / len(results)
        max_dev = max(max_dev, abs(mar - o_mar), abs(map_ - o_map))

        rows = int(rng.integers(1, 8))
        classes = int(rng.integers(2, 10))
        logits = rng.standard_normal((rows, classes))
        labels = rng.integers(0, classes, size=rows)
        for kk in (1, min(5, classes)):
            acc = retrieval.acc_at_k(logits, labels, kk)
            max_dev = max(max_dev, abs(acc - _oracle_acc(logits, labels, kk)))
    return _report("metric_oracle", max_dev, 1e-12, n_trials)


def run_all(seed: int = 0, fast: bool = False) -> list[OracleReport]:
    """Every oracle, as invoked by `prodembed eval --task verify`."""
    n_pos = 100_000 if fast else 1_000_000
    trials = 200 if fast else 1000
    report, _ = grad_check(seed=seed)
    out = [report, gmlm_isolation(seed)]
    out += masking_stats(n_pos, seed)
    out.append(metric_oracle(trials, seed))
    return out
