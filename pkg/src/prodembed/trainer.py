"""Pretraining loop and leaf-category fine-tuning.

AdamW with decoupled weight decay, linear warmup to peak then linear decay
to zero, periodic full-valid evaluation, and min-valid-loss checkpoint
selection. Everything downstream of the root seed is deterministic in
single-worker mode.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .bpe import Vocab, encode_title
from .images import augment, patchify
from .masking import TrainingBatch, make_batch, make_example
from .model import ModelConfig, backward, decayable, forward, init_params, save_checkpoint
from .objectives import LossWeights, compute_losses, _ce


@dataclass
class OptimConfig:
    peak_lr: float = 1e-4
    warmup_steps: int = 4000
    total_steps: int = 100000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 512
    grad_clip: float | None = None
    eval_every: int = 250
    log_every: int = 50

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")
        if min(self.peak_lr, self.batch_size, self.eval_every, self.log_every) <= 0:
            raise ValueError("OptimConfig values must be positive")

    @classmethod
    def desk(cls, **overrides) -> "OptimConfig":
        base = dict(peak_lr=3e-4, warmup_steps=200, total_steps=5000, batch_size=32)
        base.update(overrides)
        return cls(**base)


@dataclass
class FinetuneConfig:
    lr: float = 1e-5
    warmup_ratio: float = 0.06
    batch_size: int = 64
    max_epochs: int = 10
    weight_decay: float = 0.1


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Piecewise-linear schedule: 0 -> peak over warmup, peak -> 0 at total."""
    if step <= 0:
        return 0.0
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr * max(0.0, frac)


def init_adam_state(params: dict[str, np.ndarray]) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adamw_step(params, grads, state, lr, cfg: OptimConfig) -> None:
    """One in-place AdamW update with bias-corrected moments.

    Decay is decoupled and computed from the pre-step parameter value;
    biases and layer-norm terms are exempt.
    """
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state["m"][name], state["v"][name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.weight_decay and decayable(name):
            p -= lr * cfg.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def clip_gradients(grads, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def select_checkpoint(valid_losses) -> int:
    """Index of the minimum valid loss; ties resolve to the earliest."""
    losses = list(valid_losses)
    if not losses:
        raise ValueError("no checkpoints to select from")
    best = 0
    for i, loss in enumerate(losses):
        if loss < losses[best]:
            best = i
    return best


class _ExampleStream:
    """Epoch-shuffled training examples with cached title encodings."""

    def __init__(self, records, vocab: Vocab, model_cfg: ModelConfig,
                 rng: np.random.Generator):
        self.records = records
        self.vocab = vocab
        self.cfg = model_cfg
        self.rng = rng
        self._order: list[int] = []
        self._cursor = 0
        self._enc_cache: dict[str, list[int]] = {}

    def _encode(self, title: str) -> list[int]:
        ids = self._enc_cache.get(title)
        if ids is None:
            ids = encode_title(title, self.vocab, self.cfg.max_title_len)
            self._enc_cache[title] = ids
        return ids

    def _augment_patchify(self, image):
        img = augment(image, self.rng, True, self.cfg.image_side)
        return patchify(img, self.cfg.patch_size).patches

    def next_batch(self, batch_size: int) -> TrainingBatch:
        examples = []
        for _ in range(batch_size):
            if self._cursor >= len(self._order):
                self._order = list(self.rng.permutation(len(self.records)))
                self._cursor = 0
            record = self.records[self._order[self._cursor]]
            self._cursor += 1
            examples.append(make_example(
                record, self.records, self.vocab, self.rng,
                self._encode, self._augment_patchify, train_mode=True))
        return make_batch(examples, self.cfg.max_title_len)


def build_valid_batches(records, vocab, model_cfg, rng, batch_size):
    """Fixed masked batches for comparable valid losses across checkpoints.

    Masking and ITM pair sampling are drawn once from the given rng; images
    are resized only (no random crops).
    """
    def enc(title):
        return encode_title(title, vocab, model_cfg.max_title_len)

    def patch(image):
        return patchify(augment(image, None, False, model_cfg.image_side),
                        model_cfg.patch_size).patches

    batches = []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo:lo + batch_size]
        examples = [make_example(r, records, vocab, rng, enc, patch, train_mode=True)
                    for r in chunk]
        batches.append(make_batch(examples, model_cfg.max_title_len))
    return batches


def evaluate(params, model_cfg, batches, weights, matched_only=False):
    """Mean losses and ITM accuracy over prebuilt batches (no dropout)."""
    sums = {"itm": 0.0, "mlm": 0.0, "gmlm": 0.0, "mim": 0.0, "gmim": 0.0, "total": 0.0}
    correct = 0
    count = 0
    for batch in batches:
        outputs, _ = forward(params, model_cfg, batch, train_mode=False)
        report, _ = compute_losses(outputs, batch, weights, matched_only)
        w = batch.size
        for key in sums:
            sums[key] += getattr(report, key) * w
        correct += int((outputs.itm_logits.argmax(axis=1) == batch.itm_labels).sum())
        count += w
    means = {k: v / count for k, v in sums.items()}
    means["itm_acc"] = correct / count
    return means


def pretrain(train_records, valid_records, vocab: Vocab, model_cfg: ModelConfig,
             optim_cfg: OptimConfig, seed: int, out_dir,
             weights: LossWeights | None = None, matched_only: bool = False,
             max_steps: int | None = None, quiet: bool = True) -> str:
    """Run the full pretraining loop; returns the best checkpoint's path.

    The best checkpoint minimizes valid L_total over all evaluations
    (earliest step on ties, per select_checkpoint). Train/valid logs are
    written as JSON lines next to the checkpoint. ``max_steps`` stops the
    loop early without altering the LR schedule, which is still shaped by
    ``optim_cfg.total_steps``.
    """
    os.makedirs(out_dir, exist_ok=True)
    weights = weights or LossWeights()
    root = np.random.SeedSequence([seed, 0x7A31])
    ss_init, ss_train, ss_drop, ss_valid = root.spawn(4)
    params = init_params(model_cfg, seed)
    state = init_adam_state(params)
    stream = _ExampleStream(train_records, vocab, model_cfg,
                            np.random.default_rng(ss_train))
    drop_rng = np.random.default_rng(ss_drop)
    valid_batches = build_valid_batches(valid_records, vocab, model_cfg,
                                        np.random.default_rng(ss_valid),
                                        optim_cfg.batch_size)

    last_step = optim_cfg.total_steps
    if max_steps is not None:
        last_step = min(max_steps, last_step)
    best_step = -1
    best_loss = math.inf
    best_params = None
    eval_history = []
    train_log = open(os.path.join(out_dir, "train_log.jsonl"), "w", buffering=1)
    valid_log = open(os.path.join(out_dir, "valid_log.jsonl"), "w", buffering=1)
    try:
        for step in range(1, last_step + 1):
            batch = stream.next_batch(optim_cfg.batch_size)
            lr = lr_at(step, optim_cfg)
            outputs, cache = forward(params, model_cfg, batch,
                                     train_mode=True, drop_rng=drop_rng)
            report, (d_itm, d_mlm, d_mim, d_gmlm, d_gmim) = compute_losses(
                outputs, batch, weights, matched_only)
            if not math.isfinite(report.total):
                raise RuntimeError(f"training diverged at step {step}: "
                                   f"total loss {report.total}")
            grads, _ = backward(params, model_cfg, cache, outputs,
                                d_itm, d_mlm, d_mim, d_gmlm, d_gmim)
            if optim_cfg.grad_clip:
                clip_gradients(grads, optim_cfg.grad_clip)
            adamw_step(params, grads, state, lr, optim_cfg)

            if step % optim_cfg.log_every == 0 or step == 1:
                train_log.write(json.dumps({
                    "step": step, "lr": lr, "itm": report.itm, "mlm": report.mlm,
                    "gmlm": report.gmlm, "mim": report.mim, "gmim": report.gmim,
                    "total": report.total,
                    "masked_tokens": report.masked_tokens,
                    "masked_patches": report.masked_patches,
                }) + "\n")
            if step % optim_cfg.eval_every == 0 or step == last_step:
                stats = evaluate(params, model_cfg, valid_batches, weights, matched_only)
                if not math.isfinite(stats["total"]):
                    raise RuntimeError(f"valid loss diverged at step {step}")
                eval_history.append((step, stats["total"]))
                valid_log.write(json.dumps({"step": step, **stats}) + "\n")
                if not quiet:
                    print(f"step {step}: valid total {stats['total']:.4f} "
                          f"itm_acc {stats['itm_acc']:.3f}", flush=True)
                if stats["total"] < best_loss:
                    best_loss = stats["total"]
                    best_step = step
                    best_params = {k: v.copy() for k, v in params.items()}
    finally:
        train_log.close()
        valid_log.close()

    assert best_params is not None
    chosen = select_checkpoint([loss for _, loss in eval_history])
    assert eval_history[chosen][0] == best_step
    path = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(path, best_params, model_cfg,
                    extra={"step": best_step, "valid_total": best_loss,
                           "seed": seed})
    return path


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def _plain_batch(records, vocab, model_cfg, aug_rng=None, train_mode=False):
    """Unmasked matched batch; random crops/flips only when train_mode."""
    def enc(title):
        return encode_title(title, vocab, model_cfg.max_title_len)

    def patch(image):
        img = augment(image, aug_rng, train_mode, model_cfg.image_side)
        return patchify(img, model_cfg.patch_size).patches

    examples = [make_example(r, records, vocab, None, enc, patch, train_mode=False)
                for r in records]
    return make_batch(examples, model_cfg.max_title_len)


def classifier_logits(params, model_cfg, records, vocab, batch_size=64):
    """Eval-mode class logits for records, in order."""
    out = []
    for lo in range(0, len(records), batch_size):
        batch = _plain_batch(records[lo:lo + batch_size], vocab, model_cfg)
        outputs, _ = forward(params, model_cfg, batch, train_mode=False)
        out.append(outputs.h_cls @ params["cls_w"] + params["cls_b"])
    return np.concatenate(out, axis=0)


def classifier_accuracy(params, model_cfg, records, vocab, k=1) -> float:
    """Top-k accuracy of the fine-tuned head on records' leaf categories."""
    logits = classifier_logits(params, model_cfg, records, vocab)
    labels = np.array([r.leaf_category for r in records])
    ranked = np.argsort(-logits, axis=1)[:, :k]
    return float((ranked == labels[:, None]).any(axis=1).mean())


def finetune_classifier(params, model_cfg: ModelConfig, train_records,
                        valid_records, vocab: Vocab, n_classes: int,
                        ft_cfg: FinetuneConfig, seed: int, quiet: bool = True):
    """Fine-tune the encoder plus a linear head over h_cls for leaf labels.

    The head is zero-initialized; every parameter updates under a linear
    warmup/decay schedule peaking at ft_cfg.lr. Returns (best params, best
    epoch, per-epoch valid accuracies); the best epoch maximizes valid
    Acc@1, earliest on ties.
    """
    params = {k: v.copy() for k, v in params.items()}
    params["cls_w"] = np.zeros((model_cfg.hidden_dim, n_classes), dtype=np.float32)
    params["cls_b"] = np.zeros(n_classes, dtype=np.float32)

    steps_per_epoch = math.ceil(len(train_records) / ft_cfg.batch_size)
    total = max(2, steps_per_epoch * ft_cfg.max_epochs)
    sched = OptimConfig(
        peak_lr=ft_cfg.lr,
        warmup_steps=min(max(1, round(ft_cfg.warmup_ratio * total)), total - 1),
        total_steps=total,
        weight_decay=ft_cfg.weight_decay,
        batch_size=ft_cfg.batch_size,
    )
    state = init_adam_state(params)
    ss_order, ss_aug, ss_drop = np.random.SeedSequence([seed, 0xF17E]).spawn(3)
    order_rng = np.random.default_rng(ss_order)
    aug_rng = np.random.default_rng(ss_aug)
    drop_rng = np.random.default_rng(ss_drop)

    step = 0
    best_acc = -1.0
    best_epoch = -1
    best_params = None
    history = []
    for epoch in range(1, ft_cfg.max_epochs + 1):
        order = order_rng.permutation(len(train_records))
        for lo in range(0, len(order), ft_cfg.batch_size):
            chunk = [train_records[i] for i in order[lo:lo + ft_cfg.batch_size]]
            step += 1
            batch = _plain_batch(chunk, vocab, model_cfg, aug_rng, train_mode=True)
            labels = np.array([r.leaf_category for r in chunk], dtype=np.int64)
            outputs, cache = forward(params, model_cfg, batch,
                                     train_mode=True, drop_rng=drop_rng)
            logits = outputs.h_cls @ params["cls_w"] + params["cls_b"]
            loss, dlogits = _ce(logits, labels)
            if not math.isfinite(loss):
                raise RuntimeError(f"fine-tuning diverged at step {step}")
            d_h_cls = dlogits @ params["cls_w"].T
            b = batch.size
            vocab_size = model_cfg.vocab_size
            d_p = model_cfg.patch_dim
            grads, _ = backward(
                params, model_cfg, cache, outputs,
                d_itm=np.zeros((b, 2), dtype=np.float32),
                d_mlm=np.zeros((0, vocab_size), dtype=np.float32),
                d_mim=np.zeros((0, d_p), dtype=np.float32),
                d_gmlm=np.zeros((0, vocab_size), dtype=np.float32),
                d_gmim=np.zeros((0, d_p), dtype=np.float32),
                d_h_cls=d_h_cls)
            grads["cls_w"] += outputs.h_cls.T @ dlogits
            grads["cls_b"] += dlogits.sum(axis=0)
            adamw_step(params, grads, state, lr_at(step, sched), sched)

        acc = classifier_accuracy(params, model_cfg, valid_records, vocab)
        history.append(acc)
        if not quiet:
            print(f"epoch {epoch}: valid acc {acc:.4f}", flush=True)
        if acc > best_acc:
            best_acc = acc
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
    return best_params, best_epoch, history
