"""Single-stream image-title encoder with five pretraining heads.

One bidirectional transformer consumes [CLS], projected image patches, a
[SEP], title tokens and a final [SEP]. On top of the shared encoder sit:

  - itm : 2-way matched/mismatched classifier on the [CLS] state
  - mlm : masked-token prediction from each masked slot's own state
  - mim : masked-patch regression from each masked slot's own state
  - gmlm: masked-token prediction from ([CLS] state, position embedding)
  - gmim: masked-patch regression from ([CLS] state, position embedding)

The g-heads see the encoder only through the [CLS] slot, which is what
forces the global representation to absorb both modalities. Forward and
backward passes are written out explicitly in numpy; gradients are checked
against central finite differences in the verification module.

Parameters live in a flat name->array dict. The MLM/GMLM output projection
is the token embedding table itself (tied storage).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

from .bpe import CLS, SEP
from .masking import TrainingBatch

LN_EPS = 1e-5
ATTN_NEG = -1e9
INIT_STD = 0.02
CHECKPOINT_MAGIC = "item-v1"


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 4
    hidden_dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    max_title_len: int = 36
    image_side: int = 224
    patch_size: int = 16
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.image_side % self.patch_size:
            raise ValueError("image_side must be divisible by patch_size")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def seq_capacity(self) -> int:
        # [CLS] + patches + [SEP] + title + [SEP]
        return 1 + self.n_patches + 1 + self.max_title_len + 1

    @classmethod
    def bert_base(cls, vocab_size: int) -> "ModelConfig":
        return cls(vocab_size=vocab_size, layers=12, hidden_dim=768, heads=12, ffn_dim=3072)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Initialize all learnable tensors (normal 0.02 weights, zero biases)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1217]))
    h, f, v = cfg.hidden_dim, cfg.ffn_dim, cfg.vocab_size
    d_p = cfg.patch_dim

    def w(*shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    def ones(*shape):
        return np.ones(shape, dtype=dtype)

    params: dict[str, np.ndarray] = {
        "token_emb": w(v, h),
        "patch_proj_w": w(d_p, h),
        "patch_proj_b": zeros(h),
        "mask_bias": zeros(h),
        "pos_emb": w(cfg.seq_capacity, h),
        "type_emb": w(2, h),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        params[p + "ln1_g"] = ones(h)
        params[p + "ln1_b"] = zeros(h)
        params[p + "attn_q_w"] = w(h, h)
        params[p + "attn_q_b"] = zeros(h)
        params[p + "attn_k_w"] = w(h, h)
        params[p + "attn_k_b"] = zeros(h)
        params[p + "attn_v_w"] = w(h, h)
        params[p + "attn_v_b"] = zeros(h)
        params[p + "attn_o_w"] = w(h, h)
        params[p + "attn_o_b"] = zeros(h)
        params[p + "ln2_g"] = ones(h)
        params[p + "ln2_b"] = zeros(h)
        params[p + "ffn_w1"] = w(h, f)
        params[p + "ffn_b1"] = zeros(f)
        params[p + "ffn_w2"] = w(f, h)
        params[p + "ffn_b2"] = zeros(h)
    params.update({
        "final_ln_g": ones(h),
        "final_ln_b": zeros(h),
        "itm_w": w(h, 2),
        "itm_b": zeros(2),
        "mlm_fc_w": w(h, h),
        "mlm_fc_b": zeros(h),
        "mlm_ln_g": ones(h),
        "mlm_ln_b": zeros(h),
        "mlm_out_b": zeros(v),
        "mim_w": w(h, d_p),
        "mim_b": zeros(d_p),
        "f_w1": w(2 * h, h),
        "f_b1": zeros(h),
        "f_ln1_g": ones(h),
        "f_ln1_b": zeros(h),
        "f_w2": w(h, h),
        "f_b2": zeros(h),
        "f_ln2_g": ones(h),
        "f_ln2_b": zeros(h),
        "g_w1": w(2 * h, h),
        "g_b1": zeros(h),
        "g_ln1_g": ones(h),
        "g_ln1_b": zeros(h),
        "g_w2": w(h, h),
        "g_b2": zeros(h),
        "g_ln2_g": ones(h),
        "g_ln2_b": zeros(h),
    })
    return params


def decayable(name: str) -> bool:
    """Weight decay applies to matrices and embeddings, not biases/LN terms."""
    return not (name.endswith("_b") or name.endswith("_g") or name == "mask_bias")


# ---------------------------------------------------------------------------
# primitive ops with explicit backward rules
# ---------------------------------------------------------------------------

INV_SQRT2 = 1.0 / math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * INV_SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x * INV_SQRT2)) + x * np.exp(-0.5 * x * x) * INV_SQRT_2PI


def layernorm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return gain * xhat + bias, (xhat, inv)


def layernorm_backward(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbias = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _dropout(x, p, train_mode, rng):
    if not train_mode or p <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep, keep


def _dropout_backward(dy, keep):
    return dy if keep is None else dy * keep


def _linear(x2d, w, b):
    return x2d @ w + b


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class ModelOutputs:
    hidden: np.ndarray        # (B, S, H) final-layer states
    h_cls: np.ndarray         # (B, H)
    itm_logits: np.ndarray    # (B, 2)
    mlm_logits: np.ndarray    # (M, V)
    mim_recon: np.ndarray     # (Mp, D_p)
    gmlm_logits: np.ndarray   # (M, V)
    gmim_recon: np.ndarray    # (Mp, D_p)


@dataclass
class _Cache:
    batch: TrainingBatch
    tok_grid: np.ndarray
    type_vec: np.ndarray
    attn_valid: np.ndarray
    embed_drop: object
    layer_caches: list
    final_ln: tuple
    pre_final: np.ndarray
    tok_slots: np.ndarray
    pat_slots: np.ndarray
    x_mlm: np.ndarray
    mlm_t1: np.ndarray
    mlm_t3: np.ndarray
    mlm_ln: tuple
    x_mim: np.ndarray
    f_cache: tuple
    g_cache: tuple
    f_out: np.ndarray
    g_out: np.ndarray


def sequence_layout(cfg: ModelConfig, title_len: int):
    """Slot indices for a batch padded to title_len tokens."""
    n_p = cfg.n_patches
    s = 1 + n_p + 1 + title_len + 1
    return {
        "seq_len": s,
        "cls": 0,
        "patch_start": 1,
        "sep1": 1 + n_p,
        "token_start": 2 + n_p,
        "sep2": s - 1,
    }


def embed_inputs(params, cfg: ModelConfig, batch: TrainingBatch,
                 train_mode=False, drop_rng=None):
    """Assemble the input sequence: content + position + modality embeddings.

    Zero-placeholder patches additionally receive the learned mask bias.
    Returns (embedded (B,S,H), tok_grid, type_vec, attn_valid, dropout keep).
    """
    b, t = batch.token_ids.shape
    n_p = batch.n_patches
    lay = sequence_layout(cfg, t)
    s = lay["seq_len"]
    if s > cfg.seq_capacity:
        raise ValueError(f"sequence length {s} exceeds capacity {cfg.seq_capacity}")
    dtype = params["token_emb"].dtype

    tok_grid = np.full((b, s), -1, dtype=np.int64)
    tok_grid[:, lay["cls"]] = CLS
    tok_grid[:, lay["sep1"]] = SEP
    tok_grid[:, lay["token_start"]:lay["token_start"] + t] = batch.token_ids
    tok_grid[:, lay["sep2"]] = SEP

    type_vec = np.zeros(s, dtype=np.int64)
    type_vec[lay["token_start"]:] = 1

    attn_valid = np.ones((b, s), dtype=bool)
    attn_valid[:, lay["token_start"]:lay["token_start"] + t] = batch.token_valid

    x = params["token_emb"][np.where(tok_grid >= 0, tok_grid, 0)].copy()
    patch_content = batch.patches.astype(dtype, copy=False) @ params["patch_proj_w"]
    patch_content += params["patch_proj_b"]
    patch_content += batch.patch_replaced[:, :, None] * params["mask_bias"]
    x[:, lay["patch_start"]:lay["patch_start"] + n_p] = patch_content
    x += params["pos_emb"][:s]
    x += params["type_emb"][type_vec]
    x, keep = _dropout(x, cfg.dropout, train_mode, drop_rng)
    return x, tok_grid, type_vec, attn_valid, keep


def _attention_block(params, prefix, cfg, x0, attn_valid, train_mode, drop_rng):
    b, s, h = x0.shape
    nh, dh = cfg.heads, cfg.hidden_dim // cfg.heads
    scale = 1.0 / math.sqrt(dh)

    a_ln, ln1 = layernorm(x0, params[prefix + "ln1_g"], params[prefix + "ln1_b"])
    flat = a_ln.reshape(b * s, h)
    q = _linear(flat, params[prefix + "attn_q_w"], params[prefix + "attn_q_b"])
    k = _linear(flat, params[prefix + "attn_k_w"], params[prefix + "attn_k_b"])
    v = _linear(flat, params[prefix + "attn_v_w"], params[prefix + "attn_v_b"])
    q = q.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)
    k = k.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)
    v = v.reshape(b, s, nh, dh).transpose(0, 2, 1, 3)

    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores = scores + np.where(attn_valid, 0.0, ATTN_NEG)[:, None, None, :]
    probs = softmax(scores)
    probs_d, keep_p = _dropout(probs, cfg.dropout, train_mode, drop_rng)
    ctx = (probs_d @ v).transpose(0, 2, 1, 3).reshape(b * s, h)
    attn = _linear(ctx, params[prefix + "attn_o_w"], params[prefix + "attn_o_b"])
    attn_d, keep_a = _dropout(attn.reshape(b, s, h), cfg.dropout, train_mode, drop_rng)
    x1 = x0 + attn_d

    f_ln, ln2 = layernorm(x1, params[prefix + "ln2_g"], params[prefix + "ln2_b"])
    h1 = _linear(f_ln.reshape(b * s, h), params[prefix + "ffn_w1"], params[prefix + "ffn_b1"])
    hg = gelu(h1)
    out = _linear(hg, params[prefix + "ffn_w2"], params[prefix + "ffn_b2"])
    out_d, keep_f = _dropout(out.reshape(b, s, h), cfg.dropout, train_mode, drop_rng)
    x2 = x1 + out_d

    cache = (x0, ln1, a_ln, q, k, v, probs, probs_d, keep_p, ctx, keep_a,
             x1, ln2, f_ln, h1, hg, keep_f)
    return x2, cache


def _attention_block_backward(params, prefix, cfg, dx2, cache, grads):
    (x0, ln1, a_ln, q, k, v, probs, probs_d, keep_p, ctx, keep_a,
     x1, ln2, f_ln, h1, hg, keep_f) = cache
    b, s, h = x0.shape
    nh, dh = cfg.heads, cfg.hidden_dim // cfg.heads
    scale = 1.0 / math.sqrt(dh)

    dout = _dropout_backward(dx2, keep_f).reshape(b * s, h)
    grads[prefix + "ffn_w2"] += hg.T @ dout
    grads[prefix + "ffn_b2"] += dout.sum(axis=0)
    dhg = dout @ params[prefix + "ffn_w2"].T
    dh1 = dhg * gelu_grad(h1)
    f_ln2d = f_ln.reshape(b * s, h)
    grads[prefix + "ffn_w1"] += f_ln2d.T @ dh1
    grads[prefix + "ffn_b1"] += dh1.sum(axis=0)
    df_ln = (dh1 @ params[prefix + "ffn_w1"].T).reshape(b, s, h)
    dx1_ln, dg, db = layernorm_backward(df_ln, params[prefix + "ln2_g"], ln2)
    grads[prefix + "ln2_g"] += dg
    grads[prefix + "ln2_b"] += db
    dx1 = dx2 + dx1_ln

    dattn = _dropout_backward(dx1, keep_a).reshape(b * s, h)
    grads[prefix + "attn_o_w"] += ctx.T @ dattn
    grads[prefix + "attn_o_b"] += dattn.sum(axis=0)
    dctx = (dattn @ params[prefix + "attn_o_w"].T).reshape(b, s, nh, dh).transpose(0, 2, 1, 3)
    dprobs_d = dctx @ v.transpose(0, 1, 3, 2)
    dv = probs_d.transpose(0, 1, 3, 2) @ dctx
    dprobs = _dropout_backward(dprobs_d, keep_p)
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dq = (dscores @ k) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ q) * scale

    def merge(heads_arr):
        return heads_arr.transpose(0, 2, 1, 3).reshape(b * s, h)

    dq2d, dk2d, dv2d = merge(dq), merge(dk), merge(dv)
    a_ln2d = a_ln.reshape(b * s, h)
    grads[prefix + "attn_q_w"] += a_ln2d.T @ dq2d
    grads[prefix + "attn_q_b"] += dq2d.sum(axis=0)
    grads[prefix + "attn_k_w"] += a_ln2d.T @ dk2d
    grads[prefix + "attn_k_b"] += dk2d.sum(axis=0)
    grads[prefix + "attn_v_w"] += a_ln2d.T @ dv2d
    grads[prefix + "attn_v_b"] += dv2d.sum(axis=0)
    da_ln = (dq2d @ params[prefix + "attn_q_w"].T
             + dk2d @ params[prefix + "attn_k_w"].T
             + dv2d @ params[prefix + "attn_v_w"].T).reshape(b, s, h)
    dx0_ln, dg, db = layernorm_backward(da_ln, params[prefix + "ln1_g"], ln1)
    grads[prefix + "ln1_g"] += dg
    grads[prefix + "ln1_b"] += db
    return dx1 + dx0_ln


def _two_layer_head(params, prefix, inp):
    """The f/g network: two (FC + GeLU + LayerNorm) stages, 2H -> H -> H."""
    z1 = inp @ params[prefix + "_w1"] + params[prefix + "_b1"]
    z1g = gelu(z1)
    z1n, ln1 = layernorm(z1g, params[prefix + "_ln1_g"], params[prefix + "_ln1_b"])
    z2 = z1n @ params[prefix + "_w2"] + params[prefix + "_b2"]
    z2g = gelu(z2)
    z2n, ln2 = layernorm(z2g, params[prefix + "_ln2_g"], params[prefix + "_ln2_b"])
    return z2n, (inp, z1, z1n, ln1, z2, ln2)


def _two_layer_head_backward(params, prefix, dz2n, cache, grads):
    inp, z1, z1n, ln1, z2, ln2 = cache
    dz2g, dg, db = layernorm_backward(dz2n, params[prefix + "_ln2_g"], ln2)
    grads[prefix + "_ln2_g"] += dg
    grads[prefix + "_ln2_b"] += db
    dz2 = dz2g * gelu_grad(z2)
    grads[prefix + "_w2"] += z1n.T @ dz2
    grads[prefix + "_b2"] += dz2.sum(axis=0)
    dz1n = dz2 @ params[prefix + "_w2"].T
    dz1g, dg, db = layernorm_backward(dz1n, params[prefix + "_ln1_g"], ln1)
    grads[prefix + "_ln1_g"] += dg
    grads[prefix + "_ln1_b"] += db
    dz1 = dz1g * gelu_grad(z1)
    grads[prefix + "_w1"] += inp.T @ dz1
    grads[prefix + "_b1"] += dz1.sum(axis=0)
    return dz1 @ params[prefix + "_w1"].T


def forward(params, cfg: ModelConfig, batch: TrainingBatch,
            train_mode=False, drop_rng=None):
    """Full forward pass; returns (ModelOutputs, cache for backward)."""
    x, tok_grid, type_vec, attn_valid, embed_drop = embed_inputs(
        params, cfg, batch, train_mode, drop_rng)
    layer_caches = []
    for i in range(cfg.layers):
        x, cache = _attention_block(params, f"layer{i}.", cfg, x, attn_valid,
                                    train_mode, drop_rng)
        layer_caches.append(cache)
    pre_final = x
    hidden, final_ln = layernorm(x, params["final_ln_g"], params["final_ln_b"])
    h_cls = hidden[:, 0]

    lay = sequence_layout(cfg, batch.title_len)
    tok_slots = lay["token_start"] + batch.tok_t_pos
    pat_slots = lay["patch_start"] + batch.pat_t_pos

    itm_logits = h_cls @ params["itm_w"] + params["itm_b"]

    x_mlm = hidden[batch.tok_t_ex, tok_slots]
    t1 = x_mlm @ params["mlm_fc_w"] + params["mlm_fc_b"]
    t2 = gelu(t1)
    t3, mlm_ln = layernorm(t2, params["mlm_ln_g"], params["mlm_ln_b"])
    mlm_logits = t3 @ params["token_emb"].T + params["mlm_out_b"]

    x_mim = hidden[batch.pat_t_ex, pat_slots]
    mim_recon = x_mim @ params["mim_w"] + params["mim_b"]

    gmlm_in = np.concatenate([h_cls[batch.tok_t_ex], params["pos_emb"][tok_slots]], axis=1)
    f_out, f_cache = _two_layer_head(params, "f", gmlm_in)
    gmlm_logits = f_out @ params["token_emb"].T + params["mlm_out_b"]

    gmim_in = np.concatenate([h_cls[batch.pat_t_ex], params["pos_emb"][pat_slots]], axis=1)
    g_out, g_cache = _two_layer_head(params, "g", gmim_in)
    gmim_recon = g_out @ params["mim_w"] + params["mim_b"]

    outputs = ModelOutputs(
        hidden=hidden, h_cls=h_cls, itm_logits=itm_logits,
        mlm_logits=mlm_logits, mim_recon=mim_recon,
        gmlm_logits=gmlm_logits, gmim_recon=gmim_recon,
    )
    cache = _Cache(
        batch=batch, tok_grid=tok_grid, type_vec=type_vec, attn_valid=attn_valid,
        embed_drop=embed_drop, layer_caches=layer_caches, final_ln=final_ln,
        pre_final=pre_final, tok_slots=tok_slots, pat_slots=pat_slots,
        x_mlm=x_mlm, mlm_t1=t1, mlm_t3=t3, mlm_ln=mlm_ln, x_mim=x_mim,
        f_cache=f_cache, g_cache=g_cache, f_out=f_out, g_out=g_out,
    )
    return outputs, cache


def backward(params, cfg: ModelConfig, cache: _Cache, outputs: ModelOutputs,
             d_itm, d_mlm, d_mim, d_gmlm, d_gmim, d_h_cls=None,
             want_hidden_grad=False):
    """Backpropagate head-output gradients to every parameter.

    The d_* arguments are gradients of the scalar loss with respect to the
    respective head outputs; d_h_cls optionally injects an extra gradient
    directly into the [CLS] state (used by task heads such as the
    fine-tuning classifier). Returns (grads dict, dH) where dH (the gradient
    reaching the final hidden states, before encoder backprop) is only
    populated when want_hidden_grad is set.
    """
    batch = cache.batch
    hidden = outputs.hidden
    b, s, h = hidden.shape
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    d_hidden = np.zeros_like(hidden)
    dh_cls = np.zeros_like(outputs.h_cls)
    if d_h_cls is not None:
        dh_cls += d_h_cls

    # itm
    dh_cls += d_itm @ params["itm_w"].T
    grads["itm_w"] += outputs.h_cls.T @ d_itm
    grads["itm_b"] += d_itm.sum(axis=0)

    # mlm: transform then tied projection
    grads["mlm_out_b"] += d_mlm.sum(axis=0)
    grads["token_emb"] += d_mlm.T @ cache.mlm_t3
    dt3 = d_mlm @ params["token_emb"]
    dt2, dg, db = layernorm_backward(dt3, params["mlm_ln_g"], cache.mlm_ln)
    grads["mlm_ln_g"] += dg
    grads["mlm_ln_b"] += db
    dt1 = dt2 * gelu_grad(cache.mlm_t1)
    grads["mlm_fc_w"] += cache.x_mlm.T @ dt1
    grads["mlm_fc_b"] += dt1.sum(axis=0)
    dx_mlm = dt1 @ params["mlm_fc_w"].T
    np.add.at(d_hidden, (batch.tok_t_ex, cache.tok_slots), dx_mlm)

    # mim
    grads["mim_w"] += cache.x_mim.T @ d_mim
    grads["mim_b"] += d_mim.sum(axis=0)
    dx_mim = d_mim @ params["mim_w"].T
    np.add.at(d_hidden, (batch.pat_t_ex, cache.pat_slots), dx_mim)

    # gmlm: f network fed by (h_cls, position embedding) only
    grads["mlm_out_b"] += d_gmlm.sum(axis=0)
    grads["token_emb"] += d_gmlm.T @ cache.f_out
    df_out = d_gmlm @ params["token_emb"]
    dgmlm_in = _two_layer_head_backward(params, "f", df_out, cache.f_cache, grads)
    np.add.at(dh_cls, batch.tok_t_ex, dgmlm_in[:, :h])
    np.add.at(grads["pos_emb"], cache.tok_slots, dgmlm_in[:, h:])

    # gmim: g network, shared output projection with mim
    grads["mim_w"] += cache.g_out.T @ d_gmim
    grads["mim_b"] += d_gmim.sum(axis=0)
    dg_out = d_gmim @ params["mim_w"].T
    dgmim_in = _two_layer_head_backward(params, "g", dg_out, cache.g_cache, grads)
    np.add.at(dh_cls, batch.pat_t_ex, dgmim_in[:, :h])
    np.add.at(grads["pos_emb"], cache.pat_slots, dgmim_in[:, h:])

    d_hidden[:, 0] += dh_cls
    hidden_grad = d_hidden.copy() if want_hidden_grad else None

    # encoder backward
    dx, dg, db = layernorm_backward(d_hidden, params["final_ln_g"], cache.final_ln)
    grads["final_ln_g"] += dg
    grads["final_ln_b"] += db
    for i in reversed(range(cfg.layers)):
        dx = _attention_block_backward(params, f"layer{i}.", cfg, dx,
                                       cache.layer_caches[i], grads)

    # embedding backward
    dx = _dropout_backward(dx, cache.embed_drop)
    grads["pos_emb"][:s] += dx.sum(axis=0)
    np.add.at(grads["type_emb"], cache.type_vec, dx.sum(axis=0))
    sel = cache.tok_grid >= 0
    np.add.at(grads["token_emb"], cache.tok_grid[sel], dx[sel])
    n_p = batch.n_patches
    dpc = dx[:, 1:1 + n_p]
    dtype = params["token_emb"].dtype
    patches = batch.patches.astype(dtype, copy=False)
    grads["patch_proj_w"] += np.einsum("bpd,bph->dh", patches, dpc)
    grads["patch_proj_b"] += dpc.sum(axis=(0, 1))
    grads["mask_bias"] += dpc[batch.patch_replaced].sum(axis=0)
    return grads, hidden_grad


def extract_embeddings(hidden: np.ndarray, batch: TrainingBatch, cfg: ModelConfig):
    """(global, text, vision) per example, all hidden_dim wide.

    global is the [CLS] state; text averages non-pad title token slots (zero
    vector for empty titles); vision averages all patch slots.
    """
    lay = sequence_layout(cfg, batch.title_len)
    n_p = batch.n_patches
    global_emb = hidden[:, lay["cls"]].copy()
    vision = hidden[:, lay["patch_start"]:lay["patch_start"] + n_p].mean(axis=1)
    tok = hidden[:, lay["token_start"]:lay["token_start"] + batch.title_len]
    valid = batch.token_valid[:, :, None].astype(hidden.dtype)
    counts = np.maximum(valid.sum(axis=1), 1.0)
    text = (tok * valid).sum(axis=1) / counts
    return global_emb, text, vision


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, np.ndarray], cfg: ModelConfig,
                    extra: dict | None = None) -> None:
    """item-v1 container: text header + config/extra JSON + tensor directory,
    then named float32 blocks (little-endian, row-major) in directory order."""
    directory = [[name, list(arr.shape)] for name, arr in params.items()]
    path = os.fspath(path)
    partial = path + ".partial"
    with open(partial, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode("utf-8"))
        fh.write((json.dumps({"config": asdict(cfg), "extra": extra or {}}) + "\n").encode("utf-8"))
        fh.write((json.dumps(directory) + "\n").encode("utf-8"))
        for _, arr in params.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(partial, path)


def load_checkpoint(path):
    """Returns (params, ModelConfig, extra)."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode("utf-8").strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {os.fspath(path)}")
        meta = json.loads(fh.readline().decode("utf-8"))
        directory = json.loads(fh.readline().decode("utf-8"))
        params = {}
        for name, shape in directory:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * 4)
            if len(buf) != n * 4:
                raise ValueError(f"truncated tensor block {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
    cfg = ModelConfig(**meta["config"])
    return params, cfg, meta.get("extra", {})
