"""The five pretraining losses and their weighted combination.

Weights follow the reference setting: ITM 1.0, MLM/GMLM 0.1, MIM/GMIM 0.01.
The masked-reconstruction losses normalize by the batch-level masked count
(zero masked positions => loss 0). The patch losses average the *summed*
squared L2 distance per patch, not the per-element mean: with 768-dim
patches in [0, 1] this puts 0.01 * L_MIM on the same scale as the
cross-entropy terms at initialization, which is the stated purpose of the
weights. All components also expose the gradients the trainer feeds into
the model backward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .masking import TrainingBatch
from .model import ModelOutputs


@dataclass
class LossWeights:
    itm: float = 1.0
    mlm: float = 0.1
    gmlm: float = 0.1
    mim: float = 0.01
    gmim: float = 0.01

    def __post_init__(self):
        if min(self.itm, self.mlm, self.gmlm, self.mim, self.gmim) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    itm: float
    mlm: float
    gmlm: float
    mim: float
    gmim: float
    total: float
    masked_tokens: int
    masked_patches: int

    def to_json(self, **extra) -> str:
        rec = dict(extra)
        rec.update(itm=self.itm, mlm=self.mlm, gmlm=self.gmlm, mim=self.mim,
                   gmim=self.gmim, total=self.total,
                   masked_tokens=self.masked_tokens,
                   masked_patches=self.masked_patches)
        return json.dumps(rec)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softmax(logits):
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _ce(logits, targets, keep=None):
    """Mean cross-entropy over kept rows; returns (loss, dlogits_unweighted).

    dlogits is the gradient of the *mean* loss, already divided by the kept
    count, with dropped rows zeroed.
    """
    n = logits.shape[0]
    if keep is None:
        keep = np.ones(n, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = float(-(logp[rows, targets] * keep).sum() / count)
    dlogits = _softmax(logits)
    dlogits[rows, targets] -= 1.0
    dlogits *= (keep / count)[:, None]
    return loss, dlogits


def _l2(recon, targets, keep=None):
    """Mean over kept rows of the summed squared L2 distance per row."""
    n = recon.shape[0]
    if keep is None:
        keep = np.ones(n, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        return 0.0, np.zeros_like(recon)
    diff = (recon - targets.astype(recon.dtype, copy=False))
    diff *= keep[:, None]
    loss = float((diff * diff).sum() / count)
    return loss, (2.0 / count) * diff


def itm_loss(logits, labels) -> float:
    loss, _ = _ce(logits, np.asarray(labels))
    return loss


def mlm_loss(logits, target_ids) -> float:
    loss, _ = _ce(logits, np.asarray(target_ids))
    return loss


def gmlm_loss(logits, target_ids) -> float:
    return mlm_loss(logits, target_ids)


def mim_loss(recon, target_patches) -> float:
    loss, _ = _l2(recon, np.asarray(target_patches))
    return loss


def gmim_loss(recon, target_patches) -> float:
    return mim_loss(recon, target_patches)


def total_loss(components, weights: LossWeights) -> float:
    """Weighted sum; components ordered (itm, mlm, gmlm, mim, gmim)."""
    itm, mlm, gmlm, mim, gmim = components
    return (weights.itm * itm + weights.mlm * mlm + weights.gmlm * gmlm
            + weights.mim * mim + weights.gmim * gmim)


def compute_losses(outputs: ModelOutputs, batch: TrainingBatch,
                   weights: LossWeights | None = None,
                   matched_only: bool = False):
    """All five losses plus head-output gradients of the weighted total.

    With matched_only, the masked-reconstruction losses skip examples whose
    title was swapped in as an ITM negative (the heads would otherwise be
    asked to reconstruct content of a mismatched pair).

    Returns (LossReport, (d_itm, d_mlm, d_mim, d_gmlm, d_gmim)).
    """
    weights = weights or LossWeights()
    tok_keep = pat_keep = None
    if matched_only:
        tok_keep = batch.itm_labels[batch.tok_t_ex] == 1
        pat_keep = batch.itm_labels[batch.pat_t_ex] == 1

    l_itm, d_itm = _ce(outputs.itm_logits, batch.itm_labels)
    l_mlm, d_mlm = _ce(outputs.mlm_logits, batch.tok_t_id, tok_keep)
    l_gmlm, d_gmlm = _ce(outputs.gmlm_logits, batch.tok_t_id, tok_keep)
    l_mim, d_mim = _l2(outputs.mim_recon, batch.pat_t_vec, pat_keep)
    l_gmim, d_gmim = _l2(outputs.gmim_recon, batch.pat_t_vec, pat_keep)

    report = LossReport(
        itm=l_itm, mlm=l_mlm, gmlm=l_gmlm, mim=l_mim, gmim=l_gmim,
        total=total_loss((l_itm, l_mlm, l_gmlm, l_mim, l_gmim), weights),
        masked_tokens=int(batch.tok_t_id.shape[0]),
        masked_patches=int(batch.pat_t_vec.shape[0]),
    )
    grads = (weights.itm * d_itm, weights.mlm * d_mlm, weights.mim * d_mim,
             weights.gmlm * d_gmlm, weights.gmim * d_gmim)
    return report, grads
