"""prodembed: single-stream image-title product embeddings.

A compact, numpy-only study of joint vision-language pretraining for
product search: synthetic catalog generation, BPE tokenization, a
transformer encoder trained with five objectives (ITM, MLM, MIM, and their
global-representation variants GMLM/GMIM), and exact max-fusion retrieval
with MAR@k / MAP@k / Acc@k evaluation.
"""

from .bpe import Vocab, encode_title, load_vocab, save_vocab, train_bpe
from .images import PatchSequence, PpmParseError, patchify, read_ppm, unpatchify, write_ppm
from .masking import TrainingBatch, TrainingExample, make_batch, make_example
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .objectives import LossReport, LossWeights, compute_losses, total_loss
from .retrieval import (EmbeddingIndex, EmbeddingTriple, acc_at_k, embed_catalog,
                        map_at_k, mar_at_k, pair_score, topk)
from .synth import CatalogSplit, ProductRecord, SynthConfig, generate_catalog
from .trainer import FinetuneConfig, OptimConfig, adamw_step, lr_at, pretrain

__version__ = "0.1.0"

__all__ = [
    "CatalogSplit", "EmbeddingIndex", "EmbeddingTriple", "FinetuneConfig",
    "LossReport", "LossWeights", "ModelConfig", "OptimConfig", "PatchSequence",
    "PpmParseError", "ProductRecord", "SynthConfig", "TrainingBatch",
    "TrainingExample", "Vocab", "acc_at_k", "adamw_step", "compute_losses",
    "embed_catalog", "encode_title", "forward", "generate_catalog",
    "init_params", "load_checkpoint", "load_vocab", "lr_at", "make_batch",
    "make_example", "map_at_k", "mar_at_k", "pair_score", "patchify",
    "pretrain", "read_ppm", "save_checkpoint", "save_vocab", "topk",
    "total_loss", "train_bpe", "unpatchify", "write_ppm",
]
