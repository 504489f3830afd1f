"""Embedding extraction, exact max-fusion search, and retrieval metrics.

Each product gets three unit-normalized embeddings (global [CLS], mean text
slot, mean vision slot). A query-index pair is scored by the maximum of the
three cosine similarities; search is exact over the whole index with
lexicographic id tie-breaking, so results are reproducible bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .masking import eval_batch
from .model import ModelConfig, extract_embeddings, forward

NORM_EPS = 1e-12
STORE_MAGIC = "emb-v1"


@dataclass(frozen=True)
class EmbeddingTriple:
    global_vec: np.ndarray
    text_vec: np.ndarray
    vision_vec: np.ndarray


@dataclass(frozen=True)
class EmbeddingIndex:
    """Row-aligned id list plus three unit-norm embedding matrices."""

    ids: tuple
    globals: np.ndarray
    texts: np.ndarray
    visions: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        for mat in (self.globals, self.texts, self.visions):
            if mat.shape[0] != n:
                raise ValueError("embedding rows misaligned with ids")
            if not np.isfinite(mat).all():
                raise ValueError("non-finite embedding values")
            mat.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.globals.shape[1]

    def triple(self, row: int) -> EmbeddingTriple:
        return EmbeddingTriple(self.globals[row], self.texts[row], self.visions[row])


def l2_normalize(mat: np.ndarray) -> np.ndarray:
    norms = np.sqrt((mat * mat).sum(axis=-1, keepdims=True))
    return mat / np.maximum(norms, NORM_EPS)


def build_index(ids, globals_, texts, visions) -> EmbeddingIndex:
    return EmbeddingIndex(
        ids=tuple(str(i) for i in ids),
        globals=l2_normalize(np.asarray(globals_, dtype=np.float32)),
        texts=l2_normalize(np.asarray(texts, dtype=np.float32)),
        visions=l2_normalize(np.asarray(visions, dtype=np.float32)),
    )


def embed_catalog(records, params, model_cfg: ModelConfig, vocab,
                  batch_size: int = 64) -> EmbeddingIndex:
    """Embed records in eval mode (resize only, no masking, own titles)."""
    gs, ts, vs = [], [], []
    for lo in range(0, len(records), batch_size):
        batch = eval_batch(records[lo:lo + batch_size], vocab,
                           model_cfg.image_side, model_cfg.patch_size,
                           model_cfg.max_title_len)
        outputs, _ = forward(params, model_cfg, batch, train_mode=False)
        g, t, v = extract_embeddings(outputs.hidden, batch, model_cfg)
        gs.append(g)
        ts.append(t)
        vs.append(v)
    return build_index([r.id for r in records],
                       np.concatenate(gs), np.concatenate(ts), np.concatenate(vs))


def pair_score(query: EmbeddingTriple, item: EmbeddingTriple) -> float:
    """Max fusion: the best of global/text/vision cosine similarities."""
    return float(max(query.global_vec @ item.global_vec,
                     query.text_vec @ item.text_vec,
                     query.vision_vec @ item.vision_vec))


def fused_scores(query: EmbeddingTriple, index: EmbeddingIndex) -> np.ndarray:
    """pair_score against every index row at once."""
    s = index.globals @ query.global_vec
    np.maximum(s, index.texts @ query.text_vec, out=s)
    np.maximum(s, index.visions @ query.vision_vec, out=s)
    return s


def topk(query: EmbeddingTriple, index: EmbeddingIndex, k: int = 10):
    """Exact top-k by fused score; ties broken by lexicographic id.

    Returns (ids list, scores list), scores non-increasing.
    """
    scores = fused_scores(query, index)
    ids = np.array(index.ids)
    order = np.lexsort((ids, -scores))[:max(k, 0)]
    return [str(ids[i]) for i in order], [float(scores[i]) for i in order]


@dataclass
class QueryResult:
    query_id: str
    ranked_ids: list
    scores: list
    relevant: frozenset


@dataclass
class RetrievalRun:
    results: list  # of QueryResult

    def __iter__(self):
        return iter(self.results)

    def __len__(self):
        return len(self.results)


def run_queries(query_records, query_index: EmbeddingIndex,
                index: EmbeddingIndex, relevance: dict, k: int = 10) -> RetrievalRun:
    """Score every query against the index; relevance maps qid -> id set."""
    results = []
    for row, rec in enumerate(query_records):
        ids, scores = topk(query_index.triple(row), index, k)
        results.append(QueryResult(
            query_id=rec.id, ranked_ids=ids, scores=scores,
            relevant=frozenset(relevance.get(rec.id, ()))))
    return RetrievalRun(results)


def mar_at_k(run: RetrievalRun, k: int = 10) -> float:
    """Macro-average recall: mean over queries of |top-k ∩ rel| / |rel|."""
    recalls = []
    for res in run:
        if not res.relevant:
            raise ValueError(f"query {res.query_id} has an empty relevance set")
        hit = len(set(res.ranked_ids[:k]) & res.relevant)
        recalls.append(hit / len(res.relevant))
    return float(np.mean(recalls)) if recalls else 0.0


def map_at_k(run: RetrievalRun, k: int = 10) -> float:
    """Mean average precision with denominator min(k, |relevant|)."""
    aps = []
    for res in run:
        if not res.relevant:
            raise ValueError(f"query {res.query_id} has an empty relevance set")
        hits = 0
        precision_sum = 0.0
        for rank, rid in enumerate(res.ranked_ids[:k], start=1):
            if rid in res.relevant:
                hits += 1
                precision_sum += hits / rank
        aps.append(precision_sum / min(k, len(res.relevant)))
    return float(np.mean(aps)) if aps else 0.0


def acc_at_k(logits: np.ndarray, labels, k: int = 1) -> float:
    """Fraction of rows whose true label is among the top-k logits."""
    labels = np.asarray(labels)
    ranked = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float((ranked == labels[:, None]).any(axis=1).mean())


# ---------------------------------------------------------------------------
# embedding store and reports
# ---------------------------------------------------------------------------

def save_index(path, index: EmbeddingIndex) -> None:
    """emb-v1 store: header, id table, then global/text/vision f32 blocks."""
    path = os.fspath(path)
    partial = path + ".partial"
    with open(partial, "wb") as fh:
        fh.write(f"{STORE_MAGIC} {len(index.ids)} {index.dim}\n".encode("utf-8"))
        for rid in index.ids:
            fh.write((rid + "\n").encode("utf-8"))
        for mat in (index.globals, index.texts, index.visions):
            fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    os.replace(partial, path)


def load_index(path) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8").split()
        if len(header) != 3 or header[0] != STORE_MAGIC:
            raise ValueError(f"bad embedding store header in {path}")
        count, dim = int(header[1]), int(header[2])
        ids = [fh.readline().decode("utf-8").rstrip("\n") for _ in range(count)]
        mats = []
        for _ in range(3):
            buf = fh.read(count * dim * 4)
            if len(buf) != count * dim * 4:
                raise ValueError(f"truncated embedding block in {path}")
            mats.append(np.frombuffer(buf, dtype="<f4").reshape(count, dim).copy())
    return EmbeddingIndex(ids=tuple(ids), globals=mats[0], texts=mats[1], visions=mats[2])


def format_table(headers, rows) -> str:
    """Right-aligned plain-text table; rows are sequences of strings."""
    cells = [list(map(str, headers))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[c]) for row in cells) for c in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(s.rjust(w) for s, w in zip(row, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def metrics_report(metrics: dict, k: int) -> tuple[str, str]:
    """(JSON object, aligned table) over {split: {metric: value}} input."""
    splits = list(metrics)
    names = sorted({m for split in metrics.values() for m in split})
    rows = [[name] + [f"{metrics[s].get(name, float('nan')):.4f}" for s in splits]
            for name in names]
    table = format_table(["metric"] + splits, rows)
    payload = json.dumps({"k": k, "metrics": metrics}, sort_keys=True)
    return payload, table
