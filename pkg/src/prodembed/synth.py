"""Synthetic product catalog generator.

Mimics a product-matching benchmark at desk scale: an index set (the search
space) plus a disjoint query set, where each query has a known group of
"same product" matches in the index and everything else in its leaf
category is a distractor. Visual structure lives at 16x16 patch-cell
granularity so patch-level reconstruction objectives have signal; titles
are synthetic space-separated words so subword tokenization is meaningful.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .images import write_ppm, read_ppm

CELL = 16                      # prototype granularity = model patch size
ZIPF_EXPONENT = 1.2
CAP_FACTOR = 5.0               # leaf size cap, x median pre-clip size
CAT_WORDS_PER_LEAF = 2
ATTRS_PER_GROUP = 3
LEAF_ATTR_POOL = 18
FILLER_POOL_SIZE = 64
WORD_LEN = (4, 7)
GROUP_COLOR_DELTA = 40.0       # per-cell offset distinguishing groups in a leaf
PIXEL_NOISE_SCALE = 80.0       # sigma = noise_level * this, on the 0..255 scale

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_KEYS = ("id", "title", "meta_category", "leaf_category", "match_group", "image_path")


@dataclass
class SynthConfig:
    n_meta: int = 5
    n_leaf: int = 40
    n_index_products: int = 5000
    n_queries: int = 100
    matches_per_query: tuple[int, int] = (2, 5)
    image_side: int = 64
    title_len: tuple[int, int] = (8, 14)
    noise_level: float = 0.35
    seed: int = 0
    # Queries are drawn from this fraction of leaf categories (a subset,
    # like real query sets that cover only part of the taxonomy).
    query_leaf_frac: float = 0.5

    def validate(self) -> None:
        if not (self.n_leaf >= self.n_meta >= 1):
            raise ValueError(f"need n_leaf >= n_meta >= 1, got {self.n_leaf}/{self.n_meta}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError(f"noise_level must be in [0,1], got {self.noise_level}")
        if self.image_side % CELL or self.image_side < CELL:
            raise ValueError(f"image_side must be a positive multiple of {CELL}")
        lo, hi = self.matches_per_query
        if not 1 <= lo <= hi:
            raise ValueError(f"bad matches_per_query range {self.matches_per_query}")
        if self.title_len[0] < CAT_WORDS_PER_LEAF + ATTRS_PER_GROUP:
            raise ValueError(f"title_len min must be >= {CAT_WORDS_PER_LEAF + ATTRS_PER_GROUP}")
        if self.title_len[0] > self.title_len[1]:
            raise ValueError(f"bad title_len range {self.title_len}")
        if not 0.0 < self.query_leaf_frac <= 1.0:
            raise ValueError("query_leaf_frac must be in (0,1]")
        if min(self.n_index_products, self.n_queries) < 0:
            raise ValueError("counts must be nonnegative")


@dataclass
class ProductRecord:
    id: str
    image: np.ndarray          # (H, W, 3) uint8
    title: str
    meta_category: int
    leaf_category: int
    match_group: int | None    # None for distractors that match no query

    image_path: str | None = field(default=None, compare=False)


@dataclass
class CatalogSplit:
    train: list[str]
    valid: list[str]
    test: list[str]
    query_dev: list[str] = field(default_factory=list)
    query_test: list[str] = field(default_factory=list)


def _unique_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    out = []
    while len(out) < count:
        n = int(rng.integers(WORD_LEN[0], WORD_LEN[1] + 1))
        word = "".join(letters[rng.integers(0, 26, n)])
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


def _leaf_sizes(rng: np.random.Generator, n_leaf: int, total: int) -> np.ndarray:
    """Zipf-weighted leaf sizes with the largest categories clipped.

    Water-fills: leaves that would exceed cap = CAP_FACTOR x median sit at
    the cap and the rest keep the Zipf shape, rescaled to hit the total.
    """
    ranks = rng.permutation(n_leaf) + 1
    weights = ranks.astype(np.float64) ** -ZIPF_EXPONENT
    sizes = total * weights / weights.sum()
    cap = CAP_FACTOR * float(np.median(sizes))
    if cap * n_leaf < total:
        raise ValueError(f"cannot fit {total} records under leaf cap {cap:.0f}")
    capped = np.zeros(n_leaf, dtype=bool)
    for _ in range(n_leaf):
        free_total = total - cap * capped.sum()
        scale = free_total / weights[~capped].sum()
        sizes = np.where(capped, cap, scale * weights)
        newly = (~capped) & (sizes > cap)
        if not newly.any():
            break
        capped |= newly
    # Integerize by largest remainder, keep every leaf nonempty.
    floor = np.floor(sizes).astype(np.int64)
    floor = np.maximum(floor, 1)
    remainder = sizes - np.floor(sizes)
    deficit = total - int(floor.sum())
    order = np.lexsort((np.arange(n_leaf), -remainder))
    i = 0
    while deficit != 0:
        j = order[i % n_leaf]
        step = 1 if deficit > 0 else -1
        if floor[j] + step >= 1:
            floor[j] += step
            deficit -= step
        i += 1
    return floor


@dataclass
class _GroupPlan:
    leaf: int
    n_index_members: int
    is_query: bool


def _plan_groups(cfg: SynthConfig, rng: np.random.Generator,
                 sizes: np.ndarray) -> list[_GroupPlan]:
    """Round-robin query groups into the eligible leaves, then distractors.

    Queries prefer the sampled query_leaf_frac subset; if that subset runs
    out of capacity the next leaves (in permutation order) become eligible
    too, so the error below fires only when the whole catalog cannot hold
    the requested groups.
    """
    lo, hi = cfg.matches_per_query
    n_eligible = max(1, int(round(cfg.query_leaf_frac * cfg.n_leaf)))
    perm = rng.permutation(cfg.n_leaf).tolist()
    eligible = sorted(perm[:n_eligible])
    overflow = perm[n_eligible:]
    remaining = sizes.copy()
    plans: list[_GroupPlan] = []
    cursor = 0
    for _ in range(cfg.n_queries):
        m = int(rng.integers(lo, hi + 1))
        while True:
            placed = False
            for step in range(len(eligible)):
                leaf = eligible[(cursor + step) % len(eligible)]
                if remaining[leaf] >= m:
                    plans.append(_GroupPlan(leaf=leaf, n_index_members=m, is_query=True))
                    remaining[leaf] -= m
                    cursor = (cursor + step + 1) % len(eligible)
                    placed = True
                    break
            if placed:
                break
            if not overflow:
                raise ValueError(
                    "matches_per_query exceeds remaining group capacity of the "
                    "query-eligible leaf categories"
                )
            eligible.append(overflow.pop(0))
    for leaf in range(cfg.n_leaf):
        plans.extend(_GroupPlan(leaf=leaf, n_index_members=1, is_query=False)
                     for _ in range(int(remaining[leaf])))
    return plans


def generate_catalog(config: SynthConfig) -> tuple[list[ProductRecord], list[ProductRecord]]:
    """Generate (index records, query records), deterministic in config.seed.

    Every leaf has a latent per-cell color prototype and two category words;
    every group overlays a group-specific color offset and owns a set of
    attribute words. Members of a group share prototype, offset and content
    words, differing by pixel noise (driven by noise_level), independently
    drawn filler words and word order. Queries are extra members of their
    group, kept out of the index.
    """
    config.validate()
    root = np.random.SeedSequence([config.seed, 0x5EED])
    rng_plan, rng_word, rng_img, rng_title = [np.random.default_rng(s) for s in root.spawn(4)]

    sizes = _leaf_sizes(rng_plan, config.n_leaf, config.n_index_products)
    plans = _plan_groups(config, rng_plan, sizes)

    taken: set[str] = set()
    cat_words = [_unique_words(rng_word, CAT_WORDS_PER_LEAF, taken) for _ in range(config.n_leaf)]
    attr_pools = [_unique_words(rng_word, LEAF_ATTR_POOL, taken) for _ in range(config.n_leaf)]
    fillers = _unique_words(rng_word, FILLER_POOL_SIZE, taken)

    cells = config.image_side // CELL
    protos = rng_img.uniform(30.0, 225.0, size=(config.n_leaf, cells, cells, 3))

    used_combos: dict[int, set[frozenset]] = {leaf: set() for leaf in range(config.n_leaf)}
    group_attrs: list[list[str]] = []
    group_base: list[np.ndarray] = []
    for plan in plans:
        pool = attr_pools[plan.leaf]
        while True:
            picks = rng_word.permutation(LEAF_ATTR_POOL)[:ATTRS_PER_GROUP]
            combo = frozenset(int(i) for i in picks)
            if combo not in used_combos[plan.leaf]:
                used_combos[plan.leaf].add(combo)
                break
        group_attrs.append([pool[int(i)] for i in sorted(picks)])
        offset = rng_img.uniform(-GROUP_COLOR_DELTA, GROUP_COLOR_DELTA, size=(cells, cells, 3))
        group_base.append(np.clip(protos[plan.leaf] + offset, 0.0, 255.0))

    sigma = config.noise_level * PIXEL_NOISE_SCALE

    def make_image(gid: int) -> np.ndarray:
        img = np.repeat(np.repeat(group_base[gid], CELL, axis=0), CELL, axis=1)
        img = img + rng_img.normal(0.0, sigma, size=img.shape)
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)

    def make_title(gid: int) -> str:
        # Content words (category + attributes) identify the group; fillers
        # are drawn independently per record and the order is shuffled, so
        # titles of one group overlap only in their content words.
        plan = plans[gid]
        n_words = int(rng_title.integers(config.title_len[0], config.title_len[1] + 1))
        n_fill = n_words - CAT_WORDS_PER_LEAF - ATTRS_PER_GROUP
        words = list(cat_words[plan.leaf]) + list(group_attrs[gid])
        words += [fillers[int(i)] for i in rng_title.integers(0, FILLER_POOL_SIZE, n_fill)]
        order = rng_title.permutation(len(words))
        return " ".join(words[int(i)] for i in order)

    index: list[ProductRecord] = []
    queries: list[ProductRecord] = []
    for gid, plan in enumerate(plans):
        group_id = gid if plan.is_query else None
        for _ in range(plan.n_index_members):
            rid = f"i{len(index):06d}"
            index.append(ProductRecord(
                id=rid, image=make_image(gid), title=make_title(gid),
                meta_category=plan.leaf % config.n_meta, leaf_category=plan.leaf,
                match_group=group_id,
            ))
        if plan.is_query:
            qid = f"q{len(queries):04d}"
            queries.append(ProductRecord(
                id=qid, image=make_image(gid), title=make_title(gid),
                meta_category=plan.leaf % config.n_meta, leaf_category=plan.leaf,
                match_group=group_id,
            ))
    return index, queries


def split_index(records: list[ProductRecord], seed: int) -> CatalogSplit:
    """Random 0.90/0.05/0.05 train/valid/test partition of record ids.

    Records are canonically sorted by id before shuffling, so the split
    depends only on the id set and the seed, not on input order.
    """
    if len(records) < 20:
        raise ValueError(f"need at least 20 records to split, got {len(records)}")
    ids = sorted(r.id for r in records)
    n = len(ids)
    n_valid = int(round(0.05 * n))
    n_test = int(round(0.05 * n))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51D1]))
    order = rng.permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = n - n_valid - n_test
    return CatalogSplit(
        train=sorted(shuffled[:n_train]),
        valid=sorted(shuffled[n_train:n_train + n_valid]),
        test=sorted(shuffled[n_train + n_valid:]),
    )


def split_queries(records: list[ProductRecord], seed: int) -> tuple[list[str], list[str]]:
    """Split query ids 2:3 into (dev, test), deterministic in seed."""
    ids = sorted(r.id for r in records)
    n = len(ids)
    n_dev = int(round(0.4 * n))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51D2]))
    order = rng.permutation(n)
    shuffled = [ids[i] for i in order]
    return sorted(shuffled[:n_dev]), sorted(shuffled[n_dev:])


def write_catalog(records: list[ProductRecord], directory) -> str:
    """Write a JSON-lines manifest plus one PPM image per record.

    Returns the manifest path. Key order in each manifest line is fixed:
    id, title, meta_category, leaf_category, match_group, image_path.
    """
    directory = os.fspath(directory)
    image_dir = os.path.join(directory, "images")
    os.makedirs(image_dir, exist_ok=True)
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    partial = manifest_path + ".partial"
    try:
        with open(partial, "w", encoding="utf-8") as fh:
            for rec in records:
                rel = f"images/{rec.id}.ppm"
                write_ppm(os.path.join(directory, rel), rec.image)
                row = {
                    "id": rec.id,
                    "title": rec.title,
                    "meta_category": rec.meta_category,
                    "leaf_category": rec.leaf_category,
                    "match_group": rec.match_group,
                    "image_path": rel,
                }
                fh.write(json.dumps(row) + "\n")
        os.replace(partial, manifest_path)
    except OSError as exc:
        raise OSError(f"catalog write failed at {exc.filename or manifest_path}: {exc}") from exc
    return manifest_path


def read_catalog(manifest_path) -> list[ProductRecord]:
    """Load a manifest and its images back into memory."""
    manifest_path = os.fspath(manifest_path)
    base = os.path.dirname(manifest_path)
    records = []
    with open(manifest_path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            records.append(ProductRecord(
                id=row["id"],
                image=read_ppm(os.path.join(base, row["image_path"])),
                title=row["title"],
                meta_category=row["meta_category"],
                leaf_category=row["leaf_category"],
                match_group=row["match_group"],
                image_path=row["image_path"],
            ))
    return records
