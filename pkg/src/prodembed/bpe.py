"""Byte-pair-encoding vocabulary: training, encoding and serialization.

Titles are lowercased and whitespace pre-tokenized; the end-of-word marker
``</w>`` is fused onto each word's final character, so word boundaries
survive the merge process and decoding restores whitespace-normalized text.
"""

from __future__ import annotations

import collections
import os
from dataclasses import dataclass, field

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
WORD_END = "</w>"
MAX_TITLE_LEN = 36


@dataclass
class Vocab:
    """A trained BPE vocabulary.

    ids are dense in [0, size): specials occupy 0-4, then base symbols in
    sorted order, then merge products in merge order. ``undersized`` is set
    when the corpus ran out of pairs before reaching the requested size.
    """

    merges: list[tuple[str, str]]
    token_to_id: dict[str, int]
    undersized: bool = False
    id_to_token: dict[int, str] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.id_to_token:
            self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def n_specials(self) -> int:
        return len(SPECIAL_TOKENS)


def _word_symbols(word: str) -> tuple[str, ...]:
    """Split a word into base symbols, fusing the end marker onto the last char."""
    chars = list(word)
    chars[-1] = chars[-1] + WORD_END
    return tuple(chars)


def _pretokenize(text: str) -> list[str]:
    return text.lower().split()


def train_bpe(corpus, target_size: int) -> Vocab:
    """Train a BPE vocabulary on an iterable of titles.

    Greedy most-frequent-pair merging; ties broken by lexicographic pair
    order. Deterministic for a fixed corpus. If the corpus exhausts its
    mergeable pairs before ``target_size`` tokens exist, the smaller vocab
    is returned with ``undersized=True``.
    """
    word_freq = collections.Counter()
    for title in corpus:
        for word in _pretokenize(title):
            word_freq[_word_symbols(word)] += 1
    if not word_freq:
        raise ValueError("empty corpus")
    base = sorted({sym for word in word_freq for sym in word})
    floor_size = len(SPECIAL_TOKENS) + len(base)
    if target_size < floor_size + 1:
        raise ValueError(
            f"target_size {target_size} must exceed base symbols + specials = {floor_size}"
        )

    words = {w: list(w) for w in word_freq}
    merges: list[tuple[str, str]] = []
    size = floor_size
    while size < target_size:
        pair_freq = collections.Counter()
        for w, syms in words.items():
            f = word_freq[w]
            for a, b in zip(syms, syms[1:]):
                pair_freq[(a, b)] += f
        if not pair_freq:
            break
        best_count = max(pair_freq.values())
        best = min(p for p, c in pair_freq.items() if c == best_count)
        merges.append(best)
        merged = best[0] + best[1]
        for syms in words.values():
            _apply_merge(syms, best, merged)
        size += 1

    token_to_id = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
    for sym in base:
        token_to_id[sym] = len(token_to_id)
    for a, b in merges:
        token_to_id[a + b] = len(token_to_id)
    return Vocab(merges=merges, token_to_id=token_to_id, undersized=size < target_size)


def _apply_merge(syms: list[str], pair: tuple[str, str], merged: str) -> None:
    i = 0
    while i < len(syms) - 1:
        if syms[i] == pair[0] and syms[i + 1] == pair[1]:
            syms[i:i + 2] = [merged]
        else:
            i += 1


def encode_title(title: str, vocab: Vocab, max_len: int = MAX_TITLE_LEN) -> list[int]:
    """Encode a title to token ids, applying merges in training order.

    Out-of-alphabet symbols map to UNK; output is truncated to max_len.
    """
    ids: list[int] = []
    for word in _pretokenize(title):
        syms = list(_word_symbols(word))
        for pair in vocab.merges:
            _apply_merge(syms, pair, pair[0] + pair[1])
        for sym in syms:
            ids.append(vocab.token_to_id.get(sym, UNK))
        if len(ids) >= max_len:
            break
    return ids[:max_len]


def decode(ids, vocab: Vocab) -> str:
    """Inverse of encode_title modulo truncation and UNK substitution."""
    parts = []
    for i in ids:
        tok = vocab.id_to_token.get(int(i), SPECIAL_TOKENS[UNK])
        if tok in SPECIAL_TOKENS:
            tok = SPECIAL_TOKENS[UNK] + WORD_END if tok == SPECIAL_TOKENS[UNK] else ""
        parts.append(tok)
    return "".join(parts).replace(WORD_END, " ").strip()


def save_vocab(path, vocab: Vocab) -> None:
    """Serialize as UTF-8 text: ``bpe-v1 <size>`` header, merges, id table.

    Written to a .partial file first so interrupted runs leave no
    plausible-looking output behind.
    """
    path = os.fspath(path)
    partial = path + ".partial"
    with open(partial, "w", encoding="utf-8") as fh:
        fh.write(f"bpe-v1 {vocab.size}\n")
        fh.write(f"#merges {len(vocab.merges)}{' undersized' if vocab.undersized else ''}\n")
        for a, b in vocab.merges:
            fh.write(f"{a} {b}\n")
        fh.write(f"#tokens {vocab.size}\n")
        for tok, i in sorted(vocab.token_to_id.items(), key=lambda kv: kv[1]):
            fh.write(f"{tok} {i}\n")
    os.replace(partial, path)


def load_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != "bpe-v1":
            raise ValueError(f"bad vocab header {header!r}")
        size = int(header[1])
        mline = fh.readline().split()
        n_merges = int(mline[1])
        undersized = "undersized" in mline
        merges = []
        for _ in range(n_merges):
            a, b = fh.readline().rstrip("\n").split(" ")
            merges.append((a, b))
        fh.readline()  # "#tokens" marker
        token_to_id = {}
        for _ in range(size):
            tok, i = fh.readline().rstrip("\n").rsplit(" ", 1)
            token_to_id[tok] = int(i)
    return Vocab(merges=merges, token_to_id=token_to_id, undersized=undersized)
