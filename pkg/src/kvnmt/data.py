"""Vocabulary, corpus and alignment I/O, batching, synthetic tasks.

Corpus files are UTF-8, one whitespace-tokenized sentence per line, with
source and target files line-aligned. Alignments use the Pharaoh "i-j"
format, 0-based, one sentence per line. Vocabulary files have one
"token<TAB>count" line per entry in id order, reserved entries first.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, ParseError

log = logging.getLogger(__name__)

PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<s>", "</s>", "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


class Vocabulary:
    """Token table with fixed reserved ids 0..3 (pad, bos, eos, unk)."""

    def __init__(self, words: list[str], counts: list[int] | None = None):
        if counts is None:
            counts = [0] * len(words)
        self._tokens = list(RESERVED_TOKENS) + list(words)
        self._counts = [0, 0, 0, 0] + list(counts)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ParseError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def count_of(self, idx: int) -> int:
        return self._counts[idx]

    @classmethod
    def build(cls, sentences, max_size: int) -> "Vocabulary":
        """Most frequent tokens, ties broken by first occurrence order."""
        if max_size <= len(RESERVED_TOKENS):
            raise ValueError(f"max_size must exceed {len(RESERVED_TOKENS)}")
        counts: Counter[str] = Counter()
        first_seen: dict[str, int] = {}
        n_sent = 0
        for sent in sentences:
            n_sent += 1
            for tok in sent:
                counts[tok] += 1
                if tok not in first_seen:
                    first_seen[tok] = len(first_seen)
        if n_sent == 0:
            raise EmptyInputError("cannot build a vocabulary from an empty corpus")
        ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
        keep = ranked[: max_size - len(RESERVED_TOKENS)]
        return cls(keep, [counts[t] for t in keep])

    def encode(self, tokens) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def decode(self, ids, skip_reserved: bool = True) -> list[str]:
        toks = [self._tokens[i] for i in ids]
        if skip_reserved:
            toks = [t for t in toks if t not in RESERVED_TOKENS]
        return toks

    def entries(self) -> list[tuple[str, int]]:
        return list(zip(self._tokens, self._counts))

    @classmethod
    def from_entries(cls, entries) -> "Vocabulary":
        entries = list(entries)
        head = tuple(tok for tok, _ in entries[:4])
        if head != RESERVED_TOKENS:
            raise ParseError(f"vocabulary must start with {RESERVED_TOKENS}, got {head}")
        return cls([t for t, _ in entries[4:]], [c for _, c in entries[4:]])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok, cnt in self.entries():
                f.write(f"{tok}\t{cnt}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        entries = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ParseError(f"{path}:{lineno}: expected 'token<TAB>count'")
                try:
                    entries.append((parts[0], int(parts[1])))
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad count {parts[1]!r}") from None
        return cls.from_entries(entries)


def build_vocab(sentences, max_size: int) -> Vocabulary:
    return Vocabulary.build(sentences, max_size)


def encode_sentence(vocab: Vocabulary, tokens) -> np.ndarray:
    """Token ids with the end-of-sentence id appended."""
    return np.asarray(vocab.encode(tokens) + [EOS_ID], dtype=np.int64)


@dataclass
class AlignedPair:
    src: list[str]
    trg: list[str]
    links: set[tuple[int, int]] | None = None


@dataclass
class Batch:
    """Padded id matrices plus boolean masks covering the non-pad cells."""

    src: np.ndarray       # (batch, n) int64
    trg: np.ndarray       # (batch, m) int64
    src_mask: np.ndarray  # (batch, n) bool
    trg_mask: np.ndarray  # (batch, m) bool

    @property
    def size(self) -> int:
        return self.src.shape[0]


def _pad_block(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def make_batches(id_pairs, batch_size: int, max_len: int, seed: int) -> list[Batch]:
    """Length-bucketed, seed-shuffled batches of encoded pairs.

    ``max_len`` caps the token count per side, not counting the trailing
    end-of-sentence id; longer pairs are dropped and the count logged.
    Bucketing sorts by length before chunking so padding stays small, then
    the chunk order is shuffled.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pairs = list(id_pairs)
    kept = [(s, t) for s, t in pairs
            if len(s) - 1 <= max_len and len(t) - 1 <= max_len]
    dropped = len(pairs) - len(kept)
    if dropped:
        log.info("dropped %d over-length pairs (max_len=%d)", dropped, max_len)
    if not kept:
        log.warning("no pairs under max_len=%d, produced zero batches", max_len)
        return []
    order = sorted(range(len(kept)), key=lambda i: (len(kept[i][0]), len(kept[i][1]), i))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    np.random.default_rng(seed).shuffle(chunks)
    batches = []
    for chunk in chunks:
        src, src_mask = _pad_block([kept[i][0] for i in chunk])
        trg, trg_mask = _pad_block([kept[i][1] for i in chunk])
        batches.append(Batch(src=src, trg=trg, src_mask=src_mask, trg_mask=trg_mask))
    return batches


def _word(i: int) -> str:
    return f"w{i}"


def gen_copy_task(vocab_size: int, max_len: int, count: int, seed: int,
                  min_len: int = 1) -> list[AlignedPair]:
    """Random sentences copied verbatim; gold alignment is the identity."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        length = int(rng.integers(min_len, max_len + 1))
        toks = [_word(int(i)) for i in rng.integers(0, vocab_size, size=length)]
        pairs.append(AlignedPair(src=list(toks), trg=list(toks),
                                 links={(i, i) for i in range(length)}))
    return pairs


def gen_lexical_task(vocab_size: int, max_len: int, count: int, seed: int,
                     invert: bool = False, min_len: int = 1) -> list[AlignedPair]:
    """Word-for-word translation under a fixed random bijection.

    Target token i is the mapped source token at position i, or at the
    mirrored position when ``invert`` is on; gold links follow suit.
    """
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    rng = np.random.default_rng(seed)
    mapping = rng.permutation(vocab_size)
    pairs = []
    for _ in range(count):
        length = int(rng.integers(min_len, max_len + 1))
        src_idx = rng.integers(0, vocab_size, size=length)
        pos = list(range(length - 1, -1, -1)) if invert else list(range(length))
        trg = [_word(int(mapping[src_idx[p]])) for p in pos]
        links = {(p, i) for i, p in enumerate(pos)}
        pairs.append(AlignedPair(src=[_word(int(i)) for i in src_idx],
                                 trg=trg, links=links))
    return pairs


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def read_corpus(src_path, trg_path, align_path=None) -> list[AlignedPair]:
    with open(src_path, encoding="utf-8") as f:
        src_lines = [line.rstrip("\n").split() for line in f]
    with open(trg_path, encoding="utf-8") as f:
        trg_lines = [line.rstrip("\n").split() for line in f]
    if len(src_lines) != len(trg_lines):
        raise ParseError(
            f"{src_path} has {len(src_lines)} lines but {trg_path} has {len(trg_lines)}"
        )
    links: list[set | None] = [None] * len(src_lines)
    if align_path is not None:
        parsed = read_alignments(align_path)
        if len(parsed) != len(src_lines):
            raise ParseError(f"{align_path} has {len(parsed)} lines, corpus has {len(src_lines)}")
        links = list(parsed)
    return [AlignedPair(s, t, a) for s, t, a in zip(src_lines, trg_lines, links)]


def write_corpus(pairs, src_path, trg_path, align_path=None) -> None:
    with open(src_path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(" ".join(p.src) + "\n")
    with open(trg_path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(" ".join(p.trg) + "\n")
    if align_path is not None:
        write_alignments([p.links or set() for p in pairs], align_path)


def read_alignments(path) -> list[set[tuple[int, int]]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            links = set()
            for tok in line.split():
                left, sep, right = tok.partition("-")
                if not sep or not left.isdigit() or not right.isdigit():
                    raise ParseError(f"{path}:{lineno}: bad link {tok!r}")
                links.add((int(left), int(right)))
            out.append(links)
    return out


def write_alignments(link_sets, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for links in link_sets:
            f.write(" ".join(f"{i}-{j}" for i, j in sorted(links)) + "\n")
