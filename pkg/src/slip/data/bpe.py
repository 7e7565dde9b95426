"""Byte-level byte-pair encoding.

Token ids: 0..255 are raw bytes, 256/257/258 are BOS/EOS/PAD, merges follow
from 259 in rank order.  Every string encodes (byte fallback) and decodes
back to itself, modulo the optional lowercasing.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from ..errors import ConfigError, DataError

BOS, EOS, PAD = 256, 257, 258
NUM_BASE = 256
NUM_SPECIAL = 3
FIRST_MERGE_ID = NUM_BASE + NUM_SPECIAL

# Splits text into word-like pieces; the final catch-all guarantees the pieces cover the input.
_PRETOKENIZE = re.compile(r"'(?:s|t|re|ve|m|ll|d)| ?[^\W\d_]+| ?\d+| ?[^\s\w]+|\s+(?!\S)|\s+|[\s\S]")

Pair = tuple[bytes, bytes]


def pretokenize(text: str) -> list[str]:
    return _PRETOKENIZE.findall(text)


def _to_bytes(piece: str) -> bytes:
    return piece.encode("utf-8", errors="surrogatepass")


@dataclass
class TokenSequence:
    ids: np.ndarray
    eos_position: int

    @property
    def context_length(self) -> int:
        return len(self.ids)


@dataclass
class BpeVocab:
    """Ordered merge list plus the derived token tables."""

    merges: list[Pair]
    lowercase: bool = True
    _ranks: dict[Pair, int] = field(init=False, repr=False)
    _token_bytes: list[bytes] = field(init=False, repr=False)
    _ids: dict[bytes, int] = field(init=False, repr=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._token_bytes = [bytes([b]) for b in range(NUM_BASE)] + [b""] * NUM_SPECIAL
        self._token_bytes += [a + b for a, b in self.merges]
        self._ids = {}
        for i, tok in enumerate(self._token_bytes):
            if tok and tok not in self._ids:
                self._ids[tok] = i
        self._cache = {}

    def __len__(self) -> int:
        return FIRST_MERGE_ID + len(self.merges)

    bos_id = BOS
    eos_id = EOS
    pad_id = PAD

    def token_bytes(self, idx: int) -> bytes:
        return self._token_bytes[idx]

    def _encode_piece(self, piece: str) -> tuple[int, ...]:
        cached = self._cache.get(piece)
        if cached is not None:
            return cached
        parts = [bytes([b]) for b in _to_bytes(piece)]
        while len(parts) > 1:
            best, best_rank = None, None
            for pair in zip(parts, parts[1:]):
                r = self._ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and (parts[i], parts[i + 1]) == best:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        out = tuple(self._ids[p] for p in parts)
        if len(self._cache) < 100_000:
            self._cache[piece] = out
        return out

    def encode_ids(self, text: str) -> list[int]:
        """Token ids for ``text`` without specials or truncation."""
        if self.lowercase:
            text = text.lower()
        ids: list[int] = []
        for piece in pretokenize(text):
            ids.extend(self._encode_piece(piece))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Concatenate token bytes, skipping BOS/EOS/PAD."""
        buf = b"".join(self._token_bytes[int(i)] for i in ids if not NUM_BASE <= int(i) < FIRST_MERGE_ID)
        return buf.decode("utf-8", errors="surrogatepass") if _valid(buf) else buf.decode("utf-8", errors="replace")

    # -- persistence ---------------------------------------------------
    def save(self, path: Union[str, Path]) -> None:
        enc = _bytes_to_unicode()
        lines = [f"#slip-bpe v1 lowercase={int(self.lowercase)} specials=bos:{BOS},eos:{EOS},pad:{PAD}"]
        for a, b in self.merges:
            lines.append("".join(enc[x] for x in a) + " " + "".join(enc[x] for x in b))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "BpeVocab":
        dec = {c: b for b, c in _bytes_to_unicode().items()}
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#slip-bpe v1"):
            raise DataError(f"{path}: not a slip BPE vocab file")
        header = dict(kv.split("=", 1) for kv in lines[0].split()[2:])
        merges = []
        for n, line in enumerate(lines[1:], start=2):
            try:
                a, b = line.split(" ")
                merges.append((bytes(dec[c] for c in a), bytes(dec[c] for c in b)))
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path}:{n}: malformed merge line {line!r}") from exc
        return cls(merges, lowercase=header.get("lowercase", "1") == "1")


def _valid(buf: bytes) -> bool:
    try:
        buf.decode("utf-8", errors="surrogatepass")
        return True
    except UnicodeDecodeError:
        return False


def _bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable character table (no whitespace)."""
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    table, extra = {}, 0
    for b in range(256):
        if b in keep:
            table[b] = chr(b)
        else:
            table[b] = chr(256 + extra)
            extra += 1
    return table


def _pair_counts(words: dict[tuple[bytes, ...], int]) -> Counter:
    counts: Counter = Counter()
    for word, freq in words.items():
        for pair in zip(word, word[1:]):
            counts[pair] += freq
    return counts


def bpe_train(corpus: Sequence[str], target_vocab_size: int, lowercase: bool = True) -> BpeVocab:
    """Greedy most-frequent-pair merging; ties go to the lexicographically smallest pair.

    Stops early if the corpus runs out of adjacent pairs.
    """
    min_size = FIRST_MERGE_ID
    if target_vocab_size < min_size:
        raise ConfigError(f"target_vocab_size {target_vocab_size} < {min_size} (256 bytes + 3 specials)")
    if not corpus:
        raise ConfigError("cannot train BPE on an empty corpus")
    counts: Counter = Counter()
    for text in corpus:
        if lowercase:
            text = text.lower()
        counts.update(pretokenize(text))
    words = {tuple(bytes([b]) for b in _to_bytes(w)): c for w, c in counts.items()}

    merges: list[Pair] = []
    for _ in range(target_vocab_size - min_size):
        pairs = _pair_counts(words)
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        joined = best[0] + best[1]
        new_words = {}
        for word, freq in words.items():
            if len(word) < 2:
                new_words[word] = new_words.get(word, 0) + freq
                continue
            out, i = [], 0
            while i < len(word):
                if i + 1 < len(word) and word[i] == best[0] and word[i + 1] == best[1]:
                    out.append(joined)
                    i += 2
                else:
                    out.append(word[i])
                    i += 1
            key = tuple(out)
            new_words[key] = new_words.get(key, 0) + freq
        words = new_words
    return BpeVocab(merges, lowercase=lowercase)


def bpe_encode(text: str, vocab: BpeVocab, context_length: int = 77) -> TokenSequence:
    """``[BOS, tokens..., EOS, PAD...]`` of exactly ``context_length`` ids."""
    if context_length < 3:
        raise ConfigError("context_length must be >= 3")
    body = vocab.encode_ids(text)[: context_length - 2]
    ids = np.full(context_length, PAD, dtype=np.int64)
    ids[0] = BOS
    ids[1 : 1 + len(body)] = body
    eos = 1 + len(body)
    ids[eos] = EOS
    return TokenSequence(ids, eos)


def bpe_decode(seq: Union[TokenSequence, Sequence[int]], vocab: BpeVocab) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    return vocab.decode(ids)


def stack_tokens(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Batch of sequences -> (``B x L`` ids, ``B`` EOS positions)."""
    return np.stack([s.ids for s in seqs]), np.array([s.eos_position for s in seqs], dtype=np.int64)
