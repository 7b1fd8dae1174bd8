"""Byte-level BPE compatible with the published GPT-2 vocabulary.

Text is first split by the GPT-2 pre-tokenizer pattern::

    's|'t|'re|'ve|'m|'ll|'d| ?\\p{L}+| ?\\p{N}+| ?[^\\s\\p{L}\\p{N}]+|\\s+(?!\\S)|\\s+

i.e. English contractions, an optional leading space plus a letter run, an
optional leading space plus a number run, an optional leading space plus a run
of "other" characters, whitespace not followed by a non-space (so the last
space before a word attaches to that word), and any remaining whitespace.
Each piece is UTF-8 encoded, every byte mapped to a printable code point via
the 256-entry byte encoder, and merges are applied lowest rank first until no
ranked pair remains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator
from pathlib import Path

import regex

N_VOCAB = 50257

PRETOKENIZE_PATTERN = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)


class VocabError(ValueError):
    pass


def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable character table used by GPT-2.

    Printable Latin-1 bytes map to themselves; the remaining 68 bytes map to
    code points 256 and upward, in byte order.
    """
    printable = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    codepoints = printable[:]
    extra = 0
    for b in range(256):
        if b not in printable:
            printable.append(b)
            codepoints.append(256 + extra)
            extra += 1
    return {b: chr(c) for b, c in zip(printable, codepoints)}


@dataclass(frozen=True)
class BpeVocab:
    token_to_bytes: tuple[bytes, ...]
    merges: tuple[tuple[str, str], ...]
    byte_encoder: dict[int, str] = field(default_factory=bytes_to_unicode)

    def __post_init__(self):
        if len(self.token_to_bytes) != N_VOCAB:
            raise VocabError(f"expected {N_VOCAB} tokens, got {len(self.token_to_bytes)}")
        if len(set(self.merges)) != len(self.merges):
            raise VocabError("duplicate merge rule")
        if len(self.byte_encoder) != 256:
            raise VocabError("byte encoder must cover all 256 bytes")
        byte_decoder = {c: b for b, c in self.byte_encoder.items()}
        encoder = {}
        for i, raw in enumerate(self.token_to_bytes):
            encoder["".join(self.byte_encoder[b] for b in raw)] = i
        object.__setattr__(self, "_byte_decoder", byte_decoder)
        object.__setattr__(self, "_encoder", encoder)
        object.__setattr__(self, "_ranks", {pair: r for r, pair in enumerate(self.merges)})
        object.__setattr__(self, "_bpe", lru_cache(maxsize=65536)(self._bpe_uncached))

    def __hash__(self):
        return id(self)

    @property
    def encoder(self) -> dict[str, int]:
        return self._encoder

    def token_id(self, surface: str) -> int:
        """Id of the single token spelled ``surface`` (e.g. ``" the"``)."""
        key = "".join(self.byte_encoder[b] for b in surface.encode("utf-8"))
        try:
            return self._encoder[key]
        except KeyError:
            raise KeyError(f"{surface!r} is not a single token") from None

    def _bpe_uncached(self, piece: str) -> tuple[str, ...]:
        word = list(piece)
        ranks = self._ranks
        while len(word) > 1:
            best = None
            best_rank = None
            for pair in zip(word, word[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            first, second = best
            merged = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = merged
        return tuple(word)


def load_vocab(vocab_path: str | Path, merges_path: str | Path) -> BpeVocab:
    """Read ``vocab.json`` (token -> id) and ``merges.txt`` (rank = line order)."""
    with open(vocab_path, encoding="utf-8") as f:
        token_to_id = json.load(f)
    byte_encoder = bytes_to_unicode()
    byte_decoder = {c: b for b, c in byte_encoder.items()}
    ids = sorted(token_to_id.values())
    if ids != list(range(len(ids))):
        raise VocabError("token ids must be contiguous from 0")
    table: list[bytes] = [b""] * len(ids)
    for token, i in token_to_id.items():
        try:
            table[i] = bytes(byte_decoder[c] for c in token)
        except KeyError as e:
            raise VocabError(f"token {token!r} contains a character outside the byte table") from e

    merges = []
    with open(merges_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            line = line.rstrip("\n")
            if lineno == 0 and line.startswith("#version"):
                continue
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise VocabError(f"{merges_path}:{lineno + 1}: malformed merge {line!r}")
            merges.append((parts[0], parts[1]))
    return BpeVocab(tuple(table), tuple(merges), byte_encoder)


def encode(text: str, vocab: BpeVocab) -> list[int]:
    return list(iter_encode(text, vocab))


def iter_encode(text: str, vocab: BpeVocab) -> Iterator[int]:
    """Lazy ``encode``: pre-tokenizer matches are consumed on demand."""
    enc = vocab.byte_encoder
    for m in PRETOKENIZE_PATTERN.finditer(text):
        mapped = "".join(enc[b] for b in m.group().encode("utf-8"))
        for tok in vocab._bpe(mapped):
            yield vocab.encoder[tok]


def decode(ids, vocab: BpeVocab) -> str:
    out = bytearray()
    for i in ids:
        i = int(i)
        if not 0 <= i < N_VOCAB:
            raise ValueError(f"token id {i} out of range [0, {N_VOCAB})")
        out += vocab.token_to_bytes[i]
    return out.decode("utf-8", errors="replace")
