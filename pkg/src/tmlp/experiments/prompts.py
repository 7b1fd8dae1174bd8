"""Tab-separated prompt fixtures: factual cloze prompts, transplant pairs, garden-path pairs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from ..tokenizer import BpeVocab, encode


def read_tsv(path: str | Path) -> list[dict[str, str]]:
    """Rows of a header-first TSV; lines starting with ``#`` are comments."""
    with open(path, encoding="utf-8", newline="") as f:
        lines = [line for line in f if not line.startswith("#") and line.strip()]
    return [dict(r) for r in csv.DictReader(lines, delimiter="\t", quoting=csv.QUOTE_NONE)]


def single_token(surface: str, vocab: BpeVocab) -> int | None:
    """Token id of ``" " + surface`` if it is one BPE token, else None."""
    ids = encode(" " + surface, vocab)
    return ids[0] if len(ids) == 1 else None


@dataclass(frozen=True)
class ClozePrompt:
    prompt: str
    target: str
    category: str = ""
    expect: str = ""


def load_cloze(path: str | Path, target_column: str = "target") -> list[ClozePrompt]:
    return [ClozePrompt(r["prompt"], r[target_column], r.get("category") or "", r.get("expect") or "")
            for r in read_tsv(path)]


@dataclass(frozen=True)
class TransplantPair:
    source: str
    destination: str
    fact: str


def load_transplant_pairs(path: str | Path) -> list[TransplantPair]:
    return [TransplantPair(r["source"], r["destination"], r["fact"]) for r in read_tsv(path)]


class PairError(ValueError):
    pass


@dataclass(frozen=True)
class GardenPathPair:
    intransitive: str
    transitive: str
    disambiguation: str
    intransitive_verb: str = ""
    transitive_verb: str = ""

    def __post_init__(self):
        for sentence in (self.intransitive, self.transitive):
            if f" {self.disambiguation} " not in f" {sentence} ":
                raise PairError(f"disambiguation word {self.disambiguation!r} not found in {sentence!r}")


def load_garden_path_pairs(path: str | Path) -> list[GardenPathPair]:
    return [GardenPathPair(r["intransitive"], r["transitive"], r["disambiguation"],
                           r.get("intransitive_verb", ""), r.get("transitive_verb", ""))
            for r in read_tsv(path)]


def disambiguation_position(sentence: str, word: str, vocab: BpeVocab, after: str = "") -> tuple[list[int], int]:
    """Token ids of ``sentence`` and the index of the first BPE piece of ``word``.

    The word is located as the first whole-word occurrence after the substring
    ``after`` (typically the verb).
    """
    start = sentence.find(after) + len(after) if after and after in sentence else 0
    padded = f" {sentence} "
    idx = padded.find(f" {word} ", start)
    if idx < 0:
        raise PairError(f"disambiguation word {word!r} not found in {sentence!r}")
    prefix = sentence[:idx].rstrip(" ")
    ids = encode(sentence, vocab)
    head = encode(prefix, vocab)
    if ids[: len(head)] != head:
        raise PairError(f"tokenization of {sentence!r} does not split cleanly before {word!r}")
    if len(head) == 0:
        raise PairError(f"{word!r} is the first word of {sentence!r}; no preceding context")
    return ids, len(head)
