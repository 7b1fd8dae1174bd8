import itertools
import json
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from tmlp.tokenizer import N_VOCAB, VocabError, bytes_to_unicode, decode, encode, iter_encode, load_vocab

REFERENCE = Path(__file__).parent / "data" / "bpe_reference.jsonl"


def reference_cases():
    with open(REFERENCE, encoding="utf-8") as f:
        return [json.loads(line) for line in f]


def test_vocab_size(vocab):
    assert len(vocab.token_to_bytes) == N_VOCAB
    assert len(vocab.merges) == 50_000


def test_byte_encoder_is_a_bijection_onto_printables():
    table = bytes_to_unicode()
    assert sorted(table) == list(range(256))
    assert len(set(table.values())) == 256
    assert all(c.isprintable() and not c.isspace() for c in table.values())


@pytest.mark.parametrize("case", reference_cases(), ids=lambda c: c["text"][:24])
def test_matches_reference_tokenizer(vocab, case):
    # ids frozen from an independent GPT-2 tokenizer implementation
    assert encode(case["text"], vocab) == case["ids"]


def test_reference_fixture_size():
    assert len(reference_cases()) == 50


@pytest.mark.parametrize("text,ids", [
    ("Hello world", [15496, 995]),
    (" the", [262]),
    ("\n\n", [628]),
    ("", []),
])
def test_known_encodings(vocab, text, ids):
    assert encode(text, vocab) == ids


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=60))
def test_round_trip(vocab, text):
    assert decode(encode(text, vocab), vocab) == text


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=80), st.integers(0, 40))
def test_lazy_encoding_prefix(vocab, text, k):
    assert list(itertools.islice(iter_encode(text, vocab), k)) == encode(text, vocab)[:k]


def test_decode_rejects_out_of_range(vocab):
    with pytest.raises(ValueError):
        decode([N_VOCAB], vocab)
    with pytest.raises(ValueError):
        decode([-1], vocab)


def test_decode_invalid_utf8_is_replaced(vocab):
    # a lone continuation byte
    lone = next(i for i, b in enumerate(vocab.token_to_bytes) if b == b"\x80")
    assert decode([lone], vocab) == "�"


def test_malformed_merges(tmp_path, vocab):
    merges = tmp_path / "merges.txt"
    merges.write_text("#version: 0.2\nab\n", encoding="utf-8")
    from tmlp.experiments.context import bundled

    with pytest.raises(VocabError):
        load_vocab(bundled("gpt2/vocab.json"), merges)


def test_vocab_missing_token(tmp_path):
    (tmp_path / "vocab.json").write_text(json.dumps({"a": 0, "b": 2}), encoding="utf-8")
    (tmp_path / "merges.txt").write_text("#version: 0.2\n", encoding="utf-8")
    with pytest.raises(VocabError):
        load_vocab(tmp_path / "vocab.json", tmp_path / "merges.txt")
