"""Generate tests/data/bpe_reference.jsonl from an independent GPT-2 tokenizer.

Run once; the output is checked in and used as the compatibility oracle.
Requires the `transformers` package (not a runtime dependency).

    python scripts/make_bpe_fixture.py src/tmlp/data/gpt2/vocab.json src/tmlp/data/gpt2/merges.txt
"""

import json
import sys
from pathlib import Path

from transformers import GPT2Tokenizer

TEXTS = [
    "",
    " the",
    "Hello world",
    "Hello, world!",
    "It's a dog's life, isn't it? We're sure they'll say I'd've known.",
    "The speed of light is roughly 300,000 km per second.",
    "In 1969, astronauts landed on the moon.",
    "Water boils at 100 degrees C at sea level.",
    "   leading spaces and trailing spaces   ",
    "tabs\tand\nnewlines\n\n\nhere",
    " = Valkyria Chronicles III = \n",
    " @-@ hyphen @,@ comma @.@ period",
    "naïve café résumé",
    "Ünïcödé ßtraße",
    "日本語のテキスト",
    "中文字符和标点。",
    "emoji 😀🎉 and 👍🏽",
    "mixed123numbers456and789letters",
    "3.14159265358979",
    "$1,234.56 and €78",
    "email@example.com http://example.org/path?q=1",
    "CamelCaseIdentifier snake_case_identifier",
    "def f(x):\n    return x ** 2\n",
    "<b>bold</b> &amp; entities",
    "!!!???...,,,;;;",
    "'s 't 're 've 'm 'll 'd",
    "DON'T SHOUT, IT'S RUDE",
    "O'Neill's O'Brien's",
    "a",
    " ",
    "\n",
    "  \n  ",
    "Supercalifragilisticexpialidocious",
    "antidisestablishmentarianism pneumonoultramicroscopicsilicovolcanoconiosis",
    "The capital of France is",
    "The official language of Germany is",
    "After the dog struggled the vet took off the muzzle.",
    "After the dog scratched the vet took off the muzzle.",
    "Ελληνικά κείμενα",
    "Русский текст",
    "עברית",
    "العربية",
    "ñ ñ ñ",
    "x y z",
    "zero-width​joiner",
    "1st 2nd 3rd 4th",
    "Mr. Smith went to Washington in the 1930s.",
    "  multiple   internal    spaces",
    "End of paragraph.\n\nStart of the next one.",
    "Linus Torvalds created Linux in 1991.",
]


def main(vocab_path, merges_path, out="tests/data/bpe_reference.jsonl"):
    tok = GPT2Tokenizer(vocab_path, merges_path)
    assert len(TEXTS) == 50
    with open(out, "w", encoding="utf-8") as f:
        for text in TEXTS:
            ids = tok.encode(text) if text else []
            f.write(json.dumps({"text": text, "ids": ids}, ensure_ascii=False) + "\n")
    print(f"wrote {len(TEXTS)} reference tokenizations to {Path(out)}")


if __name__ == "__main__":
    main(*sys.argv[1:])
