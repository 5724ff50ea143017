"""Closed caption vocabulary and whitespace tokenizer."""
from __future__ import annotations

from functools import lru_cache
from importlib import resources

import numpy as np

from ..errors import ParseError, VocabularyError
from ..microvlm import CLS_ID, MASK_ID, PAD_ID

PAD, CLS, MASK = "[PAD]", "[CLS]", "[MASK]"


def parse_vocab(text: str) -> dict[str, int]:
    table: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1].strip().isdigit():
            raise ParseError("expected 'word<TAB>id'", f"line {lineno}")
        word, idx = parts[0], int(parts[1])
        if word in table or idx in table.values():
            raise ParseError(f"duplicate entry {word!r}", f"line {lineno}")
        table[word] = idx
    if (table.get(PAD), table.get(CLS), table.get(MASK)) != (PAD_ID, CLS_ID, MASK_ID):
        raise ParseError("special tokens must map to PAD=0, CLS=1, MASK=2", "vocabulary")
    return table


@lru_cache(maxsize=None)
def default_vocab() -> dict[str, int]:
    text = resources.files(__package__).joinpath("vocab.tsv").read_text(encoding="utf-8")
    return parse_vocab(text)


def load_vocab(path) -> dict[str, int]:
    with open(path, encoding="utf-8") as fh:
        return parse_vocab(fh.read())


def tokenize(caption: str, max_len: int = 12, vocab: dict[str, int] | None = None) -> np.ndarray:
    """``[CLS] w1 ... wk [PAD]...`` as ``max_len + 1`` int64 ids."""
    vocab = vocab or default_vocab()
    words = caption.split()
    if len(words) > max_len:
        raise VocabularyError(f"caption has {len(words)} words, limit is {max_len}")
    ids = np.full(max_len + 1, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    for i, word in enumerate(words, 1):
        if word not in vocab or word in (PAD, CLS, MASK):
            raise VocabularyError(f"unknown word {word!r}")
        ids[i] = vocab[word]
    return ids


def detokenize(ids, vocab: dict[str, int] | None = None) -> str:
    vocab = vocab or default_vocab()
    inverse = {v: k for k, v in vocab.items()}
    return " ".join(inverse[int(i)] for i in ids if int(i) not in (PAD_ID, CLS_ID))
