"""Whitespace tokenizer over the synthetic vocabulary."""
from __future__ import annotations

from typing import Iterable, Sequence

PAD, EOS, UNK, QUERY, DOCUMENT = "<pad>", "<eos>", "<unk>", "Query:", "Document:"
SPECIALS = (PAD, EOS, UNK, QUERY, DOCUMENT)
PAD_ID, EOS_ID, UNK_ID, QUERY_ID, DOCUMENT_ID = range(len(SPECIALS))


def synthetic_words(vocab_size: int) -> list[str]:
    """The full vocabulary: specials first, then ``w000``-style words."""
    n_words = vocab_size - len(SPECIALS)
    if n_words < 1:
        raise ValueError(f"vocab_size {vocab_size} leaves no room for words")
    width = max(3, len(str(n_words - 1)))
    return list(SPECIALS) + [f"w{i:0{width}d}" for i in range(n_words)]


class Tokenizer:
    def __init__(self, vocab_size: int = 512):
        self.vocab_size = vocab_size
        self.words = synthetic_words(vocab_size)
        self.index = {w: i for i, w in enumerate(self.words)}

    @property
    def first_word_id(self) -> int:
        return len(SPECIALS)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, UNK_ID) for tok in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.words[i] for i in ids)

    def encode_many(self, texts: Sequence[str]) -> list[list[int]]:
        return [self.encode(t) for t in texts]
