"""Word-level tokenizer over a closed vocabulary.

The corpus is a templated micro-language, so the vocabulary is built once
from the generated sentences and never grows. Unknown words are an error:
anything outside the closed world indicates a corpus/config mismatch.
"""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[A-Za-z0-9']+|[^\sA-Za-z0-9']")


def split_words(text: str) -> list[str]:
    """Words and single punctuation marks, in order."""
    return _TOKEN_RE.findall(text)


class Tokenizer:
    def __init__(self, vocab: list[str]):
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary contains duplicates")
        self.vocab = list(vocab)
        self.token_to_id = {tok: i for i, tok in enumerate(self.vocab)}

    @classmethod
    def build(cls, texts: list[str]) -> "Tokenizer":
        seen = set()
        for text in texts:
            seen.update(split_words(text))
        return cls(sorted(seen))

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in split_words(text):
            idx = self.token_to_id.get(word)
            if idx is None:
                raise ValueError(f"word not in vocabulary: {word!r}")
            ids.append(idx)
        return ids

    def decode(self, ids: list[int]) -> str:
        words = []
        for i in ids:
            if not (0 <= i < len(self.vocab)):
                raise ValueError(f"token id out of range: {i}")
            words.append(self.vocab[i])
        return " ".join(words)
