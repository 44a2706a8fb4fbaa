"""Tokenization and vocabulary handling.

Text processing is deliberately simple: lowercase, split on
non-alphanumeric characters, drop a small stop-word list. The encoder
vocabulary reserves ids 0..2 for the [CLS], padding and mask pseudo tokens.
"""

from __future__ import annotations

import re

CLS_ID = 0
PAD_ID = 1
MASK_ID = 2
N_SPECIAL = 3

STOPWORDS = frozenset(
    "a an and are as at be by for from has in is it of on or that the to was with".split()
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase + alphanumeric-run tokenization with stop-word filtering."""
    return [t for t in _TOKEN_RE.findall(text.lower()) if t not in STOPWORDS]


class Vocab:
    """Bidirectional token/id mapping on top of the reserved special ids."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self._ids = {t: N_SPECIAL + i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts, max_size: int | None = None) -> "Vocab":
        """Collect tokens by frequency (ties alphabetical) over ``texts``."""
        counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ordered = ordered[: max_size - N_SPECIAL]
        return cls(ordered)

    def __len__(self) -> int:
        return N_SPECIAL + len(self.tokens)

    def encode(self, text: str, max_len: int) -> list[int]:
        """Token ids with the leading [CLS]; unknown tokens are dropped."""
        ids = [self._ids[t] for t in tokenize(text) if t in self._ids]
        return [CLS_ID] + ids[: max_len - 1]
