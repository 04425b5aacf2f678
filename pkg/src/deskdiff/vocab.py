"""Fixed prompt vocabulary and tokenization.

The vocabulary is closed: three class nouns, three modifiers, five
context/activity descriptors, a reserved subject-identifier token and a
reserved null (unconditional) token. Prompts are short whitespace-separated
strings; articles and the prepositions used by context phrases are dropped
during tokenization so that e.g. "a striped cup in snow" and
"striped cup snow" tokenize identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

CLASS_NOUNS = ("plushie", "cup", "pot")
MODIFIERS = ("triangular", "striped", "tall")
CONTEXTS = ("grass", "snow", "night", "ball", "pens")

# Attribute order used by the oracle embedding vectors.
ATTRIBUTES = CLASS_NOUNS + MODIFIERS + CONTEXTS

IDENTIFIER_WORD = "[*]"
NULL_WORD = "<null>"

# Token id layout: attributes first, then the two reserved tokens.
WORDS = ATTRIBUTES + (IDENTIFIER_WORD, NULL_WORD)
WORD_TO_ID = {w: i for i, w in enumerate(WORDS)}
ID_TOKEN = WORD_TO_ID[IDENTIFIER_WORD]
NULL_TOKEN = WORD_TO_ID[NULL_WORD]
VOCAB_SIZE = len(WORDS)

_DROPPED = {"a", "an", "the", "on", "in", "at", "with", "is"}


class UnknownTokenError(ValueError):
    """Raised when a prompt contains a word outside the vocabulary."""


@dataclass(frozen=True)
class PromptTokens:
    """An ordered token-id sequence over the fixed vocabulary."""

    tokens: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for t in self.tokens:
            if not 0 <= t < VOCAB_SIZE:
                raise ValueError(f"token id {t} out of vocabulary bounds")
        if self.tokens.count(ID_TOKEN) > 1:
            raise ValueError("at most one identifier token per prompt")
        if NULL_TOKEN in self.tokens and self.tokens != (NULL_TOKEN,):
            raise ValueError("null token must appear alone")

    @property
    def is_null(self) -> bool:
        return self.tokens == (NULL_TOKEN,)

    def has_identifier(self) -> bool:
        return ID_TOKEN in self.tokens

    def without_identifier(self) -> "PromptTokens":
        return PromptTokens(tuple(t for t in self.tokens if t != ID_TOKEN))

    def words(self) -> tuple[str, ...]:
        return tuple(WORDS[t] for t in self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


NULL_PROMPT = PromptTokens((NULL_TOKEN,))


def tokenize(text: str) -> PromptTokens:
    """Turn a prompt string into a PromptTokens sequence.

    Lowercases, drops articles/prepositions, and maps each remaining word to
    its vocabulary id. The empty string maps to the null prompt. Unknown
    words raise UnknownTokenError naming the offending word.
    """
    words = [w for w in text.lower().split() if w not in _DROPPED]
    if not words:
        return NULL_PROMPT
    ids = []
    for w in words:
        if w not in WORD_TO_ID or w == NULL_WORD:
            raise UnknownTokenError(f"unknown word {w!r}")
        ids.append(WORD_TO_ID[w])
    return PromptTokens(tuple(ids))
