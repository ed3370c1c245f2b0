"""Shared text primitives: normalization, n-gram extraction, suffix-match stemming.

Every function here is pure and stateless, so all of them are safe to call
concurrently. This is the single normalization used across indexing, training
and metrics; keeping it in one place makes scores reproducible bit-for-bit.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

Token = str
TokenSeq = tuple[str, ...]
NGram = tuple[str, ...]

# Reserved sentinel tokens. tokenize() lowercases and isolates punctuation,
# so none of these can ever be produced from raw text.
CLS = "[CLS]"
SEP = "[SEP]"
BOS = "<s>"
EOS = "</s>"
RESERVED = frozenset({CLS, SEP, BOS, EOS})

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")

# Longest rule first; a single rule is applied and the result must stay non-empty.
_SUFFIX_RULES = (
    ("ing", ""),
    ("ies", "y"),
    ("es", ""),
    ("ed", ""),
    ("s", ""),
    ("d", ""),
)


def tokenize(text: str) -> TokenSeq:
    """Lowercase, split punctuation into separate tokens, collapse whitespace.

    Runs of letters/digits become one token each; every other non-space
    character becomes its own token. Empty input yields an empty sequence.
    """
    return tuple(_TOKEN_RE.findall(text.lower()))


def detokenize(tokens: TokenSeq) -> str:
    """Inverse-ish of tokenize: space-join. tokenize(detokenize(t)) == t."""
    return " ".join(tokens)


def ngrams(seq: TokenSeq, n: int) -> list[NGram]:
    """Contiguous n-grams in order; max(0, len-n+1) of them."""
    if n < 1:
        raise ValueError(f"n-gram order must be >= 1, got {n}")
    return [tuple(seq[i : i + n]) for i in range(len(seq) - n + 1)]


def stem(word: str) -> str:
    """Strip one inflection suffix (longest rule first); never empties the word."""
    for suffix, replacement in _SUFFIX_RULES:
        if word.endswith(suffix):
            stripped = word[: len(word) - len(suffix)] + replacement
            if stripped:
                return stripped
    return word


def stem_match(word: str, concept: str) -> bool:
    """True when the tokens coincide after suffix stripping of either side.

    Reflexive and symmetric. Covers inflections like herds/herd/herding
    without a lemmatizer.
    """
    if word == concept:
        return True
    stemmed_word = stem(word)
    stemmed_concept = stem(concept)
    return (
        stemmed_word == concept
        or word == stemmed_concept
        or stemmed_word == stemmed_concept
    )


def contains_concept(seq: TokenSeq, concept: str) -> bool:
    """Whether any token of the sequence stem-matches the concept."""
    return any(stem_match(token, concept) for token in seq)


def contains_pair(seq: TokenSeq, pair: "ConceptPair") -> bool:
    """Whether the sequence stem-contains both concepts of the pair."""
    return contains_concept(seq, pair.concept_a) and contains_concept(seq, pair.concept_b)


@dataclass(frozen=True)
class ConceptPair:
    """An input pair of distinct, normalized (lowercase, single-token) concepts."""

    concept_a: str
    concept_b: str

    def __post_init__(self) -> None:
        for name in ("concept_a", "concept_b"):
            raw = getattr(self, name)
            norm = raw.strip().lower()
            if tokenize(norm) != (norm,):
                raise ValueError(f"concept {raw!r} is not a single normalized token")
            object.__setattr__(self, name, norm)
        if self.concept_a == self.concept_b:
            raise ValueError(f"concept pair needs two distinct concepts, got {self.concept_a!r} twice")

    def canonical(self) -> "ConceptPair":
        """Lexicographically ordered copy, for use as an unordered key."""
        if self.concept_a <= self.concept_b:
            return self
        return ConceptPair(self.concept_b, self.concept_a)

    def as_tuple(self) -> tuple[str, str]:
        return (self.concept_a, self.concept_b)
