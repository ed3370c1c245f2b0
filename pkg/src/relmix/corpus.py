"""Corpus ingestion, inverted indexing, and per-pair candidate pools.

A candidate pool holds every corpus sentence containing both concepts of a
pair (stem-aware). When the pool falls short of a minimum size it is topped
up by rewriting one-concept sentences: the in-sentence token most similar to
the missing concept (by word-vector cosine) is replaced with that concept.

Index construction is single-pass here; queries on a built index are
read-only and safe for concurrent use.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .textops import ConceptPair, TokenSeq, contains_concept, stem_match, tokenize

logger = logging.getLogger(__name__)


@dataclass
class Corpus:
    """Tokenized sentences with dense integer ids 0..N-1 and a source tag each."""

    sentences: list[TokenSeq]
    sources: list[str]

    def __len__(self) -> int:
        return len(self.sentences)

    def vocabulary(self) -> list[str]:
        """Sorted list of all distinct tokens."""
        vocab: set[str] = set()
        for sentence in self.sentences:
            vocab.update(sentence)
        return sorted(vocab)


def ingest(path: str | Path, format: str = "plain") -> Corpus:
    """Load a corpus file; one sentence per line (plain) or per record (jsonl).

    Empty lines and sentences that tokenize to nothing are skipped. A jsonl
    record must be an object with a "text" field; "source" is optional and
    defaults to the file name.
    """
    path = Path(path)
    if format not in ("plain", "jsonl"):
        raise DataError(f"unknown corpus format {format!r} (expected plain or jsonl)")
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    sentences: list[TokenSeq] = []
    sources: list[str] = []
    default_source = path.name
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            if format == "plain":
                text, source = line, default_source
            else:
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
                if not isinstance(record, dict) or "text" not in record:
                    raise DataError(f"{path}:{lineno}: record is missing a 'text' field")
                text = record["text"]
                source = record.get("source", default_source)
            tokens = tokenize(text)
            if not tokens:
                continue
            sentences.append(tokens)
            sources.append(source)
    return Corpus(sentences=sentences, sources=sources)


@dataclass
class InvertedIndex:
    """Token -> sorted, duplicate-free list of sentence ids."""

    postings: dict[str, list[int]]

    def lookup(self, token: str) -> list[int]:
        return self.postings.get(token, [])

    def ids_for_concept(self, concept: str) -> set[int]:
        """Union of postings over all tokens stem-matching the concept."""
        ids: set[int] = set()
        for token in self.postings:
            if stem_match(token, concept):
                ids.update(self.postings[token])
        return ids


def build_index(corpus: Corpus) -> InvertedIndex:
    """Exact inverted index: postings[t] = ids of sentences containing token t."""
    postings: dict[str, set[int]] = {}
    for sid, sentence in enumerate(corpus.sentences):
        for token in set(sentence):
            postings.setdefault(token, set()).add(sid)
    return InvertedIndex(postings={t: sorted(ids) for t, ids in sorted(postings.items())})


class WordVectors:
    """Dense word embeddings loaded from the whitespace text format.

    One entry per line: "word v1 v2 ... vD". A first line with exactly two
    integer fields is treated as a "count dim" header and skipped.
    """

    def __init__(self, dim: int, vectors: dict[str, np.ndarray]):
        self.dim = dim
        self.vectors = vectors

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, token: str) -> np.ndarray | None:
        return self.vectors.get(token)

    def mean(self, tokens: TokenSeq) -> np.ndarray | None:
        """Mean vector over the tokens that have entries; None if none do."""
        found = [self.vectors[t] for t in tokens if t in self.vectors]
        if not found:
            return None
        return np.mean(found, axis=0)

    @classmethod
    def load(cls, path: str | Path) -> "WordVectors":
        path = Path(path)
        if not path.exists():
            raise DataError(f"vector file not found: {path}")
        vectors: dict[str, np.ndarray] = {}
        dim: int | None = None
        with open(path, encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                fields = line.split()
                if not fields:
                    continue
                if lineno == 1 and len(fields) == 2:
                    try:
                        int(fields[0]), int(fields[1])
                        continue  # "count dim" header
                    except ValueError:
                        pass
                word = fields[0]
                try:
                    values = np.array([float(v) for v in fields[1:]], dtype=np.float64)
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: bad vector component: {exc}") from exc
                if values.size == 0:
                    raise DataError(f"{path}:{lineno}: entry {word!r} has no components")
                if not np.all(np.isfinite(values)):
                    raise DataError(f"{path}:{lineno}: entry {word!r} has NaN/Inf components")
                if dim is None:
                    dim = values.size
                elif values.size != dim:
                    raise DataError(
                        f"{path}:{lineno}: entry {word!r} has dim {values.size}, expected {dim}"
                    )
                vectors[word] = values
        if dim is None:
            raise DataError(f"{path}: no vector entries found")
        return cls(dim=dim, vectors=vectors)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; rejects mismatched dims and zero vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for a zero vector")
    return float(np.dot(u, v)) / (nu * nv)


@dataclass
class CandidatePool:
    """Ordered candidate sentences for one concept pair.

    members lists (sentence_id, substituted) with exact matches first in
    ascending id order, then substituted rewrites in fallback rank order.
    sentences maps every member id to its token sequence (the rewritten one
    for substituted members).
    """

    pair: ConceptPair
    members: list[tuple[int, bool]]
    sentences: dict[int, TokenSeq]

    def __len__(self) -> int:
        return len(self.members)

    def ids(self) -> list[int]:
        return [sid for sid, _ in self.members]

    def sentence(self, sid: int) -> TokenSeq:
        return self.sentences[sid]


def substitute_fallback(
    corpus: Corpus,
    pair: ConceptPair,
    needed: int,
    vectors: WordVectors,
) -> list[tuple[int, TokenSeq]]:
    """Rewrite one-concept sentences so they mention both concepts.

    Scans sentences containing exactly one of the two concepts. In each, the
    token closest in embedding space to the missing concept (highest cosine)
    is replaced by that concept. Returns up to `needed` rewrites ranked by
    that cosine, descending, ties broken by lower sentence id.
    """
    if needed <= 0:
        return []
    if pair.concept_a not in vectors or pair.concept_b not in vectors:
        logger.warning(
            "substitution fallback skipped for (%s, %s): concept missing from vectors",
            pair.concept_a,
            pair.concept_b,
        )
        return []
    scored: list[tuple[float, int, TokenSeq]] = []
    for sid, sentence in enumerate(corpus.sentences):
        has_a = contains_concept(sentence, pair.concept_a)
        has_b = contains_concept(sentence, pair.concept_b)
        if has_a == has_b:
            continue
        present = pair.concept_a if has_a else pair.concept_b
        missing = pair.concept_b if has_a else pair.concept_a
        missing_vec = vectors.get(missing)
        best_token: str | None = None
        best_cos = -math.inf
        for token in sentence:
            if stem_match(token, present):
                continue
            vec = vectors.get(token)
            if vec is None:
                continue
            sim = cosine(vec, missing_vec)
            if sim > best_cos:
                best_cos = sim
                best_token = token
        if best_token is None:
            continue
        rewritten = tuple(missing if t == best_token else t for t in sentence)
        scored.append((best_cos, sid, rewritten))
    scored.sort(key=lambda item: (-item[0], item[1]))
    return [(sid, rewritten) for _, sid, rewritten in scored[:needed]]


def candidate_pool(
    index: InvertedIndex,
    corpus: Corpus,
    pair: ConceptPair,
    min_size: int = 1,
    vectors: WordVectors | None = None,
) -> CandidatePool:
    """Candidate pool for a pair: both-concept sentences, topped up by substitution.

    Exact members are the stem-aware intersection of the two concepts'
    postings, in ascending sentence id order. If fewer than min_size and
    vectors are available, substitute_fallback appends rewrites. May still
    return fewer than min_size when the fallback is exhausted.
    """
    if min_size < 1:
        raise ValueError(f"min_size must be >= 1, got {min_size}")
    exact = sorted(index.ids_for_concept(pair.concept_a) & index.ids_for_concept(pair.concept_b))
    members = [(sid, False) for sid in exact]
    sentences = {sid: corpus.sentences[sid] for sid in exact}
    if len(members) < min_size and vectors is not None:
        for sid, rewritten in substitute_fallback(corpus, pair, min_size - len(members), vectors):
            members.append((sid, True))
            sentences[sid] = rewritten
    return CandidatePool(pair=pair, members=members, sentences=sentences)
