"""Benchmark construction: pair clustering, graph verification, dedup, splits.

The build starts from CommonGen-shaped records ({"concepts": [...],
"sentence": ...}), clusters every co-occurring concept pair with its
sentences, keeps only pairs whose sentences are backed by a short path in a
concept graph, drops near-duplicate references by embedding cosine, enforces
3-5 references per pair, and splits with explicit control over the share of
"unseen" concept compositions: an evaluation pair counts as unseen when it
never co-occurs inside any training example's reference sentences.

Sentence embeddings are consumed from a precomputed vector file keyed by a
hash this module prints (sentence_key), so any encoder can feed the builder.
All transformations are pure batch passes with deterministic ordering.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import WordVectors, cosine
from .errors import DataError
from .textops import ConceptPair, TokenSeq, contains_concept, detokenize, stem_match, tokenize

logger = logging.getLogger(__name__)

DEDUP_THRESHOLD = 0.75
MIN_TARGETS = 3
MAX_TARGETS = 5


@dataclass(frozen=True)
class SourceRecord:
    """One input record: a concept set and a sentence mentioning all of them."""

    concepts: tuple[str, ...]
    sentence: TokenSeq


def load_records(path: str | Path, on_invalid: str = "error") -> list[SourceRecord]:
    """Read JSONL records; every concept must stem-appear in the sentence."""
    if on_invalid not in ("error", "skip"):
        raise ValueError(f"on_invalid must be 'error' or 'skip', got {on_invalid!r}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"records file not found: {path}")
    records: list[SourceRecord] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "concepts" not in payload or "sentence" not in payload:
                raise DataError(f"{path}:{lineno}: record needs 'concepts' and 'sentence'")
            concepts = tuple(str(c).strip().lower() for c in payload["concepts"])
            sentence = tokenize(payload["sentence"])
            problem = None
            if not concepts:
                problem = "empty concept set"
            elif not sentence:
                problem = "empty sentence"
            else:
                missing = [c for c in concepts if not contains_concept(sentence, c)]
                if missing:
                    problem = f"concepts {missing} not found in sentence"
            if problem:
                if on_invalid == "error":
                    raise DataError(f"{path}:{lineno}: {problem}")
                logger.warning("%s:%d: skipping record (%s)", path, lineno, problem)
                continue
            records.append(SourceRecord(concepts=concepts, sentence=sentence))
    return records


def cluster_pairs(records: list[SourceRecord]) -> dict[tuple[str, str], list[TokenSeq]]:
    """Group sentences under every unordered concept pair they exemplify.

    Pairs are canonicalized lexicographically; duplicate sentences per pair
    are dropped (first occurrence wins).
    """
    clusters: dict[tuple[str, str], list[TokenSeq]] = {}
    seen: dict[tuple[str, str], set[TokenSeq]] = {}
    for record in records:
        unique = sorted(set(record.concepts))
        for i in range(len(unique)):
            for j in range(i + 1, len(unique)):
                key = (unique[i], unique[j])
                bucket = clusters.setdefault(key, [])
                seen_set = seen.setdefault(key, set())
                if record.sentence not in seen_set:
                    bucket.append(record.sentence)
                    seen_set.add(record.sentence)
    return clusters


class ConceptGraph:
    """Undirected view of a (head, relation, tail) edge dump."""

    def __init__(self, edges: list[tuple[str, str, str]]):
        self.adjacency: dict[str, set[str]] = {}
        self.edges: set[tuple[str, str, str]] = set()
        for head, relation, tail in edges:
            if head == tail:
                continue  # no self-loops stored
            self.edges.add((head, relation, tail))
            self.adjacency.setdefault(head, set()).add(tail)
            self.adjacency.setdefault(tail, set()).add(head)

    def __contains__(self, node: str) -> bool:
        return node in self.adjacency

    def neighbors(self, node: str) -> set[str]:
        return self.adjacency.get(node, set())

    @classmethod
    def load(cls, path: str | Path) -> "ConceptGraph":
        path = Path(path)
        if not path.exists():
            raise DataError(f"graph file not found: {path}")
        edges = []
        with open(path, encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected 'head<TAB>relation<TAB>tail'")
                edges.append((parts[0].strip().lower(), parts[1].strip(), parts[2].strip().lower()))
        return cls(edges)


def verify_path(
    graph: ConceptGraph,
    pair: ConceptPair,
    sentence_concepts: set[str],
    max_depth: int = 3,
) -> bool:
    """BFS for a path of length <= max_depth whose inner nodes come from the sentence.

    Intermediate nodes must belong to sentence_concepts plus the pair itself.
    A concept absent from the graph yields False rather than an error.
    Monotone in both the concept set and the depth.
    """
    if max_depth < 1:
        raise ValueError(f"max_depth must be >= 1, got {max_depth}")
    start, goal = pair.concept_a, pair.concept_b
    if start not in graph or goal not in graph:
        return False
    allowed = set(sentence_concepts) | {start, goal}
    queue = deque([(start, 0)])
    visited = {start}
    while queue:
        node, depth = queue.popleft()
        if depth >= max_depth:
            continue
        for neighbor in sorted(graph.neighbors(node)):
            if neighbor == goal:
                return True
            if neighbor in visited or neighbor not in allowed:
                continue
            visited.add(neighbor)
            queue.append((neighbor, depth + 1))
    return False


def sentence_key(sentence: TokenSeq) -> str:
    """Stable hash key naming a tokenized sentence in the embeddings file."""
    return hashlib.blake2s(detokenize(sentence).encode("utf-8"), digest_size=8).hexdigest()


class SentenceEmbeddings:
    """Precomputed sentence vectors, keyed by sentence_key()."""

    def __init__(self, vectors: WordVectors):
        self._vectors = vectors

    @classmethod
    def load(cls, path: str | Path) -> "SentenceEmbeddings":
        return cls(WordVectors.load(path))

    def get(self, sentence: TokenSeq) -> np.ndarray:
        vec = self._vectors.get(sentence_key(sentence))
        if vec is None:
            raise DataError(
                f"no embedding for sentence {detokenize(sentence)!r} "
                f"(key {sentence_key(sentence)})"
            )
        return vec


def dedup_filter(
    sentences: list[TokenSeq],
    embeddings: SentenceEmbeddings,
    threshold: float = DEDUP_THRESHOLD,
) -> list[TokenSeq]:
    """Greedy pass in input order: keep a sentence iff cosine <= threshold
    against everything already kept."""
    kept: list[TokenSeq] = []
    kept_vecs: list[np.ndarray] = []
    for sentence in sentences:
        vec = embeddings.get(sentence)
        if all(cosine(vec, other) <= threshold for other in kept_vecs):
            kept.append(sentence)
            kept_vecs.append(vec)
    return kept


@dataclass
class DatasetExample:
    """A concept pair with 3-5 mutually dissimilar reference sentences."""

    pair: ConceptPair
    targets: list[TokenSeq]


def enforce_target_count(
    pair: ConceptPair,
    targets: list[TokenSeq],
    embeddings: SentenceEmbeddings,
    truncation: str = "farthest",
) -> DatasetExample | None:
    """Reject pairs with under 3 targets; trim over-5 down to a diverse 5.

    Trimming keeps the first sentence, then repeatedly adds the sentence
    maximizing its minimum cosine distance to the kept set (ties toward the
    earlier sentence). truncation="first" keeps the first five instead.
    """
    if truncation not in ("farthest", "first"):
        raise ValueError(f"unknown truncation mode {truncation!r}")
    if len(targets) < MIN_TARGETS:
        return None
    if len(targets) <= MAX_TARGETS:
        return DatasetExample(pair=pair, targets=list(targets))
    if truncation == "first":
        return DatasetExample(pair=pair, targets=list(targets[:MAX_TARGETS]))
    vecs = [embeddings.get(t) for t in targets]
    kept = [0]
    while len(kept) < MAX_TARGETS:
        best_idx = -1
        best_dist = -1.0
        for i in range(len(targets)):
            if i in kept:
                continue
            dist = min(1.0 - cosine(vecs[i], vecs[j]) for j in kept)
            if dist > best_dist:
                best_dist = dist
                best_idx = i
        kept.append(best_idx)
    kept.sort()
    return DatasetExample(pair=pair, targets=[targets[i] for i in kept])


@dataclass
class SplitSpec:
    train_size: int
    dev_size: int
    test_size: int
    unseen_dev: float
    unseen_test: float
    seed: int = 0
    move_budget: int = 200
    tolerance: float = 0.02

    def __post_init__(self) -> None:
        if min(self.train_size, self.dev_size, self.test_size) <= 0:
            raise ValueError("split sizes must be positive")
        for ratio in (self.unseen_dev, self.unseen_test):
            if not 0.0 <= ratio <= 1.0:
                raise ValueError(f"unseen ratio {ratio} outside [0, 1]")


@dataclass
class SplitResult:
    train: list[DatasetExample]
    dev: list[DatasetExample]
    test: list[DatasetExample]
    achieved_unseen_dev: float
    achieved_unseen_test: float
    within_tolerance: bool


def _covers(example: DatasetExample, pair: ConceptPair) -> bool:
    """Whether any of the example's target sentences stem-contains both concepts."""
    for sentence in example.targets:
        if contains_concept(sentence, pair.concept_a) and contains_concept(
            sentence, pair.concept_b
        ):
            return True
    return False


def split(examples: list[DatasetExample], spec: SplitSpec) -> SplitResult:
    """Seeded split with greedy correction toward the unseen-ratio targets.

    Starts from a seeded shuffle, then swaps eval/train examples while the
    swap strictly reduces the total deviation from the targets, stopping at
    the tolerance (default +/-2 points) or the move budget. Infeasible
    targets produce a warning and the best effort achieved. The three splits
    always partition the input.
    """
    total = spec.train_size + spec.dev_size + spec.test_size
    if total != len(examples):
        raise DataError(f"split sizes sum to {total} but there are {len(examples)} examples")
    order = list(range(len(examples)))
    random.Random(spec.seed).shuffle(order)
    train_ids = order[: spec.train_size]
    dev_ids = order[spec.train_size : spec.train_size + spec.dev_size]
    test_ids = order[spec.train_size + spec.dev_size :]

    # covers[i][j]: example i's targets cover example j's pair.
    n = len(examples)
    covers = [[_covers(examples[i], examples[j].pair) for j in range(n)] for i in range(n)]

    def ratios(train: list[int], dev: list[int], test: list[int]) -> tuple[float, float]:
        def unseen_ratio(pool: list[int]) -> float:
            unseen = sum(1 for j in pool if not any(covers[i][j] for i in train))
            return unseen / len(pool) if pool else 1.0

        return unseen_ratio(dev), unseen_ratio(test)

    def deviation(r: tuple[float, float]) -> float:
        return abs(r[0] - spec.unseen_dev) + abs(r[1] - spec.unseen_test)

    current = ratios(train_ids, dev_ids, test_ids)
    moves = 0
    while moves < spec.move_budget:
        dev_ok = abs(current[0] - spec.unseen_dev) <= spec.tolerance
        test_ok = abs(current[1] - spec.unseen_test) <= spec.tolerance
        if dev_ok and test_ok:
            break
        best_swap = None
        best_dev = deviation(current)
        best_ratios = current
        for pool_name, pool in (("dev", dev_ids), ("test", test_ids)):
            for pi, eval_id in enumerate(pool):
                for ti, train_id in enumerate(train_ids):
                    pool[pi], train_ids[ti] = train_id, eval_id
                    cand = ratios(train_ids, dev_ids, test_ids)
                    cand_dev = deviation(cand)
                    if cand_dev < best_dev - 1e-12:
                        best_dev = cand_dev
                        best_swap = (pool_name, pi, ti)
                        best_ratios = cand
                    pool[pi], train_ids[ti] = eval_id, train_id
        if best_swap is None:
            break
        pool = dev_ids if best_swap[0] == "dev" else test_ids
        pi, ti = best_swap[1], best_swap[2]
        pool[pi], train_ids[ti] = train_ids[ti], pool[pi]
        current = best_ratios
        moves += 1

    dev_ok = abs(current[0] - spec.unseen_dev) <= spec.tolerance
    test_ok = abs(current[1] - spec.unseen_test) <= spec.tolerance
    if not (dev_ok and test_ok):
        logger.warning(
            "unseen-ratio targets not reached: dev %.4f (target %.4f), test %.4f (target %.4f)",
            current[0],
            spec.unseen_dev,
            current[1],
            spec.unseen_test,
        )
    return SplitResult(
        train=[examples[i] for i in train_ids],
        dev=[examples[i] for i in dev_ids],
        test=[examples[i] for i in test_ids],
        achieved_unseen_dev=current[0],
        achieved_unseen_test=current[1],
        within_tolerance=dev_ok and test_ok,
    )


@dataclass
class DatasetStats:
    """Split sizes, unseen ratios, reference-count averages and shares."""

    counts: tuple[int, int, int]
    unseen: tuple[float | None, float, float]
    avg_refs: tuple[float, float, float]
    target_shares: tuple[float, float, float]  # share (%) of 3-, 4-, 5-target examples


def stats(result: SplitResult) -> DatasetStats:
    splits = (result.train, result.dev, result.test)

    def avg_refs(pool: list[DatasetExample]) -> float:
        return sum(len(e.targets) for e in pool) / len(pool) if pool else 0.0

    all_examples = [e for pool in splits for e in pool]
    histogram = {3: 0, 4: 0, 5: 0}
    for example in all_examples:
        histogram[len(example.targets)] += 1
    total = len(all_examples)
    shares = tuple(
        100.0 * histogram[k] / total if total else 0.0 for k in (3, 4, 5)
    )
    return DatasetStats(
        counts=tuple(len(pool) for pool in splits),
        unseen=(None, 100.0 * result.achieved_unseen_dev, 100.0 * result.achieved_unseen_test),
        avg_refs=tuple(avg_refs(pool) for pool in splits),
        target_shares=shares,
    )


def render_stats(stats_record: DatasetStats) -> str:
    """Fixed-width statistics tables; parse_stats() round-trips the values."""
    c = stats_record.counts
    u = stats_record.unseen
    a = stats_record.avg_refs
    s = stats_record.target_shares

    def fmt_unseen(value: float | None) -> str:
        return "-" if value is None else f"{value:.2f}"

    rows = [
        ("", "train", "dev", "test"),
        ("Number", f"{c[0]:,}", f"{c[1]:,}", f"{c[2]:,}"),
        ("Unseen ratio (%)", fmt_unseen(u[0]), fmt_unseen(u[1]), fmt_unseen(u[2])),
        ("Avg. ref. number", f"{a[0]:.2f}", f"{a[1]:.2f}", f"{a[2]:.2f}"),
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = [
        "  ".join(f"{cell:<{widths[i]}}" for i, cell in enumerate(row)).rstrip() for row in rows
    ]
    lines.append("")
    share_rows = [
        ("", "3-targets", "4-targets", "5-targets"),
        ("ratio (%)", f"{s[0]:.2f}", f"{s[1]:.2f}", f"{s[2]:.2f}"),
    ]
    share_widths = [max(len(row[i]) for row in share_rows) for i in range(4)]
    lines.extend(
        "  ".join(f"{cell:<{share_widths[i]}}" for i, cell in enumerate(row)).rstrip()
        for row in share_rows
    )
    return "\n".join(lines) + "\n"


def parse_stats(text: str) -> DatasetStats:
    lines = [line for line in text.splitlines() if line.strip()]
    table: dict[str, list[str]] = {}
    for line in lines:
        cells = re.split(r"\s{2,}", line.strip())
        if len(cells) == 4:
            table[cells[0]] = cells[1:]
        elif len(cells) == 3 and not line.startswith(" "):
            # header rows carry an empty leading cell that strip() removed
            table.setdefault("_header", cells)
    required = ("Number", "Unseen ratio (%)", "Avg. ref. number", "ratio (%)")
    missing = [key for key in required if key not in table]
    if missing:
        raise DataError(f"stats table is missing rows: {missing}")

    def parse_unseen(cell: str) -> float | None:
        return None if cell == "-" else float(cell)

    counts = tuple(int(cell.replace(",", "")) for cell in table["Number"])
    unseen = tuple(parse_unseen(cell) for cell in table["Unseen ratio (%)"])
    avg_refs = tuple(float(cell) for cell in table["Avg. ref. number"])
    shares = tuple(float(cell) for cell in table["ratio (%)"])
    return DatasetStats(counts=counts, unseen=unseen, avg_refs=avg_refs, target_shares=shares)


def write_split_file(path: str | Path, examples: list[DatasetExample]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for example in examples:
            record = {
                "pair": list(example.pair.as_tuple()),
                "targets": [detokenize(t) for t in example.targets],
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def read_split_file(path: str | Path) -> list[DatasetExample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"split file not found: {path}")
    examples = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                pair = ConceptPair(payload["pair"][0], payload["pair"][1])
                targets = [tokenize(t) for t in payload["targets"]]
            except (json.JSONDecodeError, KeyError, IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad dataset record: {exc}") from exc
            examples.append(DatasetExample(pair=pair, targets=targets))
    return examples
