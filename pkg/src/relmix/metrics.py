"""Quality and diversity metrics plus the tabular report they roll up into.

Scores follow the usual generation conventions, all reported x100:

* BLEU-4: modified n-gram precisions with multi-reference clip counts and a
  brevity penalty against the closest reference length (ties toward the
  shorter one). Zero precisions are floored at 1/(2*len(candidate)) so that
  short near-misses remain comparable; the test oracles implement the same
  floor.
* ROUGE-L: LCS-based F1, maximum over references.
* Success rate: share of generated sentences that stem-contain both input
  concepts (per sentence by default; a per-set mode counts a pair as a
  success when any of its candidates qualifies).
* Self-BLEU / Self-ROUGE: each candidate scored against its siblings as
  references, averaged; lower means more pairwise diversity.
* Distinct-n / Entropy-n: unique-to-total n-gram ratio and the entropy (in
  bits) of the n-gram distribution pooled over all generations.

All computations are pure; per-pair work aggregates in a fixed order.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import DataError
from .textops import ConceptPair, TokenSeq, contains_pair, ngrams

Reference = TokenSeq


def _clipped_matches(candidate: TokenSeq, references: list[Reference], n: int) -> tuple[int, int]:
    cand_counts = Counter(ngrams(candidate, n))
    total = sum(cand_counts.values())
    if total == 0:
        return 0, 0
    max_ref: Counter = Counter()
    for ref in references:
        ref_counts = Counter(ngrams(ref, n))
        for gram, count in ref_counts.items():
            if count > max_ref[gram]:
                max_ref[gram] = count
    matched = sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
    return matched, total


def bleu(candidate: TokenSeq, references: list[Reference], max_n: int = 4) -> float:
    """Sentence BLEU in [0, 100]; identical candidate/reference scores 100."""
    if not candidate:
        raise ValueError("candidate must be non-empty")
    if not references or any(not r for r in references):
        raise DataError("references must be non-empty")
    floor = 1.0 / (2.0 * len(candidate))
    log_sum = 0.0
    for n in range(1, max_n + 1):
        matched, total = _clipped_matches(candidate, references, n)
        precision = matched / total if total > 0 else 0.0
        if precision == 0.0:
            precision = floor
        log_sum += math.log(precision)
    geo_mean = math.exp(log_sum / max_n)
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * brevity * geo_mean


def _lcs_length(a: TokenSeq, b: TokenSeq) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        current = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                current[j] = prev[j - 1] + 1
            else:
                current[j] = max(prev[j], current[j - 1])
        prev = current
    return prev[len(b)]


def rouge_l(candidate: TokenSeq, references: list[Reference]) -> float:
    """LCS F1 in [0, 100], maximum over references."""
    if not candidate:
        raise ValueError("candidate must be non-empty")
    if not references or any(not r for r in references):
        raise DataError("references must be non-empty")
    best = 0.0
    for ref in references:
        lcs = _lcs_length(candidate, ref)
        if lcs == 0:
            continue
        precision = lcs / len(candidate)
        recall = lcs / len(ref)
        best = max(best, 2.0 * precision * recall / (precision + recall))
    return 100.0 * best


def success_rate(
    pairs: list[ConceptPair],
    generation_sets: list[list[TokenSeq]],
    mode: str = "per_sentence",
) -> float:
    """Percentage of generations that stem-contain both input concepts."""
    if mode not in ("per_sentence", "per_set"):
        raise ValueError(f"unknown success-rate mode {mode!r}")
    if len(pairs) != len(generation_sets):
        raise DataError("pairs and generation sets are misaligned")
    if mode == "per_sentence":
        total = 0
        hits = 0
        for pair, sentences in zip(pairs, generation_sets):
            for sentence in sentences:
                total += 1
                if contains_pair(sentence, pair):
                    hits += 1
        return 100.0 * hits / total if total else 0.0
    hits = sum(
        1
        for pair, sentences in zip(pairs, generation_sets)
        if any(contains_pair(s, pair) for s in sentences)
    )
    return 100.0 * hits / len(pairs) if pairs else 0.0


def topk_quality(candidates: list[TokenSeq], references: list[Reference], metric: str) -> float:
    """Best candidate score against the references; monotone in candidates."""
    if not candidates:
        raise ValueError("need at least one candidate")
    fn = {"bleu4": lambda c: bleu(c, references, 4), "rouge_l": lambda c: rouge_l(c, references)}[
        metric
    ]
    return max(fn(c) for c in candidates)


def self_metric(candidates: list[TokenSeq], metric: str) -> float:
    """Average leave-one-out score of each candidate against its siblings."""
    if len(candidates) < 2:
        raise ValueError("self metrics need at least two candidates")
    total = 0.0
    for i, candidate in enumerate(candidates):
        siblings = [c for j, c in enumerate(candidates) if j != i]
        if metric == "bleu4":
            total += bleu(candidate, siblings, 4)
        elif metric == "rouge_l":
            total += rouge_l(candidate, siblings)
        else:
            raise ValueError(f"unknown metric {metric!r}")
    return total / len(candidates)


def distinct_n(sentences: list[TokenSeq], n: int) -> float:
    """100 * unique n-grams / total n-grams over all generations; 0 if none."""
    unique: set = set()
    total = 0
    for sentence in sentences:
        grams = ngrams(sentence, n)
        total += len(grams)
        unique.update(grams)
    return 100.0 * len(unique) / total if total else 0.0


def entropy_n(sentences: list[TokenSeq], n: int) -> float:
    """Entropy in bits of the pooled empirical n-gram distribution."""
    counts: Counter = Counter()
    for sentence in sentences:
        counts.update(ngrams(sentence, n))
    total = sum(counts.values())
    if total == 0:
        return 0.0
    entropy = 0.0
    for count in counts.values():
        p = count / total
        entropy -= p * math.log2(p)
    return entropy


@dataclass
class MetricReport:
    """One row of quality / pairwise-diversity / corpus-diversity scores."""

    bleu4: float
    rouge_l: float
    success_rate: float
    self_bleu4: float
    self_rouge_l: float
    entropy4: float
    distinct4: float
    n_pairs: int = 0
    n_generations: int = 0
    config: dict = field(default_factory=dict)

    METRIC_FIELDS = (
        "bleu4",
        "rouge_l",
        "success_rate",
        "self_bleu4",
        "self_rouge_l",
        "entropy4",
        "distinct4",
    )

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in self.METRIC_FIELDS)


def evaluate_all(
    pairs: list[ConceptPair],
    candidate_sets: list[list[TokenSeq]],
    reference_sets: list[list[TokenSeq]],
    max_n: int = 4,
    success_mode: str = "per_sentence",
) -> MetricReport:
    """Run the whole protocol over aligned pairs/candidates/references."""
    if not (len(pairs) == len(candidate_sets) == len(reference_sets)):
        raise DataError(
            f"misaligned inputs: {len(pairs)} pairs, {len(candidate_sets)} candidate sets, "
            f"{len(reference_sets)} reference sets"
        )
    if not pairs:
        raise DataError("nothing to evaluate")
    for i, candidates in enumerate(candidate_sets):
        if not candidates:
            raise DataError(f"empty candidate set for pair {pairs[i].as_tuple()}")
        if len(candidates) < 2:
            raise DataError(
                f"pair {pairs[i].as_tuple()} has {len(candidates)} candidate(s); "
                "pairwise diversity needs at least 2"
            )
    bleu_scores = [
        topk_quality(cands, refs, "bleu4") for cands, refs in zip(candidate_sets, reference_sets)
    ]
    rouge_scores = [
        topk_quality(cands, refs, "rouge_l") for cands, refs in zip(candidate_sets, reference_sets)
    ]
    self_bleu = [self_metric(cands, "bleu4") for cands in candidate_sets]
    self_rouge = [self_metric(cands, "rouge_l") for cands in candidate_sets]
    pooled = [sentence for cands in candidate_sets for sentence in cands]
    return MetricReport(
        bleu4=sum(bleu_scores) / len(bleu_scores),
        rouge_l=sum(rouge_scores) / len(rouge_scores),
        success_rate=success_rate(pairs, candidate_sets, mode=success_mode),
        self_bleu4=sum(self_bleu) / len(self_bleu),
        self_rouge_l=sum(self_rouge) / len(self_rouge),
        entropy4=entropy_n(pooled, 4),
        distinct4=distinct_n(pooled, 4),
        n_pairs=len(pairs),
        n_generations=len(pooled),
        config={"max_n": max_n, "success_mode": success_mode},
    )


# -- rendering ----------------------------------------------------------------

_TSV_COLUMNS = MetricReport.METRIC_FIELDS + ("n_pairs", "n_generations")


def render_tsv(report: MetricReport) -> str:
    header = "\t".join(_TSV_COLUMNS)
    row = "\t".join(
        [f"{getattr(report, name):.2f}" for name in MetricReport.METRIC_FIELDS]
        + [str(report.n_pairs), str(report.n_generations)]
    )
    return f"{header}\n{row}\n"


def parse_tsv(text: str) -> MetricReport:
    lines = [line for line in text.splitlines() if line.strip()]
    if len(lines) < 2:
        raise DataError("report TSV needs a header and a row")
    header = lines[0].split("\t")
    row = lines[1].split("\t")
    if len(header) != len(row):
        raise DataError("report TSV header/row width mismatch")
    values = dict(zip(header, row))
    try:
        return MetricReport(
            **{name: float(values[name]) for name in MetricReport.METRIC_FIELDS},
            n_pairs=int(values.get("n_pairs", 0)),
            n_generations=int(values.get("n_generations", 0)),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad report TSV: {exc}") from exc


def render_table(report: MetricReport) -> str:
    """Aligned text table; arrows mark the preferred direction per group."""
    groups = [
        ("Quality (top-k) ↑", [("BLEU-4", report.bleu4), ("ROUGE-l", report.rouge_l), ("S.R.", report.success_rate)]),
        ("Pairwise diversity ↓", [("self-B.-4", report.self_bleu4), ("self-R.-l", report.self_rouge_l)]),
        ("Corpus diversity ↑", [("Entropy-4", report.entropy4), ("Distinct-4", report.distinct4)]),
    ]
    header_cells: list[str] = []
    name_cells: list[str] = []
    value_cells: list[str] = []
    for title, metrics in groups:
        width = max(len(title), sum(max(len(n), 10) for n, _ in metrics) + 2 * (len(metrics) - 1))
        names = "  ".join(f"{name:<{max(len(name), 10)}}" for name, _ in metrics)
        vals = "  ".join(f"{value:<{max(len(name), 10)}.2f}" for name, value in metrics)
        header_cells.append(f"{title:<{width}}")
        name_cells.append(f"{names:<{width}}")
        value_cells.append(f"{vals:<{width}}")
    sepr = "   "
    lines = [sepr.join(header_cells).rstrip(), sepr.join(name_cells).rstrip(), sepr.join(value_cells).rstrip()]
    return "\n".join(lines) + "\n"
