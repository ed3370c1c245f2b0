"""Independent brute-force reference implementations used to check the package.

Everything here is written the slow, obvious way (nested loops, recursion,
explicit enumeration) and stays deliberately separate from the library code
paths it validates.
"""

from __future__ import annotations

import math
from functools import lru_cache


def ngram_list(tokens, n):
    out = []
    i = 0
    while i + n <= len(tokens):
        out.append(tuple(tokens[i : i + n]))
        i += 1
    return out


def count_grams(tokens, n):
    counts = {}
    for gram in ngram_list(tokens, n):
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def bleu_oracle(candidate, references, max_n=4):
    """Clipped-count BLEU with the 1/(2*len) zero-precision floor, x100."""
    assert candidate
    precisions = []
    for n in range(1, max_n + 1):
        cand = count_grams(candidate, n)
        total = 0
        matched = 0
        for gram, count in cand.items():
            total += count
            best = 0
            for ref in references:
                ref_counts = count_grams(ref, n)
                if ref_counts.get(gram, 0) > best:
                    best = ref_counts[gram]
            matched += min(count, best)
        p = matched / total if total else 0.0
        if p == 0.0:
            p = 1.0 / (2.0 * len(candidate))
        precisions.append(p)
    product = 1.0
    for p in precisions:
        product *= p
    geo = product ** (1.0 / max_n)
    c = len(candidate)
    best_r = None
    for ref in references:
        r = len(ref)
        if best_r is None or abs(r - c) < abs(best_r - c) or (
            abs(r - c) == abs(best_r - c) and r < best_r
        ):
            best_r = r
    bp = 1.0 if c >= best_r else math.exp(1.0 - best_r / c)
    return 100.0 * bp * geo


def lcs_oracle(a, b):
    """Recursive LCS length with memoization."""

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0 or j == 0:
            return 0
        if a[i - 1] == b[j - 1]:
            return rec(i - 1, j - 1) + 1
        return max(rec(i - 1, j), rec(i, j - 1))

    return rec(len(a), len(b))


def rouge_l_oracle(candidate, references):
    best = 0.0
    for ref in references:
        lcs = lcs_oracle(tuple(candidate), tuple(ref))
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        best = max(best, 2 * p * r / (p + r))
    return 100.0 * best


def self_metric_oracle(candidates, metric_fn):
    scores = []
    for i in range(len(candidates)):
        others = candidates[:i] + candidates[i + 1 :]
        scores.append(metric_fn(candidates[i], others))
    return sum(scores) / len(scores)


def distinct_oracle(sentences, n):
    seen = set()
    total = 0
    for sentence in sentences:
        for gram in ngram_list(sentence, n):
            seen.add(gram)
            total += 1
    if total == 0:
        return 0.0
    return 100.0 * len(seen) / total


def entropy_oracle(sentences, n):
    counts = {}
    total = 0
    for sentence in sentences:
        for gram in ngram_list(sentence, n):
            counts[gram] = counts.get(gram, 0) + 1
            total += 1
    if total == 0:
        return 0.0
    h = 0.0
    for count in counts.values():
        p = count / total
        h -= p * math.log(p, 2)
    return h


def argmax_table_oracle(table):
    """Per-row argmax with ties to the lowest column index."""
    out = []
    for row in table:
        best_j = 0
        for j in range(1, len(row)):
            if row[j] > row[best_j]:
                best_j = j
        out.append(best_j)
    return out


def brute_force_postings(sentences, token):
    return [i for i, sentence in enumerate(sentences) if token in sentence]


def purity(assignment, labels):
    """Fraction of examples whose expert's majority label matches their own."""
    groups = {}
    for example_id, expert in assignment.items():
        groups.setdefault(expert, []).append(labels[example_id])
    correct = 0
    for members in groups.values():
        counts = {}
        for label in members:
            counts[label] = counts.get(label, 0) + 1
        correct += max(counts.values())
    return correct / len(labels)


def total_variation(freqs, probs):
    keys = set(freqs) | set(probs)
    return 0.5 * sum(abs(freqs.get(k, 0.0) - probs.get(k, 0.0)) for k in keys)
