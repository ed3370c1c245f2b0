"""Mixture of generators: context-conditioned scoring, EM matching, decoding.

The sequence model is a copy-augmented backoff n-gram mixture. Each step
probability is

    p(w | h) = lam * p_copy(w)  +  (1 - lam) * (beta * p_expert(w | h)
                                                + (1 - beta) * p_background(w | h))

where p_copy is the relative frequency of w among the composed input's
content tokens (concepts + retrieved contexts; prefix and reserved tokens
excluded), and the n-gram terms use add-k smoothing with trigram -> bigram ->
unigram backoff. Background counts are shared by all experts; each expert
adds its own delta tables, mirroring a shared-weights-plus-prefix scheme in
count space. An expert whose delta tables are empty falls back to the
background alone (the beta term vanishes).

Retrieved contexts are absent from the training data, so there is no given
link between a context-aware input and a reference sentence. The matching
step assigns each composed input to the reference it scores highest, and EM
alternates that matching with count re-estimation. Everything is exactly
computable, which keeps the matching argmax and the EM loop testable against
brute force.

Scoring and decoding are read-only on a trained model and safe to run
concurrently; count re-estimation is a single writer per EM iteration.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError
from .mixture import (
    Assignment,
    ExpertIdentifier,
    HardEMConfig,
    HardEMResult,
    run_hard_em,
)
from .retriever import ContextSet
from .textops import BOS, CLS, EOS, RESERVED, SEP, ConceptPair, TokenSeq, stem_match

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ComposedGeneratorInput:
    """Expert-conditioned generator input.

    rendered = prefix + [CLS] + concept_a + [SEP] + concept_b + [SEP]
    + s_1 + [SEP] + ... + s_k, preserving the context set's order.
    """

    expert: ExpertIdentifier
    pair: ConceptPair
    contexts: tuple[TokenSeq, ...]
    rendered: TokenSeq


def compose_generator_input(
    expert: ExpertIdentifier, pair: ConceptPair, contexts: ContextSet | list[TokenSeq]
) -> ComposedGeneratorInput:
    sentences = contexts.sentences if isinstance(contexts, ContextSet) else list(contexts)
    rendered = list(expert.prefix) + [CLS, pair.concept_a, SEP, pair.concept_b, SEP]
    for i, sentence in enumerate(sentences):
        if i > 0:
            rendered.append(SEP)
        rendered.extend(sentence)
    return ComposedGeneratorInput(
        expert=expert,
        pair=pair,
        contexts=tuple(tuple(s) for s in sentences),
        rendered=tuple(rendered),
    )


def copy_bag(input: ComposedGeneratorInput) -> Counter:
    """Content-token multiset of a composed input: concepts + context tokens."""
    prefix = set(input.expert.prefix)
    bag: Counter = Counter()
    for token in input.rendered:
        if token in RESERVED or token in prefix:
            continue
        bag[token] += 1
    return bag


class NGramTable:
    """Trigram/bigram/unigram continuation counts with history totals."""

    def __init__(self) -> None:
        self.trigram: Counter = Counter()
        self.bigram: Counter = Counter()
        self.unigram: Counter = Counter()
        self.tri_hist: Counter = Counter()
        self.bi_hist: Counter = Counter()
        self.total = 0

    def is_empty(self) -> bool:
        return self.total == 0

    def add_sequence(self, target: TokenSeq) -> None:
        """Count a BOS-padded, EOS-terminated target sentence."""
        padded = (BOS, BOS) + tuple(target) + (EOS,)
        for i in range(2, len(padded)):
            w2, w1, w = padded[i - 2], padded[i - 1], padded[i]
            self.trigram[(w2, w1, w)] += 1
            self.tri_hist[(w2, w1)] += 1
            self.bigram[(w1, w)] += 1
            self.bi_hist[w1] += 1
            self.unigram[w] += 1
            self.total += 1

    def prob(self, word: str, history: tuple[str, str], add_k: float, vocab_size: int) -> float:
        """Add-k probability with trigram -> bigram -> unigram backoff.

        The backoff level is picked by history count, so each level is a
        proper distribution over the prediction vocabulary. An entirely
        empty table yields the uniform distribution.
        """
        denom_k = add_k * vocab_size
        tri_total = self.tri_hist.get(history, 0)
        if tri_total > 0:
            return (self.trigram.get((history[0], history[1], word), 0) + add_k) / (
                tri_total + denom_k
            )
        bi_total = self.bi_hist.get(history[1], 0)
        if bi_total > 0:
            return (self.bigram.get((history[1], word), 0) + add_k) / (bi_total + denom_k)
        if self.total > 0:
            return (self.unigram.get(word, 0) + add_k) / (self.total + denom_k)
        return 1.0 / vocab_size

    def to_json(self) -> dict:
        join = " ".join
        return {
            "trigram": {join(k): v for k, v in sorted(self.trigram.items())},
            "bigram": {join(k): v for k, v in sorted(self.bigram.items())},
            "unigram": dict(sorted(self.unigram.items())),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "NGramTable":
        table = cls()
        for key, count in payload["trigram"].items():
            w2, w1, w = key.split(" ")
            table.trigram[(w2, w1, w)] = count
            table.tri_hist[(w2, w1)] += count
        for key, count in payload["bigram"].items():
            w1, w = key.split(" ")
            table.bigram[(w1, w)] = count
            table.bi_hist[w1] += count
        for word, count in payload["unigram"].items():
            table.unigram[word] = count
            table.total += count
        return table


@dataclass
class GeneratorConfig:
    n_experts: int = 3
    prefix_len: int = 5
    copy_weight: float = 0.5  # lam
    expert_weight: float = 0.7  # beta
    add_k: float = 0.01
    beam_width: int = 4
    max_len: int = 25
    em_iters: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.copy_weight < 1.0:
            raise ValueError(f"copy_weight must be in [0, 1), got {self.copy_weight}")
        if not 0.0 <= self.expert_weight <= 1.0:
            raise ValueError(f"expert_weight must be in [0, 1], got {self.expert_weight}")
        if self.add_k <= 0:
            raise ValueError(f"add_k must be > 0, got {self.add_k}")


class GeneratorModel:
    """Shared background counts plus per-expert deltas and a copy mixture."""

    def __init__(self, vocab: list[str], experts: list[ExpertIdentifier], config: GeneratorConfig):
        if len(experts) != config.n_experts:
            raise ValueError(f"{len(experts)} experts but config says {config.n_experts}")
        self.config = config
        self.experts = experts
        vocab_set = set(vocab) | {EOS}
        vocab_set.discard(BOS)
        self.vocab = sorted(vocab_set)
        self.token_id = {t: i for i, t in enumerate(self.vocab)}
        self.background = NGramTable()
        self.deltas = [NGramTable() for _ in experts]

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def initialize_background(self, targets: list[TokenSeq]) -> None:
        """Seed background counts from reference sentences, each counted once."""
        self.background = NGramTable()
        for target in targets:
            self.background.add_sequence(target)

    # -- probabilities -------------------------------------------------------

    def step_prob(
        self,
        word: str,
        history: tuple[str, str],
        expert_index: int,
        bag: Counter,
        bag_total: int,
    ) -> float:
        cfg = self.config
        v = len(self.vocab)
        p_bg = self.background.prob(word, history, cfg.add_k, v)
        delta = self.deltas[expert_index]
        if delta.is_empty():
            p_ngram = p_bg
        else:
            p_ex = delta.prob(word, history, cfg.add_k, v)
            p_ngram = cfg.expert_weight * p_ex + (1.0 - cfg.expert_weight) * p_bg
        if bag_total == 0 or cfg.copy_weight == 0.0:
            return p_ngram
        p_copy = bag.get(word, 0) / bag_total
        return cfg.copy_weight * p_copy + (1.0 - cfg.copy_weight) * p_ngram

    def _bag_for(self, input: ComposedGeneratorInput) -> tuple[Counter, int]:
        # Copy mass can only target in-vocabulary tokens; anything else is dropped.
        bag = Counter({t: c for t, c in copy_bag(input).items() if t in self.token_id})
        return bag, sum(bag.values())

    def step_distribution(
        self, input: ComposedGeneratorInput, history: tuple[str, str]
    ) -> list[float]:
        """Full next-token distribution over the prediction vocabulary."""
        bag, bag_total = self._bag_for(input)
        return [
            self.step_prob(word, history, input.expert.index, bag, bag_total)
            for word in self.vocab
        ]

    def score(self, input: ComposedGeneratorInput, target: TokenSeq) -> float:
        """log p(target | input) including the terminal EOS step."""
        if not target:
            raise ValueError("cannot score an empty target")
        bag, bag_total = self._bag_for(input)
        padded = (BOS, BOS) + tuple(target) + (EOS,)
        total = 0.0
        for i in range(2, len(padded)):
            word = padded[i]
            if word not in self.token_id:
                raise DataError(f"target token {word!r} is outside the model vocabulary")
            p = self.step_prob(word, (padded[i - 2], padded[i - 1]), input.expert.index, bag, bag_total)
            total += math.log(p)
        return total

    # -- checkpointing -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        payload = {
            "kind": "generator-model",
            "vocab": self.vocab,
            "experts": [list(e.prefix) for e in self.experts],
            "config": {
                "n_experts": self.config.n_experts,
                "prefix_len": self.config.prefix_len,
                "copy_weight": self.config.copy_weight,
                "expert_weight": self.config.expert_weight,
                "add_k": self.config.add_k,
                "beam_width": self.config.beam_width,
                "max_len": self.config.max_len,
                "em_iters": self.config.em_iters,
                "seed": self.config.seed,
            },
            "background": self.background.to_json(),
            "deltas": [d.to_json() for d in self.deltas],
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorModel":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        config = GeneratorConfig(**payload["config"])
        experts = [
            ExpertIdentifier(index=i, prefix=tuple(p)) for i, p in enumerate(payload["experts"])
        ]
        model = cls(vocab=payload["vocab"], experts=experts, config=config)
        model.background = NGramTable.from_json(payload["background"])
        model.deltas = [NGramTable.from_json(d) for d in payload["deltas"]]
        return model


# -- matching ---------------------------------------------------------------


@dataclass
class MatchResult:
    """Per composed input: the chosen reference index and its log-score."""

    target_index: list[int]
    log_score: list[float]


def match_targets(
    model: GeneratorModel,
    composed_inputs: list[ComposedGeneratorInput],
    targets: list[TokenSeq],
    one_to_one: bool = False,
) -> MatchResult:
    """Assign each composed input to the reference it scores highest.

    The default is an independent per-input argmax (many-to-one allowed),
    ties toward the lower target index. With `one_to_one`, highest scores
    claim first and each reference is used at most once; leftover inputs
    (more inputs than references) fall back to the unrestricted argmax.
    """
    if not targets:
        raise ValueError("need at least one target")
    table = [
        [model.score(input, target) for target in targets] for input in composed_inputs
    ]
    chosen = [-1] * len(composed_inputs)
    scores = [0.0] * len(composed_inputs)
    if not one_to_one:
        for i, row in enumerate(table):
            best = max(range(len(targets)), key=lambda j: (row[j], -j))
            chosen[i] = best
            scores[i] = row[best]
    else:
        cells = [
            (table[i][j], i, j) for i in range(len(composed_inputs)) for j in range(len(targets))
        ]
        cells.sort(key=lambda cell: (-cell[0], cell[1], cell[2]))
        used_inputs: set[int] = set()
        used_targets: set[int] = set()
        for value, i, j in cells:
            if i in used_inputs or j in used_targets:
                continue
            chosen[i] = j
            scores[i] = value
            used_inputs.add(i)
            used_targets.add(j)
        for i in range(len(composed_inputs)):
            if chosen[i] == -1:
                best = max(range(len(targets)), key=lambda j: (table[i][j], -j))
                chosen[i] = best
                scores[i] = table[i][best]
    return MatchResult(target_index=chosen, log_score=scores)


def m_step_counts(
    model: GeneratorModel,
    matched: list[tuple[ComposedGeneratorInput, TokenSeq]],
) -> GeneratorModel:
    """Re-estimate per-expert delta counts and shared background counts.

    Each expert's deltas come from its assigned (input, target) pairs; the
    background is recounted from all matched pairs. The copy and
    interpolation weights are hyperparameters and stay fixed. An expert with
    nothing assigned ends up with empty deltas and falls back to the
    background.
    """
    model.background = NGramTable()
    model.deltas = [NGramTable() for _ in model.experts]
    assigned = [0] * model.n_experts
    for input, target in matched:
        model.background.add_sequence(target)
        model.deltas[input.expert.index].add_sequence(target)
        assigned[input.expert.index] += 1
    for idx, count in enumerate(assigned):
        if count == 0:
            logger.warning("expert %d received no matched examples; using background only", idx)
    return model


@dataclass
class GeneratorTrainItem:
    """One pair's training material: n composed inputs plus its references."""

    pair: ConceptPair
    inputs: list[ComposedGeneratorInput]
    targets: list[TokenSeq]


def train_em(
    model: GeneratorModel,
    items: list[GeneratorTrainItem],
    iters: int | None = None,
    one_to_one: bool = False,
) -> tuple[GeneratorModel, HardEMResult]:
    """Alternate matching (E) and count re-estimation (M) to a fixed point.

    Runs through the generic hard-EM loop: the choice set for the composed
    input (pair p, expert i) is pair p's reference list, padded to the
    maximum reference count with -inf scores. iters=0 leaves the model
    untouched.
    """
    if iters is None:
        iters = model.config.em_iters
    example_ids = [(p, i) for p in range(len(items)) for i in range(len(items[p].inputs))]
    by_id = {
        (p, i): (items[p].inputs[i], items[p].targets)
        for p in range(len(items))
        for i in range(len(items[p].inputs))
    }
    max_targets = max((len(item.targets) for item in items), default=0)
    if max_targets == 0:
        raise ValueError("no targets to match against")

    def score(example_id: tuple[int, int], choice: int) -> float:
        input, targets = by_id[example_id]
        if choice >= len(targets):
            return -math.inf
        return model.score(input, targets[choice])

    def m_step(assignment: Assignment) -> GeneratorModel:
        matched = []
        for example_id in example_ids:
            input, targets = by_id[example_id]
            matched.append((input, targets[assignment.expert_of[example_id]]))
        return m_step_counts(model, matched)

    em_config = HardEMConfig(
        n_experts=max_targets,
        prefix_len=model.config.prefix_len,
        max_iters=iters,
        seed=model.config.seed,
    )
    if iters == 0:
        return model, HardEMResult(params=model, assignment=Assignment(expert_of={}))
    result = run_hard_em(example_ids, score, m_step, em_config)
    if one_to_one:
        # Refit counts once using the greedy bijective matching per pair.
        matched = []
        for item in items:
            match = match_targets(model, item.inputs, item.targets, one_to_one=True)
            matched.extend(
                (input, item.targets[j]) for input, j in zip(item.inputs, match.target_index)
            )
        m_step_counts(model, matched)
    return model, result


def train_random_matching(
    model: GeneratorModel,
    items: list[GeneratorTrainItem],
    seed: int = 0,
) -> GeneratorModel:
    """Ablation: replace the matching argmax with a seeded uniform choice.

    Draws one random reference per composed input and fits counts once; there
    is no EM refinement to converge, so a single M-step is the whole run.
    """
    rng = random.Random(f"{seed}/random-matching")
    matched = []
    for item in items:
        for input in item.inputs:
            matched.append((input, item.targets[rng.randrange(len(item.targets))]))
    return m_step_counts(model, matched)


# -- decoding ----------------------------------------------------------------


@dataclass
class DecodedSequence:
    tokens: TokenSeq
    log_prob: float
    constraints_met: bool = True


def _concepts_met(tokens: TokenSeq, pair: ConceptPair) -> set[str]:
    met = set()
    for concept in pair.as_tuple():
        if any(stem_match(t, concept) for t in tokens):
            met.add(concept)
    return met


def generate_beam(
    model: GeneratorModel,
    input: ComposedGeneratorInput,
    beam_width: int | None = None,
    max_len: int | None = None,
    require_concepts: bool = True,
) -> DecodedSequence:
    """Beam search, optionally constrained to mention both concepts.

    Under the constraint a hypothesis may emit EOS only once both concepts
    (stem-matched) have appeared, and when the remaining budget equals the
    number of unmet concepts the expansion is restricted to those concept
    tokens (an unbounded inclusion bonus). Ties break by token id, so
    decoding is deterministic. If the constraints cannot be met within
    max_len the best effort comes back with constraints_met=False.
    """
    beam_width = beam_width if beam_width is not None else model.config.beam_width
    max_len = max_len if max_len is not None else model.config.max_len
    if beam_width < 1:
        raise ValueError(f"beam width must be >= 1, got {beam_width}")
    if max_len < 4:
        raise ValueError(f"max_len must be >= 4, got {max_len}")
    pair = input.pair
    eos_id = model.token_id[EOS]
    concept_ids = {
        concept: model.token_id.get(concept) for concept in pair.as_tuple()
    }
    # (tokens, ids, log_prob, met)
    live: list[tuple[TokenSeq, tuple[int, ...], float, frozenset[str]]] = [
        ((), (), 0.0, frozenset())
    ]
    finished: list[tuple[float, tuple[int, ...], TokenSeq, frozenset[str]]] = []
    best_effort: tuple[float, tuple[int, ...], TokenSeq, frozenset[str]] | None = None
    for _ in range(max_len):
        expansions: list[tuple[float, tuple[int, ...], TokenSeq, frozenset[str]]] = []
        for tokens, ids, log_prob, met in live:
            history = (
                tokens[-2] if len(tokens) >= 2 else BOS,
                tokens[-1] if len(tokens) >= 1 else BOS,
            )
            dist = model.step_distribution(input, history)
            unmet = [c for c in pair.as_tuple() if c not in met]
            remaining = max_len - len(tokens)
            if require_concepts and unmet and remaining <= len(unmet):
                candidate_ids = [
                    concept_ids[c] for c in unmet if concept_ids[c] is not None
                ]
            else:
                candidate_ids = range(len(model.vocab))
            for token_id in candidate_ids:
                word = model.vocab[token_id]
                if require_concepts and token_id == eos_id and unmet:
                    continue
                new_lp = log_prob + math.log(dist[token_id])
                if token_id == eos_id:
                    finished.append((new_lp, ids, tokens, met))
                    continue
                new_met = met
                for concept in pair.as_tuple():
                    if concept not in met and stem_match(word, concept):
                        new_met = new_met | {concept}
                expansions.append((new_lp, ids + (token_id,), tokens + (word,), new_met))
        if not expansions:
            break
        expansions.sort(key=lambda h: (-h[0], h[1]))
        live = [(tokens, ids, lp, met) for lp, ids, tokens, met in expansions[:beam_width]]
        top = expansions[0]
        if best_effort is None or top[0] > best_effort[0]:
            best_effort = top
    if finished:
        finished.sort(key=lambda h: (-h[0], h[1]))
        lp, _, tokens, met = finished[0]
        return DecodedSequence(tokens=tokens, log_prob=lp, constraints_met=True)
    # Budget exhausted without EOS: report the best surviving hypothesis.
    if live:
        candidates = [(lp, ids, tokens, met) for tokens, ids, lp, met in live]
    elif best_effort is not None:
        candidates = [best_effort]
    else:
        return DecodedSequence(tokens=(), log_prob=-math.inf, constraints_met=False)
    candidates.sort(key=lambda h: (-h[0], h[1]))
    lp, _, tokens, met = candidates[0]
    ok = not require_concepts or len(met) == 2
    return DecodedSequence(tokens=tokens, log_prob=lp, constraints_met=ok)


def _finish_sample(
    model: GeneratorModel,
    input: ComposedGeneratorInput,
    pick: "callable",
    max_len: int,
) -> TokenSeq:
    """Shared sampling loop: draw tokens until EOS or the length budget."""
    tokens: list[str] = []
    eos_id = model.token_id[EOS]
    for _ in range(max_len):
        history = (
            tokens[-2] if len(tokens) >= 2 else BOS,
            tokens[-1] if len(tokens) >= 1 else BOS,
        )
        dist = model.step_distribution(input, history)
        token_id = pick(dist)
        if token_id == eos_id:
            break
        tokens.append(model.vocab[token_id])
    return tuple(tokens)


def _apply_temperature(dist: list[float], temperature: float) -> list[float]:
    if temperature == 1.0:
        return dist
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    powered = [p ** (1.0 / temperature) for p in dist]
    total = sum(powered)
    return [p / total for p in powered]


def _draw(rng: random.Random, support: list[int], probs: list[float]) -> int:
    """Inverse-CDF draw over an explicit support; deterministic per rng state."""
    u = rng.random()
    cum = 0.0
    for token_id, p in zip(support, probs):
        cum += p
        if u < cum:
            return token_id
    return support[-1]


def topk_support(dist: list[float], k: int) -> list[int]:
    """The k most probable token ids; ties rank by token id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return sorted(range(len(dist)), key=lambda i: (-dist[i], i))[:k]


def topp_support(dist: list[float], p: float) -> list[int]:
    """Smallest probability-sorted prefix with cumulative mass >= p.

    The >= rule keeps the top token even when p lies below its mass.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    ranked = sorted(range(len(dist)), key=lambda i: (-dist[i], i))
    support: list[int] = []
    cum = 0.0
    for i in ranked:
        support.append(i)
        cum += dist[i]
        if cum >= p:
            break
    return support


def typical_support(dist: list[float], tau: float) -> list[int]:
    """Smallest mass >= tau prefix of tokens ranked by closeness to the entropy.

    Tokens rank by |(-log2 p) - H| ascending; exact ties prefer the less
    probable token, then the lower token id.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    infos = [-math.log2(p) if p > 0 else math.inf for p in dist]
    entropy = sum(p * info for p, info in zip(dist, infos) if p > 0)
    ranked = sorted(range(len(dist)), key=lambda i: (abs(infos[i] - entropy), dist[i], i))
    support: list[int] = []
    cum = 0.0
    for i in ranked:
        support.append(i)
        cum += dist[i]
        if cum >= tau:
            break
    return support


def _sample_with_support(
    model: GeneratorModel,
    input: ComposedGeneratorInput,
    support_fn,
    temperature: float,
    seed,
    max_len: int | None,
) -> TokenSeq:
    max_len = max_len if max_len is not None else model.config.max_len
    rng = random.Random(seed)

    def pick(dist: list[float]) -> int:
        dist = _apply_temperature(dist, temperature)
        support = support_fn(dist)
        mass = sum(dist[i] for i in support)
        return _draw(rng, support, [dist[i] / mass for i in support])

    return _finish_sample(model, input, pick, max_len)


def sample_topk(
    model: GeneratorModel,
    input: ComposedGeneratorInput,
    k: int,
    temperature: float = 1.0,
    seed: int = 0,
    max_len: int | None = None,
) -> TokenSeq:
    """Sample with the distribution truncated to the k most probable tokens.

    k=1 is greedy decoding; k=|vocab| is plain ancestral sampling.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return _sample_with_support(
        model, input, lambda dist: topk_support(dist, k), temperature, seed, max_len
    )


def sample_topp(
    model: GeneratorModel,
    input: ComposedGeneratorInput,
    p: float,
    temperature: float = 1.0,
    seed: int = 0,
    max_len: int | None = None,
) -> TokenSeq:
    """Nucleus sampling over the smallest mass >= p prefix; p=1.0 is ancestral."""
    return _sample_with_support(
        model, input, lambda dist: topp_support(dist, p), temperature, seed, max_len
    )


def sample_typical(
    model: GeneratorModel,
    input: ComposedGeneratorInput,
    tau: float,
    temperature: float = 1.0,
    seed: int = 0,
    max_len: int | None = None,
) -> TokenSeq:
    """Typicality sampling: keep tokens whose surprisal is nearest the entropy."""
    return _sample_with_support(
        model, input, lambda dist: typical_support(dist, tau), temperature, seed, max_len
    )


@dataclass
class GenerationSet:
    """One output per expert for a pair, in expert order."""

    pair: ConceptPair
    outputs: list[TokenSeq]
    experts: list[int]
    decoder: str
    constraints_met: list[bool]


def generate_set(
    model: GeneratorModel,
    pair: ConceptPair,
    context_sets: list[ContextSet],
    decoder: str = "beam",
    decoder_params: dict | None = None,
    seed: int = 0,
) -> GenerationSet:
    """Generate one relationship sentence per expert from its context set.

    The default decoder is the constrained beam; identical context sets and
    deltas may produce coinciding outputs (no dedup is forced).
    """
    params = dict(decoder_params or {})
    outputs: list[TokenSeq] = []
    met_flags: list[bool] = []
    for i, expert in enumerate(model.experts):
        contexts = context_sets[min(i, len(context_sets) - 1)]
        composed = compose_generator_input(expert, pair, contexts)
        if decoder == "beam":
            decoded = generate_beam(
                model,
                composed,
                beam_width=params.get("beam_width"),
                max_len=params.get("max_len"),
                require_concepts=params.get("require_concepts", True),
            )
            outputs.append(decoded.tokens)
            met_flags.append(decoded.constraints_met)
            continue
        expert_seed = f"{seed}/{pair.concept_a}/{pair.concept_b}/{i}"
        if decoder == "topk":
            tokens = sample_topk(
                model, composed, k=params.get("k", 10), temperature=params.get("temperature", 1.0),
                seed=expert_seed, max_len=params.get("max_len"),
            )
        elif decoder == "topp":
            tokens = sample_topp(
                model, composed, p=params.get("p", 0.9), temperature=params.get("temperature", 1.0),
                seed=expert_seed, max_len=params.get("max_len"),
            )
        elif decoder == "typical":
            tokens = sample_typical(
                model, composed, tau=params.get("tau", 0.9), temperature=params.get("temperature", 1.0),
                seed=expert_seed, max_len=params.get("max_len"),
            )
        else:
            raise ValueError(f"unknown decoder {decoder!r}")
        outputs.append(tokens)
        met_flags.append(True)
    return GenerationSet(
        pair=pair,
        outputs=outputs,
        experts=[e.index for e in model.experts],
        decoder=decoder,
        constraints_met=met_flags,
    )
