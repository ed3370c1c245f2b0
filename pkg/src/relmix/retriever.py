"""Mixture of retrievers: a shared-weight relevance model trained with hard-EM.

One linear model over hashed text features scores every (concept pair,
candidate sentence) combination. Expert identity enters only through prefix
tokens prepended to the rendered input, so all experts share one weight
vector; distinct prefixes shift the feature pattern and let hard-EM
specialize experts without separate parameters.

Plain hard-EM on this binary task tends to degenerate (one expert predicting
a constant label), so training adds a divergence penalty: the mean KL of each
expert's predictive Bernoulli to the experts' centroid distribution, weighted
by alpha.

featurize/predict are read-only after training and safe to run concurrently;
training itself is a single writer with a fixed batch and reduction order, so
identical configs and seeds reproduce identical weights bit-for-bit.
"""

from __future__ import annotations

import json
import logging
import math
import random
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CandidatePool, WordVectors, cosine
from .errors import NumericalError
from .mixture import Assignment, ExpertIdentifier, assignment_loss, e_step
from .textops import CLS, SEP, ConceptPair, TokenSeq, stem_match

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
DEFAULT_HASH_DIM = 1 << 16
DEFAULT_HASH_SALT = "relmix-feats-v1"


@dataclass(frozen=True)
class ComposedRetrieverInput:
    """Expert-conditioned classifier input.

    rendered = prefix + [CLS] + concept_a + [SEP] + concept_b + [SEP]
    + candidate + [SEP]; an expert with an empty prefix yields the plain,
    unconditioned form.
    """

    expert: ExpertIdentifier
    pair: ConceptPair
    candidate: TokenSeq
    rendered: TokenSeq


def compose_retriever_input(
    expert: ExpertIdentifier, pair: ConceptPair, candidate: TokenSeq
) -> ComposedRetrieverInput:
    rendered = (
        tuple(expert.prefix)
        + (CLS, pair.concept_a, SEP, pair.concept_b, SEP)
        + tuple(candidate)
        + (SEP,)
    )
    return ComposedRetrieverInput(expert=expert, pair=pair, candidate=tuple(candidate), rendered=rendered)


@dataclass(frozen=True)
class RelevanceExample:
    """A (pair, candidate) classification example with a binary label."""

    pair: ConceptPair
    candidate: TokenSeq
    label: int

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


class Featurizer:
    """Deterministic sparse featurization of a rendered input.

    Hashed unigrams and bigrams of the rendered sequence (prefix tokens
    included) land in [0, hash_dim); three dense features follow: the count
    of candidate tokens stem-matching either concept, the cosine between the
    candidate's and the pair's mean word vectors, and the candidate length.
    """

    N_DENSE = 3

    def __init__(
        self,
        hash_dim: int = DEFAULT_HASH_DIM,
        salt: str = DEFAULT_HASH_SALT,
        vectors: WordVectors | None = None,
    ):
        if hash_dim < 8:
            raise ValueError(f"hash_dim too small: {hash_dim}")
        self.hash_dim = hash_dim
        self.salt = salt
        self.vectors = vectors

    @property
    def dim(self) -> int:
        return self.hash_dim + self.N_DENSE

    def _bucket(self, gram: str) -> int:
        return zlib.crc32(f"{self.salt}|{gram}".encode("utf-8")) % self.hash_dim

    def featurize(self, input: ComposedRetrieverInput) -> dict[int, float]:
        if not input.rendered:
            raise ValueError("cannot featurize an empty rendered sequence")
        features: dict[int, float] = {}
        tokens = input.rendered
        for token in tokens:
            idx = self._bucket(token)
            features[idx] = features.get(idx, 0.0) + 1.0
        for left, right in zip(tokens, tokens[1:]):
            idx = self._bucket(f"{left} {right}")
            features[idx] = features.get(idx, 0.0) + 1.0
        overlap = sum(
            1.0
            for token in input.candidate
            if stem_match(token, input.pair.concept_a) or stem_match(token, input.pair.concept_b)
        )
        features[self.hash_dim] = overlap
        features[self.hash_dim + 1] = self._pair_cosine(input)
        features[self.hash_dim + 2] = float(len(input.candidate))
        return features

    def _pair_cosine(self, input: ComposedRetrieverInput) -> float:
        if self.vectors is None:
            return 0.0
        cand_mean = self.vectors.mean(input.candidate)
        pair_mean = self.vectors.mean(input.pair.as_tuple())
        if cand_mean is None or pair_mean is None:
            return 0.0
        if not np.any(cand_mean) or not np.any(pair_mean):
            return 0.0
        return cosine(cand_mean, pair_mean)


@dataclass
class RetrieverTrainConfig:
    alpha: float = 1.0
    epochs: int = 10
    learning_rate: float = 0.5
    batch_size: int = 16
    seed: int = 0
    n_experts: int = 3
    prefix_len: int = 5
    regularizer_mode: str = "per_example"  # or "batch_marginal"

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.regularizer_mode not in ("per_example", "batch_marginal"):
            raise ValueError(f"unknown regularizer_mode {self.regularizer_mode!r}")


@dataclass
class TrainTrace:
    iteration: int
    loss_c: float
    loss_r: float
    loss: float


class RelevanceModel:
    """Shared weight vector + bias over the featurizer's space, one per run."""

    def __init__(
        self,
        featurizer: Featurizer,
        experts: list[ExpertIdentifier],
        weights: np.ndarray | None = None,
        bias: float = 0.0,
        seed: int = 0,
        init_scale: float = 0.01,
    ):
        self.featurizer = featurizer
        self.experts = experts
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = rng.normal(0.0, init_scale, size=featurizer.dim)
        if weights.shape != (featurizer.dim,):
            raise ValueError(f"weights shape {weights.shape} != ({featurizer.dim},)")
        self.weights = weights.astype(np.float64)
        self.bias = float(bias)
        self.seed = seed

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def margin(self, features: dict[int, float]) -> float:
        total = self.bias
        for idx, value in features.items():
            total += self.weights[idx] * value
        return total

    def predict_features(self, features: dict[int, float]) -> float:
        margin = self.margin(features)
        if margin >= 0:
            p = 1.0 / (1.0 + math.exp(-min(margin, 60.0)))
        else:
            e = math.exp(max(margin, -60.0))
            p = e / (1.0 + e)
        return min(max(p, PROB_EPS), 1.0 - PROB_EPS)

    def predict(self, input: ComposedRetrieverInput) -> float:
        """p(candidate is a true relational context), clamped away from 0/1."""
        return self.predict_features(self.featurizer.featurize(input))

    # -- checkpointing ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        nonzero = np.nonzero(self.weights)[0]
        payload = {
            "kind": "relevance-model",
            "hash_dim": self.featurizer.hash_dim,
            "salt": self.featurizer.salt,
            "bias": self.bias,
            "seed": self.seed,
            "experts": [list(e.prefix) for e in self.experts],
            "weights": {str(int(i)): float(self.weights[i]) for i in nonzero},
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, vectors: WordVectors | None = None) -> "RelevanceModel":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        featurizer = Featurizer(hash_dim=payload["hash_dim"], salt=payload["salt"], vectors=vectors)
        experts = [
            ExpertIdentifier(index=i, prefix=tuple(p)) for i, p in enumerate(payload["experts"])
        ]
        weights = np.zeros(featurizer.dim)
        for key, value in payload["weights"].items():
            weights[int(key)] = value
        return cls(
            featurizer=featurizer,
            experts=experts,
            weights=weights,
            bias=payload["bias"],
            seed=payload["seed"],
        )


def _logit(p: float) -> float:
    return math.log(p) - math.log(1.0 - p)


def _clamp(p: float) -> float:
    return min(max(p, PROB_EPS), 1.0 - PROB_EPS)


def js_regularizer(probs: list[float] | tuple[float, ...]) -> float:
    """Mean KL of each expert's Bernoulli to the centroid Bernoulli, in nats.

    Zero exactly when all experts emit the same probability; always >= 0
    (tiny negative rounding residue is floored away). Probabilities are
    clamped to [1e-7, 1 - 1e-7] before taking logs.
    """
    if not probs:
        raise ValueError("need at least one expert probability")
    clamped = [_clamp(p) for p in probs]
    if all(p == clamped[0] for p in clamped):
        return 0.0
    center = _clamp(sum(clamped) / len(clamped))
    total = 0.0
    for p in clamped:
        total += p * (math.log(p) - math.log(center))
        total += (1.0 - p) * (math.log(1.0 - p) - math.log(1.0 - center))
    return max(0.0, total / len(clamped))


def build_training_set(
    examples: list[tuple[ConceptPair, list[TokenSeq]]],
    pools: dict[tuple[str, str], CandidatePool],
    seed: int = 0,
) -> list[RelevanceExample]:
    """Positives are each pair's target sentences; negatives are sampled.

    Negatives are drawn uniformly without replacement from the pair's
    candidate pool, excluding sentences equal to any positive, matching the
    positive count. A too-small pool yields fewer negatives and a warning.
    """
    out: list[RelevanceExample] = []
    for pair, targets in examples:
        key = pair.canonical().as_tuple()
        if key not in pools:
            raise KeyError(f"no candidate pool for pair {key}")
        pool = pools[key]
        positives = [tuple(t) for t in targets]
        out.extend(RelevanceExample(pair=pair, candidate=t, label=1) for t in positives)
        positive_set = set(positives)
        eligible = [
            pool.sentence(sid) for sid, _ in pool.members if pool.sentence(sid) not in positive_set
        ]
        wanted = len(positives)
        rng = random.Random(f"{seed}/{key[0]}/{key[1]}")
        if len(eligible) < wanted:
            logger.warning(
                "pool for %s has only %d usable negatives (wanted %d)",
                key,
                len(eligible),
                wanted,
            )
            sampled = list(eligible)
        else:
            sampled = rng.sample(eligible, wanted)
        out.extend(RelevanceExample(pair=pair, candidate=c, label=0) for c in sampled)
    return out


def train(
    model: RelevanceModel,
    examples: list[RelevanceExample],
    config: RetrieverTrainConfig,
) -> tuple[RelevanceModel, list[TrainTrace]]:
    """Hard-EM training of the mixture of retrievers.

    Each of the `epochs` iterations runs an E-step assigning every example to
    the expert minimizing -log p(label), then one epoch of mini-batch
    gradient descent on loss = classification + alpha * divergence penalty.
    The penalty is computed from ALL experts' predictions on the batch and
    its gradient flows through every expert's featurized input into the
    shared weights. With one expert this is plain logistic regression.
    """
    if not examples:
        raise ValueError("no training examples")
    n = model.n_experts
    # Feature vectors are independent of the weights: compute once.
    feats = [
        [
            model.featurizer.featurize(
                compose_retriever_input(model.experts[i], ex.pair, ex.candidate)
            )
            for i in range(n)
        ]
        for ex in examples
    ]
    labels = [ex.label for ex in examples]
    example_ids = list(range(len(examples)))
    trace: list[TrainTrace] = []

    def label_loglik(eid: int, expert_idx: int) -> float:
        p = model.predict_features(feats[eid][expert_idx])
        return math.log(p) if labels[eid] == 1 else math.log(1.0 - p)

    previous: Assignment | None = None
    for epoch in range(config.epochs):
        assignment = e_step(example_ids, n, label_loglik)
        new_loss = assignment_loss(example_ids, assignment, label_loglik)
        if previous is not None:
            old_loss = assignment_loss(example_ids, previous, label_loglik)
            assert new_loss <= old_loss, (
                f"E-step increased the objective: {new_loss} > {old_loss}"
            )
        previous = assignment

        epoch_rng = random.Random(f"{config.seed}/epoch/{epoch}")
        order = list(example_ids)
        epoch_rng.shuffle(order)
        sum_c = 0.0
        sum_r = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            loss_c, loss_r = _sgd_batch(model, feats, labels, assignment, batch, config)
            sum_c += loss_c
            sum_r += loss_r
            n_batches += 1
        mean_c = sum_c / n_batches
        mean_r = sum_r / n_batches
        trace.append(
            TrainTrace(
                iteration=epoch,
                loss_c=mean_c,
                loss_r=mean_r,
                loss=mean_c + config.alpha * mean_r,
            )
        )
    return model, trace


def _sgd_batch(
    model: RelevanceModel,
    feats: list[list[dict[int, float]]],
    labels: list[int],
    assignment: Assignment,
    batch: list[int],
    config: RetrieverTrainConfig,
) -> tuple[float, float]:
    """One gradient step; returns the batch classification and penalty losses."""
    n = model.n_experts
    size = len(batch)
    probs = [[model.predict_features(feats[eid][i]) for i in range(n)] for eid in batch]
    grad: dict[int, float] = {}
    grad_bias = 0.0

    def accumulate(features: dict[int, float], coeff: float) -> None:
        nonlocal grad_bias
        for idx, value in features.items():
            grad[idx] = grad.get(idx, 0.0) + coeff * value
        grad_bias += coeff

    loss_c = 0.0
    for row, eid in enumerate(batch):
        expert = assignment.expert_of[eid]
        p = probs[row][expert]
        y = labels[eid]
        loss_c += -(math.log(p) if y == 1 else math.log(1.0 - p))
        accumulate(feats[eid][expert], (p - y) / size)
    loss_c /= size

    loss_r = 0.0
    if config.alpha > 0 and n > 1:
        if config.regularizer_mode == "per_example":
            for row, eid in enumerate(batch):
                dist = probs[row]
                loss_r += js_regularizer(dist)
                center = _clamp(sum(dist) / n)
                for i in range(n):
                    p = dist[i]
                    dl_dp = (_logit(p) - _logit(center)) / n
                    coeff = config.alpha * dl_dp * p * (1.0 - p) / size
                    accumulate(feats[eid][i], coeff)
            loss_r /= size
        else:  # batch_marginal: one Bernoulli per expert, averaged over the batch
            marginals = [
                _clamp(sum(probs[row][i] for row in range(size)) / size) for i in range(n)
            ]
            loss_r = js_regularizer(marginals)
            center = _clamp(sum(marginals) / n)
            for i in range(n):
                dl_dm = (_logit(marginals[i]) - _logit(center)) / n
                for row, eid in enumerate(batch):
                    p = probs[row][i]
                    coeff = config.alpha * dl_dm * p * (1.0 - p) / size
                    accumulate(feats[eid][i], coeff)

    total = loss_c + config.alpha * loss_r
    if math.isnan(total):
        raise NumericalError("NaN training loss; aborting")
    for idx, g in grad.items():
        model.weights[idx] -= config.learning_rate * g
    model.bias -= config.learning_rate * grad_bias
    return loss_c, loss_r


@dataclass
class ContextSet:
    """One expert's top-k retrieved context sentences for a pair."""

    pair: ConceptPair
    expert_index: int
    sentences: list[TokenSeq]


def retrieve_contexts(
    model: RelevanceModel,
    pair: ConceptPair,
    pool: CandidatePool,
    k: int = 3,
    exclusive: bool = False,
) -> list[ContextSet]:
    """Per expert, the top-k pool sentences by predicted relevance.

    Ties break toward the lower sentence id, so the output is invariant to
    the pool's input order. Sets may overlap unless `exclusive` is set, in
    which case sentences already taken by lower-indexed experts are skipped.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(pool) == 0:
        logger.warning("empty candidate pool for %s; returning empty context sets", pair.as_tuple())
        return [ContextSet(pair=pair, expert_index=i, sentences=[]) for i in range(model.n_experts)]
    sets: list[ContextSet] = []
    taken: set[int] = set()
    for expert in model.experts:
        scored = []
        for sid, _ in pool.members:
            if exclusive and sid in taken:
                continue
            sentence = pool.sentence(sid)
            prob = model.predict(compose_retriever_input(expert, pair, sentence))
            scored.append((-prob, sid, sentence))
        scored.sort()
        top = scored[:k]
        if exclusive:
            taken.update(sid for _, sid, _ in top)
        sets.append(
            ContextSet(pair=pair, expert_index=expert.index, sentences=[s for _, _, s in top])
        )
    return sets
