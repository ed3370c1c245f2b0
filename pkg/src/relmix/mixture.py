"""Generic mixture-of-experts machinery: latent prefix identifiers and hard-EM.

Training alternates an E-step that assigns every example to its best-scoring
expert with an M-step callback that refits parameters on the assigned data.
Under a uniform prior over experts the posterior argmax equals the
conditional-likelihood argmax, so the E-step only needs per-expert
log-likelihood scores. The reported loss per iteration is the mean over
examples of the minimum negative log-likelihood across experts.

E-step scoring may fan out across examples; the merge here is a fixed-order
reduction so results do not depend on evaluation order. The M-step callback
is the single writer of parameters (it may itself process data in batches).
"""

from __future__ import annotations

import math
import random
from collections.abc import Callable, Hashable, Sequence
from dataclasses import dataclass, field

from .errors import NumericalError
from .textops import TokenSeq

ExampleId = Hashable
ScoreFn = Callable[[ExampleId, int], float]

_MAX_SAMPLING_ATTEMPTS = 1000


@dataclass(frozen=True)
class ExpertIdentifier:
    """One expert's latent identity: a fixed random prefix token sequence."""

    index: int
    prefix: TokenSeq


@dataclass
class HardEMConfig:
    n_experts: int = 3
    prefix_len: int = 5
    max_iters: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_experts < 1 or self.prefix_len < 1 or self.max_iters < 0:
            raise ValueError(f"invalid hard-EM config: {self}")


@dataclass
class Assignment:
    """Maps every example id to exactly one expert index."""

    expert_of: dict[ExampleId, int]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Assignment):
            return NotImplemented
        return self.expert_of == other.expert_of


@dataclass
class HardEMResult:
    params: object
    assignment: Assignment
    losses: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def init_experts(config: HardEMConfig, vocab: Sequence[str]) -> list[ExpertIdentifier]:
    """Sample n pairwise-distinct random prefixes of length m from the vocabulary.

    Deterministic for a given seed. Identical prefixes would collapse experts,
    so duplicates are resampled; impossible-to-distinguish configurations are
    rejected up front.
    """
    if not vocab:
        raise ValueError("prefix vocabulary is empty")
    distinct = len(set(vocab))
    if distinct ** config.prefix_len < config.n_experts:
        raise ValueError(
            f"cannot draw {config.n_experts} distinct prefixes of length "
            f"{config.prefix_len} from {distinct} tokens"
        )
    rng = random.Random(config.seed)
    prefixes: list[TokenSeq] = []
    seen: set[TokenSeq] = set()
    attempts = 0
    while len(prefixes) < config.n_experts:
        candidate = tuple(rng.choice(vocab) for _ in range(config.prefix_len))
        attempts += 1
        if candidate in seen:
            if attempts > _MAX_SAMPLING_ATTEMPTS * config.n_experts:
                raise ValueError("could not sample distinct expert prefixes")
            continue
        seen.add(candidate)
        prefixes.append(candidate)
    return [ExpertIdentifier(index=i, prefix=p) for i, p in enumerate(prefixes)]


def e_step(example_ids: Sequence[ExampleId], n_experts: int, score: ScoreFn) -> Assignment:
    """Assign each example to the expert with the highest log-likelihood.

    Ties go to the lowest expert index. -inf scores are allowed; NaN is an
    error.
    """
    expert_of: dict[ExampleId, int] = {}
    for example_id in example_ids:
        best_idx = 0
        best_score = -math.inf
        for idx in range(n_experts):
            value = score(example_id, idx)
            if math.isnan(value):
                raise NumericalError(f"NaN score for example {example_id!r}, expert {idx}")
            if idx == 0 or value > best_score:
                best_idx = idx
                best_score = value
        expert_of[example_id] = best_idx
    return Assignment(expert_of=expert_of)


def random_assignment(
    example_ids: Sequence[ExampleId], n_experts: int, seed: int
) -> Assignment:
    """Seeded uniform assignment, the usual hard-EM initializer."""
    rng = random.Random(seed)
    return Assignment(expert_of={eid: rng.randrange(n_experts) for eid in example_ids})


def assignment_loss(
    example_ids: Sequence[ExampleId], assignment: Assignment, score: ScoreFn
) -> float:
    """Mean of -log p(example | assigned expert) in a fixed reduction order."""
    if not example_ids:
        return 0.0
    total = 0.0
    for example_id in example_ids:
        total += -score(example_id, assignment.expert_of[example_id])
    return total / len(example_ids)


def run_hard_em(
    example_ids: Sequence[ExampleId],
    score: ScoreFn,
    m_step: Callable[[Assignment], object],
    config: HardEMConfig,
    init_assignment: Assignment | None = None,
) -> HardEMResult:
    """Alternate E and M steps until the assignment stops changing.

    `score` must reflect the parameters most recently produced by `m_step`
    (typically via a shared model object). When `init_assignment` is given,
    one M-step runs on it before the first E-step, which is how count-based
    models break symmetry. Each iteration asserts that reassignment did not
    increase the objective under the current parameters; this is exact for
    an argmax E-step.
    """
    params: object = None
    if init_assignment is not None:
        params = m_step(init_assignment)
    previous: Assignment | None = None
    result = HardEMResult(params=params, assignment=Assignment(expert_of={}))
    for _ in range(config.max_iters):
        assignment = e_step(example_ids, config.n_experts, score)
        new_loss = assignment_loss(example_ids, assignment, score)
        if previous is not None:
            old_loss = assignment_loss(example_ids, previous, score)
            assert new_loss <= old_loss, (
                f"E-step increased the objective: {new_loss} > {old_loss}"
            )
        result.losses.append(new_loss)
        result.iterations += 1
        if previous is not None and assignment == previous:
            result.converged = True
            result.assignment = assignment
            return result
        params = m_step(assignment)
        result.params = params
        result.assignment = assignment
        previous = assignment
    return result
