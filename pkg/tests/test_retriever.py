"""Featurization, relevance prediction, hard-EM training, context retrieval."""

import math
import random

import numpy as np
import pytest

from relmix.corpus import CandidatePool, Corpus, WordVectors, build_index, candidate_pool
from relmix.mixture import HardEMConfig, e_step, init_experts
from relmix.retriever import (
    Featurizer,
    RelevanceExample,
    RelevanceModel,
    RetrieverTrainConfig,
    build_training_set,
    compose_retriever_input,
    js_regularizer,
    retrieve_contexts,
    train,
)
from relmix.textops import CLS, SEP, ConceptPair, tokenize

PREFIX_VOCAB = [f"p{i}" for i in range(50)]


def make_experts(n, seed=0, m=4):
    return init_experts(HardEMConfig(n_experts=n, prefix_len=m, seed=seed), PREFIX_VOCAB)


def make_model(n=2, seed=0, hash_dim=4096, vectors=None):
    return RelevanceModel(
        Featurizer(hash_dim=hash_dim, vectors=vectors), make_experts(n, seed), seed=seed
    )


def degenerate_fixture(seed, n_examples=24):
    """Random candidates with alternating labels: only the expert prefix can
    explain the labels, which is exactly the constant-label failure mode."""
    rng = random.Random(f"degen/{seed}")
    vocab = [f"w{i}" for i in range(30)]
    pair = ConceptPair("alpha", "beta")
    examples = []
    for i in range(n_examples):
        cand = tuple(rng.choice(vocab) for _ in range(6))
        examples.append(RelevanceExample(pair=pair, candidate=cand, label=i % 2))
    return examples


DEGEN_CONFIG = dict(epochs=120, learning_rate=0.5, batch_size=8)


def positive_rate_gap(seed, alpha):
    examples = degenerate_fixture(seed)
    experts = make_experts(2, seed=seed)
    model = RelevanceModel(Featurizer(hash_dim=4096), experts, seed=seed)
    config = RetrieverTrainConfig(alpha=alpha, seed=seed, n_experts=2, **DEGEN_CONFIG)
    model, _ = train(model, examples, config)
    rates = []
    for expert in model.experts:
        probs = [
            model.predict(compose_retriever_input(expert, ex.pair, ex.candidate))
            for ex in examples
        ]
        rates.append(sum(probs) / len(probs))
    return abs(rates[0] - rates[1])


# -- composition and featurization ---------------------------------------------


def test_rendered_layout():
    expert = make_experts(1, seed=1, m=2)[0]
    pair = ConceptPair("dog", "sheep")
    composed = compose_retriever_input(expert, pair, ("a", "fast", "dog"))
    assert composed.rendered == expert.prefix + (
        CLS,
        "dog",
        SEP,
        "sheep",
        SEP,
        "a",
        "fast",
        "dog",
        SEP,
    )


def test_featurize_deterministic():
    model = make_model()
    composed = compose_retriever_input(model.experts[0], ConceptPair("dog", "sheep"), ("a", "dog"))
    assert model.featurizer.featurize(composed) == model.featurizer.featurize(composed)


def test_featurize_differs_across_experts():
    model = make_model(n=2)
    pair = ConceptPair("dog", "sheep")
    a = model.featurizer.featurize(compose_retriever_input(model.experts[0], pair, ("a", "dog")))
    b = model.featurizer.featurize(compose_retriever_input(model.experts[1], pair, ("a", "dog")))
    assert a != b


def test_featurize_counts_on_four_token_fixture():
    """4 distinct rendered tokens -> 4 unigrams + 3 bigrams + 3 dense features."""
    from relmix.mixture import ExpertIdentifier
    from relmix.retriever import ComposedRetrieverInput

    featurizer = Featurizer(hash_dim=1 << 18)
    input = ComposedRetrieverInput(
        expert=ExpertIdentifier(index=0, prefix=()),
        pair=ConceptPair("dog", "sheep"),
        candidate=("runs", "fast"),
        rendered=("dog", "sheep", "runs", "fast"),
    )
    features = featurizer.featurize(input)
    hashed = [idx for idx in features if idx < featurizer.hash_dim]
    assert len(hashed) == 7, "hash collision in the fixture would break this count"
    assert len(features) == 10


def test_dense_features_values():
    vectors = WordVectors(
        dim=2,
        vectors={
            "dog": np.array([1.0, 0.0]),
            "sheep": np.array([0.0, 1.0]),
            "dogs": np.array([1.0, 0.2]),
        },
    )
    featurizer = Featurizer(hash_dim=256, vectors=vectors)
    expert = make_experts(1)[0]
    pair = ConceptPair("dog", "sheep")
    composed = compose_retriever_input(expert, pair, ("dogs", "sleep"))
    features = featurizer.featurize(composed)
    assert features[256] == 1.0  # "dogs" stem-matches "dog"
    assert features[258] == 2.0  # candidate length
    expected_cos = float(
        np.dot([1.0, 0.2], [0.5, 0.5]) / (np.linalg.norm([1.0, 0.2]) * np.linalg.norm([0.5, 0.5]))
    )
    assert features[257] == pytest.approx(expected_cos, abs=1e-9)


# -- predict ---------------------------------------------------------------------


def test_predict_zero_weights_is_half():
    model = make_model()
    model.weights[:] = 0.0
    model.bias = 0.0
    composed = compose_retriever_input(model.experts[0], ConceptPair("dog", "sheep"), ("a",))
    assert model.predict(composed) == 0.5


def test_predict_clamps_saturated_margin():
    model = make_model()
    composed = compose_retriever_input(model.experts[0], ConceptPair("dog", "sheep"), ("a",))
    features = model.featurizer.featurize(composed)
    model.weights[:] = 0.0
    for idx in features:
        model.weights[idx] = 1e6
    assert model.predict(composed) == pytest.approx(1.0 - 1e-7)


def test_predict_scale_invariance():
    """Scaling features by c and weights by 1/c leaves the margin unchanged."""
    model = make_model(seed=5)
    composed = compose_retriever_input(model.experts[0], ConceptPair("dog", "sheep"), ("a", "b"))
    features = model.featurizer.featurize(composed)
    p_direct = model.predict_features(features)
    c = 37.5
    scaled = {idx: value * c for idx, value in features.items()}
    model.weights /= c
    p_scaled = model.predict_features(scaled)
    assert abs(p_direct - p_scaled) < 1e-9


# -- training set construction ---------------------------------------------------


def pool_from_sentences(pair, texts):
    sentences = {i: tokenize(t) for i, t in enumerate(texts)}
    return CandidatePool(
        pair=pair, members=[(i, False) for i in sentences], sentences=sentences
    )


def test_build_training_set_counts():
    pair = ConceptPair("dog", "sheep")
    targets = [tokenize(t) for t in ("dogs herd sheep", "a dog guards sheep", "dog sees sheep")]
    pool = pool_from_sentences(pair, [f"dog sheep filler {i}" for i in range(10)])
    out = build_training_set([(pair, targets)], {pair.as_tuple(): pool}, seed=1)
    assert sum(1 for ex in out if ex.label == 1) == 3
    assert sum(1 for ex in out if ex.label == 0) == 3


def test_build_training_set_pool_exhaustion_warns(caplog):
    pair = ConceptPair("dog", "sheep")
    targets = [tokenize(t) for t in ("dogs herd sheep", "a dog guards sheep", "dog sees sheep")]
    pool = pool_from_sentences(pair, ["dog sheep only"])
    with caplog.at_level("WARNING"):
        out = build_training_set([(pair, targets)], {pair.as_tuple(): pool}, seed=1)
    assert sum(1 for ex in out if ex.label == 0) == 1
    assert any("usable negatives" in r.message for r in caplog.records)


def test_build_training_set_excludes_positives():
    pair = ConceptPair("dog", "sheep")
    targets = [tokenize("dogs herd sheep")]
    pool = pool_from_sentences(pair, ["dogs herd sheep", "dog sheep run"])
    out = build_training_set([(pair, targets)], {pair.as_tuple(): pool}, seed=0)
    negatives = [ex.candidate for ex in out if ex.label == 0]
    assert negatives == [tokenize("dog sheep run")]


def test_build_training_set_seeded():
    pair = ConceptPair("dog", "sheep")
    targets = [tokenize(f"dog sheep target {i}") for i in range(3)]
    pool = pool_from_sentences(pair, [f"dog sheep filler {i}" for i in range(12)])
    pools = {pair.as_tuple(): pool}
    first = build_training_set([(pair, targets)], pools, seed=9)
    second = build_training_set([(pair, targets)], pools, seed=9)
    assert first == second


# -- regularizer ------------------------------------------------------------------


def test_js_regularizer_identical_is_zero():
    assert js_regularizer([0.7, 0.7, 0.7]) == 0.0


def test_js_regularizer_opposite_is_ln2():
    eps = 1e-7
    assert js_regularizer([1.0 - eps, eps]) == pytest.approx(math.log(2), abs=1e-4)


def test_js_regularizer_nonnegative_random():
    rng = random.Random(0)
    for _ in range(1000):
        n = rng.randint(1, 5)
        probs = [rng.random() for _ in range(n)]
        value = js_regularizer(probs)
        assert value >= 0.0
        if max(probs) - min(probs) > 1e-9:
            assert value > 0.0


# -- training ---------------------------------------------------------------------


def separable_fixture():
    pair = ConceptPair("dog", "sheep")
    examples = []
    for i in range(5):
        examples.append(
            RelevanceExample(pair=pair, candidate=("good", "herd", f"x{i}"), label=1)
        )
        examples.append(
            RelevanceExample(pair=pair, candidate=("bad", "noise", f"y{i}"), label=0)
        )
    return examples


def test_train_single_expert_is_logistic_regression():
    """alpha=0, n=1: loss strictly decreases on a separable 10-example fixture.

    Full batch and a step size below 1/L for this feature scale, so plain
    gradient descent is monotone.
    """
    examples = separable_fixture()
    model = make_model(n=1, seed=3)
    config = RetrieverTrainConfig(
        alpha=0.0, epochs=25, learning_rate=0.1, batch_size=10, seed=3, n_experts=1
    )
    model, trace = train(model, examples, config)
    losses = [t.loss for t in trace]
    for earlier, later in zip(losses, losses[1:]):
        assert later < earlier
    assert all(t.loss_r == 0.0 for t in trace)
    assert all(t.loss == t.loss_c for t in trace)  # alpha=0 -> loss equals loss_c


def test_train_deterministic_bitwise():
    examples = degenerate_fixture(0)
    config = RetrieverTrainConfig(
        alpha=1.0, epochs=10, learning_rate=0.5, batch_size=8, seed=4, n_experts=2
    )
    model_a, _ = train(make_model(n=2, seed=4), examples, config)
    model_b, _ = train(make_model(n=2, seed=4), examples, config)
    assert model_a.bias == model_b.bias
    assert np.array_equal(model_a.weights, model_b.weights)


def test_regularizer_prevents_constant_label_experts():
    """alpha=1 keeps per-expert positive rates close; alpha=0 lets them split."""
    gaps_reg = [positive_rate_gap(seed, alpha=1.0) for seed in range(3)]
    gaps_free = [positive_rate_gap(seed, alpha=0.0) for seed in range(3)]
    assert all(gap < 0.2 for gap in gaps_reg)
    assert all(gap >= 0.5 for gap in gaps_free)


def test_e_step_matches_bruteforce_cross_entropy():
    """Expert selection equals the per-example min over cross-entropies."""
    examples = degenerate_fixture(1)[:20]
    model = make_model(n=3, seed=2)
    feats = [
        [
            model.featurizer.featurize(compose_retriever_input(e, ex.pair, ex.candidate))
            for e in model.experts
        ]
        for ex in examples
    ]

    def loglik(eid, idx):
        p = model.predict_features(feats[eid][idx])
        return math.log(p) if examples[eid].label == 1 else math.log(1.0 - p)

    assignment = e_step(list(range(len(examples))), 3, loglik)
    for eid in range(len(examples)):
        ce = [-loglik(eid, i) for i in range(3)]
        best = min(range(3), key=lambda i: (ce[i], i))
        assert assignment.expert_of[eid] == best


def test_train_nan_loss_aborts():
    from relmix.errors import NumericalError

    examples = degenerate_fixture(0)[:4]
    model = make_model(n=2, seed=0)
    model.weights[:] = np.nan
    config = RetrieverTrainConfig(alpha=0.0, epochs=1, learning_rate=0.5, seed=0, n_experts=2)
    with pytest.raises(NumericalError):
        train(model, examples, config)


def test_trained_model_scores_heldout_positive_higher():
    examples = separable_fixture()
    model = make_model(n=1, seed=3)
    config = RetrieverTrainConfig(
        alpha=0.0, epochs=20, learning_rate=0.5, batch_size=10, seed=3, n_experts=1
    )
    model, _ = train(model, examples, config)
    held_out = compose_retriever_input(
        model.experts[0], ConceptPair("dog", "sheep"), ("good", "herd", "z9")
    )
    assert model.predict(held_out) > 0.5


# -- retrieval --------------------------------------------------------------------


def corpus_and_pool(pair, texts, min_size=1):
    corpus = Corpus(sentences=[tokenize(t) for t in texts], sources=["t"] * len(texts))
    index = build_index(corpus)
    return candidate_pool(index, corpus, pair, min_size=min_size)


def test_retrieve_pool_of_exactly_k():
    pair = ConceptPair("dog", "sheep")
    pool = corpus_and_pool(pair, ["dog sheep one", "dog sheep two", "dog sheep three"])
    model = make_model(n=2, seed=1)
    sets = retrieve_contexts(model, pair, pool, k=3)
    expected = {pool.sentence(sid) for sid, _ in pool.members}
    for cset in sets:
        assert set(cset.sentences) == expected


def test_retrieve_k1_is_argmax():
    pair = ConceptPair("dog", "sheep")
    pool = corpus_and_pool(pair, ["dog sheep one", "dog sheep two", "dog sheep three"])
    model = make_model(n=2, seed=1)
    sets = retrieve_contexts(model, pair, pool, k=1)
    for expert, cset in zip(model.experts, sets):
        scores = {
            sid: model.predict(compose_retriever_input(expert, pair, pool.sentence(sid)))
            for sid, _ in pool.members
        }
        best = max(sorted(scores), key=lambda sid: (scores[sid], -sid))
        assert cset.sentences == [pool.sentence(best)]


def test_retrieve_topk_matches_bruteforce_sort():
    pair = ConceptPair("dog", "sheep")
    pool = corpus_and_pool(pair, [f"dog sheep sentence number {i}" for i in range(6)])
    model = make_model(n=3, seed=7)
    sets = retrieve_contexts(model, pair, pool, k=3)
    for expert, cset in zip(model.experts, sets):
        ranked = sorted(
            (sid for sid, _ in pool.members),
            key=lambda sid: (
                -model.predict(compose_retriever_input(expert, pair, pool.sentence(sid))),
                sid,
            ),
        )
        assert cset.sentences == [pool.sentence(sid) for sid in ranked[:3]]


def test_retrieve_invariant_to_pool_order():
    pair = ConceptPair("dog", "sheep")
    pool = corpus_and_pool(pair, [f"dog sheep sentence number {i}" for i in range(6)])
    model = make_model(n=2, seed=7)
    shuffled = CandidatePool(
        pair=pool.pair, members=list(reversed(pool.members)), sentences=pool.sentences
    )
    sets_a = retrieve_contexts(model, pair, pool, k=3)
    sets_b = retrieve_contexts(model, pair, shuffled, k=3)
    for a, b in zip(sets_a, sets_b):
        assert a.sentences == b.sentences


def test_retrieve_empty_pool_warns(caplog):
    pair = ConceptPair("dog", "sheep")
    pool = CandidatePool(pair=pair, members=[], sentences={})
    model = make_model(n=2, seed=0)
    with caplog.at_level("WARNING"):
        sets = retrieve_contexts(model, pair, pool, k=3)
    assert len(sets) == 2
    assert all(cset.sentences == [] for cset in sets)
    assert any("empty candidate pool" in r.message for r in caplog.records)


def test_retrieve_exclusive_disjoint():
    pair = ConceptPair("dog", "sheep")
    pool = corpus_and_pool(pair, [f"dog sheep sentence number {i}" for i in range(9)])
    model = make_model(n=3, seed=7)
    sets = retrieve_contexts(model, pair, pool, k=3, exclusive=True)
    seen = set()
    for cset in sets:
        ids = {tuple(s) for s in cset.sentences}
        assert not (ids & seen)
        seen |= ids


# -- checkpointing ----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    examples = degenerate_fixture(2)
    config = RetrieverTrainConfig(
        alpha=1.0, epochs=5, learning_rate=0.5, batch_size=8, seed=2, n_experts=2
    )
    model, _ = train(make_model(n=2, seed=2), examples, config)
    path = tmp_path / "retriever.json"
    model.save(path)
    loaded = RelevanceModel.load(path)
    assert np.array_equal(loaded.weights, model.weights)
    assert loaded.bias == model.bias
    assert [e.prefix for e in loaded.experts] == [e.prefix for e in model.experts]
    pair = ConceptPair("alpha", "beta")
    composed = compose_retriever_input(model.experts[0], pair, ("w1", "w2"))
    assert loaded.predict(composed) == model.predict(composed)
