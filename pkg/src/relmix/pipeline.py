"""Pipeline orchestration: configuration, manifests, and the four stages.

Every stage reads a single resolved PipelineConfig, writes its artifacts
under the workdir, and records them in a manifest whose config hash every
checkpoint and report echoes. With a fixed config (seeds included) every
artifact is byte-identical across reruns; the manifest itself carries a
timestamp and is the one file excluded from that guarantee.

Ablation switches mirror the experiment axes: single_retriever collapses the
retriever mixture to one expert, no_regularizer zeroes the divergence
penalty, random_matching replaces the matching argmax with a seeded uniform
choice. Each one touches only the stage it names.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__, dataset as ds, generator as gen, metrics as mx, retriever as rt
from .corpus import Corpus, WordVectors, build_index, candidate_pool, ingest
from .errors import DataError
from .mixture import HardEMConfig, init_experts
from .textops import ConceptPair, detokenize, tokenize

logger = logging.getLogger(__name__)


@dataclass
class PathsConfig:
    workdir: str = "work"
    corpus: list[str] = field(default_factory=list)
    corpus_format: str = "plain"
    vectors: str = ""
    graph: str = ""
    records: str = ""
    embeddings: str = ""


@dataclass
class DatasetConfig:
    train_size: int = 0
    dev_size: int = 0
    test_size: int = 0
    unseen_dev: float = 0.9
    unseen_test: float = 0.95
    max_depth: int = 3
    dedup_threshold: float = ds.DEDUP_THRESHOLD
    truncation: str = "farthest"
    move_budget: int = 200
    seed: int = 0


@dataclass
class RetrieverConfig:
    n_experts: int = 3
    prefix_len: int = 5
    k: int = 3
    alpha: float = 1.0
    epochs: int = 10
    learning_rate: float = 0.5
    batch_size: int = 16
    hash_dim: int = rt.DEFAULT_HASH_DIM
    min_pool_size: int = 8
    regularizer_mode: str = "per_example"
    exclusive_contexts: bool = False
    seed: int = 7


@dataclass
class GeneratorStageConfig:
    n_experts: int = 3
    prefix_len: int = 5
    copy_weight: float = 0.5
    expert_weight: float = 0.7
    add_k: float = 0.01
    decoder: str = "beam"
    beam_width: int = 4
    max_len: int = 25
    em_iters: int = 5
    topk_k: int = 10
    topp_p: float = 0.9
    typical_tau: float = 0.9
    temperature: float = 1.0
    one_to_one: bool = False
    seed: int = 11


@dataclass
class MetricsConfig:
    max_n: int = 4
    success_mode: str = "per_sentence"


@dataclass
class AblationConfig:
    single_retriever: bool = False
    no_regularizer: bool = False
    random_matching: bool = False


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    generator: GeneratorStageConfig = field(default_factory=GeneratorStageConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    ablations: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self) -> None:
        n_r, n_g = self.retriever.n_experts, self.generator.n_experts
        if n_r not in (1, n_g):
            raise DataError(
                f"retriever n_experts must be 1 or equal to generator n_experts ({n_g}), got {n_r}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        def build(section_cls, key):
            data = payload.get(key, {})
            known = {f.name for f in dataclasses.fields(section_cls)}
            unknown = set(data) - known
            if unknown:
                raise DataError(f"unknown keys in config section {key!r}: {sorted(unknown)}")
            return section_cls(**data)

        unknown_sections = set(payload) - {
            "paths",
            "dataset",
            "retriever",
            "generator",
            "metrics",
            "ablations",
        }
        if unknown_sections:
            raise DataError(f"unknown config sections: {sorted(unknown_sections)}")
        return cls(
            paths=build(PathsConfig, "paths"),
            dataset=build(DatasetConfig, "dataset"),
            retriever=build(RetrieverConfig, "retriever"),
            generator=build(GeneratorStageConfig, "generator"),
            metrics=build(MetricsConfig, "metrics"),
            ablations=build(AblationConfig, "ablations"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
        config = cls.from_dict(payload)
        # Relative paths are resolved against the config file's directory.
        base = path.parent
        paths = config.paths
        paths.workdir = str((base / paths.workdir).resolve()) if paths.workdir else ""
        paths.corpus = [str((base / p).resolve()) for p in paths.corpus]
        for name in ("vectors", "graph", "records", "embeddings"):
            value = getattr(paths, name)
            if value:
                setattr(paths, name, str((base / value).resolve()))
        return config

    def apply_master_seed(self, seed: int) -> None:
        """Derive all stage seeds from one master seed."""
        self.dataset.seed = seed
        self.retriever.seed = seed + 1
        self.generator.seed = seed + 2


def write_manifest(config: PipelineConfig, stage: str, artifacts: list[str]) -> Path:
    """Record the resolved config, seeds, and artifact list for one stage.

    Written before the stage's outputs and rewritten with the final artifact
    list when the stage ends; this is the only artifact carrying a timestamp.
    """
    workdir = Path(config.paths.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    manifest_path = workdir / f"manifest-{stage}.json"
    payload = {
        "stage": stage,
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "artifacts": sorted(artifacts),
    }
    manifest_path.write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")
    return manifest_path


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")


# -- stage: build-dataset -----------------------------------------------------


def cmd_build_dataset(config: PipelineConfig) -> ds.SplitResult:
    """records -> cluster -> path-verify -> dedup -> enforce -> split -> stats."""
    paths = config.paths
    dcfg = config.dataset
    workdir = Path(paths.workdir) / "dataset"
    write_manifest(config, "build-dataset", [])
    workdir.mkdir(parents=True, exist_ok=True)

    stage = "load records"
    try:
        records = ds.load_records(paths.records)
        graph = ds.ConceptGraph.load(paths.graph)
        embeddings = ds.SentenceEmbeddings.load(paths.embeddings)

        stage = "cluster pairs"
        clusters = ds.cluster_pairs(records)
        concept_sets = {record.sentence: set(record.concepts) for record in records}

        stage = "verify graph paths"
        verified: dict[tuple[str, str], list] = {}
        for key in sorted(clusters):
            pair = ConceptPair(*key)
            kept = [
                sentence
                for sentence in clusters[key]
                if ds.verify_path(graph, pair, concept_sets.get(sentence, set()), dcfg.max_depth)
            ]
            if kept:
                verified[key] = kept

        stage = "dedup and enforce target counts"
        examples: list[ds.DatasetExample] = []
        for key in sorted(verified):
            pair = ConceptPair(*key)
            deduped = ds.dedup_filter(verified[key], embeddings, dcfg.dedup_threshold)
            example = ds.enforce_target_count(pair, deduped, embeddings, dcfg.truncation)
            if example is not None:
                examples.append(example)

        stage = "split"
        spec = ds.SplitSpec(
            train_size=dcfg.train_size,
            dev_size=dcfg.dev_size,
            test_size=dcfg.test_size,
            unseen_dev=dcfg.unseen_dev,
            unseen_test=dcfg.unseen_test,
            seed=dcfg.seed,
            move_budget=dcfg.move_budget,
        )
        result = ds.split(examples, spec)

        stage = "write artifacts"
        artifacts = []
        for name, pool in (("train", result.train), ("dev", result.dev), ("test", result.test)):
            out = workdir / f"{name}.jsonl"
            ds.write_split_file(out, pool)
            artifacts.append(str(out))
        stats_record = ds.stats(result)
        stats_json = workdir / "stats.json"
        _write_json(
            stats_json,
            {
                "config_hash": config.config_hash(),
                "counts": list(stats_record.counts),
                "unseen": [u if u is not None else None for u in stats_record.unseen],
                "avg_refs": list(stats_record.avg_refs),
                "target_shares": list(stats_record.target_shares),
                "within_tolerance": result.within_tolerance,
            },
        )
        (workdir / "stats.txt").write_text(ds.render_stats(stats_record), encoding="utf-8")
        keys = workdir / "sentence_keys.tsv"
        with open(keys, "w", encoding="utf-8") as handle:
            for record in records:
                handle.write(f"{ds.sentence_key(record.sentence)}\t{detokenize(record.sentence)}\n")
        artifacts.extend([str(stats_json), str(workdir / "stats.txt"), str(keys)])
        write_manifest(config, "build-dataset", artifacts)
        return result
    except DataError as exc:
        raise DataError(f"build-dataset failed at stage '{stage}': {exc}") from exc


# -- stage: index -------------------------------------------------------------


def load_corpus(config: PipelineConfig) -> Corpus:
    if not config.paths.corpus:
        raise DataError("no corpus paths configured")
    sentences = []
    sources = []
    for path in config.paths.corpus:
        part = ingest(path, format=config.paths.corpus_format)
        sentences.extend(part.sentences)
        sources.extend(part.sources)
    return Corpus(sentences=sentences, sources=sources)


def cmd_index(config: PipelineConfig) -> Path:
    """Ingest the corpora and persist the merged corpus plus its postings."""
    workdir = Path(config.paths.workdir) / "index"
    write_manifest(config, "index", [])
    workdir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(config)
    index = build_index(corpus)
    corpus_path = workdir / "corpus.json"
    _write_json(
        corpus_path,
        {
            "config_hash": config.config_hash(),
            "sentences": [detokenize(s) for s in corpus.sentences],
            "sources": corpus.sources,
        },
    )
    postings_path = workdir / "postings.json"
    _write_json(
        postings_path,
        {"config_hash": config.config_hash(), "postings": index.postings},
    )
    write_manifest(config, "index", [str(corpus_path), str(postings_path)])
    return corpus_path


# -- stage: train -------------------------------------------------------------


def _pools_for(
    config: PipelineConfig,
    corpus: Corpus,
    vectors: WordVectors | None,
    pairs: list[ConceptPair],
):
    index = build_index(corpus)
    pools = {}
    for pair in pairs:
        key = pair.canonical().as_tuple()
        if key not in pools:
            pools[key] = candidate_pool(
                index, corpus, pair.canonical(), config.retriever.min_pool_size, vectors
            )
    return pools


def _context_sets_for(
    config: PipelineConfig,
    model: rt.RelevanceModel,
    pools,
    pairs: list[ConceptPair],
) -> dict[tuple[str, str], list[rt.ContextSet]]:
    sets = {}
    for pair in pairs:
        key = pair.canonical().as_tuple()
        if key not in sets:
            sets[key] = rt.retrieve_contexts(
                model,
                pair.canonical(),
                pools[key],
                k=config.retriever.k,
                exclusive=config.retriever.exclusive_contexts,
            )
    return sets


def cmd_train(config: PipelineConfig) -> tuple[Path, Path]:
    """Train the retriever mixture, retrieve contexts, train the generators."""
    workdir = Path(config.paths.workdir) / "train"
    write_manifest(config, "train", [])
    workdir.mkdir(parents=True, exist_ok=True)
    rcfg = config.retriever
    gcfg = config.generator

    train_examples = ds.read_split_file(Path(config.paths.workdir) / "dataset" / "train.jsonl")
    if not train_examples:
        raise DataError("training split is empty")
    corpus = load_corpus(config)
    vectors = WordVectors.load(config.paths.vectors) if config.paths.vectors else None

    n_retrievers = 1 if config.ablations.single_retriever else rcfg.n_experts
    alpha = 0.0 if config.ablations.no_regularizer else rcfg.alpha

    pairs = [example.pair for example in train_examples]
    pools = _pools_for(config, corpus, vectors, pairs)

    # Retriever stage.
    prefix_vocab = corpus.vocabulary()
    retriever_experts = init_experts(
        HardEMConfig(
            n_experts=n_retrievers, prefix_len=rcfg.prefix_len, max_iters=rcfg.epochs, seed=rcfg.seed
        ),
        prefix_vocab,
    )
    featurizer = rt.Featurizer(hash_dim=rcfg.hash_dim, vectors=vectors)
    relevance = rt.RelevanceModel(
        featurizer=featurizer, experts=retriever_experts, seed=rcfg.seed
    )
    training_set = rt.build_training_set(
        [(example.pair, example.targets) for example in train_examples], pools, seed=rcfg.seed
    )
    relevance, retriever_trace = rt.train(
        relevance,
        training_set,
        rt.RetrieverTrainConfig(
            alpha=alpha,
            epochs=rcfg.epochs,
            learning_rate=rcfg.learning_rate,
            batch_size=rcfg.batch_size,
            seed=rcfg.seed,
            n_experts=n_retrievers,
            prefix_len=rcfg.prefix_len,
            regularizer_mode=rcfg.regularizer_mode,
        ),
    )
    retriever_path = workdir / "retriever.json"
    relevance.save(retriever_path)

    # Context retrieval for every training pair.
    context_sets = _context_sets_for(config, relevance, pools, pairs)
    contexts_path = workdir / "contexts_train.jsonl"
    with open(contexts_path, "w", encoding="utf-8") as handle:
        for example in train_examples:
            key = example.pair.canonical().as_tuple()
            record = {
                "pair": list(example.pair.as_tuple()),
                "contexts": [
                    [detokenize(s) for s in cset.sentences] for cset in context_sets[key]
                ],
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")

    # Generator stage.
    generator_config = gen.GeneratorConfig(
        n_experts=gcfg.n_experts,
        prefix_len=gcfg.prefix_len,
        copy_weight=gcfg.copy_weight,
        expert_weight=gcfg.expert_weight,
        add_k=gcfg.add_k,
        beam_width=gcfg.beam_width,
        max_len=gcfg.max_len,
        em_iters=gcfg.em_iters,
        seed=gcfg.seed,
    )
    generator_experts = init_experts(
        HardEMConfig(
            n_experts=gcfg.n_experts,
            prefix_len=gcfg.prefix_len,
            max_iters=gcfg.em_iters or 1,
            seed=gcfg.seed,
        ),
        prefix_vocab,
    )
    vocab = set(corpus.vocabulary())
    for example in train_examples:
        vocab.update(example.pair.as_tuple())
        for target in example.targets:
            vocab.update(target)
    model = gen.GeneratorModel(vocab=sorted(vocab), experts=generator_experts, config=generator_config)
    model.initialize_background([t for example in train_examples for t in example.targets])

    items = []
    for example in train_examples:
        key = example.pair.canonical().as_tuple()
        sets = context_sets[key]
        inputs = [
            gen.compose_generator_input(expert, example.pair, sets[min(i, len(sets) - 1)])
            for i, expert in enumerate(model.experts)
        ]
        items.append(
            gen.GeneratorTrainItem(pair=example.pair, inputs=inputs, targets=example.targets)
        )

    em_losses: list[float] = []
    if config.ablations.random_matching:
        gen.train_random_matching(model, items, seed=gcfg.seed)
    else:
        model, em_result = gen.train_em(model, items, iters=gcfg.em_iters, one_to_one=gcfg.one_to_one)
        em_losses = em_result.losses
    generator_path = workdir / "generator.json"
    model.save(generator_path)

    traces_path = workdir / "traces.json"
    _write_json(
        traces_path,
        {
            "config_hash": config.config_hash(),
            "retriever": [dataclasses.asdict(t) for t in retriever_trace],
            "generator_em": em_losses,
        },
    )
    write_manifest(
        config,
        "train",
        [str(retriever_path), str(generator_path), str(contexts_path), str(traces_path)],
    )
    return retriever_path, generator_path


# -- stage: generate ----------------------------------------------------------


def cmd_generate(config: PipelineConfig, split: str = "test") -> Path:
    """Retrieve contexts and decode one output per expert for each pair."""
    if split not in ("train", "dev", "test", "all"):
        raise DataError(f"unknown split {split!r}")
    workdir = Path(config.paths.workdir)
    gen_dir = workdir / "generate"
    write_manifest(config, f"generate-{split}", [])
    gen_dir.mkdir(parents=True, exist_ok=True)

    retriever_path = workdir / "train" / "retriever.json"
    generator_path = workdir / "train" / "generator.json"
    for path in (retriever_path, generator_path):
        if not path.exists():
            raise DataError(f"missing checkpoint: {path} (run the train stage first)")
    vectors = WordVectors.load(config.paths.vectors) if config.paths.vectors else None
    relevance = rt.RelevanceModel.load(retriever_path, vectors=vectors)
    model = gen.GeneratorModel.load(generator_path)
    corpus = load_corpus(config)

    if split == "all":
        examples = []
        for name in ("train", "dev", "test"):
            examples.extend(ds.read_split_file(workdir / "dataset" / f"{name}.jsonl"))
    else:
        examples = ds.read_split_file(workdir / "dataset" / f"{split}.jsonl")
    pairs = [example.pair for example in examples]
    pools = _pools_for(config, corpus, vectors, pairs)
    context_sets = _context_sets_for(config, relevance, pools, pairs)

    gcfg = config.generator
    decoder_params = {
        "beam_width": gcfg.beam_width,
        "max_len": gcfg.max_len,
        "k": gcfg.topk_k,
        "p": gcfg.topp_p,
        "tau": gcfg.typical_tau,
        "temperature": gcfg.temperature,
    }
    out_path = gen_dir / f"generations_{split}.jsonl"
    with open(out_path, "w", encoding="utf-8") as handle:
        for example in examples:
            key = example.pair.canonical().as_tuple()
            result = gen.generate_set(
                model,
                example.pair,
                context_sets[key],
                decoder=gcfg.decoder,
                decoder_params=decoder_params,
                seed=gcfg.seed,
            )
            record = {
                "pair": list(example.pair.as_tuple()),
                "outputs": [detokenize(tokens) for tokens in result.outputs],
                "expert": result.experts,
                "decoder": result.decoder,
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    write_manifest(config, f"generate-{split}", [str(out_path)])
    return out_path


# -- stage: evaluate ----------------------------------------------------------


def read_generations(path: str | Path) -> list[tuple[ConceptPair, list]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"generations file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                pair = ConceptPair(payload["pair"][0], payload["pair"][1])
                outputs = [tokenize(text) for text in payload["outputs"]]
            except (json.JSONDecodeError, KeyError, IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad generation record: {exc}") from exc
            out.append((pair, outputs))
    if not out:
        raise DataError(f"generations file is empty: {path}")
    return out


def cmd_evaluate(
    config: PipelineConfig,
    generations_path: str | Path,
    references_path: str | Path,
) -> mx.MetricReport:
    """Join generations with references by pair and run the metric protocol."""
    workdir = Path(config.paths.workdir) / "evaluate"
    write_manifest(config, "evaluate", [])
    workdir.mkdir(parents=True, exist_ok=True)
    generations = read_generations(generations_path)
    references = ds.read_split_file(references_path)
    ref_by_pair = {e.pair.canonical().as_tuple(): e.targets for e in references}
    gen_keys = [pair.canonical().as_tuple() for pair, _ in generations]
    missing = sorted(set(gen_keys) - set(ref_by_pair))
    extra = sorted(set(ref_by_pair) - set(gen_keys))
    if missing or extra:
        raise DataError(
            f"pair mismatch between generations and references; "
            f"no references for {missing or 'none'}, no generations for {extra or 'none'}"
        )
    pairs = [pair for pair, _ in generations]
    candidate_sets = [outputs for _, outputs in generations]
    reference_sets = [ref_by_pair[key] for key in gen_keys]
    report = mx.evaluate_all(
        pairs,
        candidate_sets,
        reference_sets,
        max_n=config.metrics.max_n,
        success_mode=config.metrics.success_mode,
    )
    tsv_path = workdir / "report.tsv"
    tsv_path.write_text(mx.render_tsv(report), encoding="utf-8")
    table_path = workdir / "report.txt"
    table_path.write_text(mx.render_table(report), encoding="utf-8")
    json_path = workdir / "report.json"
    _write_json(
        json_path,
        {
            "config_hash": config.config_hash(),
            **{name: getattr(report, name) for name in mx.MetricReport.METRIC_FIELDS},
            "n_pairs": report.n_pairs,
            "n_generations": report.n_generations,
        },
    )
    write_manifest(config, "evaluate", [str(tsv_path), str(table_path), str(json_path)])
    return report
