"""Single executable driving the full workflow from one JSON config file.

Subcommands follow the pipeline order: ingest -> index -> knowledge ->
detect -> evaluate (ablate runs detect twice, with and without retrieval,
then compares; report re-renders a stored evaluation). Each step checks its
prerequisites and exits 2 with a remediation hint when they are missing.
Run directories are addressed by the config digest unless --run-id is given.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import corpus_ingest, detection_pipeline, evaluation, retrieval
from .dataset import encode_one_hot, load_ground_truth, load_samples, load_taxonomy, read_annotation_file
from .errors import ConfigError, CorpusError, LockError, PbfRagError, PrerequisiteError
from .model_gateway import MockBackend, ModelGateway, RemoteBackend
from .vector_index import (
    KIND_PAGE_IMAGE_PROXY,
    KIND_TEXT_CHUNK,
    IndexEntry,
    VectorIndex,
)

SUBCOMMANDS = ("ingest", "index", "knowledge", "detect", "evaluate", "ablate", "report")

_INDEX_FILENAME = "index.pbfidx"
_LOCK_FILENAME = ".pbf-rag.lock"
_EMBED_BATCH = 64

_BACKEND_KINDS = ("mock", "remote")
_DEFAULT_MODELS = {
    "chat": "gpt-4o-mini",
    "vision": "qwen2-vl-2b-instruct",
    "embedding": "text-embedding-ada-002",
}


@dataclass(frozen=True)
class RunConfig:
    dataset_config: Path
    annotations: Path
    corpus_manifest: Path
    output_dir: Path
    backends: dict[str, str]
    models: dict[str, str]
    remote_base_url: str | None
    remote_timeout: float
    retrieval: retrieval.RetrievalParams
    chunk_size: int
    overlap: int
    embedding_dim: int
    repetitions: int
    classification_mode: str
    ablate_retrieval: bool
    seed: int | None
    oracle_annotations: Path | None
    strict_fixtures: bool
    max_workers: int
    digest: str

    @property
    def uses_mock(self) -> bool:
        return "mock" in self.backends.values()

    @property
    def uses_remote(self) -> bool:
        return "remote" in self.backends.values()


def _require_keys(raw: dict, allowed: set[str], context: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {context}")


def _typed(raw: dict, key: str, types, default, context: str):
    value = raw.get(key, default)
    if value is None and default is None:
        return None
    if not isinstance(value, types) or (types is int and isinstance(value, bool)):
        raise ConfigError(f"{context}: {key!r} has the wrong type")
    return value


def parse_config(path: str | Path) -> RunConfig:
    """Validate the run config file; unknown keys are rejected by name."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")

    allowed = {
        "dataset_config",
        "annotations",
        "corpus_manifest",
        "output_dir",
        "backends",
        "models",
        "remote",
        "retrieval",
        "chunking",
        "embedding_dim",
        "repetitions",
        "classification_mode",
        "ablate_retrieval",
        "seed",
        "mock",
        "max_workers",
    }
    _require_keys(raw, allowed, "config")

    base = path.parent

    def required_path(key: str) -> Path:
        value = raw.get(key)
        if not isinstance(value, str) or not value:
            raise ConfigError(f"config: {key!r} must be a non-empty path string")
        resolved = Path(value)
        if not resolved.is_absolute():
            resolved = base / resolved
        if not resolved.exists():
            raise ConfigError(f"config: {key!r} points to a missing path: {resolved}")
        return resolved

    dataset_config = required_path("dataset_config")
    annotations = required_path("annotations")
    corpus_manifest = required_path("corpus_manifest")

    output_value = raw.get("output_dir")
    if not isinstance(output_value, str) or not output_value:
        raise ConfigError("config: 'output_dir' must be a non-empty path string")
    output_dir = Path(output_value)
    if not output_dir.is_absolute():
        output_dir = base / output_dir

    backends_raw = raw.get("backends", {})
    if not isinstance(backends_raw, dict):
        raise ConfigError("config: 'backends' must be an object")
    _require_keys(backends_raw, {"chat", "vision", "embedding"}, "config.backends")
    backends = {}
    for capability in ("chat", "vision", "embedding"):
        kind = backends_raw.get(capability, "mock")
        if kind not in _BACKEND_KINDS:
            raise ConfigError(
                f"config.backends: {capability!r} must be one of {list(_BACKEND_KINDS)}"
            )
        backends[capability] = kind

    models_raw = raw.get("models", {})
    if not isinstance(models_raw, dict):
        raise ConfigError("config: 'models' must be an object")
    _require_keys(models_raw, {"chat", "vision", "embedding"}, "config.models")
    models = dict(_DEFAULT_MODELS)
    for capability, value in models_raw.items():
        if not isinstance(value, str) or not value:
            raise ConfigError(f"config.models: {capability!r} must be a non-empty string")
        models[capability] = value

    remote_raw = raw.get("remote", {})
    if not isinstance(remote_raw, dict):
        raise ConfigError("config: 'remote' must be an object")
    _require_keys(remote_raw, {"base_url", "timeout"}, "config.remote")
    remote_base_url = remote_raw.get("base_url")
    remote_timeout = float(_typed(remote_raw, "timeout", (int, float), 60.0, "config.remote"))
    if "remote" in backends.values() and not remote_base_url:
        raise ConfigError("config: remote backends require remote.base_url")

    retrieval_raw = raw.get("retrieval", {})
    if not isinstance(retrieval_raw, dict):
        raise ConfigError("config: 'retrieval' must be an object")
    _require_keys(
        retrieval_raw,
        {"k_text", "k_image", "image_score_threshold", "use_vision_usability_check"},
        "config.retrieval",
    )
    try:
        retrieval_params = retrieval.RetrievalParams(
            k_text=_typed(retrieval_raw, "k_text", int, retrieval.DEFAULT_K_TEXT, "config.retrieval"),
            k_image=_typed(retrieval_raw, "k_image", int, retrieval.DEFAULT_K_IMAGE, "config.retrieval"),
            image_score_threshold=float(
                _typed(
                    retrieval_raw,
                    "image_score_threshold",
                    (int, float),
                    retrieval.DEFAULT_IMAGE_SCORE_THRESHOLD,
                    "config.retrieval",
                )
            ),
            use_vision_usability_check=bool(
                _typed(retrieval_raw, "use_vision_usability_check", bool, False, "config.retrieval")
            ),
        )
    except PbfRagError as exc:
        raise ConfigError(f"config.retrieval: {exc}") from exc

    chunking_raw = raw.get("chunking", {})
    if not isinstance(chunking_raw, dict):
        raise ConfigError("config: 'chunking' must be an object")
    _require_keys(chunking_raw, {"chunk_size", "overlap"}, "config.chunking")
    chunk_size = _typed(chunking_raw, "chunk_size", int, corpus_ingest.DEFAULT_CHUNK_SIZE, "config.chunking")
    overlap = _typed(chunking_raw, "overlap", int, corpus_ingest.DEFAULT_OVERLAP, "config.chunking")
    if not 0 <= overlap < chunk_size:
        raise ConfigError("config.chunking: require 0 <= overlap < chunk_size")

    embedding_dim = _typed(raw, "embedding_dim", int, 2048, "config")
    if embedding_dim < 8:
        raise ConfigError("config: 'embedding_dim' must be >= 8")

    repetitions = _typed(raw, "repetitions", int, detection_pipeline.DEFAULT_REPETITIONS, "config")
    if repetitions < 1:
        raise ConfigError("config: 'repetitions' must be >= 1")

    classification_mode = _typed(
        raw, "classification_mode", str, detection_pipeline.MODE_PER_REPETITION, "config"
    )
    if classification_mode not in (
        detection_pipeline.MODE_PER_REPETITION,
        detection_pipeline.MODE_COMBINED,
    ):
        raise ConfigError(
            "config: 'classification_mode' must be 'per_repetition' or 'combined'"
        )

    ablate_retrieval = bool(_typed(raw, "ablate_retrieval", bool, False, "config"))
    seed = _typed(raw, "seed", int, None, "config")

    mock_raw = raw.get("mock", {})
    if not isinstance(mock_raw, dict):
        raise ConfigError("config: 'mock' must be an object")
    _require_keys(mock_raw, {"oracle_annotations", "strict_fixtures"}, "config.mock")
    oracle_annotations = None
    oracle_value = mock_raw.get("oracle_annotations")
    if oracle_value is not None:
        if not isinstance(oracle_value, str) or not oracle_value:
            raise ConfigError("config.mock: 'oracle_annotations' must be a path string")
        oracle_annotations = Path(oracle_value)
        if not oracle_annotations.is_absolute():
            oracle_annotations = base / oracle_annotations
        if not oracle_annotations.is_file():
            raise ConfigError(f"config.mock: oracle annotations not found: {oracle_annotations}")
    strict_fixtures = bool(_typed(mock_raw, "strict_fixtures", bool, False, "config.mock"))

    max_workers = _typed(raw, "max_workers", int, 1, "config")
    if max_workers < 1:
        raise ConfigError("config: 'max_workers' must be >= 1")

    if "mock" in backends.values() and seed is None:
        raise ConfigError("config: 'seed' is required when any backend is 'mock'")

    normalized = {
        "dataset_config": str(raw["dataset_config"]),
        "annotations": str(raw["annotations"]),
        "corpus_manifest": str(raw["corpus_manifest"]),
        "output_dir": str(raw["output_dir"]),
        "backends": backends,
        "models": models,
        "remote": {"base_url": remote_base_url, "timeout": remote_timeout},
        "retrieval": retrieval_params.cache_key(),
        "chunking": {"chunk_size": chunk_size, "overlap": overlap},
        "embedding_dim": embedding_dim,
        "repetitions": repetitions,
        "classification_mode": classification_mode,
        "ablate_retrieval": ablate_retrieval,
        "seed": seed,
        "mock": {
            "oracle_annotations": str(oracle_value) if oracle_value else None,
            "strict_fixtures": strict_fixtures,
        },
        "max_workers": max_workers,
    }
    digest = hashlib.sha256(
        json.dumps(normalized, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()

    return RunConfig(
        dataset_config=dataset_config,
        annotations=annotations,
        corpus_manifest=corpus_manifest,
        output_dir=output_dir,
        backends=backends,
        models=models,
        remote_base_url=remote_base_url,
        remote_timeout=remote_timeout,
        retrieval=retrieval_params,
        chunk_size=chunk_size,
        overlap=overlap,
        embedding_dim=embedding_dim,
        repetitions=repetitions,
        classification_mode=classification_mode,
        ablate_retrieval=ablate_retrieval,
        seed=seed,
        oracle_annotations=oracle_annotations,
        strict_fixtures=strict_fixtures,
        max_workers=max_workers,
        digest=digest,
    )


@contextlib.contextmanager
def _directory_lock(output_dir: Path):
    output_dir.mkdir(parents=True, exist_ok=True)
    lock_path = output_dir / _LOCK_FILENAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(
            f"another invocation holds {lock_path}; remove it if no other process is running"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            lock_path.unlink()


def build_gateway(config: RunConfig, strict_fixtures: bool = False) -> ModelGateway:
    mock = None
    remote = None
    if config.uses_mock:
        mock = MockBackend(
            seed=config.seed or 0,
            embedding_dim=config.embedding_dim,
            strict=config.strict_fixtures or strict_fixtures,
        )
        if config.oracle_annotations is not None:
            _wire_oracle(mock, config)
    if config.uses_remote:
        remote = RemoteBackend(
            base_url=config.remote_base_url or "",
            models=config.models,
            timeout=config.remote_timeout,
        )
    chosen = {"mock": mock, "remote": remote}
    return ModelGateway(
        chat_backend=chosen[config.backends["chat"]],
        vision_backend=chosen[config.backends["vision"]],
        embedding_backend=chosen[config.backends["embedding"]],
    )


def _wire_oracle(mock: MockBackend, config: RunConfig) -> None:
    rows = read_annotation_file(config.oracle_annotations)
    base = config.oracle_annotations.parent
    for row in rows:
        for ref in row["images"].values():
            image_path = Path(ref)
            if not image_path.is_absolute():
                image_path = base / image_path
            if not image_path.is_file():
                raise ConfigError(f"mock oracle image not found: {image_path}")
            digest = hashlib.sha256(image_path.read_bytes()).hexdigest()
            mock.configure_oracle(digest, row["anomalies"])


def _corpus_store(config: RunConfig) -> corpus_ingest.CorpusStore:
    try:
        return corpus_ingest.CorpusStore(config.output_dir / "corpus")
    except CorpusError as exc:
        raise PrerequisiteError(str(exc), hint="run `ingest` first") from exc


def _load_index(config: RunConfig) -> VectorIndex:
    index_path = config.output_dir / _INDEX_FILENAME
    if not index_path.is_file():
        raise PrerequisiteError(f"no index at {index_path}", hint="run `index` first")
    return VectorIndex.load(index_path)


def cmd_ingest(config: RunConfig) -> None:
    store = corpus_ingest.ingest_corpus(
        config.corpus_manifest,
        config.output_dir / "corpus",
        chunk_size=config.chunk_size,
        overlap=config.overlap,
    )
    print(f"ingested {len(store.doc_ids())} documents into {store.root}")


def cmd_index(config: RunConfig) -> None:
    store = _corpus_store(config)
    gateway = build_gateway(config)
    index = VectorIndex()

    chunk_rows = [(f"chunk:{c.chunk_id}", c.chunk_id, c.text) for c in store.iter_chunks()]
    page_rows = [
        (f"page:{doc_id}:{page_no}", (doc_id, page_no), text)
        for doc_id, page_no, text in store.iter_pages()
        if text.strip()
    ]
    for kind, rows in ((KIND_TEXT_CHUNK, chunk_rows), (KIND_PAGE_IMAGE_PROXY, page_rows)):
        for start in range(0, len(rows), _EMBED_BATCH):
            batch = rows[start : start + _EMBED_BATCH]
            vectors = gateway.embed_batch([text for _, _, text in batch])
            for (entry_id, payload, _), vector in zip(batch, vectors):
                index.upsert(
                    IndexEntry(entry_id=entry_id, vector=vector, kind=kind, payload_ref=payload)
                )
    index_path = config.output_dir / _INDEX_FILENAME
    index.save(index_path)
    print(f"indexed {len(index)} entries ({len(chunk_rows)} chunks, {len(page_rows)} pages) -> {index_path}")


def cmd_knowledge(config: RunConfig) -> None:
    store = _corpus_store(config)
    index = _load_index(config)
    taxonomy = load_taxonomy(config.dataset_config)
    gateway = build_gateway(config)
    cache = retrieval.KnowledgeCache(
        config.output_dir / "knowledge", taxonomy.dataset_id, store.digest
    )
    for name in taxonomy:
        knowledge = retrieval.build_anomaly_knowledge(
            name, index, gateway, config.retrieval, store, cache=cache
        )
        status = "image+text" if knowledge.reference_image is not None else "text-only"
        print(f"knowledge[{name}]: {status} ({knowledge.image_status})")


def _load_knowledge_map(config: RunConfig, taxonomy, store) -> dict:
    cache = retrieval.KnowledgeCache(
        config.output_dir / "knowledge", taxonomy.dataset_id, store.digest
    )
    knowledge_map = {}
    for name in taxonomy:
        knowledge = cache.get(name, config.retrieval)
        if knowledge is None:
            raise PrerequisiteError(
                f"no cached knowledge packet for {name!r}", hint="run `knowledge` first"
            )
        knowledge_map[name] = knowledge
    return knowledge_map


def _run_detection_job(config: RunConfig, run_dir: Path, ablate: bool, strict_fixtures: bool) -> None:
    taxonomy = load_taxonomy(config.dataset_config)
    samples = sorted(
        load_samples(config.annotations, taxonomy), key=lambda s: s.sample_id
    )
    gateway = build_gateway(config, strict_fixtures)
    corpus_digest = None
    knowledge_map = None
    if not ablate:
        store = _corpus_store(config)
        _load_index(config)  # prerequisite check
        knowledge_map = _load_knowledge_map(config, taxonomy, store)
        corpus_digest = store.digest

    def process(sample):
        result = detection_pipeline.classify_sample(
            sample,
            taxonomy,
            knowledge_map,
            gateway,
            repetitions=config.repetitions,
            ablate_retrieval=ablate,
            classification_mode=config.classification_mode,
        )
        if ablate:
            explanation = detection_pipeline.ablated_explanation(result)
        else:
            explanation = detection_pipeline.generate_explanation(result, knowledge_map, gateway)
        return result, explanation

    if config.max_workers > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            outcomes = list(pool.map(process, samples))
    else:
        outcomes = [process(sample) for sample in samples]

    run_dir.mkdir(parents=True, exist_ok=True)
    for result, explanation in outcomes:
        detection_pipeline.write_sample_artifact(run_dir, result, explanation)
    detection_pipeline.write_run_manifest(
        run_dir,
        {
            "arm": "without_retrieval" if ablate else "with_retrieval",
            "backend_ids": gateway.backend_ids(),
            "config_digest": config.digest,
            "corpus_digest": corpus_digest,
            "dataset_id": taxonomy.dataset_id,
            "repetitions": config.repetitions,
            "samples": [s.sample_id for s in samples],
        },
    )
    print(f"detect: wrote {len(outcomes)} sample artifacts -> {run_dir}")


def _evaluate_run(config: RunConfig, run_dir: Path) -> evaluation.EvaluationReport:
    taxonomy = load_taxonomy(config.dataset_config)
    predictions = detection_pipeline.load_run_predictions(run_dir)
    if not predictions:
        raise PrerequisiteError(f"no sample artifacts in {run_dir}", hint="run `detect` first")
    truth_sets = load_ground_truth(config.annotations, taxonomy)
    truths = {sid: encode_one_hot(names, taxonomy) for sid, names in truth_sets.items()}
    report = evaluation.build_report(predictions, truths, taxonomy)
    (run_dir / "report.json").write_bytes(evaluation.emit_report(report, "json"))
    (run_dir / "report.md").write_bytes(evaluation.emit_report(report, "markdown"))
    print(
        f"evaluate: dataset average {evaluation.format_ratio(report.dataset_average)} -> "
        f"{run_dir / 'report.md'}"
    )
    return report


def _run_dir(config: RunConfig, run_id: str | None, suffix: str = "") -> Path:
    base = run_id or config.digest[:12]
    return config.output_dir / "runs" / f"{base}{suffix}"


def dispatch(
    subcommand: str,
    config: RunConfig,
    run_id: str | None = None,
    ablate: bool = False,
    strict_fixtures: bool = False,
) -> int:
    """Execute one subcommand under the output-directory lock."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    with _directory_lock(config.output_dir):
        if subcommand == "ingest":
            cmd_ingest(config)
        elif subcommand == "index":
            cmd_index(config)
        elif subcommand == "knowledge":
            cmd_knowledge(config)
        elif subcommand == "detect":
            effective_ablate = ablate or config.ablate_retrieval
            _run_detection_job(config, _run_dir(config, run_id), effective_ablate, strict_fixtures)
        elif subcommand == "evaluate":
            _evaluate_run(config, _run_dir(config, run_id))
        elif subcommand == "ablate":
            with_dir = _run_dir(config, run_id, "-with")
            without_dir = _run_dir(config, run_id, "-without")
            _run_detection_job(config, with_dir, ablate=False, strict_fixtures=strict_fixtures)
            _run_detection_job(config, without_dir, ablate=True, strict_fixtures=strict_fixtures)
            with_report = _evaluate_run(config, with_dir)
            without_report = _evaluate_run(config, without_dir)
            result = evaluation.ablation_compare(with_report, without_report)
            ablation_dir = _run_dir(config, run_id)
            ablation_dir.mkdir(parents=True, exist_ok=True)
            (ablation_dir / "ablation.json").write_text(
                json.dumps(
                    {
                        "dataset_id": with_report.dataset_id,
                        "with_retrieval": [
                            result.with_retrieval.numerator,
                            result.with_retrieval.denominator,
                        ],
                        "without_retrieval": [
                            result.without_retrieval.numerator,
                            result.without_retrieval.denominator,
                        ],
                        "delta": [result.delta.numerator, result.delta.denominator],
                    },
                    sort_keys=True,
                    indent=2,
                )
                + "\n",
                encoding="utf-8",
            )
            (ablation_dir / "ablation.md").write_text(
                evaluation.render_ablation_markdown(with_report.dataset_id, result),
                encoding="utf-8",
            )
            print(
                f"ablate: delta {evaluation.format_ratio(result.delta)} -> "
                f"{ablation_dir / 'ablation.md'}"
            )
        elif subcommand == "report":
            run_dir = _run_dir(config, run_id)
            report_path = run_dir / "report.json"
            if not report_path.is_file():
                raise PrerequisiteError(f"no report at {report_path}", hint="run `evaluate` first")
            report = evaluation.report_from_dict(json.loads(report_path.read_text("utf-8")))
            (run_dir / "report.md").write_bytes(evaluation.emit_report(report, "markdown"))
            print(f"report: rendered {run_dir / 'report.md'}")
    return 0


def _error_payload(kind: str, exc: Exception) -> str:
    payload = {"error": kind, "message": str(exc)}
    hint = getattr(exc, "hint", "")
    if hint:
        payload["hint"] = hint
    return json.dumps(payload, sort_keys=True)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="pbf-rag",
        description="Literature-grounded anomaly detection workflow for powder bed imagery",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="path to the run config JSON")
    parser.add_argument("--run-id", default=None, help="run directory name (default: config digest)")
    parser.add_argument(
        "--ablate", action="store_true", help="strip retrieved content from detection prompts"
    )
    parser.add_argument(
        "--strict-fixtures",
        action="store_true",
        help="mock backend errors on any request without a registered fixture",
    )
    args = parser.parse_args(argv)
    try:
        config = parse_config(args.config)
        return dispatch(
            args.subcommand,
            config,
            run_id=args.run_id,
            ablate=args.ablate,
            strict_fixtures=args.strict_fixtures,
        )
    except PrerequisiteError as exc:
        print(_error_payload("prerequisite", exc), file=sys.stderr)
        return 2
    except PbfRagError as exc:
        print(_error_payload("failure", exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
