"""Shared fixtures: frozen image bytes, toy corpus, and gateway helpers."""

from __future__ import annotations

import base64
from pathlib import Path

import pytest

from pbf_rag.corpus_ingest import CorpusStore, ingest_corpus
from pbf_rag.dataset import AnomalyTaxonomy, StageImage
from pbf_rag.dataset import TestSample as LayerSample
from pbf_rag.model_gateway import MockBackend, ModelGateway
from pbf_rag.retrieval import AnomalyInfoText, AnomalyKnowledge, ReferenceImage
from pbf_rag.toydata import TOY_ANOMALIES, make_toy_corpus
from pbf_rag.vector_index import (
    KIND_PAGE_IMAGE_PROXY,
    KIND_TEXT_CHUNK,
    IndexEntry,
    VectorIndex,
)

# Frozen PNG bytes so image digests in golden transcripts never depend on the
# local image encoder.
MELT_PNG = base64.b64decode(
    "iVBORw0KGgoAAAANSUhEUgAAABgAAAASCAIAAADOjonJAAAAMklEQVR4nGOsiLJhoAZgooop"
    "DAwMLBCqfdkRTLlKUhxLNReNGkRHgxgHXYIcNWhEGwQABi4FQTiW18wAAAAASUVORK5CYII="
)
SPREAD_PNG = base64.b64decode(
    "iVBORw0KGgoAAAANSUhEUgAAABgAAAASCAIAAADOjonJAAAAOklEQVR4nGOcNm0aAzUAE1VM"
    "YWBgYIFQWVmZmHLTpk0n3iCquWjUIDoaBI1+kmIaKxh8Xhs1aCgaBABd+AatB3c7fAAAAABJ"
    "RU5ErkJggg=="
)
REF_PNG = base64.b64decode(
    "iVBORw0KGgoAAAANSUhEUgAAABgAAAASCAIAAADOjonJAAAAM0lEQVR4nGPUcMtjoAZgooop"
    "DAwMLBDqxs5JmHIa7iQ4lmouGjWIjgYxDroEOWrQiDYIAIj4BN0VLCCVAAAAAElFTkSuQmCC"
)


@pytest.fixture(scope="session")
def toy_corpus_store(tmp_path_factory) -> CorpusStore:
    root = tmp_path_factory.mktemp("toy_corpus")
    manifest = make_toy_corpus(root / "src")
    return ingest_corpus(manifest, root / "corpus")


@pytest.fixture(scope="session")
def toy_taxonomy() -> AnomalyTaxonomy:
    return AnomalyTaxonomy(dataset_id="toy-lpbf", anomalies=TOY_ANOMALIES)


def build_gateway(seed: int = 42, **kwargs) -> ModelGateway:
    backend = MockBackend(seed=seed, **kwargs)
    return ModelGateway(backend=backend, sleep=lambda _: None)


@pytest.fixture()
def mock_gateway() -> ModelGateway:
    return build_gateway()


def build_toy_index(store: CorpusStore, gateway: ModelGateway) -> VectorIndex:
    index = VectorIndex()
    for chunk in store.iter_chunks():
        vector = gateway.embed_batch([chunk.text])[0]
        index.upsert(
            IndexEntry(f"chunk:{chunk.chunk_id}", vector, KIND_TEXT_CHUNK, chunk.chunk_id)
        )
    for doc_id, page_no, text in store.iter_pages():
        if text.strip():
            vector = gateway.embed_batch([text])[0]
            index.upsert(
                IndexEntry(
                    f"page:{doc_id}:{page_no}", vector, KIND_PAGE_IMAGE_PROXY, (doc_id, page_no)
                )
            )
    return index


@pytest.fixture(scope="session")
def toy_index(toy_corpus_store) -> VectorIndex:
    return build_toy_index(toy_corpus_store, build_gateway())


def write_fixed_sample(directory: Path, sample_id: str = "L0042") -> LayerSample:
    """Sample backed by the frozen PNG constants (stable image digests)."""
    melt = directory / f"{sample_id}_melt.png"
    spread = directory / f"{sample_id}_spread.png"
    melt.write_bytes(MELT_PNG)
    spread.write_bytes(SPREAD_PNG)
    return LayerSample(
        sample_id=sample_id,
        dataset_id="toy-lpbf",
        images=(
            StageImage.for_stage("post_melting", melt),
            StageImage.for_stage("post_spreading", spread),
        ),
        ground_truth=frozenset({"Soot"}),
    )


@pytest.fixture()
def fixed_sample(tmp_path) -> LayerSample:
    return write_fixed_sample(tmp_path)


GOLDEN_INFO = AnomalyInfoText(
    detailed_description="Dark combustion residue deposited near the melt track.",
    common_causes="Excess laser energy and poor shielding gas flow.",
    visual_characteristics="Gray to black smudges trailing the scan direction.",
    prevention_strategies="Tune laser power and verify gas circulation.",
)

GOLDEN_DESCRIPTION = "A powder bed layer with dark smudges across the melt zone."


def make_knowledge(name: str = "Soot", with_image: bool = True) -> AnomalyKnowledge:
    reference = ReferenceImage(data=REF_PNG, doc_id="doc03", page_no=2) if with_image else None
    return AnomalyKnowledge(
        anomaly_name=name,
        reference_image=reference,
        reference_image_description=GOLDEN_DESCRIPTION if with_image else None,
        info_text=GOLDEN_INFO,
        provenance=(("chunk:abc", 0.9), ("page:doc03:2", 0.5)),
        image_status="ok" if with_image else "below_threshold",
    )


GOLDEN_DIR = Path(__file__).parent / "golden"
