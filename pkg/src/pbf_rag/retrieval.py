"""Dual retrieval per anomaly: best reference page image plus synthesized
four-section scientific text, assembled into a knowledge packet.

Image retrieval embeds the full substituted image-query sentence and ranks
page entries; the top page must clear a usability score threshold or the
packet degrades to text-only. Text retrieval embeds the text query, feeds
the top chunks to the chat model, and parses the answer into the four
required sections (one structured re-ask before giving up).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from .corpus_ingest import CorpusStore
from .errors import EmptyResponseError, GatewayError, RetrievalError, SectionParseError
from .model_gateway import (
    ChatMessage,
    GenerationParams,
    ImagePart,
    ModelGateway,
    TextPart,
)
from .vector_index import KIND_PAGE_IMAGE_PROXY, KIND_TEXT_CHUNK, RankedHit, VectorIndex, maxsim_score

IMAGE_QUERY = "Retrieve images related to the **{anomaly_name}**, strictly from provided resources."
IMAGE_DESCRIBE_QUERY = (
    "Analyze the retrieved image and include the visual characteristics to help in anomaly identification."
)
TEXT_QUERY = (
    "Retrieve comprehensive information about **{anomaly_name}**, exclusively from provided resources. "
    "Ensure the response includes the following details:\n"
    "1. Detailed Description\n"
    "2. Common Causes\n"
    "3. Visual Characteristics\n"
    "4. Prevention Strategies"
)

INFO_SECTION_HEADERS = (
    "Detailed Description",
    "Common Causes",
    "Visual Characteristics",
    "Prevention Strategies",
)

DEFAULT_K_TEXT = 3
DEFAULT_K_IMAGE = 3
DEFAULT_IMAGE_SCORE_THRESHOLD = 0.25


@dataclass(frozen=True)
class RetrievalParams:
    k_text: int = DEFAULT_K_TEXT
    k_image: int = DEFAULT_K_IMAGE
    image_score_threshold: float = DEFAULT_IMAGE_SCORE_THRESHOLD
    use_vision_usability_check: bool = False

    def __post_init__(self):
        if self.k_text < 1 or self.k_image < 1:
            raise RetrievalError("k_text and k_image must be >= 1")
        if not -1.0 <= self.image_score_threshold <= 1.0:
            raise RetrievalError("image_score_threshold must be in [-1, 1]")

    def cache_key(self) -> dict:
        return {
            "k_text": self.k_text,
            "k_image": self.k_image,
            "image_score_threshold": self.image_score_threshold,
            "use_vision_usability_check": self.use_vision_usability_check,
        }


@dataclass(frozen=True)
class AnomalyInfoText:
    detailed_description: str
    common_causes: str
    visual_characteristics: str
    prevention_strategies: str

    def __post_init__(self):
        for header, value in zip(INFO_SECTION_HEADERS, self.sections()):
            if not value or not value.strip():
                raise RetrievalError(f"info text section {header!r} is empty")

    def sections(self) -> tuple[str, str, str, str]:
        return (
            self.detailed_description,
            self.common_causes,
            self.visual_characteristics,
            self.prevention_strategies,
        )

    def as_prompt_block(self) -> str:
        """The four headed sections rendered back into one text block."""
        return "\n".join(
            f"{i}. {header}\n{value}"
            for i, (header, value) in enumerate(zip(INFO_SECTION_HEADERS, self.sections()), start=1)
        )


@dataclass(frozen=True)
class ReferenceImage:
    data: bytes
    doc_id: str
    page_no: int


@dataclass(frozen=True)
class AnomalyKnowledge:
    anomaly_name: str
    reference_image: ReferenceImage | None
    reference_image_description: str | None
    info_text: AnomalyInfoText
    provenance: tuple[tuple[str, float], ...]
    image_status: str = "ok"  # ok | below_threshold | no_pages | degraded | rejected_by_check

    def __post_init__(self):
        if (self.reference_image is None) != (self.reference_image_description is None):
            raise RetrievalError(
                "reference_image and reference_image_description must be present together"
            )
        scores = [score for _, score in self.provenance]
        if scores != sorted(scores, reverse=True):
            raise RetrievalError("provenance must be sorted by score descending")


class PageScorer(Protocol):
    """Ranking seam for page retrieval; both scoring routes emit RankedHit."""

    def query_top_k(self, query_text: str, k: int) -> list[RankedHit]: ...


class CosineProxyScorer:
    """Default page scorer: single-vector cosine over page text proxies."""

    def __init__(self, index: VectorIndex, gateway: ModelGateway):
        self.index = index
        self.gateway = gateway

    def query_top_k(self, query_text: str, k: int) -> list[RankedHit]:
        vector = self.gateway.embed_batch([query_text])[0]
        return self.index.query_top_k(vector, k, kind_filter=KIND_PAGE_IMAGE_PROXY)


class LateInteractionPageScorer:
    """MaxSim page scorer for multi-vector embedding backends.

    token_embedder maps text to a 2-D array of per-token vectors; pages are
    registered with their own multi-vector representations.
    """

    def __init__(self, token_embedder):
        self._token_embedder = token_embedder
        self._pages: dict[str, tuple] = {}

    def add_page(self, entry_id: str, vectors, payload_ref) -> None:
        self._pages[entry_id] = (vectors, payload_ref)

    def query_top_k(self, query_text: str, k: int) -> list[RankedHit]:
        query_vectors = self._token_embedder(query_text)
        hits = [
            RankedHit(eid, maxsim_score(query_vectors, vectors), KIND_PAGE_IMAGE_PROXY, payload)
            for eid, (vectors, payload) in sorted(self._pages.items())
        ]
        hits.sort(key=lambda h: (-h.score, h.entry_id))
        return hits[:k]


def retrieve_reference_image(
    anomaly_name: str,
    index: VectorIndex,
    gateway: ModelGateway,
    params: RetrievalParams,
    corpus: CorpusStore,
    page_scorer: PageScorer | None = None,
) -> tuple[ReferenceImage | None, list[RankedHit]]:
    """Best page image for the anomaly, or None if nothing clears the threshold."""
    scorer: PageScorer = page_scorer or CosineProxyScorer(index, gateway)
    query = IMAGE_QUERY.format(anomaly_name=anomaly_name)
    hits = scorer.query_top_k(query, params.k_image)
    if not hits or hits[0].score < params.image_score_threshold:
        return None, hits
    top = hits[0]
    doc_id, page_no = top.payload_ref
    image_path = corpus.page_image_path(doc_id, int(page_no))
    return ReferenceImage(data=image_path.read_bytes(), doc_id=doc_id, page_no=int(page_no)), hits


def describe_reference_image(anomaly_name: str, image: ReferenceImage, gateway: ModelGateway) -> str:
    """Vision-model description of the retrieved reference image."""
    prompt = IMAGE_QUERY.format(anomaly_name=anomaly_name) + " " + IMAGE_DESCRIBE_QUERY
    message = ChatMessage(role="user", parts=(TextPart(prompt), ImagePart(image.data)))
    response = gateway.complete_vision([message], GenerationParams(temperature=0.0))
    if not response.text.strip():
        raise EmptyResponseError("vision backend returned an empty image description")
    return response.text


def check_image_usability(anomaly_name: str, image: ReferenceImage, gateway: ModelGateway) -> bool:
    """Optional vision yes/no gate on whether the page shows the anomaly clearly."""
    prompt = (
        f"Does this image clearly show an example of **{anomaly_name}**? "
        "Return 1 if yes; otherwise, return 0. Do not provide any additional explanation."
    )
    message = ChatMessage(role="user", parts=(TextPart(prompt), ImagePart(image.data)))
    response = gateway.complete_vision([message], GenerationParams(temperature=0.0))
    return response.text.strip().strip("`'\"") == "1"


def split_sections(text: str, headers: Sequence[str]) -> dict[str, str] | None:
    """Split a model response on the given headers, tolerating numbering,
    markdown emphasis, hashes, and trailing colons. Returns None unless every
    header is found with non-empty content."""
    matches = []
    for header in headers:
        pattern = re.compile(
            rf"(?:^|\n)\s*(?:#+\s*)?(?:\d+\s*[.)]\s*)?(?:\*\*)?\s*{re.escape(header)}"
            rf"\s*:?\s*(?:\*\*)?\s*:?[ \t]*",
            re.IGNORECASE,
        )
        match = pattern.search(text)
        if match is None:
            return None
        matches.append((match.start(), match.end(), header))
    matches.sort()
    sections: dict[str, str] = {}
    for i, (_, end, header) in enumerate(matches):
        stop = matches[i + 1][0] if i + 1 < len(matches) else len(text)
        content = text[end:stop].strip()
        if not content:
            return None
        sections[header] = content
    return sections


def _reask_messages(original: ChatMessage, malformed: str, headers: Sequence[str]) -> list[ChatMessage]:
    headed = ", ".join(f"{i}. {h}" for i, h in enumerate(headers, start=1))
    return [
        original,
        ChatMessage.text("assistant", malformed),
        ChatMessage.text(
            "user",
            f"Reformat the previous answer into exactly these headed sections, in order: {headed}. "
            "Include every section header on its own line followed by its content.",
        ),
    ]


def retrieve_anomaly_text(
    anomaly_name: str,
    index: VectorIndex,
    gateway: ModelGateway,
    params: RetrievalParams,
    corpus: CorpusStore,
) -> tuple[AnomalyInfoText, list[RankedHit]]:
    """Retrieve top chunks and synthesize the four-section info text."""
    query = TEXT_QUERY.format(anomaly_name=anomaly_name)
    vector = gateway.embed_batch([query])[0]
    hits = index.query_top_k(vector, params.k_text, kind_filter=KIND_TEXT_CHUNK)
    if not hits:
        raise RetrievalError(f"no text chunks indexed; cannot retrieve info for {anomaly_name!r}")
    blocks = []
    for hit in hits:
        chunk = corpus.chunk(str(hit.payload_ref))
        blocks.append(f"[{chunk.chunk_id}] {chunk.text}")
    prompt = query + "\n\nProvided resources:\n" + "\n\n".join(blocks)
    message = ChatMessage.text("user", prompt)
    response = gateway.complete_chat([message], GenerationParams(temperature=0.0))
    sections = split_sections(response.text, INFO_SECTION_HEADERS)
    if sections is None:
        retry = gateway.complete_chat(
            _reask_messages(message, response.text, INFO_SECTION_HEADERS),
            GenerationParams(temperature=0.0),
        )
        sections = split_sections(retry.text, INFO_SECTION_HEADERS)
        if sections is None:
            raise SectionParseError(
                f"info text for {anomaly_name!r} is missing required sections after one re-ask"
            )
    info = AnomalyInfoText(
        detailed_description=sections["Detailed Description"],
        common_causes=sections["Common Causes"],
        visual_characteristics=sections["Visual Characteristics"],
        prevention_strategies=sections["Prevention Strategies"],
    )
    return info, hits


def anomaly_slug(name: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")
    return slug or "anomaly"


class KnowledgeCache:
    """Disk cache of knowledge packets under knowledge/<dataset_id>/.

    Entries are keyed by (anomaly, corpus digest, retrieval params); a stored
    packet whose key no longer matches is ignored, not served stale.
    """

    def __init__(self, root: str | Path, dataset_id: str, corpus_digest: str):
        self.root = Path(root) / dataset_id
        self.dataset_id = dataset_id
        self.corpus_digest = corpus_digest

    def _paths(self, anomaly_name: str) -> tuple[Path, Path]:
        slug = anomaly_slug(anomaly_name)
        return self.root / f"{slug}.json", self.root / f"{slug}.png"

    def get(self, anomaly_name: str, params: RetrievalParams) -> AnomalyKnowledge | None:
        json_path, png_path = self._paths(anomaly_name)
        if not json_path.is_file():
            return None
        payload = json.loads(json_path.read_text("utf-8"))
        key = payload.get("cache_key", {})
        if key.get("corpus_digest") != self.corpus_digest or key.get("params") != params.cache_key():
            return None
        if payload.get("anomaly_name") != anomaly_name:
            return None
        reference = None
        description = payload.get("reference_image_description")
        ref_meta = payload.get("reference_image")
        if ref_meta is not None:
            if not png_path.is_file():
                return None
            reference = ReferenceImage(
                data=png_path.read_bytes(), doc_id=ref_meta["doc_id"], page_no=int(ref_meta["page_no"])
            )
        info = AnomalyInfoText(**payload["info_text"])
        return AnomalyKnowledge(
            anomaly_name=anomaly_name,
            reference_image=reference,
            reference_image_description=description,
            info_text=info,
            provenance=tuple((eid, float(score)) for eid, score in payload["provenance"]),
            image_status=payload.get("image_status", "ok"),
        )

    def put(self, knowledge: AnomalyKnowledge, params: RetrievalParams) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        json_path, png_path = self._paths(knowledge.anomaly_name)
        ref_meta = None
        if knowledge.reference_image is not None:
            ref_meta = {
                "doc_id": knowledge.reference_image.doc_id,
                "page_no": knowledge.reference_image.page_no,
            }
            png_path.write_bytes(knowledge.reference_image.data)
        payload = {
            "anomaly_name": knowledge.anomaly_name,
            "cache_key": {"corpus_digest": self.corpus_digest, "params": params.cache_key()},
            "image_status": knowledge.image_status,
            "reference_image": ref_meta,
            "reference_image_description": knowledge.reference_image_description,
            "info_text": {
                "detailed_description": knowledge.info_text.detailed_description,
                "common_causes": knowledge.info_text.common_causes,
                "visual_characteristics": knowledge.info_text.visual_characteristics,
                "prevention_strategies": knowledge.info_text.prevention_strategies,
            },
            "provenance": [[eid, score] for eid, score in knowledge.provenance],
        }
        json_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def build_anomaly_knowledge(
    anomaly_name: str,
    index: VectorIndex,
    gateway: ModelGateway,
    params: RetrievalParams,
    corpus: CorpusStore,
    cache: KnowledgeCache | None = None,
    page_scorer: PageScorer | None = None,
) -> AnomalyKnowledge:
    """Assemble the per-anomaly packet: mandatory text, best-effort image.

    Text retrieval failure is fatal; any image-side failure degrades the
    packet to text-only with the reason recorded in image_status.
    """
    if cache is not None:
        cached = cache.get(anomaly_name, params)
        if cached is not None:
            return cached

    info, text_hits = retrieve_anomaly_text(anomaly_name, index, gateway, params, corpus)

    reference: ReferenceImage | None = None
    description: str | None = None
    image_status = "ok"
    image_hits: list[RankedHit] = []
    try:
        reference, image_hits = retrieve_reference_image(
            anomaly_name, index, gateway, params, corpus, page_scorer=page_scorer
        )
        if reference is None:
            image_status = "below_threshold" if image_hits else "no_pages"
        else:
            if params.use_vision_usability_check and not check_image_usability(
                anomaly_name, reference, gateway
            ):
                reference = None
                image_status = "rejected_by_check"
            else:
                description = describe_reference_image(anomaly_name, reference, gateway)
    except GatewayError:
        reference = None
        description = None
        image_status = "degraded"

    provenance = sorted(
        [(h.entry_id, h.score) for h in list(text_hits) + list(image_hits)],
        key=lambda pair: (-pair[1], pair[0]),
    )
    knowledge = AnomalyKnowledge(
        anomaly_name=anomaly_name,
        reference_image=reference,
        reference_image_description=description,
        info_text=info,
        provenance=tuple(provenance),
        image_status=image_status,
    )
    if cache is not None:
        cache.put(knowledge, params)
    return knowledge
