import numpy as np
import pytest

from pbf_rag.errors import PayloadError, RetrievalError, SectionParseError
from pbf_rag.model_gateway import (
    CAP_CHAT,
    CAP_VISION,
    ChatMessage,
    ImagePart,
    MockBackend,
    ModelGateway,
    TextPart,
    content_digest,
)
from pbf_rag.retrieval import (
    IMAGE_DESCRIBE_QUERY,
    IMAGE_QUERY,
    INFO_SECTION_HEADERS,
    TEXT_QUERY,
    AnomalyInfoText,
    AnomalyKnowledge,
    KnowledgeCache,
    LateInteractionPageScorer,
    ReferenceImage,
    RetrievalParams,
    _reask_messages,
    build_anomaly_knowledge,
    describe_reference_image,
    retrieve_anomaly_text,
    retrieve_reference_image,
    split_sections,
)
from pbf_rag.toydata import TOY_ANOMALIES
from pbf_rag.vector_index import KIND_PAGE_IMAGE_PROXY, VectorIndex, cosine_similarity

from conftest import REF_PNG, build_gateway


class CountingGateway:
    """Wraps a gateway and counts backend-facing calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def complete_chat(self, *args, **kwargs):
        self.calls += 1
        return self.inner.complete_chat(*args, **kwargs)

    def complete_vision(self, *args, **kwargs):
        self.calls += 1
        return self.inner.complete_vision(*args, **kwargs)

    def embed_batch(self, *args, **kwargs):
        self.calls += 1
        return self.inner.embed_batch(*args, **kwargs)


PARAMS = RetrievalParams(image_score_threshold=0.1)


class TestReferenceImageRetrieval:
    def test_planted_page_ranks_first(self, toy_corpus_store, toy_index, mock_gateway):
        for i, name in enumerate(TOY_ANOMALIES):
            reference, hits = retrieve_reference_image(
                name, toy_index, mock_gateway, PARAMS, toy_corpus_store
            )
            assert reference is not None
            assert (reference.doc_id, reference.page_no) == (f"doc{i:02d}", 2)
            # brute-force oracle over all page proxies confirms the ranking
            query_vec = mock_gateway.embed_batch([IMAGE_QUERY.format(anomaly_name=name)])[0]
            scored = sorted(
                (
                    (cosine_similarity(query_vec, e.vector), e.entry_id)
                    for e in toy_index.entries()
                    if e.kind == KIND_PAGE_IMAGE_PROXY
                ),
                key=lambda pair: (-pair[0], pair[1]),
            )
            assert hits[0].entry_id == scored[0][1]
            assert len(hits) <= PARAMS.k_image

    def test_all_below_threshold_returns_absent(self, toy_corpus_store, toy_index, mock_gateway):
        params = RetrievalParams(image_score_threshold=0.999)
        reference, hits = retrieve_reference_image(
            "Soot", toy_index, mock_gateway, params, toy_corpus_store
        )
        assert reference is None
        assert hits  # candidates existed but none qualified

    def test_empty_page_index_returns_absent(self, toy_corpus_store, mock_gateway):
        reference, hits = retrieve_reference_image(
            "Soot", VectorIndex(), mock_gateway, PARAMS, toy_corpus_store
        )
        assert reference is None
        assert hits == []


class TestDescribeReferenceImage:
    def test_fixture_keyed_on_image_digest(self, mock_gateway):
        image = ReferenceImage(data=REF_PNG, doc_id="d", page_no=1)
        prompt = IMAGE_QUERY.format(anomaly_name="Soot") + " " + IMAGE_DESCRIBE_QUERY
        messages = [ChatMessage(role="user", parts=(TextPart(prompt), ImagePart(REF_PNG)))]
        digest = content_digest(CAP_VISION, messages)
        mock_gateway.backend(CAP_VISION).register_fixture(CAP_VISION, digest, "a fixed description")
        assert describe_reference_image("Soot", image, mock_gateway) == "a fixed description"

    def test_corrupt_image_rejected_by_gateway(self, mock_gateway):
        image = ReferenceImage(data=b"garbage", doc_id="d", page_no=1)
        with pytest.raises(PayloadError, match="undecodable image"):
            describe_reference_image("Soot", image, mock_gateway)

    def test_two_anomalies_same_image_distinct_prompts(self):
        image = ReferenceImage(data=REF_PNG, doc_id="d", page_no=1)

        def digest_for(name):
            prompt = IMAGE_QUERY.format(anomaly_name=name) + " " + IMAGE_DESCRIBE_QUERY
            return content_digest(
                CAP_VISION,
                [ChatMessage(role="user", parts=(TextPart(prompt), ImagePart(image.data)))],
            )

        assert digest_for("Soot") != digest_for("Debris")


class TestSectionParsing:
    def test_numbered_headers(self):
        text = (
            "1. Detailed Description\nd\n2. Common Causes\nc\n"
            "3. Visual Characteristics\nv\n4. Prevention Strategies\np"
        )
        sections = split_sections(text, INFO_SECTION_HEADERS)
        assert sections == {
            "Detailed Description": "d",
            "Common Causes": "c",
            "Visual Characteristics": "v",
            "Prevention Strategies": "p",
        }

    def test_markdown_bold_headers_with_colons(self):
        text = (
            "**Detailed Description:** first\n**Common Causes:** second\n"
            "**Visual Characteristics:** third\n**Prevention Strategies:** fourth"
        )
        sections = split_sections(text, INFO_SECTION_HEADERS)
        assert sections["Prevention Strategies"] == "fourth"

    def test_missing_header_returns_none(self):
        text = "1. Detailed Description\nd\n2. Common Causes\nc"
        assert split_sections(text, INFO_SECTION_HEADERS) is None

    def test_empty_section_returns_none(self):
        text = (
            "1. Detailed Description\n\n2. Common Causes\nc\n"
            "3. Visual Characteristics\nv\n4. Prevention Strategies\np"
        )
        assert split_sections(text, INFO_SECTION_HEADERS) is None


class TestAnomalyTextRetrieval:
    def test_well_formed_answer_populates_struct(self, toy_corpus_store, toy_index, mock_gateway):
        info, hits = retrieve_anomaly_text(
            "Recoater Hopping", toy_index, mock_gateway, PARAMS, toy_corpus_store
        )
        for section in info.sections():
            assert section.strip()
        assert len(hits) == PARAMS.k_text

    def test_planted_chunk_is_top_provenance(self, toy_corpus_store, toy_index, mock_gateway):
        for name in TOY_ANOMALIES:
            _, hits = retrieve_anomaly_text(name, toy_index, mock_gateway, PARAMS, toy_corpus_store)
            top_chunk = toy_corpus_store.chunk(str(hits[0].payload_ref))
            assert name.lower() in top_chunk.text.lower()

    def test_malformed_then_reask_then_error(self, toy_corpus_store, toy_index):
        gateway = build_gateway(seed=5)
        backend = gateway.backend(CAP_CHAT)
        query = TEXT_QUERY.format(anomaly_name="Soot")
        vector = gateway.embed_batch([query])[0]
        hits = toy_index.query_top_k(vector, PARAMS.k_text, kind_filter="text_chunk")
        blocks = [
            f"[{toy_corpus_store.chunk(str(h.payload_ref)).chunk_id}] "
            f"{toy_corpus_store.chunk(str(h.payload_ref)).text}"
            for h in hits
        ]
        original = ChatMessage.text("user", query + "\n\nProvided resources:\n" + "\n\n".join(blocks))
        malformed = "1. Detailed Description\nonly\n2. Common Causes\ntwo sections"
        backend.register_fixture(CAP_CHAT, content_digest(CAP_CHAT, [original]), malformed)
        reask = _reask_messages(original, malformed, INFO_SECTION_HEADERS)
        backend.register_fixture(CAP_CHAT, content_digest(CAP_CHAT, reask), malformed)
        with pytest.raises(SectionParseError, match="after one re-ask"):
            retrieve_anomaly_text("Soot", toy_index, gateway, PARAMS, toy_corpus_store)

    def test_reask_can_recover(self, toy_corpus_store, toy_index):
        gateway = build_gateway(seed=6)
        backend = gateway.backend(CAP_CHAT)
        query = TEXT_QUERY.format(anomaly_name="Soot")
        vector = gateway.embed_batch([query])[0]
        hits = toy_index.query_top_k(vector, PARAMS.k_text, kind_filter="text_chunk")
        blocks = [
            f"[{toy_corpus_store.chunk(str(h.payload_ref)).chunk_id}] "
            f"{toy_corpus_store.chunk(str(h.payload_ref)).text}"
            for h in hits
        ]
        original = ChatMessage.text("user", query + "\n\nProvided resources:\n" + "\n\n".join(blocks))
        malformed = "no sections at all"
        good = (
            "1. Detailed Description\nd\n2. Common Causes\nc\n"
            "3. Visual Characteristics\nv\n4. Prevention Strategies\np"
        )
        backend.register_fixture(CAP_CHAT, content_digest(CAP_CHAT, [original]), malformed)
        reask = _reask_messages(original, malformed, INFO_SECTION_HEADERS)
        backend.register_fixture(CAP_CHAT, content_digest(CAP_CHAT, reask), good)
        info, _ = retrieve_anomaly_text("Soot", toy_index, gateway, PARAMS, toy_corpus_store)
        assert info.detailed_description == "d"

    def test_no_chunks_indexed_is_fatal(self, toy_corpus_store, mock_gateway):
        with pytest.raises(RetrievalError, match="no text chunks"):
            retrieve_anomaly_text("Soot", VectorIndex(), mock_gateway, PARAMS, toy_corpus_store)


class TestKnowledgeAssembly:
    def test_full_packet(self, toy_corpus_store, toy_index, mock_gateway):
        knowledge = build_anomaly_knowledge(
            "Debris", toy_index, mock_gateway, PARAMS, toy_corpus_store
        )
        assert knowledge.reference_image is not None
        assert knowledge.reference_image_description
        assert knowledge.image_status == "ok"
        scores = [score for _, score in knowledge.provenance]
        assert scores == sorted(scores, reverse=True)
        assert len(knowledge.provenance) <= PARAMS.k_text + PARAMS.k_image

    def test_below_threshold_degrades_to_text_only(self, toy_corpus_store, toy_index, mock_gateway):
        params = RetrievalParams(image_score_threshold=0.999)
        knowledge = build_anomaly_knowledge(
            "Debris", toy_index, mock_gateway, params, toy_corpus_store
        )
        assert knowledge.reference_image is None
        assert knowledge.reference_image_description is None
        assert knowledge.image_status == "below_threshold"
        for section in knowledge.info_text.sections():
            assert section.strip()

    def test_cache_hit_makes_zero_gateway_calls(self, toy_corpus_store, toy_index, tmp_path):
        gateway = CountingGateway(build_gateway())
        cache = KnowledgeCache(tmp_path / "knowledge", "toy-lpbf", toy_corpus_store.digest)
        first = build_anomaly_knowledge(
            "Soot", toy_index, gateway, PARAMS, toy_corpus_store, cache=cache
        )
        calls_after_build = gateway.calls
        assert calls_after_build > 0
        second = build_anomaly_knowledge(
            "Soot", toy_index, gateway, PARAMS, toy_corpus_store, cache=cache
        )
        assert gateway.calls == calls_after_build
        assert second == first

    def test_cache_rejects_stale_corpus_digest(self, toy_corpus_store, toy_index, tmp_path):
        gateway = build_gateway()
        cache = KnowledgeCache(tmp_path / "knowledge", "toy-lpbf", toy_corpus_store.digest)
        build_anomaly_knowledge("Soot", toy_index, gateway, PARAMS, toy_corpus_store, cache=cache)
        stale = KnowledgeCache(tmp_path / "knowledge", "toy-lpbf", "different-digest")
        assert stale.get("Soot", PARAMS) is None

    def test_rerun_yields_identical_packet(self, toy_corpus_store, toy_index):
        one = build_anomaly_knowledge(
            "Soot", toy_index, build_gateway(), PARAMS, toy_corpus_store
        )
        two = build_anomaly_knowledge(
            "Soot", toy_index, build_gateway(), PARAMS, toy_corpus_store
        )
        assert one == two

    def test_description_present_iff_image_present(self):
        info = AnomalyInfoText("a", "b", "c", "d")
        with pytest.raises(RetrievalError, match="present together"):
            AnomalyKnowledge(
                anomaly_name="X",
                reference_image=None,
                reference_image_description="orphan",
                info_text=info,
                provenance=(),
            )

    def test_usability_check_can_reject_the_top_image(self, toy_corpus_store, toy_index):
        params = RetrievalParams(image_score_threshold=0.1, use_vision_usability_check=True)
        gateway = build_gateway()
        backend = gateway.backend(CAP_VISION)
        reference, _ = retrieve_reference_image(
            "Soot", toy_index, gateway, params, toy_corpus_store
        )
        prompt = (
            "Does this image clearly show an example of **Soot**? "
            "Return 1 if yes; otherwise, return 0. Do not provide any additional explanation."
        )
        check_messages = [
            ChatMessage(role="user", parts=(TextPart(prompt), ImagePart(reference.data)))
        ]
        backend.register_fixture(CAP_VISION, content_digest(CAP_VISION, check_messages), "0")
        knowledge = build_anomaly_knowledge(
            "Soot", toy_index, gateway, params, toy_corpus_store
        )
        assert knowledge.reference_image is None
        assert knowledge.image_status == "rejected_by_check"

        accepting = build_gateway()
        accepting.backend(CAP_VISION).register_fixture(
            CAP_VISION, content_digest(CAP_VISION, check_messages), "1"
        )
        knowledge = build_anomaly_knowledge(
            "Soot", toy_index, accepting, params, toy_corpus_store
        )
        assert knowledge.reference_image is not None
        assert knowledge.image_status == "ok"


def test_late_interaction_scorer_contract():
    def token_embedder(text):
        # toy per-token embedding: one-hot over a tiny vocabulary
        vocab = {"soot": 0, "debris": 1, "layer": 2}
        rows = [np.eye(4)[vocab[t]] for t in text.lower().split() if t in vocab]
        return np.array(rows) if rows else np.eye(4)[3:4]

    scorer = LateInteractionPageScorer(token_embedder)
    scorer.add_page("p1", token_embedder("soot layer"), ("d1", 1))
    scorer.add_page("p2", token_embedder("debris layer"), ("d2", 1))
    hits = scorer.query_top_k("soot", 2)
    assert hits[0].entry_id == "p1"
    assert hits[0].score == pytest.approx(1.0)
    assert all(-1.0 <= h.score <= 1.0 for h in hits)
