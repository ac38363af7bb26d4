import itertools
import json

import pytest

from pbf_rag.dataset import AnomalyTaxonomy, encode_one_hot
from pbf_rag.detection_pipeline import (
    MODE_COMBINED,
    NO_ANOMALIES_MESSAGE,
    ClassificationResult,
    AnomalyDecision,
    aggregate_bits,
    ablated_explanation,
    build_classification_prompt,
    build_detection_prompt,
    build_explanation_prompt,
    classify_sample,
    generate_explanation,
    load_run_predictions,
    parse_binary_verdict,
    run_detection,
    write_sample_artifact,
)
from pbf_rag.errors import DetectionError, TemplateError, VerdictParseError
from pbf_rag.model_gateway import ModelGateway, ImagePart, render_transcript
from pbf_rag.errors import TransientBackendError

from conftest import GOLDEN_DIR, build_gateway, make_knowledge, write_fixed_sample


@pytest.fixture()
def sample(tmp_path):
    return write_fixed_sample(tmp_path)


def read_golden(name):
    return (GOLDEN_DIR / name).read_text(encoding="utf-8").rstrip("\n")


class TestDetectionPrompt:
    def test_full_prompt_matches_golden(self, sample):
        prompt = build_detection_prompt(make_knowledge(), sample)
        assert render_transcript(prompt) == read_golden("detection_prompt_full.txt")

    def test_full_prompt_has_both_stages_and_three_content_blocks(self, sample):
        rendered = render_transcript(build_detection_prompt(make_knowledge(), sample))
        assert "image captured post-melting: " in rendered
        assert "image captured after powder spreading: " in rendered
        assert "The reference image shows an example of **Soot: " in rendered
        assert "A powder bed layer with dark smudges" in rendered  # description block
        assert "Here is additional scientific information about **Soot: " in rendered
        assert rendered.count("[image:") == 3  # two stages + one reference

    def test_absent_reference_omits_reference_sentence(self, sample):
        prompt = build_detection_prompt(make_knowledge(with_image=False), sample)
        rendered = render_transcript(prompt)
        assert rendered == read_golden("detection_prompt_no_reference.txt")
        assert "The reference image shows an example of" not in rendered
        assert rendered.count("[image:") == 2

    def test_ablated_prompt_matches_golden(self, sample):
        prompt = build_detection_prompt(None, sample, ablate_retrieval=True, anomaly_name="Soot")
        assert render_transcript(prompt) == read_golden("detection_prompt_ablated.txt")

    def test_ablated_prompt_contains_no_knowledge_content(self, sample):
        knowledge = make_knowledge()
        rendered = render_transcript(
            build_detection_prompt(knowledge, sample, ablate_retrieval=True)
        )
        fragments = list(knowledge.info_text.sections()) + [
            knowledge.reference_image_description
        ]
        for fragment in fragments:
            assert fragment not in rendered
        assert "reference image" not in rendered
        assert "scientific information" not in rendered
        assert rendered.count("[image:") == 2  # test images only

    def test_knowledge_required_unless_ablated(self, sample):
        with pytest.raises(TemplateError, match="requires knowledge"):
            build_detection_prompt(None, sample)

    def test_unresolved_placeholder_guard(self, sample):
        knowledge = make_knowledge()
        object.__setattr__(knowledge, "reference_image_description", "hi {info_anomaly_text}")
        with pytest.raises(TemplateError, match="unresolved placeholder"):
            build_detection_prompt(knowledge, sample)


class TestOtherPrompts:
    def test_classification_prompt_matches_golden(self):
        prompt = build_classification_prompt(
            "Soot", "Assessment: the anomaly was detected in the test images."
        )
        assert render_transcript(prompt) == read_golden("classification_prompt.txt")

    def test_explanation_prompt_matches_golden(self):
        knowledge = make_knowledge()
        prompt = build_explanation_prompt(
            "Recoater Hopping=0, Soot=1", "Soot:\n" + knowledge.info_text.as_prompt_block()
        )
        assert render_transcript(prompt) == read_golden("explanation_prompt.txt")


class TestParseBinaryVerdict:
    @pytest.mark.parametrize(
        "raw,expected",
        [
            (" 1\n", 1),
            ("`0`", 0),
            ('"1"', 1),
            ("'0'", 0),
            ("```\n1\n```", 1),
            ("```text\n0\n```", 0),
            ("1", 1),
        ],
    )
    def test_accepted_forms(self, raw, expected):
        assert parse_binary_verdict(raw) == expected

    @pytest.mark.parametrize("raw", ["Yes, anomaly present", "01", "", "2", "0 1", "maybe 1"])
    def test_rejected_forms(self, raw):
        with pytest.raises(VerdictParseError):
            parse_binary_verdict(raw)


class ScriptedVisionBackend:
    """Detection calls replay a script; classification echoes detection text."""

    backend_id = "scripted-vision"

    def __init__(self, detection_script):
        self.detection_script = list(detection_script)

    def complete(self, capability, messages, params):
        text = "".join(
            part.text
            for message in messages
            for part in message.parts
            if hasattr(part, "text")
        )
        if text.startswith("Analyze the test image"):
            outcome = self.detection_script.pop(0)
            if isinstance(outcome, Exception):
                raise outcome
            return outcome
        if text.startswith("This is the decision"):
            return "1" if "POSITIVE" in text else "0"
        return "0"


def scripted_gateway(detection_script):
    return ModelGateway(backend=ScriptedVisionBackend(detection_script), sleep=lambda _: None)


class TestRunDetection:
    def test_scripted_bits(self, sample):
        gateway = scripted_gateway(["POSITIVE", "POSITIVE", "negative"])
        verdicts = run_detection("Soot", make_knowledge(), sample, gateway, repetitions=3)
        assert [v.bit for v in verdicts] == [1, 1, 0]
        assert [v.repetition for v in verdicts] == [1, 2, 3]
        assert all(v.anomaly_name == "Soot" for v in verdicts)

    def test_single_repetition(self, sample):
        gateway = scripted_gateway(["POSITIVE"])
        verdicts = run_detection("Soot", make_knowledge(), sample, gateway, repetitions=1)
        assert len(verdicts) == 1

    def test_failure_identifies_repetition(self, sample):
        gateway = scripted_gateway(["POSITIVE", TransientBackendError("boom")])
        gateway.max_attempts = 1
        with pytest.raises(DetectionError, match="repetition 2 of 3"):
            run_detection("Soot", make_knowledge(), sample, gateway, repetitions=3)

    def test_repetitions_must_be_positive(self, sample):
        with pytest.raises(DetectionError, match=">= 1"):
            run_detection("Soot", make_knowledge(), sample, scripted_gateway([]), repetitions=0)


class TestAggregation:
    def test_exhaustive_majority_rule(self):
        for bits in itertools.product((0, 1), repeat=3):
            mean, final = aggregate_bits(bits)
            assert mean == sum(bits) / 3
            assert final == (1 if sum(bits) >= 2 else 0)

    def test_boundary_inclusive_at_half(self):
        mean, final = aggregate_bits((1, 0))
        assert mean == 0.5
        assert final == 1

    def test_two_thirds(self):
        mean, final = aggregate_bits((1, 0, 1))
        assert final == 1 and mean == pytest.approx(2 / 3)


def oracle_gateway(sample, taxonomy, seed=42):
    """Mock whose detection oracle is wired to the sample's ground truth."""
    gateway = build_gateway(seed=seed)
    backend = gateway.backend("vision")
    for image in sample.images:
        digest = ImagePart(image.image_ref.read_bytes()).digest
        backend.configure_oracle(digest, sample.ground_truth)
    return gateway


class TestClassifySample:
    def test_threshold_arithmetic(self, sample):
        taxonomy = AnomalyTaxonomy(dataset_id="toy-lpbf", anomalies=("A", "B"))
        script = ["POSITIVE"] * 3 + ["negative", "negative", "POSITIVE"]
        gateway = scripted_gateway(script)
        knowledge = {"A": make_knowledge("A"), "B": make_knowledge("B")}
        result = classify_sample(sample, taxonomy, knowledge, gateway, repetitions=3)
        assert result.one_hot.bits == (1, 0)
        assert result.per_anomaly["A"].mean == 1.0
        assert result.per_anomaly["B"].mean == pytest.approx(1 / 3)

    def test_ground_truth_closure(self, sample, toy_taxonomy):
        gateway = oracle_gateway(sample, toy_taxonomy)
        knowledge = {name: make_knowledge(name) for name in toy_taxonomy}
        result = classify_sample(sample, toy_taxonomy, knowledge, gateway)
        assert result.one_hot == encode_one_hot(sample.ground_truth, toy_taxonomy)

    def test_taxonomy_permutation_permutes_bits(self, sample):
        names = ("Recoater Hopping", "Soot", "Debris")
        permuted = ("Debris", "Recoater Hopping", "Soot")
        knowledge = {name: make_knowledge(name) for name in names}
        base = classify_sample(
            sample,
            AnomalyTaxonomy(dataset_id="toy-lpbf", anomalies=names),
            knowledge,
            oracle_gateway(sample, names),
        )
        swapped = classify_sample(
            sample,
            AnomalyTaxonomy(dataset_id="toy-lpbf", anomalies=permuted),
            knowledge,
            oracle_gateway(sample, permuted),
        )
        by_name = dict(zip(names, base.one_hot.bits))
        assert tuple(by_name[name] for name in permuted) == swapped.one_hot.bits

    def test_missing_knowledge_rejected(self, sample, toy_taxonomy):
        with pytest.raises(DetectionError, match="knowledge packets missing"):
            classify_sample(sample, toy_taxonomy, {}, build_gateway())

    def test_ablation_needs_no_knowledge(self, sample, toy_taxonomy):
        gateway = oracle_gateway(sample, toy_taxonomy)
        result = classify_sample(
            sample, toy_taxonomy, None, gateway, ablate_retrieval=True
        )
        assert result.one_hot == encode_one_hot(sample.ground_truth, toy_taxonomy)

    def test_combined_mode_single_classification_bit(self, sample):
        taxonomy = AnomalyTaxonomy(dataset_id="toy-lpbf", anomalies=("A",))
        gateway = scripted_gateway(["POSITIVE", "negative", "negative"])
        result = classify_sample(
            sample,
            taxonomy,
            {"A": make_knowledge("A")},
            gateway,
            repetitions=3,
            classification_mode=MODE_COMBINED,
        )
        decision = result.per_anomaly["A"]
        assert decision.bits == (1,)  # one call over the three concatenated results
        assert decision.final == 1


class TestExplanation:
    def test_single_detected_anomaly(self, sample, toy_taxonomy):
        gateway = oracle_gateway(sample, toy_taxonomy)
        knowledge = {name: make_knowledge(name) for name in toy_taxonomy}
        result = classify_sample(sample, toy_taxonomy, knowledge, gateway)
        report = generate_explanation(result, knowledge, gateway)
        assert report.detected == ("Soot",)
        sections = report.per_anomaly["Soot"]
        assert sections.root_cause.strip()
        assert sections.prevention_strategies.strip()
        assert sections.additional_insights.strip()

    def test_all_zero_returns_no_anomalies_report(self, toy_taxonomy):
        decisions = {
            name: AnomalyDecision(bits=(0, 0, 0), mean=0.0, final=0, verdicts=())
            for name in toy_taxonomy
        }
        result = ClassificationResult(
            sample_id="L1",
            per_anomaly=decisions,
            one_hot=encode_one_hot(set(), toy_taxonomy),
        )
        report = generate_explanation(result, {}, build_gateway())
        assert report.detected == ()
        assert report.per_anomaly == {}
        assert report.summary == NO_ANOMALIES_MESSAGE

    def test_two_detected_yields_exactly_two_keys(self, tmp_path, toy_taxonomy):
        sample = write_fixed_sample(tmp_path, sample_id="L0077")
        object.__setattr__(sample, "ground_truth", frozenset({"Soot", "Debris"}))
        gateway = oracle_gateway(sample, toy_taxonomy)
        knowledge = {name: make_knowledge(name) for name in toy_taxonomy}
        result = classify_sample(sample, toy_taxonomy, knowledge, gateway)
        report = generate_explanation(result, knowledge, gateway)
        assert set(report.detected) == {"Soot", "Debris"}
        assert set(report.per_anomaly) == {"Soot", "Debris"}

    def test_ablated_placeholder_report(self, toy_taxonomy):
        decisions = {
            name: AnomalyDecision(bits=(1, 1, 1), mean=1.0, final=1, verdicts=())
            for name in toy_taxonomy
        }
        result = ClassificationResult(
            sample_id="L1",
            per_anomaly=decisions,
            one_hot=encode_one_hot(set(toy_taxonomy.anomalies), toy_taxonomy),
        )
        report = ablated_explanation(result)
        assert report.detected == ()
        assert "ablated" in report.summary


class TestRunArtifacts:
    def test_artifact_round_trip(self, tmp_path, sample, toy_taxonomy):
        gateway = oracle_gateway(sample, toy_taxonomy)
        knowledge = {name: make_knowledge(name) for name in toy_taxonomy}
        result = classify_sample(sample, toy_taxonomy, knowledge, gateway)
        explanation = generate_explanation(result, knowledge, gateway)
        path = write_sample_artifact(tmp_path, result, explanation)
        payload = json.loads(path.read_text())
        assert payload["sample_id"] == sample.sample_id
        assert payload["one_hot"]["bits"] == list(result.one_hot.bits)
        assert payload["per_anomaly"]["Soot"]["bits"] == [1, 1, 1]
        assert len(payload["per_anomaly"]["Soot"]["repetitions"]) == 3
        predictions = load_run_predictions(tmp_path)
        assert predictions[sample.sample_id] == result.one_hot
