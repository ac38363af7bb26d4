"""Generation phase: per-anomaly detection over both stage images, repeated
R times, reduced to a one-hot classification, plus the explanation report.

Each repetition issues one multimodal detection call followed by one
classification call whose reply must be a bare 0 or 1; the per-anomaly mean
of those bits is thresholded at 0.5 (boundary inclusive) to set the final
bit. Prompts are rendered from fixed templates; ablation mode strips every
piece of retrieved content and leaves only the instruction and test images.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .dataset import AnomalyTaxonomy, OneHotVector, TestSample, encode_one_hot
from .errors import (
    DetectionError,
    GatewayError,
    SectionParseError,
    TemplateError,
    VerdictParseError,
)
from .model_gateway import (
    ChatMessage,
    GenerationParams,
    ImagePart,
    ModelGateway,
    TextPart,
)
from .retrieval import AnomalyKnowledge, split_sections

DETECTION_INSTRUCTION = "Analyze the test image carefully and determine if **{anomaly_name}** is possible."
DETECTION_CONTEXT_SENTENCE = (
    "Use the information provided in the reference image and additional scientific "
    "information to support your assessment."
)
DETECTION_ANSWER_SENTENCE = "Provide a clear, short, and reasoned answer with supporting evidence."
DETECTION_TEST_IMAGES_OPEN = "These are the test images: **"
DETECTION_REFERENCE_OPEN = "The reference image shows an example of **{anomaly_name}: "
DETECTION_REFERENCE_CLOSE = "**. Use it for comparison."
DETECTION_INFO_SENTENCE = (
    "Here is additional scientific information about **{anomaly_name}: {info_anomaly_text}**."
)

CLASSIFICATION_TEMPLATE = (
    "This is the decision about whether the Anomaly exist: **{detection_results}**. "
    "If **{anomaly_name}** is detected in even one of the test images, return 1; "
    "otherwise, return 0. Do not provide any additional explanation or reasoning in the response."
)

EXPLANATION_TEMPLATE = (
    "Given the detected anomalies in the manufacturing process: **{classification_results}**, "
    "provide a detailed scientific explanation covering the following:\n"
    "1. Root Cause\n"
    "2. Prevention Strategies\n"
    "3. Additional Insights\n"
    "Ensure the response is precise, technical, and grounded in provided information: "
    "**{info_anomaly_text}**"
)

EXPLANATION_SECTION_HEADERS = ("Root Cause", "Prevention Strategies", "Additional Insights")
NO_ANOMALIES_MESSAGE = "No anomalies detected."
EXPLANATION_ABLATED_MESSAGE = "Explanation skipped: retrieved context was ablated for this run."

DEFAULT_REPETITIONS = 3
DETECTION_TEMPERATURE = 0.7  # repetition only adds signal under stochastic decoding
STRUCTURED_TEMPERATURE = 0.0

MODE_PER_REPETITION = "per_repetition"
MODE_COMBINED = "combined"

_PLACEHOLDER_RE = re.compile(
    r"\{(anomaly_name|image_stage_description|test_image|reference_image"
    r"|reference_image_description|info_anomaly_text|detection_results"
    r"|classification_results|per_image)\}"
)


@dataclass(frozen=True)
class PromptBindings:
    """Everything the templates may substitute; unused fields stay None."""

    anomaly_name: str
    test_images: tuple[tuple[str, bytes], ...] = ()
    reference_image: bytes | None = None
    reference_image_description: str | None = None
    info_anomaly_text: str | None = None
    detection_results: str | None = None
    classification_results: str | None = None

    def __post_init__(self):
        if not self.anomaly_name:
            raise TemplateError("prompt bindings require an anomaly name")
        if (self.reference_image is None) != (self.reference_image_description is None):
            raise TemplateError(
                "reference image and its description must be bound together"
            )


@dataclass(frozen=True)
class DetectionVerdict:
    anomaly_name: str
    repetition: int
    detection_response: str
    raw_response: str
    bit: int


@dataclass(frozen=True)
class AnomalyDecision:
    bits: tuple[int, ...]
    mean: float
    final: int
    verdicts: tuple[DetectionVerdict, ...]


@dataclass(frozen=True)
class ClassificationResult:
    sample_id: str
    per_anomaly: dict[str, AnomalyDecision]
    one_hot: OneHotVector

    def detected(self) -> tuple[str, ...]:
        return tuple(name for name, d in self.per_anomaly.items() if d.final == 1)

    def summary_string(self) -> str:
        """One-hot summary bound into the explanation prompt."""
        return ", ".join(f"{name}={d.final}" for name, d in self.per_anomaly.items())


@dataclass(frozen=True)
class ExplanationSections:
    root_cause: str
    prevention_strategies: str
    additional_insights: str


@dataclass(frozen=True)
class ExplanationReport:
    sample_id: str
    detected: tuple[str, ...]
    per_anomaly: dict[str, ExplanationSections]
    summary: str

    def __post_init__(self):
        if set(self.per_anomaly) != set(self.detected):
            raise DetectionError("explanation sections must cover exactly the detected anomalies")


def _finalize_parts(parts: list) -> tuple:
    """Merge adjacent text segments and guard against unbound placeholders."""
    merged: list = []
    for part in parts:
        if isinstance(part, str):
            if merged and isinstance(merged[-1], str):
                merged[-1] += part
            else:
                merged.append(part)
        else:
            merged.append(part)
    out = []
    for part in merged:
        if isinstance(part, str):
            leftover = _PLACEHOLDER_RE.search(part)
            if leftover:
                raise TemplateError(f"unresolved placeholder {leftover.group(0)} in rendered prompt")
            out.append(TextPart(part))
        else:
            out.append(part)
    return tuple(out)


def detection_bindings(
    knowledge: AnomalyKnowledge | None,
    sample: TestSample,
    anomaly_name: str | None = None,
) -> PromptBindings:
    """Bind a knowledge packet and sample to the detection template inputs."""
    name = anomaly_name or (knowledge.anomaly_name if knowledge else None)
    if not name:
        raise TemplateError("detection prompt requires an anomaly name")
    test_images = tuple(
        (image.stage_description, Path(image.image_ref).read_bytes())
        for image in sample.ordered_images()
    )
    if knowledge is None:
        return PromptBindings(anomaly_name=name, test_images=test_images)
    return PromptBindings(
        anomaly_name=name,
        test_images=test_images,
        reference_image=(
            knowledge.reference_image.data if knowledge.reference_image is not None else None
        ),
        reference_image_description=knowledge.reference_image_description,
        info_anomaly_text=knowledge.info_text.as_prompt_block(),
    )


def render_detection_prompt(bindings: PromptBindings, ablate_retrieval: bool = False) -> list[ChatMessage]:
    """Render the detection template over the bound values.

    With retrieval, the prompt carries the reference image (when present),
    its description, and the four-section info text. In ablation mode every
    retrieved element is omitted, along with the sentence pointing at it.
    """
    if not ablate_retrieval and bindings.info_anomaly_text is None:
        raise TemplateError("detection prompt requires bound info text unless retrieval is ablated")
    name = bindings.anomaly_name

    parts: list = [DETECTION_INSTRUCTION.format(anomaly_name=name) + " "]
    if not ablate_retrieval:
        parts.append(DETECTION_CONTEXT_SENTENCE + " ")
    parts.append(DETECTION_ANSWER_SENTENCE + " ")
    parts.append(DETECTION_TEST_IMAGES_OPEN)
    for i, (stage_description, image_bytes) in enumerate(bindings.test_images):
        if i:
            parts.append(". ")
        parts.append(f"{stage_description}: ")
        parts.append(ImagePart(image_bytes))
    parts.append("**.")

    if not ablate_retrieval:
        if bindings.reference_image is not None:
            parts.append(" " + DETECTION_REFERENCE_OPEN.format(anomaly_name=name))
            parts.append(ImagePart(bindings.reference_image))
            parts.append(f"+{bindings.reference_image_description}")
            parts.append(DETECTION_REFERENCE_CLOSE)
        parts.append(
            " "
            + DETECTION_INFO_SENTENCE.format(
                anomaly_name=name, info_anomaly_text=bindings.info_anomaly_text
            )
        )

    return [ChatMessage(role="user", parts=_finalize_parts(parts))]


def build_detection_prompt(
    knowledge: AnomalyKnowledge | None,
    sample: TestSample,
    ablate_retrieval: bool = False,
    anomaly_name: str | None = None,
) -> list[ChatMessage]:
    """Bind and render the detection prompt over both stage images."""
    if knowledge is None and not ablate_retrieval:
        raise TemplateError("detection prompt requires knowledge unless retrieval is ablated")
    bindings = detection_bindings(knowledge, sample, anomaly_name=anomaly_name)
    return render_detection_prompt(bindings, ablate_retrieval=ablate_retrieval)


def build_classification_prompt(anomaly_name: str, detection_results: str) -> list[ChatMessage]:
    text = CLASSIFICATION_TEMPLATE.format(
        detection_results=detection_results, anomaly_name=anomaly_name
    )
    return [ChatMessage(role="user", parts=_finalize_parts([text]))]


def build_explanation_prompt(classification_results: str, info_anomaly_text: str) -> list[ChatMessage]:
    text = EXPLANATION_TEMPLATE.format(
        classification_results=classification_results, info_anomaly_text=info_anomaly_text
    )
    return [ChatMessage(role="user", parts=_finalize_parts([text]))]


_FENCE_RE = re.compile(r"^```[a-zA-Z0-9_-]*\n?(.*?)\n?```$", re.S)


def parse_binary_verdict(raw: str) -> int:
    """Accept exactly '0' or '1', tolerating whitespace, quotes, and fences."""
    text = raw.strip()
    for _ in range(4):
        fence = _FENCE_RE.match(text)
        if fence:
            text = fence.group(1).strip()
            continue
        if len(text) >= 2 and text[0] == text[-1] and text[0] in "`'\"":
            text = text[1:-1].strip()
            continue
        break
    if text == "0":
        return 0
    if text == "1":
        return 1
    raise VerdictParseError(f"classification response is not a bare 0/1: {raw!r}")


def _classify_bit(anomaly_name: str, detection_results: str, gateway: ModelGateway) -> tuple[str, int]:
    prompt = build_classification_prompt(anomaly_name, detection_results)
    params = GenerationParams(temperature=STRUCTURED_TEMPERATURE)
    response = gateway.complete_chat(prompt, params)
    try:
        return response.text, parse_binary_verdict(response.text)
    except VerdictParseError:
        retry = gateway.complete_chat(prompt, params)
        return retry.text, parse_binary_verdict(retry.text)


def run_detection(
    anomaly_name: str,
    knowledge: AnomalyKnowledge | None,
    sample: TestSample,
    gateway: ModelGateway,
    repetitions: int = DEFAULT_REPETITIONS,
    ablate_retrieval: bool = False,
) -> list[DetectionVerdict]:
    """R detection+classification rounds; the prompt is rendered once and
    reused verbatim across repetitions."""
    if repetitions < 1:
        raise DetectionError(f"repetitions must be >= 1, got {repetitions}")
    prompt = build_detection_prompt(knowledge, sample, ablate_retrieval, anomaly_name=anomaly_name)
    verdicts = []
    for repetition in range(1, repetitions + 1):
        try:
            detection = gateway.complete_vision(
                prompt, GenerationParams(temperature=DETECTION_TEMPERATURE)
            )
            raw, bit = _classify_bit(anomaly_name, detection.text, gateway)
        except (GatewayError, VerdictParseError) as exc:
            raise DetectionError(
                f"anomaly {anomaly_name!r}, repetition {repetition} of {repetitions}: {exc}"
            ) from exc
        verdicts.append(
            DetectionVerdict(
                anomaly_name=anomaly_name,
                repetition=repetition,
                detection_response=detection.text,
                raw_response=raw,
                bit=bit,
            )
        )
    return verdicts


def aggregate_bits(bits: Sequence[int]) -> tuple[float, int]:
    """Mean of the repetition bits and the final decision (mean >= 0.5)."""
    if not bits:
        raise DetectionError("cannot aggregate an empty bit list")
    total = sum(bits)
    mean = total / len(bits)
    final = 1 if 2 * total >= len(bits) else 0
    return mean, final


def classify_sample(
    sample: TestSample,
    taxonomy: AnomalyTaxonomy,
    knowledge_map: Mapping[str, AnomalyKnowledge] | None,
    gateway: ModelGateway,
    repetitions: int = DEFAULT_REPETITIONS,
    ablate_retrieval: bool = False,
    classification_mode: str = MODE_PER_REPETITION,
) -> ClassificationResult:
    """Detect every taxonomy anomaly (in taxonomy order) and assemble the
    one-hot classification."""
    if classification_mode not in (MODE_PER_REPETITION, MODE_COMBINED):
        raise DetectionError(f"unknown classification_mode {classification_mode!r}")
    knowledge_map = knowledge_map or {}
    if not ablate_retrieval:
        missing = [name for name in taxonomy if name not in knowledge_map]
        if missing:
            raise DetectionError(f"knowledge packets missing for anomalies: {missing}")

    per_anomaly: dict[str, AnomalyDecision] = {}
    for name in taxonomy:
        knowledge = None if ablate_retrieval else knowledge_map[name]
        if classification_mode == MODE_PER_REPETITION:
            verdicts = run_detection(
                name, knowledge, sample, gateway, repetitions, ablate_retrieval
            )
            bits = tuple(v.bit for v in verdicts)
        else:
            verdicts_list = []
            prompt = build_detection_prompt(knowledge, sample, ablate_retrieval, anomaly_name=name)
            detections = []
            for repetition in range(1, repetitions + 1):
                try:
                    detection = gateway.complete_vision(
                        prompt, GenerationParams(temperature=DETECTION_TEMPERATURE)
                    )
                except GatewayError as exc:
                    raise DetectionError(
                        f"anomaly {name!r}, repetition {repetition} of {repetitions}: {exc}"
                    ) from exc
                detections.append(detection.text)
            combined = "\n".join(detections)
            try:
                raw, bit = _classify_bit(name, combined, gateway)
            except (GatewayError, VerdictParseError) as exc:
                raise DetectionError(f"anomaly {name!r}, combined classification: {exc}") from exc
            verdicts_list.append(
                DetectionVerdict(
                    anomaly_name=name,
                    repetition=1,
                    detection_response=combined,
                    raw_response=raw,
                    bit=bit,
                )
            )
            verdicts = verdicts_list
            bits = (bit,)
        mean, final = aggregate_bits(bits)
        per_anomaly[name] = AnomalyDecision(bits=bits, mean=mean, final=final, verdicts=tuple(verdicts))

    one_hot = encode_one_hot(
        [name for name, d in per_anomaly.items() if d.final == 1], taxonomy
    )
    return ClassificationResult(sample_id=sample.sample_id, per_anomaly=per_anomaly, one_hot=one_hot)


def _parse_explanation(text: str, detected: Sequence[str]) -> dict[str, ExplanationSections] | None:
    positions = []
    for name in detected:
        pattern = re.compile(
            rf"(?:^|\n)\s*(?:#+\s*)?(?:\*\*)?{re.escape(name)}(?:\*\*)?\s*:?[ \t]*(?:\n|$)",
            re.IGNORECASE,
        )
        match = pattern.search(text)
        if match is None:
            if len(detected) == 1:
                # Single-anomaly answers commonly skip the name heading.
                sections = split_sections(text, EXPLANATION_SECTION_HEADERS)
                if sections is None:
                    return None
                return {
                    detected[0]: ExplanationSections(
                        root_cause=sections["Root Cause"],
                        prevention_strategies=sections["Prevention Strategies"],
                        additional_insights=sections["Additional Insights"],
                    )
                }
            return None
        positions.append((match.start(), match.end(), name))
    positions.sort()
    out: dict[str, ExplanationSections] = {}
    for i, (_, end, name) in enumerate(positions):
        stop = positions[i + 1][0] if i + 1 < len(positions) else len(text)
        sections = split_sections(text[end:stop], EXPLANATION_SECTION_HEADERS)
        if sections is None:
            return None
        out[name] = ExplanationSections(
            root_cause=sections["Root Cause"],
            prevention_strategies=sections["Prevention Strategies"],
            additional_insights=sections["Additional Insights"],
        )
    return out


def generate_explanation(
    result: ClassificationResult,
    knowledge_map: Mapping[str, AnomalyKnowledge],
    gateway: ModelGateway,
) -> ExplanationReport:
    """One explanation call covering all detected anomalies, parsed into the
    three headed sections per anomaly (one re-ask before failing)."""
    detected = result.detected()
    if not detected:
        return ExplanationReport(
            sample_id=result.sample_id, detected=(), per_anomaly={}, summary=NO_ANOMALIES_MESSAGE
        )
    missing = [name for name in detected if name not in knowledge_map]
    if missing:
        raise DetectionError(f"explanation requires info text for: {missing}")
    info_block = "\n\n".join(
        f"{name}:\n{knowledge_map[name].info_text.as_prompt_block()}" for name in detected
    )
    prompt = build_explanation_prompt(result.summary_string(), info_block)
    params = GenerationParams(temperature=STRUCTURED_TEMPERATURE)
    response = gateway.complete_chat(prompt, params)
    parsed = _parse_explanation(response.text, detected)
    if parsed is None:
        headed = ", ".join(EXPLANATION_SECTION_HEADERS)
        retry_messages = list(prompt) + [
            ChatMessage.text("assistant", response.text),
            ChatMessage.text(
                "user",
                f"Reformat the previous answer with one heading per detected anomaly "
                f"({', '.join(detected)}), each followed by the sections: {headed}.",
            ),
        ]
        retry = gateway.complete_chat(retry_messages, params)
        parsed = _parse_explanation(retry.text, detected)
        if parsed is None:
            raise SectionParseError(
                f"explanation for sample {result.sample_id!r} is malformed after one re-ask"
            )
    return ExplanationReport(
        sample_id=result.sample_id,
        detected=detected,
        per_anomaly=parsed,
        summary=f"Detected anomalies: {', '.join(detected)}.",
    )


def ablated_explanation(result: ClassificationResult) -> ExplanationReport:
    """Placeholder report for ablated runs, which have no grounding text."""
    return ExplanationReport(
        sample_id=result.sample_id, detected=(), per_anomaly={}, summary=EXPLANATION_ABLATED_MESSAGE
    )


# --- run artifacts ----------------------------------------------------------


def sample_artifact_payload(result: ClassificationResult, explanation: ExplanationReport) -> dict:
    return {
        "sample_id": result.sample_id,
        "one_hot": {"dataset_id": result.one_hot.dataset_id, "bits": list(result.one_hot.bits)},
        "per_anomaly": {
            name: {
                "bits": list(decision.bits),
                "mean": decision.mean,
                "final": decision.final,
                "repetitions": [
                    {
                        "repetition": v.repetition,
                        "detection_response": v.detection_response,
                        "classification_response": v.raw_response,
                        "bit": v.bit,
                    }
                    for v in decision.verdicts
                ],
            }
            for name, decision in result.per_anomaly.items()
        },
        "explanation": {
            "detected": list(explanation.detected),
            "summary": explanation.summary,
            "per_anomaly": {
                name: {
                    "root_cause": sections.root_cause,
                    "prevention_strategies": sections.prevention_strategies,
                    "additional_insights": sections.additional_insights,
                }
                for name, sections in explanation.per_anomaly.items()
            },
        },
    }


def write_sample_artifact(
    run_dir: str | Path, result: ClassificationResult, explanation: ExplanationReport
) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / f"{result.sample_id}.json"
    payload = sample_artifact_payload(result, explanation)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def write_run_manifest(run_dir: str | Path, manifest: dict) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def load_run_predictions(run_dir: str | Path) -> dict[str, OneHotVector]:
    """Read every sample artifact's one-hot vector from a run directory."""
    run_dir = Path(run_dir)
    predictions: dict[str, OneHotVector] = {}
    for path in sorted(run_dir.glob("*.json")):
        if path.name in ("manifest.json", "report.json", "ablation.json"):
            continue
        payload = json.loads(path.read_text("utf-8"))
        if "one_hot" not in payload:
            continue
        predictions[payload["sample_id"]] = OneHotVector(
            dataset_id=payload["one_hot"]["dataset_id"], bits=tuple(payload["one_hot"]["bits"])
        )
    return predictions
