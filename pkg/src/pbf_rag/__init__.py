"""Literature-grounded multimodal anomaly detection harness for L-PBF imagery.

Pipeline stages: corpus ingestion, exact vector indexing, per-anomaly
knowledge retrieval, prompted multimodal detection with one-hot
classification and explanations, and quantitative evaluation against
chance baselines with a retrieval ablation.
"""

from .dataset import (
    AnomalyTaxonomy,
    OneHotVector,
    StageImage,
    TestSample,
    decode_one_hot,
    encode_one_hot,
    load_ground_truth,
    load_samples,
    load_taxonomy,
)
from .detection_pipeline import (
    ClassificationResult,
    DetectionVerdict,
    ExplanationReport,
    build_detection_prompt,
    classify_sample,
    generate_explanation,
    parse_binary_verdict,
    run_detection,
)
from .evaluation import (
    AnomalyScore,
    ConfusionCounts,
    EvaluationReport,
    ablation_compare,
    anomaly_accuracy,
    baseline_always_positive,
    baseline_proportional,
    dataset_average,
    emit_report,
)
from .model_gateway import (
    ChatMessage,
    GenerationParams,
    ImagePart,
    MockBackend,
    ModelGateway,
    ModelResponse,
    RemoteBackend,
    TextPart,
    content_digest,
    render_transcript,
)
from .retrieval import (
    AnomalyKnowledge,
    KnowledgeCache,
    RetrievalParams,
    build_anomaly_knowledge,
    retrieve_anomaly_text,
    retrieve_reference_image,
)
from .vector_index import (
    IndexEntry,
    RankedHit,
    VectorIndex,
    cosine_similarity,
    maxsim_score,
)

__version__ = "0.1.0"
