"""Per-anomaly accuracy, dataset averages, chance baselines, and the
with/without-retrieval ablation comparison.

All accuracies accumulate as exact rationals; floats appear only at render
time (three decimals, half-up). Two baselines are reported side by side:
the always-positive predictor (accuracy equals prevalence) and the
proportional-chance predictor (p^2 + (1-p)^2).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .dataset import AnomalyTaxonomy, OneHotVector
from .errors import EvaluationError


def to_fraction(value) -> Fraction:
    """Exact conversion; floats are read through their decimal repr so that
    printed values like 0.19 stay 19/100."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(Decimal(repr(value)))
    if isinstance(value, str):
        return Fraction(Decimal(value))
    raise EvaluationError(f"cannot interpret {value!r} as a number")


def format_ratio(value: Fraction, places: int = 3) -> str:
    """Render to fixed decimals with half-up rounding."""
    quant = Decimal(1).scaleb(-places)
    dec = Decimal(value.numerator) / Decimal(value.denominator)
    return str(dec.quantize(quant, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ConfusionCounts:
    true_positives: int
    true_negatives: int
    false_positives: int
    false_negatives: int

    def __post_init__(self):
        for field_value in (
            self.true_positives,
            self.true_negatives,
            self.false_positives,
            self.false_negatives,
        ):
            if field_value < 0:
                raise EvaluationError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return (
            self.true_positives + self.true_negatives + self.false_positives + self.false_negatives
        )


@dataclass(frozen=True)
class AnomalyScore:
    anomaly_name: str
    accuracy: Fraction
    prevalence: Fraction
    counts: ConfusionCounts


@dataclass(frozen=True)
class AblationResult:
    with_retrieval: Fraction
    without_retrieval: Fraction

    @property
    def delta(self) -> Fraction:
        return self.with_retrieval - self.without_retrieval


@dataclass(frozen=True)
class EvaluationReport:
    dataset_id: str
    per_anomaly: tuple[AnomalyScore, ...]
    dataset_average: Fraction
    baselines: dict[str, dict[str, Fraction]]
    ablation: AblationResult | None = None


def _bits_at(vector, index: int) -> int:
    bits = vector.bits if isinstance(vector, OneHotVector) else tuple(vector)
    if index >= len(bits):
        raise EvaluationError(f"anomaly index {index} out of range for vector of length {len(bits)}")
    return int(bits[index])


def anomaly_accuracy(
    predictions: Mapping[str, "OneHotVector | Sequence[int]"],
    truths: Mapping[str, "OneHotVector | Sequence[int]"],
    anomaly_index: int,
    anomaly_name: str = "",
) -> AnomalyScore:
    """Binary accuracy at one one-hot position: (TP + TN) / total samples."""
    missing = sorted(set(truths) - set(predictions))
    extra = sorted(set(predictions) - set(truths))
    if missing or extra:
        raise EvaluationError(
            f"prediction/truth sample sets differ; missing predictions for {missing}, "
            f"unexpected predictions for {extra}"
        )
    if not truths:
        raise EvaluationError("cannot score an empty sample set")
    tp = tn = fp = fn = 0
    for sample_id in truths:
        pred = _bits_at(predictions[sample_id], anomaly_index)
        true = _bits_at(truths[sample_id], anomaly_index)
        if pred == 1 and true == 1:
            tp += 1
        elif pred == 0 and true == 0:
            tn += 1
        elif pred == 1 and true == 0:
            fp += 1
        else:
            fn += 1
    counts = ConfusionCounts(tp, tn, fp, fn)
    return AnomalyScore(
        anomaly_name=anomaly_name,
        accuracy=Fraction(tp + tn, counts.total),
        prevalence=Fraction(tp + fn, counts.total),
        counts=counts,
    )


def dataset_average(scores: Iterable) -> Fraction:
    """Arithmetic mean of accuracies; accepts AnomalyScore rows or bare numbers."""
    values = [
        score.accuracy if isinstance(score, AnomalyScore) else to_fraction(score)
        for score in scores
    ]
    if not values:
        raise EvaluationError("cannot average an empty score list")
    return sum(values, Fraction(0)) / len(values)


def baseline_always_positive(prevalence) -> Fraction:
    """Accuracy of the constant-1 predictor."""
    p = to_fraction(prevalence)
    if not 0 <= p <= 1:
        raise EvaluationError(f"prevalence must be in [0, 1], got {p}")
    return p


def baseline_proportional(prevalence) -> Fraction:
    """Expected accuracy of a random predictor emitting 1 with probability p."""
    p = to_fraction(prevalence)
    if not 0 <= p <= 1:
        raise EvaluationError(f"prevalence must be in [0, 1], got {p}")
    return p * p + (1 - p) * (1 - p)


def build_report(
    predictions: Mapping[str, OneHotVector],
    truths: Mapping[str, OneHotVector],
    taxonomy: AnomalyTaxonomy,
    ablation: AblationResult | None = None,
) -> EvaluationReport:
    scores = []
    baselines: dict[str, dict[str, Fraction]] = {}
    for index, name in enumerate(taxonomy):
        score = anomaly_accuracy(predictions, truths, index, anomaly_name=name)
        scores.append(score)
        baselines[name] = {
            "always_positive": baseline_always_positive(score.prevalence),
            "proportional_chance": baseline_proportional(score.prevalence),
        }
    return EvaluationReport(
        dataset_id=taxonomy.dataset_id,
        per_anomaly=tuple(scores),
        dataset_average=dataset_average(scores),
        baselines=baselines,
        ablation=ablation,
    )


def ablation_compare(with_report: EvaluationReport, without_report: EvaluationReport) -> AblationResult:
    """Delta between the two arms of the retrieval ablation."""
    if with_report.dataset_id != without_report.dataset_id:
        raise EvaluationError(
            f"ablation arms cover different datasets: {with_report.dataset_id!r} vs "
            f"{without_report.dataset_id!r}"
        )
    with_names = [s.anomaly_name for s in with_report.per_anomaly]
    without_names = [s.anomaly_name for s in without_report.per_anomaly]
    if with_names != without_names:
        raise EvaluationError("ablation arms cover different taxonomies")
    return AblationResult(
        with_retrieval=with_report.dataset_average,
        without_retrieval=without_report.dataset_average,
    )


def mean_ablation_delta(results: Iterable[AblationResult]) -> Fraction:
    """Cross-dataset mean of ablation deltas."""
    deltas = [r.delta for r in results]
    if not deltas:
        raise EvaluationError("no ablation results to average")
    return sum(deltas, Fraction(0)) / len(deltas)


# --- serialization ----------------------------------------------------------


def _fraction_pair(value: Fraction) -> list[int]:
    return [value.numerator, value.denominator]


def _pair_fraction(pair) -> Fraction:
    return Fraction(int(pair[0]), int(pair[1]))


def report_to_dict(report: EvaluationReport) -> dict:
    payload = {
        "dataset_id": report.dataset_id,
        "dataset_average": _fraction_pair(report.dataset_average),
        "per_anomaly": [
            {
                "anomaly_name": s.anomaly_name,
                "accuracy": _fraction_pair(s.accuracy),
                "prevalence": _fraction_pair(s.prevalence),
                "counts": {
                    "true_positives": s.counts.true_positives,
                    "true_negatives": s.counts.true_negatives,
                    "false_positives": s.counts.false_positives,
                    "false_negatives": s.counts.false_negatives,
                },
            }
            for s in report.per_anomaly
        ],
        "baselines": {
            name: {kind: _fraction_pair(value) for kind, value in row.items()}
            for name, row in report.baselines.items()
        },
        "ablation": None,
    }
    if report.ablation is not None:
        payload["ablation"] = {
            "with_retrieval": _fraction_pair(report.ablation.with_retrieval),
            "without_retrieval": _fraction_pair(report.ablation.without_retrieval),
            "delta": _fraction_pair(report.ablation.delta),
        }
    return payload


def report_from_dict(payload: dict) -> EvaluationReport:
    scores = tuple(
        AnomalyScore(
            anomaly_name=row["anomaly_name"],
            accuracy=_pair_fraction(row["accuracy"]),
            prevalence=_pair_fraction(row["prevalence"]),
            counts=ConfusionCounts(**row["counts"]),
        )
        for row in payload["per_anomaly"]
    )
    ablation = None
    if payload.get("ablation"):
        ablation = AblationResult(
            with_retrieval=_pair_fraction(payload["ablation"]["with_retrieval"]),
            without_retrieval=_pair_fraction(payload["ablation"]["without_retrieval"]),
        )
    return EvaluationReport(
        dataset_id=payload["dataset_id"],
        per_anomaly=scores,
        dataset_average=_pair_fraction(payload["dataset_average"]),
        baselines={
            name: {kind: _pair_fraction(value) for kind, value in row.items()}
            for name, row in payload["baselines"].items()
        },
        ablation=ablation,
    )


def render_markdown(report: EvaluationReport) -> str:
    lines = [
        f"# Evaluation report: {report.dataset_id}",
        "",
        "| Anomaly | Always-Positive Baseline | Proportional Baseline | Accuracy |",
        "| --- | --- | --- | --- |",
    ]
    for score in report.per_anomaly:
        row = report.baselines[score.anomaly_name]
        lines.append(
            f"| {score.anomaly_name} "
            f"| {format_ratio(row['always_positive'])} "
            f"| {format_ratio(row['proportional_chance'])} "
            f"| {format_ratio(score.accuracy)} |"
        )
    lines.append("")
    lines.append(f"Dataset average accuracy: {format_ratio(report.dataset_average)}")
    if report.ablation is not None:
        lines.append(
            f"Ablation: with retrieval {format_ratio(report.ablation.with_retrieval)}, "
            f"without retrieval {format_ratio(report.ablation.without_retrieval)}, "
            f"delta {format_ratio(report.ablation.delta)}"
        )
    lines.append("")
    return "\n".join(lines)


def render_ablation_markdown(dataset_id: str, result: AblationResult) -> str:
    lines = [
        "# Retrieval ablation",
        "",
        "| Test Case Dataset | With Retrieval | Without Retrieval |",
        "| --- | --- | --- |",
        f"| {dataset_id} | {format_ratio(result.with_retrieval)} "
        f"| {format_ratio(result.without_retrieval)} |",
        "",
        f"Accuracy delta (with - without): {format_ratio(result.delta)}",
        "",
    ]
    return "\n".join(lines)


def emit_report(report: EvaluationReport, format: str = "json") -> bytes:
    """Deterministic serialization of a report as JSON or markdown."""
    if format == "json":
        return (
            json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n"
        ).encode("utf-8")
    if format == "markdown":
        return render_markdown(report).encode("utf-8")
    raise EvaluationError(f"unknown report format {format!r}")
