"""Deterministic toy corpus and dataset generators for demos and tests.

The corpus is five small PDFs, each carrying one planted page (and hence
planted chunks) for one anomaly: the page mentions its anomaly name many
times while the other documents never do, so lexical-overlap embeddings
rank the planted content first. PDFs are written in reportlab's invariant
mode and images with fixed pixel content, so regenerated trees are
byte-identical.

reportlab is required only here (dev extra), not by the pipeline itself.
"""

from __future__ import annotations

import hashlib
import json
import random
from pathlib import Path

from PIL import Image, ImageDraw

TOY_ANOMALIES = (
    "Recoater Hopping",
    "Recoater Streaking",
    "Incomplete Spreading",
    "Soot",
    "Debris",
)

_INTRO_LINES = (
    "Laser powder bed fusion builds metal parts one thin layer at a time.",
    "A recoater blade spreads fresh powder across each finished layer.",
    "A scanning laser then melts selected regions into solid material.",
    "Layer cameras capture every build step for quality monitoring.",
    "Consistent powder layers are essential for dense, reliable parts.",
    "Build plates, gas flow, and optics all influence layer quality.",
)

_CLOSING_LINES = (
    "Careful process monitoring reduces scrap and rework in production.",
    "Layer imaging archives support audits of finished components.",
    "Future work will expand coverage of printer families and alloys.",
)


def _planted_lines(name: str) -> list[str]:
    # Every line names the anomaly; wording avoids the retrieval-query
    # vocabulary so rankings hinge on the name itself.
    lower = name.lower()
    return [
        f"{name} observed during powder bed monitoring.",
        f"{name} appears as a distinctive signature in layer imagery.",
        f"On the bed, {lower} starts as a localized deviation in the new layer.",
        f"Typical triggers of {lower} include blade wear and unstable feedstock.",
        f"Camera frames show {lower} in both capture stages of a layer.",
        f"Mitigating {lower} means tighter parameter control and fresh powder.",
        f"Operators log {lower} whenever the layer camera flags a deviation.",
        f"Severe {lower} can force a build stop and powder rework.",
        f"Archived examples of {lower} help train new reviewers.",
    ]


def make_toy_corpus(root: str | Path, anomalies=TOY_ANOMALIES) -> Path:
    """Write one PDF per anomaly plus a corpus manifest; returns manifest path."""
    from reportlab.lib.pagesizes import letter
    from reportlab.pdfgen.canvas import Canvas

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, name in enumerate(anomalies):
        doc_id = f"doc{i:02d}"
        pdf_path = root / f"{doc_id}.pdf"
        canvas = Canvas(str(pdf_path), pagesize=letter, invariant=1, pageCompression=1)

        def draw_page(lines):
            text = canvas.beginText(72, 720)
            text.setFont("Helvetica", 11)
            for line in lines:
                text.textLine(line)
            canvas.drawText(text)
            canvas.showPage()

        draw_page([f"Layer monitoring notes, volume {i + 1}.", ""] + list(_INTRO_LINES))
        draw_page([f"Section on {name}.", ""] + _planted_lines(name))
        draw_page(list(_CLOSING_LINES))
        canvas.save()
        entries.append({"doc_id": doc_id, "path": pdf_path.name})
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def _stage_image(path: Path, sample_id: str, stage: str) -> None:
    digest = hashlib.sha256(f"{sample_id}:{stage}".encode("utf-8")).digest()
    base = (64 + digest[0] % 128, 64 + digest[1] % 128, 64 + digest[2] % 128)
    image = Image.new("RGB", (96, 72), base)
    draw = ImageDraw.Draw(image)
    stripe_y = 8 + digest[3] % 48
    draw.rectangle([(0, stripe_y), (95, stripe_y + 6)], fill=(digest[4], digest[5], digest[6]))
    image.save(path, format="PNG")


def make_toy_dataset(
    root: str | Path,
    anomalies=TOY_ANOMALIES,
    dataset_id: str = "toy-lpbf",
    samples: int = 10,
    seed: int = 7,
) -> tuple[Path, Path]:
    """Write stage images, a dataset config, and annotations.

    Sample 0 is always a fully normal layer; the rest draw anomalies from a
    seeded RNG so prevalences vary but stay reproducible.
    """
    root = Path(root)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    draws: list[list[str]] = [[]]  # sample 0 is always a normal layer
    for _ in range(1, samples):
        draws.append([name for name in anomalies if rng.random() < 0.4])
    if samples > 1:
        if not draws[1]:
            draws[1] = [anomalies[0]]
        for name in anomalies:  # every anomaly occurs somewhere (positive prevalence)
            if not any(name in truth for truth in draws[1:]):
                draws[-1].append(name)
    rows = []
    for j in range(samples):
        sample_id = f"L{j:04d}"
        truth = [name for name in anomalies if name in draws[j]]
        image_refs = {}
        for stage in ("post_melting", "post_spreading"):
            filename = f"{sample_id}_{stage}.png"
            _stage_image(images_dir / filename, sample_id, stage)
            image_refs[stage] = f"images/{filename}"
        rows.append({"sample_id": sample_id, "images": image_refs, "anomalies": truth})
    config_path = root / "dataset.json"
    config_path.write_text(
        json.dumps({"dataset_id": dataset_id, "anomalies": list(anomalies)}, indent=2) + "\n",
        encoding="utf-8",
    )
    annotations_path = root / "annotations.json"
    annotations_path.write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return config_path, annotations_path


def make_toy_workspace(root: str | Path, seed: int = 42) -> Path:
    """Full demo workspace: corpus, dataset, and a mock-backend run config."""
    root = Path(root)
    manifest = make_toy_corpus(root / "corpus_src")
    dataset_config, annotations = make_toy_dataset(root / "dataset")
    config = {
        "dataset_config": str(dataset_config.relative_to(root)),
        "annotations": str(annotations.relative_to(root)),
        "corpus_manifest": str(manifest.relative_to(root)),
        "output_dir": "out",
        "backends": {"chat": "mock", "vision": "mock", "embedding": "mock"},
        "seed": seed,
        "mock": {"oracle_annotations": str(annotations.relative_to(root))},
        "repetitions": 3,
        "retrieval": {"image_score_threshold": 0.15},
    }
    config_path = root / "run_config.json"
    config_path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return config_path
