"""Corpus ingestion: PDFs to page records (text + preview image) and text chunks.

The on-disk layout under a corpus root is one directory per document:

    corpus/<doc_id>/page_<n>.png    rendered page preview
    corpus/<doc_id>/pages.json      per-page extracted text
    corpus/<doc_id>/chunks.json     overlapping text chunks for embedding
    corpus/corpus.json              ingest summary; its digest keys caches
"""

from __future__ import annotations

import hashlib
import json
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from . import pdfio
from .errors import ChunkingError, CorpusError

DEFAULT_CHUNK_SIZE = 1000
DEFAULT_OVERLAP = 200
SNAP_WINDOW = 64  # max backward search for a whitespace chunk boundary
PAGE_RENDER_DPI = 144
PAGE_SEPARATOR = "\n"

_SUMMARY_NAME = "corpus.json"


@dataclass(frozen=True)
class PageRecord:
    doc_id: str
    page_no: int
    text: str
    page_image_ref: Path


@dataclass(frozen=True)
class CorpusDocument:
    doc_id: str
    source_path: Path
    pages: tuple[PageRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "pages", tuple(self.pages))
        numbers = [p.page_no for p in self.pages]
        if numbers != list(range(1, len(numbers) + 1)):
            raise CorpusError(f"document {self.doc_id!r} page numbers must be 1..N in order")

    def text(self) -> str:
        return PAGE_SEPARATOR.join(p.text for p in self.pages)

    def page_end_offsets(self) -> list[int]:
        """Cumulative end offset of each page within text().

        The separator after page i is attributed to page i, so every char
        offset maps to exactly one page.
        """
        ends = []
        offset = 0
        for i, page in enumerate(self.pages):
            offset += len(page.text)
            if i < len(self.pages) - 1:
                offset += len(PAGE_SEPARATOR)
            ends.append(offset)
        return ends


@dataclass(frozen=True)
class TextChunk:
    chunk_id: str
    doc_id: str
    page_span: tuple[int, int]
    char_span: tuple[int, int]
    text: str


def chunk_id_for(doc_id: str, start: int, end: int) -> str:
    """Stable chunk id derived from the document id and char span."""
    return hashlib.sha256(f"{doc_id}|{start}|{end}".encode("utf-8")).hexdigest()[:16]


def chunk_spans(
    length: int,
    chunk_size: int,
    overlap: int,
    text: str | None = None,
) -> list[tuple[int, int]]:
    """Compute chunk char spans with fixed overlap.

    Consecutive spans share exactly `overlap` characters. When `text` is
    given, a span's end snaps backward to the nearest whitespace within
    SNAP_WINDOW chars (never so far that the next chunk fails to advance);
    the final span always ends at `length`.
    """
    if chunk_size <= 0:
        raise ChunkingError(f"chunk_size must be positive, got {chunk_size}")
    if overlap < 0 or overlap >= chunk_size:
        raise ChunkingError(f"overlap must satisfy 0 <= overlap < chunk_size, got {overlap}")
    if length == 0:
        return []
    spans = []
    start = 0
    while True:
        end = min(start + chunk_size, length)
        if end < length and text is not None:
            floor = max(end - SNAP_WINDOW, start + overlap + 1)
            for j in range(end, floor - 1, -1):
                if text[j - 1].isspace():
                    end = j
                    break
        spans.append((start, end))
        if end >= length:
            return spans
        start = end - overlap


def chunk_text(
    doc: CorpusDocument,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
) -> list[TextChunk]:
    """Chunk the document's concatenated page text.

    Removing the overlap from every chunk after the first and concatenating
    reconstructs the document text exactly.
    """
    text = doc.text()
    ends = doc.page_end_offsets()

    def page_at(offset: int) -> int:
        return bisect_right(ends, offset) + 1

    chunks = []
    for start, end in chunk_spans(len(text), chunk_size, overlap, text=text):
        chunks.append(
            TextChunk(
                chunk_id=chunk_id_for(doc.doc_id, start, end),
                doc_id=doc.doc_id,
                page_span=(page_at(start), page_at(end - 1)),
                char_span=(start, end),
                text=text[start:end],
            )
        )
    return chunks


def ingest_document(path: str | Path, doc_id: str, output_root: str | Path) -> CorpusDocument:
    """Read one PDF into page records, rendering a preview image per page.

    A page whose text cannot be extracted still yields a page image and
    empty text. Raises PdfReadError/EncryptedPdfError for unreadable input.
    """
    pdf_pages = pdfio.read_pdf(path)
    doc_dir = Path(output_root) / doc_id
    doc_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for page in pdf_pages:
        image = pdfio.render_page_preview(page, dpi=PAGE_RENDER_DPI)
        image_ref = doc_dir / f"page_{page.number}.png"
        image.save(image_ref, format="PNG")
        records.append(
            PageRecord(doc_id=doc_id, page_no=page.number, text=page.text, page_image_ref=image_ref)
        )
    return CorpusDocument(doc_id=doc_id, source_path=Path(path), pages=tuple(records))


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_document_outputs(doc: CorpusDocument, chunks: list[TextChunk], output_root: str | Path) -> None:
    doc_dir = Path(output_root) / doc.doc_id
    doc_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(
        doc_dir / "pages.json",
        {
            "doc_id": doc.doc_id,
            "pages": [
                {"page_no": p.page_no, "text": p.text, "image": p.page_image_ref.name}
                for p in doc.pages
            ],
        },
    )
    _dump_json(
        doc_dir / "chunks.json",
        {
            "doc_id": doc.doc_id,
            "chunks": [
                {
                    "chunk_id": c.chunk_id,
                    "page_span": list(c.page_span),
                    "char_span": list(c.char_span),
                    "text": c.text,
                }
                for c in chunks
            ],
        },
    )


def load_corpus_manifest(path: str | Path) -> list[tuple[str, Path]]:
    """Read a corpus manifest: JSON array of {"doc_id": str, "path": str}."""
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"corpus manifest not found: {path}")
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"corpus manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise CorpusError(f"corpus manifest {path} must be a JSON array")
    seen: set[str] = set()
    entries = []
    for i, row in enumerate(raw):
        if not isinstance(row, dict) or set(row) != {"doc_id", "path"}:
            raise CorpusError(f"corpus manifest {path}: entry {i} must be {{doc_id, path}}")
        doc_id = row["doc_id"]
        if not isinstance(doc_id, str) or not doc_id:
            raise CorpusError(f"corpus manifest {path}: entry {i} needs a non-empty doc_id")
        if doc_id in seen:
            raise CorpusError(f"corpus manifest {path}: duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        doc_path = Path(row["path"])
        if not doc_path.is_absolute():
            doc_path = path.parent / doc_path
        entries.append((doc_id, doc_path))
    return entries


def ingest_corpus(
    manifest_path: str | Path,
    output_root: str | Path,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_OVERLAP,
) -> "CorpusStore":
    """Ingest every manifest document and write the full corpus layout."""
    output_root = Path(output_root)
    output_root.mkdir(parents=True, exist_ok=True)
    summary_docs = []
    for doc_id, doc_path in load_corpus_manifest(manifest_path):
        doc = ingest_document(doc_path, doc_id, output_root)
        chunks = chunk_text(doc, chunk_size=chunk_size, overlap=overlap)
        write_document_outputs(doc, chunks, output_root)
        summary_docs.append(
            {
                "doc_id": doc_id,
                "source_sha256": hashlib.sha256(doc_path.read_bytes()).hexdigest(),
                "pages": len(doc.pages),
                "chunks": len(chunks),
            }
        )
    summary = {
        "chunk_size": chunk_size,
        "overlap": overlap,
        "docs": sorted(summary_docs, key=lambda d: d["doc_id"]),
    }
    _dump_json(output_root / _SUMMARY_NAME, summary)
    return CorpusStore(output_root)


class CorpusStore:
    """Read access to an ingested corpus directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        summary_path = self.root / _SUMMARY_NAME
        if not summary_path.is_file():
            raise CorpusError(f"no ingested corpus at {self.root} (missing {_SUMMARY_NAME})")
        self._summary = json.loads(summary_path.read_text("utf-8"))
        self._digest = hashlib.sha256(
            json.dumps(self._summary, sort_keys=True, separators=(",", ":")).encode("utf-8")
        ).hexdigest()
        self._chunk_map: dict[str, TextChunk] | None = None

    @property
    def digest(self) -> str:
        return self._digest

    def doc_ids(self) -> list[str]:
        return [d["doc_id"] for d in self._summary["docs"]]

    def iter_pages(self) -> Iterator[tuple[str, int, str]]:
        """Yield (doc_id, page_no, text) for every page, in doc_id order."""
        for doc_id in self.doc_ids():
            payload = json.loads((self.root / doc_id / "pages.json").read_text("utf-8"))
            for page in payload["pages"]:
                yield doc_id, int(page["page_no"]), page["text"]

    def iter_chunks(self) -> Iterator[TextChunk]:
        for doc_id in self.doc_ids():
            payload = json.loads((self.root / doc_id / "chunks.json").read_text("utf-8"))
            for row in payload["chunks"]:
                yield TextChunk(
                    chunk_id=row["chunk_id"],
                    doc_id=doc_id,
                    page_span=tuple(row["page_span"]),
                    char_span=tuple(row["char_span"]),
                    text=row["text"],
                )

    def chunk(self, chunk_id: str) -> TextChunk:
        if self._chunk_map is None:
            self._chunk_map = {c.chunk_id: c for c in self.iter_chunks()}
        try:
            return self._chunk_map[chunk_id]
        except KeyError:
            raise CorpusError(f"unknown chunk_id {chunk_id!r}") from None

    def page_image_path(self, doc_id: str, page_no: int) -> Path:
        path = self.root / doc_id / f"page_{page_no}.png"
        if not path.is_file():
            raise CorpusError(f"missing page image: {path}")
        return path
