"""Exact cosine top-k index over embedding vectors, with binary persistence.

The index is a brute-force scan over contiguous float64 vectors: every query
scores every (kind-filtered) entry, so results always equal an exhaustive
oracle. Ties in score break by entry_id ascending for determinism. A
late-interaction MaxSim scorer over multi-vector entries is provided as a
drop-in alternative ranking path with the same hit type.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from threading import RLock
from typing import Iterable, Sequence

import numpy as np

from .errors import IndexIoError, VectorError

KIND_TEXT_CHUNK = "text_chunk"
KIND_PAGE_IMAGE_PROXY = "page_image_proxy"
KINDS = (KIND_TEXT_CHUNK, KIND_PAGE_IMAGE_PROXY)

MAGIC = b"PBFIDX1"
_HEADER = struct.Struct("<IQ")  # dim: u32, count: u64
_FRAME = struct.Struct("<I")


def as_vector(values) -> np.ndarray:
    """Validate and normalize input to a finite 1-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise VectorError("embedding vector must be 1-D and non-empty")
    if not np.all(np.isfinite(arr)):
        raise VectorError("embedding vector contains non-finite values")
    return arr


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two equal-dimension nonzero vectors."""
    va = as_vector(a)
    vb = as_vector(b)
    if va.shape[0] != vb.shape[0]:
        raise VectorError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    norm_a = float(np.linalg.norm(va))
    norm_b = float(np.linalg.norm(vb))
    if norm_a == 0.0 or norm_b == 0.0:
        raise VectorError("cosine similarity is undefined for zero vectors")
    return float(np.dot(va, vb) / (norm_a * norm_b))


@dataclass(frozen=True)
class IndexEntry:
    entry_id: str
    vector: np.ndarray
    kind: str
    payload_ref: str | tuple[str, int]

    def __post_init__(self):
        if not self.entry_id:
            raise VectorError("entry_id must be non-empty")
        if self.kind not in KINDS:
            raise VectorError(f"unknown entry kind {self.kind!r}")
        vec = as_vector(self.vector)
        if float(np.linalg.norm(vec)) == 0.0:
            raise VectorError(f"entry {self.entry_id!r} has a zero vector")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class RankedHit:
    entry_id: str
    score: float
    kind: str
    payload_ref: str | tuple[str, int]


def _rank(scored: list[RankedHit], k: int) -> list[RankedHit]:
    scored.sort(key=lambda h: (-h.score, h.entry_id))
    return scored[:k]


class VectorIndex:
    """Uniform-dimension vector store answering exact cosine top-k queries.

    Concurrency: a single lock serializes writers against readers; queries
    are pure functions of index state.
    """

    def __init__(self):
        self._entries: dict[str, IndexEntry] = {}
        self._dim: int | None = None
        self._lock = RLock()

    @property
    def dim(self) -> int | None:
        return self._dim

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._entries

    def get(self, entry_id: str) -> IndexEntry:
        with self._lock:
            try:
                return self._entries[entry_id]
            except KeyError:
                raise VectorError(f"no entry {entry_id!r} in index") from None

    def entries(self) -> list[IndexEntry]:
        with self._lock:
            return [self._entries[eid] for eid in sorted(self._entries)]

    def upsert(self, entry: IndexEntry) -> None:
        """Insert or atomically replace the entry with the same id."""
        with self._lock:
            if self._dim is None:
                self._dim = int(entry.vector.shape[0])
            elif entry.vector.shape[0] != self._dim:
                raise VectorError(
                    f"entry {entry.entry_id!r} has dim {entry.vector.shape[0]}, index dim is {self._dim}"
                )
            self._entries[entry.entry_id] = entry

    def query_top_k(self, query, k: int, kind_filter: str | None = None) -> list[RankedHit]:
        """Exact top-k by cosine score; an empty (filtered) index yields []."""
        if k < 1:
            raise VectorError(f"k must be >= 1, got {k}")
        if kind_filter is not None and kind_filter not in KINDS:
            raise VectorError(f"unknown kind filter {kind_filter!r}")
        q = as_vector(query)
        if float(np.linalg.norm(q)) == 0.0:
            raise VectorError("query vector is all zeros")
        with self._lock:
            if self._dim is not None and q.shape[0] != self._dim:
                raise VectorError(f"query dim {q.shape[0]} does not match index dim {self._dim}")
            candidates = [
                e for e in self.entries() if kind_filter is None or e.kind == kind_filter
            ]
        if not candidates:
            return []
        scored = [
            RankedHit(e.entry_id, cosine_similarity(q, e.vector), e.kind, e.payload_ref)
            for e in candidates
        ]
        return _rank(scored, k)

    def save(self, path: str | Path) -> None:
        """Write the index; load() restores it with bit-exact query results."""
        with self._lock:
            entries = self.entries()
            dim = self._dim or 0
        blob = bytearray()
        blob += MAGIC
        blob += _HEADER.pack(dim, len(entries))
        for entry in entries:
            payload = entry.payload_ref
            meta = json.dumps(
                {
                    "entry_id": entry.entry_id,
                    "kind": entry.kind,
                    "payload_ref": list(payload) if isinstance(payload, tuple) else payload,
                },
                sort_keys=True,
                separators=(",", ":"),
            ).encode("utf-8")
            body = _FRAME.pack(len(meta)) + meta + entry.vector.astype("<f8").tobytes()
            blob += _FRAME.pack(len(body)) + body
        try:
            Path(path).write_bytes(bytes(blob))
        except OSError as exc:
            raise IndexIoError(f"cannot write index to {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise IndexIoError(f"cannot read index from {path}: {exc}") from exc
        if len(data) < len(MAGIC) + _HEADER.size:
            raise IndexIoError(f"{path} is not an index file (truncated header)")
        magic = data[: len(MAGIC)]
        if magic[:6] != MAGIC[:6]:
            raise IndexIoError(f"{path} is not an index file (bad magic)")
        if magic != MAGIC:
            raise IndexIoError(f"{path} has unsupported index version {magic!r}")
        dim, count = _HEADER.unpack_from(data, len(MAGIC))
        pos = len(MAGIC) + _HEADER.size
        index = cls()
        for _ in range(count):
            if pos + _FRAME.size > len(data):
                raise IndexIoError(f"{path} is truncated")
            (body_len,) = _FRAME.unpack_from(data, pos)
            pos += _FRAME.size
            body = data[pos : pos + body_len]
            if len(body) != body_len:
                raise IndexIoError(f"{path} is truncated")
            pos += body_len
            (meta_len,) = _FRAME.unpack_from(body, 0)
            meta_raw = body[_FRAME.size : _FRAME.size + meta_len]
            vec_raw = body[_FRAME.size + meta_len :]
            try:
                meta = json.loads(meta_raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise IndexIoError(f"{path} has a corrupt entry header") from exc
            if len(vec_raw) != dim * 8:
                raise IndexIoError(f"{path} has a corrupt entry vector")
            vector = np.frombuffer(vec_raw, dtype="<f8").astype(np.float64)
            payload = meta["payload_ref"]
            if isinstance(payload, list):
                payload = (payload[0], int(payload[1]))
            index.upsert(
                IndexEntry(
                    entry_id=meta["entry_id"], vector=vector, kind=meta["kind"], payload_ref=payload
                )
            )
        if pos != len(data):
            raise IndexIoError(f"{path} has trailing bytes")
        return index


def maxsim_score(query_vectors, doc_vectors) -> float:
    """Late-interaction score: mean over query vectors of the max cosine
    similarity against the document's vectors.

    Normalizing by the query-vector count keeps scores in [-1, 1], so the
    RankedHit contract holds for either ranking path.
    """
    q = np.atleast_2d(np.asarray(query_vectors, dtype=np.float64))
    d = np.atleast_2d(np.asarray(doc_vectors, dtype=np.float64))
    if q.size == 0 or d.size == 0:
        raise VectorError("maxsim requires non-empty query and document vectors")
    if q.shape[1] != d.shape[1]:
        raise VectorError(f"dimension mismatch: {q.shape[1]} vs {d.shape[1]}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(d))):
        raise VectorError("maxsim vectors contain non-finite values")
    q_norms = np.linalg.norm(q, axis=1, keepdims=True)
    d_norms = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(q_norms == 0.0) or np.any(d_norms == 0.0):
        raise VectorError("maxsim is undefined for zero vectors")
    sims = (q / q_norms) @ (d / d_norms).T
    return float(np.mean(np.max(sims, axis=1)))


class MultiVectorPageIndex:
    """Multi-vector (per-token / per-patch) page store scored with MaxSim.

    Same RankedHit output and tie rules as VectorIndex.query_top_k, so it
    slots into retrieval wherever a page ranking is needed.
    """

    def __init__(self):
        self._pages: dict[str, tuple[np.ndarray, str | tuple[str, int]]] = {}

    def __len__(self) -> int:
        return len(self._pages)

    def add_page(self, entry_id: str, vectors, payload_ref) -> None:
        mat = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if mat.size == 0:
            raise VectorError(f"page entry {entry_id!r} has no vectors")
        self._pages[entry_id] = (mat, payload_ref)

    def query_top_k(self, query_vectors, k: int) -> list[RankedHit]:
        if k < 1:
            raise VectorError(f"k must be >= 1, got {k}")
        if not self._pages:
            return []
        scored = [
            RankedHit(eid, maxsim_score(query_vectors, mat), KIND_PAGE_IMAGE_PROXY, payload)
            for eid, (mat, payload) in sorted(self._pages.items())
        ]
        return _rank(scored, k)


def build_index(
    entries: Iterable[tuple[str, Sequence[float], str, "str | tuple[str, int]"]],
) -> VectorIndex:
    """Convenience constructor from (entry_id, vector, kind, payload_ref) rows."""
    index = VectorIndex()
    for entry_id, vector, kind, payload in entries:
        index.upsert(IndexEntry(entry_id=entry_id, vector=np.asarray(vector), kind=kind, payload_ref=payload))
    return index
