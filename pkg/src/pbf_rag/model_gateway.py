"""Uniform access to chat, vision, and embedding models over two backends.

The remote backend speaks the vendor-standard chat-completions JSON wire
format over HTTPS (bearer token from PBF_RAG_API_KEY). The mock backend is
fully offline and deterministic: responses are pure functions of the seed,
registered fixtures, and request content, never of call order.

The gateway validates payloads before any backend call, retries transient
failures with exponential backoff (base 1s, factor 2, max 5 attempts), and
caps concurrent in-flight requests per backend.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import re
import time
from dataclasses import dataclass
from io import BytesIO
from threading import BoundedSemaphore, Lock
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import requests
from PIL import Image, UnidentifiedImageError

from .errors import (
    AuthenticationError,
    ClientRequestError,
    EmptyResponseError,
    FixtureConflictError,
    GatewayError,
    MissingFixtureError,
    PayloadError,
    RetryExhaustedError,
    TransientBackendError,
)

ROLES = ("system", "user", "assistant")

CAP_CHAT = "chat"
CAP_VISION = "vision"
CAP_EMBEDDING = "embedding"
CAPABILITIES = (CAP_CHAT, CAP_VISION, CAP_EMBEDDING)

DEFAULT_MAX_ATTEMPTS = 5
DEFAULT_BACKOFF_BASE = 1.0
DEFAULT_BACKOFF_FACTOR = 2.0
DEFAULT_MAX_CONCURRENT = 2
DEFAULT_MAX_PAYLOAD_BYTES = 20_000_000
DEFAULT_MAX_EMBED_CHARS = 8192


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if self.role not in ROLES:
            raise PayloadError(f"unknown message role {self.role!r}")
        if not self.parts:
            raise PayloadError("message must have at least one part")
        for part in self.parts:
            if not isinstance(part, (TextPart, ImagePart)):
                raise PayloadError(f"unsupported message part {type(part).__name__}")

    @classmethod
    def text(cls, role: str, text: str) -> "ChatMessage":
        return cls(role=role, parts=(TextPart(text),))

    def text_content(self) -> str:
        return "".join(p.text for p in self.parts if isinstance(p, TextPart))

    def image_parts(self) -> tuple[ImagePart, ...]:
        return tuple(p for p in self.parts if isinstance(p, ImagePart))


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise PayloadError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise PayloadError("max_tokens must be > 0")


@dataclass(frozen=True)
class ModelResponse:
    text: str
    backend_id: str
    latency: float
    attempt_count: int


def content_digest(capability: str, messages: Sequence[ChatMessage]) -> str:
    """Stable digest of request content; the mock keys fixtures on this."""
    canon = []
    for message in messages:
        parts = []
        for part in message.parts:
            if isinstance(part, TextPart):
                parts.append({"text": part.text})
            else:
                parts.append({"image": part.digest, "media_type": part.media_type})
        canon.append({"role": message.role, "parts": parts})
    payload = json.dumps({"capability": capability, "messages": canon}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def render_transcript(messages: Sequence[ChatMessage]) -> str:
    """Text rendering of a prompt; image parts appear as [image:<digest12>]."""
    blocks = []
    for message in messages:
        rendered = "".join(
            part.text if isinstance(part, TextPart) else f"[image:{part.digest[:12]}]"
            for part in message.parts
        )
        blocks.append(f"[{message.role}]\n{rendered}")
    return "\n\n".join(blocks)


# --- mock backend -----------------------------------------------------------

_WORD_RE = re.compile(r"[a-z0-9]+")
_DETECT_RE = re.compile(r"determine if \*\*(.+?)\*\* is possible")
_CLASSIFY_RE = re.compile(r"If \*\*(.+?)\*\* is detected")
_TEXT_QUERY_RE = re.compile(r"Retrieve comprehensive information about \*\*(.+?)\*\*")
_IMAGE_QUERY_RE = re.compile(r"Retrieve images related to the \*\*(.+?)\*\*")
_EXPLAIN_RE = re.compile(
    r"Given the detected anomalies in the manufacturing process: \*\*(.+?)\*\*", re.S
)
_SUMMARY_BIT_RE = re.compile(r"\s*([^,=]+?)=([01])")


class MockBackend:
    """Deterministic offline backend for tests and dry runs.

    Fixtures registered under (capability, content digest) take precedence;
    unmatched calls fall through to a rule engine that recognizes the
    pipeline's prompt shapes, or raise in strict mode. Detection answers
    come from a configurable oracle mapping image digests to anomaly names,
    which lets a harness wire ground truth straight into the mock.
    """

    def __init__(self, seed: int, embedding_dim: int = 2048, strict: bool = False):
        self.seed = int(seed)
        self.embedding_dim = int(embedding_dim)
        self.strict = bool(strict)
        self.backend_id = f"mock:seed={self.seed}"
        self._fixtures: dict[tuple[str, str], str] = {}
        self._oracle: dict[str, frozenset[str]] = {}
        self._lock = Lock()

    def register_fixture(self, capability: str, digest: str, response: str) -> None:
        if capability not in CAPABILITIES:
            raise PayloadError(f"unknown capability {capability!r}")
        key = (capability, digest)
        with self._lock:
            if self.strict and key in self._fixtures:
                raise FixtureConflictError(f"fixture already registered for {capability}:{digest}")
            self._fixtures[key] = response

    def configure_oracle(self, image_digest: str, anomalies: Iterable[str]) -> None:
        with self._lock:
            self._oracle[image_digest] = frozenset(anomalies)

    def complete(self, capability: str, messages: Sequence[ChatMessage], params: GenerationParams) -> str:
        digest = content_digest(capability, messages)
        with self._lock:
            fixture = self._fixtures.get((capability, digest))
        if fixture is not None:
            return fixture
        if self.strict:
            raise MissingFixtureError(f"no fixture for {capability} request digest {digest}")
        return self._rule_response(messages)

    def _tag(self, *parts: str) -> str:
        return hashlib.sha256(":".join((str(self.seed),) + parts).encode("utf-8")).hexdigest()[:8]

    def _rule_response(self, messages: Sequence[ChatMessage]) -> str:
        text = "\n".join(m.text_content() for m in messages)
        image_digests = [p.digest for m in messages for p in m.image_parts()]

        match = _DETECT_RE.search(text)
        if match:
            name = match.group(1)
            with self._lock:
                present = any(name in self._oracle.get(d, frozenset()) for d in image_digests)
            verdict = "detected" if present else "not detected"
            return (
                f"Assessment of **{name}**: the anomaly was {verdict} in the test images "
                f"(mock evidence {self._tag('detect', name)})."
            )

        if _CLASSIFY_RE.search(text):
            if "not detected" in text:
                return "0"
            return "1" if "detected" in text else "0"

        match = _TEXT_QUERY_RE.search(text)
        if match:
            name = match.group(1)
            tag = self._tag("info", name)
            return (
                f"1. Detailed Description\n"
                f"{name} presents as an irregular signature on the powder bed (mock synthesis {tag}).\n"
                f"2. Common Causes\n"
                f"Process instability and feedstock variation associated with {name.lower()}.\n"
                f"3. Visual Characteristics\n"
                f"Localized contrast deviations typical of {name.lower()} in layer images.\n"
                f"4. Prevention Strategies\n"
                f"Parameter tuning and in-situ monitoring targeted at {name.lower()}."
            )

        match = _IMAGE_QUERY_RE.search(text)
        if match:
            name = match.group(1)
            key = image_digests[0][:8] if image_digests else "none"
            return (
                f"The reference figure shows a representative case of {name}: "
                f"distinct local contrast against the surrounding powder (mock description {key})."
            )

        match = _EXPLAIN_RE.search(text)
        if match:
            detected = [m.group(1).strip() for m in _SUMMARY_BIT_RE.finditer(match.group(1)) if m.group(2) == "1"]
            blocks = []
            for name in detected:
                tag = self._tag("explain", name)
                blocks.append(
                    f"{name}\n"
                    f"1. Root Cause\n"
                    f"Mock root-cause synthesis for {name.lower()} ({tag}).\n"
                    f"2. Prevention Strategies\n"
                    f"Mock prevention guidance for {name.lower()}.\n"
                    f"3. Additional Insights\n"
                    f"Mock contextual notes for {name.lower()}."
                )
            if blocks:
                return "\n\n".join(blocks)

        return "0"

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self._embed_one(t) for t in texts]

    def _embed_one(self, text: str) -> np.ndarray:
        # Seeded feature-hashed bag of words: a pure function of (seed, text)
        # whose cosine reflects token overlap, so retrieval is meaningful.
        # Four buckets per token so hash collisions cannot cancel a token's
        # entire contribution.
        vec = np.zeros(self.embedding_dim, dtype=np.float64)
        tokens = _WORD_RE.findall(text.lower()) or [text]
        for token in tokens:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
            for offset in (0, 8, 16, 24):
                bucket = int.from_bytes(digest[offset : offset + 4], "little") % self.embedding_dim
                sign = 1.0 if digest[offset + 4] & 1 else -1.0
                vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
            vec[int.from_bytes(digest[:4], "little") % self.embedding_dim] = 1.0
            norm = 1.0
        return vec / norm


# --- remote backend ---------------------------------------------------------


def _wire_message(message: ChatMessage) -> dict:
    content = []
    for part in message.parts:
        if isinstance(part, TextPart):
            content.append({"type": "text", "text": part.text})
        else:
            encoded = base64.b64encode(part.data).decode("ascii")
            content.append(
                {"type": "image_url", "image_url": {"url": f"data:{part.media_type};base64,{encoded}"}}
            )
    return {"role": message.role, "content": content}


class RemoteBackend:
    """Chat-completions + embeddings endpoint client (single attempt per call;
    the gateway owns retries)."""

    def __init__(
        self,
        base_url: str,
        models: Mapping[str, str],
        api_key_env: str = "PBF_RAG_API_KEY",
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.models = dict(models)
        self.api_key_env = api_key_env
        self.timeout = timeout
        self._session = session or requests.Session()
        self.backend_id = f"remote:{self.base_url}"

    def _headers(self) -> dict:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise AuthenticationError(f"environment variable {self.api_key_env} is not set")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def _post(self, path: str, payload: dict) -> dict:
        headers = self._headers()
        try:
            response = self._session.post(
                self.base_url + path, json=payload, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransientBackendError(f"network error: {exc}") from exc
        status = response.status_code
        if status in (401, 403):
            raise AuthenticationError(f"authentication failed (HTTP {status})")
        if status == 429:
            raise TransientBackendError("rate limited (HTTP 429)")
        if 400 <= status < 500:
            raise ClientRequestError(f"request rejected (HTTP {status}): {response.text[:200]}")
        if status >= 500:
            raise TransientBackendError(f"server error (HTTP {status})")
        try:
            return response.json()
        except ValueError as exc:
            raise TransientBackendError("backend returned non-JSON body") from exc

    def complete(self, capability: str, messages: Sequence[ChatMessage], params: GenerationParams) -> str:
        model = self.models.get(capability) or self.models.get(CAP_CHAT)
        if not model:
            raise ClientRequestError(f"no model configured for capability {capability!r}")
        payload = {
            "model": model,
            "messages": [_wire_message(m) for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.seed is not None:
            payload["seed"] = params.seed
        body = self._post("/chat/completions", payload)
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransientBackendError("malformed completion response body") from exc

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        model = self.models.get(CAP_EMBEDDING)
        if not model:
            raise ClientRequestError("no model configured for capability 'embedding'")
        body = self._post("/embeddings", {"model": model, "input": list(texts)})
        try:
            rows = body["data"]
            vectors = [np.asarray(row["embedding"], dtype=np.float64) for row in rows]
        except (KeyError, TypeError) as exc:
            raise TransientBackendError("malformed embeddings response body") from exc
        if len(vectors) != len(texts):
            raise TransientBackendError(
                f"embedding count mismatch: sent {len(texts)}, got {len(vectors)}"
            )
        return vectors


# --- gateway ----------------------------------------------------------------


class ModelGateway:
    """Validated, rate-limited, retrying front door to the model backends."""

    def __init__(
        self,
        backend=None,
        chat_backend=None,
        vision_backend=None,
        embedding_backend=None,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        backoff_base: float = DEFAULT_BACKOFF_BASE,
        backoff_factor: float = DEFAULT_BACKOFF_FACTOR,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
        max_payload_bytes: int = DEFAULT_MAX_PAYLOAD_BYTES,
        max_embed_chars: int = DEFAULT_MAX_EMBED_CHARS,
        max_concurrent: int = DEFAULT_MAX_CONCURRENT,
    ):
        self._backends = {
            CAP_CHAT: chat_backend or backend,
            CAP_VISION: vision_backend or backend,
            CAP_EMBEDDING: embedding_backend or backend,
        }
        for capability, candidate in self._backends.items():
            if candidate is None:
                raise GatewayError(f"no backend configured for capability {capability!r}")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self._sleep = sleep
        self._clock = clock
        self.max_payload_bytes = max_payload_bytes
        self.max_embed_chars = max_embed_chars
        self._limiter = BoundedSemaphore(max_concurrent)

    def backend(self, capability: str):
        return self._backends[capability]

    def backend_ids(self) -> dict[str, str]:
        return {cap: backend.backend_id for cap, backend in self._backends.items()}

    def complete_chat(
        self, messages: Sequence[ChatMessage], params: GenerationParams | None = None
    ) -> ModelResponse:
        msgs = self._checked_messages(messages)
        if any(m.image_parts() for m in msgs):
            raise PayloadError("complete_chat does not accept image parts; use complete_vision")
        return self._call(CAP_CHAT, msgs, params or GenerationParams())

    def complete_vision(
        self, messages: Sequence[ChatMessage], params: GenerationParams | None = None
    ) -> ModelResponse:
        msgs = self._checked_messages(messages)
        images = [p for m in msgs for p in m.image_parts()]
        if not images:
            raise PayloadError("complete_vision requires at least one image part")
        for part in images:
            self._check_image(part)
        return self._call(CAP_VISION, msgs, params or GenerationParams())

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = list(texts)
        for i, text in enumerate(texts):
            if not isinstance(text, str) or not text:
                raise PayloadError(f"embedding input {i} is empty")
            if len(text) > self.max_embed_chars:
                raise PayloadError(
                    f"embedding input {i} is {len(text)} chars; limit is {self.max_embed_chars}"
                )
        if not texts:
            return []
        backend = self._backends[CAP_EMBEDDING]
        vectors, _ = self._with_retries(lambda: backend.embed(texts))
        if len(vectors) != len(texts):
            raise GatewayError("embedding backend returned a partial batch")
        dims = {int(np.asarray(v).shape[0]) for v in vectors}
        if len(dims) != 1:
            raise GatewayError(f"embedding backend returned mixed dimensions {sorted(dims)}")
        return [np.asarray(v, dtype=np.float64) for v in vectors]

    def _checked_messages(self, messages: Sequence[ChatMessage]) -> tuple[ChatMessage, ...]:
        msgs = tuple(messages)
        if not msgs:
            raise PayloadError("at least one message is required")
        total = sum(
            len(p.data) if isinstance(p, ImagePart) else len(p.text.encode("utf-8"))
            for m in msgs
            for p in m.parts
        )
        if total > self.max_payload_bytes:
            raise PayloadError(f"payload is {total} bytes; limit is {self.max_payload_bytes}")
        return msgs

    @staticmethod
    def _check_image(part: ImagePart) -> None:
        try:
            with Image.open(BytesIO(part.data)) as img:
                img.verify()
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            raise PayloadError(f"undecodable image part ({exc})") from exc

    def _call(self, capability: str, messages: tuple[ChatMessage, ...], params: GenerationParams) -> ModelResponse:
        backend = self._backends[capability]
        start = self._clock()
        text, attempts = self._with_retries(lambda: backend.complete(capability, messages, params))
        if not text or not text.strip():
            raise EmptyResponseError(f"{capability} backend returned an empty completion")
        return ModelResponse(
            text=text,
            backend_id=backend.backend_id,
            latency=self._clock() - start,
            attempt_count=attempts,
        )

    def _with_retries(self, op):
        attempt = 0
        while True:
            attempt += 1
            try:
                with self._limiter:
                    return op(), attempt
            except TransientBackendError as exc:
                if attempt >= self.max_attempts:
                    raise RetryExhaustedError(f"gave up after {attempt} attempts: {exc}") from exc
                self._sleep(self.backoff_base * self.backoff_factor ** (attempt - 1))
