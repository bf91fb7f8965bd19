"""Client and payload validators for the model-inference sidecar.

The sidecar serves everything that needs pretrained neural models (SSL
embeddings, neural VAD, diarization) behind one HTTP endpoint:

    POST {base}/v1/infer   {"op": ..., "audio": <b64 16-bit PCM WAV>, "params": {...}}
    ->                     {"ok": true, "result": <op payload>} | {"ok": false, "error": msg}
    GET  {base}/v1/health  -> {"ok": true, "model_tags": {...}}

Every response is validated here before anything downstream sees it;
malformed payloads raise ProtocolViolationError rather than propagating
bad spans or embeddings into the corpus.
"""

from __future__ import annotations

import base64
import threading
from typing import Any

import numpy as np
import requests

from .audio import AudioBuffer, TimeSpan, encode_wav_bytes
from .evaluate import EmbeddingSequence
from .services import ServiceConfig, ServiceError, post_json


class SidecarError(ServiceError):
    """The sidecar answered ok=false (its own reported failure)."""


class ProtocolViolationError(ServiceError):
    """The sidecar answered something outside the wire contract."""


def validate_envelope(doc: Any) -> Any:
    """Check the ok/result/error envelope; returns the result payload."""
    if not isinstance(doc, dict) or "ok" not in doc:
        raise ProtocolViolationError(f"response is not an ok-envelope: {type(doc).__name__}")
    if doc["ok"] is True:
        if "result" not in doc:
            raise ProtocolViolationError("ok response missing result payload")
        return doc["result"]
    if doc["ok"] is False:
        raise SidecarError(str(doc.get("error", "unspecified sidecar error")))
    raise ProtocolViolationError(f"ok field must be a bool, got {doc['ok']!r}")


def validate_embed_payload(payload: Any) -> EmbeddingSequence:
    if not isinstance(payload, dict):
        raise ProtocolViolationError("embed payload must be an object")
    for key in ("frames", "frame_rate_hz", "model_tag"):
        if key not in payload:
            raise ProtocolViolationError(f"embed payload missing {key!r}")
    try:
        frames = np.asarray(payload["frames"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ProtocolViolationError(f"frames are not a numeric matrix: {exc}") from exc
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
        raise ProtocolViolationError(f"frames must be a non-empty T x D matrix, got shape {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise ProtocolViolationError("frames contain non-finite values")
    rate = payload["frame_rate_hz"]
    if not isinstance(rate, (int, float)) or not rate > 0:
        raise ProtocolViolationError(f"frame_rate_hz must be positive, got {rate!r}")
    tag = payload["model_tag"]
    if not isinstance(tag, str) or not tag:
        raise ProtocolViolationError(f"model_tag must be a non-empty string, got {tag!r}")
    return EmbeddingSequence(frames=frames, frame_rate_hz=float(rate), model_tag=tag)


def validate_span_payload(payload: Any, duration_s: float) -> list[TimeSpan]:
    """VAD span list: ordered, pairwise disjoint, inside the audio."""
    spans = _parse_spans(payload, duration_s)
    for prev, cur in zip(spans, spans[1:]):
        if cur.start_s < prev.end_s:
            raise ProtocolViolationError(
                f"spans overlap or are unordered at [{cur.start_s}, {cur.end_s}]"
            )
    return spans


def validate_diarize_payload(payload: Any, duration_s: float) -> list[tuple[str, TimeSpan]]:
    """Diarization turns: ordered by start and in-range.

    Turns of different speakers may overlap (cross-talk); ordering is by
    start time only.
    """
    if not isinstance(payload, list):
        raise ProtocolViolationError("diarize payload must be a list")
    turns: list[tuple[str, TimeSpan]] = []
    for entry in payload:
        if not isinstance(entry, dict) or "speaker_id" not in entry:
            raise ProtocolViolationError(f"bad diarize entry: {entry!r}")
        span = _parse_one_span(entry, duration_s)
        turns.append((str(entry["speaker_id"]), span))
    for (_, prev), (_, cur) in zip(turns, turns[1:]):
        if cur.start_s < prev.start_s:
            raise ProtocolViolationError("diarize turns not ordered by start time")
    return turns


def _parse_spans(payload: Any, duration_s: float) -> list[TimeSpan]:
    if not isinstance(payload, list):
        raise ProtocolViolationError("span payload must be a list")
    return [_parse_one_span(entry, duration_s) for entry in payload]


def _parse_one_span(entry: Any, duration_s: float) -> TimeSpan:
    if not isinstance(entry, dict) or "start_s" not in entry or "end_s" not in entry:
        raise ProtocolViolationError(f"bad span entry: {entry!r}")
    start, end = entry["start_s"], entry["end_s"]
    if not isinstance(start, (int, float)) or not isinstance(end, (int, float)):
        raise ProtocolViolationError(f"span bounds must be numbers: {entry!r}")
    if not (0.0 <= start < end <= duration_s + 1e-6):
        raise ProtocolViolationError(
            f"span [{start}, {end}] outside audio of {duration_s:.6f}s"
        )
    return TimeSpan(float(start), float(end))


class SidecarClient:
    """Thin typed wrapper over the sidecar wire protocol.

    Uses the shared retrying POST; safe for concurrent use (one HTTP
    session per calling thread).
    """

    def __init__(self, base_url: str, config: ServiceConfig | None = None):
        base = base_url.rstrip("/")
        self.infer_url = f"{base}/v1/infer"
        self.health_url = f"{base}/v1/health"
        defaults = config or ServiceConfig(endpoint_url=self.infer_url, timeout_s=120.0, max_retries=3)
        # config's endpoint is authoritative only when explicitly given
        self.config = ServiceConfig(
            endpoint_url=self.infer_url,
            auth_token_env=defaults.auth_token_env,
            max_retries=defaults.max_retries,
            backoff_base_ms=defaults.backoff_base_ms,
            backoff_factor=defaults.backoff_factor,
            backoff_ceiling_ms=defaults.backoff_ceiling_ms,
            timeout_s=defaults.timeout_s,
            max_concurrency=defaults.max_concurrency,
        )
        self._local = threading.local()

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def infer(self, op: str, buffer: AudioBuffer, params: dict | None = None) -> Any:
        request = {
            "op": op,
            "audio": base64.b64encode(encode_wav_bytes(buffer)).decode("ascii"),
            "params": params or {},
        }
        doc = post_json(request, self.config, session=self._session())
        return validate_envelope(doc)

    def embed(self, buffer: AudioBuffer, params: dict | None = None) -> EmbeddingSequence:
        return validate_embed_payload(self.infer("embed", buffer, params))

    def vad(self, buffer: AudioBuffer, params: dict | None = None) -> Any:
        """Raw span payload; callers validate against their buffer."""
        return self.infer("vad", buffer, params)

    def diarize(self, buffer: AudioBuffer, params: dict | None = None) -> list[tuple[str, TimeSpan]]:
        payload = self.infer("diarize", buffer, params)
        return validate_diarize_payload(payload, buffer.duration_s)

    def health(self) -> dict:
        try:
            response = self._session().get(self.health_url, timeout=self.config.timeout_s)
        except requests.RequestException as exc:
            raise ServiceError(f"sidecar health check failed: {exc}") from exc
        if response.status_code != 200:
            raise ServiceError(f"sidecar health check returned HTTP {response.status_code}")
        try:
            return response.json()
        except ValueError as exc:
            raise ProtocolViolationError(f"health response is not JSON: {exc}") from exc


class SidecarEmbedder:
    """Embedding provider backed by the sidecar's embed op.

    Resolves its model_tag from the health endpoint up front so reports
    carry provenance even before the first embedding call.
    """

    def __init__(self, client: SidecarClient, params: dict | None = None):
        self.client = client
        self.params = params or {}
        health = client.health()
        tags = health.get("model_tags") or {}
        self.model_tag = tags.get("embed", "sidecar/unknown/0")

    def __call__(self, buffer: AudioBuffer) -> EmbeddingSequence:
        seq = self.client.embed(buffer, self.params)
        if seq.model_tag != self.model_tag:
            raise ProtocolViolationError(
                f"sidecar switched models mid-run: {seq.model_tag!r} != {self.model_tag!r}"
            )
        return seq
