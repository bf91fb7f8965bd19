"""Clients for the external ASR and diacritization services.

Both services speak the same wire shape: JSON over HTTP(S), audio as
base64 16-bit PCM WAV in field "audio", text in field "text". Transient
failures (timeouts, 5xx, 429) are retried with exponentially growing,
jittered, ceiling-bounded delays; auth failures abort immediately since
they are configuration bugs, not data noise.

The batch runner journals per-segment outcomes to an append-only JSONL
file so an interrupted run resumes without repeating service calls.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .audio import AudioBuffer, AudioDecodeError, decode_audio, encode_wav_bytes
from .curation import Manifest, SegmentRecord, annotate_record, build_manifest
from .textnorm import collapse_whitespace, strip_diacritics

logger = logging.getLogger("ttscorpus.services")

# Patchable in tests to capture/skip backoff waits.
_sleep = time.sleep

_RETRYABLE_EXTRA_STATUS = {429}
_AUTH_STATUS = {401, 403}


class ServiceError(Exception):
    """Base class for service-client failures."""


class AuthenticationError(ServiceError):
    """Credential rejected; aborts the run instead of failing one segment."""


class PermanentServiceError(ServiceError):
    """Gave up on a request: retries exhausted or non-retryable response."""


class ValidationGateError(ServiceError):
    """Diacritizer output does not reduce back to its input text."""


class JournalCorruptionError(Exception):
    """Journal has undecodable lines; resume needs an explicit override."""


@dataclass(frozen=True)
class ServiceConfig:
    endpoint_url: str
    auth_token_env: str | None = None
    max_retries: int = 5
    backoff_base_ms: float = 500.0
    backoff_factor: float = 2.0
    backoff_ceiling_ms: float = 30_000.0
    timeout_s: float = 60.0
    max_concurrency: int = 8

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_factor < 1.0:
            raise ValueError("backoff_factor must be >= 1")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")

    def auth_headers(self) -> dict[str, str]:
        if not self.auth_token_env:
            return {}
        token = os.environ.get(self.auth_token_env)
        if not token:
            raise AuthenticationError(
                f"credential env var {self.auth_token_env} is not set"
            )
        return {"Authorization": f"Bearer {token}"}


def post_json(
    payload: dict,
    config: ServiceConfig,
    session: requests.Session | None = None,
    rng: random.Random | None = None,
) -> dict:
    """POST with bounded exponential backoff; returns the parsed JSON body.

    Delays are non-decreasing across a retry chain (the jitter fraction is
    capped below backoff_factor - 1) and never exceed backoff_ceiling_ms.
    """
    session = session or requests
    rng = rng or random
    headers = config.auth_headers()
    jitter_frac = min(0.25, config.backoff_factor - 1.0)
    nominal_s = config.backoff_base_ms / 1000.0
    ceiling_s = config.backoff_ceiling_ms / 1000.0
    last_reason = "no attempts made"

    for attempt in range(config.max_retries + 1):
        retryable = False
        try:
            response = session.post(
                config.endpoint_url, json=payload, headers=headers, timeout=config.timeout_s
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            retryable = True
            last_reason = f"{type(exc).__name__}: {exc}"
        else:
            status = response.status_code
            if status in _AUTH_STATUS:
                raise AuthenticationError(f"HTTP {status} from {config.endpoint_url}")
            if 200 <= status < 300:
                try:
                    return response.json()
                except ValueError as exc:
                    raise PermanentServiceError(f"non-JSON response: {exc}") from exc
            if status >= 500 or status in _RETRYABLE_EXTRA_STATUS:
                retryable = True
                last_reason = f"HTTP {status}"
            else:
                raise PermanentServiceError(f"HTTP {status} from {config.endpoint_url}")

        if not retryable or attempt == config.max_retries:
            break
        delay = min(nominal_s * (1.0 + rng.random() * jitter_frac), ceiling_s)
        _sleep(delay)
        nominal_s = min(nominal_s * config.backoff_factor, ceiling_s)

    raise PermanentServiceError(
        f"giving up after {config.max_retries} retries: {last_reason}"
    )


def transcribe(
    segment_audio: AudioBuffer,
    config: ServiceConfig,
    session: requests.Session | None = None,
) -> str:
    """ASR on one segment; returns the undiacritized transcript."""
    payload = {"audio": base64.b64encode(encode_wav_bytes(segment_audio)).decode("ascii")}
    data = post_json(payload, config, session=session)
    text = data.get("text")
    if not isinstance(text, str) or not text.strip():
        raise PermanentServiceError("service returned empty transcript")
    return text


def diacritize(
    text: str,
    config: ServiceConfig,
    session: requests.Session | None = None,
) -> str:
    """Diacritize text; the output must reduce back to the input.

    Stripping combining diacritics from the result has to reproduce the
    input (after whitespace normalization) or the segment is rejected:
    a diacritizer may only add marks, never rewrite words.
    """
    if not text or not text.strip():
        raise ValueError("diacritize requires non-empty input text")
    data = post_json({"text": text}, config, session=session)
    out = data.get("text")
    if not isinstance(out, str) or not out.strip():
        raise PermanentServiceError("service returned empty diacritization")
    if collapse_whitespace(strip_diacritics(out)) != collapse_whitespace(text):
        raise ValidationGateError(
            f"diacritized text does not reduce to its input: {out!r} vs {text!r}"
        )
    return out


@dataclass
class Checkpoint:
    """Replayable annotation state: done ids carry their results so a
    resumed run never re-calls the services for them."""

    journal_path: Path
    completed: dict[str, tuple[str, str]] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def completed_ids(self) -> set[str]:
        return set(self.completed)

    @property
    def failed_ids(self) -> set[str]:
        return set(self.failed)

    @classmethod
    def load(cls, journal_path: str | Path, override_corruption: bool = False) -> "Checkpoint":
        journal_path = Path(journal_path)
        checkpoint = cls(journal_path=journal_path)
        if not journal_path.exists():
            return checkpoint
        with open(journal_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    event = json.loads(line)
                    checkpoint._apply(event)
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    if not override_corruption:
                        raise JournalCorruptionError(
                            f"{journal_path}:{lineno}: {exc} (pass the corruption override to skip bad lines)"
                        ) from exc
        return checkpoint

    def _apply(self, event: dict) -> None:
        seg_id = event["id"]
        status = event["status"]
        if status == "done":
            self.completed[seg_id] = (event["text"], event["text_diacritized"])
            self.failed.pop(seg_id, None)
        elif status == "failed":
            self.failed[seg_id] = str(event.get("error", "unknown error"))
            self.completed.pop(seg_id, None)
        else:
            raise KeyError(f"unknown journal status {status!r}")


class _JournalWriter:
    """Single serialized appender; workers hand events over a queue-like
    lock so lines never interleave."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "a", encoding="utf-8")
        self._lock = threading.Lock()

    def append(self, event: dict) -> None:
        line = json.dumps(event, ensure_ascii=False, sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()


def run_annotation_batch(
    manifest: Manifest,
    asr: ServiceConfig,
    diac: ServiceConfig,
    checkpoint: Checkpoint,
    clip_root: str | Path | None = None,
) -> Manifest:
    """Annotate every manifest segment with ASR + diacritization.

    Resumable and idempotent per journal: segments already completed or
    failed in the checkpoint are not re-sent. Failed segments are dropped
    from the output manifest; their errors stay in the journal.
    """
    pending = [
        r for r in manifest.records
        if r.id not in checkpoint.completed and r.id not in checkpoint.failed
    ]
    journal = _JournalWriter(checkpoint.journal_path)
    asr_gate = threading.Semaphore(asr.max_concurrency)
    diac_gate = threading.Semaphore(diac.max_concurrency)
    local = threading.local()

    def get_session() -> requests.Session:
        if not hasattr(local, "session"):
            local.session = requests.Session()
        return local.session

    def annotate_one(record: SegmentRecord) -> tuple[str, str]:
        if record.audio_path is None:
            raise AudioDecodeError(f"{record.id}: record has no audio_path")
        path = Path(record.audio_path)
        if clip_root is not None and not path.is_absolute():
            path = Path(clip_root) / path
        audio = decode_audio(path)
        with asr_gate:
            text = transcribe(audio, asr, session=get_session())
        with diac_gate:
            diacritized = diacritize(text, diac, session=get_session())
        return text, diacritized

    workers = max(asr.max_concurrency, diac.max_concurrency)
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(annotate_one, r): r for r in pending}
            for future in as_completed(futures):
                record = futures[future]
                try:
                    text, diacritized = future.result()
                except AuthenticationError:
                    for f in futures:
                        f.cancel()
                    raise
                except (ServiceError, AudioDecodeError, ValueError) as exc:
                    checkpoint.failed[record.id] = str(exc)
                    journal.append({"id": record.id, "status": "failed", "error": str(exc)})
                    logger.warning("segment %s failed: %s", record.id, exc)
                else:
                    checkpoint.completed[record.id] = (text, diacritized)
                    journal.append(
                        {
                            "id": record.id,
                            "status": "done",
                            "text": text,
                            "text_diacritized": diacritized,
                        }
                    )
    finally:
        journal.close()

    annotated = []
    for record in manifest.records:
        if record.id in checkpoint.completed:
            text, diacritized = checkpoint.completed[record.id]
            annotated.append(annotate_record(record, text, diacritized))
    provenance = dict(manifest.provenance)
    provenance["annotation"] = {
        "asr_endpoint": asr.endpoint_url,
        "diacritizer_endpoint": diac.endpoint_url,
        "failed_count": len([r for r in manifest.records if r.id in checkpoint.failed]),
    }
    return build_manifest(annotated, provenance)
