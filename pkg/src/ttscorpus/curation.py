"""Segment filtering (noise and duration gates), records and manifests.

The two gates carry the curation constants: context louder than
-30 dBFS in the second before or after a segment rejects it, and only
segments between 3 and 15 seconds (inclusive) are kept. Manifests are
JSONL, one record per line under a schema-versioned header.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from .audio import AudioBuffer, TimeSpan, rms_dbfs

SCHEMA_VERSION = "1"

# Fixed JSONL field order for segment rows.
MANIFEST_FIELDS = (
    "id",
    "source_id",
    "audio_path",
    "start_s",
    "end_s",
    "duration_s",
    "text",
    "text_diacritized",
    "lead_dbfs",
    "trail_dbfs",
    "speaker_id",
)

# Smallest partial context worth judging under measure-partial.
MIN_PARTIAL_CONTEXT_S = 0.1

# Slack for duration-vs-span consistency: one sample at 8 kHz.
_DURATION_TOLERANCE_S = 1.0 / 8000


class ManifestError(Exception):
    """Base class for manifest construction/read failures."""


class DuplicateIdError(ManifestError):
    pass


class RecordInvariantError(ManifestError):
    pass


class ManifestFormatError(ManifestError):
    pass


@dataclass(frozen=True)
class NoiseGatePolicy:
    threshold_dbfs: float = -30.0
    context_s: float = 1.0
    missing_context_rule: str = "measure-partial"  # pass | fail | measure-partial

    def __post_init__(self) -> None:
        if self.context_s <= 0:
            raise ValueError("context_s must be positive")
        if self.missing_context_rule not in ("pass", "fail", "measure-partial"):
            raise ValueError(f"unknown missing_context_rule {self.missing_context_rule!r}")


@dataclass(frozen=True)
class LengthPolicy:
    min_s: float = 3.0
    max_s: float = 15.0

    def __post_init__(self) -> None:
        if not 0 < self.min_s < self.max_s:
            raise ValueError("need 0 < min_s < max_s")


@dataclass(frozen=True)
class SegmentRecord:
    """One curated utterance: clip reference, source span and annotations."""

    id: str
    source_id: str
    audio_path: str | None
    start_s: float
    end_s: float
    duration_s: float
    text: str | None = None
    text_diacritized: str | None = None
    lead_dbfs: float | None = None
    trail_dbfs: float | None = None
    speaker_id: str | None = None

    @property
    def span(self) -> TimeSpan:
        return TimeSpan(self.start_s, self.end_s)

    def to_row(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in MANIFEST_FIELDS}

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> "SegmentRecord":
        known = {f.name for f in fields(cls)}
        missing = known - row.keys()
        if missing:
            raise ManifestFormatError(f"record missing fields: {sorted(missing)}")
        return cls(**{k: v for k, v in row.items() if k in known})


@dataclass
class Manifest:
    records: list[SegmentRecord]
    provenance: dict[str, Any] = field(default_factory=dict)

    def total_seconds(self) -> float:
        return sum(r.duration_s for r in self.records)

    def source_ids(self) -> set[str]:
        return {r.source_id for r in self.records}


def segment_id(source_id: str, span: TimeSpan, sample_rate: int) -> str:
    """Stable content-derived id, reproducible across re-runs."""
    key = f"{source_id}|{span.start_s:.6f}|{span.end_s:.6f}|{sample_rate}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


def new_record(
    source_id: str,
    span: TimeSpan,
    sample_rate: int,
    audio_path: str | None = None,
    lead_dbfs: float | None = None,
    trail_dbfs: float | None = None,
) -> SegmentRecord:
    """Record for a freshly cut segment; duration snaps to the sample grid."""
    start_idx = int(round(span.start_s * sample_rate))
    end_idx = int(round(span.end_s * sample_rate))
    return SegmentRecord(
        id=segment_id(source_id, span, sample_rate),
        source_id=source_id,
        audio_path=audio_path,
        start_s=span.start_s,
        end_s=span.end_s,
        duration_s=(end_idx - start_idx) / sample_rate,
        lead_dbfs=lead_dbfs,
        trail_dbfs=trail_dbfs,
    )


@dataclass(frozen=True)
class NoiseGateResult:
    passed: bool
    lead_dbfs: float | None
    trail_dbfs: float | None


def noise_gate(source: AudioBuffer, span: TimeSpan, policy: NoiseGatePolicy) -> NoiseGateResult:
    """Judge the context around a segment; measurements are kept either way.

    A side fails when its measured RMS is strictly above the threshold.
    Incomplete context (segment at a file edge) is handled per
    missing_context_rule; only context that took part in the decision is
    reported.
    """
    duration = source.duration_s
    lead = _context_level(source, max(0.0, span.start_s - policy.context_s), span.start_s, policy)
    trail = _context_level(source, span.end_s, min(duration, span.end_s + policy.context_s), policy)
    passed = _side_passes(lead, policy) and _side_passes(trail, policy)
    return NoiseGateResult(passed=passed, lead_dbfs=lead[0], trail_dbfs=trail[0])


def _context_level(
    source: AudioBuffer, start: float, end: float, policy: NoiseGatePolicy
) -> tuple[float | None, bool]:
    """(measured level or None, context was complete)."""
    available = max(0.0, end - start)
    complete = available >= policy.context_s - 1e-9
    if complete or (policy.missing_context_rule == "measure-partial" and available >= MIN_PARTIAL_CONTEXT_S):
        return rms_dbfs(source, TimeSpan(start, end)), complete
    return None, complete


def _side_passes(side: tuple[float | None, bool], policy: NoiseGatePolicy) -> bool:
    level, complete = side
    if level is not None:
        return level <= policy.threshold_dbfs
    # nothing measured: context was missing/too short
    return policy.missing_context_rule != "fail" or complete


def noise_decision_from_levels(
    lead_dbfs: float | None, trail_dbfs: float | None, policy: NoiseGatePolicy
) -> bool:
    """Re-judge a record from its stored context measurements."""
    for level in (lead_dbfs, trail_dbfs):
        if level is not None and level > policy.threshold_dbfs:
            return False
        if level is None and policy.missing_context_rule == "fail":
            return False
    return True


def length_gate(span: TimeSpan, policy: LengthPolicy) -> bool:
    """Inclusive duration gate: min_s <= duration <= max_s."""
    return policy.min_s <= span.duration_s <= policy.max_s


@dataclass
class FilterOutcome:
    kept: list[SegmentRecord]
    dropped_noise: int
    dropped_length: int


def filter_records(
    records: Iterable[SegmentRecord],
    noise_policy: NoiseGatePolicy,
    length_policy: LengthPolicy,
) -> FilterOutcome:
    """Apply both gates to already-measured records."""
    kept: list[SegmentRecord] = []
    dropped_noise = dropped_length = 0
    for record in records:
        length_ok = length_policy.min_s <= record.duration_s <= length_policy.max_s
        noise_ok = noise_decision_from_levels(record.lead_dbfs, record.trail_dbfs, noise_policy)
        if not length_ok:
            dropped_length += 1
        if not noise_ok:
            dropped_noise += 1
        if length_ok and noise_ok:
            kept.append(record)
    return FilterOutcome(kept=kept, dropped_noise=dropped_noise, dropped_length=dropped_length)


def build_manifest(records: Iterable[SegmentRecord], provenance: dict[str, Any]) -> Manifest:
    """Validate records and assemble a manifest (does not persist it)."""
    if not provenance:
        raise ManifestError("provenance must be non-empty")
    records = list(records)
    seen: set[str] = set()
    for record in records:
        if record.id in seen:
            raise DuplicateIdError(f"duplicate record id {record.id}")
        seen.add(record.id)
        _check_record(record)
    return Manifest(records=records, provenance=dict(provenance))


def _check_record(record: SegmentRecord) -> None:
    span_len = record.end_s - record.start_s
    if span_len <= 0:
        raise RecordInvariantError(f"{record.id}: empty span")
    if abs(record.duration_s - span_len) > _DURATION_TOLERANCE_S:
        raise RecordInvariantError(
            f"{record.id}: duration {record.duration_s} disagrees with span length {span_len}"
        )


def _dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Persist as UTF-8 JSONL: header line with schema version, then rows."""
    header = {"schema_version": SCHEMA_VERSION, **manifest.provenance}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps(header) + "\n")
        for record in manifest.records:
            fh.write(_dumps(record.to_row()) + "\n")


def read_manifest(path: str | Path) -> Manifest:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestFormatError(f"{path}: empty manifest file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestFormatError(f"{path}: bad header line: {exc}") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ManifestFormatError(
            f"{path}: unsupported schema version {header.get('schema_version')!r}"
        )
    provenance = {k: v for k, v in header.items() if k != "schema_version"}
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            records.append(SegmentRecord.from_row(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ManifestFormatError(f"{path}:{lineno}: bad record line: {exc}") from exc
    return build_manifest(records, provenance or {"source": str(path)})


def save_manifest(records: Iterable[SegmentRecord], provenance: dict[str, Any], path: str | Path) -> Manifest:
    manifest = build_manifest(records, provenance)
    write_manifest(manifest, path)
    return manifest


def annotate_record(record: SegmentRecord, text: str, text_diacritized: str) -> SegmentRecord:
    return replace(record, text=text, text_diacritized=text_diacritized)


@dataclass
class CorpusStats:
    total_hours: float
    segment_count: int
    source_count: int
    duration_histogram: dict[str, int]
    text_length_histogram: dict[str, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_hours": self.total_hours,
            "segment_count": self.segment_count,
            "source_count": self.source_count,
            "duration_histogram": self.duration_histogram,
            "text_length_histogram": self.text_length_histogram,
        }


def corpus_stats(manifest: Manifest) -> CorpusStats:
    """Exact corpus totals plus 1 s duration and 5-word text-length bins."""
    durations: dict[int, int] = {}
    text_lengths: dict[int, int] = {}
    for record in manifest.records:
        d_bin = int(record.duration_s)
        durations[d_bin] = durations.get(d_bin, 0) + 1
        if record.text is not None:
            w_bin = (len(record.text.split()) // 5) * 5
            text_lengths[w_bin] = text_lengths.get(w_bin, 0) + 1
    return CorpusStats(
        total_hours=manifest.total_seconds() / 3600.0,
        segment_count=len(manifest.records),
        source_count=len(manifest.source_ids()),
        duration_histogram={f"{k}-{k + 1}s": durations[k] for k in sorted(durations)},
        text_length_histogram={f"{k}-{k + 4}w": text_lengths[k] for k in sorted(text_lengths)},
    )
