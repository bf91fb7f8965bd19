"""Subset construction and held-out test set assembly.

Subsets hit an hour budget under three modes: seeded uniform shuffle,
maximum source diversity (round-robin across sources) and minimum source
diversity (fewest sources that fill the budget, largest first). Source id
stands in for speaker identity: the training corpus carries no speaker
labels, so channel/file diversity is the operable proxy.

The test set takes speakers found by diarization with more than 11
usable segments inside a single source file: one prompt plus ten
evaluation segments each, and every source they came from is excluded
from training to avoid contamination.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

from .curation import (
    LengthPolicy,
    Manifest,
    NoiseGatePolicy,
    SegmentRecord,
    build_manifest,
    noise_decision_from_levels,
)

SUBSET_MODES = ("random", "max-diversity", "min-diversity")

# 1 prompt + 10 eval segments; eligibility needs strictly more than this.
SEGMENTS_PER_SPEAKER = 11
EVAL_SEGMENTS_PER_SPEAKER = 10

TESTSET_SCHEMA_VERSION = "1"

# A record belongs to a diarized speaker only if their turns cover at
# least this fraction of the record.
MIN_SPEAKER_OVERLAP_FRACTION = 0.5


class SamplingError(Exception):
    pass


@dataclass(frozen=True)
class SubsetSpec:
    target_hours: float
    mode: str = "random"
    seed: int = 0
    tolerance_fraction: float = 0.02

    def __post_init__(self) -> None:
        if self.target_hours <= 0:
            raise ValueError("target_hours must be positive")
        if not 0 < self.tolerance_fraction <= 0.1:
            raise ValueError("tolerance_fraction must be in (0, 0.1]")
        if self.mode not in SUBSET_MODES:
            raise ValueError(f"mode must be one of {SUBSET_MODES}, got {self.mode!r}")


def sample_subset(manifest: Manifest, spec: SubsetSpec, parent_ref: str | None = None) -> Manifest:
    """Select records until the hour budget is met within tolerance.

    Deterministic for a fixed (manifest, spec); the seed changes which
    records are chosen, never the budget contract.
    """
    target_s = spec.target_hours * 3600.0
    tolerance_s = spec.tolerance_fraction * target_s
    if manifest.total_seconds() < target_s:
        raise SamplingError(
            f"corpus has {manifest.total_seconds() / 3600.0:.3f} h, "
            f"need {spec.target_hours:.3f} h"
        )

    order = _selection_order(manifest.records, spec)
    selected: list[SegmentRecord] = []
    accumulated = 0.0
    for record in order:
        if accumulated >= target_s:
            break
        if accumulated + record.duration_s > target_s + tolerance_s:
            continue  # would overshoot the window; a smaller record may still fit
        selected.append(record)
        accumulated += record.duration_s
    if accumulated < target_s - tolerance_s:
        raise SamplingError("cannot hit the hour budget within tolerance")

    provenance = {
        "subset": {
            "mode": spec.mode,
            "target_hours": spec.target_hours,
            "seed": spec.seed,
            "tolerance_fraction": spec.tolerance_fraction,
        },
    }
    if parent_ref:
        provenance["parent_manifest"] = parent_ref
    return build_manifest(selected, provenance)


def _selection_order(records: list[SegmentRecord], spec: SubsetSpec) -> list[SegmentRecord]:
    rng = random.Random(spec.seed)
    if spec.mode == "random":
        order = list(records)
        rng.shuffle(order)
        return order

    groups: dict[str, list[SegmentRecord]] = {}
    for record in records:
        groups.setdefault(record.source_id, []).append(record)

    if spec.mode == "max-diversity":
        source_order = sorted(groups)
        rng.shuffle(source_order)
        for source in source_order:
            rng.shuffle(groups[source])
        order = []
        queues = [groups[s] for s in source_order]
        while queues:
            queues = [q for q in queues if q]
            for q in queues:
                if q:
                    order.append(q.pop(0))
        return order

    # min-diversity: fill whole sources, largest total duration first
    totals = {s: sum(r.duration_s for r in g) for s, g in groups.items()}
    source_order = sorted(groups, key=lambda s: (-totals[s], s))
    return [record for source in source_order for record in groups[source]]


def exclude_sources(manifest: Manifest, excluded: set[str]) -> Manifest:
    """Drop every record whose source is excluded; notes it in provenance."""
    kept = [r for r in manifest.records if r.source_id not in excluded]
    provenance = dict(manifest.provenance)
    provenance["excluded_sources"] = sorted(excluded)
    return build_manifest(kept, provenance)


@dataclass(frozen=True)
class DiarizedSpan:
    source_id: str
    speaker_id: str
    start_s: float
    end_s: float


def read_diarization(path: str | Path) -> list[DiarizedSpan]:
    """Read diarization JSONL: {source_id, speaker_id, start_s, end_s}."""
    spans = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                spans.append(
                    DiarizedSpan(
                        source_id=row["source_id"],
                        speaker_id=str(row["speaker_id"]),
                        start_s=float(row["start_s"]),
                        end_s=float(row["end_s"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise SamplingError(f"{path}:{lineno}: bad diarization line: {exc}") from exc
    return spans


def assign_speakers(
    manifest: Manifest,
    diarization: Iterable[DiarizedSpan],
    min_overlap_fraction: float = MIN_SPEAKER_OVERLAP_FRACTION,
) -> dict[str, list[tuple[str, SegmentRecord]]]:
    """Attach diarized speaker labels to manifest records by time overlap.

    A record gets the speaker whose turns overlap it the most, provided
    that covers at least min_overlap_fraction of the record; otherwise the
    record stays unlabeled and is not test-set material.
    """
    by_source: dict[str, list[DiarizedSpan]] = {}
    for span in diarization:
        by_source.setdefault(span.source_id, []).append(span)

    assigned: dict[str, list[tuple[str, SegmentRecord]]] = {}
    for record in manifest.records:
        spans = by_source.get(record.source_id)
        if not spans:
            continue
        overlap_by_speaker: dict[str, float] = {}
        for span in spans:
            overlap = min(record.end_s, span.end_s) - max(record.start_s, span.start_s)
            if overlap > 0:
                overlap_by_speaker[span.speaker_id] = overlap_by_speaker.get(span.speaker_id, 0.0) + overlap
        if not overlap_by_speaker:
            continue
        best = max(sorted(overlap_by_speaker), key=lambda s: overlap_by_speaker[s])
        if overlap_by_speaker[best] >= min_overlap_fraction * record.duration_s:
            assigned.setdefault(record.source_id, []).append((best, record))
    return assigned


@dataclass
class SpeakerTestset:
    speaker_id: str
    prompt: SegmentRecord
    eval_segments: list[SegmentRecord]


@dataclass
class TestsetSpec:
    speakers: list[SpeakerTestset]
    excluded_sources: set[str]
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for entry in self.speakers:
            if len(entry.eval_segments) != EVAL_SEGMENTS_PER_SPEAKER:
                raise ValueError(
                    f"speaker {entry.speaker_id}: need exactly "
                    f"{EVAL_SEGMENTS_PER_SPEAKER} eval segments"
                )
            ids = {entry.prompt.id} | {r.id for r in entry.eval_segments}
            if len(ids) != SEGMENTS_PER_SPEAKER:
                raise ValueError(f"speaker {entry.speaker_id}: segments not pairwise distinct")
            for record in [entry.prompt, *entry.eval_segments]:
                if record.source_id not in self.excluded_sources:
                    raise ValueError(
                        f"speaker {entry.speaker_id}: source {record.source_id} not in excluded set"
                    )

    def eval_records(self) -> list[SegmentRecord]:
        return [r for entry in self.speakers for r in entry.eval_segments]


def build_testset(
    manifest: Manifest,
    diarized_speakers: dict[str, list[tuple[str, SegmentRecord]]],
    n_speakers: int,
    seed: int,
    noise_policy: NoiseGatePolicy | None = None,
    length_policy: LengthPolicy | None = None,
) -> TestsetSpec:
    """Pick held-out speakers and their 1+10 segments.

    Eligible speakers have strictly more than 11 gate-passing segments
    within one source file. Selection among eligible speakers, the
    qualifying source when several exist, the prompt and the eval set are
    all drawn from the given seed.
    """
    noise_policy = noise_policy or NoiseGatePolicy()
    length_policy = length_policy or LengthPolicy()
    manifest_ids = {r.id for r in manifest.records}

    def gated(record: SegmentRecord) -> bool:
        return (
            record.id in manifest_ids
            and length_policy.min_s <= record.duration_s <= length_policy.max_s
            and noise_decision_from_levels(record.lead_dbfs, record.trail_dbfs, noise_policy)
        )

    candidates: dict[str, list[tuple[str, list[SegmentRecord]]]] = {}
    for source_id in sorted(diarized_speakers):
        by_speaker: dict[str, list[SegmentRecord]] = {}
        for speaker_id, record in diarized_speakers[source_id]:
            if gated(record):
                by_speaker.setdefault(speaker_id, []).append(record)
        for speaker_id in sorted(by_speaker):
            if len(by_speaker[speaker_id]) > SEGMENTS_PER_SPEAKER:
                candidates.setdefault(speaker_id, []).append((source_id, by_speaker[speaker_id]))

    if len(candidates) < n_speakers:
        raise SamplingError(
            f"only {len(candidates)} speakers have more than "
            f"{SEGMENTS_PER_SPEAKER} usable segments in one source; need {n_speakers}"
        )

    rng = random.Random(seed)
    chosen = rng.sample(sorted(candidates), n_speakers)
    speakers: list[SpeakerTestset] = []
    excluded: set[str] = set()
    for speaker_id in chosen:
        source_id, segments = rng.choice(sorted(candidates[speaker_id]))
        segments = sorted(segments, key=lambda r: r.start_s)
        prompt = rng.choice(segments)
        rest = [r for r in segments if r.id != prompt.id]
        eval_segments = rng.sample(rest, EVAL_SEGMENTS_PER_SPEAKER)
        excluded.add(source_id)
        speakers.append(
            SpeakerTestset(
                speaker_id=speaker_id,
                prompt=replace(prompt, speaker_id=speaker_id),
                eval_segments=[replace(r, speaker_id=speaker_id) for r in eval_segments],
            )
        )

    return TestsetSpec(
        speakers=speakers,
        excluded_sources=excluded,
        provenance={"n_speakers": n_speakers, "seed": seed},
    )


def save_testset(testset: TestsetSpec, path: str | Path) -> None:
    doc = {
        "schema_version": TESTSET_SCHEMA_VERSION,
        "excluded_sources": sorted(testset.excluded_sources),
        "speakers": [
            {
                "speaker_id": entry.speaker_id,
                "prompt": entry.prompt.to_row(),
                "eval_segments": [r.to_row() for r in entry.eval_segments],
            }
            for entry in testset.speakers
        ],
        "provenance": testset.provenance,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_testset(path: str | Path) -> TestsetSpec:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != TESTSET_SCHEMA_VERSION:
        raise SamplingError(f"{path}: unsupported testset schema {doc.get('schema_version')!r}")
    speakers = [
        SpeakerTestset(
            speaker_id=entry["speaker_id"],
            prompt=SegmentRecord.from_row(entry["prompt"]),
            eval_segments=[SegmentRecord.from_row(r) for r in entry["eval_segments"]],
        )
        for entry in doc["speakers"]
    ]
    return TestsetSpec(
        speakers=speakers,
        excluded_sources=set(doc["excluded_sources"]),
        provenance=doc.get("provenance", {}),
    )
