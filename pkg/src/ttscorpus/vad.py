"""Speech-span detection over long-form audio.

The built-in detector is a frame-energy gate with hangover smoothing, so
the whole pipeline runs with zero model dependencies; a neural VAD can be
plugged in through the inference sidecar (external_vad) and goes through
the same span post-processing and validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .audio import FLOOR_DBFS, AudioBuffer, TimeSpan


@dataclass(frozen=True)
class VadParams:
    frame_ms: float = 30.0
    hop_ms: float = 10.0
    activation_dbfs: float = -35.0
    hangover_frames: int = 8
    min_speech_ms: float = 200.0
    max_merge_gap_ms: float = 300.0

    def __post_init__(self) -> None:
        if not self.hop_ms > 0:
            raise ValueError("hop_ms must be positive")
        if self.frame_ms < self.hop_ms:
            raise ValueError("frame_ms must be >= hop_ms")
        if self.hangover_frames < 0:
            raise ValueError("hangover_frames must be >= 0")
        if self.min_speech_ms < 0 or self.max_merge_gap_ms < 0:
            raise ValueError("durations must be non-negative")


@dataclass(frozen=True)
class FrameEnergies:
    """Per-frame RMS dBFS of a buffer, with the framing that produced it."""

    dbfs: np.ndarray
    frame_s: float
    hop_s: float

    def frame_center_s(self, index: int) -> float:
        return index * self.hop_s + self.frame_s / 2.0


def frame_energies(buffer: AudioBuffer, params: VadParams) -> FrameEnergies:
    """RMS dBFS per analysis frame (last partial frame is dropped)."""
    frame_len = max(1, int(round(params.frame_ms * buffer.sample_rate / 1000.0)))
    hop_len = max(1, int(round(params.hop_ms * buffer.sample_rate / 1000.0)))
    samples = buffer.samples.astype(np.float64)
    if len(samples) < frame_len:
        frame_len = len(samples)
    n_frames = 1 + (len(samples) - frame_len) // hop_len

    cumsq = np.concatenate(([0.0], np.cumsum(np.square(samples))))
    starts = np.arange(n_frames) * hop_len
    mean_sq = (cumsq[starts + frame_len] - cumsq[starts]) / frame_len
    with np.errstate(divide="ignore"):
        dbfs = 10.0 * np.log10(mean_sq)
    dbfs = np.maximum(dbfs, FLOOR_DBFS)
    return FrameEnergies(
        dbfs=dbfs,
        frame_s=frame_len / buffer.sample_rate,
        hop_s=hop_len / buffer.sample_rate,
    )


def detect_speech(buffer: AudioBuffer, params: VadParams | None = None) -> list[TimeSpan]:
    """Detect speech spans: energy gate, hangover, short-span drop, gap merge.

    Returned spans are ordered, pairwise disjoint and inside the buffer.
    An empty list is a valid result (e.g. pure silence).
    """
    if len(buffer) == 0:
        raise ValueError("buffer is empty")
    params = params or VadParams()
    energies = frame_energies(buffer, params)
    active = energies.dbfs >= params.activation_dbfs

    raw: list[list[float]] = []
    start_frame: int | None = None
    last_active = -1
    hang = 0
    for i, is_active in enumerate(active):
        if start_frame is None:
            if is_active:
                start_frame = i
                last_active = i
                hang = 0
        elif is_active:
            last_active = i
            hang = 0
        else:
            hang += 1
            if hang > params.hangover_frames:
                raw.append([start_frame * energies.hop_s, _span_end(last_active, params, energies)])
                start_frame = None
    if start_frame is not None:
        raw.append([start_frame * energies.hop_s, _span_end(last_active, params, energies)])

    duration = buffer.duration_s
    spans = _coalesce([[s, min(e, duration)] for s, e in raw])
    min_speech_s = params.min_speech_ms / 1000.0
    spans = [s for s in spans if s[1] - s[0] >= min_speech_s]
    return merge_spans([TimeSpan(s, e) for s, e in spans], params.max_merge_gap_ms / 1000.0)


def _span_end(last_active: int, params: VadParams, energies: FrameEnergies) -> float:
    last_frame = min(last_active + params.hangover_frames, len(energies.dbfs) - 1)
    return last_frame * energies.hop_s + energies.frame_s


def _coalesce(spans: list[list[float]]) -> list[list[float]]:
    """Fuse overlapping/touching spans (frames overlap in time, so raw
    spans from the state machine can collide)."""
    merged: list[list[float]] = []
    for span in spans:
        if merged and span[0] <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], span[1])
        else:
            merged.append(span)
    return merged


def merge_spans(spans: list[TimeSpan], max_gap_s: float) -> list[TimeSpan]:
    """Merge consecutive spans whose silence gap is at most max_gap_s."""
    for prev, cur in zip(spans, spans[1:]):
        if cur.start_s < prev.end_s:
            raise ValueError(f"spans not ordered/disjoint at [{cur.start_s}, {cur.end_s}]")
    merged: list[TimeSpan] = []
    for span in spans:
        if merged and span.start_s - merged[-1].end_s <= max_gap_s:
            merged[-1] = TimeSpan(merged[-1].start_s, max(merged[-1].end_s, span.end_s))
        else:
            merged.append(span)
    return merged


def split_long_spans(
    spans: list[TimeSpan], max_len_s: float, energies: FrameEnergies
) -> list[TimeSpan]:
    """Split over-long spans at the quietest frame in their middle third.

    The union of the output equals the union of the input; every output
    span is at most max_len_s long.
    """
    if max_len_s <= 0:
        raise ValueError("max_len_s must be positive")
    out: list[TimeSpan] = []
    for span in spans:
        _split_recursive(span, max_len_s, energies, out)
    return out


def _split_recursive(
    span: TimeSpan, max_len_s: float, energies: FrameEnergies, out: list[TimeSpan]
) -> None:
    if span.duration_s <= max_len_s:
        out.append(span)
        return
    split_at = _quietest_point(span, energies)
    _split_recursive(TimeSpan(span.start_s, split_at), max_len_s, energies, out)
    _split_recursive(TimeSpan(split_at, span.end_s), max_len_s, energies, out)


def _quietest_point(span: TimeSpan, energies: FrameEnergies) -> float:
    """Center of the lowest-energy frame within the span's middle third."""
    lo = span.start_s + span.duration_s / 3.0
    hi = span.start_s + 2.0 * span.duration_s / 3.0
    n = len(energies.dbfs)
    first = max(0, math.ceil((lo - energies.frame_s / 2.0) / energies.hop_s))
    last = min(n - 1, math.floor((hi - energies.frame_s / 2.0) / energies.hop_s))
    if first > last:
        return span.start_s + span.duration_s / 2.0
    window = energies.dbfs[first : last + 1]
    best = first + int(np.argmin(window))
    return energies.frame_center_s(best)


def external_vad(buffer: AudioBuffer, client) -> list[TimeSpan]:
    """Fetch speech spans from the inference sidecar and validate them.

    The client must expose vad(buffer) returning the raw span payload
    (list of {start_s, end_s}); spans are rejected unless ordered,
    disjoint and inside the buffer.
    """
    from .sidecar_client import validate_span_payload

    payload = client.vad(buffer)
    return validate_span_payload(payload, buffer.duration_s)
