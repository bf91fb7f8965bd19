"""Audio decoding, resampling, span extraction and level measurement.

All DSP in the pipeline operates on mono float32 buffers normalized to
[-1, 1]. Levels are RMS dBFS relative to full-scale amplitude 1.0, with
digital silence clamped to FLOOR_DBFS so level arithmetic stays total.
"""

from __future__ import annotations

import io
import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable

import numpy as np
from scipy.signal import resample_poly

# Silence floor instead of -inf; keeps dB arithmetic total.
FLOOR_DBFS = -120.0

# Canonical internal rate for the pipeline (typical ASR/SSL input).
DEFAULT_SAMPLE_RATE = 16000


class AudioDecodeError(Exception):
    """Base class for failures while turning a file into an AudioBuffer."""


class UnreadableFileError(AudioDecodeError):
    """File missing, unreadable, or truncated mid-structure."""


class UnsupportedFormatError(AudioDecodeError):
    """Container or codec we do not decode."""


class EmptyAudioError(AudioDecodeError):
    """File decoded successfully but contains zero samples."""


class SpanOutOfRangeError(ValueError):
    """TimeSpan does not fit inside the buffer it was applied to."""


class EmptySpanError(ValueError):
    """TimeSpan covers zero samples at the buffer's rate."""


@dataclass(frozen=True)
class TimeSpan:
    """Half-open-ish time interval in seconds; end must exceed start."""

    start_s: float
    end_s: float

    def __post_init__(self) -> None:
        if self.start_s < 0:
            raise ValueError(f"span start must be >= 0, got {self.start_s}")
        if not self.end_s > self.start_s:
            raise ValueError(f"span end must exceed start, got [{self.start_s}, {self.end_s}]")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class AudioBuffer:
    """Mono PCM samples as float32 in [-1, 1] plus their sample rate.

    Buffers are immutable: the sample array is marked read-only on
    construction so they can be shared freely across workers.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D mono, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def span(self) -> TimeSpan:
        return TimeSpan(0.0, self.duration_s)


Decoder = Callable[[Path], AudioBuffer]

_DECODERS: dict[str, Decoder] = {}


def register_decoder(suffix: str, decoder: Decoder) -> None:
    """Register a decoder for an additional container (suffix like '.flac')."""
    _DECODERS[suffix.lower()] = decoder


def decode_audio(path: str | Path) -> AudioBuffer:
    """Decode an audio file to a mono buffer normalized to [-1, 1].

    Multi-channel input is downmixed by the arithmetic mean across
    channels. WAV is supported natively; other containers only if a
    decoder was registered for their suffix.
    """
    path = Path(path)
    decoder = _DECODERS.get(path.suffix.lower(), _decode_wav)
    return decoder(path)


def _decode_wav(path: Path) -> AudioBuffer:
    try:
        handle = wave.open(str(path), "rb")
    except FileNotFoundError as exc:
        raise UnreadableFileError(f"{path}: file not found") from exc
    except (OSError, EOFError) as exc:
        raise UnreadableFileError(f"{path}: {exc}") from exc
    except wave.Error as exc:
        raise UnsupportedFormatError(f"{path}: {exc}") from exc

    with handle as wav:
        if wav.getcomptype() != "NONE":
            raise UnsupportedFormatError(f"{path}: compressed WAV ({wav.getcomptype()}) not supported")
        n_channels = wav.getnchannels()
        width = wav.getsampwidth()
        rate = wav.getframerate()
        n_frames = wav.getnframes()
        if n_frames == 0:
            raise EmptyAudioError(f"{path}: zero-length audio")
        try:
            raw = wav.readframes(n_frames)
        except (OSError, EOFError) as exc:
            raise UnreadableFileError(f"{path}: {exc}") from exc

    if len(raw) < n_frames * n_channels * width:
        raise UnreadableFileError(f"{path}: truncated data chunk")
    samples = _pcm_to_float(raw, width)
    if n_channels > 1:
        samples = samples.reshape(-1, n_channels).mean(axis=1, dtype=np.float64)
    return AudioBuffer(samples.astype(np.float32), rate)


def _pcm_to_float(raw: bytes, width: int) -> np.ndarray:
    """Integer PCM bytes to float in [-1, 1); full scale = 2^(8*width-1)."""
    if width == 1:
        data = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
        return (data - 128.0) / 128.0
    if width == 2:
        return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3)
        data = (
            b[:, 0].astype(np.int32)
            | (b[:, 1].astype(np.int32) << 8)
            | (b[:, 2].astype(np.int32) << 16)
        )
        data = np.where(data >= 1 << 23, data - (1 << 24), data)
        return data.astype(np.float64) / float(1 << 23)
    if width == 4:
        return np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    raise UnsupportedFormatError(f"unsupported PCM sample width {width}")


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Polyphase (windowed-sinc) resample; returns the input when rates match."""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == buffer.sample_rate:
        return buffer
    g = math.gcd(target_rate, buffer.sample_rate)
    up, down = target_rate // g, buffer.sample_rate // g
    out = resample_poly(buffer.samples.astype(np.float64), up, down)
    # sinc overshoot may poke past full scale; clip to keep the invariant
    out = np.clip(out, -1.0, 1.0)
    return AudioBuffer(out.astype(np.float32), target_rate)


def _span_indices(buffer: AudioBuffer, span: TimeSpan) -> tuple[int, int]:
    start = int(round(span.start_s * buffer.sample_rate))
    end = int(round(span.end_s * buffer.sample_rate))
    if start < 0 or end > len(buffer.samples):
        raise SpanOutOfRangeError(
            f"span [{span.start_s}, {span.end_s}]s outside buffer of {buffer.duration_s:.6f}s"
        )
    return start, end


def extract_span(buffer: AudioBuffer, span: TimeSpan) -> AudioBuffer:
    """Sample-exact slice; boundary indices are round(time * sample_rate)."""
    start, end = _span_indices(buffer, span)
    if end <= start:
        raise EmptySpanError(f"span [{span.start_s}, {span.end_s}]s covers no samples")
    return AudioBuffer(buffer.samples[start:end].copy(), buffer.sample_rate)


def rms_dbfs(buffer: AudioBuffer, span: TimeSpan | None = None) -> float:
    """RMS level of the span (whole buffer when None) in dBFS.

    20*log10(rms) with full scale 1.0; anything at or below the silence
    floor comes back as FLOOR_DBFS.
    """
    if span is None:
        samples = buffer.samples
    else:
        start, end = _span_indices(buffer, span)
        samples = buffer.samples[start:end]
    if len(samples) == 0:
        raise EmptySpanError("cannot measure level of an empty span")
    mean_sq = float(np.mean(np.square(samples, dtype=np.float64)))
    if mean_sq <= 0.0:
        return FLOOR_DBFS
    level = 10.0 * math.log10(mean_sq)
    return max(level, FLOOR_DBFS)


def _encode_pcm16(samples: np.ndarray) -> bytes:
    scaled = np.rint(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(scaled, -32768, 32767).astype("<i2").tobytes()


def write_wav(buffer: AudioBuffer, path: str | Path) -> None:
    """Write 16-bit PCM WAV (44-byte RIFF header + 2 bytes per sample)."""
    with open(path, "wb") as fh:
        _write_wav_stream(buffer, fh)


def encode_wav_bytes(buffer: AudioBuffer) -> bytes:
    """The exact bytes write_wav would produce, for in-memory upload."""
    bio = io.BytesIO()
    _write_wav_stream(buffer, bio)
    return bio.getvalue()


def _write_wav_stream(buffer: AudioBuffer, fh: BinaryIO) -> None:
    with wave.open(fh, "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(buffer.sample_rate)
        wav.writeframes(_encode_pcm16(buffer.samples))
