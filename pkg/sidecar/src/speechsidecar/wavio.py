"""Audio payload handling: base64 WAV bytes to mono float arrays at 16 kHz."""

from __future__ import annotations

import base64
import binascii
import io
import math
import wave

import numpy as np
from scipy.signal import resample_poly

MODEL_RATE = 16000


class AudioPayloadError(ValueError):
    """Request audio could not be decoded."""


def decode_audio_payload(audio_b64: str) -> np.ndarray:
    """Base64 WAV -> mono float32 samples at MODEL_RATE in [-1, 1]."""
    if not isinstance(audio_b64, str) or not audio_b64:
        raise AudioPayloadError("audio field must be a non-empty base64 string")
    try:
        raw = base64.b64decode(audio_b64, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise AudioPayloadError(f"audio is not valid base64: {exc}") from exc
    samples, rate = _decode_wav(raw)
    if rate != MODEL_RATE:
        g = math.gcd(MODEL_RATE, rate)
        samples = resample_poly(samples, MODEL_RATE // g, rate // g)
        samples = np.clip(samples, -1.0, 1.0)
    return samples.astype(np.float32)


def _decode_wav(raw: bytes) -> tuple[np.ndarray, int]:
    try:
        with wave.open(io.BytesIO(raw), "rb") as wav:
            if wav.getcomptype() != "NONE":
                raise AudioPayloadError(f"compressed WAV not supported ({wav.getcomptype()})")
            channels = wav.getnchannels()
            width = wav.getsampwidth()
            rate = wav.getframerate()
            frames = wav.getnframes()
            if frames == 0:
                raise AudioPayloadError("zero-length audio")
            data = wav.readframes(frames)
    except (wave.Error, EOFError) as exc:
        raise AudioPayloadError(f"not a decodable WAV payload: {exc}") from exc

    if width == 2:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 1:
        samples = (np.frombuffer(data, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 4:
        samples = np.frombuffer(data, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise AudioPayloadError(f"unsupported sample width {width}")
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    return samples, rate
