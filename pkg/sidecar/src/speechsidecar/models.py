"""Model backends behind the infer ops.

The embed backend is a Wav2Vec2 encoder: a pretrained checkpoint when one
is configured (local path or cached hub id), otherwise a compact,
deterministically seeded random initialization so the service runs fully
offline with stable outputs. VAD ships a dependency-free energy backend
next to the optional Silero one; diarization requires an explicitly
configured pyannote model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .wavio import MODEL_RATE


class ModelLoadError(RuntimeError):
    """A configured backend could not be loaded; the server must not start."""


@dataclass
class EmbedConfig:
    checkpoint: str | None = None
    layer: int = 4
    seed: int = 1234
    # architecture for the seeded-random fallback (compact for CPU use)
    hidden_size: int = 256
    num_hidden_layers: int = 4
    num_attention_heads: int = 4
    intermediate_size: int = 1024


@dataclass
class VadConfig:
    backend: str = "energy"  # energy | silero | none
    threshold_dbfs: float = -35.0
    frame_ms: float = 30.0
    hop_ms: float = 10.0
    min_speech_ms: float = 200.0
    merge_gap_ms: float = 300.0


@dataclass
class DiarizeConfig:
    backend: str = "none"  # pyannote | none
    checkpoint: str | None = None


@dataclass
class SidecarConfig:
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    vad: VadConfig = field(default_factory=VadConfig)
    diarize: DiarizeConfig = field(default_factory=DiarizeConfig)
    max_concurrency: int = 2

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SidecarConfig":
        known = {"embed", "vad", "diarize", "max_concurrency"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown sidecar config keys: {sorted(unknown)}")
        return cls(
            embed=EmbedConfig(**data.get("embed", {})),
            vad=VadConfig(**data.get("vad", {})),
            diarize=DiarizeConfig(**data.get("diarize", {})),
            max_concurrency=int(data.get("max_concurrency", 2)),
        )


class Wav2Vec2Embedder:
    """Frame embeddings from a Wav2Vec2 encoder in deterministic eval mode."""

    def __init__(self, config: EmbedConfig):
        import torch
        from transformers import Wav2Vec2Config, Wav2Vec2Model

        self._torch = torch
        if config.checkpoint:
            try:
                model = Wav2Vec2Model.from_pretrained(config.checkpoint)
            except Exception as exc:
                raise ModelLoadError(f"cannot load embed checkpoint {config.checkpoint!r}: {exc}") from exc
            variant = str(config.checkpoint).rstrip("/").split("/")[-1]
        else:
            arch = Wav2Vec2Config(
                hidden_size=config.hidden_size,
                num_hidden_layers=config.num_hidden_layers,
                num_attention_heads=config.num_attention_heads,
                intermediate_size=config.intermediate_size,
            )
            torch.manual_seed(config.seed)
            model = Wav2Vec2Model(arch)
            variant = f"random-{config.seed}"
        model.eval()
        n_layers = model.config.num_hidden_layers
        if not 0 <= config.layer <= n_layers:
            raise ModelLoadError(f"embed layer {config.layer} out of range 0..{n_layers}")
        self._model = model
        self.layer = config.layer
        # conv feature extractor: stride product 320, receptive field 400
        self.frame_rate_hz = MODEL_RATE / 320.0
        self.min_samples = 400
        self.model_tag = f"wav2vec2/{variant}/{config.layer}"

    def embed(self, samples: np.ndarray) -> np.ndarray:
        torch = self._torch
        if len(samples) < self.min_samples:
            samples = np.pad(samples, (0, self.min_samples - len(samples)))
        batch = torch.from_numpy(np.ascontiguousarray(samples, dtype=np.float32))[None, :]
        with torch.no_grad():
            out = self._model(batch, output_hidden_states=True)
        frames = out.hidden_states[self.layer][0]
        return frames.numpy().astype(np.float64)


class EnergyVad:
    """Frame-energy VAD: dependency-free default backend."""

    model_tag = "energy/builtin/0"

    def __init__(self, config: VadConfig):
        self.config = config

    def detect(self, samples: np.ndarray, params: dict[str, Any]) -> list[dict[str, float]]:
        cfg = self.config
        threshold = float(params.get("threshold_dbfs", cfg.threshold_dbfs))
        frame = max(1, int(round(cfg.frame_ms * MODEL_RATE / 1000.0)))
        hop = max(1, int(round(cfg.hop_ms * MODEL_RATE / 1000.0)))
        x = samples.astype(np.float64)
        if len(x) < frame:
            frame = len(x)
        if frame == 0:
            return []
        n_frames = 1 + (len(x) - frame) // hop
        cumsq = np.concatenate(([0.0], np.cumsum(np.square(x))))
        starts = np.arange(n_frames) * hop
        mean_sq = (cumsq[starts + frame] - cumsq[starts]) / frame
        with np.errstate(divide="ignore"):
            dbfs = 10.0 * np.log10(np.maximum(mean_sq, 1e-30))
        active = dbfs >= threshold

        duration = len(samples) / MODEL_RATE
        spans: list[list[float]] = []
        for i, is_active in enumerate(active):
            if not is_active:
                continue
            start = i * hop / MODEL_RATE
            end = min(duration, (i * hop + frame) / MODEL_RATE)
            if spans and start <= spans[-1][1] + cfg.merge_gap_ms / 1000.0:
                spans[-1][1] = max(spans[-1][1], end)
            else:
                spans.append([start, end])
        min_s = cfg.min_speech_ms / 1000.0
        return [
            {"start_s": s, "end_s": e}
            for s, e in spans
            if e - s >= min_s
        ]


class SileroVad:
    """Neural VAD via torch.hub; needs network/cache at startup."""

    model_tag = "silero/vad/0"

    def __init__(self, config: VadConfig):
        import torch

        try:
            model, utils = torch.hub.load(
                repo_or_dir="snakers4/silero-vad", model="silero_vad", onnx=False
            )
        except Exception as exc:
            raise ModelLoadError(f"cannot load Silero VAD: {exc}") from exc
        self._model = model
        self._get_speech_timestamps = utils[0]
        self._torch = torch
        self.config = config

    def detect(self, samples: np.ndarray, params: dict[str, Any]) -> list[dict[str, float]]:
        tensor = self._torch.from_numpy(np.ascontiguousarray(samples, dtype=np.float32))
        stamps = self._get_speech_timestamps(tensor, self._model, sampling_rate=MODEL_RATE)
        return [
            {"start_s": s["start"] / MODEL_RATE, "end_s": s["end"] / MODEL_RATE} for s in stamps
        ]


class PyannoteDiarizer:
    """Diarization via a configured pyannote pipeline."""

    model_tag = "pyannote/diarization/0"

    def __init__(self, config: DiarizeConfig):
        if not config.checkpoint:
            raise ModelLoadError("diarize backend pyannote requires a checkpoint")
        try:
            from pyannote.audio import Pipeline
        except ImportError as exc:
            raise ModelLoadError(f"pyannote.audio is not installed: {exc}") from exc
        try:
            self._pipeline = Pipeline.from_pretrained(config.checkpoint)
        except Exception as exc:
            raise ModelLoadError(f"cannot load diarization checkpoint: {exc}") from exc

    def diarize(self, samples: np.ndarray, params: dict[str, Any]) -> list[dict[str, Any]]:
        import torch

        waveform = torch.from_numpy(np.ascontiguousarray(samples, dtype=np.float32))[None, :]
        annotation = self._pipeline({"waveform": waveform, "sample_rate": MODEL_RATE})
        turns = [
            {"speaker_id": str(label), "start_s": float(segment.start), "end_s": float(segment.end)}
            for segment, _, label in annotation.itertracks(yield_label=True)
        ]
        return sorted(turns, key=lambda t: (t["start_s"], t["end_s"], t["speaker_id"]))


def build_backends(config: SidecarConfig) -> dict[str, Any]:
    """Instantiate every configured backend; raises ModelLoadError on any
    failure so the server refuses to start half-working."""
    backends: dict[str, Any] = {"embed": Wav2Vec2Embedder(config.embed)}
    if config.vad.backend == "energy":
        backends["vad"] = EnergyVad(config.vad)
    elif config.vad.backend == "silero":
        backends["vad"] = SileroVad(config.vad)
    elif config.vad.backend != "none":
        raise ModelLoadError(f"unknown vad backend {config.vad.backend!r}")
    if config.diarize.backend == "pyannote":
        backends["diarize"] = PyannoteDiarizer(config.diarize)
    elif config.diarize.backend != "none":
        raise ModelLoadError(f"unknown diarize backend {config.diarize.backend!r}")
    return backends
