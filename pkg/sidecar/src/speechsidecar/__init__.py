"""Model-inference sidecar: speech embeddings, VAD and diarization over HTTP."""

__version__ = "0.1.0"
