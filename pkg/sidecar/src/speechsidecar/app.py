"""HTTP surface: POST /v1/infer and GET /v1/health.

Request-level problems (bad JSON, undecodable audio, unknown op,
unconfigured backend) come back as HTTP 200 with ok=false so clients can
distinguish data problems from transport failures. Responses for
identical requests are byte-identical: all backends run deterministically.
"""

from __future__ import annotations

import json
import logging
import threading
from typing import Any

from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse, Response

from .models import SidecarConfig, build_backends
from .wavio import AudioPayloadError, decode_audio_payload

logger = logging.getLogger("speechsidecar")

OPS = ("embed", "vad", "diarize")


def _error(message: str) -> JSONResponse:
    return JSONResponse({"ok": False, "error": message})


def _ok(result: Any) -> Response:
    body = json.dumps({"ok": True, "result": result}, ensure_ascii=False, sort_keys=True)
    return Response(content=body, media_type="application/json")


def create_app(config: SidecarConfig | None = None) -> FastAPI:
    config = config or SidecarConfig()
    backends = build_backends(config)  # ModelLoadError here refuses to serve
    gate = threading.Semaphore(config.max_concurrency)
    app = FastAPI(title="speechsidecar", docs_url=None, redoc_url=None)

    @app.get("/v1/health")
    def health() -> JSONResponse:
        return JSONResponse(
            {
                "ok": True,
                "model_tags": {op: backend.model_tag for op, backend in backends.items()},
            }
        )

    def _compute(op: str, backend: Any, samples, params: dict) -> Response:
        with gate:
            try:
                if op == "embed":
                    frames = backend.embed(samples)
                    result: Any = {
                        "frames": frames.tolist(),
                        "frame_rate_hz": backend.frame_rate_hz,
                        "model_tag": backend.model_tag,
                    }
                elif op == "vad":
                    result = backend.detect(samples, params)
                else:
                    result = backend.diarize(samples, params)
            except Exception as exc:  # inference failure must not kill the server
                logger.exception("op %s failed", op)
                return _error(f"{op} failed: {type(exc).__name__}: {exc}")
        return _ok(result)

    @app.post("/v1/infer")
    async def infer(request: Request) -> Response:
        body = await request.body()
        try:
            doc = json.loads(body)
        except json.JSONDecodeError as exc:
            return _error(f"request is not JSON: {exc}")
        if not isinstance(doc, dict):
            return _error("request must be a JSON object")

        op = doc.get("op")
        if op not in OPS:
            return _error(f"unknown op {op!r}; expected one of {list(OPS)}")
        backend = backends.get(op)
        if backend is None:
            return _error(f"op {op!r} has no configured backend")
        params = doc.get("params") or {}
        if not isinstance(params, dict):
            return _error("params must be an object")

        try:
            samples = decode_audio_payload(doc.get("audio"))
        except AudioPayloadError as exc:
            return _error(str(exc))

        return await run_in_threadpool(_compute, op, backend, samples, params)

    return app
