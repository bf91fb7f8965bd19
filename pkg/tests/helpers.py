"""Shared synthetic-signal builders and a scriptable mock HTTP service."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from ttscorpus.audio import AudioBuffer
from ttscorpus.services import ServiceConfig


def sine(freq_hz: float, duration_s: float, rate: int = 16000, amplitude: float = 1.0) -> np.ndarray:
    t = np.arange(int(round(duration_s * rate))) / rate
    return (amplitude * np.sin(2 * np.pi * freq_hz * t)).astype(np.float32)


def silence(duration_s: float, rate: int = 16000) -> np.ndarray:
    return np.zeros(int(round(duration_s * rate)), dtype=np.float32)


def tone_buffer(freq_hz: float, duration_s: float, rate: int = 16000, amplitude: float = 1.0) -> AudioBuffer:
    return AudioBuffer(sine(freq_hz, duration_s, rate, amplitude), rate)


def concat_buffer(parts: list[np.ndarray], rate: int = 16000) -> AudioBuffer:
    return AudioBuffer(np.concatenate(parts), rate)


def amplitude_for_dbfs(dbfs: float) -> float:
    """Sine amplitude whose RMS lands at the requested dBFS level."""
    return float(10.0 ** (dbfs / 20.0) * np.sqrt(2.0))


def oracle_edit_distance(ref, hyp):
    """Independent memoized-recursion edit distance (the test oracle)."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def dist(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            dist(i - 1, j - 1) + (0 if ref[i - 1] == hyp[j - 1] else 1),
            dist(i - 1, j) + 1,
            dist(i, j - 1) + 1,
        )

    return dist(len(ref), len(hyp))


def build_eval_scenario(tmp_path, n_clips=12):
    """One-speaker testset with real clips plus generated copies of them.

    Returns (ws, testset_path, gen_dir, echo_handler); the handler answers
    ASR requests with each clip's reference text.
    """
    import base64
    import json
    import shutil
    from dataclasses import replace

    from ttscorpus.audio import TimeSpan, decode_audio, encode_wav_bytes, write_wav
    from ttscorpus.cli import EXIT_OK, main
    from ttscorpus.curation import annotate_record, new_record, save_manifest
    from ttscorpus.sampler import load_testset

    ws = tmp_path / "ws"
    (ws / "clips" / "file00").mkdir(parents=True)
    records = []
    for i in range(n_clips):
        buf = AudioBuffer(sine(340 + 7 * i, 4.0, 16000, 0.6), 16000)
        span = TimeSpan(i * 10.0, i * 10.0 + 4.0)
        record = new_record("file00", span, 16000, lead_dbfs=-120.0, trail_dbfs=-120.0)
        rel = f"clips/file00/{record.id}.wav"
        write_wav(buf, ws / rel)
        record = replace(record, audio_path=rel)
        records.append(annotate_record(record, f"نص المقطع {i}", f"نص المقطع {i}"))
    corpus = tmp_path / "corpus.jsonl"
    save_manifest(records, {"pipeline_version": "test"}, corpus)
    diar = tmp_path / "diar.jsonl"
    diar.write_text(
        json.dumps({"source_id": "file00", "speaker_id": "spk0", "start_s": 0.0, "end_s": 200.0}) + "\n",
        encoding="utf-8",
    )
    testset_path = tmp_path / "testset.json"
    assert main(
        [
            "--workspace_dir", str(ws),
            "testset", "--manifest", str(corpus), "--diarization", str(diar),
            "--n-speakers", "1", "--out", str(testset_path),
            "--train-out", str(tmp_path / "train.jsonl"),
        ]
    ) == EXIT_OK
    testset = load_testset(testset_path)

    gen_dir = tmp_path / "generated"
    gen_dir.mkdir()
    text_by_audio = {}
    for record in testset.eval_records():
        src = ws / record.audio_path
        shutil.copy(src, gen_dir / f"{record.id}.wav")
        b64 = base64.b64encode(encode_wav_bytes(decode_audio(src))).decode()
        text_by_audio[b64] = record.text

    def echo_handler(payload, service):
        return 200, {"text": text_by_audio[payload["audio"]]}

    return ws, testset_path, gen_dir, echo_handler


def build_burst_corpus(
    directory,
    n_files=3,
    bursts_per_file=2,
    burst_s=5.0,
    gap_s=2.0,
    lead_s=2.0,
    rate=16000,
    amplitude=0.8,
):
    """Write WAV files of tone bursts separated by silence.

    Returns {source_id: [(start_s, end_s), ...]} ground-truth spans.
    """
    from ttscorpus.audio import write_wav

    directory.mkdir(parents=True, exist_ok=True)
    truth = {}
    for f in range(n_files):
        parts = [silence(lead_s, rate)]
        spans = []
        cursor = lead_s
        for b in range(bursts_per_file):
            freq = 300 + 40 * f + 15 * b
            parts.append(sine(freq, burst_s, rate, amplitude))
            spans.append((cursor, cursor + burst_s))
            cursor += burst_s
            parts.append(silence(gap_s, rate))
            cursor += gap_s
        source_id = f"source{f:02d}"
        write_wav(concat_buffer(parts, rate), directory / f"{source_id}.wav")
        truth[source_id] = spans
    return truth


class MockService:
    """Local HTTP service driven by a handler(payload, service) callable.

    The handler returns (status_code, body_dict). Tracks request totals and
    the maximum number of concurrently in-flight requests.
    """

    def __init__(self, handler):
        self.handler = handler
        self.hits = 0
        self.inflight = 0
        self.max_inflight = 0
        self._lock = threading.Lock()
        outer = self

        class _Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def do_POST(self):
                with outer._lock:
                    outer.hits += 1
                    outer.inflight += 1
                    outer.max_inflight = max(outer.max_inflight, outer.inflight)
                try:
                    length = int(self.headers.get("Content-Length", 0))
                    payload = json.loads(self.rfile.read(length) or b"{}")
                    status, body = outer.handler(payload, outer)
                    data = json.dumps(body).encode("utf-8")
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                finally:
                    with outer._lock:
                        outer.inflight -= 1

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.02), daemon=True
        )

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self._server.server_port}/"

    def config(self, **overrides) -> ServiceConfig:
        defaults = dict(
            endpoint_url=self.url,
            max_retries=3,
            backoff_base_ms=1.0,
            backoff_ceiling_ms=10.0,
            timeout_s=10.0,
        )
        defaults.update(overrides)
        return ServiceConfig(**defaults)

    def __enter__(self) -> "MockService":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()


def echo_asr_handler(transcript_for=None):
    """ASR mock: returns a transcript keyed by the uploaded audio bytes."""

    def handler(payload, service):
        audio_b64 = payload.get("audio", "")
        if transcript_for is None:
            return 200, {"text": f"transcript-{abs(hash(audio_b64)) % 10 ** 8}"}
        return 200, {"text": transcript_for(audio_b64)}

    return handler


def appending_diacritizer_handler(payload, service):
    """Diacritizer mock that only adds marks (passes the validation gate)."""
    text = payload.get("text", "")
    return 200, {"text": text + "َ"}
