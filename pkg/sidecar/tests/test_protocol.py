import numpy as np
import pytest
from fastapi.testclient import TestClient

from speechsidecar.app import create_app
from speechsidecar.models import (
    EmbedConfig,
    ModelLoadError,
    SidecarConfig,
    VadConfig,
    build_backends,
)

from wavhelpers import audio_b64, silence, tone


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


def infer(client, op, audio, params=None):
    return client.post("/v1/infer", json={"op": op, "audio": audio, "params": params or {}})


class TestHealth:
    def test_model_tags(self, client):
        doc = client.get("/v1/health").json()
        assert doc["ok"] is True
        assert doc["model_tags"]["embed"].startswith("wav2vec2/")
        assert doc["model_tags"]["vad"] == "energy/builtin/0"


class TestEmbed:
    def test_shape_and_rate(self, client):
        doc = infer(client, "embed", audio_b64(tone(440, 3.0))).json()
        assert doc["ok"] is True
        frames = doc["result"]["frames"]
        rate = doc["result"]["frame_rate_hz"]
        assert rate == 50.0
        assert abs(len(frames) - 3.0 * rate) <= 2
        widths = {len(row) for row in frames}
        assert len(widths) == 1  # constant D

    def test_repeated_request_byte_identical(self, client):
        payload = {"op": "embed", "audio": audio_b64(tone(300, 1.0)), "params": {}}
        a = client.post("/v1/infer", json=payload)
        b = client.post("/v1/infer", json=payload)
        assert a.content == b.content

    def test_frame_rate_consistency_with_leading_silence(self, client):
        # silence + speech has the frame count its duration predicts (+/- 2)
        samples = np.concatenate([silence(1.0), tone(440, 2.0)])
        doc = infer(client, "embed", audio_b64(samples)).json()
        rate = doc["result"]["frame_rate_hz"]
        assert abs(len(doc["result"]["frames"]) - 3.0 * rate) <= 2

    def test_non_16k_input_resampled(self, client):
        doc = infer(client, "embed", audio_b64(tone(440, 3.0, rate=48000), rate=48000)).json()
        assert doc["ok"] is True
        assert abs(len(doc["result"]["frames"]) - 150) <= 2

    def test_very_short_audio_still_one_frame(self, client):
        doc = infer(client, "embed", audio_b64(tone(440, 0.01))).json()
        assert doc["ok"] is True
        assert len(doc["result"]["frames"]) >= 1

    def test_frames_finite(self, client):
        doc = infer(client, "embed", audio_b64(tone(220, 0.5))).json()
        frames = np.asarray(doc["result"]["frames"])
        assert np.all(np.isfinite(frames))


class TestVad:
    def test_silence_empty(self, client):
        doc = infer(client, "vad", audio_b64(silence(2.0))).json()
        assert doc["ok"] is True
        assert doc["result"] == []

    def test_burst_detected_in_range(self, client):
        samples = np.concatenate([silence(1.0), tone(440, 2.0, amplitude=0.8), silence(1.0)])
        doc = infer(client, "vad", audio_b64(samples)).json()
        spans = doc["result"]
        assert len(spans) == 1
        assert spans[0]["start_s"] == pytest.approx(1.0, abs=0.15)
        assert spans[0]["end_s"] == pytest.approx(3.0, abs=0.15)
        for prev, cur in zip(spans, spans[1:]):
            assert cur["start_s"] >= prev["end_s"]
        assert all(0.0 <= s["start_s"] < s["end_s"] <= 4.0 for s in spans)

    def test_threshold_param_respected(self, client):
        quiet = tone(440, 2.0, amplitude=0.001)
        doc = infer(client, "vad", audio_b64(quiet), params={"threshold_dbfs": -20.0}).json()
        assert doc["result"] == []


class TestErrorEnvelope:
    def test_malformed_audio(self, client):
        doc = infer(client, "embed", "bm90IGEgd2F2").json()
        assert doc["ok"] is False
        assert "WAV" in doc["error"] or "decod" in doc["error"]

    def test_invalid_base64(self, client):
        doc = infer(client, "embed", "!!!not-base64!!!").json()
        assert doc["ok"] is False

    def test_missing_audio(self, client):
        doc = client.post("/v1/infer", json={"op": "embed", "params": {}}).json()
        assert doc["ok"] is False

    def test_unknown_op(self, client):
        doc = infer(client, "transmogrify", audio_b64(tone(440, 0.5))).json()
        assert doc["ok"] is False
        assert "unknown op" in doc["error"]

    def test_unconfigured_diarize(self, client):
        doc = infer(client, "diarize", audio_b64(tone(440, 0.5))).json()
        assert doc["ok"] is False
        assert "no configured backend" in doc["error"]

    def test_non_json_body(self, client):
        response = client.post("/v1/infer", content=b"garbage")
        doc = response.json()
        assert doc["ok"] is False

    def test_bad_params_type(self, client):
        doc = client.post(
            "/v1/infer",
            json={"op": "embed", "audio": audio_b64(tone(440, 0.5)), "params": [1, 2]},
        ).json()
        assert doc["ok"] is False


class TestConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError):
            SidecarConfig.from_dict({"no_such": 1})

    def test_bad_layer_refuses_to_serve(self):
        config = SidecarConfig(embed=EmbedConfig(layer=99))
        with pytest.raises(ModelLoadError):
            build_backends(config)

    def test_unknown_vad_backend_refuses(self):
        config = SidecarConfig(vad=VadConfig(backend="psychic"))
        with pytest.raises(ModelLoadError):
            build_backends(config)

    def test_vad_none_disables_op(self):
        app = create_app(SidecarConfig(vad=VadConfig(backend="none")))
        local = TestClient(app)
        doc = local.post(
            "/v1/infer", json={"op": "vad", "audio": audio_b64(tone(440, 0.5)), "params": {}}
        ).json()
        assert doc["ok"] is False

    def test_seed_changes_model_tag_and_output(self):
        a = TestClient(create_app(SidecarConfig(embed=EmbedConfig(seed=1))))
        b = TestClient(create_app(SidecarConfig(embed=EmbedConfig(seed=2))))
        payload = {"op": "embed", "audio": audio_b64(tone(440, 0.5)), "params": {}}
        ra = a.post("/v1/infer", json=payload).json()
        rb = b.post("/v1/infer", json=payload).json()
        assert ra["result"]["model_tag"] != rb["result"]["model_tag"]
        assert ra["result"]["frames"] != rb["result"]["frames"]
