import base64
import io
import socket
import threading
import time

import numpy as np
import pytest
import uvicorn
from fastapi.testclient import TestClient
from PIL import Image

from sam_bridge.service import BridgeConfig, StubModel, create_app

from scenesplit.segclient import (
    RemoteSegmenter,
    decode_response,
    encode_request,
    run_conformance_harness,
)
from scenesplit.maskprop import SegmenterPrompt


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app(BridgeConfig()))


def _png_b64(image):
    buf = io.BytesIO()
    Image.fromarray(image.astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _request(image, seeds, view_id="v0"):
    return {
        "view_id": view_id,
        "image": _png_b64(image),
        "seeds": [{"row": r, "col": c, "positive": p} for r, c, p in seeds],
    }


def expected_stub_mask(req):
    """Locally recomputed stub output: the threshold-R disk at the first
    positive seed."""
    raw = base64.b64decode(req["image"])
    with Image.open(io.BytesIO(raw)) as im:
        h, w = im.size[1], im.size[0]
    positive = [s for s in req["seeds"] if s["positive"]]
    mask = np.zeros((h, w), dtype=bool)
    if positive:
        r0, c0 = positive[0]["row"], positive[0]["col"]
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        dist = np.sqrt((rr - r0) ** 2 + (cc - c0) ** 2)
        # scores = clip(1 - d/(2R), 0, 1) >= 0.5  <=>  d <= R
        mask = dist <= StubModel.RADIUS
    return mask


def test_health_reports_service_and_model(client):
    resp = client.get("/health")
    assert resp.status_code == 200
    body = resp.json()
    assert body["service"] == "sam-bridge"
    assert body["model"] == "stub"
    assert "version" in body


def test_segment_returns_disk_around_first_seed(client):
    rng = np.random.default_rng(0)
    image = rng.integers(0, 255, (40, 48, 3), dtype=np.uint8)
    resp = client.post("/segment", json=_request(image, [(20, 24, True)]))
    assert resp.status_code == 200
    mask, confidence = decode_response(resp.json())
    assert mask.shape == (40, 48)
    assert mask[20, 24]
    assert not mask[0, 0]
    assert 0 <= confidence <= 1


def test_segment_rejects_out_of_bounds_seed(client):
    image = np.zeros((16, 16, 3), dtype=np.uint8)
    resp = client.post("/segment", json=_request(image, [(99, 0, True)]))
    assert resp.status_code == 400
    assert "outside" in resp.json()["detail"]


def test_segment_rejects_undecodable_image(client):
    req = _request(np.zeros((8, 8, 3), dtype=np.uint8), [(1, 1, True)])
    req["image"] = base64.b64encode(b"not a png").decode("ascii")
    resp = client.post("/segment", json=req)
    assert resp.status_code == 400


def test_model_failure_maps_to_500():
    class Broken:
        name = "broken"

        def predict(self, image, points):
            raise RuntimeError("no weights")

    client = TestClient(create_app(BridgeConfig(), model=Broken()), raise_server_exceptions=False)
    resp = client.post("/segment", json=_request(np.zeros((8, 8, 3), dtype=np.uint8), [(1, 1, True)]))
    assert resp.status_code == 500


def test_identical_requests_identical_bytes(client):
    rng = np.random.default_rng(1)
    image = rng.integers(0, 255, (32, 32, 3), dtype=np.uint8)
    req = _request(image, [(10, 10, True), (4, 20, False)])
    a = client.post("/segment", json=req).json()
    b = client.post("/segment", json=req).json()
    assert a["mask"] == b["mask"]
    assert a["confidence"] == b["confidence"]


def test_conformance_harness_in_process(client):
    def send(payload):
        resp = client.post("/segment", json=payload)
        assert resp.status_code == 200, resp.text
        return resp.json()

    run_conformance_harness(send, seed=0, n_requests=20, expected_mask_fn=expected_stub_mask)


def test_config_validation():
    with pytest.raises(ValueError):
        BridgeConfig(threshold=1.5)
    with pytest.raises(ValueError):
        BridgeConfig(max_concurrent=0)


@pytest.fixture(scope="module")
def live_server():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    config = uvicorn.Config(
        create_app(BridgeConfig(port=port)), host="127.0.0.1", port=port, log_level="error"
    )
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("bridge server did not start")
        time.sleep(0.05)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)


def test_conformance_over_real_socket(live_server):
    import requests

    def send(payload):
        resp = requests.post(f"{live_server}/segment", json=payload, timeout=10)
        assert resp.status_code == 200, resp.text
        return resp.json()

    run_conformance_harness(send, seed=7, n_requests=20, expected_mask_fn=expected_stub_mask)


def test_remote_segmenter_client_roundtrip(live_server):
    seg = RemoteSegmenter(live_server)
    health = seg.health()
    assert health["model"] == "stub"
    rng = np.random.default_rng(2)
    image = rng.random((24, 24, 3))
    result = seg.segment(SegmenterPrompt("v1", [(12, 12, True)]), image=image)
    assert result.mask.shape == (24, 24)
    assert result.mask[12, 12]
    assert result.confidence == pytest.approx(0.9)
