"""Wire protocol for remote promptable segmenters.

Request:  POST {base}/segment with JSON
          { "view_id": str, "image": base64 PNG (RGB),
            "seeds": [ { "row": int, "col": int, "positive": bool } ] }
Response: { "mask": base64 single-channel PNG (0 = background, 255 = object),
            "confidence": float }

The conformance harness below is shared with any service implementing the
protocol: it checks parseability, the 0/255 convention, shape agreement,
and byte-identical determinism over repeated requests.
"""

from __future__ import annotations

import base64
import io

import numpy as np
import requests
from PIL import Image

from .maskprop import SegmenterError, SegmenterResult

DEFAULT_TIMEOUT = 30.0


def encode_image_png(image):
    """HxWx3 linear floats in [0,1] (or uint8) to PNG bytes."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_image_png(data):
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def encode_mask_png(mask):
    """Bool mask to single-channel PNG bytes with the 0/255 convention."""
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_mask_png(data):
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("L"))
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 255))):
        raise SegmenterError(f"mask PNG violates the 0/255 convention: values {values}")
    return arr == 255


def encode_request(view_id, image, seeds):
    return {
        "view_id": view_id,
        "image": base64.b64encode(encode_image_png(image)).decode("ascii"),
        "seeds": [
            {"row": int(r), "col": int(c), "positive": bool(p)} for r, c, p in seeds
        ],
    }


def decode_response(payload):
    try:
        mask = decode_mask_png(base64.b64decode(payload["mask"]))
        confidence = float(payload["confidence"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SegmenterError(f"malformed segmenter response: {exc}") from exc
    return mask, confidence


class RemoteSegmenter:
    """Client side of the wire protocol; plugs into the propagation loop."""

    def __init__(self, base_url, timeout=DEFAULT_TIMEOUT, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def segment(self, prompt, image=None):
        if image is None:
            raise SegmenterError("remote segmentation needs the view image")
        payload = encode_request(prompt.view_id, image, prompt.seeds)
        try:
            resp = self.session.post(
                f"{self.base_url}/segment", json=payload, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise SegmenterError(f"segmenter unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise SegmenterError(f"segmenter returned HTTP {resp.status_code}: {resp.text[:200]}")
        mask, confidence = decode_response(resp.json())
        return SegmenterResult(mask, confidence)

    def health(self):
        try:
            resp = self.session.get(f"{self.base_url}/health", timeout=self.timeout)
        except requests.RequestException as exc:
            raise SegmenterError(f"segmenter unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise SegmenterError(f"health check failed: HTTP {resp.status_code}")
        return resp.json()


def conformance_requests(seed=0, n_requests=20, size=48):
    """Deterministic randomized request payloads for the harness."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_requests):
        image = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        n_seeds = int(rng.integers(1, 8))
        seeds = [
            (int(rng.integers(0, size)), int(rng.integers(0, size)), bool(rng.random() < 0.9))
            for _ in range(n_seeds)
        ]
        if not any(p for _, _, p in seeds):
            seeds[0] = (seeds[0][0], seeds[0][1], True)
        out.append(encode_request(f"conformance_{i:02d}", image, seeds))
    return out


def run_conformance_harness(send, seed=0, n_requests=20, expected_mask_fn=None):
    """Protocol conformance: run randomized requests through ``send``.

    ``send`` maps a request payload dict to a response payload dict (e.g. an
    HTTP POST wrapper). Each request is sent twice; responses must parse,
    obey the 0/255 mask convention, match the image shape, and be
    byte-identical across the repeat. ``expected_mask_fn(request) -> bool
    array`` additionally pins the exact mask (used with stub models).
    Raises AssertionError on any violation.
    """
    for req in conformance_requests(seed=seed, n_requests=n_requests):
        first = send(req)
        second = send(req)
        assert first["mask"] == second["mask"], "responses are not deterministic"
        mask, confidence = decode_response(first)
        image = decode_image_png(base64.b64decode(req["image"]))
        assert mask.shape == image.shape[:2], "mask shape differs from image shape"
        assert 0.0 <= confidence <= 1.0, f"confidence {confidence} outside [0, 1]"
        if expected_mask_fn is not None:
            expected = expected_mask_fn(req)
            assert np.array_equal(mask, expected), "mask differs from the model's ground truth"
