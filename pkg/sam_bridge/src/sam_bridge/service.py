"""HTTP service exposing a promptable segmentation model.

Speaks the segmenter wire protocol:

    POST /segment   { view_id, image: base64 PNG, seeds: [{row, col, positive}] }
                 -> { mask: base64 single-channel PNG (0/255), confidence: float }
    GET  /health    -> { service, version, model }

The model is pluggable: anything with ``predict(image, points) ->
(scores HxW in [0,1], confidence)``. The bundled stub draws a fixed disk
around the first positive seed, which is enough to exercise the protocol
end to end; a real promptable model drops in behind the same handler.
"""

from __future__ import annotations

import asyncio
import base64
import io
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel, Field

SERVICE_NAME = "sam-bridge"
SERVICE_VERSION = "0.1.0"


@dataclass
class BridgeConfig:
    host: str = "127.0.0.1"
    port: int = 8765
    model: str = "stub"
    checkpoint: str | None = None
    max_concurrent: int = 4
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("binarization threshold must be in (0, 1)")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be positive")


class Seed(BaseModel):
    row: int
    col: int
    positive: bool = True


class SegmentRequest(BaseModel):
    view_id: str
    image: str = Field(description="base64-encoded RGB PNG")
    seeds: list[Seed]


class SegmentResponse(BaseModel):
    mask: str = Field(description="base64-encoded single-channel PNG, 0/255")
    confidence: float


class StubModel:
    """Deterministic placeholder: a disk of fixed radius at the first
    positive seed. Exists to validate the protocol without model weights."""

    name = "stub"
    RADIUS = 12.0

    def predict(self, image, points):
        h, w = image.shape[:2]
        scores = np.zeros((h, w))
        positive = [p for p in points if p[2]]
        if positive:
            r0, c0 = positive[0][:2]
            rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            dist = np.sqrt((rr - r0) ** 2 + (cc - c0) ** 2)
            scores = np.clip(1.0 - dist / (2 * self.RADIUS), 0.0, 1.0)
        return scores, 0.9


def load_model(config):
    if config.model == "stub":
        return StubModel()
    if config.model == "transformers-sam":
        from .sam_adapter import TransformersSamModel

        return TransformersSamModel(config.checkpoint)
    raise ValueError(f"unknown model kind {config.model!r}")


def decode_image(data_b64):
    try:
        raw = base64.b64decode(data_b64, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            return np.asarray(im.convert("RGB"))
    except Exception as exc:  # malformed payloads are client errors
        raise HTTPException(status_code=400, detail=f"image does not decode: {exc}") from exc


def encode_mask(mask):
    arr = np.where(mask, 255, 0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(config=None, model=None):
    config = config or BridgeConfig()
    model = model or load_model(config)
    app = FastAPI(title=SERVICE_NAME, version=SERVICE_VERSION)
    gate = asyncio.Semaphore(config.max_concurrent)

    @app.get("/health")
    async def health():
        return {"service": SERVICE_NAME, "version": SERVICE_VERSION, "model": model.name}

    @app.post("/segment", response_model=SegmentResponse)
    async def segment(req: SegmentRequest):
        image = decode_image(req.image)
        h, w = image.shape[:2]
        for s in req.seeds:
            if not (0 <= s.row < h and 0 <= s.col < w):
                raise HTTPException(
                    status_code=400,
                    detail=f"seed ({s.row}, {s.col}) outside the {h}x{w} image",
                )
        points = [(s.row, s.col, s.positive) for s in req.seeds]
        async with gate:
            try:
                scores, confidence = model.predict(image, points)
            except Exception as exc:
                raise HTTPException(status_code=500, detail=f"model failure: {exc}") from exc
        mask = np.asarray(scores) >= config.threshold
        return SegmentResponse(mask=encode_mask(mask), confidence=float(confidence))

    return app
