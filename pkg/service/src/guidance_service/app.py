"""FastAPI application implementing the guidance wire protocol.

Error model: malformed requests get HTTP 400 with {"error": string}; encoder
failures get HTTP 500 with {"error": string}. Successful bodies follow the
client's schema exactly: /v1/guidance returns {"loss", "grad_b64"} with the
gradient encoded like the request image (f32 little-endian, row-major, RGB
interleaved), the embed endpoints return {"embedding": [512 floats]}, and
/v1/health returns {"status": "ok", "model": name}.

The service is stateless: no request ever changes the answer to another.
Encoder access is serialized behind a lock; request handling itself runs on
the server's worker pool.
"""

from __future__ import annotations

import base64
import binascii
import threading

import numpy as np
from fastapi import Body, FastAPI
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

DEFAULT_MAX_IMAGE_DIM = 1024


class BadRequest(ValueError):
    """Client-side input problem; mapped to HTTP 400."""


def _require_dim(body: dict, key: str, max_dim: int) -> int:
    value = body.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise BadRequest(f"{key} must be an integer")
    if not 1 <= value <= max_dim:
        raise BadRequest(f"{key} must be in [1, {max_dim}], got {value}")
    return value


def _require_prompt(body: dict) -> str:
    prompt = body.get("prompt")
    if not isinstance(prompt, str) or not prompt:
        raise BadRequest("prompt must be a non-empty string")
    return prompt


def _decode_image(body: dict, max_dim: int) -> np.ndarray:
    width = _require_dim(body, "width", max_dim)
    height = _require_dim(body, "height", max_dim)
    encoded = body.get("image_b64")
    if not isinstance(encoded, str):
        raise BadRequest("image_b64 must be a base64 string")
    try:
        raw = base64.b64decode(encoded, validate=True)
    except binascii.Error as exc:
        raise BadRequest(f"image_b64 is not valid base64: {exc}") from exc
    expected = width * height * 3 * 4
    if len(raw) != expected:
        raise BadRequest(
            f"image byte length {len(raw)} != {expected} "
            f"for {width}x{height} f32 RGB"
        )
    image = np.frombuffer(raw, dtype="<f4").reshape(height, width, 3)
    if not np.all(np.isfinite(image)):
        raise BadRequest("image contains non-finite values")
    return image.astype(np.float64)


def _encode_grad(grad: np.ndarray) -> str:
    data = np.ascontiguousarray(grad, dtype="<f4").tobytes()
    return base64.b64encode(data).decode("ascii")


def create_app(encoder, max_image_dim: int = DEFAULT_MAX_IMAGE_DIM) -> FastAPI:
    app = FastAPI(title="guidance-service")
    lock = threading.Lock()

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(BadRequest)
    async def _bad_request(request, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(Exception)
    async def _server_error(request, exc):
        return JSONResponse(status_code=500, content={"error": str(exc)})

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "model": encoder.model_name}

    @app.post("/v1/guidance")
    def guidance(body: dict = Body(...)):
        prompt = _require_prompt(body)
        image = _decode_image(body, max_image_dim)
        with lock:
            loss, grad = encoder.guidance(image, prompt)
        return {"loss": float(loss), "grad_b64": _encode_grad(grad)}

    @app.post("/v1/embed_text")
    def embed_text(body: dict = Body(...)):
        prompt = _require_prompt(body)
        with lock:
            embedding = encoder.embed_text(prompt)
        return {"embedding": [float(v) for v in embedding]}

    @app.post("/v1/embed_image")
    def embed_image(body: dict = Body(...)):
        image = _decode_image(body, max_image_dim)
        with lock:
            embedding = encoder.embed_image(image)
        return {"embedding": [float(v) for v in embedding]}

    return app
