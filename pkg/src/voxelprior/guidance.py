"""Image-space guidance: photometric oracle and remote similarity client.

The engine only ever sees (loss, dL/dimage) pairs; anything neural lives on
the other side of the wire protocol. The photometric path is a pure-numpy MSE
oracle used for self-contained tests and reconstruction experiments.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field as dc_field

import numpy as np

from .seeding import fnv1a_64

DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 3


class GuidanceTransportError(RuntimeError):
    """Connection failure, timeout, or malformed response after retries."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class GuidanceProtocolError(RuntimeError):
    """The service answered, but with unusable numbers (NaN/inf)."""


@dataclass
class GuidanceResult:
    loss: float
    dL_dimage: np.ndarray  # (H, W, 3) float64

    def __post_init__(self):
        self.loss = float(self.loss)
        self.dL_dimage = np.asarray(self.dL_dimage, dtype=np.float64)
        if self.dL_dimage.ndim != 3 or self.dL_dimage.shape[-1] != 3:
            raise ValueError(
                f"gradient must be (H, W, 3), got {self.dL_dimage.shape}"
            )


def photometric_guidance(image: np.ndarray, target: np.ndarray) -> GuidanceResult:
    """Mean-squared-error guidance; gradient 2(image - target)/(3HW)."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise ValueError(
            f"image shape {image.shape} does not match target {target.shape}"
        )
    diff = image - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return GuidanceResult(loss=loss, dL_dimage=grad)


# ---------------------------------------------------------------------------
# wire encoding
# ---------------------------------------------------------------------------

def image_to_f32_bytes(image: np.ndarray) -> bytes:
    """Raw f32 little-endian, row-major, RGB interleaved."""
    arr = np.ascontiguousarray(np.asarray(image), dtype="<f4")
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"image must be (H, W, 3), got {arr.shape}")
    return arr.tobytes()


def image_from_f32_bytes(data: bytes, width: int, height: int) -> np.ndarray:
    expected = width * height * 3 * 4
    if len(data) != expected:
        raise ValueError(
            f"image byte length {len(data)} != {expected} for {width}x{height}"
        )
    return np.frombuffer(data, dtype="<f4").reshape(height, width, 3).astype(np.float64)


def image_hash(image: np.ndarray) -> int:
    """64-bit FNV-1a over the f32 wire bytes; the caching key."""
    return fnv1a_64(image_to_f32_bytes(image))


# ---------------------------------------------------------------------------
# handles
# ---------------------------------------------------------------------------

@dataclass
class PhotometricGuidance:
    """Fixed (camera, target) views; step i scores against view i mod n."""

    views: list  # [(Camera, (H, W, 3) image), ...]
    kind: str = "photometric"

    def __post_init__(self):
        if not self.views:
            raise ValueError("photometric guidance needs at least one view")
        shape0 = np.asarray(self.views[0][1]).shape
        for cam, target in self.views:
            t = np.asarray(target)
            if t.shape != shape0:
                raise ValueError("all photometric targets must share one shape")
            if t.shape != (cam.resolution[1], cam.resolution[0], 3):
                raise ValueError(
                    f"target shape {t.shape} does not match camera resolution "
                    f"{cam.resolution}"
                )

    def camera_for_step(self, step: int):
        return self.views[step % len(self.views)][0]

    def evaluate(self, image: np.ndarray, step: int = 0) -> GuidanceResult:
        _, target = self.views[step % len(self.views)]
        return photometric_guidance(image, target)


@dataclass
class RemoteGuidance:
    """Client for the guidance wire protocol (negative cosine similarity).

    Results are cached per (image hash, prompt); transient transport failures
    are retried, then surfaced as GuidanceTransportError carrying the step.
    """

    endpoint: str
    prompt: str
    timeout: float = DEFAULT_TIMEOUT
    retries: int = DEFAULT_RETRIES
    kind: str = "remote"
    _cache: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not self.endpoint.startswith(("http://", "https://")):
            raise ValueError(f"endpoint {self.endpoint!r} is not an http(s) URL")

    def camera_for_step(self, step: int):
        return None  # remote guidance has no preferred view; caller samples

    def evaluate(self, image: np.ndarray, step: int = 0) -> GuidanceResult:
        key = (image_hash(image), self.prompt)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        result = clip_guidance(image, self.prompt, self.endpoint,
                               timeout=self.timeout, retries=self.retries,
                               step=step)
        self._cache[key] = result
        return result


def clip_guidance(image: np.ndarray, prompt: str, endpoint: str,
                  timeout: float = DEFAULT_TIMEOUT,
                  retries: int = DEFAULT_RETRIES,
                  step: int | None = None) -> GuidanceResult:
    """POST the image to /v1/guidance and unpack (loss, gradient)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"image must be (H, W, 3), got {image.shape}")
    if not prompt:
        raise ValueError("prompt must be non-empty")
    height, width = image.shape[:2]
    body = {
        "width": width,
        "height": height,
        "prompt": prompt,
        "image_b64": base64.b64encode(image_to_f32_bytes(image)).decode("ascii"),
    }
    payload = _post_json(endpoint.rstrip("/") + "/v1/guidance", body,
                         timeout=timeout, retries=retries, step=step)
    try:
        loss = float(payload["loss"])
        grad_bytes = base64.b64decode(payload["grad_b64"])
        grad = image_from_f32_bytes(grad_bytes, width, height)
    except (KeyError, TypeError, ValueError) as exc:
        raise GuidanceTransportError(
            f"malformed guidance response: {exc}", step=step
        ) from exc
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise GuidanceProtocolError(
            "guidance service returned non-finite loss or gradient"
        )
    return GuidanceResult(loss=loss, dL_dimage=grad)


def embed_text(prompt: str, endpoint: str,
               timeout: float = DEFAULT_TIMEOUT,
               retries: int = DEFAULT_RETRIES) -> np.ndarray:
    """Text embedding over the wire; used only for conditioning vectors."""
    payload = _post_json(endpoint.rstrip("/") + "/v1/embed_text",
                         {"prompt": prompt}, timeout=timeout, retries=retries)
    return _unpack_embedding(payload)


def embed_image(image: np.ndarray, endpoint: str,
                timeout: float = DEFAULT_TIMEOUT,
                retries: int = DEFAULT_RETRIES) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[:2]
    body = {
        "width": width,
        "height": height,
        "image_b64": base64.b64encode(image_to_f32_bytes(image)).decode("ascii"),
    }
    payload = _post_json(endpoint.rstrip("/") + "/v1/embed_image", body,
                         timeout=timeout, retries=retries)
    return _unpack_embedding(payload)


def _unpack_embedding(payload: dict) -> np.ndarray:
    try:
        emb = np.asarray(payload["embedding"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise GuidanceTransportError(f"malformed embedding response: {exc}") from exc
    if emb.ndim != 1 or not np.all(np.isfinite(emb)):
        raise GuidanceProtocolError("embedding must be a finite 1-d vector")
    return emb


def _post_json(url: str, body: dict, timeout: float, retries: int,
               step: int | None = None) -> dict:
    """POST with retry on transport faults; 4xx is a hard protocol error."""
    import requests

    last_exc = None
    for _attempt in range(1 + max(0, retries)):
        try:
            resp = requests.post(url, json=body, timeout=timeout)
        except requests.RequestException as exc:
            last_exc = exc
            continue
        if 400 <= resp.status_code < 500:
            try:
                detail = resp.json().get("error", resp.text)
            except (ValueError, AttributeError):
                detail = resp.text
            raise GuidanceTransportError(
                f"guidance request rejected ({resp.status_code}): {detail}",
                step=step,
            )
        if resp.status_code != 200:
            last_exc = RuntimeError(f"HTTP {resp.status_code}")
            continue
        try:
            return resp.json()
        except ValueError as exc:
            last_exc = exc
            continue
    raise GuidanceTransportError(
        f"guidance service unreachable after {1 + max(0, retries)} attempts: "
        f"{last_exc}", step=step
    )
