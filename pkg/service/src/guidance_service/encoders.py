"""Encoder backends: stub, procedural random-projection, and real CLIP.

Every backend exposes the same three operations:

  embed_text(prompt)          -> (512,) float64, unit norm
  embed_image(image)          -> (512,) float64, unit norm
  guidance(image, prompt)     -> (loss, dL/dimage) where loss is the negative
                                 cosine similarity between the image and text
                                 embeddings and the gradient is the exact
                                 derivative of that loss with respect to the
                                 submitted pixels, resize chain included.

Images arrive as (H, W, 3) float64 arrays in the caller's resolution; resizing
to the encoder's input resolution happens here, inside the differentiated
chain, so clients stay resolution-agnostic.
"""

from __future__ import annotations

import hashlib

import numpy as np

EMBED_DIM = 512

# channel statistics used by the procedural backend's input normalization
# (the familiar image-encoder constants, reused verbatim)
_CHANNEL_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
_CHANNEL_STD = np.array([0.26862954, 0.26130258, 0.27577711])

_PROJECTION_SEED = 0x6775696461


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        out = np.zeros(len(v))
        out[0] = 1.0
        return out
    return v / n


def _text_rng(prompt: str) -> np.random.Generator:
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    words = np.frombuffer(digest, dtype="<u4")
    return np.random.default_rng(np.random.SeedSequence(words.tolist()))


def _resize_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Dense (n_dst, n_src) bilinear interpolation operator for one axis.

    Output sample centers map to source coordinates (i + 0.5) * n_src / n_dst
    - 0.5 with edge clamping, so resize is linear in the pixels and its
    adjoint is the plain transpose.
    """
    out = np.zeros((n_dst, n_src))
    coords = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    lo = np.clip(np.floor(coords).astype(int), 0, n_src - 1)
    hi = np.clip(lo + 1, 0, n_src - 1)
    frac = np.clip(coords - np.floor(coords), 0.0, 1.0)
    rows = np.arange(n_dst)
    np.add.at(out, (rows, lo), 1.0 - frac)
    np.add.at(out, (rows, hi), frac)
    return out


class StubEncoder:
    """No model: fixed unit embeddings, zero loss, zero gradients."""

    model_name = "stub"

    def embed_text(self, prompt: str) -> np.ndarray:
        out = np.zeros(EMBED_DIM)
        out[0] = 1.0
        return out

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        out = np.zeros(EMBED_DIM)
        out[1] = 1.0
        return out

    def guidance(self, image: np.ndarray, prompt: str):
        image = np.asarray(image, dtype=np.float64)
        return 0.0, np.zeros_like(image)


class ProceduralEncoder:
    """Deterministic differentiable featurizer with no learned weights.

    Pipeline: bilinear resize to an internal resolution, channel
    normalization, a fixed Gaussian random projection to 512 dims, then unit
    normalization. Text prompts hash to unit vectors. Semantics are
    meaningless by construction, but the map is smooth, deterministic, and
    its pixel gradient is exact, which is all the protocol tests need.
    """

    def __init__(self, resolution: int = 64, seed: int = _PROJECTION_SEED):
        self.resolution = int(resolution)
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        n_in = 3 * self.resolution * self.resolution
        self._projection = rng.standard_normal((EMBED_DIM, n_in)) / np.sqrt(n_in)
        self._resize_cache: dict[tuple[int, int], np.ndarray] = {}
        self.model_name = f"procedural-rp{self.resolution}"

    # -- pieces ------------------------------------------------------------

    def _axis_op(self, n_src: int) -> np.ndarray:
        key = (n_src, self.resolution)
        op = self._resize_cache.get(key)
        if op is None:
            op = _resize_matrix(n_src, self.resolution)
            self._resize_cache[key] = op
        return op

    def _resize(self, image: np.ndarray) -> np.ndarray:
        ry = self._axis_op(image.shape[0])
        rx = self._axis_op(image.shape[1])
        tmp = np.tensordot(ry, image, axes=(1, 0))       # (R, W, 3)
        return np.einsum("cw,rwk->rck", rx, tmp)         # (R, R, 3)

    def _resize_adjoint(self, grad_resized: np.ndarray,
                        src_shape: tuple[int, int]) -> np.ndarray:
        ry = self._axis_op(src_shape[0])
        rx = self._axis_op(src_shape[1])
        tmp = np.einsum("cw,rck->rwk", rx, grad_resized)  # (R, W, 3)
        return np.tensordot(ry.T, tmp, axes=(1, 0))       # (H, W, 3)

    def _features(self, image: np.ndarray) -> np.ndarray:
        z = (self._resize(image) - _CHANNEL_MEAN) / _CHANNEL_STD
        return self._projection @ z.ravel()

    # -- protocol operations ----------------------------------------------

    def embed_text(self, prompt: str) -> np.ndarray:
        return _unit(_text_rng(prompt).standard_normal(EMBED_DIM))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        return _unit(self._features(image))

    def guidance(self, image: np.ndarray, prompt: str):
        image = np.asarray(image, dtype=np.float64)
        text = self.embed_text(prompt)
        y = self._features(image)
        norm = float(np.linalg.norm(y))
        if norm < 1e-9:
            # constant image hitting the exact channel means; measure-zero
            return 0.0, np.zeros_like(image)
        e = y / norm
        loss = -float(e @ text)
        d_y = (-text + e * (e @ text)) / norm
        d_z = (self._projection.T @ d_y).reshape(
            self.resolution, self.resolution, 3)
        grad = self._resize_adjoint(d_z / _CHANNEL_STD, image.shape[:2])
        return loss, grad


class ClipEncoder:
    """Real image--text encoder; torch and transformers load lazily.

    Construction fails with the underlying error when the checkpoint cannot
    be resolved (e.g. no local weights and no network); callers decide
    whether that is fatal or a reason to fall back.
    """

    def __init__(self, checkpoint: str = "openai/clip-vit-base-patch32",
                 device: str = "cpu"):
        import torch
        from transformers import CLIPModel, CLIPTokenizer

        self._torch = torch
        self.model = CLIPModel.from_pretrained(checkpoint).to(device).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(checkpoint)
        self.device = device
        self.model_name = checkpoint
        self._size = int(self.model.config.vision_config.image_size)
        self._mean = torch.tensor(_CHANNEL_MEAN, dtype=torch.float32,
                                  device=device).view(1, 3, 1, 1)
        self._std = torch.tensor(_CHANNEL_STD, dtype=torch.float32,
                                 device=device).view(1, 3, 1, 1)

    def _image_features(self, pixels):
        """(H, W, 3) float tensor -> (512,) unit-norm tensor, grad-capable."""
        torch = self._torch
        x = pixels.permute(2, 0, 1).unsqueeze(0)
        x = torch.nn.functional.interpolate(
            x, size=(self._size, self._size), mode="bilinear",
            align_corners=False)
        x = (x - self._mean) / self._std
        feats = self.model.get_image_features(pixel_values=x)[0]
        return feats / feats.norm()

    def embed_text(self, prompt: str) -> np.ndarray:
        torch = self._torch
        tokens = self.tokenizer([prompt], return_tensors="pt", padding=True,
                                truncation=True).to(self.device)
        with torch.no_grad():
            feats = self.model.get_text_features(**tokens)[0]
            feats = feats / feats.norm()
        return feats.cpu().double().numpy()

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        pixels = torch.tensor(np.asarray(image), dtype=torch.float32,
                              device=self.device)
        with torch.no_grad():
            feats = self._image_features(pixels)
        return feats.cpu().double().numpy()

    def guidance(self, image: np.ndarray, prompt: str):
        torch = self._torch
        text = torch.tensor(self.embed_text(prompt), dtype=torch.float32,
                            device=self.device)
        pixels = torch.tensor(np.asarray(image), dtype=torch.float32,
                              device=self.device, requires_grad=True)
        loss = -(self._image_features(pixels) * text).sum()
        loss.backward()
        return float(loss.item()), pixels.grad.cpu().double().numpy()


def load_encoder(kind: str, checkpoint: str = "openai/clip-vit-base-patch32",
                 device: str = "cpu"):
    if kind == "stub":
        return StubEncoder()
    if kind == "procedural":
        return ProceduralEncoder()
    if kind == "clip":
        return ClipEncoder(checkpoint=checkpoint, device=device)
    raise ValueError(f"unknown encoder kind {kind!r}")
