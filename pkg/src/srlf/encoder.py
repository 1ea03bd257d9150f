"""Per-frame embedding backends.

Two interchangeable backends produce the 768-d vectors the classifier
consumes:

* pretrained_vl — a frozen contrastively-pretrained vision-language image
  encoder (vision transformer, base size, patch 32). The embedding is the
  pooled pre-projection hidden state, the only standard 768-wide output of
  that backbone; a config switch selects mean-of-patch-tokens instead.
  torch/transformers load lazily so the rest of the package works without
  them.

* synthetic — a deterministic generator for desk-scale tests: one center per
  (class, view) pair plus seeded gaussian noise. Centers are unit-norm random
  directions, rescaled if necessary so every pair of centers sits at least
  8*sigma apart, which keeps the classes linearly separable by construction.

Backends are immutable after construction and safe to call concurrently.
"""

from __future__ import annotations

import numpy as np

from .errors import DecodeError, EncoderError, EncoderInitError

KIND_PRETRAINED = "pretrained_vl"
KIND_SYNTHETIC = "synthetic"

DEFAULT_MODEL_ID = "openai/clip-vit-base-patch32"
IMAGE_SIZE = 224
# Published channel statistics for the contrastive pretraining corpus.
IMAGE_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
IMAGE_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)


class SyntheticBackend:
    """Deterministic embedding generator for (class, view) pairs."""

    kind = KIND_SYNTHETIC

    def __init__(self, embed_dim: int = 768, num_classes: int = 16,
                 num_views: int = 3, sigma: float = 0.1, center_seed: int = 0):
        if embed_dim <= 0 or num_classes <= 0 or num_views <= 0:
            raise EncoderInitError("embed_dim, num_classes and num_views must be positive")
        if sigma < 0:
            raise EncoderInitError("sigma must be non-negative")
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        self.num_views = num_views
        self.sigma = float(sigma)
        self.center_seed = center_seed

        centers = np.empty((num_classes, num_views, embed_dim), dtype=np.float64)
        for c in range(num_classes):
            for v in range(num_views):
                rng = np.random.default_rng([center_seed, c, v])
                direction = rng.normal(size=embed_dim)
                centers[c, v] = direction / np.linalg.norm(direction)
        if sigma > 0:
            flat = centers.reshape(-1, embed_dim)
            d2 = ((flat[:, None, :] - flat[None, :, :]) ** 2).sum(axis=2)
            np.fill_diagonal(d2, np.inf)
            min_dist = float(np.sqrt(d2.min()))
            if min_dist < 8 * sigma:
                centers *= (8 * sigma) / min_dist
        self.centers = centers.astype(np.float32)

    def encode(self, class_id: int, view_id: int, rng_seed: int) -> np.ndarray:
        if not 0 <= class_id < self.num_classes:
            raise EncoderError(f"class_id {class_id} outside [0, {self.num_classes})")
        if not 0 <= view_id < self.num_views:
            raise EncoderError(f"view_id {view_id} outside [0, {self.num_views})")
        center = self.centers[class_id, view_id]
        if self.sigma == 0:
            return center.copy()
        noise = np.random.default_rng(rng_seed).normal(scale=self.sigma,
                                                       size=self.embed_dim)
        return (center + noise).astype(np.float32)


class PretrainedBackend:
    """Frozen vision-language image encoder; weights load at construction."""

    kind = KIND_PRETRAINED

    def __init__(self, model_id_or_path: str = DEFAULT_MODEL_ID,
                 embed_dim: int = 768, pooling: str = "pooled"):
        if pooling not in ("pooled", "mean"):
            raise EncoderInitError(f"unknown pooling {pooling!r}")
        self.embed_dim = embed_dim
        self.pooling = pooling
        self.model_id_or_path = model_id_or_path
        try:
            import torch
            from transformers import CLIPVisionModel
        except ImportError as e:
            raise EncoderInitError(
                f"pretrained_vl backend needs torch and transformers: {e}") from e
        try:
            self._model = CLIPVisionModel.from_pretrained(model_id_or_path)
        except Exception as e:
            raise EncoderInitError(
                f"could not load encoder weights from {model_id_or_path!r}: {e}") from e
        self._model.eval()
        self._torch = torch
        hidden = self._model.config.hidden_size
        if hidden != embed_dim:
            raise EncoderInitError(
                f"backbone hidden size {hidden} != configured embed_dim {embed_dim}")

    def encode(self, image) -> np.ndarray:
        pixels = preprocess_image(image)
        torch = self._torch
        with torch.no_grad():
            out = self._model(pixel_values=torch.from_numpy(pixels[None]))
            if self.pooling == "pooled":
                vec = out.pooler_output[0]
            else:
                vec = out.last_hidden_state[0, 1:].mean(dim=0)
        return vec.cpu().numpy().astype(np.float32)


def preprocess_image(image) -> np.ndarray:
    """Resize (shortest side), center-crop and normalize to the backbone's
    native input: float32 CHW, 224x224, channel-standardized."""
    try:
        from PIL import Image
    except ImportError as e:
        raise DecodeError(f"image preprocessing needs Pillow: {e}") from e
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
            raise DecodeError(
                f"expected uint8 RGB array of shape (H, W, 3), got "
                f"{image.dtype} {image.shape}")
        pil = Image.fromarray(image)
    elif hasattr(image, "convert"):
        pil = image.convert("RGB")
    else:
        raise DecodeError(f"unsupported image type {type(image).__name__}")
    w, h = pil.size
    if w == 0 or h == 0:
        raise DecodeError("empty image")
    scale = IMAGE_SIZE / min(w, h)
    pil = pil.resize((max(IMAGE_SIZE, round(w * scale)),
                      max(IMAGE_SIZE, round(h * scale))), Image.BICUBIC)
    w, h = pil.size
    left = (w - IMAGE_SIZE) // 2
    top = (h - IMAGE_SIZE) // 2
    pil = pil.crop((left, top, left + IMAGE_SIZE, top + IMAGE_SIZE))
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    arr = (arr - IMAGE_MEAN) / IMAGE_STD
    return arr.transpose(2, 0, 1).copy()


def encode_image(backend, image) -> np.ndarray:
    """Embed one decoded frame. Deterministic for a fixed backend + image."""
    if backend.kind == KIND_SYNTHETIC:
        raise EncoderError(
            "the synthetic backend encodes (class, view) pairs, not pixels; "
            "use synthetic_encode")
    vec = backend.encode(image)
    _check_vector(vec, backend.embed_dim)
    return vec


def encode_batch(backend, images) -> list[np.ndarray]:
    """Embed a sequence of frames, order preserved.

    Runs image-by-image so each output is bit-identical to encode_image;
    per-image failures re-raise with the offending index attached.
    """
    images = list(images)
    if not images:
        raise EncoderError("encode_batch requires a non-empty sequence")
    out = []
    for i, image in enumerate(images):
        try:
            out.append(encode_image(backend, image))
        except EncoderError as e:
            raise type(e)(f"image at index {i}: {e}") from e
    return out


def synthetic_encode(backend: SyntheticBackend, class_id: int, view_id: int,
                     rng_seed: int) -> np.ndarray:
    """Center(class, view) plus seeded gaussian noise."""
    if backend.kind != KIND_SYNTHETIC:
        raise EncoderError("synthetic_encode requires a synthetic backend")
    vec = backend.encode(class_id, view_id, rng_seed)
    _check_vector(vec, backend.embed_dim)
    return vec


def _check_vector(vec: np.ndarray, embed_dim: int) -> None:
    if vec.shape != (embed_dim,):
        raise EncoderError(f"backend produced shape {vec.shape}, expected ({embed_dim},)")
    if not np.all(np.isfinite(vec)):
        raise EncoderError("backend produced non-finite values")
