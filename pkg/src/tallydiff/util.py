"""Shared helpers: determinism setup, seed derivation, image conversions."""

from __future__ import annotations

import hashlib

import numpy as np
import torch

__all__ = [
    "enable_determinism",
    "derive_seed",
    "to_uint8_image",
    "to_float_image",
    "image_to_model_range",
    "save_png",
    "load_png",
]


def enable_determinism(seed: int = 0) -> None:
    """Put torch into fully deterministic mode and seed the global RNGs.

    All library code draws randomness from explicit, locally seeded
    generators; this only pins down anything that might still touch the
    global state (e.g. dropout-free module init in user scripts).
    """
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    np.random.seed(seed % (2**32))


def derive_seed(*parts: int | str) -> int:
    """Derive a stable 63-bit seed from a tuple of ints/strings.

    Uses SHA-256 so results do not depend on PYTHONHASHSEED or platform.
    """
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


def to_uint8_image(image: np.ndarray | torch.Tensor) -> np.ndarray:
    """Convert a float CHW image in [0, 1] to a uint8 HWC array.

    uint8 HWC is the canonical representation the counter operates on and
    the byte-exact form persisted to PNG. Passes uint8 HWC through as-is.
    """
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    if image.dtype == np.uint8:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected HWC uint8 image, got shape {image.shape}")
        return image
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected CHW float image, got shape {image.shape}")
    arr = np.clip(image, 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def to_float_image(image_u8: np.ndarray) -> np.ndarray:
    """uint8 HWC -> float32 CHW in [0, 1]."""
    if image_u8.dtype != np.uint8 or image_u8.ndim != 3:
        raise ValueError(f"expected HWC uint8 image, got {image_u8.dtype} {image_u8.shape}")
    return (image_u8.astype(np.float32) / 255.0).transpose(2, 0, 1)


def image_to_model_range(image_u8: np.ndarray) -> torch.Tensor:
    """uint8 HWC -> float32 CHW tensor in [-1, 1] (diffusion working range)."""
    return torch.from_numpy(to_float_image(image_u8)) * 2.0 - 1.0


def save_png(path, image_u8: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8_image(image_u8), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
