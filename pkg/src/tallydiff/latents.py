"""Latent containers, attention maps, conditioning, and the latent file format.

Latent file layout (little-endian, documented here as the reference):

    offset  size  field
    0       4     magic ``b"TDLT"``
    4       1     format version (1)
    5       1     dtype code (0 = float32, 1 = float64)
    6       1     ndim
    7       1     reserved (0)
    8       4     step (int32)
    12      4*n   dims (int32 each, n = ndim)
    ...           raw array bytes, C order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

__all__ = [
    "Latent",
    "LatentTrajectory",
    "AttentionMap",
    "Conditioning",
    "save_latent",
    "load_latent",
    "decode_latent",
    "encode_image",
]

_MAGIC = b"TDLT"
_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Latent:
    """A working grid at a given reverse-process step."""

    grid: torch.Tensor  # [C, H, W]
    step: int

    def clone(self) -> "Latent":
        return Latent(grid=self.grid.detach().clone(), step=self.step)


@dataclass
class LatentTrajectory:
    """Latents recorded during the detection pass, keyed by step."""

    entries: dict[int, Latent]
    seed: int

    def __getitem__(self, t: int) -> Latent:
        if t not in self.entries:
            raise KeyError(f"trajectory has no entry for step {t}")
        return self.entries[t]

    def __contains__(self, t: int) -> bool:
        return t in self.entries

    def steps(self) -> list[int]:
        return sorted(self.entries)


@dataclass
class AttentionMap:
    """Per-token spatial cross-attention grids at one step.

    Each token's grid is non-negative and normalized to sum to 1 over the
    spatial positions. ``class_tokens`` maps class ids back to the token
    index carrying that class, mirroring the conditioning.
    """

    per_token: dict[int, torch.Tensor]  # token index -> [h_attn, w_attn]
    step: int
    class_tokens: dict[int, int] = field(default_factory=dict)

    def for_class(self, class_id: int) -> torch.Tensor:
        if class_id not in self.class_tokens:
            raise KeyError(f"no token carries class {class_id}")
        return self.per_token[self.class_tokens[class_id]]


@dataclass
class Conditioning:
    """Encoded prompt: one embedding row per token.

    ``token_classes[i]`` is the class id carried by token ``i``, or None
    for context tokens (background).
    """

    token_embeddings: torch.Tensor  # [num_tokens, embed_dim]
    token_classes: dict[int, int | None]

    def class_token(self, class_id: int) -> int:
        for tok, cls in self.token_classes.items():
            if cls == class_id:
                return tok
        raise KeyError(f"no token carries class {class_id}")

    @property
    def class_ids(self) -> list[int]:
        return sorted(c for c in self.token_classes.values() if c is not None)


def save_latent(path, latent: Latent) -> None:
    arr = latent.grid.detach().cpu().numpy()
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float32)
    code = _DTYPE_CODES[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BBBB", 1, code, arr.ndim, 0))
        fh.write(struct.pack("<i", latent.step))
        fh.write(struct.pack(f"<{arr.ndim}i", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_latent(path) -> Latent:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a latent file (bad magic)")
        version, code, ndim, _ = struct.unpack("<BBBB", fh.read(4))
        if version != 1:
            raise ValueError(f"{path}: unsupported latent file version {version}")
        if code not in _DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        (step,) = struct.unpack("<i", fh.read(4))
        dims = struct.unpack(f"<{ndim}i", fh.read(4 * ndim))
        raw = fh.read()
    arr = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(dims).copy()
    return Latent(grid=torch.from_numpy(arr), step=step)


def decode_latent(z0: Latent) -> torch.Tensor:
    """Map a clean latent to a pixel grid in [0, 1] (pixel-space model:
    the decoder is an affine rescale plus clamp)."""
    if z0.step != 0:
        raise ValueError(f"decode expects a step-0 latent, got step {z0.step}")
    return torch.clamp((z0.grid + 1.0) / 2.0, 0.0, 1.0)


def encode_image(pixels: torch.Tensor) -> Latent:
    """Inverse of :func:`decode_latent` for in-range images."""
    return Latent(grid=pixels * 2.0 - 1.0, step=0)
