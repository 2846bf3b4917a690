"""Small U-shaped noise predictor with exposed cross-attention.

Resolutions 64 -> 32 -> 16 with cross-attention over the prompt tokens at
the coarsest level. Every cross-attention block returns its softmax
probabilities so attention maps are available by construction, not via
hooks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import PromptEncoder
from .scenes import ClassVocabulary

__all__ = ["DenoiserConfig", "ToyDenoiser", "CrossAttention"]


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 64
    in_channels: int = 3
    widths: tuple[int, int, int] = (24, 48, 96)
    time_dim: int = 96
    cond_dim: int = 64
    heads: int = 4
    max_count: int = 10
    init_seed: int = 0

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        groups = math.gcd(8, cin)
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(math.gcd(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Multi-head cross-attention from pixels to prompt tokens.

    Returns the residual-updated features and the attention probabilities
    of shape [B, heads, H*W, K].
    """

    def __init__(self, channels: int, cond_dim: int, heads: int):
        super().__init__()
        if channels % heads != 0:
            raise ValueError("channels must divide evenly into heads")
        self.heads = heads
        self.head_dim = channels // heads
        self.norm = nn.GroupNorm(math.gcd(8, channels), channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Linear(cond_dim, channels)
        self.to_v = nn.Linear(cond_dim, channels)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(
        self,
        x: torch.Tensor,
        tokens: torch.Tensor,
        token_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        B, C, H, W = x.shape
        q = self.to_q(self.norm(x)).reshape(B, self.heads, self.head_dim, H * W).transpose(2, 3)
        k = self.to_k(tokens).reshape(B, -1, self.heads, self.head_dim).permute(0, 2, 1, 3)
        v = self.to_v(tokens).reshape(B, -1, self.heads, self.head_dim).permute(0, 2, 1, 3)
        logits = q @ k.transpose(2, 3) / math.sqrt(self.head_dim)  # [B, heads, HW, K]
        if token_mask is not None:
            logits = logits.masked_fill(~token_mask[:, None, None, :], float("-inf"))
        probs = logits.softmax(dim=-1)
        out = (probs @ v).transpose(2, 3).reshape(B, C, H, W)
        return x + self.proj(out), probs


class ToyDenoiser(nn.Module):
    """Noise predictor; owns the prompt encoder so checkpoints are one file."""

    def __init__(self, vocab: ClassVocabulary, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = config or DenoiserConfig()
        cfg = self.config
        torch.manual_seed(cfg.init_seed)  # reproducible init
        self.prompt_encoder = PromptEncoder(vocab, embed_dim=cfg.cond_dim, max_count=cfg.max_count)
        w0, w1, w2 = cfg.widths
        td = cfg.time_dim

        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.stem = nn.Conv2d(cfg.in_channels, w0, 3, padding=1)
        self.down0 = ResBlock(w0, w0, td)
        self.pool0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.down1 = ResBlock(w1, w1, td)
        self.pool1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)

        self.mid1 = ResBlock(w2, w2, td)
        self.attn1 = CrossAttention(w2, cfg.cond_dim, cfg.heads)
        self.mid2 = ResBlock(w2, w2, td)
        self.attn2 = CrossAttention(w2, cfg.cond_dim, cfg.heads)
        self.mid3 = ResBlock(w2, w2, td)

        self.up1_conv = nn.Conv2d(w2, w1, 3, padding=1)
        self.up1 = ResBlock(2 * w1, w1, td)
        self.up0_conv = nn.Conv2d(w1, w0, 3, padding=1)
        self.up0 = ResBlock(2 * w0, w0, td)
        self.out_norm = nn.GroupNorm(math.gcd(8, w0), w0)
        self.out_conv = nn.Conv2d(w0, cfg.in_channels, 3, padding=1)

    @property
    def vocab(self) -> ClassVocabulary:
        return self.prompt_encoder.vocab

    @property
    def attn_resolution(self) -> int:
        return self.config.image_size // 4

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        tokens: torch.Tensor,
        token_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        temb = self.time_mlp(_timestep_embedding(t, self.config.time_dim).to(x.dtype))

        h0 = self.down0(self.stem(x), temb)
        h1 = self.down1(self.pool0(h0), temb)
        h = self.pool1(h1)

        h = self.mid1(h, temb)
        h, probs1 = self.attn1(h, tokens, token_mask)
        h = self.mid2(h, temb)
        h, probs2 = self.attn2(h, tokens, token_mask)
        h = self.mid3(h, temb)

        h = self.up1_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up1(torch.cat([h, h1], dim=1), temb)
        h = self.up0_conv(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.up0(torch.cat([h, h0], dim=1), temb)
        eps = self.out_conv(F.silu(self.out_norm(h)))
        return eps, [probs1, probs2]
