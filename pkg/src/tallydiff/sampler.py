"""Deterministic sampling loops with trajectory recording.

All randomness enters through the seeded initial noise; every step after
that is a pure function, so interrupted runs resume bit-exactly and the
correction pass can replay the detection pass from the recorded latents.
"""

from __future__ import annotations

import torch

from .denoiser import ToyDenoiser
from .latents import AttentionMap, Conditioning, Latent, LatentTrajectory
from .schedule import NoiseSchedule, ddim_step

__all__ = [
    "initial_noise",
    "predict_noise",
    "denoise_with_attention",
    "sample_trajectory",
    "finish_denoising",
]


def initial_noise(
    seed: int, shape: tuple[int, int, int], step: int, dtype: torch.dtype = torch.float32
) -> Latent:
    """Seeded standard Gaussian latent stamped at ``step``.

    Always drawn in float32 so the same seed yields the same noise
    regardless of the working dtype.
    """
    gen = torch.Generator().manual_seed(seed)
    grid = torch.randn(shape, generator=gen, dtype=torch.float32).to(dtype)
    return Latent(grid=grid, step=step)


def _run_model(
    z_grid: torch.Tensor, cond: Conditioning, t: int, model: ToyDenoiser
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    if z_grid.ndim != 3:
        raise ValueError(f"latent grid must be [C, H, W], got {tuple(z_grid.shape)}")
    tokens = cond.token_embeddings.to(z_grid.dtype)
    if tokens.shape[1] != model.config.cond_dim:
        raise ValueError(
            f"conditioning width {tokens.shape[1]} != model cond_dim {model.config.cond_dim}"
        )
    t_tensor = torch.tensor([t], dtype=torch.long, device=z_grid.device)
    eps, attn = model(z_grid[None], t_tensor, tokens[None])
    return eps[0], attn


def predict_noise(z_t: Latent, cond: Conditioning, t: int, model: ToyDenoiser) -> torch.Tensor:
    """Noise estimate only, no gradient graph."""
    if z_t.step != t:
        raise ValueError(f"latent is at step {z_t.step}, expected {t}")
    with torch.no_grad():
        eps, _ = _run_model(z_t.grid, cond, t, model)
    return eps


def denoise_with_attention(
    z_t: Latent, cond: Conditioning, t: int, model: ToyDenoiser
) -> tuple[torch.Tensor, AttentionMap]:
    """Noise estimate plus the collapsed per-token attention map.

    Attention probabilities from every cross-attention layer (all at the
    coarsest resolution) are averaged over heads and layers, then each
    token's spatial grid is renormalized to sum to 1.
    """
    if z_t.step != t:
        raise ValueError(f"latent is at step {z_t.step}, expected {t}")
    eps, attn_layers = _run_model(z_t.grid, cond, t, model)
    res = model.attn_resolution
    stacked = torch.stack([a[0] for a in attn_layers])  # [L, heads, HW, K]
    mean_probs = stacked.mean(dim=(0, 1))  # [HW, K]
    per_token: dict[int, torch.Tensor] = {}
    for tok in cond.token_classes:
        grid = mean_probs[:, tok].reshape(res, res)
        per_token[tok] = grid / grid.sum()
    class_tokens = {cls: tok for tok, cls in cond.token_classes.items() if cls is not None}
    return eps, AttentionMap(per_token=per_token, step=t, class_tokens=class_tokens)


def sample_trajectory(
    seed: int,
    cond: Conditioning,
    schedule: NoiseSchedule,
    t_mid: int,
    model: ToyDenoiser,
    dtype: torch.dtype = torch.float32,
) -> tuple[Latent, LatentTrajectory]:
    """Denoise from pure noise down to ``t_mid``, recording every latent."""
    T = schedule.num_steps
    if not 1 <= t_mid < T:
        raise ValueError(f"t_mid={t_mid} outside [1, {T - 1}]")
    shape = (model.config.in_channels, model.config.image_size, model.config.image_size)
    z = initial_noise(seed, shape, step=T, dtype=dtype)
    entries = {T: z.clone()}
    for t in range(T, t_mid, -1):
        eps = predict_noise(z, cond, t, model)
        z = ddim_step(z, eps, t, schedule)
        entries[z.step] = z.clone()
    trajectory = LatentTrajectory(entries=entries, seed=seed)
    return entries[t_mid].clone(), trajectory


def finish_denoising(
    z_start: Latent, cond: Conditioning, schedule: NoiseSchedule, model: ToyDenoiser
) -> Latent:
    """Iterate plain reverse steps from ``z_start`` down to step 0."""
    if z_start.step < 1:
        raise ValueError(f"z_start must be at step >= 1, got {z_start.step}")
    z = z_start.clone()
    for t in range(z_start.step, 0, -1):
        eps = predict_noise(z, cond, t, model)
        z = ddim_step(z, eps, t, schedule)
    return z
