"""Attention-space gradient guidance for the correction pass.

The correction pass replays the recorded trajectory from the same initial
noise. At each step above ``t_mid`` it scores the active class's
cross-attention inside the correction mask (smoothed, top-k selected,
signed), takes a gradient step on the latent against that score, advances
one deterministic reverse step, and then blends the result with the saved
trajectory so everything outside the mask is preserved bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .counting import CorrectionPlan
from .denoiser import ToyDenoiser
from .latents import AttentionMap, Conditioning, Latent, LatentTrajectory
from .sampler import denoise_with_attention
from .schedule import NoiseSchedule, ddim_step
from .util import derive_seed

__all__ = [
    "GuidanceConfig",
    "LossEntry",
    "StepEntry",
    "GuidanceTrace",
    "GuidanceError",
    "STRATEGIES",
    "gaussian_smooth",
    "resample_mask",
    "guidance_loss",
    "guided_step",
    "correct_single_class",
]

STRATEGIES = ("topk", "bottomk", "random", "all")


@dataclass(frozen=True)
class GuidanceConfig:
    """Knobs of the correction pass.

    ``top_percent`` is the percentage of masked attention cells entering
    the loss; ``sigma_scale`` is the gradient step size on the latent;
    ``smooth_sigma`` is the Gaussian blur std (attention-grid pixels)
    applied before scoring; guidance runs from step T down to ``t_mid``.
    """

    top_percent: float = 50.0
    sigma_scale: float = 60.0
    smooth_sigma: float = 1.0
    inner_iters: int = 1
    t_mid: int = 30
    strategy: str = "topk"
    random_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.top_percent <= 100.0:
            raise ValueError(f"top_percent must be in (0, 100], got {self.top_percent}")
        if self.sigma_scale < 0:
            raise ValueError("sigma_scale must be >= 0")
        if self.smooth_sigma < 0:
            raise ValueError("smooth_sigma must be >= 0")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        return cls(**d)


class GuidanceError(RuntimeError):
    """Non-finite gradient or structurally impossible guidance step."""


@dataclass
class LossEntry:
    step: int
    class_id: int
    strategy: str
    selected: int
    support: int
    loss: float
    grad_norm: float = 0.0
    random_seed: int | None = None
    warning: str | None = None


@dataclass
class StepEntry:
    step: int
    losses: list[LossEntry] = field(default_factory=list)
    blended: bool = True


@dataclass
class GuidanceTrace:
    """Per-step observability for a correction run."""

    class_id: int | None
    config: dict
    steps: list[StepEntry] = field(default_factory=list)

    def loss_values(self) -> list[float]:
        return [entry.loss for step in self.steps for entry in step.losses]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def gaussian_smooth(grid: torch.Tensor, smooth_sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with reflected borders; preserves total mass.

    ``smooth_sigma = 0`` is the identity. The kernel is the sampled
    Gaussian truncated at four standard deviations, matching the usual
    dense sampled-kernel convolution. Differentiable.
    """
    if smooth_sigma < 0:
        raise ValueError("smooth_sigma must be >= 0")
    if smooth_sigma == 0:
        return grid
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {tuple(grid.shape)}")
    radius = max(1, int(round(4.0 * smooth_sigma)))
    radius = min(radius, min(grid.shape) - 1)
    offsets = torch.arange(-radius, radius + 1, dtype=torch.float64)
    kernel = torch.exp(-(offsets**2) / (2.0 * smooth_sigma**2))
    kernel = (kernel / kernel.sum()).to(grid.dtype)

    def conv1d_sym(x: torch.Tensor, dim: int) -> torch.Tensor:
        # symmetric (edge-inclusive) padding keeps the DC component exact
        front = x.narrow(dim, 0, radius).flip(dim)
        back = x.narrow(dim, x.shape[dim] - radius, radius).flip(dim)
        padded = torch.cat([front, x, back], dim=dim)
        windows = padded.unfold(dim, 2 * radius + 1, 1)
        return (windows * kernel).sum(dim=-1)

    return conv1d_sym(conv1d_sym(grid, 0), 1)


def resample_mask(mask: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Area-average a binary mask to a coarser grid, threshold at 0.5."""
    H, W = mask.shape
    h, w = out_shape
    if H % h or W % w:
        raise ValueError(f"mask shape {mask.shape} not divisible by target {out_shape}")
    blocks = mask.astype(np.float64).reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    return blocks >= 0.5


def _selection_size(support: int, top_percent: float) -> int:
    return max(1, math.ceil(top_percent / 100.0 * support))


def guidance_loss(
    attn: AttentionMap, plan: CorrectionPlan, cfg: GuidanceConfig
) -> tuple[torch.Tensor, LossEntry]:
    """Signed selected-mean of the masked, smoothed attention map.

    Positive sign (removal) makes descending the gradient suppress
    attention inside the mask; negative sign (addition) amplifies it.
    """
    active = plan.active_classes()
    if len(active) != 1:
        raise ValueError(f"guidance_loss needs exactly one active class, got {active}")
    class_id = active[0]
    correction = plan.per_class[class_id]
    grid = attn.for_class(class_id)
    mask = resample_mask(correction.mask, tuple(grid.shape))
    support = int(mask.sum())
    if support == 0:
        entry = LossEntry(
            step=attn.step,
            class_id=class_id,
            strategy=cfg.strategy,
            selected=0,
            support=0,
            loss=0.0,
            warning="correction mask has no support at attention resolution",
        )
        return torch.zeros((), dtype=grid.dtype), entry

    smoothed = gaussian_smooth(grid, cfg.smooth_sigma)
    values = smoothed[torch.from_numpy(mask)]
    seed = None
    if cfg.strategy == "all":
        selected = values
    else:
        k = _selection_size(support, cfg.top_percent)
        if cfg.strategy == "topk":
            selected = torch.topk(values, k).values
        elif cfg.strategy == "bottomk":
            selected = torch.topk(values, k, largest=False).values
        else:  # random
            seed = derive_seed(cfg.random_seed, attn.step, class_id)
            gen = torch.Generator().manual_seed(seed)
            idx = torch.randperm(values.numel(), generator=gen)[:k]
            selected = values[idx]
    loss = float(correction.sign) * selected.mean()
    entry = LossEntry(
        step=attn.step,
        class_id=class_id,
        strategy=cfg.strategy,
        selected=int(selected.numel()),
        support=support,
        loss=float(loss.detach()),
        random_seed=seed,
    )
    return loss, entry


def _latent_mask(plan: CorrectionPlan, shape: tuple[int, int]) -> torch.Tensor:
    union = plan.union_mask()
    if union.shape != shape:
        union = resample_mask(union, shape)
    return torch.from_numpy(union)


def guided_step(
    z_t: Latent,
    cond: Conditioning,
    t: int,
    plan: CorrectionPlan,
    trajectory: LatentTrajectory,
    schedule: NoiseSchedule,
    cfg: GuidanceConfig,
    model: ToyDenoiser,
) -> tuple[Latent, StepEntry]:
    """One guided reverse step: gradient update(s), DDIM step, then blend."""
    if z_t.step != t:
        raise ValueError(f"latent is at step {z_t.step}, expected {t}")
    if not cfg.t_mid < t <= schedule.num_steps:
        raise ValueError(f"guided step t={t} outside ({cfg.t_mid}, {schedule.num_steps}]")
    if (t - 1) not in trajectory:
        raise GuidanceError(f"trajectory is missing the blend target at step {t - 1}")

    target = trajectory[t - 1]
    entry = StepEntry(step=t)
    active = plan.active_classes()
    mask_lat = _latent_mask(plan, z_t.grid.shape[-2:])
    if not active or not bool(mask_lat.any()):
        entry.losses.append(
            LossEntry(
                step=t, class_id=active[0] if active else -1, strategy=cfg.strategy,
                selected=0, support=0, loss=0.0,
                warning="empty correction plan; step copied from trajectory",
            )
        )
        return target.clone(), entry

    z = z_t.grid.detach()
    eps = None
    for _ in range(cfg.inner_iters):
        z_req = z.clone().requires_grad_(True)
        eps, attn = denoise_with_attention(Latent(grid=z_req, step=t), cond, t, model)
        loss, loss_entry = guidance_loss(attn, plan, cfg)
        if loss.requires_grad:
            (grad,) = torch.autograd.grad(loss, z_req)
            if not torch.isfinite(grad).all():
                raise GuidanceError(
                    f"non-finite guidance gradient at step {t} "
                    f"(loss={loss_entry.loss}, class={loss_entry.class_id})"
                )
            loss_entry.grad_norm = float(grad.norm())
            z = z_req.detach() - cfg.sigma_scale * grad
        else:
            z = z_req.detach()
        entry.losses.append(loss_entry)

    z_prev = ddim_step(Latent(grid=z, step=t), eps.detach(), t, schedule)
    blended = torch.where(mask_lat, z_prev.grid, target.grid)
    return Latent(grid=blended, step=t - 1), entry


def correct_single_class(
    seed: int,
    cond: Conditioning,
    plan: CorrectionPlan,
    trajectory: LatentTrajectory,
    schedule: NoiseSchedule,
    cfg: GuidanceConfig,
    model: ToyDenoiser,
) -> tuple[Latent, GuidanceTrace]:
    """Replay from the shared initial noise with guidance down to ``t_mid``."""
    if trajectory.seed != seed:
        raise ValueError(f"trajectory was recorded with seed {trajectory.seed}, not {seed}")
    T = schedule.num_steps
    if cfg.t_mid >= T:
        raise ValueError(f"t_mid={cfg.t_mid} must be < T={T}")
    active = plan.active_classes()
    trace = GuidanceTrace(class_id=active[0] if len(active) == 1 else None, config=cfg.to_dict())
    z = trajectory[T].clone()
    for t in range(T, cfg.t_mid, -1):
        z, step_entry = guided_step(z, cond, t, plan, trajectory, schedule, cfg, model)
        trace.steps.append(step_entry)
    return z, trace
