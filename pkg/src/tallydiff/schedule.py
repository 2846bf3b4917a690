"""Noise schedules and the elementary deterministic sampling updates.

Step convention: ``t`` runs from ``T`` (pure noise) down to ``0`` (clean).
``alpha_bar[t]`` is the cumulative signal coefficient at step ``t``, so
``alpha_bar[0] == 1`` and ``alpha_bar[T]`` is close to zero. The one-step
predictor reuses the same cumulative coefficients (``alpha_prime``), kept
as a separate field so it stays an explicit knob.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .latents import Latent

__all__ = [
    "ScheduleProfile",
    "NoiseSchedule",
    "make_schedule",
    "forward_noise",
    "predict_x0",
    "ddim_step",
]

_BETA_CLIP = (1e-4, 0.999)


@dataclass(frozen=True)
class ScheduleProfile:
    """Describes how the per-step betas are generated.

    ``linear`` interpolates beta between ``beta_start`` and ``beta_end``
    and rescales by ``reference_steps / T`` so that the terminal noise
    level is roughly independent of the step count. ``cosine`` is the
    squared-cosine profile with the usual small-offset cap.
    """

    kind: str = "linear"
    beta_start: float = 0.02
    beta_end: float = 0.13
    reference_steps: int = 40

    def betas(self, num_steps: int) -> np.ndarray:
        if self.kind == "linear":
            base = np.linspace(self.beta_start, self.beta_end, num_steps, dtype=np.float64)
            scaled = base * (self.reference_steps / num_steps)
            return np.clip(scaled, *_BETA_CLIP)
        if self.kind == "cosine":
            s = 0.008
            grid = np.arange(num_steps + 1, dtype=np.float64) / num_steps
            f = np.cos((grid + s) / (1 + s) * math.pi / 2.0) ** 2
            betas = 1.0 - f[1:] / f[:-1]
            return np.clip(betas, *_BETA_CLIP)
        raise ValueError(f"unknown schedule profile kind: {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "reference_steps": self.reference_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleProfile":
        return cls(**d)


@dataclass
class NoiseSchedule:
    """Cumulative noise coefficients for a ``T``-step reverse process.

    ``alpha_bar`` and ``alpha_prime`` have ``T + 1`` entries indexed by
    step, all in ``(0, 1]``, monotonically non-increasing, with
    ``alpha_bar[0] > 0.99`` and ``alpha_bar[T] < 0.05``.
    """

    num_steps: int
    alpha_bar: np.ndarray
    alpha_prime: np.ndarray
    profile: ScheduleProfile = field(default_factory=ScheduleProfile)

    def validate(self) -> None:
        T = self.num_steps
        for name, arr in (("alpha_bar", self.alpha_bar), ("alpha_prime", self.alpha_prime)):
            if arr.shape != (T + 1,):
                raise ValueError(f"{name} must have {T + 1} entries, got {arr.shape}")
            if not np.all((arr > 0.0) & (arr <= 1.0)):
                raise ValueError(f"{name} entries must lie in (0, 1]")
            if not np.all(np.diff(arr) <= 0.0):
                raise ValueError(f"{name} must be monotonically non-increasing")
        if self.alpha_bar[0] <= 0.99:
            raise ValueError(f"alpha_bar[0] = {self.alpha_bar[0]:.4f} is not near-clean (> 0.99)")
        if self.alpha_bar[T] >= 0.05:
            raise ValueError(f"alpha_bar[T] = {self.alpha_bar[T]:.4f} is not near-noise (< 0.05)")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.profile.to_dict()).encode())
        h.update(self.alpha_bar.tobytes())
        h.update(self.alpha_prime.tobytes())
        return h.hexdigest()[:16]


def make_schedule(num_steps: int, profile: ScheduleProfile | None = None) -> NoiseSchedule:
    """Build a validated schedule with ``num_steps`` reverse steps."""
    if num_steps < 2:
        raise ValueError(f"num_steps must be >= 2, got {num_steps}")
    profile = profile or ScheduleProfile()
    betas = profile.betas(num_steps)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    schedule = NoiseSchedule(
        num_steps=num_steps,
        alpha_bar=alpha_bar,
        alpha_prime=alpha_bar.copy(),
        profile=profile,
    )
    schedule.validate()
    return schedule


def _check_step(z_t: Latent, t: int, schedule: NoiseSchedule) -> None:
    if not 1 <= t <= schedule.num_steps:
        raise ValueError(f"step t={t} outside [1, {schedule.num_steps}]")
    if z_t.step != t:
        raise ValueError(f"latent is at step {z_t.step}, expected {t}")


def forward_noise(x0: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule) -> Latent:
    """Closed-form forward noising of a clean grid to step ``t``."""
    if not 0 <= t <= schedule.num_steps:
        raise ValueError(f"step t={t} outside [0, {schedule.num_steps}]")
    a = float(schedule.alpha_bar[t])
    grid = math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eps
    return Latent(grid=grid, step=t)


def predict_x0(z_t: Latent, eps_t: torch.Tensor, t: int, schedule: NoiseSchedule) -> Latent:
    """One-step prediction of the clean latent from step ``t``."""
    _check_step(z_t, t, schedule)
    if eps_t.shape != z_t.grid.shape:
        raise ValueError(f"eps shape {tuple(eps_t.shape)} != latent shape {tuple(z_t.grid.shape)}")
    a = float(schedule.alpha_prime[t])
    grid = (z_t.grid - math.sqrt(1.0 - a) * eps_t) / math.sqrt(a)
    return Latent(grid=grid, step=0)


def ddim_step(z_t: Latent, eps_t: torch.Tensor, t: int, schedule: NoiseSchedule) -> Latent:
    """One deterministic reverse step (eta = 0): step ``t`` -> ``t - 1``."""
    _check_step(z_t, t, schedule)
    if eps_t.shape != z_t.grid.shape:
        raise ValueError(f"eps shape {tuple(eps_t.shape)} != latent shape {tuple(z_t.grid.shape)}")
    a_t = float(schedule.alpha_bar[t])
    a_prev = float(schedule.alpha_bar[t - 1])
    x0 = (z_t.grid - math.sqrt(1.0 - a_t) * eps_t) / math.sqrt(a_t)
    grid = math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps_t
    return Latent(grid=grid, step=t - 1)
