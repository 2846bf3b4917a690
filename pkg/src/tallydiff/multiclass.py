"""Distribution correction for multi-class prompts.

Each class with a count error gets its own guided replay from the shared
initial noise; the resulting mid-trajectory latents are averaged in
ascending class-id order so multi-class guidance never mixes competing
losses inside one run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .counting import CorrectionPlan
from .denoiser import ToyDenoiser
from .guidance import GuidanceConfig, GuidanceTrace, correct_single_class
from .latents import Conditioning, Latent, LatentTrajectory
from .schedule import NoiseSchedule

__all__ = ["MultiClassJob", "DispatchTrace", "correct_multi_class", "dispatch_correction"]


@dataclass
class MultiClassJob:
    """Per-class correction branches sharing one initial noise."""

    classes_to_fix: list[int]
    seed: int
    plan: CorrectionPlan

    def __post_init__(self):
        self.classes_to_fix = sorted(self.classes_to_fix)
        if not self.classes_to_fix:
            raise ValueError("job needs at least one class to fix")
        active = set(self.plan.active_classes())
        stale = set(self.classes_to_fix) - active
        if stale:
            raise ValueError(f"classes {sorted(stale)} have no active correction in the plan")

    @property
    def n(self) -> int:
        return len(self.classes_to_fix)

    @classmethod
    def from_plan(cls, plan: CorrectionPlan, seed: int) -> "MultiClassJob":
        return cls(classes_to_fix=plan.active_classes(), seed=seed, plan=plan)


@dataclass
class DispatchTrace:
    route: str  # "none" | "single" | "multi"
    branches: list[GuidanceTrace] = field(default_factory=list)
    averaged: bool = False

    def to_dict(self) -> dict:
        import json

        return {
            "route": self.route,
            "averaged": self.averaged,
            "branches": [json.loads(tr.to_json()) for tr in self.branches],
        }


def correct_multi_class(
    job: MultiClassJob,
    cond: Conditioning,
    trajectory: LatentTrajectory,
    schedule: NoiseSchedule,
    cfg: GuidanceConfig,
    model: ToyDenoiser,
) -> tuple[Latent, list[GuidanceTrace]]:
    """Average the per-class corrected latents at ``t_mid``.

    Every branch sees the full conditioning; only the guidance loss is
    restricted to its class. Branches run and sum in ascending class-id
    order so the result is independent of how the job was assembled.
    """
    if trajectory.seed != job.seed:
        raise ValueError(f"trajectory seed {trajectory.seed} != job seed {job.seed}")
    traces: list[GuidanceTrace] = []
    total: torch.Tensor | None = None
    for class_id in job.classes_to_fix:
        branch_plan = job.plan.restricted_to(class_id)
        z_mid, trace = correct_single_class(
            job.seed, cond, branch_plan, trajectory, schedule, cfg, model
        )
        traces.append(trace)
        total = z_mid.grid if total is None else total + z_mid.grid
    return Latent(grid=total / job.n, step=cfg.t_mid), traces


def dispatch_correction(
    plan: CorrectionPlan,
    trajectory: LatentTrajectory,
    cond: Conditioning,
    schedule: NoiseSchedule,
    cfg: GuidanceConfig,
    model: ToyDenoiser,
) -> tuple[Latent, DispatchTrace]:
    """Route a finished plan to the single- or multi-class correction path."""
    active = plan.active_classes()
    if not active:
        return trajectory[cfg.t_mid].clone(), DispatchTrace(route="none")
    if len(active) == 1:
        z_mid, trace = correct_single_class(
            trajectory.seed, cond, plan.restricted_to(active[0]), trajectory, schedule, cfg, model
        )
        return z_mid, DispatchTrace(route="single", branches=[trace])
    job = MultiClassJob.from_plan(plan, trajectory.seed)
    z_mid, traces = correct_multi_class(job, cond, trajectory, schedule, cfg, model)
    return z_mid, DispatchTrace(route="multi", branches=traces, averaged=True)
