"""Two-stage orchestration: sample, count, plan, correct, finish, audit.

A run is fully described by its RunConfig; the persisted snapshot plus
the checkpoint reproduce every artifact bit-exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .counting import CorrectionPlan, CounterConfig, CountReport, count_objects, plan_correction
from .encoder import encode_prompt
from .guidance import GuidanceConfig
from .latents import decode_latent, save_latent
from .multiclass import DispatchTrace, dispatch_correction
from .sampler import finish_denoising, predict_noise, sample_trajectory
from .schedule import ScheduleProfile, make_schedule, predict_x0
from .scenes import PromptSpec
from .util import save_png, to_uint8_image

__all__ = ["RunConfig", "RunRecord", "StageError", "generate", "load_model", "clear_model_cache"]


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RunConfig:
    prompt: PromptSpec
    seed: int
    checkpoint: str
    num_steps: int | None = None  # None: use the checkpoint's schedule
    profile: ScheduleProfile | None = None
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    counter: CounterConfig = field(default_factory=CounterConfig)
    correction_enabled: bool = True
    out_dir: str | None = None
    save_arrays: bool = False  # persist z_mid latents alongside images

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt.to_dict(),
            "seed": self.seed,
            "checkpoint": str(self.checkpoint),
            "num_steps": self.num_steps,
            "profile": self.profile.to_dict() if self.profile else None,
            "guidance": self.guidance.to_dict(),
            "counter": self.counter.to_dict(),
            "correction_enabled": self.correction_enabled,
            "out_dir": str(self.out_dir) if self.out_dir else None,
            "save_arrays": self.save_arrays,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            prompt=PromptSpec.from_dict(d["prompt"]),
            seed=d["seed"],
            checkpoint=d["checkpoint"],
            num_steps=d.get("num_steps"),
            profile=ScheduleProfile.from_dict(d["profile"]) if d.get("profile") else None,
            guidance=GuidanceConfig.from_dict(d.get("guidance", {})),
            counter=CounterConfig.from_dict(d.get("counter", {})),
            correction_enabled=d.get("correction_enabled", True),
            out_dir=d.get("out_dir"),
            save_arrays=d.get("save_arrays", False),
        )

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunRecord:
    config: RunConfig
    detection_image: np.ndarray  # one-step prediction at t_mid, uint8 HWC
    final_image: np.ndarray
    report_before: CountReport
    report_after: CountReport
    plan: CorrectionPlan
    dispatch: DispatchTrace
    timings: dict[str, float]
    verdict: bool
    out_dir: Path | None = None

    def summary(self) -> dict:
        return {
            "seed": self.config.seed,
            "targets": self.config.prompt.to_dict()["targets"],
            "counts_before": {str(k): v for k, v in self.report_before.counts().items()},
            "counts_after": {str(k): v for k, v in self.report_after.counts().items()},
            "route": self.dispatch.route,
            "verdict": self.verdict,
            "timings": self.timings,
        }


_MODEL_CACHE: dict[str, Checkpoint] = {}


def load_model(path) -> Checkpoint:
    key = str(Path(path).resolve())
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = load_checkpoint(path)
    return _MODEL_CACHE[key]


def clear_model_cache() -> None:
    _MODEL_CACHE.clear()


def generate(cfg: RunConfig) -> RunRecord:
    """Run the full two-stage pipeline for one prompt."""
    ckpt = load_model(cfg.checkpoint)
    model = ckpt.model
    if cfg.num_steps is None and cfg.profile is None:
        schedule = ckpt.schedule()
    else:
        schedule = make_schedule(cfg.num_steps or ckpt.num_steps, cfg.profile or ckpt.profile)
    gcfg = cfg.guidance
    if not 1 <= gcfg.t_mid < schedule.num_steps:
        raise ValueError(f"t_mid={gcfg.t_mid} outside [1, {schedule.num_steps - 1}]")
    for class_id in cfg.prompt.targets:
        model.vocab.by_id(class_id)
    tags = sorted(cfg.prompt.targets)
    timings: dict[str, float] = {}

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "config.json", "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)

    def _stage(name: str):
        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, exc_type, exc, tb):
                timings[name] = round(time.perf_counter() - self.t0, 4)
                if exc is not None and not isinstance(exc, StageError):
                    raise StageError(name, exc) from exc

        return _Timer()

    with _stage("sample"):
        cond = encode_prompt(cfg.prompt, model.prompt_encoder)
        z_mid, trajectory = sample_trajectory(cfg.seed, cond, schedule, gcfg.t_mid, model)

    with _stage("detect"):
        eps_mid = predict_noise(z_mid, cond, gcfg.t_mid, model)
        x0_hat = predict_x0(z_mid, eps_mid, gcfg.t_mid, schedule)
        detection_image = to_uint8_image(decode_latent(x0_hat))
        report_before = count_objects(detection_image, tags, cfg.counter, model.vocab)
        plan = plan_correction(report_before, cfg.prompt.targets, report_before.image_shape, cfg.counter)
        if out_dir:
            save_png(out_dir / "detection.png", detection_image)
            with open(out_dir / "report_before.json", "w") as fh:
                json.dump(report_before.to_dict(), fh)
            with open(out_dir / "plan.json", "w") as fh:
                json.dump(plan.to_dict(), fh)

    needs_fix = bool(plan.active_classes())
    with _stage("correct"):
        if cfg.correction_enabled and needs_fix:
            z_resume, dispatch = dispatch_correction(plan, trajectory, cond, schedule, gcfg, model)
        else:
            z_resume = trajectory[gcfg.t_mid].clone()
            dispatch = DispatchTrace(route="none")

    with _stage("finish"):
        z0 = finish_denoising(z_resume, cond, schedule, model)
        final_image = to_uint8_image(decode_latent(z0))

    with _stage("audit"):
        report_after = count_objects(final_image, tags, cfg.counter, model.vocab)
        verdict = all(report_after.count(c) == n for c, n in cfg.prompt.targets.items())

    record = RunRecord(
        config=cfg,
        detection_image=detection_image,
        final_image=final_image,
        report_before=report_before,
        report_after=report_after,
        plan=plan,
        dispatch=dispatch,
        timings=timings,
        verdict=verdict,
        out_dir=out_dir,
    )
    if out_dir:
        save_png(out_dir / "final.png", final_image)
        with open(out_dir / "report_after.json", "w") as fh:
            json.dump(report_after.to_dict(), fh)
        with open(out_dir / "trace.json", "w") as fh:
            json.dump(dispatch.to_dict(), fh, indent=2)
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(record.summary(), fh, indent=2)
        if cfg.save_arrays:
            save_latent(out_dir / "z_mid.tdlt", z_mid)
            save_latent(out_dir / "z_mid_corrected.tdlt", z_resume)
    return record
