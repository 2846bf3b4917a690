"""Checkpoint serialization: weights, vocabulary, schedule fingerprint."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .denoiser import DenoiserConfig, ToyDenoiser
from .scenes import ClassVocabulary
from .schedule import NoiseSchedule, ScheduleProfile, make_schedule

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]


@dataclass
class Checkpoint:
    model: ToyDenoiser
    vocab: ClassVocabulary
    profile: ScheduleProfile
    num_steps: int
    schedule_fingerprint: str
    meta: dict

    def schedule(self) -> NoiseSchedule:
        sched = make_schedule(self.num_steps, self.profile)
        if sched.fingerprint() != self.schedule_fingerprint:
            raise ValueError(
                "schedule fingerprint mismatch: checkpoint was trained against a "
                "different noise schedule"
            )
        return sched


def save_checkpoint(
    path,
    model: ToyDenoiser,
    schedule: NoiseSchedule,
    meta: dict | None = None,
) -> None:
    payload = {
        "format": "tallydiff-checkpoint-v1",
        "state_dict": model.state_dict(),
        "denoiser_config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "profile": schedule.profile.to_dict(),
        "num_steps": schedule.num_steps,
        "schedule_fingerprint": schedule.fingerprint(),
        "meta": meta or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != "tallydiff-checkpoint-v1":
        raise ValueError(f"{path}: not a recognized checkpoint file")
    vocab = ClassVocabulary.from_dict(payload["vocab"])
    config = DenoiserConfig.from_dict(payload["denoiser_config"])
    model = ToyDenoiser(vocab, config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return Checkpoint(
        model=model,
        vocab=vocab,
        profile=ScheduleProfile.from_dict(payload["profile"]),
        num_steps=payload["num_steps"],
        schedule_fingerprint=payload["schedule_fingerprint"],
        meta=payload["meta"],
    )
