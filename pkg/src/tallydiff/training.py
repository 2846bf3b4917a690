"""Denoiser training with a deliberate early stop.

The checkpoint is stopped inside a configured baseline-accuracy band
(well below perfect) so the correction stage has real mistakes to fix.
The stopping criterion is part of the config: every ``probe_every``
epochs a small seeded benchmark probe samples images and counts them;
training stops once plain-sampling accuracy falls inside ``stop_band``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .counting import CounterConfig, count_objects
from .data import load_dataset
from .denoiser import DenoiserConfig, ToyDenoiser
from .latents import decode_latent
from .encoder import encode_prompt
from .sampler import finish_denoising, initial_noise
from .scenes import ClassVocabulary, PromptSpec
from .schedule import NoiseSchedule, ScheduleProfile, make_schedule
from .util import derive_seed, image_to_model_range, to_uint8_image

__all__ = ["TrainConfig", "TrainingDiverged", "train_denoiser", "conditioning_gap"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    out_path: str = "artifacts/desk.ckpt"
    seed: int = 0
    num_steps: int = 40
    profile: ScheduleProfile = field(default_factory=ScheduleProfile)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    batch_size: int = 64
    lr: float = 2e-3
    max_epochs: int = 40
    min_epochs: int = 2
    val_fraction: float = 0.1
    token_dropout: float = 0.1
    # Early stop: plain-sampling accuracy band on the probe set.
    stop_band: tuple[float, float] | None = (0.30, 0.60)
    probe_every: int = 2
    probe_prompts: int = 32
    probe_counts: tuple[int, ...] = (2, 3, 5, 7)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["profile"] = self.profile.to_dict()
        d["denoiser"] = self.denoiser.to_dict()
        d["stop_band"] = list(self.stop_band) if self.stop_band else None
        d["probe_counts"] = list(self.probe_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "profile" in d:
            d["profile"] = ScheduleProfile.from_dict(d["profile"])
        if "denoiser" in d:
            d["denoiser"] = DenoiserConfig.from_dict(d["denoiser"])
        if d.get("stop_band") is not None:
            d["stop_band"] = tuple(d["stop_band"])
        if "probe_counts" in d:
            d["probe_counts"] = tuple(d["probe_counts"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _batch_tokens(model: ToyDenoiser, prompts: list[PromptSpec], drop: list[bool]):
    """Encode prompts into a padded token batch with a validity mask."""
    conds = [model.prompt_encoder(p) for p in prompts]
    K = max(c.token_embeddings.shape[0] for c in conds)
    dim = model.config.cond_dim
    tokens = torch.zeros(len(conds), K, dim)
    mask = torch.zeros(len(conds), K, dtype=torch.bool)
    for i, cond in enumerate(conds):
        k = cond.token_embeddings.shape[0]
        tokens[i, :k] = cond.token_embeddings
        mask[i, :k] = True
        if drop[i]:
            mask[i, 1:] = False  # background token only
    return tokens, mask


def _epoch_loss(
    model: ToyDenoiser,
    images: torch.Tensor,
    prompts: list[PromptSpec],
    schedule: NoiseSchedule,
    gen: torch.Generator,
    batch_size: int,
    token_dropout: float,
    optimizer: torch.optim.Optimizer | None,
) -> float:
    n = images.shape[0]
    order = torch.randperm(n, generator=gen) if optimizer is not None else torch.arange(n)
    total = 0.0
    alpha_bar = torch.from_numpy(schedule.alpha_bar).float()
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x0 = images[idx]
        b = x0.shape[0]
        t = torch.randint(1, schedule.num_steps + 1, (b,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        a = alpha_bar[t][:, None, None, None]
        z_t = a.sqrt() * x0 + (1 - a).sqrt() * eps
        drop = (torch.rand(b, generator=gen) < token_dropout).tolist()
        tokens, mask = _batch_tokens(model, [prompts[i] for i in idx.tolist()], drop)
        if optimizer is not None:
            optimizer.zero_grad(set_to_none=True)
            pred, _ = model(z_t, t, tokens, mask)
            loss = F.mse_loss(pred, eps)
            loss.backward()
            optimizer.step()
        else:
            with torch.no_grad():
                pred, _ = model(z_t, t, tokens, mask)
                loss = F.mse_loss(pred, eps)
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(
                f"non-finite loss {loss.item()} at batch starting {start} "
                f"(t range {int(t.min())}..{int(t.max())})"
            )
        total += loss.item() * b
    return total / n


def conditioning_gap(
    model: ToyDenoiser,
    images: torch.Tensor,
    prompts: list[PromptSpec],
    schedule: NoiseSchedule,
    seed: int,
    batch_size: int = 64,
) -> tuple[float, float]:
    """(conditional, unconditional) validation losses on fixed draws."""
    cond = _epoch_loss(
        model, images, prompts, schedule,
        torch.Generator().manual_seed(seed), batch_size, 0.0, None,
    )
    uncond = _epoch_loss(
        model, images, prompts, schedule,
        torch.Generator().manual_seed(seed), batch_size, 1.0, None,
    )
    return cond, uncond


def probe_accuracy(
    model: ToyDenoiser,
    schedule: NoiseSchedule,
    vocab: ClassVocabulary,
    n_prompts: int,
    counts: tuple[int, ...],
    seed: int,
) -> float:
    """Plain-sampling count accuracy on a small seeded prompt set."""
    rng = np.random.default_rng(seed)
    correct = 0
    counter_cfg = CounterConfig()
    shape = (model.config.in_channels, model.config.image_size, model.config.image_size)
    for i in range(n_prompts):
        cls = int(rng.choice(vocab.class_ids))
        count = int(counts[i % len(counts)])
        prompt = PromptSpec(targets={cls: count}, background_id=int(rng.integers(0, 2)))
        cond = encode_prompt(prompt, model.prompt_encoder)
        z = initial_noise(derive_seed(seed, "probe", i), shape, step=schedule.num_steps)
        z0 = finish_denoising(z, cond, schedule, model)
        image = to_uint8_image(decode_latent(z0))
        report = count_objects(image, [cls], counter_cfg, vocab)
        correct += int(report.count(cls) == count)
    return correct / n_prompts


def train_denoiser(dataset_path, config: TrainConfig) -> Path:
    """Train on a rendered dataset; returns the checkpoint path."""
    items, manifest = load_dataset(dataset_path)
    vocab = ClassVocabulary.from_dict(manifest["vocab"])
    schedule = make_schedule(config.num_steps, config.profile)
    torch.manual_seed(config.seed)
    model = ToyDenoiser(vocab, config.denoiser)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    images = torch.stack([image_to_model_range(item.image_u8) for item in items])
    prompts = [item.prompt for item in items]
    n_val = max(1, int(len(items) * config.val_fraction))
    split = torch.randperm(len(items), generator=torch.Generator().manual_seed(config.seed))
    val_idx, train_idx = split[:n_val].tolist(), split[n_val:].tolist()
    train_images, val_images = images[train_idx], images[val_idx]
    train_prompts = [prompts[i] for i in train_idx]
    val_prompts = [prompts[i] for i in val_idx]

    out_path = Path(config.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    log_path = out_path.with_suffix(".train.jsonl")
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "train"))
    history: list[dict] = []
    stopped_at: dict | None = None

    with open(log_path, "w") as log:
        log.write(json.dumps({"event": "start", "config": config.to_dict(), "n_train": len(train_idx), "n_val": n_val}) + "\n")
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            model.train()
            train_loss = _epoch_loss(
                model, train_images, train_prompts, schedule, gen,
                config.batch_size, config.token_dropout, optimizer,
            )
            model.eval()
            val_cond, val_uncond = conditioning_gap(
                model, val_images, val_prompts, schedule,
                derive_seed(config.seed, "val"), config.batch_size,
            )
            record = {
                "event": "epoch",
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_cond,
                "val_loss_uncond": val_uncond,
                "seconds": round(time.perf_counter() - t0, 2),
            }
            if (
                config.stop_band is not None
                and epoch >= config.min_epochs
                and epoch % config.probe_every == 0
            ):
                acc = probe_accuracy(
                    model, schedule, vocab,
                    config.probe_prompts, config.probe_counts,
                    derive_seed(config.seed, "probe"),
                )
                record["probe_accuracy"] = acc
                if config.stop_band[0] <= acc <= config.stop_band[1]:
                    stopped_at = {"epoch": epoch, "probe_accuracy": acc}
            history.append(record)
            log.write(json.dumps(record) + "\n")
            log.flush()
            # rolling snapshot for inspection and crash recovery
            save_checkpoint(
                out_path.with_suffix(".last.ckpt"), model, schedule,
                {"train_config": config.to_dict(), "history": history, "stopped_at": None},
            )
            if stopped_at:
                break
        log.write(json.dumps({"event": "stop", "stopped_at": stopped_at, "final_epoch": history[-1]["epoch"]}) + "\n")

    meta = {
        "train_config": config.to_dict(),
        "dataset_manifest": {k: v for k, v in manifest.items() if k != "vocab"},
        "history": history,
        "stopped_at": stopped_at,
    }
    save_checkpoint(out_path, model, schedule, meta)
    return out_path
