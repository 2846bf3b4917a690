"""Dataset building: rendered scenes with prompt and scene sidecars.

Layout of a dataset directory::

    manifest.json                  builder config, vocab, seed, size
    scenes/000000.png              lossless render
    scenes/000000.spec.json        SceneSpec (instances, canvas, background)
    scenes/000000.prompt.json      PromptSpec (targets, background)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenes import ClassVocabulary, PromptSpec, SceneSpec, default_vocabulary, generate_scene
from .util import derive_seed, load_png, save_png

__all__ = ["DatasetItem", "build_dataset", "load_dataset", "sample_prompt"]


@dataclass
class DatasetItem:
    image_u8: np.ndarray
    prompt: PromptSpec
    spec: SceneSpec


def sample_prompt(
    rng: np.random.Generator,
    vocab: ClassVocabulary,
    count_range: tuple[int, int],
    multi_class_fraction: float,
) -> PromptSpec:
    lo, hi = count_range
    background_id = int(rng.integers(0, 2))
    if rng.random() < multi_class_fraction:
        k = int(rng.integers(2, 4))
        classes = rng.choice(vocab.class_ids, size=k, replace=False)
        targets = {int(c): int(rng.integers(1, 4)) for c in classes}
    else:
        cls = int(rng.choice(vocab.class_ids))
        targets = {cls: int(rng.integers(lo, hi + 1))}
    return PromptSpec(targets=targets, background_id=background_id)


def build_dataset(
    out_dir,
    size: int,
    seed: int,
    vocab: ClassVocabulary | None = None,
    count_range: tuple[int, int] = (1, 10),
    multi_class_fraction: float = 0.4,
    canvas: tuple[int, int] = (64, 64),
) -> Path:
    """Render ``size`` scenes reproducibly and write them to ``out_dir``."""
    if size < 1:
        raise ValueError("size must be >= 1")
    vocab = vocab or default_vocabulary()
    out = Path(out_dir)
    scenes_dir = out / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    for i in range(size):
        prompt = sample_prompt(rng, vocab, count_range, multi_class_fraction)
        scene_seed = derive_seed(seed, "scene", i)
        image, _, spec = generate_scene(prompt, scene_seed, vocab, canvas=canvas)
        stem = scenes_dir / f"{i:06d}"
        save_png(f"{stem}.png", image)
        with open(f"{stem}.spec.json", "w") as fh:
            json.dump(spec.to_dict(), fh)
        with open(f"{stem}.prompt.json", "w") as fh:
            json.dump(prompt.to_dict(), fh)

    manifest = {
        "size": size,
        "seed": seed,
        "count_range": list(count_range),
        "multi_class_fraction": multi_class_fraction,
        "canvas": list(canvas),
        "vocab": vocab.to_dict(),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return out


def load_dataset(path) -> tuple[list[DatasetItem], dict]:
    root = Path(path)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    items: list[DatasetItem] = []
    for i in range(manifest["size"]):
        stem = root / "scenes" / f"{i:06d}"
        image = load_png(f"{stem}.png")
        with open(f"{stem}.spec.json") as fh:
            spec = SceneSpec.from_dict(json.load(fh))
        with open(f"{stem}.prompt.json") as fh:
            prompt = PromptSpec.from_dict(json.load(fh))
        items.append(DatasetItem(image_u8=image, prompt=prompt, spec=spec))
    return items, manifest
