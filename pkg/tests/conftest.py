import json
import os
from pathlib import Path

import pytest

from tallydiff.checkpoint import save_checkpoint
from tallydiff.data import build_dataset
from tallydiff.denoiser import DenoiserConfig, ToyDenoiser
from tallydiff.schedule import make_schedule
from tallydiff.scenes import default_vocabulary
from tallydiff.util import enable_determinism

REPO_ROOT = Path(__file__).resolve().parent.parent
ARTIFACTS = REPO_ROOT / "artifacts"
DESK_TRAIN_CONFIG = REPO_ROOT / "configs" / "desk_train.json"


def pytest_configure(config):
    enable_determinism(0)


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


TINY_CONFIG = DenoiserConfig(image_size=16, widths=(8, 16, 32), time_dim=32, heads=4, init_seed=3)


@pytest.fixture(scope="session")
def tiny_model(vocab):
    """Small untrained denoiser: guidance/sampler mechanics don't need quality."""
    model = ToyDenoiser(vocab, TINY_CONFIG)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture(scope="session")
def tiny_schedule():
    return make_schedule(8)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_model, tiny_schedule):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    save_checkpoint(path, tiny_model, tiny_schedule, meta={"purpose": "unit tests"})
    return path


@pytest.fixture(scope="session")
def desk_checkpoint():
    """The trained desk model; trains once and caches under artifacts/."""
    path = ARTIFACTS / "desk.ckpt"
    if not path.exists():
        from tallydiff.training import TrainConfig, train_denoiser

        with open(DESK_TRAIN_CONFIG) as fh:
            cfg = TrainConfig.from_dict(json.load(fh))
        cfg.out_path = str(path)
        data_dir = ARTIFACTS / "desk_data"
        if not (data_dir / "manifest.json").exists():
            build_dataset(data_dir, size=cfg_dataset_size(), seed=20)
        train_denoiser(data_dir, cfg)
    return path


def cfg_dataset_size() -> int:
    return int(os.environ.get("TALLYDIFF_DATASET_SIZE", "4096"))
