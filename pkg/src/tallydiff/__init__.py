"""tallydiff: count-guided sampling for a toy diffusion model.

Two-stage pipeline: a detection pass counts objects in a one-step
prediction taken mid-trajectory; a correction pass replays the sampler
from the same noise with gradient guidance on cross-attention maps until
the counts match the prompt.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .counting import (
    CorrectionPlan,
    CounterConfig,
    CountReport,
    count_objects,
    plan_correction,
)
from .data import build_dataset, load_dataset
from .denoiser import DenoiserConfig, ToyDenoiser
from .encoder import PromptEncoder, encode_prompt
from .external import CounterEndpoint, external_count
from .guidance import (
    GuidanceConfig,
    GuidanceTrace,
    correct_single_class,
    gaussian_smooth,
    guidance_loss,
    guided_step,
)
from .latents import (
    AttentionMap,
    Conditioning,
    Latent,
    LatentTrajectory,
    decode_latent,
    encode_image,
    load_latent,
    save_latent,
)
from .multiclass import MultiClassJob, correct_multi_class, dispatch_correction
from .pipeline import RunConfig, RunRecord, generate
from .sampler import (
    denoise_with_attention,
    finish_denoising,
    initial_noise,
    predict_noise,
    sample_trajectory,
)
from .scenes import (
    ClassVocabulary,
    PromptSpec,
    SceneSpec,
    default_vocabulary,
    generate_scene,
)
from .schedule import (
    NoiseSchedule,
    ScheduleProfile,
    ddim_step,
    forward_noise,
    make_schedule,
    predict_x0,
)
from .training import TrainConfig, train_denoiser

__version__ = "0.1.0"
