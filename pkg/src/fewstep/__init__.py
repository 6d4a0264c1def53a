"""Few-step masked diffusion language model lab.

Submodules:

* numcore    — float64 tensors with tape-based reverse-mode autodiff
* denoiser   — block-causal transformer predictor and checkpoint format
* diffusion  — forward masking, order re-masking, random-token corruption
* decoder    — full/static/dynamic generation with trajectory recording
* objectives — every training loss
* trainer    — teacher pretraining, rollout collection, distillation
* analysis   — exact-enumeration theory checks
* tasks/harness/figures/pipeline/cli — synthetic benchmarks and the CLI
"""

from . import (
    analysis,
    decoder,
    denoiser,
    diffusion,
    harness,
    numcore,
    objectives,
    tasks,
    trainer,
)
from .decoder import DecodeConfig, Trajectory
from .denoiser import DenoiserParams, ModelConfig
from .numcore import Tape, Tensor, backward
from .objectives import DistillBatch, LossConfig
from .tasks import TaskSpec
from .trainer import RolloutSpec, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "analysis", "decoder", "denoiser", "diffusion", "harness", "numcore",
    "objectives", "tasks", "trainer",
    "DecodeConfig", "Trajectory", "DenoiserParams", "ModelConfig",
    "Tape", "Tensor", "backward", "DistillBatch", "LossConfig",
    "TaskSpec", "RolloutSpec", "TrainConfig", "__version__",
]
