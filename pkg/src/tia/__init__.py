"""Task-informed abstraction learning.

Two cooperating latent world models split pixel observations into
task-relevant and task-irrelevant factors: both reconstruct the input jointly
through a learned pixel mask, while an adversarial reward head drives the
distractor model away from anything reward-predictive. The policy trains
purely in the task model's imagination, so visual clutter never reaches it.
"""

from .agent import ActorCritic, ImaginedTrajectory, act, imagine, lambda_return, policy_update
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    NLL_FLOOR,
    TrainConfig,
    config_from_flat_dict,
    config_to_flat_dict,
    load_config_file,
    save_config_file,
)
from .env import EnvConfig, EnvError, EnvState, MiniManyWorld, background_frame, render, reset, step
from .metrics import DiagnosisReport, MetricsRecord, diagnose, load_metrics, mean_predictor_nll
from .replay import Episode, ReplayBuffer, SequenceBatch, load_episode, save_episode
from .trainer import DivergenceError, TrainerError, TrainResult, evaluate, train
from .worldmodel import (
    DecodeOutput,
    LossBreakdown,
    SingleWorldModel,
    TIABundle,
    adversarial_head_update,
    build_single_model,
    build_tia_bundle,
    compute_losses,
    decode_obs,
    dreamer_baseline_loss,
    gaussian_image_nll,
    inverse_model_loss,
    kl_regularizer,
    mix,
    posterior_step,
    prior_step,
    reward_nll,
)

__version__ = "0.1.0"
