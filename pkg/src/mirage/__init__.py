"""Transformer world model with a categorical-VAE codec and an
imagination-trained actor-critic, plus toy pixel environments and an
external-environment bridge client."""

from .agent import ActorCritic, ema_update, lambda_returns, return_scale
from .codec import Decoder, Encoder, latent_probs, sample_straight_through
from .config import AgentConfig, RunConfig, WorldModelConfig, desk_small, load_config, save_config, tiny
from .imagination import ImaginedRollout, imagine_frames, rollout, warmup
from .losses import BucketGrid, WmLossReport, kl_categorical, symexp, symlog, world_model_loss
from .numerics import RngStreams, grad_check, stop_gradient
from .replay import ReplayBuffer, Step, load_trajectory, save_trajectory
from .sequence import ActionMixer, KVCache, SequenceModel
from .world_model import WorldModel

__all__ = [
    "ActorCritic", "ActionMixer", "AgentConfig", "BucketGrid", "Decoder",
    "Encoder", "ImaginedRollout", "KVCache", "ReplayBuffer", "RngStreams",
    "RunConfig", "SequenceModel", "Step", "WmLossReport", "WorldModel",
    "WorldModelConfig", "desk_small", "ema_update", "grad_check",
    "imagine_frames", "kl_categorical", "lambda_returns", "latent_probs",
    "load_config", "load_trajectory", "return_scale", "rollout",
    "sample_straight_through", "save_config", "save_trajectory",
    "stop_gradient", "symexp", "symlog", "tiny", "warmup", "world_model_loss",
]
