"""Run configuration: architecture, optimization and loop cadence knobs.

Defaults reproduce the full-scale training setup; the ``desk_small`` and
``tiny`` presets shrink everything to CPU-test scale while keeping every
structural choice intact.  Config files are flat ``key = value`` text
(a TOML subset), one key per line, ``#`` comments allowed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

AGENT_STATE_MODES = ("both", "latent", "hidden")


@dataclass
class WorldModelConfig:
    """Architecture of the codec, sequence model and prediction heads."""

    image_size: int = 64
    image_channels: int = 3
    channels_base: int = 32        # encoder conv widths double per stage from here
    categories: int = 32           # latent categorical variables per frame
    classes: int = 32              # classes per categorical
    feature_dim: int = 512         # transformer width D
    layers: int = 2                # transformer blocks K
    heads: int = 8
    dropout: float = 0.1
    train_context: int = 64        # batch length T
    inference_context: int = 32    # KV-cache capacity (env context + horizon)
    action_count: int = 4
    unimix: float = 0.0            # optional uniform mixture on latent probs
    decoder_at_rear: bool = False  # reconstruct from the predicted distribution
    predictor_at_front: bool = False  # reward/continuation heads read z, not h

    def __post_init__(self) -> None:
        if self.feature_dim % self.heads:
            raise ValueError("feature_dim must be divisible by heads")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        stages = (self.image_size // 4).bit_length() - 1
        if self.image_size != 4 * (2 ** stages) or stages < 1:
            raise ValueError("image_size must be 4 * 2**n with n >= 1")

    @property
    def latent_flat(self) -> int:
        return self.categories * self.classes

    @property
    def conv_stages(self) -> int:
        return (self.image_size // 4).bit_length() - 1

    @property
    def max_position(self) -> int:
        return max(self.train_context, self.inference_context)


@dataclass
class AgentConfig:
    """Actor-critic hyperparameters."""

    gamma: float = 0.985
    return_lambda: float = 0.95
    entropy_coef: float = 3e-4     # eta
    critic_ema_decay: float = 0.98  # sigma
    hidden_dim: int = 0            # 0 means: use world-model feature_dim
    value_buckets: int = 255
    state_mode: str = "both"       # both | latent | hidden

    def __post_init__(self) -> None:
        if self.state_mode not in AGENT_STATE_MODES:
            raise ValueError(f"state_mode must be one of {AGENT_STATE_MODES}")


@dataclass
class RunConfig:
    """Everything a training run needs; serialized into checkpoints/metrics."""

    env: str = "toy-ball"
    seed: int = 0
    total_env_steps: int = 100_000
    device: str = "cpu"

    wm: WorldModelConfig = field(default_factory=WorldModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)

    # replay / batching
    buffer_capacity: int = 100_000
    wm_batch_size: int = 16        # B1
    imagination_batch_size: int = 1024  # B2
    imagination_context: int = 8   # C
    imagination_horizon: int = 16  # L
    env_context: int = 16          # posterior context when acting

    # optimization
    wm_lr: float = 1e-4
    wm_grad_clip: float = 1000.0
    ac_lr: float = 3e-5
    ac_grad_clip: float = 100.0
    update_wm_every: int = 1
    update_agent_every: int = 1

    # loop
    prefill: int = 1024            # random-policy steps before updates start
    checkpoint_every: int = 2500
    reward_beta: float = 0.5       # beta1, dynamics KL weight
    repr_beta: float = 0.1         # beta2, representation KL weight
    demo_path: str = ""
    bridge_address: str = ""       # host:port for env = "bridge"
    frame_skip: int = 4            # bridge preprocessing only
    checkpoint_buffer: bool = True

    def fingerprint(self) -> str:
        """Stable hash of every field; stored in checkpoints and metrics."""
        return hashlib.sha256(
            json.dumps(to_flat_dict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


# Flat-file key layout: world-model keys under their natural names, nested
# dataclasses flattened with the prefixes below.
_WM_PREFIX = "wm_"
_AGENT_PREFIX = "agent_"
# wm_batch_size / wm_lr / wm_grad_clip are RunConfig fields, not WmConfig ones.
_RUN_FIELD_EXCEPTIONS = {"wm_batch_size", "wm_lr", "wm_grad_clip"}


def to_flat_dict(cfg: RunConfig) -> dict:
    flat: dict = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "wm":
            for wf in dataclasses.fields(WorldModelConfig):
                flat[_WM_PREFIX + wf.name] = getattr(value, wf.name)
        elif f.name == "agent":
            for af in dataclasses.fields(AgentConfig):
                flat[_AGENT_PREFIX + af.name] = getattr(value, af.name)
        else:
            flat[f.name] = value
    return flat


def from_flat_dict(flat: dict) -> RunConfig:
    wm_kwargs, agent_kwargs, run_kwargs = {}, {}, {}
    wm_fields = {f.name for f in dataclasses.fields(WorldModelConfig)}
    agent_fields = {f.name for f in dataclasses.fields(AgentConfig)}
    run_fields = {f.name for f in dataclasses.fields(RunConfig)}
    for key, value in flat.items():
        if key in _RUN_FIELD_EXCEPTIONS:
            run_kwargs[key] = value
        elif key.startswith(_WM_PREFIX) and key[len(_WM_PREFIX):] in wm_fields:
            wm_kwargs[key[len(_WM_PREFIX):]] = value
        elif key.startswith(_AGENT_PREFIX) and key[len(_AGENT_PREFIX):] in agent_fields:
            agent_kwargs[key[len(_AGENT_PREFIX):]] = value
        elif key in run_fields:
            run_kwargs[key] = value
        else:
            raise KeyError(f"unknown config key {key!r}")
    return RunConfig(wm=WorldModelConfig(**wm_kwargs), agent=AgentConfig(**agent_kwargs), **run_kwargs)


def _parse_scalar(text: str):
    text = text.strip()
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def load_config(path: str | Path) -> RunConfig:
    flat: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        flat[key.strip()] = _parse_scalar(value)
    return from_flat_dict(flat)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    lines = []
    for key, value in to_flat_dict(cfg).items():
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, str):
            rendered = f'"{value}"'
        else:
            rendered = repr(value)
        lines.append(f"{key} = {rendered}")
    Path(path).write_text("\n".join(lines) + "\n")


def desk_small(seed: int = 0, env: str = "toy-ball") -> RunConfig:
    """Reduced configuration that trains end-to-end on a 2-core CPU."""
    return RunConfig(
        env=env,
        seed=seed,
        total_env_steps=10_000,
        wm=WorldModelConfig(
            channels_base=16, categories=16, classes=16, feature_dim=128,
            layers=1, heads=4, dropout=0.1, train_context=16, inference_context=24,
        ),
        agent=AgentConfig(hidden_dim=128),
        wm_batch_size=2,
        imagination_batch_size=64,
        imagination_context=4,
        imagination_horizon=16,
        env_context=8,
        prefill=400,
        checkpoint_every=2500,
    )


def tiny(seed: int = 0, env: str = "toy-ball") -> RunConfig:
    """Smallest structurally-complete configuration, for fast unit tests."""
    return RunConfig(
        env=env,
        seed=seed,
        total_env_steps=200,
        wm=WorldModelConfig(
            image_size=8, channels_base=4, categories=4, classes=4,
            feature_dim=16, layers=1, heads=2, dropout=0.0,
            train_context=8, inference_context=12,
        ),
        agent=AgentConfig(hidden_dim=16),
        buffer_capacity=512,
        wm_batch_size=2,
        imagination_batch_size=4,
        imagination_context=2,
        imagination_horizon=3,
        env_context=4,
        prefill=32,
        checkpoint_every=64,
    )
