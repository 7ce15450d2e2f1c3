"""Training orchestration: the collect / world-model / agent loop.

Each environment step runs three phases in order: act in the real
environment and append the transition, update the world model on a sampled
trajectory batch, update the agent on freshly imagined rollouts.
Checkpoints capture everything needed to resume bit-exactly, including the
replay buffer, environment state, acting context and every RNG stream.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .agent import ActorCritic, lambda_returns, return_scale
from .config import RunConfig, from_flat_dict, to_flat_dict
from .envs import BridgeConnection, BridgeEnv, EnvStep, make_toy_env
from .imagination import rollout, warmup
from .numerics import RngStreams
from .replay import ReplayBuffer, Step, load_trajectory
from .world_model import WorldModel

CHECKPOINT_VERSION = 1


class NanHaltError(RuntimeError):
    """Raised when a loss goes non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, last_checkpoint: str | None) -> None:
        super().__init__(message + (f" (last good checkpoint: {last_checkpoint})"
                                    if last_checkpoint else " (no checkpoint saved yet)"))
        self.last_checkpoint = last_checkpoint


class CheckpointMismatchError(RuntimeError):
    pass


def make_env(cfg: RunConfig):
    if cfg.env in ("toy-ball", "toy-keydoor"):
        return make_toy_env(cfg.env, size=cfg.wm.image_size)
    if cfg.env == "bridge":
        if not cfg.bridge_address:
            raise ValueError("bridge env needs bridge_address (host:port)")
        conn = BridgeConnection.connect(cfg.bridge_address)
        return BridgeEnv(conn, size=cfg.wm.image_size, frame_skip=cfg.frame_skip)
    raise ValueError(f"unknown env {cfg.env!r}")


@dataclass
class EpisodeStats:
    returns: list[float] = field(default_factory=list)
    current_return: float = 0.0
    current_length: int = 0
    steps_at_return: list[int] = field(default_factory=list)
    first_reward_step: int | None = None


class Collector:
    """Owns the real environment, the acting context and the replay buffer."""

    def __init__(self, cfg: RunConfig, env, model: WorldModel, agent: ActorCritic,
                 buffer: ReplayBuffer, streams: RngStreams) -> None:
        self.cfg = cfg
        self.env = env
        self.model = model
        self.agent = agent
        self.buffer = buffer
        self.streams = streams
        self.context_z: list[torch.Tensor] = []   # one-hot samples of past steps
        self.context_a: list[int] = []
        self.obs: np.ndarray | None = None
        self.stats = EpisodeStats()
        self._pending_z: torch.Tensor | None = None

    def reset_env(self) -> None:
        self.obs = self.env.reset(self.streams.env)
        self.context_z.clear()
        self.context_a.clear()
        self.stats.current_return = 0.0
        self.stats.current_length = 0

    @torch.no_grad()
    def policy_action(self, greedy: bool = False) -> int:
        """Act on the posterior state over the recent real context."""
        obs = torch.from_numpy(self.obs).to(torch.float32).div_(255.0).permute(2, 0, 1)
        obs = obs.unsqueeze(0).to(next(self.model.parameters()).device)
        post = self.model.encode(obs)
        z = self.model.sample_latent(post, self.streams.policy)
        if self.context_z:
            latents = torch.stack(self.context_z, dim=0).unsqueeze(0)
            actions = torch.tensor(self.context_a, dtype=torch.long, device=obs.device).unsqueeze(0)
            h = self.model.context_hidden(latents, actions)
        else:
            h = torch.zeros(1, self.model.cfg.feature_dim, dtype=obs.dtype, device=obs.device)
        state = self.agent.build_state(z, h)
        action = int(self.agent.act(state, self.streams.policy, greedy=greedy).item())
        self._pending_z = z[0].detach()
        return action

    def random_action(self) -> int:
        self._pending_z = None
        return int(torch.randint(0, self.cfg.wm.action_count, (1,),
                                 generator=self.streams.policy).item())

    def step(self, env_step_index: int, random_policy: bool) -> EnvStep:
        """One S1 iteration: pick an action, step the env, store the step."""
        if self.obs is None:
            self.reset_env()
        action = self.random_action() if random_policy else self.policy_action()
        result = self.env.step(action)
        cont = 0 if (result.done or result.life_lost) else 1
        self.buffer.append(Step(obs=self.obs, action=action, reward=result.reward, cont=cont))

        self.stats.current_return += result.reward
        self.stats.current_length += 1
        if result.reward != 0 and self.stats.first_reward_step is None:
            self.stats.first_reward_step = env_step_index

        if self._pending_z is not None:
            self.context_z.append(self._pending_z)
            self.context_a.append(action)
            if len(self.context_z) > self.cfg.env_context:
                self.context_z.pop(0)
                self.context_a.pop(0)
        if result.done:
            self.stats.returns.append(self.stats.current_return)
            self.stats.steps_at_return.append(env_step_index)
            self.reset_env()
        else:
            self.obs = result.obs
        return result

    def state_dict(self) -> dict:
        return {
            "context_z": [z.clone() for z in self.context_z],
            "context_a": list(self.context_a),
            "obs": None if self.obs is None else self.obs.copy(),
            "env": self.env.state_dict() if hasattr(self.env, "state_dict") else None,
            "stats": {
                "returns": list(self.stats.returns),
                "current_return": self.stats.current_return,
                "current_length": self.stats.current_length,
                "steps_at_return": list(self.stats.steps_at_return),
                "first_reward_step": self.stats.first_reward_step,
            },
        }

    def load_state_dict(self, state: dict) -> None:
        self.context_z = [z.clone() for z in state["context_z"]]
        self.context_a = list(state["context_a"])
        self.obs = None if state["obs"] is None else state["obs"].copy()
        if state["env"] is not None and hasattr(self.env, "load_state_dict"):
            self.env.load_state_dict(state["env"])
        s = state["stats"]
        self.stats = EpisodeStats(
            returns=list(s["returns"]), current_return=s["current_return"],
            current_length=s["current_length"], steps_at_return=list(s["steps_at_return"]),
            first_reward_step=s["first_reward_step"],
        )


class Trainer:
    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None) -> None:
        self.cfg = cfg
        self.device = torch.device(cfg.device)
        self.streams = RngStreams(seed=cfg.seed, device=cfg.device)
        self.model = WorldModel(cfg.wm).to(self.device)
        self.agent = ActorCritic(cfg.wm, cfg.agent).to(self.device)
        self.model.init_parameters(self.streams)
        self.agent.init_parameters(self.streams)
        self.model.eval()

        self.wm_opt = torch.optim.Adam(self.model.parameters(), lr=cfg.wm_lr)
        ac_params = list(self.agent.policy.parameters()) + list(self.agent.critic.parameters())
        self.ac_opt = torch.optim.Adam(ac_params, lr=cfg.ac_lr)
        self._ac_params = ac_params

        obs_shape = (cfg.wm.image_size, cfg.wm.image_size, cfg.wm.image_channels)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, obs_shape=obs_shape)
        self.env = make_env(cfg)
        self.collector = Collector(cfg, self.env, self.model, self.agent, self.buffer, self.streams)
        self.env_step = 0
        self.last_checkpoint: str | None = None

        self.out_dir = Path(out_dir) if out_dir else None
        self._metrics_file = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "checkpoints").mkdir(exist_ok=True)
            self._metrics_file = open(self.out_dir / "metrics.jsonl", "a", buffering=1 << 16)

        if cfg.demo_path:
            steps, action_count = load_trajectory(cfg.demo_path, obs_shape=obs_shape)
            if steps and action_count != cfg.wm.action_count:
                raise ValueError(
                    f"demo has {action_count} actions, config expects {cfg.wm.action_count}")
            if steps:
                self.buffer.inject_demonstration(steps)

    # --- updates ---------------------------------------------------------

    def world_model_update(self) -> dict[str, float]:
        batch = self.buffer.sample_sequences(self.cfg.wm_batch_size, self.cfg.wm.train_context,
                                             self.streams.sampler)
        obs = batch["obs"].to(self.device)
        actions = batch["actions"].to(self.device)
        rewards = batch["rewards"].to(self.device)
        conts = batch["conts"].to(self.device)
        self.model.train()
        try:
            report, _ = self.model.loss(obs, actions, rewards, conts, self.streams,
                                        dyn_beta=self.cfg.reward_beta, rep_beta=self.cfg.repr_beta)
        except FloatingPointError as exc:
            raise NanHaltError(str(exc), self.last_checkpoint) from exc
        finally:
            self.model.eval()
        self.wm_opt.zero_grad()
        report.total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.wm_grad_clip)
        self.wm_opt.step()
        return {f"wm_{k}": v for k, v in report.scalars().items()}

    def agent_update(self) -> dict[str, float]:
        cfg = self.cfg
        batch = self.buffer.sample_sequences(cfg.imagination_batch_size, cfg.imagination_context,
                                             self.streams.sampler)
        obs = batch["obs"].to(self.device)
        actions = batch["actions"].to(self.device)
        start = warmup(self.model, self.agent, obs, actions, self.streams)
        out = rollout(self.model, self.agent, *start, horizon=cfg.imagination_horizon,
                      streams=self.streams)
        horizon = cfg.imagination_horizon
        with torch.no_grad():
            values = self.agent.value(out.states)
        returns = lambda_returns(out.rewards, out.continuations, values,
                                 cfg.agent.gamma, cfg.agent.return_lambda)
        scale = return_scale(returns[:, :horizon])
        actor_loss, entropy = self.agent.actor_loss(
            out.states[:, :horizon], out.actions, returns[:, :horizon],
            values[:, :horizon], scale)
        critic_loss = self.agent.critic_loss(out.states[:, :horizon], returns[:, :horizon])
        total = actor_loss + critic_loss
        if not torch.isfinite(total):
            raise NanHaltError("non-finite actor-critic loss", self.last_checkpoint)
        self.ac_opt.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(self._ac_params, cfg.ac_grad_clip)
        self.ac_opt.step()
        self.agent.update_ema()
        return {
            "actor_loss": float(actor_loss.detach()), "critic_loss": float(critic_loss.detach()),
            "policy_entropy": float(entropy), "return_scale": float(scale),
            "imagined_return_mean": float(returns[:, :horizon].mean()),
        }

    # --- loop --------------------------------------------------------------

    def train(self, total_steps: int | None = None, metrics_hook=None) -> str | None:
        """Run the loop for ``total_steps`` (default: config).  Returns the
        final checkpoint path when an output directory is configured."""
        cfg = self.cfg
        target = self.env_step + (total_steps if total_steps is not None else cfg.total_env_steps)
        start_wall = time.perf_counter()
        while self.env_step < target:
            record: dict = {"env_step": self.env_step + 1}
            t0 = time.perf_counter()
            random_policy = self.env_step < cfg.prefill
            self.collector.step(self.env_step + 1, random_policy=random_policy)
            t1 = time.perf_counter()
            can_update = (not random_policy
                          and len(self.buffer) >= max(cfg.wm.train_context, cfg.imagination_context + 1))
            if can_update and (self.env_step + 1) % cfg.update_wm_every == 0:
                record.update(self.world_model_update())
            t2 = time.perf_counter()
            if can_update and (self.env_step + 1) % cfg.update_agent_every == 0:
                record.update(self.agent_update())
            t3 = time.perf_counter()

            self.env_step += 1
            record["wall_time"] = time.perf_counter() - start_wall
            record["phase_seconds"] = {"collect": t1 - t0, "world_model": t2 - t1, "agent": t3 - t2}
            if self.collector.stats.returns and self.collector.stats.steps_at_return \
                    and self.collector.stats.steps_at_return[-1] == self.env_step:
                record["episode_return"] = self.collector.stats.returns[-1]
            record["fps"] = self.env_step / max(record["wall_time"], 1e-9)
            self._write_metrics(record)
            if metrics_hook:
                metrics_hook(record)
            if self.out_dir and self.env_step % cfg.checkpoint_every == 0:
                self.save_checkpoint(self.out_dir / "checkpoints" / f"step_{self.env_step}.pt")
        if self.out_dir:
            final = self.out_dir / "checkpoints" / f"step_{self.env_step}.pt"
            if not final.exists():
                self.save_checkpoint(final)
            return str(final)
        return None

    def _write_metrics(self, record: dict) -> None:
        if self._metrics_file:
            self._metrics_file.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._metrics_file:
            self._metrics_file.close()
            self._metrics_file = None
        if hasattr(self.env, "close"):
            self.env.close()

    # --- checkpointing -------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": CHECKPOINT_VERSION,
            "config": to_flat_dict(self.cfg),
            "config_fingerprint": self.cfg.fingerprint(),
            "env_step": self.env_step,
            "model": self.model.state_dict(),
            "agent": self.agent.state_dict(),
            "wm_opt": self.wm_opt.state_dict(),
            "ac_opt": self.ac_opt.state_dict(),
            "rng": self.streams.state_dict(),
            "collector": self.collector.state_dict(),
            "buffer": self.buffer.state_dict() if self.cfg.checkpoint_buffer else None,
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        os.replace(tmp, path)
        self.last_checkpoint = str(path)
        return str(path)

    def load_checkpoint(self, path: str | Path) -> None:
        payload = torch.load(path, map_location=self.device, weights_only=False)
        if payload["version"] != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(f"checkpoint version {payload['version']} unsupported")
        mismatches = _shape_mismatches(self.model.state_dict(), payload["model"])
        mismatches += _shape_mismatches(self.agent.state_dict(), payload["agent"])
        if mismatches:
            raise CheckpointMismatchError(
                "checkpoint does not fit the configured architecture:\n  " + "\n  ".join(mismatches))
        self.model.load_state_dict(payload["model"])
        self.agent.load_state_dict(payload["agent"])
        self.wm_opt.load_state_dict(payload["wm_opt"])
        self.ac_opt.load_state_dict(payload["ac_opt"])
        self.streams.load_state_dict(payload["rng"])
        self.collector.load_state_dict(payload["collector"])
        if payload["buffer"] is not None:
            self.buffer.load_state_dict(payload["buffer"])
        self.env_step = payload["env_step"]
        self.last_checkpoint = str(path)


def _shape_mismatches(current: dict, loaded: dict) -> list[str]:
    problems = []
    for key in current:
        if key not in loaded:
            problems.append(f"missing tensor {key}")
        elif tuple(current[key].shape) != tuple(loaded[key].shape):
            problems.append(f"{key}: checkpoint {tuple(loaded[key].shape)} vs model {tuple(current[key].shape)}")
    for key in loaded:
        if key not in current:
            problems.append(f"unexpected tensor {key}")
    return problems


def load_trainer(checkpoint_path: str | Path, device: str | None = None,
                 out_dir: str | Path | None = None) -> Trainer:
    """Rebuild a Trainer from a checkpoint's own stored configuration."""
    payload = torch.load(checkpoint_path, map_location="cpu", weights_only=False)
    cfg = from_flat_dict(payload["config"])
    if device:
        cfg.device = device
    trainer = Trainer(cfg, out_dir=out_dir)
    trainer.load_checkpoint(checkpoint_path)
    return trainer


# --- evaluation -------------------------------------------------------------

@torch.no_grad()
def evaluate(trainer: Trainer, episodes: int = 20, seed_offset: int = 1_000_003,
             random_anchor: float | None = None, human_anchor: float | None = None,
             max_steps: int = 1000, random_policy: bool = False) -> dict:
    """Greedy-policy evaluation over fresh episodes.

    Returns per-episode scores, mean/median, and the human-normalized score
    when both anchors are provided.
    """
    cfg = trainer.cfg
    env = make_env(cfg)
    streams = RngStreams(seed=cfg.seed + seed_offset, device=cfg.device)
    scores = []
    for _ in range(episodes):
        collector = Collector(cfg, env, trainer.model, trainer.agent,
                              _NullBuffer(), streams)
        collector.reset_env()
        total, done = 0.0, False
        for _ in range(max_steps):
            if random_policy:
                action = collector.random_action()
            else:
                action = collector.policy_action(greedy=True)
            result = env.step(action)
            total += result.reward
            if collector._pending_z is not None:
                collector.context_z.append(collector._pending_z)
                collector.context_a.append(action)
                if len(collector.context_z) > cfg.env_context:
                    collector.context_z.pop(0)
                    collector.context_a.pop(0)
            if result.done:
                done = True
                break
            collector.obs = result.obs
        scores.append(total)
    if hasattr(env, "close"):
        env.close()
    result = {
        "episodes": episodes,
        "scores": scores,
        "mean_return": float(np.mean(scores)),
        "median_return": float(np.median(scores)),
    }
    if random_anchor is not None and human_anchor is not None:
        result["human_normalized"] = human_normalized_score(
            result["mean_return"], random_anchor, human_anchor)
    return result


def human_normalized_score(agent_score: float, random_score: float, human_score: float) -> float:
    """tau = (A - R) / (H - R)."""
    return (agent_score - random_score) / (human_score - random_score)


class _NullBuffer:
    def append(self, step) -> None:
        pass


# --- throughput benchmark -----------------------------------------------------

def benchmark_fps(cfg: RunConfig, steps: int = 50, warmup_steps: int = 5) -> dict:
    """Time the three loop phases and report frames-per-second figures."""
    trainer = Trainer(cfg)
    # Make updates start immediately: prefill only what sampling requires.
    needed = max(cfg.wm.train_context, cfg.imagination_context + 1)
    trainer.cfg.prefill = needed
    phases = {"collect": 0.0, "world_model": 0.0, "agent": 0.0}
    measured = {"n": 0, "total": 0.0}

    def hook(record):
        if record["env_step"] <= needed + warmup_steps:
            return
        for key in phases:
            phases[key] += record["phase_seconds"][key]
        measured["n"] += 1
        measured["total"] += sum(record["phase_seconds"].values())

    trainer.train(total_steps=needed + warmup_steps + steps, metrics_hook=hook)
    trainer.close()
    n = max(measured["n"], 1)
    frame_multiplier = cfg.frame_skip if cfg.env == "bridge" else 1
    env_fps = n / measured["total"] if measured["total"] > 0 else 0.0
    return {
        "device": cfg.device,
        "config_fingerprint": cfg.fingerprint(),
        "measured_steps": n,
        "env_steps_per_second": env_fps,
        "frames_per_second": env_fps * frame_multiplier,
        "phase_seconds_per_step": {k: v / n for k, v in phases.items()},
        "total_seconds_per_step": measured["total"] / n,
    }
