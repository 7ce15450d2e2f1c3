"""On-model rollouts: the agent's entire training data source.

A rollout starts from a short real context: each context frame is encoded
to its posterior distribution, sampled, and pushed through the cached
sequence model.  From there the model runs closed-loop for L steps: the
policy picks an action, the sequence model advances one cached step, the
heads produce reward/continuation, and the next latent is sampled from the
predicted distribution.  No real observation is consulted after the
context, and no gradients flow into world-model parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .agent import ActorCritic
from .numerics import RngStreams, Tensor
from .sequence import KVCache
from .world_model import WorldModel


@dataclass
class ImaginedRollout:
    """L-step imagined experience: L+1 states, L of everything else."""

    states: Tensor         # (B, L+1, state_width)
    actions: Tensor        # (B, L)
    rewards: Tensor        # (B, L) decoded scalars
    continuations: Tensor  # (B, L) probabilities in (0, 1)
    log_probs: Tensor      # (B, L) log pi(a_t | s_t) at sampling time


@torch.no_grad()
def warmup(
    model: WorldModel,
    agent: ActorCritic,
    obs: Tensor,
    actions: Tensor,
    streams: RngStreams,
) -> tuple[Tensor, Tensor, Tensor, KVCache]:
    """Prime a cache from real context steps (B, C, ...).

    Returns (state, z, h, cache) where ``state`` pairs a latent sampled from
    the model's own prediction for the next step with the hidden state that
    produced it, matching how the rollout continues from there.
    """
    b, c = obs.shape[:2]
    if c < 1:
        raise ValueError("warmup context must contain at least one step")
    post = model.encode(obs.reshape(b * c, *obs.shape[2:])).view(
        b, c, model.cfg.categories, model.cfg.classes)
    z_ctx = model.sample_latent(post, streams.sampler)
    cache = model.new_cache()
    for t in range(c):
        h = model.step(z_ctx[:, t], actions[:, t], cache)
    prior = model.predict_dynamics(h)
    z = model.sample_latent(prior, streams.sampler)
    state = agent.build_state(z, h)
    return state, z, h, cache


@torch.no_grad()
def rollout(
    model: WorldModel,
    agent: ActorCritic,
    state: Tensor,
    z: Tensor,
    h: Tensor,
    cache: KVCache,
    horizon: int,
    streams: RngStreams,
    greedy: bool = False,
) -> ImaginedRollout:
    """Autoregressive prior rollout of ``horizon`` steps from a warm cache."""
    states, acts, rews, conts, logps = [state], [], [], [], []
    for _ in range(horizon):
        logits = agent.policy_logits(state)
        if greedy:
            action = logits.argmax(dim=-1)
        else:
            probs = torch.softmax(logits, dim=-1)
            action = torch.multinomial(probs, 1, generator=streams.policy).squeeze(-1)
        logp = torch.log_softmax(logits, dim=-1).gather(-1, action.unsqueeze(-1)).squeeze(-1)
        h = model.step(z, action, cache)
        front_z = z if model.cfg.predictor_at_front else None
        rews.append(model.predict_reward(h, z=front_z))
        conts.append(model.predict_continuation(h, z=front_z))
        prior = model.predict_dynamics(h)
        z = model.sample_latent(prior, streams.sampler)
        state = agent.build_state(z, h)
        states.append(state)
        acts.append(action)
        logps.append(logp)
    return ImaginedRollout(
        states=torch.stack(states, dim=1),
        actions=torch.stack(acts, dim=1),
        rewards=torch.stack(rews, dim=1),
        continuations=torch.stack(conts, dim=1),
        log_probs=torch.stack(logps, dim=1),
    )


@torch.no_grad()
def imagine_frames(
    model: WorldModel,
    obs: Tensor,
    actions: Tensor,
    context: int,
    streams: RngStreams,
) -> tuple[Tensor, Tensor]:
    """Action-conditioned video prediction for a single trajectory.

    ``obs``/``actions`` hold ``context`` real steps followed by the actions
    of the steps to imagine.  Returns (posterior reconstructions of the
    context, decoded imagined frames for the remaining actions), both
    clamped to [0, 1].  The decoder sits outside the rollout loop: only the
    dynamics path feeds back.
    """
    total = actions.shape[1]
    if obs.shape[1] < context or total <= context:
        raise ValueError("need `context` observed steps and at least one action beyond them")
    b = obs.shape[0]
    ctx_obs = obs[:, :context]
    post = model.encode(ctx_obs.reshape(b * context, *obs.shape[2:])).view(
        b, context, model.cfg.categories, model.cfg.classes)
    z_ctx = model.sample_latent(post, streams.sampler)
    recon_ctx = model.decode(z_ctx.reshape(b * context, *z_ctx.shape[2:])).view(
        b, context, *obs.shape[2:]).clamp(0.0, 1.0)

    cache = model.new_cache(capacity=max(total, model.cfg.inference_context))
    for t in range(context):
        h = model.step(z_ctx[:, t], actions[:, t], cache)
    frames = []
    for t in range(context, total):
        z = model.sample_latent(model.predict_dynamics(h), streams.sampler)
        frames.append(model.decode(z).clamp(0.0, 1.0))
        h = model.step(z, actions[:, t], cache)
    return recon_ctx, torch.stack(frames, dim=1)
