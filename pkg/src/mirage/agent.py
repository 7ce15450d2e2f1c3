"""Actor-critic trained entirely on imagined rollouts.

The agent state concatenates the flattened latent sample with the sequence
hidden state (configurable to either alone).  Returns are bootstrapped
lambda-returns soft-discounted by predicted continuation probabilities;
advantages are normalized by the 95th-minus-5th percentile range of the
return batch, floored at 1.  The critic regresses bucketized values toward
both the lambda-return and a slow EMA copy of itself.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AgentConfig, WorldModelConfig
from .losses import BucketGrid
from .numerics import RngStreams, Tensor, trunc_normal_


def lambda_returns(rewards: Tensor, continuations: Tensor, values: Tensor,
                   gamma: float, lam: float) -> Tensor:
    """Bootstrapped lambda-returns over a trajectory batch.

    ``rewards`` and ``continuations`` cover the L action steps (..., L);
    ``values`` covers the L+1 visited states (..., L+1).  The last return
    equals the last value exactly; earlier entries satisfy
    G[t] = r[t] + gamma * c[t] * ((1 - lam) * v[t+1] + lam * G[t+1]).
    Returned shape is (..., L+1).
    """
    steps = rewards.shape[-1]
    if values.shape[-1] != steps + 1 or continuations.shape[-1] != steps:
        raise ValueError("need L rewards/continuations and L+1 values")
    out = [values[..., -1]]
    for t in range(steps - 1, -1, -1):
        bootstrap = (1.0 - lam) * values[..., t + 1] + lam * out[-1]
        out.append(rewards[..., t] + gamma * continuations[..., t] * bootstrap)
    out.reverse()
    return torch.stack(out, dim=-1)


def return_scale(returns: Tensor) -> Tensor:
    """Percentile range (95th - 5th) of the flattened return batch."""
    flat = returns.detach().reshape(-1)
    if flat.numel() == 0:
        raise ValueError("return batch is empty")
    q = torch.quantile(flat, torch.tensor([0.05, 0.95], dtype=flat.dtype, device=flat.device))
    return q[1] - q[0]


def ema_update(params: nn.Module, ema: nn.Module, decay: float) -> None:
    """In-place ema' = decay * ema + (1 - decay) * params, including buffers."""
    with torch.no_grad():
        for src, dst in zip(params.state_dict().values(), ema.state_dict().values()):
            if dst.dtype.is_floating_point:
                dst.mul_(decay).add_(src, alpha=1.0 - decay)
            else:
                dst.copy_(src)


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.ReLU(),
        nn.Linear(hidden, hidden), nn.ReLU(),
        nn.Linear(hidden, out_dim),
    )


class ActorCritic(nn.Module):
    def __init__(self, wm_cfg: WorldModelConfig, cfg: AgentConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.wm_cfg = wm_cfg
        hidden = cfg.hidden_dim or wm_cfg.feature_dim
        self.policy = _mlp(self.state_width, hidden, wm_cfg.action_count)
        self.critic = _mlp(self.state_width, hidden, cfg.value_buckets)
        self.critic_ema = _mlp(self.state_width, hidden, cfg.value_buckets)
        for p in self.critic_ema.parameters():
            p.requires_grad_(False)
        self.grid = BucketGrid(cfg.value_buckets)

    @property
    def state_width(self) -> int:
        mode = self.cfg.state_mode
        if mode == "both":
            return self.wm_cfg.latent_flat + self.wm_cfg.feature_dim
        if mode == "latent":
            return self.wm_cfg.latent_flat
        return self.wm_cfg.feature_dim

    def init_parameters(self, streams: RngStreams) -> None:
        gen = streams.init
        for module in self.modules():
            if isinstance(module, nn.Linear):
                trunc_normal_(module.weight, std=0.02, generator=gen)
                nn.init.zeros_(module.bias)
        self.critic_ema.load_state_dict(self.critic.state_dict())

    def build_state(self, z: Tensor, h: Tensor) -> Tensor:
        """Assemble the agent state from a latent sample and hidden state."""
        mode = self.cfg.state_mode
        if mode == "both":
            return torch.cat([z.flatten(-2), h], dim=-1)
        if mode == "latent":
            return z.flatten(-2)
        return h

    def policy_logits(self, states: Tensor) -> Tensor:
        return self.policy(states)

    def act(self, states: Tensor, generator: torch.Generator, greedy: bool = False) -> Tensor:
        logits = self.policy_logits(states)
        if greedy:
            return logits.argmax(dim=-1)
        probs = torch.softmax(logits, dim=-1)
        return torch.multinomial(probs.reshape(-1, probs.shape[-1]).detach(), 1,
                                 generator=generator).squeeze(-1).reshape(states.shape[:-1])

    def value(self, states: Tensor) -> Tensor:
        """Decoded scalar value of the current critic."""
        return self.grid.decode(self.critic(states))

    def value_ema(self, states: Tensor) -> Tensor:
        with torch.no_grad():
            return self.grid.decode(self.critic_ema(states))

    def actor_loss(self, states: Tensor, actions: Tensor, returns: Tensor,
                   values: Tensor, scale: Tensor | float) -> tuple[Tensor, Tensor]:
        """Advantage-weighted log-prob loss with an entropy bonus.

        The normalized advantage (returns - values) / max(1, scale) is
        treated as a constant: no gradient reaches the critic or the
        return targets.  Returns (loss, mean policy entropy).
        """
        logits = self.policy_logits(states)
        logp = F.log_softmax(logits, dim=-1)
        taken = logp.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
        denom = torch.clamp(torch.as_tensor(scale, dtype=states.dtype, device=states.device), min=1.0)
        advantage = ((returns - values) / denom).detach()
        entropy = -(logp.exp() * logp).sum(-1)
        loss = (-advantage * taken - self.cfg.entropy_coef * entropy).mean()
        return loss, entropy.mean().detach()

    def critic_loss(self, states: Tensor, returns: Tensor) -> Tensor:
        """Bucket cross-entropy toward sg(returns) and toward the EMA value."""
        logits = self.critic(states)
        target_return = self.grid.encode(returns.detach())
        with torch.no_grad():
            ema_value = self.grid.decode(self.critic_ema(states))
        target_ema = self.grid.encode(ema_value)
        logp = F.log_softmax(logits, dim=-1)
        return (-(target_return * logp).sum(-1) - (target_ema * logp).sum(-1)).mean()

    def update_ema(self) -> None:
        ema_update(self.critic, self.critic_ema, self.cfg.critic_ema_decay)
