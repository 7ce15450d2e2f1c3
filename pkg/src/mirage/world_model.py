"""Ties the codec, sequence core and heads into one trainable world model."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .codec import Decoder, Encoder, sample_straight_through
from .config import WorldModelConfig
from .losses import BucketGrid, WmLossReport, world_model_loss
from .numerics import RngStreams, Tensor, trunc_normal_
from .sequence import ActionMixer, DynamicsHead, KVCache, ScalarHead, SequenceModel


@dataclass
class WmOutputs:
    """Everything the loss needs from one training forward."""

    posterior_logits: Tensor   # (B, T, cat, cls)
    latents: Tensor            # (B, T, cat, cls) straight-through samples
    hidden: Tensor             # (B, T, D)
    prior_logits: Tensor       # (B, T-1, cat, cls), index t predicts step t+1
    recon: Tensor              # (B, T, C, S, S) or (B, T-1, ...) in rear mode
    reward_logits: Tensor      # (B, T, buckets)
    cont_logits: Tensor        # (B, T)


class WorldModel(nn.Module):
    def __init__(self, cfg: WorldModelConfig, buckets: int = 255) -> None:
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.mixer = ActionMixer(cfg)
        self.sequence = SequenceModel(cfg)
        self.dynamics_head = DynamicsHead(cfg)
        self.reward_head = ScalarHead(cfg, buckets)
        self.continuation_head = ScalarHead(cfg, 1)
        self.grid = BucketGrid(buckets)

    def init_parameters(self, streams: RngStreams) -> None:
        """Deterministic init from the named ``init`` stream.

        Linear and attention weights get truncated normal (std 0.02), biases
        zero, LayerNorm gain 1; conv kernels keep the fan-in uniform scheme
        but drawn from the stream so runs are seed-reproducible end to end.
        """
        gen = streams.init
        for module in self.modules():
            if isinstance(module, nn.Linear):
                trunc_normal_(module.weight, std=0.02, generator=gen)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = module.weight.shape[1] * module.weight.shape[2] * module.weight.shape[3]
                bound = (6.0 / fan_in) ** 0.5
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
                    if module.bias is not None:
                        module.bias.uniform_(-1.0 / fan_in ** 0.5, 1.0 / fan_in ** 0.5, generator=gen)
            elif isinstance(module, (nn.LayerNorm, nn.BatchNorm1d, nn.BatchNorm2d)):
                if module.weight is not None:
                    nn.init.ones_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
        with torch.no_grad():
            trunc_normal_(self.sequence.positions, std=0.02, generator=gen)

    # --- codec surface -------------------------------------------------

    def encode(self, obs: Tensor) -> Tensor:
        """Frames (N, C, S, S) -> posterior logits (N, cat, cls)."""
        return self.encoder(obs)

    def decode(self, z: Tensor) -> Tensor:
        """Latent one-hots (N, cat, cls) -> unclamped frames (N, C, S, S)."""
        return self.decoder(z)

    def sample_latent(self, logits: Tensor, generator: torch.Generator) -> Tensor:
        return sample_straight_through(logits, generator, self.cfg.unimix)

    # --- sequence surface ----------------------------------------------

    def new_cache(self, capacity: int | None = None) -> KVCache:
        return self.sequence.new_cache(capacity)

    def step(self, z: Tensor, action: Tensor, cache: KVCache) -> Tensor:
        """One cached sequence step; returns the new hidden state (B, D)."""
        token = self.mixer(z, action)
        return self.sequence.forward_step(token, cache)

    def predict_reward(self, h: Tensor | None, z: Tensor | None = None) -> Tensor:
        """Decoded scalar reward for hidden states (or latents at front)."""
        return self.grid.decode(self.reward_head(h=h, z=z))

    def predict_continuation(self, h: Tensor | None, z: Tensor | None = None) -> Tensor:
        """Probability in (0, 1) that the episode continues."""
        return torch.sigmoid(self.continuation_head(h=h, z=z).squeeze(-1))

    def predict_dynamics(self, h: Tensor) -> Tensor:
        return self.dynamics_head(h)

    # --- training ------------------------------------------------------

    def training_forward(self, obs: Tensor, actions: Tensor, streams: RngStreams) -> WmOutputs:
        """Run the full parallel forward over a (B, T) batch.

        Dropout draws from the ``dropout`` stream and latent samples from
        ``sampler``; call within ``model.train()`` for batch-stat
        normalization, ``model.eval()`` for frozen statistics.
        """
        b, t = obs.shape[:2]
        if t < 2:
            raise ValueError("world-model training needs sequences of length >= 2")
        post = self.encoder(obs.reshape(b * t, *obs.shape[2:])).view(b, t, self.cfg.categories, self.cfg.classes)
        z = self.sample_latent(post, streams.sampler)
        # The sequence path consumes detached latents: the encoder is shaped
        # by reconstruction and the representation KL only, so the dynamics
        # KL trains the sequence side alone and its encoder gradient is
        # exactly zero (the one-sided gradient contract of the KL pair).
        tokens = self.mixer(z.detach(), actions)
        h = self.sequence(tokens, dropout_generator=streams.dropout if self.training else None)
        prior = self.dynamics_head(h[:, :-1])

        if self.cfg.decoder_at_rear:
            z_pred = self.sample_latent(prior, streams.sampler)
            recon = self.decoder(z_pred.reshape(b * (t - 1), *z_pred.shape[2:])).view(b, t - 1, *obs.shape[2:])
        else:
            recon = self.decoder(z.reshape(b * t, *z.shape[2:])).view(b, t, *obs.shape[2:])

        reward_logits = self.reward_head(h=h, z=z.detach())
        cont_logits = self.continuation_head(h=h, z=z.detach()).squeeze(-1)
        return WmOutputs(
            posterior_logits=post, latents=z, hidden=h, prior_logits=prior,
            recon=recon, reward_logits=reward_logits, cont_logits=cont_logits,
        )

    def loss(
        self,
        obs: Tensor,
        actions: Tensor,
        rewards: Tensor,
        continuations: Tensor,
        streams: RngStreams,
        dyn_beta: float = 0.5,
        rep_beta: float = 0.1,
    ) -> tuple[WmLossReport, WmOutputs]:
        out = self.training_forward(obs, actions, streams)
        report = world_model_loss(
            obs=obs,
            rewards=rewards,
            continuations=continuations,
            recon=out.recon,
            reward_logits=out.reward_logits,
            cont_logits=out.cont_logits,
            posterior_logits=out.posterior_logits[:, 1:],
            prior_logits=out.prior_logits,
            grid=self.grid,
            dyn_beta=dyn_beta,
            rep_beta=rep_beta,
            unimix=self.cfg.unimix,
            rec_positions=slice(1, None) if self.cfg.decoder_at_rear else slice(None),
        )
        return report, out

    # --- acting --------------------------------------------------------

    @torch.no_grad()
    def context_hidden(self, latents: Tensor, actions: Tensor) -> Tensor:
        """Hidden state summarizing past (latent, action) pairs, (B, D).

        Used when acting in the real environment: the state pairs the
        current posterior sample with the hidden state of the steps before
        it.  With no history, the hidden part is zero.
        """
        if latents.shape[1] == 0:
            return torch.zeros(latents.shape[0], self.cfg.feature_dim,
                               dtype=latents.dtype, device=latents.device)
        tokens = self.mixer(latents, actions)
        return self.sequence(tokens)[:, -1]
