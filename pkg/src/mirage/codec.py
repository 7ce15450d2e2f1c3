"""Categorical VAE over pixel frames.

The encoder maps a frame to a grid of categorical distributions (one row of
class logits per latent variable); the decoder maps a one-hot sample back to
pixel space.  Sampling keeps gradients through the straight-through trick:
the forward value is a hard one-hot, the backward path behaves like the
softmax probabilities.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import WorldModelConfig
from .numerics import Tensor


def latent_probs(logits: Tensor, unimix: float = 0.0) -> Tensor:
    """Per-category class probabilities, optionally mixed with uniform.

    ``logits`` has shape (..., categories, classes).  A nonzero ``unimix``
    floor keeps KL terms finite when a class saturates; default is off.
    """
    probs = torch.softmax(logits, dim=-1)
    if unimix > 0.0:
        probs = (1.0 - unimix) * probs + unimix / logits.shape[-1]
    return probs


def sample_straight_through(logits: Tensor, generator: torch.Generator, unimix: float = 0.0) -> Tensor:
    """Sample hard one-hots whose gradient is the softmax gradient.

    Returns a tensor shaped like ``logits`` where each (..., classes) row is
    one-hot in value; backward sees ``one_hot + probs - sg(probs)``.
    """
    probs = latent_probs(logits, unimix)
    flat = probs.reshape(-1, probs.shape[-1])
    idx = torch.multinomial(flat.detach(), 1, generator=generator).squeeze(-1)
    hard = F.one_hot(idx, num_classes=probs.shape[-1]).to(probs.dtype).reshape(probs.shape)
    # Parenthesized so the correction is an exact zero in the forward value.
    return hard + (probs - probs.detach())


def latent_mode(logits: Tensor) -> Tensor:
    """Deterministic argmax one-hot (no gradient); used for probes only."""
    idx = logits.argmax(dim=-1)
    return F.one_hot(idx, num_classes=logits.shape[-1]).to(logits.dtype)


class Encoder(nn.Module):
    """Strided conv stack: frame (C, S, S) -> latent logits (categories, classes).

    Each stage is Conv(kernel 4, stride 2, padding 1) + BatchNorm + ReLU and
    halves the spatial size; widths double per stage from ``channels_base``.
    The 4x4 output map is flattened and projected to the logit grid.
    """

    def __init__(self, cfg: WorldModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        blocks: list[nn.Module] = []
        in_ch = cfg.image_channels
        ch = cfg.channels_base
        for _ in range(cfg.conv_stages):
            blocks += [nn.Conv2d(in_ch, ch, 4, stride=2, padding=1), nn.BatchNorm2d(ch), nn.ReLU()]
            in_ch, ch = ch, ch * 2
        self.backbone = nn.Sequential(*blocks)
        self.head = nn.Linear(in_ch * 16, cfg.latent_flat)

    def forward(self, obs: Tensor) -> Tensor:
        expected = (self.cfg.image_channels, self.cfg.image_size, self.cfg.image_size)
        if obs.dim() != 4 or tuple(obs.shape[1:]) != expected:
            raise ValueError(
                f"expected observations shaped (N, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(obs.shape)}"
            )
        feat = self.backbone(obs).flatten(1)
        logits = self.head(feat)
        return logits.view(obs.shape[0], self.cfg.categories, self.cfg.classes)


class Decoder(nn.Module):
    """Mirror of the encoder: one-hot latents -> unclamped frame.

    The latent grid is flattened, lifted to the 4x4 conv map, then upsampled
    by transpose convs (kernel 4, stride 2, padding 1).  The final layer has
    no activation; clamp to [0, 1] only when exporting images.
    """

    def __init__(self, cfg: WorldModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        top_ch = cfg.channels_base * (2 ** (cfg.conv_stages - 1))
        self.lift = nn.Sequential(
            nn.Linear(cfg.latent_flat, top_ch * 16),
            nn.BatchNorm1d(top_ch * 16),
            nn.ReLU(),
        )
        self.top_ch = top_ch
        blocks: list[nn.Module] = []
        ch = top_ch
        for stage in range(cfg.conv_stages - 1):
            blocks += [
                nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1),
                nn.BatchNorm2d(ch // 2),
                nn.ReLU(),
            ]
            ch //= 2
        blocks.append(nn.ConvTranspose2d(ch, cfg.image_channels, 4, stride=2, padding=1))
        self.backbone = nn.Sequential(*blocks)

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[-2:] != (self.cfg.categories, self.cfg.classes):
            raise ValueError(
                f"expected latents shaped (N, {self.cfg.categories}, {self.cfg.classes}), "
                f"got {tuple(z.shape)}"
            )
        x = self.lift(z.flatten(1))
        x = x.view(z.shape[0], self.top_ch, 4, 4)
        return self.backbone(x)
