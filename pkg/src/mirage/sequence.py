"""GPT-style causal sequence core and its prediction heads.

One token per timestep: the action mixer fuses a latent sample with the
action taken, a learnable positional table plus LayerNorm prepares the
sequence, and K post-norm blocks (masked self-attention, then a 2x-wide
feed-forward) produce hidden states.  ``forward_step`` runs the same math
one token at a time against cached keys/values, so an L-step rollout costs
O(L) token computations instead of re-encoding the prefix each step.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import WorldModelConfig
from .numerics import Tensor, stream_dropout


class CacheOverflowError(RuntimeError):
    pass


class ContextLengthError(RuntimeError):
    pass


class KVCache:
    """Per-layer key/value store for stepwise inference.

    Append-only within one rollout; one cache per rollout, never shared.
    Keys/values are kept as (batch, heads, stored_len, head_dim).
    """

    def __init__(self, layers: int, capacity: int) -> None:
        self.capacity = capacity
        self.keys: list[Tensor | None] = [None] * layers
        self.values: list[Tensor | None] = [None] * layers

    @property
    def stored_len(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[2]

    def append(self, layer: int, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = torch.cat([self.keys[layer], k], dim=2)
            self.values[layer] = torch.cat([self.values[layer], v], dim=2)
        return self.keys[layer], self.values[layer]


class ActionMixer(nn.Module):
    """Fuse a latent sample with a one-hot action into one token.

    Flattened latents are concatenated with the action one-hot, then pushed
    through Linear+LN+ReLU and Linear+LN to the transformer width.
    """

    def __init__(self, cfg: WorldModelConfig) -> None:
        super().__init__()
        d = cfg.feature_dim
        self.action_count = cfg.action_count
        self.fc1 = nn.Linear(cfg.latent_flat + cfg.action_count, d)
        self.ln1 = nn.LayerNorm(d)
        self.fc2 = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)

    def forward(self, z: Tensor, action: Tensor) -> Tensor:
        if action.min() < 0 or action.max() >= self.action_count:
            raise IndexError(f"action out of range [0, {self.action_count})")
        a = F.one_hot(action, num_classes=self.action_count).to(z.dtype)
        x = torch.cat([z.flatten(-2), a], dim=-1)
        x = F.relu(self.ln1(self.fc1(x)))
        return self.ln2(self.fc2(x))


class Block(nn.Module):
    """Post-norm transformer block: MHSA -> proj -> +res -> LN, FFN -> +res -> LN."""

    def __init__(self, cfg: WorldModelConfig) -> None:
        super().__init__()
        d = cfg.feature_dim
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads
        self.dropout_p = cfg.dropout
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln1 = nn.LayerNorm(d)
        self.ffn_in = nn.Linear(d, 2 * d)
        self.ffn_out = nn.Linear(2 * d, d)
        self.ln2 = nn.LayerNorm(d)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None) -> Tensor:
        att = q @ k.transpose(-2, -1) / (self.head_dim ** 0.5)
        if mask is not None:
            att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        out = att @ v
        b, _, t, _ = out.shape
        return out.transpose(1, 2).reshape(b, t, self.heads * self.head_dim)

    def forward(self, x: Tensor, mask: Tensor, training: bool, gen: torch.Generator | None) -> Tensor:
        qkv = self.qkv(x)
        q, k, v = (self._split(part) for part in qkv.chunk(3, dim=-1))
        att = self.proj(self._attend(q, k, v, mask))
        x = self.ln1(x + stream_dropout(att, self.dropout_p, training, gen))
        ff = self.ffn_out(F.relu(self.ffn_in(x)))
        return self.ln2(x + stream_dropout(ff, self.dropout_p, training, gen))

    def forward_step(self, x: Tensor, cache: KVCache, layer: int) -> Tensor:
        # x is one token: (batch, 1, d); attends over cache plus itself.
        qkv = self.qkv(x)
        q, k, v = (self._split(part) for part in qkv.chunk(3, dim=-1))
        k, v = cache.append(layer, k, v)
        att = self.proj(self._attend(q, k, v, None))
        x = self.ln1(x + att)
        ff = self.ffn_out(F.relu(self.ffn_in(x)))
        return self.ln2(x + ff)


class SequenceModel(nn.Module):
    """Positional encoding plus K causal blocks; batched and stepwise paths.

    Dropout is active only on the batched training path (and only when the
    module is in training mode); stepwise inference is always deterministic
    so cached and recomputed hidden states agree.
    """

    def __init__(self, cfg: WorldModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.positions = nn.Parameter(torch.zeros(cfg.max_position, cfg.feature_dim))
        self.pos_norm = nn.LayerNorm(cfg.feature_dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))

    def new_cache(self, capacity: int | None = None) -> KVCache:
        return KVCache(self.cfg.layers, capacity or self.cfg.inference_context)

    def forward(self, tokens: Tensor, dropout_generator: torch.Generator | None = None) -> Tensor:
        b, t, _ = tokens.shape
        if t > self.cfg.max_position:
            raise ContextLengthError(f"sequence length {t} exceeds max context {self.cfg.max_position}")
        x = self.pos_norm(tokens + self.positions[:t])
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=tokens.device), diagonal=1)
        for block in self.blocks:
            x = block(x, mask, self.training, dropout_generator)
        return x

    def forward_step(self, token: Tensor, cache: KVCache) -> Tensor:
        """Advance one position; appends this step's keys/values to the cache."""
        pos = cache.stored_len
        if pos >= cache.capacity:
            raise CacheOverflowError(f"KV cache full at {cache.capacity} steps")
        if pos >= self.cfg.max_position:
            raise ContextLengthError(f"position {pos} exceeds max context {self.cfg.max_position}")
        x = self.pos_norm(token.unsqueeze(1) + self.positions[pos])
        for layer, block in enumerate(self.blocks):
            x = block.forward_step(x, cache, layer)
        return x.squeeze(1)


class DynamicsHead(nn.Module):
    """Single linear map from a hidden state to next-step latent logits."""

    def __init__(self, cfg: WorldModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.fc = nn.Linear(cfg.feature_dim, cfg.latent_flat)

    def forward(self, h: Tensor) -> Tensor:
        return self.fc(h).view(*h.shape[:-1], self.cfg.categories, self.cfg.classes)


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.ReLU(),
        nn.Linear(hidden, hidden), nn.ReLU(),
        nn.Linear(hidden, out_dim),
    )


class ScalarHead(nn.Module):
    """3-layer MLP head; reads h by default, or a projected latent when the
    predictor-at-front rearrangement is active."""

    def __init__(self, cfg: WorldModelConfig, out_dim: int) -> None:
        super().__init__()
        d = cfg.feature_dim
        self.mlp = _mlp(d, d, out_dim)
        self.from_latent = nn.Linear(cfg.latent_flat, d) if cfg.predictor_at_front else None

    def forward(self, h: Tensor | None = None, z: Tensor | None = None) -> Tensor:
        if self.from_latent is not None:
            if z is None:
                raise ValueError("predictor-at-front head needs the latent sample")
            return self.mlp(self.from_latent(z.flatten(-2)))
        if h is None:
            raise ValueError("head needs the hidden state")
        return self.mlp(h)
