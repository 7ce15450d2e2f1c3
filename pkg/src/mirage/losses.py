"""World-model training losses.

Reconstruction is pixel-averaged squared error.  Reward (and critic) scalars
are regressed as classification over a fixed bucket grid in symlog space:
the target becomes interpolation weights on the two buckets bracketing
symlog(y) and the loss is cross-entropy, which keeps loss scale comparable
across reward magnitudes.  The distribution-matching pair consists of two
KL terms over the same (posterior, predicted) distributions that differ only
in stop-gradient placement, each clamped below at 1 nat (free bits: below
the floor the value is exactly 1 and the gradient exactly 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .codec import latent_probs
from .numerics import Tensor


def symlog(x: Tensor) -> Tensor:
    """Sign-preserving log compression: sign(x) * ln(|x| + 1)."""
    return torch.sign(x) * torch.log1p(torch.abs(x))


def symexp(y: Tensor) -> Tensor:
    """Inverse of symlog: sign(y) * (exp(|y|) - 1)."""
    return torch.sign(y) * torch.expm1(torch.abs(y))


class BucketGrid:
    """Fixed scalar-regression grid: bucket centers uniform in symlog space.

    255 centers on [-20, 20] cover |y| up to about e^20; the grid is
    symmetric, strictly increasing, and centers[127] is exactly 0.
    """

    def __init__(self, buckets: int = 255, limit: float = 20.0, dtype: torch.dtype = torch.float32) -> None:
        self.buckets = buckets
        self.limit = limit
        if buckets % 2 == 1:
            # Mirror the positive half so symmetry is exact and the middle
            # center is exactly zero, not a linspace rounding artifact.
            half = torch.linspace(0.0, limit, buckets // 2 + 1, dtype=dtype)
            self.centers = torch.cat([-half.flip(0)[:-1], half])
        else:
            self.centers = torch.linspace(-limit, limit, buckets, dtype=dtype)

    def to(self, dtype: torch.dtype, device=None) -> "BucketGrid":
        grid = BucketGrid.__new__(BucketGrid)
        grid.buckets = self.buckets
        grid.limit = self.limit
        grid.centers = self.centers.to(dtype=dtype, device=device)
        return grid

    def encode(self, y: Tensor) -> Tensor:
        """Two-hot weights for scalar targets (no gradient; targets only).

        symlog(y) is clipped to the grid range, then split linearly between
        the two bracketing centers; at an exact center a single weight is 1.
        The bracketing bucket comes from a search against the actual center
        values, so exact hits stay exact.
        """
        value = symlog(y.detach())
        centers = self.centers.to(dtype=value.dtype, device=value.device)
        value = value.clamp(centers[0], centers[-1])
        low = (torch.searchsorted(centers, value.contiguous()) - 1).clamp(0, self.buckets - 2)
        span = centers[low + 1] - centers[low]
        frac = ((value - centers[low]) / span).clamp(0.0, 1.0)
        weights = torch.zeros(*y.shape, self.buckets, dtype=value.dtype, device=value.device)
        weights.scatter_(-1, low.unsqueeze(-1), (1.0 - frac).unsqueeze(-1))
        weights.scatter_add_(-1, (low + 1).unsqueeze(-1), frac.unsqueeze(-1))
        return weights

    def decode(self, logits: Tensor) -> Tensor:
        """Scalar readout: symexp of the expected center.

        The expectation runs in symlog space, where two-hot encoding is an
        exact linear interpolation, so decode(encode(y)) recovers y up to
        float rounding instead of suffering symexp's convexity gap between
        neighboring buckets.  Mirrored buckets are paired before summation
        so symmetric distributions decode to exactly zero.
        """
        probs = torch.softmax(logits, dim=-1)
        centers = self.centers.to(dtype=logits.dtype, device=logits.device)
        if self.buckets % 2 == 1:
            half = self.buckets // 2
            mean = (probs - probs.flip(-1))[..., :half] @ centers[:half]
        else:
            mean = probs @ centers
        return symexp(mean)

    def loss(self, logits: Tensor, y: Tensor) -> Tensor:
        """Cross-entropy between the two-hot target for y and softmax(logits)."""
        target = self.encode(y)
        return -(target * F.log_softmax(logits, dim=-1)).sum(-1)


def kl_categorical(p_logits: Tensor, q_logits: Tensor, unimix: float = 0.0) -> Tensor:
    """Sum over categories of KL(p_i || q_i) for logit grids (..., cat, cls).

    Computed from log-probabilities so saturated logits stay finite.
    """
    if unimix > 0.0:
        p = latent_probs(p_logits, unimix)
        q = latent_probs(q_logits, unimix)
        logp, logq = p.log(), q.log()
    else:
        logp = F.log_softmax(p_logits, dim=-1)
        logq = F.log_softmax(q_logits, dim=-1)
        p = logp.exp()
    return (p * (logp - logq)).sum(dim=(-2, -1))


def free_bits(kl: Tensor, floor: float = 1.0) -> Tensor:
    """Clamp a per-position KL below at ``floor`` with zero gradient there."""
    return kl.clamp(min=floor)


@dataclass
class WmLossReport:
    """Per-component means over the batch; total is the training objective."""

    total: Tensor
    rec: Tensor
    rew: Tensor
    con: Tensor
    dyn: Tensor
    rep: Tensor

    def scalars(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "rec", "rew", "con", "dyn", "rep")}


def world_model_loss(
    obs: Tensor,
    rewards: Tensor,
    continuations: Tensor,
    recon: Tensor,
    reward_logits: Tensor,
    cont_logits: Tensor,
    posterior_logits: Tensor,
    prior_logits: Tensor,
    grid: BucketGrid,
    dyn_beta: float = 0.5,
    rep_beta: float = 0.1,
    unimix: float = 0.0,
    posterior_frozen: Tensor | None = None,
    prior_frozen: Tensor | None = None,
    rec_positions: slice = slice(None),
) -> WmLossReport:
    """Combine the five world-model losses over a (B, T, ...) batch.

    ``posterior_logits``/``prior_logits`` are aligned so index t of the prior
    predicts index t of the posterior slice passed in (the caller drops the
    first posterior step, which nothing predicts).  The dynamics KL freezes
    the posterior side, the representation KL freezes the predicted side; by
    default frozen copies are detached views, but callers doing finite
    difference checks may pass precomputed constants so the frozen paths do
    not move under parameter perturbation.  ``rec_positions`` restricts the
    reconstruction loss when the decoder consumes predicted latents, which
    exist only from the second step on.
    """
    posterior_frozen = posterior_logits.detach() if posterior_frozen is None else posterior_frozen
    prior_frozen = prior_logits.detach() if prior_frozen is None else prior_frozen

    rec = (recon - obs[:, rec_positions]).pow(2).mean(dim=(-3, -2, -1)).mean()
    rew = grid.loss(reward_logits, rewards).mean()
    con = F.binary_cross_entropy_with_logits(cont_logits, continuations.to(cont_logits.dtype))
    dyn = free_bits(kl_categorical(posterior_frozen, prior_logits, unimix)).mean()
    rep = free_bits(kl_categorical(posterior_logits, prior_frozen, unimix)).mean()

    total = rec + rew + con + dyn_beta * dyn + rep_beta * rep
    report = WmLossReport(total=total, rec=rec, rew=rew, con=con, dyn=dyn, rep=rep)
    for name in ("rec", "rew", "con", "dyn", "rep"):
        if not torch.isfinite(getattr(report, name)):
            raise FloatingPointError(f"non-finite world-model loss component: {name}")
    return report
