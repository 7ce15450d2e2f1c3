"""Differentiable-computation substrate shared by every other module.

Dense tensors, reverse-mode gradients and stop-gradient come from PyTorch.
This module pins down the parts the rest of the codebase relies on:

* ``stop_gradient``: value-identity with an exactly-zero gradient path.
* ``grad_check``: central finite differences against autograd, used by the
  test suite to certify every registered loss.
* ``RngStreams``: one global seed forked into named streams so that the
  sampling order of one subsystem can never perturb another.

float32 is the training dtype; float64 is used by gradient tests so that
finite differences stay meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

Tensor = torch.Tensor

# Fixed per-stream offsets; changing these invalidates recorded runs.
_STREAM_OFFSETS = {
    "init": 0x1,
    "env": 0x2,
    "sampler": 0x3,
    "dropout": 0x4,
    "policy": 0x5,
}


def _splitmix64(x: int) -> int:
    """Finalizer used to derive independent stream seeds from one seed."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def stream_seed(seed: int, name: str) -> int:
    if name not in _STREAM_OFFSETS:
        raise KeyError(f"unknown rng stream {name!r}; known: {sorted(_STREAM_OFFSETS)}")
    return _splitmix64((seed & 0xFFFFFFFFFFFFFFFF) ^ (_STREAM_OFFSETS[name] << 56))


@dataclass
class RngStreams:
    """Named random streams forked from a single 64-bit seed.

    ``init``, ``sampler``, ``dropout`` and ``policy`` are torch generators
    (parameter init, latent/replay sampling, dropout masks, action choice).
    ``env`` is a numpy generator for environment-side randomness.  Identical
    seed plus identical call sequence reproduces identical samples.
    """

    seed: int
    device: str = "cpu"
    init: torch.Generator = field(init=False)
    sampler: torch.Generator = field(init=False)
    dropout: torch.Generator = field(init=False)
    policy: torch.Generator = field(init=False)
    env: np.random.Generator = field(init=False)

    def __post_init__(self) -> None:
        for name in ("init", "sampler", "dropout", "policy"):
            gen = torch.Generator(device=self.device)
            gen.manual_seed(stream_seed(self.seed, name))
            setattr(self, name, gen)
        self.env = np.random.Generator(np.random.PCG64(stream_seed(self.seed, "env")))

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "init": self.init.get_state(),
            "sampler": self.sampler.get_state(),
            "dropout": self.dropout.get_state(),
            "policy": self.policy.get_state(),
            "env": self.env.bit_generator.state,
        }

    def load_state_dict(self, state: dict) -> None:
        self.seed = state["seed"]
        for name in ("init", "sampler", "dropout", "policy"):
            getattr(self, name).set_state(state[name])
        self.env.bit_generator.state = state["env"]


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values; gradient through this path is exactly zero."""
    return x.detach()


def trunc_normal_(tensor: Tensor, std: float = 0.02, generator: torch.Generator | None = None) -> Tensor:
    """In-place truncated normal init on [-2*std, 2*std] honoring a generator.

    Uses the inverse-CDF construction so the draw count is shape-stable,
    which keeps stream consumption independent of rejection luck.
    """
    a, b = -2.0, 2.0
    lo = 0.5 * (1 + math.erf(a / math.sqrt(2)))
    hi = 0.5 * (1 + math.erf(b / math.sqrt(2)))
    with torch.no_grad():
        tensor.uniform_(2 * lo - 1, 2 * hi - 1, generator=generator)
        tensor.erfinv_()
        tensor.mul_(std * math.sqrt(2.0))
        tensor.clamp_(a * std, b * std)
    return tensor


def stream_dropout(x: Tensor, p: float, training: bool, generator: torch.Generator | None) -> Tensor:
    """Dropout whose mask is drawn from an explicit generator.

    nn.Dropout consumes the global RNG, which would make dropout placement
    depend on unrelated call order; this variant keeps masks on the named
    ``dropout`` stream.  Disabled whenever ``training`` is false or p == 0.
    """
    if not training or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, device=x.device, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def grad_check(loss_fn, params: list[Tensor], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients with central finite differences.

    ``loss_fn`` must be a zero-argument callable returning a scalar tensor
    that depends on ``params``; it is re-evaluated under elementwise
    perturbations p -> p +- eps.  Parameters should be float64 so the
    quotient (f(p+eps) - f(p-eps)) / (2 eps) carries enough precision.

    Returns the max relative error over all elements, with denominator
    max(|analytic|, |numeric|, 1e-8).  Raises if any perturbed evaluation
    produces a non-finite loss, naming the offending parameter element.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-4]")
    loss = loss_fn()
    if loss.dim() != 0:
        raise ValueError("loss_fn must return a scalar")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for pi, (p, g) in enumerate(zip(params, analytic)):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = loss_fn().item()
                flat[i] = orig - eps
                lo = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise FloatingPointError(
                        f"non-finite loss perturbing params[{pi}] element {i} "
                        f"(f+={hi}, f-={lo})"
                    )
                numeric = (hi - lo) / (2.0 * eps)
                a = gflat[i].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
    return worst


def global_norm(tensors: list[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t is not None:
            total += float(t.detach().pow(2).sum())
    return math.sqrt(total)


def enable_determinism() -> None:
    """Opt in to strictly deterministic kernels (CPU kernels already are)."""
    torch.use_deterministic_algorithms(True)
