"""Image and plot export: PNG frames, imagination film strips, return curves."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .imagination import imagine_frames
from .numerics import RngStreams
from .trainer import Collector, Trainer, _NullBuffer, make_env


def frame_to_uint8(frame: torch.Tensor) -> np.ndarray:
    """CHW float [0,1] -> HWC uint8 (clamped; export path only)."""
    return (frame.clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def save_png(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(image, mode="RGB").save(path)


@torch.no_grad()
def collect_real_trajectory(trainer: Trainer, steps: int, greedy: bool = True,
                            seed_offset: int = 77) -> tuple[torch.Tensor, torch.Tensor]:
    """Roll the current policy in a fresh env until ``steps`` consecutive
    in-episode steps are gathered; returns (obs (1,N,C,S,S), actions (1,N))."""
    cfg = trainer.cfg
    env = make_env(cfg)
    streams = RngStreams(seed=cfg.seed + seed_offset, device=cfg.device)
    for _ in range(50):  # episodes shorter than `steps` force a retry
        collector = Collector(cfg, env, trainer.model, trainer.agent, _NullBuffer(), streams)
        collector.reset_env()
        frames, actions = [], []
        for _ in range(steps):
            obs = torch.from_numpy(collector.obs).to(torch.float32).div_(255.0).permute(2, 0, 1)
            action = collector.policy_action(greedy=greedy)
            result = env.step(action)
            frames.append(obs)
            actions.append(action)
            collector.context_z.append(collector._pending_z)
            collector.context_a.append(action)
            if len(collector.context_z) > cfg.env_context:
                collector.context_z.pop(0)
                collector.context_a.pop(0)
            if result.done:
                break
            collector.obs = result.obs
        if len(frames) == steps:
            if hasattr(env, "close"):
                env.close()
            return (torch.stack(frames).unsqueeze(0).to(trainer.device),
                    torch.tensor(actions, dtype=torch.long, device=trainer.device).unsqueeze(0))
    raise RuntimeError(f"could not gather {steps} consecutive steps; episodes end too early")


@torch.no_grad()
def imagination_strip(trainer: Trainer, context: int = 8, imagined: int = 14,
                      seed_offset: int = 77) -> np.ndarray:
    """Two-row film strip: ground truth above, model frames below.

    The model row holds ``context`` posterior reconstructions followed by
    ``imagined`` decoded rollout frames conditioned on the real actions
    (22 model frames per row under the defaults).
    """
    total = context + imagined
    obs, actions = collect_real_trajectory(trainer, total, seed_offset=seed_offset)
    recon_ctx, dreamed = imagine_frames(trainer.model, obs, actions, context=context,
                                        streams=RngStreams(seed=trainer.cfg.seed + seed_offset + 1,
                                                           device=trainer.cfg.device))
    model_row = torch.cat([recon_ctx, dreamed], dim=1)[0]
    truth_row = obs[0]
    size = trainer.cfg.wm.image_size
    strip = np.zeros((2 * size, total * size, 3), dtype=np.uint8)
    for i in range(total):
        strip[:size, i * size:(i + 1) * size] = frame_to_uint8(truth_row[i])
        strip[size:, i * size:(i + 1) * size] = frame_to_uint8(model_row[i])
    return strip


def save_imagination_strip(trainer: Trainer, path: str | Path, context: int = 8,
                           imagined: int = 14, seed_offset: int = 77) -> None:
    save_png(imagination_strip(trainer, context, imagined, seed_offset), path)


def plot_return_curve(metrics_path: str | Path, out_path: str | Path) -> int:
    """Episode returns over env steps from a metrics file; returns the
    number of episodes plotted."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, returns = [], []
    with open(metrics_path) as f:
        for line in f:
            record = json.loads(line)
            if "episode_return" in record:
                steps.append(record["env_step"])
                returns.append(record["episode_return"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, returns, lw=0.8, alpha=0.5)
    if len(returns) >= 5:
        kernel = min(10, len(returns))
        smooth = np.convolve(returns, np.ones(kernel) / kernel, mode="valid")
        ax.plot(steps[kernel - 1:], smooth, lw=2.0)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("episode return")
    ax.set_title("training return")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return len(returns)
