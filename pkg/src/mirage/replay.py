"""FIFO replay of real transitions with consecutive-window sampling.

Observations are stored as raw bytes (HWC, RGB) and converted to float CHW
on sampling.  Demonstration steps injected before training are protected
from eviction; live steps recycle the remaining slots first-in-first-out.
Sampled windows are always contiguous in time: every slot carries a running
sequence number and a window is valid only if its numbers are consecutive,
so windows can never straddle the eviction seam of the ring.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

TRAJECTORY_MAGIC = b"STRJ1"


@dataclass
class Step:
    """One real transition: frame bytes, action, reward, continuation flag."""

    obs: np.ndarray      # (H, W, C) uint8
    action: int
    reward: float
    cont: int            # 1 while the episode is ongoing, 0 at a boundary


class InsufficientDataError(RuntimeError):
    pass


class TrajectoryFormatError(ValueError):
    pass


class ReplayBuffer:
    def __init__(self, capacity: int, obs_shape: tuple[int, int, int] = (64, 64, 3)) -> None:
        self.capacity = capacity
        self.obs_shape = obs_shape
        self.obs = np.zeros((capacity, *obs_shape), dtype=np.uint8)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.conts = np.zeros(capacity, dtype=np.uint8)
        self.seq = np.full(capacity, -1, dtype=np.int64)  # -1 marks an empty slot
        self.protected = 0     # demo prefix, never evicted
        self.write_pos = 0     # next live slot, cycles over [protected, capacity)
        self.size = 0
        self._next_seq = 0

    def __len__(self) -> int:
        return self.size

    def append(self, step: Step) -> None:
        """Store one live step, evicting the oldest live step when full."""
        if self.write_pos < self.protected:
            raise RuntimeError("live write pointer entered the protected region")
        slot = self.write_pos
        if self.seq[slot] < 0:
            self.size += 1
        self._store(slot, step)
        self.write_pos = self.protected + (slot + 1 - self.protected) % (self.capacity - self.protected)

    def _store(self, slot: int, step: Step) -> None:
        if step.obs.shape != self.obs_shape or step.obs.dtype != np.uint8:
            raise ValueError(f"expected uint8 obs shaped {self.obs_shape}, got "
                             f"{step.obs.dtype} {step.obs.shape}")
        self.obs[slot] = step.obs
        self.actions[slot] = step.action
        self.rewards[slot] = step.reward
        self.conts[slot] = step.cont
        self.seq[slot] = self._next_seq
        self._next_seq += 1

    def inject_demonstration(self, steps: list[Step]) -> int:
        """Install demo steps before training; they never get evicted.

        Returns the number of injected steps.  An empty trajectory is a
        warned no-op.  Must be called before any live append.
        """
        if self._next_seq != 0:
            raise RuntimeError("demonstrations must be injected before collection starts")
        if not steps:
            warnings.warn("empty demonstration trajectory; nothing injected")
            return 0
        if len(steps) > self.capacity:
            raise ValueError("demonstration longer than buffer capacity")
        for step in steps:
            self._store(self.write_pos, step)
            self.write_pos += 1
            self.size += 1
        self.protected = self.write_pos
        return self.protected

    def _valid_starts(self, length: int) -> np.ndarray:
        """Slots that begin a time-contiguous window of ``length`` steps."""
        filled = self.seq >= 0
        ok = filled.copy()
        for offset in range(1, length):
            nxt = np.roll(self.seq, -offset)
            ok &= np.roll(filled, -offset) & (nxt == self.seq + offset)
        ok[self.capacity - length + 1:] = False  # windows index slots directly
        return np.flatnonzero(ok)

    def sample_sequences(self, batch: int, length: int,
                         rng: np.random.Generator | torch.Generator) -> dict[str, torch.Tensor]:
        """Sample ``batch`` uniformly-chosen contiguous windows of ``length``.

        Returns float observations (B, T, C, H, W) scaled to [0, 1], long
        actions, float rewards and continuation flags.  Windows may cross
        episode boundaries; the continuation flags carry that information.
        """
        if self.size < length:
            raise InsufficientDataError(f"buffer holds {self.size} steps, need {length}")
        starts = self._valid_starts(length)
        if starts.size == 0:
            raise InsufficientDataError("no contiguous window available")
        if isinstance(rng, torch.Generator):
            picks = torch.randint(0, starts.size, (batch,), generator=rng).numpy()
        else:
            picks = rng.integers(0, starts.size, size=batch)
        chosen = starts[picks]
        idx = chosen[:, None] + np.arange(length)[None, :]
        obs = torch.from_numpy(self.obs[idx]).to(torch.float32).div_(255.0).permute(0, 1, 4, 2, 3)
        return {
            "obs": obs.contiguous(),
            "actions": torch.from_numpy(self.actions[idx]),
            "rewards": torch.from_numpy(self.rewards[idx]),
            "conts": torch.from_numpy(self.conts[idx].astype(np.float32)),
        }

    def state_dict(self) -> dict:
        return {
            "obs": self.obs, "actions": self.actions, "rewards": self.rewards,
            "conts": self.conts, "seq": self.seq, "protected": self.protected,
            "write_pos": self.write_pos, "size": self.size, "next_seq": self._next_seq,
            "capacity": self.capacity, "obs_shape": self.obs_shape,
        }

    def load_state_dict(self, state: dict) -> None:
        if state["capacity"] != self.capacity or tuple(state["obs_shape"]) != self.obs_shape:
            raise ValueError("buffer geometry mismatch")
        self.obs[:] = state["obs"]
        self.actions[:] = state["actions"]
        self.rewards[:] = state["rewards"]
        self.conts[:] = state["conts"]
        self.seq[:] = state["seq"]
        self.protected = state["protected"]
        self.write_pos = state["write_pos"]
        self.size = state["size"]
        self._next_seq = state["next_seq"]


# --- trajectory files ----------------------------------------------------
# Little-endian binary: magic "STRJ1", u32 step count, u32 action count,
# then per step: obs bytes (H*W*C u8, HWC RGB), u32 action, f32 reward,
# u8 continuation.

def save_trajectory(path: str | Path, steps: list[Step], action_count: int) -> None:
    if not steps:
        raise ValueError("refusing to write an empty trajectory")
    obs_bytes = steps[0].obs.size
    with open(path, "wb") as f:
        f.write(TRAJECTORY_MAGIC)
        f.write(struct.pack("<II", len(steps), action_count))
        for step in steps:
            if step.obs.size != obs_bytes:
                raise ValueError("inconsistent observation sizes in trajectory")
            f.write(step.obs.tobytes())
            f.write(struct.pack("<IfB", step.action, step.reward, step.cont))


def load_trajectory(path: str | Path, obs_shape: tuple[int, int, int] = (64, 64, 3)
                    ) -> tuple[list[Step], int]:
    """Parse a trajectory file; raises TrajectoryFormatError with the byte
    offset of the first malformed field."""
    data = Path(path).read_bytes()
    if len(data) == 0:
        warnings.warn(f"empty trajectory file {path}; nothing to inject")
        return [], 0
    if len(data) < 13:
        raise TrajectoryFormatError(f"truncated header at offset {len(data)}")
    if data[:5] != TRAJECTORY_MAGIC:
        raise TrajectoryFormatError("bad magic at offset 0")
    count, action_count = struct.unpack_from("<II", data, 5)
    obs_bytes = int(np.prod(obs_shape))
    step_bytes = obs_bytes + 4 + 4 + 1
    expected = 13 + count * step_bytes
    if len(data) != expected:
        raise TrajectoryFormatError(
            f"expected {expected} bytes for {count} steps, got {len(data)} "
            f"(first discrepancy at offset {min(expected, len(data))})")
    steps = []
    offset = 13
    for i in range(count):
        obs = np.frombuffer(data, dtype=np.uint8, count=obs_bytes, offset=offset).reshape(obs_shape)
        action, reward, cont = struct.unpack_from("<IfB", data, offset + obs_bytes)
        if action >= action_count:
            raise TrajectoryFormatError(f"action {action} out of range at offset {offset + obs_bytes}")
        if cont > 1:
            raise TrajectoryFormatError(f"continuation flag {cont} at offset {offset + obs_bytes + 8}")
        steps.append(Step(obs=obs.copy(), action=int(action), reward=float(reward), cont=int(cont)))
        offset += step_bytes
    return steps, action_count
