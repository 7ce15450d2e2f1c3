"""Environments: deterministic toy pixel games, Atari-style preprocessing,
and the client side of the external environment bridge.

Toy environments render directly at the training resolution and exist so
the full stack can be exercised (and can actually learn) on a CPU in
minutes.  The bridge client speaks a little-endian framed protocol to an
external emulator process and owns frame skipping, max-pooling and resizing
on this side of the wire.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

BRIDGE_MAGIC = b"STRMENV"
BRIDGE_VERSION = 1
OP_RESET, OP_STEP, OP_CLOSE = 0, 1, 2

# Shared action order for the toy games.
ACT_UP, ACT_DOWN, ACT_LEFT, ACT_RIGHT = 0, 1, 2, 3


@dataclass
class EnvStep:
    obs: np.ndarray      # (H, W, C) uint8, already at training resolution
    reward: float
    done: bool
    life_lost: bool = False


class EpisodeContractError(RuntimeError):
    """Raised when step() is called after done without a reset."""


class TransportError(RuntimeError):
    pass


class HandshakeError(RuntimeError):
    pass


class FramingError(RuntimeError):
    pass


# --- preprocessing ---------------------------------------------------------

def resize_max_frames(frames: list[np.ndarray], size: int = 64) -> torch.Tensor:
    """Elementwise max over the last two raw frames, bilinear resize,
    scale to [0, 1].  Returns (C, size, size) float32.

    A single frame (episode start) is maxed with itself.
    """
    if not frames:
        raise ValueError("need at least one raw frame")
    a = frames[-1]
    b = frames[-2] if len(frames) >= 2 else frames[-1]
    pooled = np.maximum(a, b)
    x = torch.from_numpy(pooled).to(torch.float32).div_(255.0).permute(2, 0, 1).unsqueeze(0)
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x.squeeze(0).clamp_(0.0, 1.0)


def to_stored_bytes(obs: torch.Tensor) -> np.ndarray:
    """Quantize a float CHW observation to the (H, W, C) uint8 replay format."""
    return (obs.permute(1, 2, 0) * 255.0).round().clamp(0, 255).to(torch.uint8).numpy()


# --- toy environments -------------------------------------------------------

class BouncingBall:
    """Paddle-and-ball game: +1 per interception, episode ends on a miss.

    Physics are integer-pixel and fully deterministic; the only randomness
    is the reset draw from the provided generator.  Actions: left/right move
    the paddle, up/down do nothing.
    """

    action_count = 4

    def __init__(self, size: int = 64, time_limit: int = 1000) -> None:
        self.size = size
        self.time_limit = time_limit
        self.ball = max(1, size // 16)
        self.paddle_w = max(2, size // 4)
        self.paddle_h = max(1, size // 21)
        self.paddle_speed = max(1, 3 * size // 64)
        self.paddle_y = size - self.paddle_h - 1
        self._done = True

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.x = int(rng.integers(self.ball, self.size - 2 * self.ball))
        self.y = self.size // 8
        speeds = [s for s in (-2, -1, 1, 2)]
        self.vx = int(rng.choice(speeds)) * max(1, self.size // 64)
        self.vy = max(1, self.size // 64)
        self.px = (self.size - self.paddle_w) // 2
        self.t = 0
        self._done = False
        return self.render()

    def step(self, action: int) -> EnvStep:
        if self._done:
            raise EpisodeContractError("step() after done; call reset() first")
        if action == ACT_LEFT:
            self.px = max(0, self.px - self.paddle_speed)
        elif action == ACT_RIGHT:
            self.px = min(self.size - self.paddle_w, self.px + self.paddle_speed)

        self.x += self.vx
        self.y += self.vy
        hi = self.size - self.ball
        if self.x < 0:
            self.x, self.vx = -self.x, -self.vx
        elif self.x > hi:
            self.x, self.vx = 2 * hi - self.x, -self.vx
        if self.y < 0:
            self.y, self.vy = -self.y, -self.vy

        reward, done = 0.0, False
        if self.vy > 0 and self.y + self.ball >= self.paddle_y:
            caught = self.x + self.ball > self.px and self.x < self.px + self.paddle_w
            if caught:
                reward = 1.0
                self.y = 2 * (self.paddle_y - self.ball) - self.y
                self.vy = -self.vy
            else:
                done = True
        self.t += 1
        if self.t >= self.time_limit:
            done = True
        self._done = done
        return EnvStep(obs=self.render(), reward=reward, done=done)

    def render(self) -> np.ndarray:
        img = np.zeros((self.size, self.size, 3), dtype=np.uint8)
        img[..., 2] = 40
        y0, x0 = max(0, self.y), max(0, self.x)
        img[y0:self.y + self.ball, x0:self.x + self.ball] = (255, 255, 0)
        img[self.paddle_y:self.paddle_y + self.paddle_h, self.px:self.px + self.paddle_w] = (0, 255, 255)
        return img

    def state_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("x", "y", "vx", "vy", "px", "t", "_done")}

    def load_state_dict(self, state: dict) -> None:
        for k, v in state.items():
            setattr(self, k, v)


class KeyDoor:
    """Sparse grid game: +1 for picking up the key, +5 for opening the door.

    Key and door cells are fixed; the agent spawns at a random free cell.
    The agent sprite changes color while carrying the key so a single frame
    stays fully informative.
    """

    action_count = 4

    def __init__(self, size: int = 64, time_limit: int = 1000) -> None:
        self.size = size
        self.cell = max(2, size // 16)
        self.n = size // self.cell
        self.key_pos = (self.n // 4, 3 * self.n // 4)
        self.door_pos = (self.n - 2, self.n // 5)
        self.time_limit = time_limit
        self._done = True

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        while True:
            pos = (int(rng.integers(0, self.n)), int(rng.integers(0, self.n)))
            if pos not in (self.key_pos, self.door_pos):
                break
        self.agent = pos
        self.has_key = False
        self.t = 0
        self._done = False
        return self.render()

    def step(self, action: int) -> EnvStep:
        if self._done:
            raise EpisodeContractError("step() after done; call reset() first")
        r, c = self.agent
        if action == ACT_UP:
            r = max(0, r - 1)
        elif action == ACT_DOWN:
            r = min(self.n - 1, r + 1)
        elif action == ACT_LEFT:
            c = max(0, c - 1)
        elif action == ACT_RIGHT:
            c = min(self.n - 1, c + 1)
        self.agent = (r, c)

        reward, done = 0.0, False
        if self.agent == self.key_pos and not self.has_key:
            self.has_key = True
            reward = 1.0
        elif self.agent == self.door_pos and self.has_key:
            reward = 5.0
            done = True
        self.t += 1
        if self.t >= self.time_limit:
            done = True
        self._done = done
        return EnvStep(obs=self.render(), reward=reward, done=done)

    def _fill(self, img: np.ndarray, pos: tuple[int, int], color) -> None:
        r, c = pos
        s = self.cell
        img[r * s:(r + 1) * s, c * s:(c + 1) * s] = color

    def render(self) -> np.ndarray:
        img = np.zeros((self.size, self.size, 3), dtype=np.uint8)
        img[..., 0] = 24
        if not self.has_key:
            self._fill(img, self.key_pos, (255, 255, 0))
        self._fill(img, self.door_pos, (255, 0, 0))
        self._fill(img, self.agent, (255, 0, 255) if self.has_key else (0, 255, 0))
        return img

    def state_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("agent", "has_key", "t", "_done")}

    def load_state_dict(self, state: dict) -> None:
        for k, v in state.items():
            setattr(self, k, v)


def make_toy_env(name: str, size: int = 64):
    if name == "toy-ball":
        return BouncingBall(size=size)
    if name == "toy-keydoor":
        return KeyDoor(size=size)
    raise ValueError(f"unknown toy environment {name!r}")


# --- bridge client -----------------------------------------------------------

def _read_exact(sock, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-message")
        buf += chunk
    return buf


class BridgeConnection:
    """Raw protocol client over a connected socket."""

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.action_count = 0
        self.frame_shape = (0, 0, 0)

    @classmethod
    def connect(cls, address: str) -> "BridgeConnection":
        host, _, port = address.rpartition(":")
        try:
            sock = socket.create_connection((host or "127.0.0.1", int(port)))
        except OSError as exc:
            raise TransportError(f"cannot connect to bridge at {address}: {exc}") from exc
        conn = cls(sock)
        conn.handshake()
        return conn

    def handshake(self) -> None:
        try:
            self.sock.sendall(BRIDGE_MAGIC + struct.pack("<H", BRIDGE_VERSION))
            reply = _read_exact(self.sock, 16)
        except TransportError as exc:
            raise HandshakeError(f"server rejected handshake: {exc}") from exc
        a, h, w, c = struct.unpack("<IIII", reply)
        if a == 0 or h == 0 or w == 0 or c == 0:
            raise HandshakeError(f"invalid handshake reply: A={a} dims={h}x{w}x{c}")
        self.action_count = a
        self.frame_shape = (h, w, c)

    def _read_payload(self, expected: int) -> bytes:
        raw = _read_exact(self.sock, 4)
        (length,) = struct.unpack("<I", raw)
        if length != expected:
            self.sock.close()
            raise FramingError(f"payload length {length}, expected {expected}")
        return _read_exact(self.sock, length)

    def reset(self) -> np.ndarray:
        self.sock.sendall(struct.pack("<B", OP_RESET))
        frame_bytes = int(np.prod(self.frame_shape))
        payload = self._read_payload(frame_bytes)
        return np.frombuffer(payload, dtype=np.uint8).reshape(self.frame_shape).copy()

    def step(self, action: int) -> tuple[np.ndarray, float, bool, bool]:
        self.sock.sendall(struct.pack("<BI", OP_STEP, action))
        frame_bytes = int(np.prod(self.frame_shape))
        payload = self._read_payload(frame_bytes + 6)
        frame = np.frombuffer(payload[:frame_bytes], dtype=np.uint8).reshape(self.frame_shape).copy()
        reward, done, life_lost = struct.unpack("<fBB", payload[frame_bytes:])
        return frame, float(reward), bool(done), bool(life_lost)

    def close(self) -> None:
        try:
            self.sock.sendall(struct.pack("<B", OP_CLOSE))
        except OSError:
            pass
        self.sock.close()


class BridgeEnv:
    """Toy-env-shaped wrapper over a bridge connection.

    Applies frame skipping with max pooling over the last two raw frames and
    resizes to the training resolution.  ``done`` reflects the true episode
    end; a lost life only sets ``life_lost`` (the collector records the
    continuation-flag boundary without resetting).
    """

    def __init__(self, conn: BridgeConnection, size: int = 64, frame_skip: int = 4) -> None:
        self.conn = conn
        self.size = size
        self.frame_skip = frame_skip
        self.action_count = conn.action_count
        self._done = True

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        frame = self.conn.reset()
        self._frames = [frame, frame]
        self._done = False
        return to_stored_bytes(resize_max_frames(self._frames, self.size))

    def step(self, action: int) -> EnvStep:
        if self._done:
            raise EpisodeContractError("step() after done; call reset() first")
        total, done, life_lost = 0.0, False, False
        for _ in range(self.frame_skip):
            frame, reward, d, ll = self.conn.step(action)
            self._frames = [self._frames[-1], frame]
            total += reward
            done |= d
            life_lost |= ll
            if done:
                break
        self._done = done
        obs = to_stored_bytes(resize_max_frames(self._frames, self.size))
        return EnvStep(obs=obs, reward=total, done=done, life_lost=life_lost)

    def close(self) -> None:
        self.conn.close()
