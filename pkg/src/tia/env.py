"""MiniManyWorld: a 2D block-pushing world with configurable visual distraction.

The agent pushes a blue target block toward a translucent red goal disc on the
unit square. Distractor blocks drift autonomously along per-object sinusoidal
paths and never interact with the target; backgrounds range from a flat gray
to animated procedural textures or user-supplied frames. Everything renders to
small RGB images which are the agent's only observation.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BACKGROUND_MODES = ("plain", "white_noise", "texture_playlist", "frame_directory")

# Distractor sprite colors, cycled by object index. Deliberately excludes
# blue so distractors stay visually similar to the target but never identical.
DISTRACTOR_PALETTE = np.array(
    [
        [1.0, 0.85, 0.0],   # yellow
        [0.0, 0.75, 0.0],   # green
        [1.0, 0.5, 0.0],    # orange
        [1.0, 0.0, 0.5],    # pink
        [0.0, 0.8, 0.8],    # teal
        [0.6, 0.6, 0.0],    # olive
        [0.5, 1.0, 0.0],    # lime
        [1.0, 0.3, 0.3],    # salmon
    ]
)
TARGET_COLOR = np.array([0.0, 0.0, 1.0])
GOAL_COLOR = np.array([1.0, 0.0, 0.0])

DISTRACTOR_AMPLITUDE = 0.3


class EnvError(Exception):
    """Raised for invalid environment configuration or misuse."""


@dataclass(frozen=True)
class EnvConfig:
    image_size: int = 32
    n_distractors: int = 1
    background_mode: str = "plain"
    texture_seed: int = 0
    episode_length: int = 250
    action_repeat: int = 2
    move_speed: float = 0.05
    goal_radius: float = 0.1
    object_half_extent: float = 0.06
    goal_alpha: float = 0.5
    frame_dir: str = ""

    def __post_init__(self):
        if self.image_size not in (16, 32, 64):
            raise EnvError(f"image_size must be one of 16, 32, 64, got {self.image_size}")
        if not 0 <= self.n_distractors <= 8:
            raise EnvError(f"n_distractors must be in [0, 8], got {self.n_distractors}")
        if self.background_mode not in BACKGROUND_MODES:
            raise EnvError(f"unknown background_mode {self.background_mode!r}")
        if self.episode_length <= 0 or self.action_repeat < 1:
            raise EnvError("episode_length and action_repeat must be positive")
        for name in ("move_speed", "goal_radius", "object_half_extent"):
            if getattr(self, name) <= 0:
                raise EnvError(f"{name} must be strictly positive")
        if self.goal_radius >= 0.5:
            raise EnvError(f"goal_radius must be < 0.5, got {self.goal_radius}")


@dataclass
class EnvState:
    target_pos: np.ndarray
    goal_pos: np.ndarray
    distractor_center: np.ndarray   # (n, 2) oscillation anchors, fixed per episode
    distractor_phase: np.ndarray    # (n,) scalar phase per object
    distractor_pos: np.ndarray      # (n, 2) current positions, clipped to [0, 1]^2
    step_index: int
    background_frame_index: int
    rng_state: dict = field(repr=False, default_factory=dict)


def _motion_params(config: EnvConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-object drift frequency and direction, keyed off texture_seed only.

    Keeping these out of the episode RNG makes the scripted dynamics a fixed
    property of the world, so two episodes differ only in initial positions.
    """
    rng = np.random.default_rng([int(config.texture_seed), 0x5C21])
    n = config.n_distractors
    freqs = rng.uniform(0.05, 0.15, size=n)
    angles = rng.uniform(0.0, 2.0 * math.pi, size=n)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    phase0 = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return freqs, dirs, phase0


def _distractor_positions(config: EnvConfig, center, phase) -> np.ndarray:
    _, dirs, _ = _motion_params(config)
    offsets = DISTRACTOR_AMPLITUDE * np.sin(phase)[:, None] * dirs
    return np.clip(center + offsets, 0.0, 1.0)


def reset(config: EnvConfig, seed: int) -> tuple[EnvState, np.ndarray]:
    """Start a fresh episode; identical seeds give bit-identical results."""
    rng = np.random.default_rng(seed)
    target = rng.uniform(0.1, 0.9, size=2)
    goal = rng.uniform(0.1, 0.9, size=2)
    center = rng.uniform(0.1, 0.9, size=(config.n_distractors, 2))
    _, _, phase0 = _motion_params(config)
    state = EnvState(
        target_pos=target,
        goal_pos=goal,
        distractor_center=center,
        distractor_phase=phase0.copy(),
        distractor_pos=_distractor_positions(config, center, phase0),
        step_index=0,
        background_frame_index=0,
        rng_state=rng.bit_generator.state,
    )
    return state, render(state, config)


def _substep_reward(target: np.ndarray, goal: np.ndarray, goal_radius: float) -> float:
    dist = float(np.linalg.norm(target - goal))
    return (1.0 - dist / math.sqrt(2.0)) + (1.0 if dist < goal_radius else 0.0)


def step(
    state: EnvState, action: np.ndarray, config: EnvConfig
) -> tuple[EnvState, np.ndarray, float, bool]:
    """Advance one agent step (= action_repeat sub-steps), summing sub-step rewards.

    Distractors follow their scripted drift regardless of the action or the
    target's position, so the two factors of the world evolve independently.
    """
    if state.step_index >= config.episode_length:
        raise EnvError("episode finished")
    action = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
    freqs, _, _ = _motion_params(config)

    target = state.target_pos.copy()
    phase = state.distractor_phase.copy()
    step_index = state.step_index
    frame_index = state.background_frame_index
    reward = 0.0
    for _ in range(config.action_repeat):
        if step_index >= config.episode_length:
            break
        target = np.clip(target + config.move_speed * action, 0.0, 1.0)
        phase = phase + freqs
        step_index += 1
        frame_index += 1
        reward += _substep_reward(target, state.goal_pos, config.goal_radius)

    new_state = EnvState(
        target_pos=target,
        goal_pos=state.goal_pos.copy(),
        distractor_center=state.distractor_center.copy(),
        distractor_phase=phase,
        distractor_pos=_distractor_positions(config, state.distractor_center, phase),
        step_index=step_index,
        background_frame_index=frame_index,
        rng_state=state.rng_state,
    )
    done = step_index >= config.episode_length
    return new_state, render(new_state, config), reward, done


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size) + 0.5) / size
    return np.meshgrid(coords, coords, indexing="xy")


def render(state: EnvState, config: EnvConfig) -> np.ndarray:
    """Composite the scene back to front; pure function of (state, config)."""
    size = config.image_size
    img = background_frame(config, state.background_frame_index).copy()
    xs, ys = _pixel_grid(size)

    gx, gy = state.goal_pos
    disc = (xs - gx) ** 2 + (ys - gy) ** 2 <= config.goal_radius**2
    img[disc] = (1.0 - config.goal_alpha) * img[disc] + config.goal_alpha * GOAL_COLOR

    he = config.object_half_extent
    for i in range(config.n_distractors):
        dx, dy = state.distractor_pos[i]
        square = (np.abs(xs - dx) <= he) & (np.abs(ys - dy) <= he)
        img[square] = DISTRACTOR_PALETTE[i % len(DISTRACTOR_PALETTE)]

    tx, ty = state.target_pos
    square = (np.abs(xs - tx) <= he) & (np.abs(ys - ty) <= he)
    img[square] = TARGET_COLOR
    return img.astype(np.float32)


def background_frame(config: EnvConfig, frame_index: int) -> np.ndarray:
    """Background image for a frame index; deterministic per (config, index)."""
    if frame_index < 0:
        raise EnvError("frame_index must be >= 0")
    size = config.image_size
    mode = config.background_mode
    if mode == "plain":
        return np.full((size, size, 3), 0.5, dtype=np.float64)
    if mode == "white_noise":
        rng = np.random.default_rng([int(config.texture_seed), int(frame_index), 0x9E1])
        gray = rng.uniform(0.0, 1.0, size=(size, size, 1))
        return np.repeat(gray, 3, axis=2)
    if mode == "texture_playlist":
        return _texture_frame(config.texture_seed, size, frame_index)
    if mode == "frame_directory":
        return _directory_frame(config.frame_dir, size, frame_index)
    raise EnvError(f"unknown background_mode {mode!r}")


def _texture_frame(texture_seed: int, size: int, frame_index: int) -> np.ndarray:
    """Grayscale multi-frequency stripes scrolling with the frame index."""
    rng = np.random.default_rng([int(texture_seed), 0x7A11])
    n_waves = 4
    ax = rng.uniform(1.0, 5.0, size=n_waves)
    ay = rng.uniform(1.0, 5.0, size=n_waves)
    speed = rng.uniform(0.05, 0.4, size=n_waves)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=n_waves)
    weight = rng.uniform(0.5, 1.0, size=n_waves)

    xs, ys = _pixel_grid(size)
    value = np.zeros((size, size))
    for k in range(n_waves):
        value += weight[k] * np.sin(
            2.0 * math.pi * (ax[k] * xs + ay[k] * ys) + speed[k] * frame_index + phase[k]
        )
    value /= weight.sum()
    gray = (value + 1.0) / 2.0
    return np.repeat(gray[:, :, None], 3, axis=2)


_FRAME_EXTENSIONS = {".png", ".bmp", ".gif", ".tif", ".tiff", ".jpg", ".jpeg"}


def _list_frames(frame_dir: str) -> list[Path]:
    root = Path(frame_dir)
    if not root.is_dir():
        raise EnvError(f"no background frames: {frame_dir!r} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in _FRAME_EXTENSIONS)
    if not files:
        raise EnvError(f"no background frames in {frame_dir!r}")
    return files


@functools.lru_cache(maxsize=1024)
def _load_frame(path_str: str, size: int) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path_str) as im:
            gray = im.convert("L").resize((size, size), Image.BILINEAR)
    except Exception as exc:
        raise EnvError(f"unreadable background frame {path_str!r}: {exc}") from exc
    arr = np.asarray(gray, dtype=np.float64) / 255.0
    return np.repeat(arr[:, :, None], 3, axis=2)


def _directory_frame(frame_dir: str, size: int, frame_index: int) -> np.ndarray:
    files = _list_frames(frame_dir)
    return _load_frame(str(files[frame_index % len(files)]), size).copy()


class MiniManyWorld:
    """Convenience wrapper binding a config to the functional reset/step API."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state: EnvState | None = None

    def reset(self, seed: int) -> np.ndarray:
        self.state, obs = reset(self.config, seed)
        return obs

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        if self.state is None:
            raise EnvError("reset() must be called before step()")
        self.state, obs, reward, done = step(self.state, action, self.config)
        return obs, reward, done

    @property
    def action_dim(self) -> int:
        return 2
