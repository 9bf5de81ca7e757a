"""Episode storage and contiguous-sequence sampling for world-model training.

Alignment convention: reward r_t and observation o_t are both produced by
executing a_{t-1}, so an episode of T steps holds T+1 observations, T actions
and T rewards. A training window of length L starting at s yields the triples
(a_{s+k}, o_{s+k+1}, r_{s+k+1}) for k = 0..L-1; valid starts are 0..T-L.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ALIGNMENT_VERSION = 1


class ReplayError(Exception):
    pass


@dataclass
class Episode:
    observations: np.ndarray  # (T+1, H, W, C) float in [0,1] or uint8
    actions: np.ndarray       # (T, A)
    rewards: np.ndarray       # (T,) = r_1..r_T
    discount_flags: np.ndarray | None = None  # (T,), 1.0 until terminal

    def __post_init__(self):
        self.observations = np.asarray(self.observations)
        self.actions = np.asarray(self.actions)
        self.rewards = np.asarray(self.rewards)
        if self.discount_flags is None:
            self.discount_flags = np.ones(len(self.rewards), dtype=np.float32)
        self.discount_flags = np.asarray(self.discount_flags)
        t = len(self.actions)
        if (
            t < 1
            or len(self.observations) != t + 1
            or len(self.rewards) != t
            or len(self.discount_flags) != t
        ):
            raise ReplayError(
                "malformed episode: got %d observations, %d actions, %d rewards"
                % (len(self.observations), len(self.actions), len(self.rewards))
            )
        if self.observations.ndim != 4:
            raise ReplayError("malformed episode: observations must be (T+1, H, W, C)")

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class SequenceBatch:
    observations: np.ndarray  # (B, L, H, W, C) float32 in [0,1]
    actions: np.ndarray       # (B, L, A) float32
    rewards: np.ndarray       # (B, L) float32
    discounts: np.ndarray     # (B, L) float32
    episode_ids: np.ndarray   # (B,) provenance
    starts: np.ndarray        # (B,)

    @property
    def batch_size(self) -> int:
        return self.observations.shape[0]

    @property
    def length(self) -> int:
        return self.observations.shape[1]


def _obs_to_float(obs: np.ndarray) -> np.ndarray:
    if obs.dtype == np.uint8:
        return obs.astype(np.float32) / 255.0
    return obs.astype(np.float32)


class ReplayBuffer:
    """FIFO episode buffer with a capacity measured in total environment steps."""

    def __init__(self, capacity_steps: int = 100_000):
        if capacity_steps < 1:
            raise ReplayError("capacity must be positive")
        self.capacity_steps = capacity_steps
        self._episodes: list[tuple[int, Episode]] = []
        self._next_id = 0
        self._total_steps = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._episodes)

    @property
    def num_steps(self) -> int:
        with self._lock:
            return self._total_steps

    def add_episode(self, episode: Episode) -> int:
        """Append an episode, evicting oldest episodes once over capacity."""
        with self._lock:
            ep_id = self._next_id
            self._next_id += 1
            self._episodes.append((ep_id, episode))
            self._total_steps += episode.length
            while self._total_steps > self.capacity_steps and len(self._episodes) > 1:
                _, old = self._episodes.pop(0)
                self._total_steps -= old.length
            return ep_id

    def _snapshot(self) -> list[tuple[int, Episode]]:
        with self._lock:
            return list(self._episodes)

    def sample_sequences(self, batch: int, length: int, seed: int) -> SequenceBatch:
        """Draw windows uniformly over all valid (episode, start) pairs."""
        episodes = self._snapshot()
        candidates = []  # (episode index, number of valid starts)
        for idx, (_, ep) in enumerate(episodes):
            n_starts = ep.length - length + 1
            if n_starts > 0:
                candidates.append((idx, n_starts))
        if not candidates:
            raise ReplayError(f"no eligible sequence of length {length}")

        counts = np.array([n for _, n in candidates], dtype=np.int64)
        cumulative = np.cumsum(counts)
        rng = np.random.default_rng(seed)
        draws = rng.integers(0, cumulative[-1], size=batch)

        obs, acts, rews, discs, ids, starts = [], [], [], [], [], []
        for draw in draws:
            slot = int(np.searchsorted(cumulative, draw, side="right"))
            start = int(draw - (cumulative[slot - 1] if slot > 0 else 0))
            ep_id, ep = episodes[candidates[slot][0]]
            obs.append(_obs_to_float(ep.observations[start + 1 : start + 1 + length]))
            acts.append(ep.actions[start : start + length].astype(np.float32))
            rews.append(ep.rewards[start : start + length].astype(np.float32))
            discs.append(ep.discount_flags[start : start + length].astype(np.float32))
            ids.append(ep_id)
            starts.append(start)
        return SequenceBatch(
            observations=np.stack(obs),
            actions=np.stack(acts),
            rewards=np.stack(rews),
            discounts=np.stack(discs),
            episode_ids=np.array(ids, dtype=np.int64),
            starts=np.array(starts, dtype=np.int64),
        )

    def all_rewards(self) -> np.ndarray:
        """Concatenated rewards of every stored episode, oldest first."""
        episodes = self._snapshot()
        if not episodes:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([ep.rewards for _, ep in episodes]).astype(np.float64)


def save_episode(episode: Episode, path: str | Path) -> None:
    """Persist one episode per file; the npz container records shapes/dtypes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        alignment_version=np.array(ALIGNMENT_VERSION),
        observations=episode.observations,
        actions=episode.actions,
        rewards=episode.rewards,
        discount_flags=episode.discount_flags,
    )


def load_episode(path: str | Path) -> Episode:
    with np.load(path) as data:
        version = int(data["alignment_version"])
        if version != ALIGNMENT_VERSION:
            raise ReplayError(f"unsupported episode alignment version {version}")
        return Episode(
            observations=data["observations"],
            actions=data["actions"],
            rewards=data["rewards"],
            discount_flags=data["discount_flags"],
        )
