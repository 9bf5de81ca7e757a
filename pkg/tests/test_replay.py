import numpy as np
import pytest
from scipy import stats

from tia.replay import Episode, ReplayBuffer, ReplayError, load_episode, save_episode

from conftest import random_episode


def make_episode(rng, length=10, size=8, reward_offset=0.0):
    ep = random_episode(rng, length=length, size=size)
    ep.rewards = ep.rewards + reward_offset
    return ep


class TestEpisode:
    def test_length_accounting(self):
        ep = random_episode(np.random.default_rng(0), length=10)
        assert ep.length == 10
        assert len(ep.observations) == 11

    def test_malformed_rewards_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ReplayError, match="malformed episode"):
            Episode(
                observations=rng.uniform(size=(11, 8, 8, 3)),
                actions=rng.uniform(size=(10, 2)),
                rewards=rng.uniform(size=9),
            )

    def test_malformed_observations_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ReplayError):
            Episode(
                observations=rng.uniform(size=(10, 8, 8, 3)),
                actions=rng.uniform(size=(10, 2)),
                rewards=rng.uniform(size=10),
            )


class TestBuffer:
    def test_step_count(self):
        buf = ReplayBuffer(100)
        buf.add_episode(random_episode(np.random.default_rng(0), length=10))
        assert buf.num_steps == 10
        assert len(buf) == 1

    def test_fifo_eviction(self):
        rng = np.random.default_rng(0)
        buf = ReplayBuffer(15)
        first = buf.add_episode(make_episode(rng, length=10))
        second = buf.add_episode(make_episode(rng, length=10))
        assert buf.num_steps == 10
        batch = buf.sample_sequences(8, 5, seed=0)
        assert set(batch.episode_ids.tolist()) == {second}
        assert first not in batch.episode_ids

    def test_single_valid_window(self):
        buf = ReplayBuffer(1000)
        buf.add_episode(random_episode(np.random.default_rng(0), length=10))
        batch = buf.sample_sequences(16, 10, seed=1)
        assert np.all(batch.starts == 0)

    def test_too_long_window_errors(self):
        buf = ReplayBuffer(1000)
        buf.add_episode(random_episode(np.random.default_rng(0), length=10))
        with pytest.raises(ReplayError, match="no eligible sequence"):
            buf.sample_sequences(4, 11, seed=0)

    def test_uniform_over_starts(self):
        # Oracle: T=12, L=5 has exactly T-L+1 = 8 valid starts; 10k draws should
        # be uniform (chi-square at p > 0.01) and each near 0.125 +/- 0.02.
        buf = ReplayBuffer(1000)
        buf.add_episode(random_episode(np.random.default_rng(0), length=12))
        batch = buf.sample_sequences(10_000, 5, seed=42)
        counts = np.bincount(batch.starts, minlength=8)
        assert counts.sum() == 10_000
        freqs = counts / 10_000
        assert np.all(np.abs(freqs - 0.125) <= 0.02)
        _, p = stats.chisquare(counts)
        assert p > 0.01

    def test_sampling_reproducible(self):
        buf = ReplayBuffer(1000)
        rng = np.random.default_rng(3)
        for _ in range(3):
            buf.add_episode(random_episode(rng, length=12))
        a = buf.sample_sequences(8, 5, seed=9)
        b = buf.sample_sequences(8, 5, seed=9)
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.episode_ids, b.episode_ids)
        assert np.array_equal(a.starts, b.starts)

    def test_windows_never_cross_episodes(self):
        rng = np.random.default_rng(1)
        buf = ReplayBuffer(1000)
        episodes = {}
        for k in range(4):
            ep = make_episode(rng, length=8 + k, reward_offset=10.0 * k)
            episodes[buf.add_episode(ep)] = ep
        batch = buf.sample_sequences(64, 5, seed=0)
        for row in range(batch.batch_size):
            ep = episodes[int(batch.episode_ids[row])]
            start = int(batch.starts[row])
            assert start + 5 <= ep.length
            assert np.array_equal(batch.rewards[row], ep.rewards[start:start + 5])

    def test_alignment_convention(self):
        # Window element k pairs a_{s+k} with the o and r it produced.
        ep = random_episode(np.random.default_rng(5), length=10)
        buf = ReplayBuffer(1000)
        buf.add_episode(ep)
        batch = buf.sample_sequences(4, 4, seed=7)
        for row in range(4):
            s = int(batch.starts[row])
            assert np.allclose(batch.actions[row], ep.actions[s:s + 4])
            assert np.allclose(batch.observations[row], ep.observations[s + 1:s + 5])
            assert np.allclose(batch.rewards[row], ep.rewards[s:s + 4])

    def test_uint8_observations_dequantized(self):
        rng = np.random.default_rng(2)
        obs = rng.integers(0, 256, size=(11, 8, 8, 3), dtype=np.uint8)
        ep = Episode(observations=obs, actions=rng.uniform(size=(10, 2)),
                     rewards=rng.uniform(size=10))
        buf = ReplayBuffer(100)
        buf.add_episode(ep)
        batch = buf.sample_sequences(2, 10, seed=0)
        assert batch.observations.dtype == np.float32
        assert batch.observations.max() <= 1.0
        assert np.allclose(batch.observations[0], obs[1:].astype(np.float32) / 255.0)


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        ep = random_episode(np.random.default_rng(0), length=10)
        path = tmp_path / "ep.npz"
        save_episode(ep, path)
        back = load_episode(path)
        assert np.array_equal(ep.observations, back.observations)
        assert np.array_equal(ep.actions, back.actions)
        assert np.array_equal(ep.rewards, back.rewards)
        assert np.array_equal(ep.discount_flags, back.discount_flags)
