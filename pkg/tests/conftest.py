import os

import numpy as np
import pytest
import torch

from tia.config import ModelDims, TrainConfig, derive_seed
from tia.env import EnvConfig
from tia.replay import Episode, ReplayBuffer, SequenceBatch
from tia.worldmodel import BranchModel, MaskMixer, SingleWorldModel, TIABundle

TINY_DIMS = ModelDims(stoch=4, deter=8, units=8, cnn_depth=4)

RUN_SLOW = os.environ.get("TIA_RUN_SLOW", "") == "1"


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="multi-hour training run; set TIA_RUN_SLOW=1 to enable")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_config(**overrides) -> TrainConfig:
    """Smallest geometry the conv stacks support: 8x8 images, 4-dim latents."""
    env = overrides.pop("env", None) or EnvConfig(image_size=16, episode_length=20,
                                                  action_repeat=1, n_distractors=1)
    base = dict(
        env=env,
        stoch_size=4, deter_size=8, hidden_units=8, cnn_depth=4,
        batch=2, sequence_length=4, horizon=5,
        prefill_episodes=2, total_env_steps=100, train_every=10,
        adversarial_iters=2, checkpoint_every=10_000,
        free_nats=0.0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def tiny_bundle(seed=0, size=8, dims=TINY_DIMS, min_std=0.1) -> TIABundle:
    """Two-model bundle at gradient-check geometry (8x8 images, 4-dim stoch),
    in float64."""
    torch.manual_seed(derive_seed(seed, "init-task"))
    task = BranchModel(size, 2, dims, min_std, "task", solo_decoder=False)
    torch.manual_seed(derive_seed(seed, "init-distractor"))
    distractor = BranchModel(size, 2, dims, min_std, "distractor", solo_decoder=True)
    torch.manual_seed(derive_seed(seed, "init-mixer"))
    mixer = MaskMixer()
    return TIABundle(task, distractor, mixer).double()


def tiny_single(seed=0, size=8, dims=TINY_DIMS, min_std=0.1, with_decoder=True,
                with_inverse_head=False) -> SingleWorldModel:
    torch.manual_seed(derive_seed(seed, "init-single"))
    return SingleWorldModel(size, 2, dims, min_std, with_decoder=with_decoder,
                            with_inverse_head=with_inverse_head).double()


def random_batch(rng: np.random.Generator, batch=2, length=4, size=8, action_dim=2) -> SequenceBatch:
    return SequenceBatch(
        observations=rng.uniform(0, 1, size=(batch, length, size, size, 3)).astype(np.float32),
        actions=rng.uniform(-1, 1, size=(batch, length, action_dim)).astype(np.float32),
        rewards=rng.uniform(0, 2, size=(batch, length)).astype(np.float32),
        discounts=np.ones((batch, length), dtype=np.float32),
        episode_ids=np.zeros(batch, dtype=np.int64),
        starts=np.zeros(batch, dtype=np.int64),
    )


def random_episode(rng: np.random.Generator, length=10, size=16) -> Episode:
    return Episode(
        observations=rng.uniform(0, 1, size=(length + 1, size, size, 3)).astype(np.float32),
        actions=rng.uniform(-1, 1, size=(length, 2)).astype(np.float32),
        rewards=rng.uniform(0, 2, size=length).astype(np.float32),
    )


def filled_buffer(seed=0, episodes=2, length=10, size=16) -> ReplayBuffer:
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(100_000)
    for _ in range(episodes):
        buf.add_episode(random_episode(rng, length=length, size=size))
    return buf
