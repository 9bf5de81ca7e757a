import copy

import numpy as np
import pytest
import torch

from tia.agent import (
    AgentError,
    act,
    build_actor_critic,
    imagine,
    lambda_return,
    policy_update,
)

from conftest import tiny_bundle, tiny_config


@pytest.fixture
def bundle():
    return tiny_bundle(seed=0)


@pytest.fixture
def policy(bundle):
    return build_actor_critic(bundle.task.feat_dim, 2, units=8, min_std=0.1, seed=5).double()


def task_state(bundle, batch=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    start = bundle.task.rssm.initial(batch)
    start.deter += torch.randn(start.deter.shape, generator=gen, dtype=torch.float64)
    start.stoch += torch.randn(start.stoch.shape, generator=gen, dtype=torch.float64)
    return start


class TestAct:
    def test_zeroed_policy_gives_zero_action(self, bundle, policy):
        with torch.no_grad():
            for p in policy.actor.parameters():
                p.zero_()
        action = act(policy, task_state(bundle), explore=False)
        assert torch.equal(action, torch.zeros_like(action))

    def test_actions_stay_in_box(self, bundle, policy):
        state = task_state(bundle, batch=10_000, seed=3)
        gen = torch.Generator().manual_seed(0)
        actions = act(policy, state, explore=True, generator=gen, explore_noise=0.3)
        assert actions.shape == (10_000, 2)
        assert torch.all(actions >= -1.0) and torch.all(actions <= 1.0)

    def test_invariant_to_distractor_model(self, bundle, policy):
        state = task_state(bundle)
        before = act(policy, state, explore=False)
        with torch.no_grad():
            for p in bundle.distractor.parameters():
                p.mul_(7.0)
        after = act(policy, state, explore=False)
        assert torch.equal(before, after)

    def test_wrong_branch_rejected(self, bundle, policy):
        state = bundle.distractor.rssm.initial(1)
        with pytest.raises(AgentError, match="wrong branch"):
            act(policy, state, explore=False)


class TestImagine:
    def test_zero_horizon_only_start(self, bundle, policy):
        start = task_state(bundle)
        traj = imagine(bundle.task, start, policy, horizon=0, noise_seed=1)
        assert traj.horizon == 0
        assert len(traj.states) == 1
        assert traj.rewards.shape[0] == 0
        assert traj.values.shape == (1, 2)

    def test_state_count_is_horizon_plus_one(self, bundle, policy):
        traj = imagine(bundle.task, task_state(bundle), policy, horizon=5, noise_seed=1)
        assert len(traj.states) == 6
        assert traj.actions.shape == (5, 2, 2)
        assert traj.rewards.shape == (5, 2)

    def test_bit_invariant_to_distractor_parameters(self, bundle, policy):
        start = task_state(bundle)
        a = imagine(bundle.task, start, policy, horizon=4, noise_seed=9)
        with torch.no_grad():
            for p in bundle.distractor.parameters():
                p.add_(2.5)
        b = imagine(bundle.task, start, policy, horizon=4, noise_seed=9)
        assert torch.equal(a.rewards, b.rewards)
        assert torch.equal(a.actions, b.actions)
        assert all(torch.equal(x.stoch, y.stoch) for x, y in zip(a.states, b.states))

    def test_reproducible_given_seed(self, bundle, policy):
        start = task_state(bundle)
        a = imagine(bundle.task, start, policy, horizon=4, noise_seed=9)
        b = imagine(bundle.task, start, policy, horizon=4, noise_seed=9)
        assert torch.equal(a.rewards, b.rewards)

    def test_no_image_decoding(self, bundle, policy):
        # The rollout must not touch either decoder.
        start = task_state(bundle)
        a = imagine(bundle.task, start, policy, horizon=3, noise_seed=2)
        with torch.no_grad():
            for p in bundle.task.decoder.parameters():
                p.add_(10.0)
        b = imagine(bundle.task, start, policy, horizon=3, noise_seed=2)
        assert torch.equal(a.rewards, b.rewards)

    def test_wrong_branch_start_rejected(self, bundle, policy):
        start = bundle.distractor.rssm.initial(2)
        with pytest.raises(AgentError, match="wrong branch"):
            imagine(bundle.task, start, policy, horizon=3, noise_seed=0)


class TestLambdaReturn:
    def test_monte_carlo_reduction(self):
        targets = lambda_return([1.0, 1.0, 1.0], [0.0, 0.0, 0.0], bootstrap=0.0,
                                gamma=0.9, lam=1.0)
        assert targets[0] == pytest.approx(2.71, abs=1e-12)
        assert targets[1] == pytest.approx(1.9, abs=1e-12)
        assert targets[2] == pytest.approx(1.0, abs=1e-12)

    def test_lambda_zero_is_one_step_td(self):
        rewards = [0.5, 1.5, 2.5]
        values = [10.0, 20.0, 30.0]
        bootstrap = 40.0
        targets = lambda_return(rewards, values, bootstrap, gamma=0.9, lam=0.0)
        # G_t = r_t + gamma * v_{t+1}, with the bootstrap one past the end.
        assert targets[0] == pytest.approx(0.5 + 0.9 * 20.0, abs=1e-12)
        assert targets[1] == pytest.approx(1.5 + 0.9 * 30.0, abs=1e-12)
        assert targets[2] == pytest.approx(2.5 + 0.9 * 40.0, abs=1e-12)

    def test_all_zero(self):
        targets = lambda_return([0.0] * 4, [0.0] * 4, 0.0, gamma=0.99, lam=0.95)
        assert np.all(targets == 0.0)

    def test_lambda_one_closed_form(self):
        rng = np.random.default_rng(0)
        rewards = rng.uniform(-1, 1, size=6)
        values = rng.uniform(-1, 1, size=6)  # ignored at lam=1 except bootstrap
        bootstrap = 0.7
        gamma = 0.95
        targets = lambda_return(list(rewards), list(values), bootstrap, gamma, lam=1.0)
        for t in range(6):
            closed = sum(gamma ** (k - t) * rewards[k] for k in range(t, 6))
            closed += gamma ** (6 - t) * bootstrap
            assert targets[t] == pytest.approx(closed, abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(AgentError, match="share length"):
            lambda_return([1.0, 2.0], [1.0], 0.0, 0.9, 0.95)


class TestPolicyUpdate:
    def test_zero_rewards_and_values_leave_parameters(self, bundle, policy):
        with torch.no_grad():
            for p in bundle.task.reward_head.parameters():
                p.zero_()
            for p in policy.critic.parameters():
                p.zero_()
        before = copy.deepcopy(policy.state_dict())
        traj = imagine(bundle.task, task_state(bundle), policy, horizon=4, noise_seed=3)
        assert torch.all(traj.rewards == 0.0) and torch.all(traj.values == 0.0)
        actor_loss, critic_loss = policy_update(policy, traj, tiny_config())
        assert actor_loss == 0.0 and critic_loss == 0.0
        after = policy.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_critic_loss_matches_straight_line_recompute(self, bundle, policy):
        config = tiny_config()
        traj = imagine(bundle.task, task_state(bundle, batch=3, seed=7), policy,
                       horizon=6, noise_seed=11, gamma=config.gamma)
        # Independent pass: explicit backward recursion and plain MSE.
        rewards = traj.rewards.detach().numpy()
        values = traj.values.detach().numpy()
        h = traj.horizon
        expected_targets = np.zeros((h - 1, rewards.shape[1]))
        next_return = values[h]
        for t in reversed(range(h - 1)):
            next_value = values[t + 2] if t + 2 <= h - 1 else values[h]
            next_return = rewards[t] + config.gamma * (
                (1 - config.return_lambda) * next_value + config.return_lambda * next_return)
            expected_targets[t] = next_return
        with torch.no_grad():
            feats = torch.stack([s.feat for s in traj.states[1:h]])
            preds = policy.value(feats).numpy()
        expected_critic = float(np.mean((preds - expected_targets) ** 2))
        _, critic_loss = policy_update(policy, traj, config)
        assert critic_loss == pytest.approx(expected_critic, rel=1e-10)

    def test_fixed_point_targets_match_values(self, bundle, policy):
        config = tiny_config(gamma=0.9)
        c = 0.5
        with torch.no_grad():
            for p in bundle.task.reward_head.parameters():
                p.zero_()
            bundle.task.reward_head.net[-1].bias.fill_(c)
            for p in policy.critic.parameters():
                p.zero_()
            policy.critic.net[-1].bias.fill_(c / (1 - config.gamma))
        traj = imagine(bundle.task, task_state(bundle), policy, horizon=6,
                       noise_seed=5, gamma=config.gamma)
        targets = lambda_return(traj.rewards[:-1], traj.values[1:-1], traj.values[-1],
                                config.gamma, config.return_lambda)
        expected = c / (1 - config.gamma)
        assert torch.allclose(targets, torch.full_like(targets, expected), atol=1e-9)
        _, critic_loss = policy_update(policy, traj, config)
        assert critic_loss <= 1e-18

    def test_horizon_too_short_rejected(self, bundle, policy):
        traj = imagine(bundle.task, task_state(bundle), policy, horizon=1, noise_seed=0)
        with pytest.raises(AgentError, match="at least 2"):
            policy_update(policy, traj, tiny_config())
