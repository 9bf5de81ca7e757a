"""Latent-imagination actor-critic. The policy and value heads read only the
task branch's latents, and imagined rollouts unroll the task prior alone, so
the agent is bit-invariant to everything the distractor model learns."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig
from .nets import MLP, GaussianBelief, LatentState


class AgentError(Exception):
    pass


class ActorCritic(nn.Module):
    """Tanh-squashed diagonal-Gaussian action model plus a value head."""

    def __init__(self, feat_dim: int, action_dim: int = 2, units: int = 96, min_std: float = 0.1):
        super().__init__()
        self.action_dim = action_dim
        self.min_std = min_std
        self.actor = MLP(feat_dim, 2 * action_dim, units, 2)
        self.critic = MLP(feat_dim, 1, units, 2)

    def action_belief(self, feat: torch.Tensor) -> GaussianBelief:
        mean, std_raw = torch.chunk(self.actor(feat), 2, dim=-1)
        return GaussianBelief(mean, F.softplus(std_raw) + self.min_std)

    def value(self, feat: torch.Tensor) -> torch.Tensor:
        return self.critic(feat).squeeze(-1)


def build_actor_critic(feat_dim: int, action_dim: int, units: int, min_std: float, seed: int) -> ActorCritic:
    torch.manual_seed(seed)
    return ActorCritic(feat_dim, action_dim, units, min_std)


def _check_task_branch(state: LatentState) -> None:
    if state.branch != "task":
        raise AgentError(f"wrong branch: policy reads task latents only, got {state.branch!r}")


def act(policy: ActorCritic, s_plus: LatentState, explore: bool,
        generator: torch.Generator | None = None, explore_noise: float = 0.3) -> torch.Tensor:
    """Action in [-1, 1]^A. Deterministic tanh of the mean when not exploring;
    otherwise a squashed sample plus additive collection noise."""
    _check_task_branch(s_plus)
    belief = policy.action_belief(s_plus.feat)
    if not explore:
        return torch.tanh(belief.mean)
    eps = torch.randn(belief.mean.shape, generator=generator,
                      dtype=belief.mean.dtype, device=belief.mean.device)
    action = torch.tanh(belief.mean + belief.std * eps)
    if explore_noise > 0:
        action = action + explore_noise * torch.randn(
            action.shape, generator=generator, dtype=action.dtype, device=action.device)
    return torch.clamp(action, -1.0, 1.0)


@dataclass
class ImaginedTrajectory:
    """H+1 latent states rolled out under the policy, with predicted rewards
    at the H arrival states and values at every state."""

    states: list[LatentState]
    actions: torch.Tensor  # (H, B, A)
    rewards: torch.Tensor  # (H, B)
    values: torch.Tensor   # (H+1, B)
    gamma: float

    @property
    def horizon(self) -> int:
        return len(self.states) - 1


def imagine(task_model, start: LatentState, policy: ActorCritic, horizon: int,
            noise_seed: int, gamma: float = 0.99) -> ImaginedTrajectory:
    """Roll the task prior forward under sampled policy actions.

    No observation decoding happens here; rewards come straight from the task
    reward head. Gradients flow through the whole rollout for BPTT.
    """
    _check_task_branch(start)
    gen = torch.Generator().manual_seed(int(noise_seed))
    state = start.detach()
    states = [state]
    actions = []
    for _ in range(horizon):
        belief = policy.action_belief(state.feat)
        eps = torch.randn(belief.mean.shape, generator=gen, dtype=belief.mean.dtype)
        action = torch.tanh(belief.mean + belief.std * eps)
        stoch_noise = torch.randn(
            (state.stoch.shape[0], task_model.rssm.stoch_size), generator=gen, dtype=belief.mean.dtype)
        state = task_model.rssm.prior_step(state, action, noise=stoch_noise)
        states.append(state)
        actions.append(action)
    feats_all = torch.stack([s.feat for s in states])  # (H+1, B, F)
    if horizon > 0:
        rewards = task_model.reward_head(feats_all[1:]).squeeze(-1)
        actions_t = torch.stack(actions)
    else:
        batch = start.deter.shape[0]
        rewards = torch.zeros((0, batch), dtype=start.deter.dtype)
        actions_t = torch.zeros((0, batch, policy.action_dim), dtype=start.deter.dtype)
    values = policy.value(feats_all)
    return ImaginedTrajectory(states=states, actions=actions_t, rewards=rewards,
                              values=values, gamma=gamma)


def lambda_return(rewards, values, bootstrap, gamma: float, lam: float):
    """Recursive lambda-return over a sequence of (reward, value) steps.

    G_t = r_t + gamma * ((1 - lam) * v_{t+1} + lam * G_{t+1}), where the value
    one past the end and the terminal return are both `bootstrap`. `values[t]`
    is the value at the same step as `rewards[t]`; entry 0 never enters the
    recursion but is kept so the two sequences stay aligned.
    """
    n = len(rewards)
    if len(values) != n:
        raise AgentError(f"rewards and values must share length, got {n} and {len(values)}")
    targets = [None] * n
    next_return = bootstrap
    for t in reversed(range(n)):
        next_value = values[t + 1] if t + 1 < n else bootstrap
        next_return = rewards[t] + gamma * ((1.0 - lam) * next_value + lam * next_return)
        targets[t] = next_return
    if n > 0 and torch.is_tensor(targets[0]):
        return torch.stack(targets)
    return np.array(targets, dtype=np.float64)


def _grads_for(loss: torch.Tensor, params: list[torch.Tensor]) -> list[torch.Tensor]:
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]


def policy_update(policy: ActorCritic, trajectory: ImaginedTrajectory, config: TrainConfig,
                  actor_opt: torch.optim.Optimizer | None = None,
                  critic_opt: torch.optim.Optimizer | None = None) -> tuple[float, float]:
    """One actor step (maximize mean lambda-return by backprop through the
    imagined dynamics) and one critic step (squared error to stop-gradient
    targets)."""
    h = trajectory.horizon
    if h < 2:
        raise AgentError("policy update needs an imagined horizon of at least 2")
    rewards = trajectory.rewards            # (H, B), rewards at states 1..H
    values = trajectory.values              # (H+1, B), values at states 0..H
    targets = lambda_return(
        rewards[:-1], values[1:-1], bootstrap=values[-1],
        gamma=trajectory.gamma, lam=config.return_lambda,
    )                                       # (H-1, B), targets for states 1..H-1
    targets_sg = targets.detach()

    actor_params = list(policy.actor.parameters())
    critic_params = list(policy.critic.parameters())

    actor_loss = -targets.mean()
    actor_grads = _grads_for(actor_loss, actor_params)

    feats = torch.stack([s.feat for s in trajectory.states[1:h]]).detach()
    value_pred = policy.value(feats)
    critic_loss = F.mse_loss(value_pred, targets_sg)
    critic_grads = _grads_for(critic_loss, critic_params)

    if actor_opt is None:
        actor_opt = torch.optim.Adam(actor_params, lr=config.actor_lr)
    if critic_opt is None:
        critic_opt = torch.optim.Adam(critic_params, lr=config.critic_lr)
    for params, grads, opt in ((actor_params, actor_grads, actor_opt),
                               (critic_params, critic_grads, critic_opt)):
        for p, g in zip(params, grads):
            p.grad = g
        torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
        opt.step()
        for p in params:
            p.grad = None
    return float(actor_loss.detach()), float(critic_loss.detach())
