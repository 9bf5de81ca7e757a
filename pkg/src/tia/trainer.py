"""Training orchestration: collection, interleaved world-model and policy
updates, metrics logging, checkpointing, and evaluation.

Every source of randomness is a pure function of (config.seed, purpose,
counter), so a run is reproducible end to end; wall time enters records
through an injectable clock so even log files can be made bit-identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import env as envmod
from .agent import ActorCritic, act, build_actor_critic, imagine, policy_update
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    load_into_module,
    save_checkpoint,
    state_dict_to_arrays,
)
from .config import TrainConfig, derive_seed, model_dims, replace
from .env import EnvConfig, MiniManyWorld
from .metrics import MetricsError, MetricsRecord, append_record, nll_against_mean
from .nets import flatten_states
from .replay import Episode, ReplayBuffer, SequenceBatch
from .worldmodel import (
    SingleWorldModel,
    TIABundle,
    adversarial_head_update,
    build_single_model,
    build_tia_bundle,
    compute_losses,
    dissociation_stats,
    distractor_features,
    dreamer_baseline_loss,
    inverse_model_loss,
    inverse_states,
)


class TrainerError(Exception):
    pass


class DivergenceError(TrainerError):
    def __init__(self, env_step: int, term: str):
        super().__init__(f"diverged at step {env_step}: {term} is not finite")
        self.env_step = env_step
        self.term = term


@dataclass
class TrainResult:
    records: list[MetricsRecord]
    checkpoint_path: Path | None
    metrics_path: Path | None
    parameter_counts: dict
    env_step: int


def _build_models(config: TrainConfig):
    if config.agent_variant == "tia":
        wm = build_tia_bundle(config)
        policy_model = wm.task
        two_model = True
    elif config.agent_variant == "dreamer":
        wm = build_single_model(config)
        policy_model = wm
        two_model = False
    else:
        wm = build_single_model(config, inverse=True)
        policy_model = wm
        two_model = False
    dims = model_dims(config, two_model_branch=two_model)
    policy = build_actor_critic(policy_model.feat_dim, 2, dims.units, config.min_std,
                                derive_seed(config.seed, "init-policy"))
    return wm, policy_model, policy


def _world_parameters(wm) -> list[torch.Tensor]:
    """World-model parameters for the main optimizer. The adversarial reward
    head is excluded: it trains only in its own inner loop."""
    if isinstance(wm, TIABundle):
        params = list(wm.task.parameters())
        params += [p for n, p in wm.distractor.named_parameters() if not n.startswith("reward_head")]
        params += list(wm.mixer.parameters())
        return params
    return list(wm.parameters())


def _parameter_counts(wm) -> dict:
    if isinstance(wm, TIABundle):
        return wm.parameter_counts()
    return {"model": sum(p.numel() for p in wm.parameters())}


def _optimizer_arrays(prefix: str, opt: torch.optim.Optimizer):
    arrays: dict[str, np.ndarray] = {}
    sd = opt.state_dict()
    for pid, state in sd["state"].items():
        for key, value in state.items():
            if torch.is_tensor(value):
                arrays[f"{prefix}/state/{pid}/{key}"] = value.detach().cpu().numpy()
    return arrays, sd["param_groups"]


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer,
                       arrays: dict[str, np.ndarray], param_groups) -> None:
    state: dict[int, dict] = {}
    head = prefix + "/state/"
    for key, value in arrays.items():
        if key.startswith(head):
            pid_str, field = key[len(head):].split("/", 1)
            state.setdefault(int(pid_str), {})[field] = torch.as_tensor(value.copy())
    opt.load_state_dict({"state": state, "param_groups": param_groups})


class _Run:
    """Mutable state of one training run."""

    def __init__(self, config: TrainConfig, clock):
        self.config = config
        self.clock = clock
        self.t0 = clock()
        self.env = MiniManyWorld(config.env)
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.wm, self.policy_model, self.policy = _build_models(config)
        self.wm_params = _world_parameters(self.wm)
        self.wm_opt = torch.optim.Adam(self.wm_params, lr=config.model_lr)
        self.head_opt = (
            torch.optim.Adam(self.wm.distractor.reward_head.parameters(), lr=config.model_lr)
            if isinstance(self.wm, TIABundle) else None
        )
        self.actor_opt = torch.optim.Adam(self.policy.actor.parameters(), lr=config.actor_lr)
        self.critic_opt = torch.optim.Adam(self.policy.critic.parameters(), lr=config.critic_lr)
        self.env_step = 0
        self.episode_index = 0
        self.train_step_index = 0
        self.reward_sum = 0.0
        self.reward_count = 0
        self.train_accumulator = 0
        self.eval_batch: SequenceBatch | None = None
        self.records: list[MetricsRecord] = []
        self.last_losses = {k: 0.0 for k in
                            ("j_oj", "j_os", "j_r", "j_radv", "j_d", "j_ds", "j_inv",
                             "total_task", "total_distractor")}

    # -- helpers -----------------------------------------------------------

    def running_reward_mean(self) -> float:
        return self.reward_sum / self.reward_count if self.reward_count else 0.0

    def note_rewards(self, rewards) -> None:
        self.reward_sum += float(np.sum(rewards))
        self.reward_count += len(rewards)

    def ensure_eval_batch(self) -> SequenceBatch | None:
        if self.eval_batch is None:
            try:
                self.eval_batch = self.buffer.sample_sequences(
                    self.config.batch, self.config.sequence_length,
                    derive_seed(self.config.seed, "evalbatch"))
            except Exception:
                return None
        return self.eval_batch

    def collect_episode(self, random_policy: bool, train_during: bool) -> Episode:
        cfg = self.config
        ep_index = self.episode_index
        self.episode_index += 1
        obs = self.env.reset(derive_seed(cfg.seed, "episode", ep_index))
        obs = _quantize(obs)
        observations = [obs]
        actions, rewards = [], []
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "collect", ep_index))
        np_rng = np.random.default_rng(derive_seed(cfg.seed, "random-policy", ep_index))
        prev_state = self.policy_model.rssm.initial(1)
        prev_action = torch.zeros((1, 2), dtype=prev_state.deter.dtype)
        done = False
        while not done:
            if random_policy:
                action = np_rng.uniform(-1.0, 1.0, size=2)
            else:
                with torch.no_grad():
                    obs_t = torch.as_tensor(_dequantize(obs)[None], dtype=prev_state.deter.dtype)
                    embed = self.policy_model.encoder(obs_t)
                    prev_state = self.policy_model.rssm.posterior_step(
                        prev_state, prev_action, embed, generator=gen)
                    action_t = act(self.policy, prev_state, explore=True, generator=gen,
                                   explore_noise=cfg.explore_noise)
                prev_action = action_t
                action = action_t.numpy()[0].astype(np.float64)
            before = self.env.state.step_index
            obs_f, reward, done = self.env.step(action)
            consumed = self.env.state.step_index - before
            obs = _quantize(obs_f)
            observations.append(obs)
            actions.append(np.asarray(action, dtype=np.float32))
            rewards.append(reward)
            self.env_step += consumed
            if train_during:
                self.train_accumulator += consumed
                while self.train_accumulator >= cfg.train_every:
                    self.train_accumulator -= cfg.train_every
                    self.train_step()
        episode = Episode(
            observations=np.stack(observations),
            actions=np.stack(actions),
            rewards=np.asarray(rewards, dtype=np.float32),
        )
        self.note_rewards(episode.rewards)
        return episode

    def train_step(self) -> None:
        cfg = self.config
        try:
            batch = self.buffer.sample_sequences(
                cfg.batch, cfg.sequence_length, derive_seed(cfg.seed, "sample", self.train_step_index))
        except Exception:
            return  # buffer not yet warm (e.g. right after a resume)
        idx = self.train_step_index
        self.train_step_index += 1
        noise_seed = derive_seed(cfg.seed, "noise", idx)
        lam_radv, lam_os = cfg.scheduled_lambdas(self.env_step)

        if isinstance(self.wm, TIABundle):
            feats, rs = distractor_features(self.wm, batch, cfg, noise_seed)
            adversarial_head_update(self.wm.distractor.reward_head, feats, rs,
                                    cfg.adversarial_iters, cfg.model_lr, self.head_opt)
            losses, aux = compute_losses(self.wm, batch, cfg, noise_seed,
                                         lambda_radv=lam_radv, lambda_os=lam_os,
                                         return_states=True)
            self._check_finite(losses.as_floats())
            self.wm_opt.zero_grad()
            (-losses.objective()).backward()
            torch.nn.utils.clip_grad_norm_(self.wm_params, cfg.grad_clip)
            self.wm_opt.step()
            start = flatten_states(aux["task_states"])
            self.last_losses.update(losses.as_floats())
            self.last_losses["j_inv"] = 0.0
        elif cfg.agent_variant == "dreamer":
            losses, aux = dreamer_baseline_loss(self.wm, batch, cfg, noise_seed, return_states=True)
            self._check_finite(losses.as_floats())
            self.wm_opt.zero_grad()
            (-losses.objective()).backward()
            torch.nn.utils.clip_grad_norm_(self.wm_params, cfg.grad_clip)
            self.wm_opt.step()
            start = flatten_states(aux["task_states"])
            self.last_losses.update(losses.as_floats())
            self.last_losses["j_inv"] = 0.0
        else:
            total, parts = inverse_model_loss(self.wm, batch, cfg, noise_seed, return_parts=True)
            floats = {k: float(v) for k, v in parts.items()}
            floats["total_task"] = float(total)
            self._check_finite(floats)
            self.wm_opt.zero_grad()
            (-total).backward()
            torch.nn.utils.clip_grad_norm_(self.wm_params, cfg.grad_clip)
            self.wm_opt.step()
            start = flatten_states(inverse_states(self.wm, batch, cfg, noise_seed))
            self.last_losses.update({"j_oj": 0.0, "j_os": 0.0, "j_radv": 0.0, "j_ds": 0.0,
                                     "total_distractor": 0.0})
            self.last_losses.update(floats)

        task_model = self.wm.task if isinstance(self.wm, TIABundle) else self.wm
        traj = imagine(task_model, start, self.policy, cfg.horizon,
                       derive_seed(cfg.seed, "imagine", idx), cfg.gamma)
        actor_loss, critic_loss = policy_update(self.policy, traj, cfg,
                                                self.actor_opt, self.critic_opt)
        if not (np.isfinite(actor_loss) and np.isfinite(critic_loss)):
            raise DivergenceError(self.env_step, "actor/critic loss")

    def _check_finite(self, values: dict) -> None:
        for term, value in values.items():
            if not np.isfinite(value):
                raise DivergenceError(self.env_step, term)

    def make_record(self, episodic_return: float) -> MetricsRecord:
        cfg = self.config
        stats = {"task_reward_nll": float("nan"), "distractor_reward_nll": None,
                 "mask_coverage": None, "distractor_image_nll": None}
        mp_nll = float("nan")
        batch = self.ensure_eval_batch()
        if batch is not None:
            stats = dissociation_stats(self.wm, batch, cfg, derive_seed(cfg.seed, "evalnoise"))
            mp_nll = nll_against_mean(batch.rewards, self.running_reward_mean())
        return MetricsRecord(
            env_step=self.env_step,
            variant=cfg.agent_variant,
            episodic_return=float(episodic_return),
            j_oj=self.last_losses["j_oj"],
            j_os=self.last_losses["j_os"],
            j_r=self.last_losses["j_r"],
            j_radv=self.last_losses["j_radv"],
            j_d=self.last_losses["j_d"],
            j_ds=self.last_losses["j_ds"],
            j_inv=self.last_losses["j_inv"],
            total_task=self.last_losses["total_task"],
            total_distractor=self.last_losses["total_distractor"],
            task_reward_nll=stats["task_reward_nll"],
            distractor_reward_nll=stats["distractor_reward_nll"],
            mean_predictor_nll=mp_nll,
            mask_coverage=stats["mask_coverage"],
            distractor_image_nll=stats["distractor_image_nll"],
            wall_time=float(self.clock() - self.t0),
        )

    def checkpoint_arrays(self) -> tuple[dict, dict]:
        arrays = {}
        arrays.update(state_dict_to_arrays("model", self.wm.state_dict()))
        arrays.update(state_dict_to_arrays("policy", self.policy.state_dict()))
        extra = {
            "episode_index": self.episode_index,
            "train_step_index": self.train_step_index,
            "reward_sum": self.reward_sum,
            "reward_count": self.reward_count,
            "train_accumulator": self.train_accumulator,
            "parameter_counts": _parameter_counts(self.wm),
            "optim_groups": {},
        }
        optimizers = {"wm_opt": self.wm_opt, "actor_opt": self.actor_opt,
                      "critic_opt": self.critic_opt}
        if self.head_opt is not None:
            optimizers["head_opt"] = self.head_opt
        for name, opt in optimizers.items():
            opt_arrays, groups = _optimizer_arrays(f"opt/{name}", opt)
            arrays.update(opt_arrays)
            extra["optim_groups"][name] = groups
        return arrays, extra

    def restore(self, ckpt: Checkpoint) -> None:
        load_into_module(self.wm, "model", ckpt.arrays)
        load_into_module(self.policy, "policy", ckpt.arrays)
        extra = ckpt.extra
        self.env_step = ckpt.env_step
        self.episode_index = extra["episode_index"]
        self.train_step_index = extra["train_step_index"]
        self.reward_sum = extra["reward_sum"]
        self.reward_count = extra["reward_count"]
        self.train_accumulator = extra.get("train_accumulator", 0)
        optimizers = {"wm_opt": self.wm_opt, "actor_opt": self.actor_opt,
                      "critic_opt": self.critic_opt}
        if self.head_opt is not None:
            optimizers["head_opt"] = self.head_opt
        for name, opt in optimizers.items():
            if name in extra.get("optim_groups", {}):
                _restore_optimizer(f"opt/{name}", opt, ckpt.arrays, extra["optim_groups"][name])


def _quantize(obs: np.ndarray) -> np.ndarray:
    return np.clip(np.round(obs * 255.0), 0, 255).astype(np.uint8)


def _dequantize(obs: np.ndarray) -> np.ndarray:
    return obs.astype(np.float32) / 255.0


def train(config: TrainConfig, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None, record_callback=None,
          clock=None) -> TrainResult:
    """Run the full training loop; deterministic given (config, clock).

    Emits one MetricsRecord per collected episode (prefill episodes included,
    so the first `prefill_episodes` records define the random-policy band),
    checkpoints every `checkpoint_every` env steps and at the end.
    """
    clock = clock or time.monotonic
    run = _Run(config, clock)

    metrics_path = None
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        ckpt_dir = out_dir / "checkpoints"
    if resume_from is not None:
        run.restore(load_checkpoint(resume_from))

    def emit(episodic_return: float) -> None:
        record = run.make_record(episodic_return)
        run.records.append(record)
        if metrics_path is not None:
            append_record(metrics_path, record)
        if record_callback is not None:
            record_callback(record)

    def save(tag: str) -> Path | None:
        if ckpt_dir is None:
            return None
        arrays, extra = run.checkpoint_arrays()
        return save_checkpoint(
            ckpt_dir / f"ckpt_{tag}.tia", variant=config.agent_variant,
            config=config, env_step=run.env_step, arrays=arrays, extra=extra)

    # Prefill with random-policy episodes; their records define the
    # random-return band used by the failure diagnosis.
    if resume_from is None:
        prefill = []
        for _ in range(config.prefill_episodes):
            episode = run.collect_episode(random_policy=True, train_during=False)
            run.buffer.add_episode(episode)
            prefill.append((run.env_step, episode.total_return))
        saved_step = run.env_step
        for step_at_end, ep_return in prefill:
            run.env_step = step_at_end
            emit(ep_return)
        run.env_step = saved_step

    next_checkpoint = ((run.env_step // config.checkpoint_every) + 1) * config.checkpoint_every
    last_path = None
    while run.env_step < config.total_env_steps:
        episode = run.collect_episode(random_policy=False, train_during=True)
        run.buffer.add_episode(episode)
        emit(episode.total_return)
        if run.env_step >= next_checkpoint:
            last_path = save(f"{run.env_step:08d}")
            next_checkpoint = ((run.env_step // config.checkpoint_every) + 1) * config.checkpoint_every
    final_path = save("final") or last_path

    return TrainResult(
        records=run.records,
        checkpoint_path=final_path,
        metrics_path=metrics_path,
        parameter_counts=_parameter_counts(run.wm),
        env_step=run.env_step,
    )


# ---------------------------------------------------------------------------
# Evaluation


def rebuild_from_checkpoint(ckpt: Checkpoint):
    """Reconstruct world model and policy modules from a checkpoint."""
    config = ckpt.config
    if ckpt.variant == "tia":
        wm = build_tia_bundle(config)
        policy_model = wm.task
        two_model = True
    elif ckpt.variant == "dreamer":
        wm = build_single_model(config)
        policy_model = wm
        two_model = False
    elif ckpt.variant == "dreamer_inverse":
        wm = build_single_model(config, inverse=True)
        policy_model = wm
        two_model = False
    else:
        raise CheckpointError(f"unknown variant {ckpt.variant!r}")
    dims = model_dims(config, two_model_branch=two_model)
    policy = build_actor_critic(policy_model.feat_dim, 2, dims.units, config.min_std,
                                derive_seed(config.seed, "init-policy"))
    load_into_module(wm, "model", ckpt.arrays)
    load_into_module(policy, "policy", ckpt.arrays)
    return wm, policy_model, policy


def _as_checkpoint(checkpoint: Checkpoint | str | Path) -> Checkpoint:
    if isinstance(checkpoint, Checkpoint):
        return checkpoint
    return load_checkpoint(checkpoint)


def run_policy_episode(policy_model, policy: ActorCritic, env_config: EnvConfig,
                       seed: int, explore: bool = False,
                       generator: torch.Generator | None = None) -> float:
    """One episode under the policy; posterior uses zero noise when not
    exploring so evaluation is deterministic."""
    world = MiniManyWorld(env_config)
    obs = world.reset(seed)
    prev_state = policy_model.rssm.initial(1)
    dtype = prev_state.deter.dtype
    prev_action = torch.zeros((1, 2), dtype=dtype)
    total = 0.0
    done = False
    with torch.no_grad():
        while not done:
            obs_t = torch.as_tensor(obs[None], dtype=dtype)
            embed = policy_model.encoder(obs_t)
            noise = None if explore else torch.zeros((1, policy_model.rssm.stoch_size), dtype=dtype)
            prev_state = policy_model.rssm.posterior_step(
                prev_state, prev_action, embed, noise=noise, generator=generator)
            action_t = act(policy, prev_state, explore=explore, generator=generator)
            prev_action = action_t
            obs, reward, done = world.step(action_t.numpy()[0].astype(np.float64))
            total += reward
    return total


def evaluate(checkpoint: Checkpoint | str | Path, env_config: EnvConfig | None = None,
             episodes: int = 10, seed: int = 0) -> dict:
    """Mean and spread of episodic return over deterministic policy rollouts.

    Passing an env_config with a different background measures transfer to
    unseen distraction.
    """
    if episodes <= 0:
        raise TrainerError("no episodes requested")
    ckpt = _as_checkpoint(checkpoint)
    wm, policy_model, policy = rebuild_from_checkpoint(ckpt)
    env_config = env_config or ckpt.config.env
    returns = [
        run_policy_episode(policy_model, policy, env_config,
                           derive_seed(seed, "eval-episode", i))
        for i in range(episodes)
    ]
    return {
        "episodes": episodes,
        "mean_return": float(np.mean(returns)),
        "std_return": float(np.std(returns)),
        "returns": returns,
    }
