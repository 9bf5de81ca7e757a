"""Task and distractor latent world models with cooperative mask-mixed
reconstruction and adversarial reward dissociation, plus the single-model
baseline and its inverse-dynamics variant.

Objective sign convention: every J_* term is a quantity to be *maximized*
(log-likelihoods and negated KL penalties). The task model's objective is
J_Oj + J_R + J_D; the distractor model's is J_Oj + J_Os + J_Radv + J_Ds. The
trainer minimizes the negative of each distinct term summed once; because the
two branches share no parameters, that routes gradients exactly as the two
objectives prescribe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelDims, TrainConfig, derive_seed, model_dims
from .nets import (
    MLP,
    RSSM,
    ConvDecoder,
    ConvEncoder,
    GaussianBelief,
    LatentState,
    WorldModelError,
    parameter_count,
    stack_states,
)
from .replay import SequenceBatch

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DecodeOutput:
    """Decoded image mean and the extra per-pixel features feeding the mask."""

    image_mean: torch.Tensor    # (..., H, W, 3)
    mask_features: torch.Tensor  # (..., H, W, 3)


@dataclass
class LossBreakdown:
    """The six objective terms, kept separate for logging and gradient tests."""

    j_oj: torch.Tensor
    j_os: torch.Tensor
    j_r: torch.Tensor
    j_radv: torch.Tensor
    j_d: torch.Tensor
    j_ds: torch.Tensor
    total_task: torch.Tensor
    total_distractor: torch.Tensor

    @classmethod
    def from_terms(cls, j_oj, j_os, j_r, j_radv, j_d, j_ds) -> "LossBreakdown":
        return cls(
            j_oj=j_oj, j_os=j_os, j_r=j_r, j_radv=j_radv, j_d=j_d, j_ds=j_ds,
            total_task=j_oj + j_r + j_d,
            total_distractor=j_oj + j_os + j_radv + j_ds,
        )

    def objective(self) -> torch.Tensor:
        """Every distinct term summed once; the trainer ascends this. Not the
        same as total_task + total_distractor, which counts j_oj twice."""
        return self.j_oj + self.j_os + self.j_r + self.j_radv + self.j_d + self.j_ds

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in (
            "j_oj", "j_os", "j_r", "j_radv", "j_d", "j_ds", "total_task", "total_distractor")}


class MaskMixer(nn.Module):
    """1x1 convolution over the channel-concatenated mask features of the two
    decoders, squashed through a sigmoid into a per-pixel blending mask."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(6, 1, kernel_size=1)

    def forward(self, task_features: torch.Tensor, distractor_features: torch.Tensor) -> torch.Tensor:
        x = torch.cat([task_features, distractor_features], dim=-1)
        lead = x.shape[:-3]
        x = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)
        mask = torch.sigmoid(self.conv(x)).permute(0, 2, 3, 1)
        return mask.reshape(*lead, *mask.shape[-3:])


class BranchModel(nn.Module):
    """One latent world model: encoder, recurrent cell with prior/posterior
    heads, an image decoder that also emits mask features, and a reward head.

    The distractor branch additionally carries a standalone image decoder
    (keeps it from degenerating) and its reward head plays the adversary.
    """

    def __init__(self, image_size: int, action_dim: int, dims: ModelDims,
                 min_std: float, branch: str, solo_decoder: bool):
        super().__init__()
        self.branch = branch
        self.image_size = image_size
        self.action_dim = action_dim
        self.encoder = ConvEncoder(image_size, dims.cnn_depth)
        self.rssm = RSSM(action_dim, self.encoder.embed_dim, dims.stoch,
                         dims.deter, dims.units, min_std, branch)
        self.feat_dim = dims.stoch + dims.deter
        self.decoder = ConvDecoder(self.feat_dim, image_size, dims.cnn_depth, out_channels=6)
        self.reward_head = MLP(self.feat_dim, 1, dims.units, 2)
        self.reward_head.branch = branch
        self.solo_decoder = (
            ConvDecoder(self.feat_dim, image_size, dims.cnn_depth, out_channels=3)
            if solo_decoder else None
        )


class TIABundle(nn.Module):
    """The full two-model system: task branch, distractor branch, mask mixer."""

    def __init__(self, task: BranchModel, distractor: BranchModel, mixer: MaskMixer):
        super().__init__()
        self.task = task
        self.distractor = distractor
        self.mixer = mixer

    @property
    def image_size(self) -> int:
        return self.task.image_size

    @property
    def action_dim(self) -> int:
        return self.task.action_dim

    def parameter_counts(self) -> dict:
        return {
            "task": parameter_count(self.task),
            "distractor": parameter_count(self.distractor),
            "mixer": parameter_count(self.mixer),
        }


class SingleWorldModel(nn.Module):
    """Single-model baseline. Tagged as the task branch so the policy stack
    reads its latents unchanged. The inverse-dynamics variant swaps the image
    decoder for an action-prediction head."""

    def __init__(self, image_size: int, action_dim: int, dims: ModelDims,
                 min_std: float, with_decoder: bool = True, with_inverse_head: bool = False):
        super().__init__()
        self.branch = "task"
        self.image_size = image_size
        self.action_dim = action_dim
        self.encoder = ConvEncoder(image_size, dims.cnn_depth)
        self.rssm = RSSM(action_dim, self.encoder.embed_dim, dims.stoch,
                         dims.deter, dims.units, min_std, "task")
        self.feat_dim = dims.stoch + dims.deter
        self.decoder = (
            ConvDecoder(self.feat_dim, image_size, dims.cnn_depth, out_channels=3)
            if with_decoder else None
        )
        self.reward_head = MLP(self.feat_dim, 1, dims.units, 2)
        self.reward_head.branch = "task"
        self.inverse_head = MLP(2 * self.feat_dim, action_dim, dims.units, 2) if with_inverse_head else None


def build_tia_bundle(config: TrainConfig, action_dim: int = 2, seed: int | None = None) -> TIABundle:
    """Construct the two-model bundle; branch parameters come from distinct
    seed streams so the models never start weight-tied."""
    seed = config.seed if seed is None else seed
    dims = model_dims(config, two_model_branch=True)
    torch.manual_seed(derive_seed(seed, "init-task"))
    task = BranchModel(config.env.image_size, action_dim, dims, config.min_std, "task", solo_decoder=False)
    torch.manual_seed(derive_seed(seed, "init-distractor"))
    distractor = BranchModel(config.env.image_size, action_dim, dims, config.min_std, "distractor", solo_decoder=True)
    torch.manual_seed(derive_seed(seed, "init-mixer"))
    mixer = MaskMixer()
    return TIABundle(task, distractor, mixer)


def build_single_model(config: TrainConfig, action_dim: int = 2, seed: int | None = None,
                       inverse: bool = False) -> SingleWorldModel:
    seed = config.seed if seed is None else seed
    dims = model_dims(config, two_model_branch=False)
    torch.manual_seed(derive_seed(seed, "init-single"))
    return SingleWorldModel(
        config.env.image_size, action_dim, dims, config.min_std,
        with_decoder=not inverse, with_inverse_head=inverse,
    )


# ---------------------------------------------------------------------------
# Single-step operations


def posterior_step(model, prev: LatentState, action: torch.Tensor, obs: torch.Tensor,
                   noise: torch.Tensor | None = None,
                   generator: torch.Generator | None = None) -> LatentState:
    """Advance one step conditioning on the new observation."""
    embed = model.encoder(obs)
    return model.rssm.posterior_step(prev, action, embed, noise=noise, generator=generator)


def prior_step(model, prev: LatentState, action: torch.Tensor,
               noise: torch.Tensor | None = None,
               generator: torch.Generator | None = None) -> LatentState:
    """Advance one step from dynamics alone; used for imagination and the KL
    target."""
    return model.rssm.prior_step(prev, action, noise=noise, generator=generator)


def decode_obs(model: BranchModel, s: LatentState) -> DecodeOutput:
    """Decode image mean and mask features from a (possibly time-stacked) state."""
    if s.branch != model.branch:
        raise WorldModelError(f"wrong branch: state is {s.branch!r}, model is {model.branch!r}")
    feat = s.feat
    lead = feat.shape[:-1]
    out = model.decoder(feat.reshape(-1, feat.shape[-1]))
    out = out.reshape(*lead, *out.shape[-3:])
    return DecodeOutput(image_mean=out[..., :3], mask_features=out[..., 3:])


def mix(task_out: DecodeOutput, distractor_out: DecodeOutput,
        mixer: MaskMixer) -> tuple[torch.Tensor, torch.Tensor]:
    """Blend the two decoded images with the learned sigmoid mask."""
    if task_out.image_mean.shape != distractor_out.image_mean.shape:
        raise WorldModelError(
            f"shape mismatch: task {tuple(task_out.image_mean.shape)} vs "
            f"distractor {tuple(distractor_out.image_mean.shape)}"
        )
    mask = mixer(task_out.mask_features, distractor_out.mask_features)
    joint = task_out.image_mean * mask + distractor_out.image_mean * (1.0 - mask)
    return mask, joint


# ---------------------------------------------------------------------------
# Loss terms


def gaussian_image_nll(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Unit-variance Gaussian NLL, summed over pixels and channels and averaged
    over any leading batch/time dimensions."""
    if pred.shape != target.shape:
        raise WorldModelError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    per_element = 0.5 * LOG_2PI + 0.5 * (pred - target) ** 2
    return per_element.sum(dim=(-3, -2, -1)).mean()


def _scalar_nll(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (0.5 * LOG_2PI + 0.5 * (pred - target) ** 2).mean()


def reward_nll(head: MLP, s: LatentState, r: torch.Tensor) -> torch.Tensor:
    """NLL of rewards under a unit-variance Gaussian around the head's
    prediction, averaged over batch and time."""
    branch = getattr(head, "branch", None)
    if branch is not None and branch != s.branch:
        raise WorldModelError(f"wrong branch: head is {branch!r}, state is {s.branch!r}")
    pred = head(s.feat).squeeze(-1)
    return _scalar_nll(pred, torch.as_tensor(r, dtype=pred.dtype))


def kl_regularizer(posterior: GaussianBelief, prior: GaussianBelief,
                   beta: float, free_nats: float) -> torch.Tensor:
    """-beta * max(KL(posterior || prior) - free_nats, 0), closed form for
    diagonal Gaussians, averaged over batch and time. Both sides receive
    gradient."""
    for belief in (posterior, prior):
        if bool((belief.std <= 0).any()):
            raise WorldModelError("non-positive std in Gaussian belief")
    var_ratio = (posterior.std / prior.std) ** 2
    mean_term = ((posterior.mean - prior.mean) / prior.std) ** 2
    kl = 0.5 * (var_ratio + mean_term - 1.0 - torch.log(var_ratio))
    kl = kl.sum(dim=-1)
    clipped = torch.clamp(kl - free_nats, min=0.0)
    return -beta * clipped.mean()


# ---------------------------------------------------------------------------
# Sequence losses


def _as_model_tensors(model: nn.Module, batch: SequenceBatch):
    dtype = next(model.parameters()).dtype
    obs = torch.as_tensor(batch.observations, dtype=dtype)
    actions = torch.as_tensor(batch.actions, dtype=dtype)
    rewards = torch.as_tensor(batch.rewards, dtype=dtype)
    if obs.ndim != 5:
        raise WorldModelError("batch observations must be (B, L, H, W, C)")
    if obs.shape[1] < 2:
        raise WorldModelError("batch length must be >= 2")
    return obs, actions, rewards


def unroll_posterior(model, obs: torch.Tensor, actions: torch.Tensor,
                     noise: torch.Tensor) -> tuple[LatentState, GaussianBelief]:
    """Filter a (B, L, H, W, C) observation sequence; returns time-stacked
    posterior states and the matching prior beliefs."""
    b, l = obs.shape[:2]
    embeds = model.encoder(obs.reshape(b * l, *obs.shape[2:])).reshape(b, l, -1)
    prev = model.rssm.initial(b)
    states, prior_means, prior_stds = [], [], []
    for k in range(l):
        state, prior_belief = model.rssm.observe_step(prev, actions[:, k], embeds[:, k], noise=noise[k])
        states.append(state)
        prior_means.append(prior_belief.mean)
        prior_stds.append(prior_belief.std)
        prev = state
    stacked = stack_states(states)
    priors = GaussianBelief(torch.stack(prior_means, dim=1), torch.stack(prior_stds, dim=1))
    return stacked, priors


def _decode_plain(decoder: ConvDecoder, states: LatentState) -> torch.Tensor:
    feat = states.feat
    lead = feat.shape[:-1]
    out = decoder(feat.reshape(-1, feat.shape[-1]))
    return out.reshape(*lead, *out.shape[-3:])


def compute_losses(bundle: TIABundle, batch: SequenceBatch, config: TrainConfig,
                   noise_seed: int, lambda_radv: float | None = None,
                   lambda_os: float | None = None, return_states: bool = False):
    """All six objective terms for one sequence batch.

    Noise for the two branches is drawn up front from one seeded generator,
    task first, so each branch's unroll is bit-independent of the other's
    parameters. The adversarial reward term reads the distractor reward head
    through frozen weights: its gradient reaches only the distractor dynamics.
    """
    obs, actions, rewards = _as_model_tensors(bundle, batch)
    b, l = obs.shape[:2]
    gen = torch.Generator().manual_seed(int(noise_seed))
    noise_task = torch.randn((l, b, bundle.task.rssm.stoch_size), generator=gen, dtype=obs.dtype)
    noise_dis = torch.randn((l, b, bundle.distractor.rssm.stoch_size), generator=gen, dtype=obs.dtype)

    task_states, task_priors = unroll_posterior(bundle.task, obs, actions, noise_task)
    dis_states, dis_priors = unroll_posterior(bundle.distractor, obs, actions, noise_dis)

    task_out = decode_obs(bundle.task, task_states)
    dis_out = decode_obs(bundle.distractor, dis_states)
    mask, joint = mix(task_out, dis_out, bundle.mixer)

    lam_radv = config.lambda_radv if lambda_radv is None else lambda_radv
    lam_os = config.lambda_os if lambda_os is None else lambda_os

    j_oj = -gaussian_image_nll(joint, obs)
    solo = _decode_plain(bundle.distractor.solo_decoder, dis_states)
    j_os = lam_os * -gaussian_image_nll(solo, obs)
    j_r = -reward_nll(bundle.task.reward_head, task_states, rewards)
    # -lambda * log-likelihood of the frozen head, i.e. +lambda * its NLL:
    # ascending this term pushes reward information out of the distractor.
    adv_pred = bundle.distractor.reward_head.forward_frozen(dis_states.feat).squeeze(-1)
    j_radv = lam_radv * _scalar_nll(adv_pred, rewards)
    j_d = kl_regularizer(task_states.belief, task_priors, config.beta, config.free_nats)
    j_ds = kl_regularizer(dis_states.belief, dis_priors, config.beta, config.free_nats)

    breakdown = LossBreakdown.from_terms(j_oj=j_oj, j_os=j_os, j_r=j_r,
                                         j_radv=j_radv, j_d=j_d, j_ds=j_ds)
    if return_states:
        aux = {"task_states": task_states.detach(), "mask_mean": float(mask.detach().mean())}
        return breakdown, aux
    return breakdown


def distractor_features(bundle: TIABundle, batch: SequenceBatch, config: TrainConfig,
                        noise_seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Detached distractor features and aligned rewards for the adversarial
    head's inner loop; uses the same noise stream as compute_losses."""
    with torch.no_grad():
        obs, actions, rewards = _as_model_tensors(bundle, batch)
        b, l = obs.shape[:2]
        gen = torch.Generator().manual_seed(int(noise_seed))
        torch.randn((l, b, bundle.task.rssm.stoch_size), generator=gen, dtype=obs.dtype)
        noise_dis = torch.randn((l, b, bundle.distractor.rssm.stoch_size), generator=gen, dtype=obs.dtype)
        dis_states, _ = unroll_posterior(bundle.distractor, obs, actions, noise_dis)
        feats = dis_states.feat.reshape(-1, bundle.distractor.feat_dim)
        return feats, rewards.reshape(-1)


def adversarial_head_update(head: MLP, feats: torch.Tensor, rewards: torch.Tensor,
                            iterations: int, step_size: float,
                            optimizer: torch.optim.Optimizer | None = None) -> list[float]:
    """Train the adversarial reward head on frozen distractor features for a
    fixed number of steps; returns the NLL measured at the start of each step.
    Only the head's parameters change."""
    if iterations <= 0:
        return []
    feats = feats.detach()
    rewards = rewards.detach()
    if optimizer is None:
        optimizer = torch.optim.Adam(head.parameters(), lr=step_size)
    history = []
    for _ in range(iterations):
        optimizer.zero_grad()
        nll = _scalar_nll(head(feats).squeeze(-1), rewards)
        history.append(float(nll.detach()))
        nll.backward()
        optimizer.step()
    return history


def dreamer_baseline_loss(model: SingleWorldModel, batch: SequenceBatch, config: TrainConfig,
                          noise_seed: int, return_states: bool = False):
    """Single-model objective: reconstruction + reward + KL. Distractor-side
    terms are identically zero."""
    if model.decoder is None:
        raise WorldModelError("model has no image decoder")
    obs, actions, rewards = _as_model_tensors(model, batch)
    b, l = obs.shape[:2]
    gen = torch.Generator().manual_seed(int(noise_seed))
    noise = torch.randn((l, b, model.rssm.stoch_size), generator=gen, dtype=obs.dtype)
    states, priors = unroll_posterior(model, obs, actions, noise)
    recon = _decode_plain(model.decoder, states)
    zero = torch.zeros((), dtype=obs.dtype)
    breakdown = LossBreakdown.from_terms(
        j_oj=-gaussian_image_nll(recon, obs),
        j_os=zero,
        j_r=-reward_nll(model.reward_head, states, rewards),
        j_radv=zero.clone(),
        j_d=kl_regularizer(states.belief, priors, config.beta, config.free_nats),
        j_ds=zero.clone(),
    )
    if return_states:
        aux = {"task_states": states.detach()}
        return breakdown, aux
    return breakdown


def inverse_model_loss(model: SingleWorldModel, batch: SequenceBatch, config: TrainConfig,
                       noise_seed: int, return_parts: bool = False):
    """Inverse-dynamics objective: action prediction from consecutive latent
    pairs plus the reward and KL terms. No reconstruction term, so image
    decoder parameters (if any) never enter."""
    if model.inverse_head is None:
        raise WorldModelError("model has no inverse-dynamics head")
    obs, actions, rewards = _as_model_tensors(model, batch)
    b, l = obs.shape[:2]
    gen = torch.Generator().manual_seed(int(noise_seed))
    noise = torch.randn((l, b, model.rssm.stoch_size), generator=gen, dtype=obs.dtype)
    states, priors = unroll_posterior(model, obs, actions, noise)
    feats = states.feat
    pairs = torch.cat([feats[:, :-1], feats[:, 1:]], dim=-1)
    pred = model.inverse_head(pairs)
    # The action between consecutive latents k and k+1 is the one that led
    # into observation k+1, i.e. batch.actions[:, k+1].
    target = actions[:, 1:]
    nll = (0.5 * LOG_2PI + 0.5 * (pred - target) ** 2).sum(dim=-1).mean()
    j_inv = -nll
    j_r = -reward_nll(model.reward_head, states, rewards)
    j_d = kl_regularizer(states.belief, priors, config.beta, config.free_nats)
    total = j_inv + j_r + j_d
    if return_parts:
        return total, {"j_inv": j_inv, "j_r": j_r, "j_d": j_d}
    return total


def inverse_states(model: SingleWorldModel, batch: SequenceBatch, config: TrainConfig,
                   noise_seed: int) -> LatentState:
    """Detached posterior states for policy learning under the inverse variant."""
    with torch.no_grad():
        obs, actions, _ = _as_model_tensors(model, batch)
        b, l = obs.shape[:2]
        gen = torch.Generator().manual_seed(int(noise_seed))
        noise = torch.randn((l, b, model.rssm.stoch_size), generator=gen, dtype=obs.dtype)
        states, _ = unroll_posterior(model, obs, actions, noise)
        return states


def dissociation_stats(model, batch: SequenceBatch, config: TrainConfig,
                       noise_seed: int) -> dict:
    """Per-element diagnostics on a held-out batch: reward NLL of each branch,
    mask coverage, and the distractor-only reconstruction NLL per pixel.

    For single-model variants the distractor-side entries are None.
    """
    with torch.no_grad():
        if isinstance(model, TIABundle):
            obs, actions, rewards = _as_model_tensors(model, batch)
            b, l = obs.shape[:2]
            gen = torch.Generator().manual_seed(int(noise_seed))
            noise_task = torch.randn((l, b, model.task.rssm.stoch_size), generator=gen, dtype=obs.dtype)
            noise_dis = torch.randn((l, b, model.distractor.rssm.stoch_size), generator=gen, dtype=obs.dtype)
            task_states, _ = unroll_posterior(model.task, obs, actions, noise_task)
            dis_states, _ = unroll_posterior(model.distractor, obs, actions, noise_dis)
            task_out = decode_obs(model.task, task_states)
            dis_out = decode_obs(model.distractor, dis_states)
            mask, joint = mix(task_out, dis_out, model.mixer)
            n_pixels = obs.shape[-3] * obs.shape[-2] * obs.shape[-1]
            solo = _decode_plain(model.distractor.solo_decoder, dis_states)
            return {
                "task_reward_nll": float(reward_nll(model.task.reward_head, task_states, rewards)),
                "distractor_reward_nll": float(reward_nll(model.distractor.reward_head, dis_states, rewards)),
                "mask_coverage": float(mask.mean()),
                "distractor_image_nll": float(gaussian_image_nll(solo, obs)) / n_pixels,
                "joint_image_nll": float(gaussian_image_nll(joint, obs)) / n_pixels,
            }
        obs, actions, rewards = _as_model_tensors(model, batch)
        b, l = obs.shape[:2]
        gen = torch.Generator().manual_seed(int(noise_seed))
        noise = torch.randn((l, b, model.rssm.stoch_size), generator=gen, dtype=obs.dtype)
        states, _ = unroll_posterior(model, obs, actions, noise)
        stats = {
            "task_reward_nll": float(reward_nll(model.reward_head, states, rewards)),
            "distractor_reward_nll": None,
            "mask_coverage": None,
            "distractor_image_nll": None,
            "joint_image_nll": None,
        }
        if model.decoder is not None:
            n_pixels = obs.shape[-3] * obs.shape[-2] * obs.shape[-1]
            recon = _decode_plain(model.decoder, states)
            stats["joint_image_nll"] = float(gaussian_image_nll(recon, obs)) / n_pixels
        return stats
