"""Neural building blocks: conv encoder/decoder, MLP heads, and the recurrent
latent cell with Gaussian prior/posterior heads.

All stochastic draws go through explicit torch.Generator objects supplied by
callers, so every forward pass is a pure function of (parameters, inputs,
noise). Modules run in whatever dtype their parameters hold; tests move them
to float64 for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


class WorldModelError(Exception):
    pass


@dataclass
class GaussianBelief:
    """Diagonal Gaussian over a stochastic latent; std is floored above zero."""

    mean: torch.Tensor
    std: torch.Tensor


@dataclass
class LatentState:
    """One recurrent latent: deterministic path, sampled stochastic vector and
    the belief it was drawn from. `branch` tags which model owns it."""

    deter: torch.Tensor
    stoch: torch.Tensor
    belief: GaussianBelief
    branch: str

    @property
    def feat(self) -> torch.Tensor:
        return torch.cat([self.deter, self.stoch], dim=-1)

    def detach(self) -> "LatentState":
        return LatentState(
            deter=self.deter.detach(),
            stoch=self.stoch.detach(),
            belief=GaussianBelief(self.belief.mean.detach(), self.belief.std.detach()),
            branch=self.branch,
        )


def stack_states(states: list[LatentState]) -> LatentState:
    """Stack per-step states along a new dim 1 -> tensors of shape (B, L, ...)."""
    return LatentState(
        deter=torch.stack([s.deter for s in states], dim=1),
        stoch=torch.stack([s.stoch for s in states], dim=1),
        belief=GaussianBelief(
            torch.stack([s.belief.mean for s in states], dim=1),
            torch.stack([s.belief.std for s in states], dim=1),
        ),
        branch=states[0].branch,
    )


def flatten_states(state: LatentState) -> LatentState:
    """Merge (B, L, ...) state tensors into (B*L, ...)."""
    return LatentState(
        deter=state.deter.reshape(-1, state.deter.shape[-1]),
        stoch=state.stoch.reshape(-1, state.stoch.shape[-1]),
        belief=GaussianBelief(
            state.belief.mean.reshape(-1, state.belief.mean.shape[-1]),
            state.belief.std.reshape(-1, state.belief.std.shape[-1]),
        ),
        branch=state.branch,
    )


def _num_conv_levels(image_size: int) -> int:
    levels = int(math.log2(image_size / 4))
    if 4 * 2**levels != image_size:
        raise WorldModelError(f"image_size {image_size} is not 4 * 2^k")
    return levels


class ConvEncoder(nn.Module):
    """Strided conv stack mapping (B, H, W, C) images in [0,1] to flat embeddings."""

    def __init__(self, image_size: int, depth: int = 24, in_channels: int = 3):
        super().__init__()
        self.image_size = image_size
        self.in_channels = in_channels
        layers = []
        ch = in_channels
        for i in range(_num_conv_levels(image_size)):
            out = depth * 2**i
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.ELU()]
            ch = out
        self.net = nn.Sequential(*layers)
        self.embed_dim = ch * 4 * 4

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        if obs.shape[-3] != self.image_size or obs.shape[-1] != self.in_channels:
            raise WorldModelError(
                f"observation shape {tuple(obs.shape[-3:])} does not match configured "
                f"({self.image_size}, {self.image_size}, {self.in_channels})"
            )
        x = obs.permute(0, 3, 1, 2) - 0.5
        return self.net(x).flatten(1)


class ConvDecoder(nn.Module):
    """Transposed-conv stack mapping flat features to (B, H, W, out_channels).

    Output is an unbounded Gaussian mean, offset by 0.5 so a zeroed network
    starts at mid-gray.
    """

    def __init__(self, feat_dim: int, image_size: int, depth: int = 24, out_channels: int = 3):
        super().__init__()
        levels = _num_conv_levels(image_size)
        self.ch0 = depth * 2 ** (levels - 1)
        self.fc = nn.Linear(feat_dim, self.ch0 * 16)
        layers = []
        ch = self.ch0
        for i in range(levels - 1, 0, -1):
            out = depth * 2 ** (i - 1)
            layers += [nn.ConvTranspose2d(ch, out, 4, stride=2, padding=1), nn.ELU()]
            ch = out
        layers += [nn.ConvTranspose2d(ch, out_channels, 4, stride=2, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        x = self.fc(feat).view(-1, self.ch0, 4, 4)
        x = self.net(x)
        return x.permute(0, 2, 3, 1) + 0.5


class MLP(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, units: int = 96, hidden_layers: int = 2):
        super().__init__()
        layers = []
        d = in_dim
        for _ in range(hidden_layers):
            layers += [nn.Linear(d, units), nn.ELU()]
            d = units
        layers += [nn.Linear(d, out_dim)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def forward_frozen(self, x: torch.Tensor) -> torch.Tensor:
        """Apply the MLP with its parameters treated as constants.

        Gradients still flow into `x`; none reach the MLP's own weights. Used
        for the adversarial reward term, where the head is held fixed while
        the upstream model is pushed against it.
        """
        for module in self.net:
            if isinstance(module, nn.Linear):
                x = F.linear(x, module.weight.detach(), module.bias.detach())
            elif isinstance(module, nn.ELU):
                x = F.elu(x)
            else:
                raise WorldModelError(f"unsupported layer {type(module).__name__}")
        return x


class RSSM(nn.Module):
    """Recurrent state-space cell with a shared deterministic path and separate
    Gaussian prior / posterior heads that branch after the recurrent update."""

    def __init__(
        self,
        action_dim: int,
        embed_dim: int,
        stoch: int = 16,
        deter: int = 96,
        units: int = 96,
        min_std: float = 0.1,
        branch: str = "task",
    ):
        super().__init__()
        self.action_dim = action_dim
        self.stoch_size = stoch
        self.deter_size = deter
        self.min_std = min_std
        self.branch = branch
        self.input_layer = nn.Linear(stoch + action_dim, units)
        self.cell = nn.GRUCell(units, deter)
        self.prior_hidden = nn.Linear(deter, units)
        self.prior_out = nn.Linear(units, 2 * stoch)
        self.post_hidden = nn.Linear(deter + embed_dim, units)
        self.post_out = nn.Linear(units, 2 * stoch)

    def _param(self) -> torch.Tensor:
        return self.prior_out.weight

    def initial(self, batch: int) -> LatentState:
        p = self._param()
        zeros = lambda d: torch.zeros(batch, d, dtype=p.dtype, device=p.device)
        return LatentState(
            deter=zeros(self.deter_size),
            stoch=zeros(self.stoch_size),
            belief=GaussianBelief(zeros(self.stoch_size), torch.ones_like(zeros(self.stoch_size))),
            branch=self.branch,
        )

    def _check_prev(self, prev: LatentState) -> None:
        if prev.branch != self.branch:
            raise WorldModelError(f"wrong branch: state is {prev.branch!r}, model is {self.branch!r}")

    def _advance(self, prev: LatentState, action: torch.Tensor) -> torch.Tensor:
        x = F.elu(self.input_layer(torch.cat([prev.stoch, action], dim=-1)))
        return self.cell(x, prev.deter)

    def _belief(self, raw: torch.Tensor) -> GaussianBelief:
        mean, std_raw = torch.chunk(raw, 2, dim=-1)
        std = F.softplus(std_raw) + self.min_std
        return GaussianBelief(mean, std)

    def _sample(self, belief: GaussianBelief, noise: torch.Tensor | None,
                generator: torch.Generator | None) -> torch.Tensor:
        if noise is None:
            noise = torch.randn(
                belief.mean.shape, generator=generator,
                dtype=belief.mean.dtype, device=belief.mean.device,
            )
        return belief.mean + belief.std * noise

    def prior_step(self, prev: LatentState, action: torch.Tensor,
                   noise: torch.Tensor | None = None,
                   generator: torch.Generator | None = None) -> LatentState:
        self._check_prev(prev)
        deter = self._advance(prev, action)
        belief = self._belief(self.prior_out(F.elu(self.prior_hidden(deter))))
        return LatentState(deter, self._sample(belief, noise, generator), belief, self.branch)

    def posterior_step(self, prev: LatentState, action: torch.Tensor, embed: torch.Tensor,
                       noise: torch.Tensor | None = None,
                       generator: torch.Generator | None = None) -> LatentState:
        self._check_prev(prev)
        deter = self._advance(prev, action)
        belief = self._belief(self.post_out(F.elu(self.post_hidden(torch.cat([deter, embed], dim=-1)))))
        return LatentState(deter, self._sample(belief, noise, generator), belief, self.branch)

    def observe_step(self, prev: LatentState, action: torch.Tensor, embed: torch.Tensor,
                     noise: torch.Tensor | None = None,
                     generator: torch.Generator | None = None) -> tuple[LatentState, GaussianBelief]:
        """Posterior state plus the prior belief for the same transition.

        Both heads read the identical deterministic-path value, so this is
        exactly one recurrent advance.
        """
        self._check_prev(prev)
        deter = self._advance(prev, action)
        prior_belief = self._belief(self.prior_out(F.elu(self.prior_hidden(deter))))
        post_belief = self._belief(self.post_out(F.elu(self.post_hidden(torch.cat([deter, embed], dim=-1)))))
        state = LatentState(deter, self._sample(post_belief, noise, generator), post_belief, self.branch)
        return state, prior_belief


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
