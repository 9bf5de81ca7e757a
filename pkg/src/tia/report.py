"""Qualitative reporting: decomposition strips showing what each model
reconstructs, and training-curve / reward-dissociation plots."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import NLL_FLOOR, derive_seed
from .env import EnvConfig, MiniManyWorld
from .metrics import MetricsError, MetricsRecord, load_metrics
from .trainer import TrainerError, _as_checkpoint, rebuild_from_checkpoint
from .worldmodel import TIABundle, decode_obs, mix


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def render_report(checkpoint: Checkpoint | str | Path, out_dir: str | Path,
                  env_config: EnvConfig | None = None, n_frames: int = 8,
                  seed: int = 0) -> list[Path]:
    """Write one tiled strip per frame: the raw observation next to what the
    models reconstruct. For the two-model variant that is
    [raw | joint | task | distractor | mask]; the single-model baseline gets
    [raw | reconstruction]."""
    from PIL import Image

    ckpt = _as_checkpoint(checkpoint)
    wm, policy_model, _ = rebuild_from_checkpoint(ckpt)
    if not isinstance(wm, TIABundle) and wm.decoder is None:
        raise TrainerError("checkpoint has no image decoder to render")
    env_config = env_config or ckpt.config.env
    world = MiniManyWorld(env_config)
    rng = np.random.default_rng(derive_seed(seed, "render-actions"))
    obs = world.reset(derive_seed(seed, "render-episode"))

    dtype = next(wm.parameters()).dtype
    if isinstance(wm, TIABundle):
        states = {"task": wm.task.rssm.initial(1), "distractor": wm.distractor.rssm.initial(1)}
    else:
        states = {"task": wm.rssm.initial(1)}
    prev_action = torch.zeros((1, 2), dtype=dtype)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with torch.no_grad():
        for i in range(n_frames):
            obs_t = torch.as_tensor(obs[None], dtype=dtype)
            panels = [obs]
            if isinstance(wm, TIABundle):
                for name, model in (("task", wm.task), ("distractor", wm.distractor)):
                    embed = model.encoder(obs_t)
                    noise = torch.zeros((1, model.rssm.stoch_size), dtype=dtype)
                    states[name] = model.rssm.posterior_step(states[name], prev_action, embed, noise=noise)
                task_out = decode_obs(wm.task, states["task"])
                dis_out = decode_obs(wm.distractor, states["distractor"])
                mask, joint = mix(task_out, dis_out, wm.mixer)
                panels += [
                    joint[0].numpy(),
                    task_out.image_mean[0].numpy(),
                    dis_out.image_mean[0].numpy(),
                    np.repeat(mask[0].numpy(), 3, axis=-1),
                ]
            else:
                embed = wm.encoder(obs_t)
                noise = torch.zeros((1, wm.rssm.stoch_size), dtype=dtype)
                states["task"] = wm.rssm.posterior_step(states["task"], prev_action, embed, noise=noise)
                recon = wm.decoder(states["task"].feat)
                panels.append(recon[0].numpy())
            strip = _to_uint8(np.concatenate(panels, axis=1))
            path = out_dir / f"frame_{i:03d}.png"
            Image.fromarray(strip).save(path)
            paths.append(path)

            action = rng.uniform(-1.0, 1.0, size=2)
            prev_action = torch.as_tensor(action[None], dtype=dtype)
            obs, _, done = world.step(action)
            if done:
                break
    return paths


_SEED_SUFFIX = re.compile(r"[-_]seed\d+$")


def _group_tag(path: Path) -> str:
    return _SEED_SUFFIX.sub("", path.stem) or path.stem


def _aligned(logs: list[list[MetricsRecord]], field: str) -> tuple[np.ndarray, np.ndarray]:
    n = min(len(log) for log in logs)
    steps = np.array([r.env_step for r in logs[0][:n]], dtype=np.int64)
    values = np.array([[getattr(r, field) for r in log[:n]] for log in logs], dtype=np.float64)
    return steps, values


def plot(log_paths: list[str | Path], out_dir: str | Path) -> dict:
    """Emit (a) return-vs-step curves with a mean +/- std band per config tag
    (logs grouped by filename stem minus a trailing seed suffix) and (b) the
    three-curve reward-dissociation plot with its analytic floor line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = [Path(p) for p in log_paths]
    if not paths:
        raise MetricsError("no metrics logs given")
    groups: dict[str, list[list[MetricsRecord]]] = {}
    for path in paths:
        groups.setdefault(_group_tag(path), []).append(load_metrics(path))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary: dict = {"reference_line": NLL_FLOOR, "groups": {}}

    fig, ax = plt.subplots(figsize=(7, 4))
    for tag, logs in sorted(groups.items()):
        steps, values = _aligned(logs, "episodic_return")
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        ax.plot(steps, mean, label=f"{tag} (n={len(logs)})")
        ax.fill_between(steps, mean - std, mean + std, alpha=0.25)
        summary["groups"][tag] = {
            "env_steps": steps.tolist(),
            "return_mean": mean.tolist(),
            "return_std": std.tolist(),
            "n_logs": len(logs),
        }
    ax.set_xlabel("environment steps")
    ax.set_ylabel("episodic return")
    ax.legend()
    fig.tight_layout()
    returns_path = out_dir / "returns.png"
    fig.savefig(returns_path, dpi=120)
    plt.close(fig)
    summary["returns_plot"] = returns_path

    dissociation_path = None
    for tag, logs in sorted(groups.items()):
        if any(r.mask_coverage is None for log in logs for r in log):
            continue
        fig, ax = plt.subplots(figsize=(7, 4))
        for field, label in (
            ("task_reward_nll", "task model"),
            ("distractor_reward_nll", "distractor model"),
            ("mean_predictor_nll", "mean predictor"),
        ):
            steps, values = _aligned(logs, field)
            ax.plot(steps, values.mean(axis=0), label=label)
            summary["groups"].setdefault(tag, {})[field] = values.mean(axis=0).tolist()
        ax.axhline(NLL_FLOOR, color="gray", linestyle="--", label=f"floor {NLL_FLOOR:.6f}")
        ax.set_xlabel("environment steps")
        ax.set_ylabel("reward NLL")
        ax.set_title(tag)
        ax.legend()
        fig.tight_layout()
        dissociation_path = out_dir / f"dissociation_{tag}.png"
        fig.savefig(dissociation_path, dpi=120)
        plt.close(fig)
    summary["dissociation_plot"] = dissociation_path
    return summary
