import json

import numpy as np
import pytest

from tia.env import EnvConfig
from tia.metrics import append_record
from tia.report import plot, render_report
from tia.trainer import TrainerError, train

from conftest import tiny_config
from test_metrics import make_record


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpts")
    env = EnvConfig(image_size=16, episode_length=20, action_repeat=2, n_distractors=1)
    paths = {}
    for variant in ("tia", "dreamer", "dreamer_inverse"):
        config = tiny_config(env=env, agent_variant=variant, total_env_steps=0,
                             prefill_episodes=1)
        result = train(config, out_dir=out / variant)
        paths[variant] = result.checkpoint_path
    return paths


class TestRenderReport:
    def test_tia_strip_is_five_panels_wide(self, checkpoints, tmp_path):
        from PIL import Image

        paths = render_report(checkpoints["tia"], tmp_path, n_frames=3, seed=0)
        assert len(paths) == 3
        with Image.open(paths[0]) as im:
            width, height = im.size
        assert height == 16
        assert width == 5 * 16

    def test_dreamer_strip_is_two_panels_wide(self, checkpoints, tmp_path):
        from PIL import Image

        paths = render_report(checkpoints["dreamer"], tmp_path, n_frames=2, seed=0)
        with Image.open(paths[0]) as im:
            assert im.size == (2 * 16, 16)

    def test_pixels_are_8bit(self, checkpoints, tmp_path):
        from PIL import Image

        paths = render_report(checkpoints["tia"], tmp_path, n_frames=1, seed=0)
        with Image.open(paths[0]) as im:
            arr = np.asarray(im)
        assert arr.dtype == np.uint8
        assert arr.min() >= 0 and arr.max() <= 255

    def test_deterministic_given_seed(self, checkpoints, tmp_path):
        a = render_report(checkpoints["tia"], tmp_path / "a", n_frames=2, seed=4)
        b = render_report(checkpoints["tia"], tmp_path / "b", n_frames=2, seed=4)
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_inverse_variant_rejected(self, checkpoints, tmp_path):
        with pytest.raises(TrainerError, match="no image decoder"):
            render_report(checkpoints["dreamer_inverse"], tmp_path, n_frames=1)


def write_log(path, returns, offset=0.0):
    for i, r in enumerate(returns):
        append_record(path, make_record((i + 1) * 100, r + offset))


class TestPlot:
    def test_single_log_zero_width_band(self, tmp_path):
        log = tmp_path / "run_seed0.jsonl"
        write_log(log, [10.0, 20.0, 30.0])
        summary = plot([log], tmp_path / "out")
        group = summary["groups"]["run"]
        assert group["n_logs"] == 1
        assert group["return_std"] == [0.0, 0.0, 0.0]
        assert summary["returns_plot"].exists()

    def test_reference_line_is_analytic_floor(self, tmp_path):
        log = tmp_path / "run_seed0.jsonl"
        write_log(log, [10.0, 20.0])
        summary = plot([log], tmp_path / "out")
        assert summary["reference_line"] == pytest.approx(0.918939, abs=1e-6)
        assert summary["dissociation_plot"] is not None and summary["dissociation_plot"].exists()

    def test_band_matches_independent_std(self, tmp_path):
        rng = np.random.default_rng(0)
        series = rng.uniform(0, 100, size=(5, 4))
        for k in range(5):
            write_log(tmp_path / f"exp_seed{k}.jsonl", list(series[k]))
        summary = plot(sorted(tmp_path.glob("exp_seed*.jsonl")), tmp_path / "out")
        group = summary["groups"]["exp"]
        # Straight-line recompute of the per-step sample std.
        for j in range(4):
            column = series[:, j]
            assert group["return_mean"][j] == pytest.approx(float(np.mean(column)), rel=1e-12)
            assert group["return_std"][j] == pytest.approx(float(np.std(column)), rel=1e-12)

    def test_grouping_by_seed_suffix(self, tmp_path):
        write_log(tmp_path / "a_seed0.jsonl", [1.0, 2.0])
        write_log(tmp_path / "a_seed1.jsonl", [3.0, 4.0])
        write_log(tmp_path / "b_seed0.jsonl", [5.0, 6.0])
        summary = plot(sorted(tmp_path.glob("*.jsonl")), tmp_path / "out")
        assert set(summary["groups"]) == {"a", "b"}
        assert summary["groups"]["a"]["n_logs"] == 2

    def test_empty_input_rejected(self, tmp_path):
        from tia.metrics import MetricsError

        with pytest.raises(MetricsError, match="no metrics logs"):
            plot([], tmp_path)
