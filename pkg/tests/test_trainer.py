import json

import numpy as np
import pytest

from talkmotion.dataset import SyntheticSpec, generate_synthetic_clips
from talkmotion.denoiser import model_to_bytes
from talkmotion.diffusion import diffusion_loss, first_frame_loss
from talkmotion.trainer import TrainConfig, compose_loss, sample_training_window, train_model

TINY = dict(steps=6, batch_size=2, window=8, width=16, heads=2, layers=1, enc_layers=1, T=10)


@pytest.fixture(scope="module")
def clips():
    return generate_synthetic_clips(SyntheticSpec(clips=4, frames=24, seed=2))


class TestComposeLoss:
    @pytest.mark.parametrize("kind,d", [("lips", 13), ("expression", 51), ("pose", 6)])
    def test_perfect(self, kind, d, rng):
        x = rng.normal(size=(2, 5, d))
        assert compose_loss(kind, x, x)[0].item() == 0.0

    def test_lips_constant_error(self):
        loss, terms = compose_loss("lips", np.zeros((3, 8, 13)), np.ones((3, 8, 13)))
        assert loss.item() == 6.0 and terms == {"l_diff": 1.0}

    def test_pose_exact_first_frame(self, rng):
        x0 = rng.normal(size=(2, 6, 6))
        pred = x0 + rng.normal(size=x0.shape)
        pred[:, 0] = x0[:, 0]
        m = np.mean((pred - x0) ** 2)
        assert abs(compose_loss("pose", x0, pred)[0].item() - 6 * m) < 1e-12

    def test_pose_at_least_weighted_diff(self, rng):
        x0, pred = rng.normal(size=(4, 6, 6)), rng.normal(size=(4, 6, 6))
        loss, terms = compose_loss("pose", x0, pred)
        assert loss.item() >= 6 * terms["l_diff"]
        assert terms["l_first"] == first_frame_loss(x0, pred).item()

    def test_lips_ignores_other_columns(self, rng):
        x0, pred = rng.normal(size=(2, 5, 13)), rng.normal(size=(2, 5, 13))
        assert compose_loss("lips", x0, pred, lam=2.5)[0].item() == 2.5 * diffusion_loss(x0, pred).item()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compose_loss("lips", np.zeros((1, 4, 13)), np.zeros((1, 4, 6)))


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(lam=0), dict(steps=0), dict(window=1), dict(kind="jaw")])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_full_scale(self):
        c = TrainConfig.full_scale("pose")
        assert (c.lam, c.lr, c.batch_size, c.width, c.layers, c.T) == (6.0, 1e-4, 32, 256, 8, 1000)


class TestWindow:
    def test_full_clip(self, clips):
        motion, cond = sample_training_window(clips[0], 24, np.random.default_rng(0))
        np.testing.assert_array_equal(motion, clips[0].motion)
        np.testing.assert_array_equal(cond.first_frame, clips[0].motion[0])

    def test_aligned(self, clips):
        rng = np.random.default_rng(0)
        for _ in range(50):
            motion, cond = sample_training_window(clips[1], 10, rng)
            assert len(motion) == len(cond.audio_feats) == len(cond.phonemes) == 10
            np.testing.assert_array_equal(cond.first_frame, motion[0])
            start = int(np.flatnonzero((clips[1].motion == motion[0]).all(axis=1))[0])
            np.testing.assert_array_equal(cond.phonemes, clips[1].phonemes[start:start + 10])

    def test_too_short(self, clips):
        with pytest.raises(ValueError):
            sample_training_window(clips[0], 25, np.random.default_rng(0))

    def test_uniform_starts(self, clips):
        # chi-square over the 15 admissible starts, 10,000 draws
        clip = clips[0]
        rng = np.random.default_rng(42)
        counts = np.zeros(15)
        lookup = {clip.motion[i].tobytes(): i for i in range(15)}
        for _ in range(10_000):
            motion, _ = sample_training_window(clip, 10, rng)
            counts[lookup[motion[0].tobytes()]] += 1
        expected = 10_000 / 15
        chi2 = ((counts - expected) ** 2 / expected).sum()
        df = 14
        assert chi2 < df + 3 * np.sqrt(2 * df)


class TestTrainModel:
    def test_reproducible_checkpoint(self, clips):
        a, _ = train_model(clips, TrainConfig(kind="lips", **TINY))
        b, _ = train_model(clips, TrainConfig(kind="lips", **TINY))
        assert model_to_bytes(a) == model_to_bytes(b)

    def test_pose_log_has_both_terms(self, clips):
        lines = []
        _, report = train_model(clips, TrainConfig(kind="pose", **TINY), log=lines.append)
        assert len(lines) == TINY["steps"]
        for i, line in enumerate(lines, 1):
            rec = json.loads(line)
            assert rec["step"] == i and {"loss", "l_diff", "l_first", "wall_ms"} <= set(rec)
            assert rec["loss"] >= 6 * rec["l_diff"]
        assert len(report.l_first) == TINY["steps"]
        assert np.all(np.isfinite(report.losses))

    def test_checkpoints(self, clips, tmp_path):
        cfg = TrainConfig(kind="expression", checkpoint_every=3, **TINY)
        _, report = train_model(clips, cfg, checkpoint_dir=tmp_path)
        assert [p.split("/")[-1] for p in report.checkpoints] == ["expression_step000003.tmdm",
                                                                  "expression_step000006.tmdm"]

    def test_empty(self):
        with pytest.raises(ValueError):
            train_model([], TrainConfig(**TINY))

    def test_stats_stored_for_kind(self, clips):
        m, _ = train_model(clips, TrainConfig(kind="pose", **TINY))
        assert m.stats.mean.shape == (6,) and m.config.d == 6

