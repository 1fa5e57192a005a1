import numpy as np
import pytest

import tsdiff

TINY = """
schema = 1
steps = 20
alpha_first = 0.9999
alpha_last = 0.9
cameras = 2
base_width = 8
time_dim = 16
cc_width = 4
cc_cond_width = 4
batch_size = 2
crop = 16
milestones = 4
pretrain_iterations = 6
align_iterations = 3
seed = 7
prefetch = 0
"""


def test_scene_and_noise():
    clean = tsdiff.generate_scene(64, seed=1)
    assert clean.shape == (4, 32, 32)
    assert clean.dtype == np.float32
    assert 0.0 <= clean.min() and clean.max() <= 1.0
    np.testing.assert_array_equal(clean, tsdiff.generate_scene(64, seed=1))

    params = tsdiff.NoiseParams()
    params.gain = 2.0
    params.read_sigma = 3.0
    scores = []
    for ratio in (1.0, 20.0, 200.0):
        params.ratio = ratio
        noisy = tsdiff.synthesize(clean, params, seed=3)
        scores.append(tsdiff.psnr(tsdiff.amplify(noisy, ratio), clean))
    assert scores[0] > scores[1] > scores[2]
    assert tsdiff.ssim(clean, clean) == pytest.approx(1.0)
    assert tsdiff.color_error(clean, clean) == 0.0
    assert tsdiff.build_condition(clean).shape == (10, 32, 32)


def test_noise_space_sampling():
    space = tsdiff.NoiseSpace.defaults()
    again = tsdiff.NoiseSpace.parse(space.to_text())
    assert again.log_gain_max == space.log_gain_max
    p = space.sample_params(cameras=5, camera=5, seed=2)
    assert np.exp(space.log_gain_max) * 0.999 >= p.gain >= np.exp(space.log_gain_min)
    with pytest.raises(IndexError):
        space.sample_params(cameras=5, camera=6, seed=2)


def test_r4_round_trip(tmp_path):
    clean = tsdiff.generate_scene(32, seed=4)
    meta = tsdiff.RawMeta()
    meta.exposure_ratio = 150.0
    meta.pattern = "bggr"
    tsdiff.write_r4(tmp_path / "x.r4", clean, meta)
    planes, back = tsdiff.read_r4(tmp_path / "x.r4")
    assert back.exposure_ratio == 150.0
    assert back.pattern == "bggr"
    assert np.abs(planes - clean).max() <= 1.0 / (meta.white_level - meta.black_level)
    with pytest.raises(tsdiff.DataError):
        tsdiff.read_r4(tmp_path / "missing.r4")
    with pytest.raises(tsdiff.ShapeError):
        tsdiff.write_r4(tmp_path / "y.r4", clean[:3])


def test_schedule_and_config():
    s = tsdiff.Schedule.build(200, 0.999999, 0.9)
    assert s.factor(100) == 1 and s.factor(101) == 2
    assert s.alpha_bar(2) == pytest.approx(0.999999 * s.alpha(2))
    cfg = tsdiff.RunConfig.parse(TINY)
    assert tsdiff.RunConfig.parse(cfg.to_text()) == cfg
    with pytest.raises(tsdiff.DataError):
        tsdiff.RunConfig.parse("schema = 1\nbogus = 1\n")


def test_two_stage_pipeline(tmp_path):
    cfg = tsdiff.RunConfig.parse(TINY)
    ckpt = tsdiff.Checkpoint.fresh(cfg, 32)
    assert ckpt.mode == "pretrain"
    scenes = [tsdiff.generate_scene(64, seed=k) for k in range(3)]
    losses = []
    ckpt.pretrain(scenes, tsdiff.NoiseSpace.defaults(), on_step=lambda it, loss: losses.append((it, loss)))
    assert [it for it, _ in losses] == list(range(1, 7))
    assert all(np.isfinite(loss) for _, loss in losses)

    clean = scenes[0]
    params = tsdiff.NoiseParams()
    params.gain = 12.0
    params.ratio = 100.0
    noisy = tsdiff.synthesize(clean, params, seed=5)
    out = ckpt.enhance(noisy, 100.0, seed=1, camera=2)
    assert out.shape == clean.shape
    with pytest.raises(tsdiff.ModeError):
        ckpt.enhance(noisy, 100.0)

    ckpt.begin_aligning()
    with pytest.raises(tsdiff.ModeError):
        ckpt.begin_aligning()
    ckpt.align([(noisy, clean, 100.0)])
    assert ckpt.mode == "aligned" and ckpt.iteration == 3
    aligned = ckpt.enhance(noisy, 100.0, seed=9)

    ckpt.save(tmp_path / "a.ckpt")
    loaded = tsdiff.Checkpoint.load(tmp_path / "a.ckpt")
    assert loaded.to_bytes() == ckpt.to_bytes()
    loaded.reparameterize()
    assert loaded.mode == "merged"
    merged = loaded.enhance(noisy, 100.0, seed=9)
    assert np.abs(merged - aligned).max() <= 1e-4
