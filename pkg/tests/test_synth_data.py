from collections import Counter

import numpy as np
import pytest

from errors import ConfigError, ContractError
from synth_data import (
    SynthConfig, class_glyphs, decode_label, generate_clip, generate_dataset, glyph_origin, linear_probe,
    split_indices,
)


@pytest.fixture
def small_cfg():
    return SynthConfig(canvas=16, clip_length=8, glyph_size=4, train_size=40, test_size=10)


def test_clip_is_pure_function_of_seed_and_index():
    cfg = SynthConfig(train_size=20, test_size=5)
    a, b = generate_clip(cfg, 7), generate_clip(cfg, 7)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.pose.frames, b.pose.frames)
    assert a.clip_id == "clip_000007" and a.label == 7
    assert a.frames.dtype == np.uint8 and a.frames.shape == (32, 64, 64, 1)


def test_other_seed_gives_other_clip():
    a = generate_clip(SynthConfig(seed=0), 3)
    b = generate_clip(SynthConfig(seed=1), 3)
    assert a.label == b.label
    assert not np.array_equal(a.frames, b.frames)


def test_generation_order_and_workers_do_not_matter(small_cfg):
    single = generate_clip(small_cfg, 7)
    picked = generate_dataset(small_cfg, [9, 7, 3])
    assert [c.clip_id for c in picked] == ["clip_000009", "clip_000007", "clip_000003"]
    np.testing.assert_array_equal(picked[1].frames, single.frames)
    threaded = generate_dataset(small_cfg, workers=3)
    serial = generate_dataset(small_cfg)
    for x, y in zip(threaded, serial):
        np.testing.assert_array_equal(x.frames, y.frames)


def test_noise_free_pose_traces_rendered_joints():
    cfg = SynthConfig(pose_noise_px=0.0, joint_dropout=0.0, train_size=4, test_size=0)
    clip = generate_clip(cfg, 2)
    np.testing.assert_allclose(clip.pose.frames[..., :2], clip.joint_path, atol=1e-12)
    assert np.all(clip.pose.frames[..., 2] == 1.0)


def test_dropped_joints_are_zeroed(small_cfg):
    cfg = SynthConfig(**{**small_cfg.to_dict(), "joint_dropout": 1.0})
    assert np.all(generate_clip(cfg, 0).pose.frames == 0.0)


def test_class_glyph_drawn_in_active_joint_cell():
    cfg = SynthConfig(background_noise=0.0, distractors=0, amplitude_px=0.0, train_size=12, test_size=0)
    clip = generate_clip(cfg, 4)
    joint, _ = decode_label(cfg, clip.label)
    row, col = glyph_origin(cfg, clip.joint_path[0, joint])
    assert row % 16 == 4 and col % 16 == 4
    stamped = clip.frames[:, row:row + 8, col:col + 8, 0].astype(int)
    expected = np.clip(np.round((0.5 + 0.35 * class_glyphs(cfg)[clip.label]) * 255), 0, 255)
    assert np.all(stamped == expected[None])
    assert clip.frames[0, 0, 0, 0] == 128


def test_glyph_origin_clamps_to_canvas():
    cfg = SynthConfig()
    assert glyph_origin(cfg, (0.0, 0.0)) == (4, 4)
    assert glyph_origin(cfg, (1.0, 1.0)) == (52, 52)
    assert glyph_origin(cfg, (0.3, 0.6)) == (36, 20)


def test_glyph_pixels_ignore_body_jitter_and_motion():
    cfg = SynthConfig(background_noise=0.0, distractors=0, train_size=48, test_size=0)
    clips = [c for c in generate_dataset(cfg) if c.label == 5]
    assert len(clips) == 4
    for c in clips[1:]:
        np.testing.assert_array_equal(c.frames, clips[0].frames)


def test_distractors_stay_off_the_body_cells():
    cfg = SynthConfig(background_noise=0.0, glyph_contrast=0.0, body_jitter=0.0, train_size=12, test_size=0)
    clip = generate_clip(cfg, 0)
    body = {glyph_origin(cfg, j) for j in clip.joint_path[0]}
    for row, col in body:
        assert np.all(clip.frames[:, row:row + 8, col:col + 8] == 128)
    assert np.any(clip.frames != 128)


def test_labels_are_balanced():
    cfg = SynthConfig(canvas=16, clip_length=8, glyph_size=4, train_size=1000, test_size=200)
    counts = Counter(c.label for c in generate_dataset(cfg))
    assert sorted(counts) == list(range(12))
    assert max(counts.values()) - min(counts.values()) <= 1


def test_splits_partition_indices(small_cfg):
    splits = split_indices(small_cfg)
    assert splits["train"] == list(range(40)) and splits["test"] == list(range(40, 50))


def test_label_decoding():
    cfg = SynthConfig()
    assert decode_label(cfg, 0) == (0, "horizontal")
    assert decode_label(cfg, 3) == (3, "circular")
    assert decode_label(cfg, 11) == (9, "circular")


def test_glyphs_do_not_depend_on_dataset_seed():
    np.testing.assert_array_equal(class_glyphs(SynthConfig(seed=1)), class_glyphs(SynthConfig(seed=2)))


def test_index_outside_dataset(small_cfg):
    with pytest.raises(ContractError):
        generate_clip(small_cfg, small_cfg.size)


@pytest.mark.parametrize("overrides", [
    {"num_classes": 10},
    {"patterns": ("horizontal", "zigzag")},
    {"active_joints": (0, 3, 4, 6, 7, 18)},
    {"glyph_size": 20},
    {"glyph_cell": 24},
])
def test_inconsistent_config(overrides):
    with pytest.raises(ConfigError):
        SynthConfig(**overrides)


def test_unknown_pooling_rejected(small_cfg):
    with pytest.raises(ConfigError):
        linear_probe(small_cfg, pooling="max")


@pytest.mark.slow
def test_signal_sits_at_joints():
    easy = SynthConfig(distractors=0, glyph_contrast=1.0, train_size=1200, test_size=300)
    assert linear_probe(easy, pooling="mean") > 0.9

    default = SynthConfig(train_size=1200, test_size=300)
    mean_acc = linear_probe(default, pooling="mean")
    pose_acc = linear_probe(default, pooling="pose")
    assert mean_acc < 0.6 < pose_acc
