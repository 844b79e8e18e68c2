import math

import numpy as np
import pytest

import numeric as nm
from errors import ConfigError, InputError
from model import (
    VARIANT_DESCRIPTIONS, VARIANT_FLAGS, Batch, ClipMgModel, Variant, loss, model_forward, variant_flags,
)
from pose_io import rasterize, temporal_windows
from visual_encoder import VitConfig

TINY_VIT = dict(image_size=8, patch_size=4, width=8, depth=2, heads=2, projection_dim=6, frozen_prefix=1, channels=1)
CLASSES = 4


def tiny_model(variant="full", seed=0, **kwargs):
    return ClipMgModel(variant=variant, seed=seed, vit_config=VitConfig(**TINY_VIT),
                       heatmap_canvas=8, num_classes=CLASSES, sigma_rel=0.5, **kwargs)


@pytest.fixture
def batch(rng, pose_frames):
    volume = rasterize(pose_frames, canvas=(8, 8)).channel_major()
    windows = temporal_windows(pose_frames)
    return Batch(rgb=rng.uniform(size=(3, 8, 8, 8, 1)), heatmaps=np.stack([volume] * 3),
                 windows=[windows] * 3, labels=np.array([0, 2, 3]), clip_ids=["a", "b", "c"])


class TestLoss:

    def test_uniform_prediction_over_33_classes(self):
        probs = np.full((5, 33), 1.0 / 33)
        assert loss(probs, np.arange(5)).item() == pytest.approx(math.log(33), abs=1e-9)
        assert math.log(33) == pytest.approx(3.4965, abs=1e-4)

    def test_perfect_prediction_has_zero_loss(self):
        probs = np.eye(4)
        assert loss(probs, np.arange(4)).item() == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_labels_are_accepted(self):
        probs = np.full((2, 4), 0.25)
        assert loss(probs, np.eye(4)[[1, 3]]).item() == pytest.approx(math.log(4))

    def test_zero_probability_is_clamped(self):
        probs = np.array([[1.0, 0.0]])
        assert loss(probs, [1]).item() == pytest.approx(-math.log(1e-12))

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            loss(np.full((1, 3), 1 / 3), [3])


class TestVariants:

    def test_every_variant_has_flags_and_description(self):
        assert set(VARIANT_FLAGS) == set(Variant) == set(VARIANT_DESCRIPTIONS)
        assert Variant.names()[0] == "full"

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            variant_flags("no_skeleton")

    def test_no_cross_attention_head_sees_cls_and_pose(self):
        assert tiny_model("no_cross_attention").head_input_width == 2 * TINY_VIT["projection_dim"]
        for v in ("full", "no_pose_branch", "no_pose_guidance", "no_gated_fusion"):
            assert tiny_model(v).head_input_width == TINY_VIT["projection_dim"]

    def test_flag_rows(self):
        assert not variant_flags("no_pose_guidance").pose_guidance
        assert variant_flags("no_pose_guidance").gating
        assert variant_flags("no_gated_fusion").concat_query
        assert not variant_flags("no_pose_branch").pose_branch
        ungated = variant_flags("no_gated_fusion")
        assert not (ungated.pose_guidance or ungated.alpha_gate or ungated.gating)


class TestForward:

    @pytest.mark.parametrize("variant", Variant.names())
    def test_probabilities_per_variant(self, batch, variant):
        probs, state = tiny_model(variant).forward(batch)
        assert probs.shape == (3, CLASSES)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)
        assert (state is None) == (variant == "no_cross_attention")

    def test_model_forward_exposes_fusion_state(self, batch):
        model = tiny_model()
        probs, state = model_forward(batch, model)
        assert state.attention.shape == (3, 8 * 4)
        np.testing.assert_allclose(state.attention.data.sum(axis=-1), 1.0, atol=1e-9)
        assert state.g.shape == (3, TINY_VIT["projection_dim"])

    def test_identical_samples_give_identical_rows(self, batch):
        batch.rgb[:] = batch.rgb[0]
        probs, _ = tiny_model().forward(batch)
        np.testing.assert_allclose(probs.data[1:], probs.data[[0, 0]], atol=1e-12)

    def test_zero_output_layer_predicts_uniform(self, batch):
        model = tiny_model()
        model.head["fc2.weight"].data[:] = 0.0
        model.head["fc2.bias"].data[:] = 0.0
        probs, _ = model.forward(batch)
        np.testing.assert_allclose(probs.data, 1.0 / CLASSES, atol=1e-12)

    def test_pose_variants_need_heatmaps(self, batch):
        batch.heatmaps = None
        with pytest.raises(InputError):
            tiny_model().forward(batch)
        probs, _ = tiny_model("no_pose_branch").forward(batch)
        assert probs.shape == (3, CLASSES)

    def test_same_seed_same_initialization(self):
        a, b = tiny_model(seed=3).named_parameters(), tiny_model(seed=3).named_parameters()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_rebuild_from_init_kwargs(self):
        model = tiny_model("no_gated_fusion", gate_mode="convex", learned_qkv=True)
        clone = ClipMgModel.from_init_kwargs(model.init_kwargs)
        assert clone.variant == Variant.NO_GATED_FUSION
        assert clone.flags == model.flags
        assert clone.named_parameters().keys() == model.named_parameters().keys()


class TestGradients:

    def _backward(self, model, batch):
        probs, _ = model.forward(batch)
        loss(probs, batch.labels).backward()

    def test_frozen_parameters_receive_no_gradient(self, batch):
        model = tiny_model()
        assert model.frozen_parameters()
        self._backward(model, batch)
        for name, p in model.frozen_parameters().items():
            assert p.grad is None, name
        assert model.head["fc1.weight"].grad is not None
        assert model.named_parameters()["skeleton.stage1.weight"].grad is not None

    def test_visual_only_variant_has_no_fusion_gates(self, batch):
        model = tiny_model("no_pose_branch")
        assert model.skeleton is None
        assert model.fusion.named_parameters() == {}
        self._backward(model, batch)
        assert model.head["fc1.weight"].grad is not None

    def test_ungated_variant_uses_concat_projection(self, batch):
        model = tiny_model("no_gated_fusion")
        assert sorted(model.fusion.named_parameters()) == ["w_cat"]
        self._backward(model, batch)
        assert model.fusion["w_cat"].grad is not None
        assert model.named_parameters()["skeleton.stage1.weight"].grad is not None

    def test_ungated_variant_queries_with_plain_token_mean(self, batch):
        model = tiny_model("no_gated_fusion")
        _, state = model.forward(batch)
        np.testing.assert_array_equal(state.weights, 1.0)
        np.testing.assert_array_equal(state.alpha, 1.0)
        assert state.g is None and state.u is None


def test_skeleton_widths_follow_profile():
    assert tiny_model().skeleton.channels == (16, 32, 64)
    assert tiny_model().named_parameters()["skeleton.stage3.weight"].shape[0] == 64


@pytest.mark.slow
def test_full_scale_forward(rng, pose_frames):
    with nm.precision("float32"), nm.no_grad():
        model = ClipMgModel(profile="paper-shape", seed=0)
        volume = rasterize(pose_frames, canvas=(256, 256), dtype=np.float32).channel_major()
        batch = Batch(rgb=rng.uniform(size=(1, 8, 224, 224, 3)).astype(np.float32),
                      heatmaps=volume[None], windows=[temporal_windows(pose_frames)], labels=np.array([0]))
        probs, state = model.forward(batch)
    assert probs.shape == (1, 33)
    assert state.num_tokens == 1568
    np.testing.assert_allclose(probs.data.sum(), 1.0, atol=1e-5)
