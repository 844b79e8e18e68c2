import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import numeric as nm
from errors import ConfigError, ContractError
from fusion import (
    FusionFlags, FusionParams, cross_attention, fuse_query, fusion_forward, gate_tokens,
    semantic_query, token_gate_alpha,
)
from pose_io import patch_grid, temporal_windows
from visual_encoder import TokenSet

D = 4


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def naive_attention(q, values):
    scores = [float(np.dot(q, v)) / math.sqrt(len(q)) for v in values]
    top = max(scores)
    e = [math.exp(s - top) for s in scores]
    attn = [x / sum(e) for x in e]
    out = np.zeros_like(q)
    for a, v in zip(attn, values):
        out += a * v
    return out, np.array(attn)


@pytest.fixture
def tokens(rng):
    grid = 2
    final = rng.normal(size=(8, grid * grid + 1, D))
    pen = rng.normal(size=(8, grid * grid + 1, D))
    return TokenSet(nm.Tensor(final), nm.Tensor(pen), patch_grid(grid))


@pytest.fixture
def windows(pose_frames):
    return temporal_windows(pose_frames)


class TestComponents:

    def test_token_gate_alpha(self, rng):
        z, h, w = rng.normal(size=(6, D)), rng.normal(size=D), rng.normal(size=(D, D))
        gated, alpha = token_gate_alpha(z, h, w)
        expected_alpha = sigmoid(z @ (w @ h))
        np.testing.assert_allclose(alpha.data, expected_alpha, atol=1e-12)
        np.testing.assert_allclose(gated.data, z * expected_alpha[:, None], atol=1e-12)

    def test_semantic_query_matches_weighted_mean_oracle(self, rng):
        z, w = rng.normal(size=(7, D)), rng.uniform(0.1, 1.0, size=7)
        expected = sum(w[i] * z[i] for i in range(7)) / sum(w)
        np.testing.assert_allclose(semantic_query(z, w).data, expected, atol=1e-10)

    def test_uniform_weights_give_plain_mean(self, rng):
        z = rng.normal(size=(5, D))
        np.testing.assert_allclose(semantic_query(z, np.ones(5)).data, z.mean(axis=0), atol=1e-12)

    @given(st.floats(0.01, 100.0))
    def test_weight_scale_does_not_change_query(self, c):
        z = np.arange(12.0).reshape(3, 4)
        w = np.array([0.2, 0.5, 0.3])
        np.testing.assert_allclose(semantic_query(z, c * w).data, semantic_query(z, w).data, atol=1e-10)

    def test_zero_weight_sum_is_contract_error(self, rng):
        with pytest.raises(ContractError):
            semantic_query(rng.normal(size=(3, D)), np.zeros(3))

    def test_literal_fuse_query_is_identity(self, rng):
        q = nm.Tensor(rng.normal(size=D))
        fused, g = fuse_query(q, rng.normal(size=D), rng.normal(size=(D, D)), mode="literal")
        assert fused is q
        assert np.all((g.data > 0) & (g.data < 1))

    def test_convex_fuse_query(self, rng):
        q, h, w = rng.normal(size=D), rng.normal(size=D), rng.normal(size=(D, D))
        fused, g = fuse_query(q, h, w, mode="convex")
        gate = sigmoid(w @ h)
        np.testing.assert_allclose(fused.data, gate * q + (1 - gate) * h, atol=1e-12)

    def test_unknown_gate_mode(self, rng):
        with pytest.raises(ConfigError):
            fuse_query(np.ones(D), np.ones(D), np.eye(D), mode="mixed")

    def test_gate_tokens_share_one_channel_gate(self, rng):
        f, h, w = rng.normal(size=(5, D)), rng.normal(size=D), rng.normal(size=(D, D))
        gated, u = gate_tokens(f, h, w)
        np.testing.assert_allclose(gated.data, f * sigmoid(w @ h)[None, :], atol=1e-12)
        assert u.shape == (D,)


class TestCrossAttention:

    def test_matches_loop_oracle(self, rng):
        q, values = rng.normal(size=D), rng.normal(size=(9, D))
        out, attn = cross_attention(q, values)
        exp_out, exp_attn = naive_attention(q, values)
        np.testing.assert_allclose(out.data, exp_out, atol=1e-10)
        np.testing.assert_allclose(attn.data, exp_attn, atol=1e-10)

    def test_batched_rows_match_oracle(self, rng):
        q, values = rng.normal(size=(3, D)), rng.normal(size=(3, 6, D))
        out, attn = cross_attention(q, values)
        for i in range(3):
            np.testing.assert_allclose(out.data[i], naive_attention(q[i], values[i])[0], atol=1e-10)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_single_token_returns_it(self, rng):
        v = rng.normal(size=(1, D))
        out, attn = cross_attention(rng.normal(size=D), v)
        np.testing.assert_allclose(out.data, v[0], atol=1e-12)
        np.testing.assert_allclose(attn.data, [1.0])

    def test_empty_values_rejected(self):
        with pytest.raises(ContractError):
            cross_attention(np.ones(D), np.zeros((0, D)))

    def test_learned_projections(self, rng):
        q, v = rng.normal(size=D), rng.normal(size=(5, D))
        wq, wk, wv = (rng.normal(size=(D, D)) for _ in range(3))
        out, _ = cross_attention(q, v, wq, wk, wv)
        # scores come from W_k keys, the mixture from W_v values
        _, attn = naive_attention(wq @ q, [wk @ x for x in v])
        np.testing.assert_allclose(out.data, sum(a * (wv @ x) for a, x in zip(attn, v)), atol=1e-10)


class TestFusionForward:

    def test_full_pipeline_shapes(self, rng, tokens, windows):
        params = FusionParams(rng, D, FusionFlags(), sigma_rel=0.25)
        state = fusion_forward(tokens, rng.normal(size=D), windows, params)
        n = 8 * 4
        assert state.num_tokens == n
        assert state.weights.shape == (n,) and state.alpha.shape == (n,)
        assert state.attention.shape == (n,) and state.output.shape == (D,)
        np.testing.assert_allclose(state.attention.data.sum(), 1.0, atol=1e-9)
        assert state.g is not None and state.u is not None

    def test_literal_mode_query_passes_through(self, rng, tokens, windows):
        params = FusionParams(rng, D, FusionFlags(gate_mode="literal"), sigma_rel=0.25)
        state = fusion_forward(tokens, rng.normal(size=D), windows, params)
        assert state.fused_query is state.query

    def test_without_pose_reduces_to_plain_mean_attention(self, rng, tokens, windows):
        flags = FusionFlags(pose_branch=False, pose_guidance=False, alpha_gate=False, gating=False)
        params = FusionParams(rng, D, flags, sigma_rel=0.25)
        state = fusion_forward(tokens, None, windows, params)
        z = tokens.final.data[:, 1:, :].reshape(-1, D)
        f = tokens.penultimate.data[:, 1:, :].reshape(-1, D)
        np.testing.assert_allclose(state.query.data, z.mean(axis=0), atol=1e-12)
        np.testing.assert_array_equal(state.weights, 1.0)
        assert state.g is None and state.u is None
        np.testing.assert_allclose(state.output.data, naive_attention(z.mean(axis=0), f)[0], atol=1e-10)

    def test_relevance_weights_follow_windows(self, rng, tokens, windows):
        from pose_io import patch_relevance

        params = FusionParams(rng, D, FusionFlags(), sigma_rel=0.25)
        state = fusion_forward(tokens, rng.normal(size=D), windows, params)
        expected = patch_relevance(windows, tokens.patch_centers, 0.25).reshape(-1)
        np.testing.assert_allclose(state.weights, expected, atol=1e-12)

    def test_batched_forward_matches_per_clip(self, rng, pose_frames):
        final = rng.normal(size=(2, 8, 5, D))
        pen = rng.normal(size=(2, 8, 5, D))
        h = rng.normal(size=(2, D))
        win = [temporal_windows(pose_frames), temporal_windows(pose_frames[::-1].copy())]
        params = FusionParams(rng, D, FusionFlags(gate_mode="convex"), sigma_rel=0.25)
        batched = fusion_forward(TokenSet(nm.Tensor(final), nm.Tensor(pen), patch_grid(2)), h, win, params)
        for i in range(2):
            single = fusion_forward(TokenSet(nm.Tensor(final[i]), nm.Tensor(pen[i]), patch_grid(2)),
                                    h[i], win[i], params)
            np.testing.assert_allclose(batched.output.data[i], single.output.data, atol=1e-12)

    def test_concat_query_uses_projection(self, rng, tokens, windows):
        flags = FusionFlags(gating=False, concat_query=True)
        params = FusionParams(rng, D, flags, sigma_rel=0.25)
        assert params["w_cat"].shape == (D, 2 * D)
        h = rng.normal(size=D)
        state = fusion_forward(tokens, h, windows, params)
        expected = params["w_cat"].data @ np.concatenate([state.query.data, h])
        np.testing.assert_allclose(state.fused_query.data, expected, atol=1e-12)
        assert state.u is None


class TestParams:

    def test_optional_projections(self, rng):
        plain = FusionParams(rng, D, FusionFlags(), sigma_rel=0.1)
        assert sorted(plain.named_parameters()) == ["w_alpha", "w_g", "w_u"]
        qkv = FusionParams(rng, D, FusionFlags(learned_qkv=True), sigma_rel=0.1)
        assert {"w_q", "w_k", "w_v"} <= set(qkv.named_parameters())

    def test_disabled_gates_allocate_nothing(self, rng):
        ungated = FusionParams(rng, D, FusionFlags(gating=False, concat_query=True), sigma_rel=0.1)
        assert sorted(ungated.named_parameters()) == ["w_alpha", "w_cat"]
        no_pose = FusionParams(rng, D, FusionFlags(pose_branch=False), sigma_rel=0.1)
        assert no_pose.named_parameters() == {}

    def test_rejects_bad_gate_mode_and_sigma(self, rng):
        with pytest.raises(ConfigError):
            FusionParams(rng, D, FusionFlags(gate_mode="blend"), sigma_rel=0.1)
        with pytest.raises(ConfigError):
            FusionParams(rng, D, FusionFlags(), sigma_rel=0.0)
