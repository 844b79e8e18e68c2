# gradcheck_suite.py
# Central-difference gradient checks for every differentiable component, in 64-bit.

from __future__ import annotations

import time

import numpy as np

import numeric as nm
from config import make_rng
from fusion import (
    FusionFlags, FusionParams, cross_attention, fuse_query, fusion_forward, gate_tokens,
    semantic_query, token_gate_alpha,
)
from model import Batch, ClipMgModel, loss
from pose_io import PoseClip, patch_grid, rasterize, temporal_windows
from skeleton_encoder import SkeletonEncoder
from visual_encoder import TokenSet, VisualEncoder, VitConfig, project_tokens

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_EPS = 1e-5

TINY_VIT = dict(image_size=8, patch_size=4, width=8, depth=2, heads=2, projection_dim=6,
                frozen_prefix=0, channels=1)


def _param(rng, *shape, scale=1.0):
    return nm.parameter(rng.normal(0.0, scale, size=shape))


def _readout(rng, shape):
    """Fixed random weights so the checked objective is sum(out * r)."""
    return rng.normal(size=shape)


def _objective(out, r):
    return nm.tsum(nm.mul(out, r))


def _check(f, params, rng, coords=20, exclude=None):
    return nm.grad_check(f, params, eps=GRADCHECK_EPS, max_coords_per_param=coords, rng=rng, exclude=exclude)


# ---------------------------------------------------------------- numeric

def check_matmul(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    r = _readout(rng, (2, 3, 5))
    return _check(lambda: _objective(nm.matmul(a, b), r), [a, b], rng)


def check_softmax(rng):
    x = _param(rng, 3, 6)
    r = _readout(rng, (3, 6))
    return _check(lambda: _objective(nm.softmax(x, axis=-1), r), [x], rng)


def check_layer_norm(rng):
    x, gamma, beta = _param(rng, 4, 7), _param(rng, 7), _param(rng, 7)
    r = _readout(rng, (4, 7))
    return _check(lambda: _objective(nm.layer_norm(x, gamma, beta), r), [x, gamma, beta], rng)


def check_elementwise(rng):
    x = _param(rng, 5, 4)
    y = nm.parameter(rng.uniform(0.5, 2.0, size=(5, 4)))
    r = _readout(rng, (5, 4))

    def f():
        h = nm.add(nm.gelu(x), nm.sigmoid(nm.mul(x, y)))
        h = nm.div(h, y)
        return _objective(nm.add(h, nm.log(y)), r)

    return _check(f, [x, y], rng)


def check_indexing(rng):
    x = _param(rng, 3, 4, 5)
    r = _readout(rng, (3, 2, 10))

    def f():
        picked = nm.concat([x[:, 1:3, :], nm.reshape(x[:, [0, 0], :], (3, 2, 5))], axis=-1)
        return _objective(picked, r)

    return _check(f, [x], rng)


def check_conv3d(rng):
    x = _param(rng, 2, 3, 3, 6, 6)
    k = _param(rng, 4, 3, 3, 3, 3, scale=0.3)
    b = _param(rng, 4)
    r = _readout(rng, (2, 4, 3, 3, 3))
    return _check(lambda: _objective(nm.conv3d(x, k, b, stride=(1, 2, 2), padding=1), r), [x, k, b], rng)


def check_cross_entropy(rng):
    logits = _param(rng, 4, 5)
    labels = np.array([0, 3, 4, 1])
    return _check(lambda: loss(nm.softmax(logits, axis=-1), labels), [logits], rng)


# ------------------------------------------------------------ skeleton

def check_skeleton_encoder(rng):
    enc = SkeletonEncoder(rng, projection_dim=5, channels=(3, 4, 5))
    volume = rng.uniform(0.0, 1.0, size=(2, 18, 2, 8, 8))
    r = _readout(rng, (2, 5))
    params = list(enc.named_parameters().values())
    return _check(lambda: _objective(enc.forward(volume)[1], r), params, rng)


# -------------------------------------------------------------- visual

def _key_bias_coords(vit_cfg):
    """Key slice of every qkv bias, by tensor name. Softmax is unchanged when
    one shift is added to every key score, so these gradients are exactly zero."""
    width = vit_cfg.width
    return {f"visual.blocks.{i}.attn.qkv.bias": np.arange(width, 2 * width)
            for i in range(vit_cfg.depth)}


def _check_without_key_bias(f, params, rng, vit_cfg, coords):
    """Relative check on every other coordinate, absolute bound on the key bias."""
    exclude = _key_bias_coords(vit_cfg)
    rel = _check(f, params, rng, coords=coords, exclude=exclude)
    f().backward()
    leak = 0.0
    for p in params:
        if p.name in exclude and p.grad is not None:
            leak = max(leak, float(np.abs(p.grad[exclude[p.name]]).max()))
        p.zero_grad()
    return max(rel, leak)


def check_visual_encoder(rng):
    cfg = VitConfig(**TINY_VIT)
    enc = VisualEncoder(cfg, rng)
    for p in enc.params.values():
        p.data[...] += rng.normal(0.0, 0.1, size=p.shape)
    frames = rng.uniform(0.0, 1.0, size=(2, 8, 8, 1))
    r_final = _readout(rng, (2, 5, 6))
    r_pen = _readout(rng, (2, 5, 6))

    def f():
        tokens = project_tokens(enc.forward(frames), enc.params["proj.weight"])
        return nm.add(_objective(tokens.final, r_final), _objective(tokens.penultimate, r_pen))

    return _check_without_key_bias(f, list(enc.trainable_parameters().values()), rng, cfg, coords=6)


# -------------------------------------------------------------- fusion

def check_token_gate(rng):
    z, h, w = _param(rng, 6, 4), _param(rng, 4), _param(rng, 4, 4, scale=0.5)
    r = _readout(rng, (6, 4))
    return _check(lambda: _objective(token_gate_alpha(z, h, w)[0], r), [z, h, w], rng)


def check_semantic_query(rng):
    z = _param(rng, 2, 6, 4)
    weights = rng.uniform(0.1, 1.0, size=(2, 6))
    r = _readout(rng, (2, 4))
    return _check(lambda: _objective(semantic_query(z, weights), r), [z], rng)


def check_fuse_query(rng):
    q, h, w = _param(rng, 4), _param(rng, 4), _param(rng, 4, 4, scale=0.5)
    r = _readout(rng, (4,))
    return _check(lambda: _objective(fuse_query(q, h, w, mode="convex")[0], r), [q, h, w], rng)


def check_gate_tokens(rng):
    f_tok, h, w = _param(rng, 6, 4), _param(rng, 4), _param(rng, 4, 4, scale=0.5)
    r = _readout(rng, (6, 4))
    return _check(lambda: _objective(gate_tokens(f_tok, h, w)[0], r), [f_tok, h, w], rng)


def check_cross_attention(rng):
    q, v = _param(rng, 2, 4), _param(rng, 2, 7, 4)
    r = _readout(rng, (2, 4))
    return _check(lambda: _objective(cross_attention(q, v)[0], r), [q, v], rng)


def check_cross_attention_qkv(rng):
    q, v = _param(rng, 4), _param(rng, 7, 4)
    wq, wk, wv = (_param(rng, 4, 4, scale=0.5) for _ in range(3))
    r = _readout(rng, (4,))
    return _check(lambda: _objective(cross_attention(q, v, wq, wk, wv)[0], r), [q, v, wq, wk, wv], rng)


def _random_windows(rng, batch):
    out = []
    for _ in range(batch):
        frames = np.concatenate([rng.uniform(0.0, 1.0, size=(32, 18, 2)), np.ones((32, 18, 1))], axis=-1)
        out.append(temporal_windows(PoseClip("", frames)))
    return out


def check_fusion_forward(rng, gate_mode="literal"):
    dim, grid = 4, 2
    params = FusionParams(rng, dim, FusionFlags(gate_mode=gate_mode), sigma_rel=0.5)
    final = _param(rng, 2, 8, grid * grid + 1, dim)
    pen = _param(rng, 2, 8, grid * grid + 1, dim)
    h = _param(rng, 2, dim)
    windows = _random_windows(rng, 2)
    r = _readout(rng, (2, dim))

    def f():
        tokens = TokenSet(final, pen, patch_grid(grid))
        return _objective(fusion_forward(tokens, h, windows, params).output, r)

    return _check(f, [final, pen, h, *params.named_parameters().values()], rng, coords=10)


# --------------------------------------------------------------- model

def gradcheck_batch(rng, canvas=8, batch=2):
    windows, heat = [], []
    for _ in range(batch):
        frames = np.concatenate([rng.uniform(0.05, 0.95, size=(32, 18, 2)), np.ones((32, 18, 1))], axis=-1)
        clip = PoseClip("", frames)
        windows.append(temporal_windows(clip))
        heat.append(rasterize(clip, canvas=(canvas, canvas)).channel_major())
    rgb = rng.uniform(0.0, 1.0, size=(batch, 8, TINY_VIT["image_size"], TINY_VIT["image_size"], 1))
    return Batch(rgb=rgb, heatmaps=np.stack(heat), windows=windows,
                 labels=rng.integers(0, 4, size=batch), clip_ids=[f"g{i}" for i in range(batch)])


def check_model(rng, variant="full"):
    model = ClipMgModel(variant=variant, profile="toy", seed=int(rng.integers(0, 2 ** 31)),
                        vit_config=VitConfig(**TINY_VIT), heatmap_canvas=8, num_classes=4,
                        sigma_rel=0.5)
    batch = gradcheck_batch(rng)
    params = list(model.trainable_parameters().values())
    return _check_without_key_bias(lambda: loss(model.forward(batch)[0], batch.labels), params, rng,
                                   model.vit_config, coords=3)


CHECKS = {
    "numeric.matmul": check_matmul,
    "numeric.softmax": check_softmax,
    "numeric.layer_norm": check_layer_norm,
    "numeric.elementwise": check_elementwise,
    "numeric.indexing": check_indexing,
    "numeric.conv3d": check_conv3d,
    "numeric.cross_entropy": check_cross_entropy,
    "skeleton.encoder": check_skeleton_encoder,
    "visual.encoder": check_visual_encoder,
    "fusion.token_gate_alpha": check_token_gate,
    "fusion.semantic_query": check_semantic_query,
    "fusion.fuse_query_convex": check_fuse_query,
    "fusion.gate_tokens": check_gate_tokens,
    "fusion.cross_attention": check_cross_attention,
    "fusion.cross_attention_qkv": check_cross_attention_qkv,
    "fusion.forward_literal": lambda rng: check_fusion_forward(rng, "literal"),
    "fusion.forward_convex": lambda rng: check_fusion_forward(rng, "convex"),
    "model.full": lambda rng: check_model(rng, "full"),
    "model.no_gated_fusion": lambda rng: check_model(rng, "no_gated_fusion"),
    "model.no_cross_attention": lambda rng: check_model(rng, "no_cross_attention"),
}


def gradcheck_suite(seed=0, names=None, tolerance=GRADCHECK_TOLERANCE):
    """Run the named checks (default all). Returns (results {name: max rel err},
    passed, seconds)."""
    start = time.perf_counter()
    results = {}
    with nm.precision("float64"):
        for i, name in enumerate(names or CHECKS):
            results[name] = float(CHECKS[name](make_rng(seed, 7, i)))
    passed = all(err < tolerance for err in results.values())
    return results, passed, time.perf_counter() - start
