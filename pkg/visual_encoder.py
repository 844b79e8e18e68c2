# visual_encoder.py
# ViT-style image tower: CLS + patch tokens per frame, final and penultimate
# layers, projection to the shared fusion width D, partial freezing.

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

import numeric as nm
from config import PROFILES, RGB_FRAMES
from errors import ConfigError, DimensionError
from pose_io import patch_grid, uniform_indices


@dataclass
class VitConfig:
    image_size: int
    patch_size: int
    width: int
    depth: int
    heads: int
    projection_dim: int
    frozen_prefix: int = 0
    channels: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 0 <= self.frozen_prefix <= self.depth:
            raise ConfigError(f"frozen_prefix {self.frozen_prefix} must lie in [0, depth={self.depth}]")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid ** 2

    @classmethod
    def from_profile(cls, name):
        p = PROFILES[name]
        return cls(image_size=p["image_size"], patch_size=p["patch_size"], width=p["width"],
                   depth=p["depth"], heads=p["heads"], projection_dim=p["projection_dim"],
                   frozen_prefix=p["frozen_prefix"], channels=p["channels"])


@dataclass
class TokenSet:
    """Tokens for a stack of frames; index -2 is the token axis (CLS first).

    ``final`` and ``penultimate`` have shape (..., T, P + 1, width) before
    projection and (..., T, P + 1, D) after.
    """
    final: nm.Tensor
    penultimate: nm.Tensor
    patch_centers: np.ndarray

    @property
    def cls(self):
        return self.final[..., 0, :]

    @property
    def patches(self):
        return self.final[..., 1:, :]

    @property
    def penultimate_patches(self):
        return self.penultimate[..., 1:, :]

    @property
    def num_tokens(self):
        return self.final.shape[-2]


def sample_rgb_frames(frames, target=RGB_FRAMES):
    """Uniform floor-formula sampling of a frame sequence (L, ...)."""
    frames = np.asarray(frames)
    return frames[uniform_indices(len(frames), target)]


class VisualEncoder:

    def __init__(self, cfg: VitConfig, rng):
        self.cfg = cfg
        w, c = cfg.width, cfg.channels
        patch_dim = cfg.patch_size * cfg.patch_size * c
        hidden = cfg.mlp_ratio * w

        def normal(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        p = {
            "patch_embed.weight": normal(w, patch_dim),
            "patch_embed.bias": np.zeros(w),
            "cls_token": normal(w),
            "pos_embed": normal(cfg.num_patches + 1, w),
        }
        for i in range(cfg.depth):
            pre = f"blocks.{i}."
            p[pre + "ln1.gamma"] = np.ones(w)
            p[pre + "ln1.beta"] = np.zeros(w)
            p[pre + "attn.qkv.weight"] = normal(3 * w, w)
            p[pre + "attn.qkv.bias"] = np.zeros(3 * w)
            p[pre + "attn.proj.weight"] = normal(w, w)
            p[pre + "attn.proj.bias"] = np.zeros(w)
            p[pre + "ln2.gamma"] = np.ones(w)
            p[pre + "ln2.beta"] = np.zeros(w)
            p[pre + "mlp.fc1.weight"] = normal(hidden, w)
            p[pre + "mlp.fc1.bias"] = np.zeros(hidden)
            p[pre + "mlp.fc2.weight"] = normal(w, hidden)
            p[pre + "mlp.fc2.bias"] = np.zeros(w)
        p["ln_post.gamma"] = np.ones(w)
        p["ln_post.beta"] = np.zeros(w)
        p["proj.weight"] = normal(cfg.projection_dim, w)

        self.params = {}
        for name, value in p.items():
            self.params[name] = nm.Tensor(value, requires_grad=not self.is_frozen(name),
                                          name=f"visual.{name}")
        self.last_attention = []

    def is_frozen(self, name):
        """Embeddings and the first ``frozen_prefix`` blocks are frozen."""
        if self.cfg.frozen_prefix == 0:
            return False
        if name.startswith("blocks."):
            return int(name.split(".")[1]) < self.cfg.frozen_prefix
        return name in ("patch_embed.weight", "patch_embed.bias", "cls_token", "pos_embed")

    def named_parameters(self):
        return dict(self.params)

    def trainable_parameters(self):
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def patchify(self, frames):
        """(..., H, W, C) images -> (..., P, patch*patch*C) rows in grid order."""
        cfg = self.cfg
        frames = np.asarray(frames, dtype=nm.get_default_dtype())
        if cfg.channels == 1 and frames.ndim >= 2 and frames.shape[-2:] == (cfg.image_size, cfg.image_size):
            frames = frames[..., None]
        if frames.shape[-3:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ConfigError(
                f"frame shape {frames.shape[-3:]} does not match "
                f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})")
        lead = frames.shape[:-3]
        g, s = cfg.grid, cfg.patch_size
        x = frames.reshape(*lead, g, s, g, s, cfg.channels)
        n = len(lead)
        x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
        return x.reshape(*lead, g * g, s * s * cfg.channels)

    def _attention(self, x, i):
        cfg = self.cfg
        p = self.params
        pre = f"blocks.{i}."
        lead = x.shape[:-2]
        n_lead = len(lead)
        t = x.shape[-2]
        dh = cfg.width // cfg.heads
        qkv = nm.linear(x, p[pre + "attn.qkv.weight"], p[pre + "attn.qkv.bias"])
        qkv = nm.reshape(qkv, lead + (t, 3, cfg.heads, dh))
        lead_axes = tuple(range(n_lead))
        qkv = nm.transpose(qkv, (n_lead + 1,) + lead_axes + (n_lead + 2, n_lead, n_lead + 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(dh))
        attn = nm.softmax(scores, axis=-1)
        self.last_attention.append(attn.data)
        ctx = nm.matmul(attn, v)                                   # lead + (heads, T, dh)
        ctx = nm.transpose(ctx, lead_axes + (n_lead + 1, n_lead, n_lead + 2))
        ctx = nm.reshape(ctx, lead + (t, cfg.width))
        return nm.linear(ctx, p[pre + "attn.proj.weight"], p[pre + "attn.proj.bias"])

    def _block(self, x, i):
        p = self.params
        pre = f"blocks.{i}."
        h = nm.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
        x = nm.add(x, self._attention(h, i))
        h = nm.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
        h = nm.gelu(nm.linear(h, p[pre + "mlp.fc1.weight"], p[pre + "mlp.fc1.bias"]))
        h = nm.linear(h, p[pre + "mlp.fc2.weight"], p[pre + "mlp.fc2.bias"])
        return nm.add(x, h)

    def embed(self, frames):
        p = self.params
        patches = self.patchify(frames)
        x = nm.linear(nm.Tensor(patches, dtype=patches.dtype), p["patch_embed.weight"], p["patch_embed.bias"])
        cls = nm.add(np.zeros(x.shape[:-2] + (1, self.cfg.width), dtype=x.dtype), p["cls_token"])
        x = nm.concat([cls, x], axis=-2)
        return nm.add(x, p["pos_embed"])

    def forward(self, frames):
        """Unprojected TokenSet for frames of shape (..., T, H, W, C)."""
        self.last_attention = []
        p = self.params
        x = self.embed(frames)
        penultimate = x
        for i in range(self.cfg.depth):
            penultimate = x
            x = self._block(x, i)
        final = nm.layer_norm(x, p["ln_post.gamma"], p["ln_post.beta"])
        penultimate = nm.layer_norm(penultimate, p["ln_post.gamma"], p["ln_post.beta"])
        return TokenSet(final, penultimate, patch_grid(self.cfg.grid))


def vit_forward(frames, encoder: VisualEncoder):
    return encoder.forward(frames)


def project_tokens(tokens, w_proj):
    """Map tokens (..., width) to (..., D) with W_proj of shape (D, width).

    Accepts a TokenSet (both layers projected) or a bare tensor.
    """
    if isinstance(tokens, TokenSet):
        return TokenSet(project_tokens(tokens.final, w_proj),
                        project_tokens(tokens.penultimate, w_proj),
                        tokens.patch_centers)
    w_proj = nm.as_tensor(w_proj)
    tokens = nm.as_tensor(tokens)
    if tokens.shape[-1] != w_proj.shape[-1]:
        raise DimensionError(f"cannot project tokens {tokens.shape} with W_proj {w_proj.shape}")
    return nm.linear(tokens, w_proj)


def pool_cls(tokens):
    """Mean of the per-frame CLS tokens: (..., T, P+1, D) -> (..., D)."""
    final = tokens.final if isinstance(tokens, TokenSet) else nm.as_tensor(tokens)
    return nm.mean(final[..., 0, :], axis=-2)


def import_vit_weights(encoder: VisualEncoder, path):
    """Load pretrained tower weights from an .npz whose keys match
    ``encoder.named_parameters()``. Missing keys keep their initialization.
    Returns the list of keys loaded.
    """
    loaded = []
    with np.load(path) as archive:
        for key in archive.files:
            if key not in encoder.params:
                raise DimensionError(f"unexpected key '{key}' in {path}")
            target = encoder.params[key]
            value = archive[key]
            if value.shape != target.shape:
                raise DimensionError(f"'{key}': checkpoint shape {value.shape} != model shape {target.shape}")
            target.data[...] = value
            loaded.append(key)
    return loaded
