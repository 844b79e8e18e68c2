# model.py
# Full network assembly, ablation variants, classification head and loss.

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

import numeric as nm
from config import LOG_CLAMP, PROFILES, make_rng
from errors import ConfigError, InputError
from fusion import FusionFlags, FusionParams, fusion_forward
from skeleton_encoder import SkeletonEncoder
from visual_encoder import VisualEncoder, VitConfig, pool_cls, project_tokens, vit_forward


class Variant(str, Enum):
    FULL = "full"
    NO_POSE_BRANCH = "no_pose_branch"
    NO_POSE_GUIDANCE = "no_pose_guidance"
    NO_CROSS_ATTENTION = "no_cross_attention"
    NO_GATED_FUSION = "no_gated_fusion"

    @classmethod
    def names(cls):
        return [v.value for v in cls]

    @classmethod
    def parse(cls, name):
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(f"Unknown variant '{name}' (expected one of {cls.names()})")


# One row per ablation; (pose_branch, pose_guidance, alpha_gate, gating, cross_attention, concat_query)
VARIANT_FLAGS = {
    Variant.FULL:               (True,  True,  True,  True,  True,  False),
    Variant.NO_POSE_BRANCH:     (False, False, False, False, True,  False),
    Variant.NO_POSE_GUIDANCE:   (True,  False, False, True,  True,  False),
    Variant.NO_CROSS_ATTENTION: (True,  False, False, False, False, False),
    Variant.NO_GATED_FUSION:    (True,  False, False, False, True,  True),
}

VARIANT_DESCRIPTIONS = {
    Variant.FULL:               "Pose-guided semantic attention + visual tower + skeleton",
    Variant.NO_POSE_BRANCH:     "Visual-only cross-attention",
    Variant.NO_POSE_GUIDANCE:   "Visual query + cross-attention",
    Variant.NO_CROSS_ATTENTION: "Concat(CLS, pose)",
    Variant.NO_GATED_FUSION:    "Concat(mean token, pose) + cross-attn without gating",
}

if set(VARIANT_FLAGS) != set(Variant) or set(VARIANT_DESCRIPTIONS) != set(Variant):
    raise ConfigError("every Variant needs a flag row and a description")


def variant_flags(variant, gate_mode="literal", motion_weighting=False, learned_qkv=False):
    row = VARIANT_FLAGS[Variant.parse(variant) if isinstance(variant, str) else variant]
    names = ("pose_branch", "pose_guidance", "alpha_gate", "gating", "cross_attention", "concat_query")
    return FusionFlags(**dict(zip(names, row)), gate_mode=gate_mode,
                       motion_weighting=motion_weighting, learned_qkv=learned_qkv)


@dataclass
class Batch:
    """rgb: (B, T, H, W, C); heatmaps: (B, J, T, H', W') channel-major;
    windows: one PoseWindows per sample; labels: (B,) class indices."""
    rgb: np.ndarray
    heatmaps: np.ndarray | None
    windows: list
    labels: np.ndarray
    clip_ids: list = field(default_factory=list)

    @property
    def batch_size(self):
        return len(self.labels)


def classify(features, head):
    """Two affine layers with GELU between, then softmax over C classes."""
    h = nm.gelu(nm.linear(features, head["fc1.weight"], head["fc1.bias"]))
    logits = nm.linear(h, head["fc2.weight"], head["fc2.bias"])
    return nm.softmax(logits, axis=-1)


def labels_to_indices(labels, num_classes):
    y = np.asarray(labels)
    if y.ndim == 2:
        if not np.allclose(y.sum(axis=1), 1.0) or not np.all((y == 0) | (y == 1)):
            raise InputError("one-hot labels must have exactly one 1 per row")
        y = y.argmax(axis=1)
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InputError(f"label out of range for {num_classes} classes: {y.min()}..{y.max()}")
    return y


def loss(probs, labels):
    """Mean over the batch of -log p(true class), log clamped at 1e-12."""
    probs = nm.as_tensor(probs)
    if probs.ndim == 1:
        probs = nm.reshape(probs, (1, -1))
    y = labels_to_indices(labels, probs.shape[-1])
    picked = probs[np.arange(len(y)), y]
    return nm.scale(nm.mean(nm.log(picked, floor=LOG_CLAMP)), -1.0)


class ClipMgModel:

    def __init__(self, variant="full", profile="toy", seed=0, gate_mode="literal",
                 motion_weighting=False, learned_qkv=False, sigma_rel=None,
                 num_classes=None, vit_config: VitConfig | None = None,
                 heatmap_canvas=None, skeleton_activation="gelu"):
        self.variant = Variant.parse(variant) if isinstance(variant, str) else variant
        self.init_kwargs = {
            "variant": self.variant.value, "profile": profile, "seed": seed, "gate_mode": gate_mode,
            "motion_weighting": motion_weighting, "learned_qkv": learned_qkv, "sigma_rel": sigma_rel,
            "num_classes": num_classes, "heatmap_canvas": heatmap_canvas,
            "skeleton_activation": skeleton_activation,
            "vit_config": asdict(vit_config) if vit_config is not None else None,
        }
        self.profile = profile
        shape = PROFILES[profile]
        self.vit_config = vit_config or VitConfig.from_profile(profile)
        self.num_classes = num_classes or shape["num_classes"]
        self.heatmap_canvas = heatmap_canvas or shape["heatmap_canvas"]
        dim = self.vit_config.projection_dim
        if sigma_rel is None:
            sigma_rel = self.vit_config.patch_size / self.vit_config.image_size
        self.flags = variant_flags(self.variant, gate_mode, motion_weighting, learned_qkv)

        self.visual = VisualEncoder(self.vit_config, make_rng(seed, 1))
        self.skeleton = None
        if self.flags.pose_branch:
            SkeletonEncoder.check_canvas(self.heatmap_canvas, self.heatmap_canvas)
            self.skeleton = SkeletonEncoder(make_rng(seed, 2), dim, channels=shape["skeleton_channels"],
                                           activation=skeleton_activation)
        self.fusion = FusionParams(make_rng(seed, 3), dim, self.flags, sigma_rel)

        head_in = 2 * dim if not self.flags.cross_attention else dim
        rng = make_rng(seed, 4)
        self.head = {
            "fc1.weight": nm.parameter(rng.uniform(-1, 1, (dim, head_in)) / math.sqrt(head_in), name="head.fc1.weight"),
            "fc1.bias": nm.parameter(np.zeros(dim), name="head.fc1.bias"),
            "fc2.weight": nm.parameter(rng.uniform(-1, 1, (self.num_classes, dim)) / math.sqrt(dim), name="head.fc2.weight"),
            "fc2.bias": nm.parameter(np.zeros(self.num_classes), name="head.fc2.bias"),
        }

    @classmethod
    def from_init_kwargs(cls, kwargs):
        """Rebuild an (untrained) model from ``init_kwargs`` as stored in a checkpoint."""
        kwargs = dict(kwargs)
        vit = kwargs.pop("vit_config", None)
        return cls(vit_config=VitConfig(**vit) if vit else None, **kwargs)

    @property
    def head_input_width(self):
        return self.head["fc1.weight"].shape[1]

    def named_parameters(self):
        named = {f"visual.{k}": v for k, v in self.visual.named_parameters().items()}
        if self.skeleton is not None:
            named.update({f"skeleton.{k}": v for k, v in self.skeleton.named_parameters().items()})
        named.update({f"fusion.{k}": v for k, v in self.fusion.named_parameters().items()})
        named.update({f"head.{k}": v for k, v in self.head.items()})
        return named

    def trainable_parameters(self):
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def frozen_parameters(self):
        return {k: v for k, v in self.named_parameters().items() if not v.requires_grad}

    def forward(self, batch: Batch):
        """Returns (probabilities (B, C), FusionState or None)."""
        tokens = project_tokens(vit_forward(batch.rgb, self.visual), self.visual.params["proj.weight"])
        pose_proj = None
        if self.flags.pose_branch:
            if batch.heatmaps is None:
                raise InputError(f"variant '{self.variant.value}' needs heatmaps in the batch")
            _, pose_proj = self.skeleton.forward(batch.heatmaps)

        if not self.flags.cross_attention:
            features = nm.concat([pool_cls(tokens), pose_proj], axis=-1)
            return classify(features, self.head), None

        state = fusion_forward(tokens, pose_proj, batch.windows, self.fusion)
        return classify(state.output, self.head), state


def model_forward(batch, model: ClipMgModel):
    return model.forward(batch)
