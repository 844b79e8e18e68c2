import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

PROJECT_ROOT = Path(__file__).parent
OUTPUT_DIR = Path(os.getenv("CLIPMG_OUTPUT_DIR", PROJECT_ROOT / "runs"))

DEFAULT_SEED = int(os.getenv("CLIPMG_SEED", "0"))
TRAIN_DTYPE = os.getenv("CLIPMG_TRAIN_DTYPE", "float32")
NUM_WORKERS = int(os.getenv("CLIPMG_WORKERS", "1"))

# File format versions
POSE_FILE_VERSION = 1
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"CLIPMGCK"

# Temporal layout: 32 pose frames in 8 windows of 4, paired with 8 RGB frames
POSE_FRAMES = 32
RGB_FRAMES = 8
NUM_WINDOWS = 8
WINDOW_LENGTH = 4

NUM_JOINTS = 18
HEATMAP_SIGMA_PX = 2.5
SKELETON_CHANNELS = (64, 128, 256)

LOG_CLAMP = 1e-12

PROFILES = {
    "toy": {
        "image_size": 64, "patch_size": 16, "channels": 1,
        "width": 64, "depth": 4, "heads": 4, "frozen_prefix": 2,
        "projection_dim": 64, "heatmap_canvas": 32, "num_classes": 12,
        "skeleton_channels": (16, 32, 64),
    },
    "paper-shape": {
        "image_size": 224, "patch_size": 16, "channels": 3,
        "width": 768, "depth": 12, "heads": 12, "frozen_prefix": 10,
        "projection_dim": 512, "heatmap_canvas": 256, "num_classes": 33,
        "skeleton_channels": SKELETON_CHANNELS,
    },
}
DEFAULT_PROFILE = "toy"

GATE_MODES = ["literal", "convex"]

EMOJI_SUCCESS = "✅"
EMOJI_ERROR = "❌"
EMOJI_WARNING = "⚠️"
EMOJI_START = "🎬"
EMOJI_SCORE = "📊"
EMOJI_CONFIG = "⚙️"
EMOJI_SAVE = "💾"
EMOJI_CHECK = "🔍"

CONSOLE_WIDTH = 70
DIVIDER = "=" * CONSOLE_WIDTH


@dataclass
class ExperimentConfig:
    """Every knob of a run; (config, seed) reproduces it bit for bit."""
    profile: str = DEFAULT_PROFILE
    seed: int = DEFAULT_SEED
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    max_steps: int | None = None
    subset: int | None = None
    val_fraction: float = 0.2
    variants: list = field(default_factory=lambda: [
        "full", "no_pose_branch", "no_pose_guidance", "no_cross_attention", "no_gated_fusion"])
    variant: str = "full"
    sigma_rel: float | None = None
    gate_mode: str = "literal"
    motion_weighting: bool = False
    learned_qkv: bool = False
    train_dtype: str = TRAIN_DTYPE
    num_workers: int = NUM_WORKERS
    output_dir: str = str(OUTPUT_DIR)
    data_dir: str | None = None

    def shape(self):
        return PROFILES[self.profile]

    def resolved_sigma_rel(self):
        """Relevance sigma; defaults to one patch pitch in normalized units."""
        if self.sigma_rel is not None:
            return self.sigma_rel
        shape = self.shape()
        return shape["patch_size"] / shape["image_size"]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        return cls(**data)


def load_experiment_config(path=None, **overrides):
    """Merge a JSON config file with explicit overrides (overrides win)."""
    data = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise FileNotFoundError(f"File not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in {path}: {e}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data)


def make_rng(seed, *stream):
    """Independent generator for (seed, stream...) via SeedSequence."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(s) for s in stream]]))


def validate_config(cfg):
    issues = []

    if cfg.profile not in PROFILES:
        issues.append(f"Unknown profile '{cfg.profile}' (expected one of {sorted(PROFILES)})")
        return issues

    shape = cfg.shape()
    if shape["image_size"] % shape["patch_size"]:
        issues.append("image_size must be divisible by patch_size")
    if shape["frozen_prefix"] > shape["depth"]:
        issues.append("frozen_prefix cannot exceed depth")
    if shape["width"] % shape["heads"]:
        issues.append("width must be divisible by heads")

    if cfg.gate_mode not in GATE_MODES:
        issues.append(f"gate_mode must be one of {GATE_MODES}, got '{cfg.gate_mode}'")
    if cfg.learning_rate <= 0:
        issues.append("learning_rate must be positive")
    if not (0 <= cfg.beta1 < 1 and 0 <= cfg.beta2 < 1):
        issues.append("moment decays must lie in [0, 1)")
    if cfg.batch_size < 1:
        issues.append("batch_size must be at least 1")
    if cfg.epochs < 1:
        issues.append("epochs must be at least 1")
    if not (0 < cfg.val_fraction < 1):
        issues.append("val_fraction must lie in (0, 1)")
    if cfg.sigma_rel is not None and cfg.sigma_rel <= 0:
        issues.append("sigma_rel must be positive")
    if cfg.train_dtype not in ("float32", "float64"):
        issues.append(f"train_dtype must be float32 or float64, got '{cfg.train_dtype}'")
    if cfg.num_workers < 1:
        issues.append("num_workers must be at least 1")

    from model import Variant
    for name in [cfg.variant, *cfg.variants]:
        if name not in Variant.names():
            issues.append(f"Unknown variant '{name}' (expected one of {Variant.names()})")

    return issues
