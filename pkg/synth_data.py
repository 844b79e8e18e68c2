# synth_data.py
# Deterministic synthetic micro-gesture clips: paired frames + skeletons whose
# class signal sits at one active joint, with look-alike distractors elsewhere.

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression

from config import NUM_JOINTS, POSE_FRAMES, make_rng
from errors import ConfigError, ContractError
from pose_io import PoseClip, patch_grid, patch_relevance, sample_pose_frames, temporal_windows
from visual_encoder import sample_rgb_frames

# Seated upper-body skeleton, COCO-18 order, normalized (x, y)
CANONICAL_POSE = np.array([
    [0.50, 0.20], [0.50, 0.32],
    [0.40, 0.33], [0.36, 0.48], [0.40, 0.62],
    [0.60, 0.33], [0.64, 0.48], [0.60, 0.62],
    [0.44, 0.64], [0.42, 0.80], [0.42, 0.94],
    [0.56, 0.64], [0.58, 0.80], [0.58, 0.94],
    [0.47, 0.18], [0.53, 0.18], [0.44, 0.20], [0.56, 0.20],
])

PATTERNS = ("horizontal", "circular")
GLYPH_SEED = 7919


@dataclass
class SynthConfig:
    canvas: int = 64
    channels: int = 1
    num_joints: int = NUM_JOINTS
    active_joints: tuple = (0, 3, 4, 6, 7, 9)
    patterns: tuple = PATTERNS
    num_classes: int = 12
    clip_length: int = POSE_FRAMES
    glyph_size: int = 8
    glyph_cell: int = 16
    glyph_contrast: float = 0.35
    distractors: int = 4
    distractor_contrast: float = 0.35
    distractor_min_dist: float = 0.2
    background_noise: float = 0.08
    amplitude_px: float = 3.0
    period_frames: float = 8.0
    body_jitter: float = 0.03
    pose_noise_px: float = 0.5
    joint_dropout: float = 0.05
    train_size: int = 2000
    test_size: int = 500
    seed: int = 0

    def __post_init__(self):
        self.active_joints = tuple(self.active_joints)
        self.patterns = tuple(self.patterns)
        if self.num_classes != len(self.active_joints) * len(self.patterns):
            raise ConfigError(
                f"num_classes {self.num_classes} != {len(self.active_joints)} joints x {len(self.patterns)} patterns")
        unknown = set(self.patterns) - set(PATTERNS)
        if unknown:
            raise ConfigError(f"Unknown motion patterns: {sorted(unknown)}")
        if any(j >= self.num_joints for j in self.active_joints):
            raise ConfigError("active joint index out of range")
        if self.glyph_size > self.glyph_cell:
            raise ConfigError(f"glyph_size {self.glyph_size} does not fit in a {self.glyph_cell}-pixel cell")
        if self.canvas % self.glyph_cell:
            raise ConfigError(f"canvas {self.canvas} is not a multiple of glyph_cell {self.glyph_cell}")

    @property
    def size(self):
        return self.train_size + self.test_size

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class SynthClip:
    clip_id: str
    frames: np.ndarray        # (L, H, W, C) uint8
    pose: PoseClip
    label: int
    joint_path: np.ndarray = field(repr=False, default=None)   # (L, J, 2) noise-free joint positions


def class_glyphs(cfg: SynthConfig):
    """One fixed +-1 stamp per class, independent of the dataset seed."""
    rng = make_rng(GLYPH_SEED, cfg.glyph_size)
    return rng.choice([-1.0, 1.0], size=(cfg.num_classes, cfg.glyph_size, cfg.glyph_size))


def decode_label(cfg: SynthConfig, label):
    """label -> (active joint index, pattern name)."""
    return cfg.active_joints[label // len(cfg.patterns)], cfg.patterns[label % len(cfg.patterns)]


def _motion(pattern, frames, amplitude, period, phase):
    angle = 2 * np.pi * np.arange(frames) / period + phase
    if pattern == "horizontal":
        return np.stack([amplitude * np.cos(angle), np.zeros(frames)], axis=1)
    return np.stack([amplitude * np.cos(angle), amplitude * np.sin(angle)], axis=1)


def glyph_origin(cfg: SynthConfig, center_xy):
    """Top-left pixel (row, col) of the glyph for a point: centred in the grid
    cell that holds the point, so the glyph never straddles a patch."""
    cells = cfg.canvas // cfg.glyph_cell
    col = min(max(int(center_xy[0] * cells), 0), cells - 1)
    row = min(max(int(center_xy[1] * cells), 0), cells - 1)
    pad = (cfg.glyph_cell - cfg.glyph_size) // 2
    return row * cfg.glyph_cell + pad, col * cfg.glyph_cell + pad


def _stamp(frames, glyph, origin, contrast):
    y0, x0 = origin
    size = glyph.shape[0]
    frames[:, y0:y0 + size, x0:x0 + size] += contrast * glyph[None, :, :, None]


def _distractor_sites(rng, cfg, joints):
    # off-body cells first; falls back to distance alone when every cell is taken
    body = {glyph_origin(cfg, j) for j in joints}
    sites = []
    for _ in range(cfg.distractors):
        for _attempt in range(200):
            cand = rng.uniform(0.08, 0.92, size=2)
            if (np.min(np.linalg.norm(joints - cand, axis=1)) >= cfg.distractor_min_dist
                    and glyph_origin(cfg, cand) not in body):
                break
        sites.append(cand)
    return np.array(sites).reshape(-1, 2)


def generate_clip(cfg: SynthConfig, index):
    """Clip ``index`` as a pure function of (cfg, cfg.seed, index).

    Glyphs are drawn in the cell of their resting position; the motion pattern
    shows up in the skeleton only.
    """
    if not 0 <= index < cfg.size:
        raise ContractError(f"clip index {index} outside dataset of size {cfg.size}")
    rng = make_rng(cfg.seed, index)
    label = index % cfg.num_classes
    joint, pattern = decode_label(cfg, label)
    glyphs = class_glyphs(cfg)
    length, canvas = cfg.clip_length, cfg.canvas

    base = CANONICAL_POSE[:cfg.num_joints] + rng.uniform(-cfg.body_jitter, cfg.body_jitter, size=2)
    path = np.repeat(base[None], length, axis=0)
    amp = cfg.amplitude_px / canvas
    path[:, joint] += _motion(pattern, length, amp, cfg.period_frames, rng.uniform(0, 2 * np.pi))

    sites = _distractor_sites(rng, cfg, base)
    distractor_labels = rng.integers(0, cfg.num_classes, size=len(sites))

    noise = rng.normal(0.0, cfg.background_noise, size=(length, canvas, canvas, cfg.channels))
    frames = np.full((length, canvas, canvas, cfg.channels), 0.5) + noise
    stamps = [(glyphs[label], glyph_origin(cfg, base[joint]), cfg.glyph_contrast)]
    stamps += [(glyphs[d], glyph_origin(cfg, s), cfg.distractor_contrast)
                   for d, s in zip(distractor_labels, sites)]
    for glyph, origin, contrast in stamps:
        _stamp(frames, glyph, origin, contrast)
    frames = np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)

    pose = np.empty((length, cfg.num_joints, 3))
    pose[..., :2] = path + rng.normal(0.0, cfg.pose_noise_px / canvas, size=path.shape)
    pose[..., :2] = np.clip(pose[..., :2], 0.0, 1.0)
    pose[..., 2] = 1.0
    dropped = rng.random(size=(length, cfg.num_joints)) < cfg.joint_dropout
    pose[dropped] = 0.0

    clip_id = f"clip_{index:06d}"
    return SynthClip(clip_id, frames, PoseClip(clip_id, pose, label), label, joint_path=path)


def generate_dataset(cfg: SynthConfig, indices=None, workers=1):
    """Clips for ``indices`` (default all), in index order for any worker count."""
    indices = range(cfg.size) if indices is None else indices
    if workers <= 1:
        return [generate_clip(cfg, i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: generate_clip(cfg, i), indices))


def split_indices(cfg: SynthConfig):
    return {
        "train": list(range(cfg.train_size)),
        "test": list(range(cfg.train_size, cfg.size)),
    }


# ------------------------------------------------------------ linear probe

def _patch_features(clip: SynthClip, patch_size, pooling, sigma_rel):
    frames = sample_rgb_frames(clip.frames).astype(np.float64) / 255.0      # (8, H, W, C)
    t, h, w, c = frames.shape
    g = h // patch_size
    patches = frames.reshape(t, g, patch_size, g, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    patches = patches.reshape(t * g * g, -1) - 0.5
    if pooling == "mean":
        return patches.mean(axis=0)
    windows = temporal_windows(sample_pose_frames(clip.pose))
    weights = patch_relevance(windows, patch_grid(g), sigma_rel).reshape(-1)
    return (weights[:, None] * patches).sum(axis=0) / weights.sum()


def linear_probe(cfg: SynthConfig, pooling="mean", patch_size=None, sigma_rel=0.1,
                 train_clips=None, test_clips=None):
    """Top-1 (fraction) of a logistic-regression probe on pooled raw patches.

    ``pooling`` is "mean" (visual only) or "pose" (relevance-weighted).
    ``patch_size`` defaults to the glyph cell.
    """
    if pooling not in ("mean", "pose"):
        raise ConfigError(f"Unknown probe pooling '{pooling}'")
    patch_size = patch_size or cfg.glyph_cell
    splits = split_indices(cfg)
    train_clips = train_clips or generate_dataset(cfg, splits["train"])
    test_clips = test_clips or generate_dataset(cfg, splits["test"])
    x_train = np.stack([_patch_features(c, patch_size, pooling, sigma_rel) for c in train_clips])
    x_test = np.stack([_patch_features(c, patch_size, pooling, sigma_rel) for c in test_clips])
    y_train = np.array([c.label for c in train_clips])
    y_test = np.array([c.label for c in test_clips])
    probe = LogisticRegression(max_iter=2000)
    probe.fit(x_train, y_train)
    return float((probe.predict(x_test) == y_test).mean())
