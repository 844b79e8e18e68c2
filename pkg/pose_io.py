# pose_io.py
# Skeleton files, temporal sampling/windowing, Gaussian heatmaps and
# patch-to-joint relevance weights.

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from config import (
    EMOJI_WARNING, HEATMAP_SIGMA_PX, NUM_JOINTS, NUM_WINDOWS, POSE_FILE_VERSION,
    POSE_FRAMES, WINDOW_LENGTH,
)
from errors import ConfigError, ContractError, InputError, PoseParseError

# OpenPose COCO-18 ordering
JOINT_NAMES = [
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
]


@dataclass
class Skeleton:
    """One frame of J joints as (x, y, confidence), coordinates in [0,1]^2."""
    joints: np.ndarray

    @property
    def visible(self):
        return self.joints[:, 2] > 0


@dataclass
class PoseClip:
    """A skeleton sequence: ``frames`` has shape (L, J, 3)."""
    clip_id: str
    frames: np.ndarray
    label: int | None = None
    source_fps: float | None = None

    def __len__(self):
        return self.frames.shape[0]

    def skeleton(self, index):
        return Skeleton(self.frames[index])


@dataclass
class PoseWindows:
    """Per-window joint summaries of a 32-frame clip."""
    coords: np.ndarray        # (W, J, 2) mean position over visible frames
    visible: np.ndarray       # (W, J) joint seen at least once in the window
    displacement: np.ndarray  # (W, J) max pairwise distance inside the window
    frame_indices: list = field(default_factory=list)

    @property
    def missing(self):
        return ~self.visible.any(axis=1)


@dataclass
class HeatmapVolume:
    """Window-pooled Gaussian maps of shape (T, J, H, W)."""
    data: np.ndarray
    sigma_px: float = HEATMAP_SIGMA_PX

    @property
    def shape(self):
        return self.data.shape

    def channel_major(self):
        """(J, T, H, W) layout for the skeleton encoder."""
        return np.ascontiguousarray(self.data.transpose(1, 0, 2, 3))


# ------------------------------------------------------------------ file I/O

def parse_pose_file(path):
    """Read the versioned pose JSON layout into a list of PoseClip.

    Coordinates outside [0,1] are clamped and counted; a single warning line
    reports the total.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"File not found: {path}")
    except UnicodeDecodeError as e:
        raise PoseParseError(f"{path} is not UTF-8 text: {e}") from e
    except json.JSONDecodeError as e:
        raise PoseParseError(f"Invalid JSON in {path}: {e}") from e

    if not isinstance(doc, dict) or not isinstance(doc.get("clips"), list):
        raise PoseParseError(f"{path}: expected an object with a 'clips' list")
    if doc.get("version") != POSE_FILE_VERSION:
        raise PoseParseError(f"{path}: unsupported pose file version {doc.get('version')!r}")
    num_joints = int(doc.get("joints", NUM_JOINTS))

    clips, clamped = [], 0
    for c_idx, raw in enumerate(doc["clips"]):
        if not isinstance(raw, dict):
            raise PoseParseError(f"clip entry must be an object, got {type(raw).__name__}", clip_id=str(c_idx))
        clip_id = str(raw.get("id", c_idx))
        frames = raw.get("frames")
        if not isinstance(frames, list) or not frames:
            raise PoseParseError("clip has no frames", clip_id=clip_id)
        parsed = np.zeros((len(frames), num_joints, 3))
        for f_idx, frame in enumerate(frames):
            if not isinstance(frame, list) or len(frame) != num_joints:
                got = len(frame) if isinstance(frame, list) else type(frame).__name__
                raise PoseParseError(f"expected {num_joints} joints, got {got}",
                                     clip_id=clip_id, frame_index=f_idx)
            try:
                arr = np.asarray(frame, dtype=np.float64)
            except (TypeError, ValueError):
                raise PoseParseError("joint entries must be numeric [x, y, c]",
                                     clip_id=clip_id, frame_index=f_idx)
            if arr.shape != (num_joints, 3):
                raise PoseParseError("joint entries must be [x, y, c] triples",
                                     clip_id=clip_id, frame_index=f_idx)
            if not np.all(np.isfinite(arr)):
                raise PoseParseError("joint entries must be finite numbers",
                                     clip_id=clip_id, frame_index=f_idx)
            out_of_range = (arr[:, :2] < 0) | (arr[:, :2] > 1)
            clamped += int(out_of_range.any(axis=1).sum())
            arr[:, :2] = np.clip(arr[:, :2], 0.0, 1.0)
            arr[:, 2] = np.clip(arr[:, 2], 0.0, 1.0)
            parsed[f_idx] = arr
        label = raw.get("label")
        clips.append(PoseClip(clip_id=clip_id, frames=parsed,
                              label=None if label is None else int(label),
                              source_fps=raw.get("fps")))
    if clamped:
        print(f"{EMOJI_WARNING}  {path.name}: clamped {clamped} joint(s) outside [0,1]")
    return clips


def write_pose_file(path, clips):
    """Inverse of parse_pose_file; floats are written with full precision."""
    doc = {
        "version": POSE_FILE_VERSION,
        "joints": int(clips[0].frames.shape[1]) if clips else NUM_JOINTS,
        "clips": [],
    }
    for clip in clips:
        entry = {"id": clip.clip_id, "label": clip.label,
                 "frames": clip.frames.astype(float).tolist()}
        if clip.source_fps is not None:
            entry["fps"] = clip.source_fps
        doc["clips"].append(entry)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
    return Path(path)


# -------------------------------------------------------- temporal sampling

def uniform_indices(length, target):
    """index_i = floor(i * L / target); repeats frames when L < target."""
    if length < 1:
        raise InputError("cannot sample from an empty sequence")
    return [(i * length) // target for i in range(target)]


def sample_pose_frames(clip, target=POSE_FRAMES):
    frames = clip.frames if isinstance(clip, PoseClip) else np.asarray(clip)
    idx = uniform_indices(len(frames), target)
    sampled = frames[idx]
    if isinstance(clip, PoseClip):
        return PoseClip(clip.clip_id, sampled, clip.label, clip.source_fps)
    return PoseClip("", sampled)


def temporal_windows(clip, num_windows=NUM_WINDOWS, window=WINDOW_LENGTH):
    """Split into non-overlapping windows and summarize each joint.

    Window w covers frames [w*window, (w+1)*window).
    """
    frames = clip.frames if isinstance(clip, PoseClip) else np.asarray(clip)
    if frames.shape[0] != num_windows * window:
        raise ContractError(f"temporal_windows needs {num_windows * window} frames, got {frames.shape[0]}")
    grouped = frames.reshape(num_windows, window, frames.shape[1], 3)
    seen = grouped[..., 2] > 0                       # (W, window, J)
    counts = seen.sum(axis=1)                         # (W, J)
    sums = (grouped[..., :2] * seen[..., None]).sum(axis=1)
    coords = np.divide(sums, counts[..., None], out=np.zeros_like(sums), where=counts[..., None] > 0)

    pos = grouped[..., :2]
    diff = pos[:, :, None] - pos[:, None, :]          # (W, window, window, J, 2)
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    pair_ok = seen[:, :, None] & seen[:, None, :]
    displacement = np.where(pair_ok, dist, 0.0).max(axis=(1, 2))

    return PoseWindows(
        coords=coords,
        visible=counts > 0,
        displacement=displacement,
        frame_indices=[list(range(w * window, (w + 1) * window)) for w in range(num_windows)],
    )


# ------------------------------------------------------------- rasterizing

def rasterize_frames(frames, canvas=(256, 256), sigma_px=HEATMAP_SIGMA_PX):
    """Per-frame maps exp(-((col - x)^2 + (row - y)^2) / (2 sigma^2)).

    frames: (L, J, 3). Rows follow y, columns follow x; a normalized
    coordinate u maps to pixel u * size - 0.5 so pixel centers sit at
    (k + 0.5) / size. Missing joints give all-zero maps.
    """
    if sigma_px <= 0:
        raise ConfigError(f"heatmap sigma must be positive, got {sigma_px}")
    frames = np.asarray(frames, dtype=np.float64)
    h, w = canvas
    px = frames[..., 0] * w - 0.5
    py = frames[..., 1] * h - 0.5
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    denom = 2.0 * sigma_px ** 2
    gx = np.exp(-((cols - px[..., None]) ** 2) / denom)   # (L, J, W)
    gy = np.exp(-((rows - py[..., None]) ** 2) / denom)   # (L, J, H)
    maps = gy[..., :, None] * gx[..., None, :]
    maps *= (frames[..., 2] > 0)[..., None, None]
    return maps


def rasterize(clip, canvas=(256, 256), sigma_px=HEATMAP_SIGMA_PX,
              num_windows=NUM_WINDOWS, window=WINDOW_LENGTH, dtype=np.float64):
    """Rasterize every frame, then average-pool each window along time."""
    frames = clip.frames if isinstance(clip, PoseClip) else np.asarray(clip)
    if frames.shape[0] != num_windows * window:
        raise ContractError(f"rasterize needs {num_windows * window} frames, got {frames.shape[0]}")
    h, w = canvas
    volume = np.empty((num_windows, frames.shape[1], h, w), dtype=dtype)
    for wi in range(num_windows):
        chunk = frames[wi * window:(wi + 1) * window]
        volume[wi] = rasterize_frames(chunk, canvas, sigma_px).mean(axis=0)
    return HeatmapVolume(volume, sigma_px)


# ---------------------------------------------------------- patch relevance

def patch_grid(grid_side):
    """Centers ((col + 0.5)/side, (row + 0.5)/side) in row-major patch order."""
    ticks = (np.arange(grid_side) + 0.5) / grid_side
    cy, cx = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([cx.reshape(-1), cy.reshape(-1)], axis=1)


def patch_relevance(windows, patch_centers, sigma_rel, motion_weighting=False):
    """w[t, p] = exp(-min_k ||c_p - j_{t,k}||^2 / sigma^2) over visible joints.

    Windows with no visible joint get weight 1 everywhere. With
    ``motion_weighting`` the value is scaled by the nearest joint's
    displacement over the canvas diagonal, clamped to [0,1]; frames whose
    weights then sum to zero also fall back to 1.
    """
    centers = np.asarray(patch_centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] == 0:
        raise ContractError("patch_relevance needs at least one patch center")
    if sigma_rel <= 0:
        raise ConfigError(f"relevance sigma must be positive, got {sigma_rel}")

    diff = centers[None, :, None, :] - windows.coords[:, None, :, :]   # (T, P, J, 2)
    d2 = (diff ** 2).sum(axis=-1)
    d2 = np.where(windows.visible[:, None, :], d2, np.inf)
    nearest = np.argmin(d2, axis=-1)                                   # (T, P)
    d2_min = np.take_along_axis(d2, nearest[..., None], axis=-1)[..., 0]
    weights = np.exp(-d2_min / sigma_rel ** 2)

    if motion_weighting:
        factor = np.clip(windows.displacement / np.sqrt(2.0), 0.0, 1.0)
        weights = weights * np.take_along_axis(factor, nearest, axis=1)
        dead = weights.sum(axis=1) <= 0
        weights[dead] = 1.0

    weights[windows.missing] = 1.0
    return weights
