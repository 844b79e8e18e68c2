# data_loader.py
# Dataset directory layout (manifest + per-clip frames/pose), lazy clip access,
# train/validation holdout and batch assembly for the model.

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from config import DATASET_VERSION, HEATMAP_SIGMA_PX, make_rng
from errors import DatasetError, InputError
from model import Batch
from pose_io import parse_pose_file, rasterize, sample_pose_frames, temporal_windows, write_pose_file
from synth_data import SynthClip, SynthConfig, generate_dataset, split_indices
from visual_encoder import sample_rgb_frames

MANIFEST_NAME = "manifest.json"
CLIP_DIR = "clips"


def load_json(filepath):
    """Load JSON file with error handling."""
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DatasetError(f"File not found: {filepath}")
    except json.JSONDecodeError as e:
        raise DatasetError(f"Invalid JSON in {filepath}: {e}")


def save_json(filepath, data):
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
    return Path(filepath)


class ClipDataset:
    """Named splits of clip ids; clips are read from disk on first access."""

    def __init__(self, splits, labels, num_classes, root=None, entries=None, synth_config=None):
        self.splits = {name: list(ids) for name, ids in splits.items()}
        self.labels = dict(labels)
        self.num_classes = int(num_classes)
        self.root = Path(root) if root else None
        self.entries = entries or {}
        self.synth_config = synth_config
        self._cache = {}

    @classmethod
    def from_clips(cls, clips, splits=None, num_classes=None, synth_config=None):
        splits = splits or {"train": [c.clip_id for c in clips]}
        labels = {c.clip_id: c.label for c in clips}
        num_classes = num_classes or (max(labels.values()) + 1 if labels else 0)
        ds = cls(splits, labels, num_classes, synth_config=synth_config)
        ds._cache = {c.clip_id: c for c in clips}
        return ds

    def split(self, name):
        if name not in self.splits:
            raise DatasetError(f"Dataset has no split '{name}' (have {sorted(self.splits)})")
        return list(self.splits[name])

    def __len__(self):
        return len(self.labels)

    def get(self, clip_id):
        if clip_id in self._cache:
            return self._cache[clip_id]
        if self.root is None or clip_id not in self.entries:
            raise DatasetError(f"Unknown clip '{clip_id}'")
        entry = self.entries[clip_id]
        frames_path = self.root / entry["frames"]
        try:
            frames = np.load(frames_path, allow_pickle=False)
        except (FileNotFoundError, ValueError) as e:
            raise DatasetError(f"Cannot read frames {frames_path}: {e}")
        pose = parse_pose_file(self.root / entry["pose"])[0]
        clip = SynthClip(clip_id, frames, pose, self.labels[clip_id])
        self._cache[clip_id] = clip
        return clip

    def clips(self, ids):
        return [self.get(i) for i in ids]


def write_dataset(cfg: SynthConfig, path, clips=None, workers=1):
    """Generate (unless ``clips`` is given) and serialize a synthetic dataset.

    Layout:
        manifest.json               version, config echo, splits, labels, entries
        clips/<id>.frames.npy       uint8 (L, H, W, C)
        clips/<id>.pose.json        pose file with one clip
    """
    root = Path(path)
    (root / CLIP_DIR).mkdir(parents=True, exist_ok=True)
    if clips is None:
        clips = generate_dataset(cfg, workers=workers)
    by_index = {c.clip_id: c for c in clips}

    splits = {}
    for name, indices in split_indices(cfg).items():
        splits[name] = [cid for cid in (f"clip_{i:06d}" for i in indices) if cid in by_index]
    listed = {cid for ids in splits.values() for cid in ids}
    extra = [c.clip_id for c in clips if c.clip_id not in listed]
    if extra:
        splits.setdefault("train", []).extend(extra)

    entries = {}
    for clip in clips:
        frames_rel = f"{CLIP_DIR}/{clip.clip_id}.frames.npy"
        pose_rel = f"{CLIP_DIR}/{clip.clip_id}.pose.json"
        np.save(root / frames_rel, np.ascontiguousarray(clip.frames), allow_pickle=False)
        write_pose_file(root / pose_rel, [clip.pose])
        entries[clip.clip_id] = {"frames": frames_rel, "pose": pose_rel, "label": int(clip.label)}

    manifest = {
        "version": DATASET_VERSION,
        "num_classes": cfg.num_classes,
        "config": cfg.to_dict(),
        "splits": splits,
        "clips": entries,
    }
    save_json(root / MANIFEST_NAME, manifest)
    return root


def load_dataset(path):
    """Inverse of write_dataset; clip payloads load lazily."""
    root = Path(path)
    manifest = load_json(root / MANIFEST_NAME)
    version = manifest.get("version") if isinstance(manifest, dict) else None
    if version != DATASET_VERSION:
        raise DatasetError(f"{root}: unsupported dataset version {version!r} (expected {DATASET_VERSION})")
    try:
        entries = manifest["clips"]
        labels = {cid: int(e["label"]) for cid, e in entries.items()}
        synth = SynthConfig.from_dict(manifest["config"]) if manifest.get("config") else None
        return ClipDataset(manifest["splits"], labels, manifest["num_classes"],
                           root=root, entries=entries, synth_config=synth)
    except (KeyError, TypeError) as e:
        raise DatasetError(f"{root / MANIFEST_NAME}: corrupt manifest ({e})")


def holdout_split(ids, val_fraction, seed):
    """Seeded permutation; the last ``val_fraction`` of it is validation."""
    ids = list(ids)
    if not ids:
        raise InputError("cannot split an empty id list")
    order = make_rng(seed, 5).permutation(len(ids))
    n_val = max(1, int(round(val_fraction * len(ids)))) if len(ids) > 1 else 0
    train = [ids[i] for i in order[:len(ids) - n_val]]
    val = [ids[i] for i in order[len(ids) - n_val:]]
    return train, val


def batch_slices(ids, batch_size, rng=None):
    """Consecutive batches of ``ids``, shuffled by ``rng`` when given."""
    ids = list(ids)
    if rng is not None:
        ids = [ids[i] for i in rng.permutation(len(ids))]
    return [ids[i:i + batch_size] for i in range(0, len(ids), batch_size)]


def _prepare(clip, heatmap_canvas, with_heatmaps, dtype):
    rgb = sample_rgb_frames(clip.frames).astype(dtype) / dtype(255.0)
    pose = sample_pose_frames(clip.pose)
    windows = temporal_windows(pose)
    heat = None
    if with_heatmaps:
        heat = rasterize(pose, canvas=(heatmap_canvas, heatmap_canvas),
                         sigma_px=HEATMAP_SIGMA_PX, dtype=dtype).channel_major()
    return rgb, heat, windows


def make_batch(clips, heatmap_canvas, with_heatmaps=True, dtype=np.float64, workers=1):
    """Assemble a model Batch: 8 RGB frames and 32 pose frames per clip.

    Per-clip preparation may run on ``workers`` threads; results keep clip order.
    """
    if not clips:
        raise InputError("cannot assemble an empty batch")
    dtype = np.dtype(dtype).type
    prepare = lambda c: _prepare(c, heatmap_canvas, with_heatmaps, dtype)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(prepare, clips))
    else:
        parts = [prepare(c) for c in clips]
    rgb = np.stack([p[0] for p in parts])
    heat = np.stack([p[1] for p in parts]) if with_heatmaps else None
    return Batch(rgb=rgb, heatmaps=heat, windows=[p[2] for p in parts],
                 labels=np.array([c.label for c in clips], dtype=np.int64),
                 clip_ids=[c.clip_id for c in clips])
