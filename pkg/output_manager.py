# output_manager.py
# Checkpoint files, metrics CSV, binary array dumps, reports and console summaries.

import json
import struct
from pathlib import Path

import numpy as np
import pandas as pd

from config import (
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION, DIVIDER, EMOJI_CHECK, EMOJI_ERROR,
    EMOJI_SAVE, EMOJI_SCORE, EMOJI_START, EMOJI_SUCCESS,
)
from errors import DatasetError, DimensionError

METRICS_COLUMNS = ["epoch", "split", "loss", "top1"]
_LE_F32 = np.dtype("<f4")


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, extra=None):
    """Single-file checkpoint.

    Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
    header (model kwargs, parameter names/shapes/offsets, ``extra``), then
    every parameter as little-endian float32 in header order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks, offset = [], 0
    arrays = []
    for name, tensor in model.named_parameters().items():
        arr = np.ascontiguousarray(tensor.data, dtype=_LE_F32)
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
        arrays.append(arr.reshape(-1))
    header = {
        "model": model.init_kwargs,
        "num_classes": model.num_classes,
        "params": blocks,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
        f.write(raw)
        if arrays:
            f.write(np.concatenate(arrays).tobytes())
    return path


def read_checkpoint(path):
    """Returns (header dict, {name: float32 array})."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"File not found: {path}")
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DatasetError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", blob, pos)
    if version != CHECKPOINT_VERSION:
        raise DatasetError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    try:
        header = json.loads(blob[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetError(f"{path}: corrupt checkpoint header ({e})")
    data = np.frombuffer(blob, dtype=_LE_F32, offset=pos + header_len)
    arrays = {}
    for block in header["params"]:
        start, count = block["offset"], block["count"]
        if start + count > data.size:
            raise DatasetError(f"{path}: truncated parameter block '{block['name']}'")
        arrays[block["name"]] = data[start:start + count].reshape(block["shape"]).copy()
    return header, arrays


def load_checkpoint(path):
    """Rebuild the model stored in ``path``; returns (model, header)."""
    from model import ClipMgModel

    header, arrays = read_checkpoint(path)
    model = ClipMgModel.from_init_kwargs(header["model"])
    params = model.named_parameters()
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise DimensionError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    for name, tensor in params.items():
        if arrays[name].shape != tensor.shape:
            raise DimensionError(f"'{name}': checkpoint shape {arrays[name].shape} != model shape {tensor.shape}")
        tensor.data[...] = arrays[name]
    return model, header


# -------------------------------------------------------------------- metrics

def append_metrics(path, rows):
    """Append rows of (epoch, split, loss, top1) to a CSV, writing the header once."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False, float_format="%.6f")
    return path


def read_metrics(path):
    try:
        return pd.read_csv(path)
    except FileNotFoundError:
        raise DatasetError(f"File not found: {path}")


# ---------------------------------------------------------------- array dumps

def save_array_bundle(path, arrays, meta=None):
    """Write ``<path>.bin`` (little-endian float32 blocks) and ``<path>.json``
    (dtype, per-array name/shape/offset, free-form ``meta``)."""
    stem = Path(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, value in arrays.items():
        if value is None:
            continue
        arr = np.ascontiguousarray(np.asarray(value), dtype=_LE_F32)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.reshape(-1))
        offset += arr.size
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype=_LE_F32)
    bin_path.write_bytes(payload.tobytes())
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump({"dtype": "float32", "byte_order": "little", "arrays": entries, "meta": meta or {}}, f, indent=2)
    return bin_path, json_path


def load_array_bundle(path):
    stem = Path(path)
    try:
        with open(stem.with_suffix(".json"), "r", encoding="utf-8") as f:
            sidecar = json.load(f)
        data = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype=_LE_F32)
    except FileNotFoundError as e:
        raise DatasetError(f"File not found: {e.filename}")
    arrays = {}
    for entry in sidecar["arrays"]:
        start = entry["offset"]
        arrays[entry["name"]] = data[start:start + entry["count"]].reshape(entry["shape"]).copy()
    return arrays, sidecar.get("meta", {})


def _value(x):
    return None if x is None else np.asarray(getattr(x, "data", x))


def attention_maps(attention, frames):
    """(..., T * P) attention -> (..., T, sqrt(P), sqrt(P))."""
    attn = np.asarray(attention)
    per_frame = attn.shape[-1] // frames
    side = int(round(per_frame ** 0.5))
    if side * side * frames != attn.shape[-1]:
        raise DimensionError(f"attention width {attn.shape[-1]} is not {frames} square patch grids")
    return attn.reshape(attn.shape[:-1] + (frames, side, side))


def dump_fusion_state(path, state, clip_ids=None, frames=8):
    """Binary+sidecar dump of FusionState intermediates."""
    arrays = {
        "weights": _value(state.weights),
        "alpha": _value(state.alpha),
        "g": _value(state.g),
        "u": _value(state.u),
        "query": _value(state.query),
        "fused_query": _value(state.fused_query),
        "attention": _value(state.attention),
        "output": _value(state.output),
    }
    if arrays["attention"] is not None:
        arrays["attention_map"] = attention_maps(arrays["attention"], frames)
    return save_array_bundle(path, arrays, meta={"clip_ids": list(clip_ids or []), "frames": frames})


def dump_heatmaps(path, volume, clip_id=None):
    return save_array_bundle(path, {"heatmaps": volume.data},
                             meta={"clip_id": clip_id, "sigma_px": volume.sigma_px,
                                   "layout": "T,J,H,W"})


# -------------------------------------------------------------------- reports

def _fmt_delta(delta):
    return "-" if delta == 0 else f"{delta:+.2f}"


def ablation_markdown(report):
    """Markdown table: variant, description, Top-1 (%), delta pp vs full."""
    lines = [
        "# Ablation Report",
        "",
        f"Seeds: {', '.join(str(s) for s in report['seeds'])}",
        "",
        "| Variant | Setting | Top-1 (%) | Δ (pp) |",
        "|---|---|---:|---:|",
    ]
    for row in report["rows"]:
        lines.append(f"| {row['variant']} | {row['description']} | {row['top1']:.2f} | {_fmt_delta(row['delta_pp'])} |")
    return "\n".join(lines) + "\n"


def write_ablation_report(out_dir, report):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path, md_path = out_dir / "ablation.json", out_dir / "ablation.md"
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    md_path.write_text(ablation_markdown(report), encoding="utf-8")
    print(f"{EMOJI_SAVE} Ablation report saved to: {md_path}")
    return json_path, md_path


# -------------------------------------------------------------------- console

def display_run_header(title, cfg):
    print("\n" + DIVIDER)
    print(f"{EMOJI_START} {title}")
    print(DIVIDER)
    print(f"  Profile:    {cfg.profile}")
    print(f"  Variant:    {cfg.variant}")
    print(f"  Seed:       {cfg.seed}")
    print(f"  Gate mode:  {cfg.gate_mode}")
    print(f"  Batch/LR:   {cfg.batch_size} / {cfg.learning_rate}")
    print(f"  Epochs:     {cfg.epochs}" + (f" (max {cfg.max_steps} steps)" if cfg.max_steps else ""))


def display_epoch(epoch, train_loss, val_top1, best):
    marker = f" {EMOJI_SAVE}" if best else ""
    print(f"  epoch {epoch:3d}  train loss {train_loss:.4f}  val top1 {val_top1:6.2f}%{marker}")


def display_evaluation(result, split):
    print("\n" + DIVIDER)
    print(f"{EMOJI_SCORE} EVALUATION ({split})")
    print(DIVIDER)
    print(f"  Top-1:   {result.top1:.2f}%  ({result.correct}/{result.total})")
    weakest = sorted(result.per_class.items(), key=lambda kv: kv[1])[:3]
    if weakest:
        print("  Weakest classes: " + ", ".join(f"{c}={acc:.1f}%" for c, acc in weakest))


def display_ablation(report):
    print("\n" + DIVIDER)
    print(f"{EMOJI_SCORE} ABLATION")
    print(DIVIDER)
    for row in report["rows"]:
        print(f"  {row['variant']:<20} {row['top1']:6.2f}%  {_fmt_delta(row['delta_pp']):>7}")


def display_gradcheck(results, tolerance):
    print("\n" + DIVIDER)
    print(f"{EMOJI_CHECK} GRADIENT CHECKS (tolerance {tolerance:g})")
    print(DIVIDER)
    for name, err in results.items():
        mark = EMOJI_SUCCESS if err < tolerance else EMOJI_ERROR
        print(f"  {mark} {name:<32} {err:.2e}")
