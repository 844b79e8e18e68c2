# main.py
# Command-line entry point: gen-data, train, eval, ablate, gradcheck,
# rasterize, dump-fusion. Exit codes: 0 ok, 1 contract/config error, 2 numeric failure.

import argparse
import sys
from pathlib import Path

import numpy as np

import numeric as nm
from config import (
    DIVIDER, EMOJI_CONFIG, EMOJI_ERROR, EMOJI_SAVE, EMOJI_SUCCESS, EMOJI_WARNING,
    GATE_MODES, HEATMAP_SIGMA_PX, PROFILES, load_experiment_config, validate_config,
)
from errors import ClipMgError, ContractError, InputError
from pose_io import JOINT_NAMES, parse_pose_file, rasterize, sample_pose_frames


def build_parser():
    parser = argparse.ArgumentParser(prog="clipmg", description="Pose-guided micro-gesture classification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant")
        p.add_argument("--profile", choices=sorted(PROFILES))
        p.add_argument("--out", help="output directory")
        p.add_argument("--gate-mode", choices=GATE_MODES)
        p.add_argument("--workers", type=int)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)

    p = sub.add_parser("train", help="train one variant")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--subset", type=int)

    p = sub.add_parser("eval", help="Top-1 of a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("ablate", help="train and compare all variants")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p)

    p = sub.add_parser("rasterize", help="render a pose clip to a heatmap volume dump")
    common(p)
    p.add_argument("--pose", required=True)
    p.add_argument("--clip", default=None, help="clip id (default: first clip)")
    p.add_argument("--canvas", type=int, default=256)
    p.add_argument("--sigma", type=float, default=HEATMAP_SIGMA_PX)

    p = sub.add_parser("dump-fusion", help="dump fusion intermediates of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--count", type=int, default=4)
    return parser


def experiment_config(args):
    overrides = {
        "seed": args.seed,
        "variant": args.variant,
        "profile": args.profile,
        "output_dir": args.out,
        "gate_mode": args.gate_mode,
        "num_workers": args.workers,
        "epochs": getattr(args, "epochs", None),
        "max_steps": getattr(args, "max_steps", None),
        "subset": getattr(args, "subset", None),
        "data_dir": getattr(args, "data", None),
    }
    cfg = load_experiment_config(args.config, **overrides)
    issues = validate_config(cfg)
    if issues:
        print(f"{EMOJI_ERROR} Invalid configuration:")
        for issue in issues:
            print(f"  - {issue}")
        return None
    return cfg


def cmd_gen_data(args, cfg):
    from data_loader import write_dataset
    from synth_data import SynthConfig

    shape = cfg.shape()
    synth = SynthConfig(canvas=shape["image_size"], channels=shape["channels"],
                        glyph_cell=shape["patch_size"], seed=cfg.seed)
    if args.train_size is not None:
        synth.train_size = args.train_size
    if args.test_size is not None:
        synth.test_size = args.test_size
    out = Path(cfg.output_dir)
    print(f"{EMOJI_CONFIG} Generating {synth.size} clips ({synth.canvas}px, {synth.num_classes} classes) -> {out}")
    write_dataset(synth, out, workers=cfg.num_workers)
    print(f"{EMOJI_SUCCESS} Dataset written to: {out}")
    return 0


def cmd_train(args, cfg):
    from data_loader import load_dataset
    from trainer import train

    result = train(cfg, load_dataset(args.data))
    print(f"{EMOJI_SAVE} Checkpoint: {result.checkpoint}")
    print(f"{EMOJI_SAVE} Metrics:    {result.metrics}")
    return 0


def cmd_eval(args, cfg):
    from data_loader import load_dataset
    from output_manager import display_evaluation
    from trainer import evaluate

    result = evaluate(args.checkpoint, load_dataset(args.data), args.split, cfg.batch_size, cfg.num_workers)
    display_evaluation(result, args.split)
    return 0


def cmd_ablate(args, cfg):
    from ablation import run_ablation
    from data_loader import load_dataset

    run_ablation(cfg, load_dataset(args.data), seeds=args.seeds)
    return 0


def cmd_gradcheck(args, cfg):
    from gradcheck_suite import GRADCHECK_TOLERANCE, gradcheck_suite
    from output_manager import display_gradcheck

    results, passed, seconds = gradcheck_suite(seed=cfg.seed)
    display_gradcheck(results, GRADCHECK_TOLERANCE)
    status = EMOJI_SUCCESS if passed else EMOJI_ERROR
    print(f"{status} {sum(e < GRADCHECK_TOLERANCE for e in results.values())}/{len(results)} checks passed in {seconds:.1f}s")
    return 0 if passed else 2


def cmd_rasterize(args, cfg):
    from output_manager import dump_heatmaps

    clips = parse_pose_file(args.pose)
    if not clips:
        raise InputError(f"{args.pose} holds no clips")
    if args.clip is None:
        clip = clips[0]
    else:
        matches = [c for c in clips if c.clip_id == args.clip]
        if not matches:
            raise InputError(f"clip '{args.clip}' not found in {args.pose}")
        clip = matches[0]

    volume = rasterize(sample_pose_frames(clip), canvas=(args.canvas, args.canvas),
                       sigma_px=args.sigma, dtype=np.float32)
    stem = Path(cfg.output_dir) / f"heatmaps_{clip.clip_id}"
    bin_path, _ = dump_heatmaps(stem, volume, clip.clip_id)

    print("\n" + DIVIDER)
    print(f"Heatmap volume {volume.shape} for clip '{clip.clip_id}'")
    print(DIVIDER)
    for j, name in enumerate(JOINT_NAMES[:volume.shape[1]]):
        maps = volume.data[:, j]
        if maps.max() <= 0:
            print(f"  {name:<11} (not visible)")
            continue
        w, row, col = np.unravel_index(np.argmax(maps), maps.shape)
        print(f"  {name:<11} peak {maps[w, row, col]:.4f} at window {w}, row {row}, col {col}")
    print(f"{EMOJI_SAVE} Saved: {bin_path}")
    return 0


def cmd_dump_fusion(args, cfg):
    from data_loader import load_dataset, make_batch
    from output_manager import dump_fusion_state, load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    if not model.flags.cross_attention:
        raise ContractError(f"variant '{model.variant.value}' has no fusion stage to dump")
    dataset = load_dataset(args.data)
    ids = dataset.split(args.split)[:args.count]
    if not ids:
        raise InputError(f"split '{args.split}' is empty")
    batch = make_batch(dataset.clips(ids), model.heatmap_canvas, with_heatmaps=model.flags.pose_branch)
    with nm.no_grad():
        _, state = model.forward(batch)
    stem = Path(cfg.output_dir) / "fusion_dump"
    bin_path, json_path = dump_fusion_state(stem, state, clip_ids=batch.clip_ids)
    print(f"{EMOJI_SAVE} Fusion state for {len(ids)} clip(s): {json_path} + {bin_path.name}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "rasterize": cmd_rasterize,
    "dump-fusion": cmd_dump_fusion,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = experiment_config(args)
        if cfg is None:
            return 1
        return COMMANDS[args.command](args, cfg)
    except ClipMgError as e:
        print(f"{EMOJI_ERROR} {type(e).__name__}: {e}")
        return e.exit_code
    except FileNotFoundError as e:
        print(f"{EMOJI_ERROR} {e}")
        return 1
    except KeyboardInterrupt:
        print(f"\n{EMOJI_WARNING}  Interrupted.")
        return 1


if __name__ == "__main__":
    sys.exit(main())
