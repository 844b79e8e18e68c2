"""
Multi-seed ablation sweep on the default synthetic dataset.

For each seed the five variants are trained on identical data, evaluated on
the test split, and the per-variant medians are compared against the
expected ordering:
  - full >= every ablation
  - no_pose_branch is the minimum and trails full by >= 10 pp
  - no_pose_guidance trails full by >= 5 pp
  - full reaches >= 90 %

Output: <out>/seed_sweep_report.md (+ the usual ablation.json/md)

Usage:
  python experiment/run_seed_sweep.py --data data/synth --out runs/sweep --seeds 0 1 2
"""
import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from ablation import ordering_checks, run_ablation  # noqa: E402
from config import DIVIDER, EMOJI_ERROR, EMOJI_SUCCESS, load_experiment_config, validate_config  # noqa: E402
from data_loader import load_dataset, write_dataset  # noqa: E402
from synth_data import SynthConfig  # noqa: E402


def build_report(report):
    lines = ["# Seed Sweep", "", f"Seeds: {', '.join(str(s) for s in report.seeds)}", ""]
    header = "| Variant | " + " | ".join(f"seed {s}" for s in report.seeds) + " | Median | Δ (pp) |"
    lines += [header, "|---|" + "---:|" * (len(report.seeds) + 2)]
    for row in report.rows:
        per_seed = " | ".join(f"{v:.2f}" for v in row["per_seed"])
        lines.append(f"| {row['variant']} | {per_seed} | {row['top1']:.2f} | {row['delta_pp']:+.2f} |")
    lines += ["", "## Ordering checks", ""]
    for text, ok in ordering_checks(report.rows):
        lines.append(f"- [{'x' if ok else ' '}] {text}")
    return "\n".join(lines) + "\n"


def main():
    parser = argparse.ArgumentParser(description="Ablation sweep over several seeds")
    parser.add_argument("--data", default=str(ROOT / "data" / "synth"))
    parser.add_argument("--out", default=str(ROOT / "runs" / "seed_sweep"))
    parser.add_argument("--config")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = parser.parse_args()

    cfg = load_experiment_config(args.config, output_dir=args.out)
    issues = validate_config(cfg)
    if issues:
        for issue in issues:
            print(f"{EMOJI_ERROR} {issue}")
        sys.exit(1)

    data = Path(args.data)
    if not (data / "manifest.json").exists():
        shape = cfg.shape()
        print(f"No dataset at {data}; generating the default synthetic set.")
        write_dataset(SynthConfig(canvas=shape["image_size"], channels=shape["channels"],
                                  glyph_cell=shape["patch_size"]), data,
                      workers=cfg.num_workers)

    report = run_ablation(cfg, load_dataset(data), seeds=args.seeds, out_dir=args.out)
    out = Path(args.out) / "seed_sweep_report.md"
    out.write_text(build_report(report), encoding="utf-8")

    print("\n" + DIVIDER)
    for text, ok in ordering_checks(report.rows):
        print(f"  {EMOJI_SUCCESS if ok else EMOJI_ERROR} {text}")
    print(DIVIDER)
    print(f"Report written to: {out}")


if __name__ == "__main__":
    main()
