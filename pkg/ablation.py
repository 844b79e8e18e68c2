# ablation.py
# Train every model variant on identical data/seeds and tabulate Top-1 deltas.

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from config import ExperimentConfig
from errors import ConfigError
from model import VARIANT_DESCRIPTIONS, Variant
from output_manager import display_ablation, write_ablation_report
from trainer import evaluate, train

POSE_BRANCH_MARGIN = 10.0
POSE_GUIDANCE_MARGIN = 5.0
FULL_FLOOR = 90.0


def ordering_checks(rows):
    """[(description, passed)] for the expected variant ordering."""
    top1 = {r["variant"]: r["top1"] for r in rows}
    full = top1["full"]
    ablations = {k: v for k, v in top1.items() if k != "full"}
    return [
        ("full >= every ablation", all(full >= v for v in ablations.values())),
        ("no_pose_branch is the minimum", top1["no_pose_branch"] == min(top1.values())),
        (f"no_pose_branch trails full by >= {POSE_BRANCH_MARGIN:g} pp",
         full - top1["no_pose_branch"] >= POSE_BRANCH_MARGIN),
        (f"no_pose_guidance trails full by >= {POSE_GUIDANCE_MARGIN:g} pp",
         full - top1["no_pose_guidance"] >= POSE_GUIDANCE_MARGIN),
        (f"full >= {FULL_FLOOR:g} %", full >= FULL_FLOOR),
    ]


@dataclass
class AblationReport:
    seeds: list
    rows: list = field(default_factory=list)       # variant, description, top1, delta_pp, per_seed
    curves: dict = field(default_factory=dict)     # variant -> seed -> per-epoch history

    def row(self, variant):
        name = variant.value if isinstance(variant, Variant) else variant
        for r in self.rows:
            if r["variant"] == name:
                return r
        raise KeyError(name)

    def to_dict(self):
        return asdict(self)


def _ordered_variants(names):
    variants = [Variant.parse(n) for n in names]
    if set(variants) != set(Variant) or len(variants) != len(Variant):
        raise ConfigError(f"ablation needs each variant exactly once: {Variant.names()}")
    # full first so every delta has its reference
    return [Variant.FULL] + [v for v in variants if v is not Variant.FULL]


def run_ablation(cfg: ExperimentConfig, dataset, seeds=None, out_dir=None, split="test", verbose=True):
    """Train all variants for each seed and report median Top-1 (%) per variant
    with the difference to full in percentage points."""
    seeds = list(seeds) if seeds else [cfg.seed]
    out_dir = Path(out_dir or cfg.output_dir)
    report = AblationReport(seeds=seeds)

    scores = {}
    for variant in _ordered_variants(cfg.variants):
        per_seed = []
        report.curves[variant.value] = {}
        for seed in seeds:
            run_cfg = replace(cfg, variant=variant.value, seed=seed)
            run_dir = out_dir / variant.value / f"seed_{seed}"
            result = train(run_cfg, dataset, out_dir=run_dir, verbose=verbose)
            top1 = evaluate(result.checkpoint, dataset, split, cfg.batch_size, cfg.num_workers).top1
            per_seed.append(top1)
            report.curves[variant.value][str(seed)] = result.history
        scores[variant] = (float(np.median(per_seed)), per_seed)

    reference = scores[Variant.FULL][0]
    for variant, (top1, per_seed) in scores.items():
        report.rows.append({
            "variant": variant.value,
            "description": VARIANT_DESCRIPTIONS[variant],
            "top1": top1,
            "delta_pp": top1 - reference,
            "per_seed": per_seed,
        })

    write_ablation_report(out_dir, report.to_dict())
    if verbose:
        display_ablation(report.to_dict())
    return report
