"""Multi-seed variant sweep on the synthetic benchmark, and its summary.

Layout under the output directory::

    seed{S}/{variant}/metrics.jsonl, checkpoint.pt, eval.json
    seed{S}/all/powerset.json
    summary.json

A finished ``eval.json`` marks a run as done, so an interrupted sweep can be
resumed without redoing work.
"""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from umpe.config import from_dict
from umpe.train import FrameSet, eval_powerset, evaluate, load_frames, train_two_stage

log = logging.getLogger(__name__)

VARIANTS = {
    "none": {"use_vector": False, "use_raster": False},
    "vector": {"use_raster": False},
    "raster": {"use_vector": False},
    "all": {},
    "all_rv": {"fusion_order": "rv"},
}
SINGLE_SUBSETS = ("hd", "sd", "sat", "rsd")


def run_variant(variant: str, seed: int, train: FrameSet, test: FrameSet, out: Path,
                overrides: dict | None = None, resume: bool = True) -> dict:
    run_dir = out / f"seed{seed}" / variant
    done = run_dir / "eval.json"
    if resume and done.exists():
        return json.loads(done.read_text())
    cfg = from_dict({**(overrides or {}), **VARIANTS[variant], "seed": seed, "out_dir": str(run_dir)})
    t0 = time.time()
    model, _ = train_two_stage(cfg, train, run_dir)
    res = evaluate(model, test)
    res["train_seconds"] = time.time() - t0
    if variant == "all":
        rows = eval_powerset(model, test)
        (run_dir / "powerset.json").write_text(json.dumps(rows, indent=1) + "\n")
    done.write_text(json.dumps(res, indent=1) + "\n")
    log.info("seed %d %s miou %.4f (%.0fs)", seed, variant, res["miou"], res["train_seconds"])
    return res


def run_trend(train_dir: str | Path, test_dir: str | Path, out: str | Path, seeds=(0, 1, 2),
              variants=tuple(VARIANTS), overrides: dict | None = None, resume: bool = True) -> dict:
    out = Path(out)
    train, test = load_frames(train_dir), load_frames(test_dir)
    for seed in seeds:
        for v in variants:
            run_variant(v, seed, train, test, out, overrides, resume)
    summary = summarize(out)
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def summarize(out: str | Path) -> dict:
    """Seed-level and seed-averaged mIoU per variant, plus powerset ratios."""
    out = Path(out)
    per: dict[str, dict[int, float]] = {}
    for p in sorted(out.glob("seed*/*/eval.json")):
        seed = int(p.parent.parent.name[4:])
        per.setdefault(p.parent.name, {})[seed] = json.loads(p.read_text())["miou"]
    summary = {"miou": per, "mean_miou": {v: float(np.mean(list(s.values()))) for v, s in per.items()}}
    mean = summary["mean_miou"]
    if "none" in mean:
        summary["gain_over_none"] = {v: mean[v] - mean["none"] for v in mean if v != "none"}

    grids = {}
    for p in sorted(out.glob("seed*/all/powerset.json")):
        seed = int(p.parent.parent.name[4:])
        grids[seed] = {r["subset"]: r["miou"] for r in json.loads(p.read_text())}
    if grids and "none" in mean:
        seeds = sorted(grids)
        avg = {k: float(np.mean([grids[s][k] for s in seeds])) for k in grids[seeds[0]]}
        full_name = max(avg, key=lambda k: k.count("+"))
        gain = avg[full_name] - mean["none"]
        loss = {k: (avg[full_name] - avg[k]) / gain if gain > 0 else float("inf") for k in SINGLE_SUBSETS}
        summary["powerset"] = {
            "seeds": seeds, "mean": avg, "per_seed": {str(s): grids[s] for s in seeds},
            "full_subset": full_name, "best_subset": max(avg, key=avg.get),
            "baseline": mean["none"], "single_loss_fraction": loss,
        }
    return summary
