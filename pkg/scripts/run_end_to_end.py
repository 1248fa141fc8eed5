"""Train one variant on one task from scripted demos and evaluate it on both splits.

    python scripts/run_end_to_end.py --task place-synth --variant full --epochs 300 --out runs/place-full
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from hgmanip import pipeline
from hgmanip.config import VARIANTS, default_config
from hgmanip.io import dump_json
from hgmanip.simenv import TASKS


def apply_overrides(cfg, overrides):
    """``section.field=value`` strings, values parsed as JSON when possible."""
    for item in overrides or ():
        key, _, raw = item.partition("=")
        section, _, name = key.partition(".")
        target = getattr(cfg, section) if name else cfg
        name = name or section
        if not hasattr(target, name):
            raise SystemExit(f"unknown setting {key!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        setattr(target, name, tuple(value) if isinstance(value, list) else value)
    return cfg


def run(task, variant, epochs, num_demos, episodes, runs, seed, demo_seed, out=None, splits=("train", "test"),
        workers=1, verbose=True, overrides=()):
    t0 = time.time()
    cfg = apply_overrides(default_config(task, variant, seed=seed), overrides)
    demos, failed = pipeline.generate_demos(task, "train", num_demos, demo_seed)
    if failed:
        raise SystemExit(f"expert failed on seeds {failed}")
    episodes_ = [pipeline.episode_from_demo(d, cfg.policy.n_points) for d in demos]
    bundle, log = pipeline.train_from_episodes(cfg, episodes_, epochs, seed)
    t_train = time.time() - t0
    if verbose:
        print(f"[{task}/{variant}] trained {len(log.rows)} steps in {t_train:.0f}s, "
              f"final loss {log.rows[-1][1]:.4f}", flush=True)
    report = {"task": task, "variant": variant, "epochs": epochs, "num_demos": num_demos,
              "overrides": list(overrides or ()),
              "train_seconds": round(t_train, 1), "splits": {}}
    for split in splits:
        rates, hist = [], {"grasp": 0, "move": 0, "final": 0}
        for r in range(runs):
            rate, results = pipeline.evaluate_bundle(bundle, cfg, split, episodes, seed + 1000 * r, workers)
            rates.append(rate)
            for res in results:
                if res.failure_stage:
                    hist[res.failure_stage] += 1
        report["splits"][split] = {"rates": rates, "mean": float(np.mean(rates)), "std": float(np.std(rates)),
                                   "failure_stages": hist}
        if verbose:
            print(f"[{task}/{variant}] {split}: {np.mean(rates):.3f} +- {np.std(rates):.3f} {rates} {hist}",
                  flush=True)
    report["total_seconds"] = round(time.time() - t0, 1)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        pipeline.save_checkpoint(Path(out) / "checkpoint", bundle)
        (Path(out) / "loss.csv").write_text(log.to_csv())
        (Path(out) / "report.json").write_text(dump_json(report))
    return report


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--task", choices=sorted(TASKS), default="place-synth")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--demos", type=int, default=50)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--demo-seed", type=int, default=0)
    p.add_argument("--splits", default="train,test")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                   help="config override, e.g. policy.lr=1e-3 (repeatable)")
    p.add_argument("--out")
    a = p.parse_args()
    report = run(a.task, a.variant, a.epochs, a.demos, a.episodes, a.runs, a.seed, a.demo_seed, a.out,
                 tuple(a.splits.split(",")), a.workers, overrides=a.set)
    print(json.dumps({s: v["mean"] for s, v in report["splits"].items()}))


if __name__ == "__main__":
    main()
