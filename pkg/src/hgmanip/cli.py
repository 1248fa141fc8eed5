"""``hgm`` command line: gen-demos, train, eval, grasp, export-cloud.

Exit codes: 0 success, 1 user error (bad flags, config or files), 2 runtime
failure (divergence, expert failure, degenerate grasp reference).
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import io, pipeline
from .config import VARIANTS, TaskConfig, default_config, load_config
from .correspondence import locate_manipulation_point, plan_grasp
from .errors import HGMError
from .fusion import COUNTERS
from .simenv import SPLITS, TASKS, make_task

RUNTIME_CODES = {"diverged", "expert-failed", "degenerate-reference", "non-finite"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def worker_count() -> int:
    raw = os.environ.get("HGM_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise HGMError("bad-config", f"HGM_THREADS={raw!r} is not an integer")
    return os.cpu_count() or 1


def _config_for(args, task: str) -> TaskConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config(task)
    variant = getattr(args, "variant", None)
    if variant:
        cfg.variant = variant
        cfg.fusion.enable_dual_stream = variant != "no-pe"
    return cfg


# ------------------------------------------------------------------ commands

def cmd_gen_demos(args) -> int:
    cfg = _config_for(args, args.task)
    if cfg.task != args.task:
        raise HGMError("bad-config", f"config task {cfg.task!r} != --task {args.task!r}")

    def report(seed, ok):
        print(f"episode seed={seed} {'success' if ok else 'FAILED'}")

    demos, failed = pipeline.generate_demos(args.task, args.split, args.num, args.seed, report)
    pipeline.write_dataset(args.out, demos, args.task, args.split, args.seed, args.num, failed, cfg)
    print(f"wrote {len(demos)}/{args.num} episodes to {args.out}")
    if failed:
        print(f"expert failed on {len(failed)} episode(s); dataset flagged partial", file=sys.stderr)
        return 2
    return 0


def cmd_train(args) -> int:
    manifest, episodes = pipeline.read_dataset(args.data)
    cfg = _config_for(args, manifest["task"])
    if cfg.task != manifest["task"]:
        raise HGMError("dataset-task-mismatch", f"dataset task {manifest['task']!r} != config {cfg.task!r}")
    if not episodes:
        raise HGMError("empty-dataset", f"{args.data} has no episodes")
    seed = cfg.seed if args.seed is None else args.seed
    cfg.seed = seed
    epochs = cfg.policy.num_epochs if args.epochs is None else args.epochs
    out = Path(args.out)
    bundle, samples = pipeline.build_bundle(cfg, episodes, seed)
    extra = {"dataset": {"task": manifest["task"], "split": manifest["split"], "seed": manifest["seed"],
                         "num_episodes": manifest["num_episodes"]}, "epochs": epochs}
    log = pipeline.TrainLog([])
    try:
        log = pipeline.train(bundle, samples, epochs, seed)
    except HGMError as err:
        if err.code != "diverged":
            raise
        pipeline.save_checkpoint(out, bundle, {**extra, "diverged": True})
        raise
    finally:
        out.mkdir(parents=True, exist_ok=True)
        (out / "loss.csv").write_text(log.to_csv(), encoding="utf-8")
    pipeline.save_checkpoint(out, bundle, extra)
    final = log.rows[-1][1] if log.rows else float("nan")
    print(f"trained {len(log.rows)} steps ({epochs} epochs), final loss {final:.6f}; checkpoint {out}")
    return 0


def cmd_eval(args) -> int:
    bundle, cfg = pipeline.load_checkpoint(args.checkpoint)
    if cfg.task != args.task:
        raise HGMError("checkpoint-task-mismatch", f"checkpoint trained on {cfg.task!r}, asked for {args.task!r}")
    if args.variant and args.variant != cfg.variant:
        raise HGMError("checkpoint-variant-mismatch",
                       f"checkpoint holds variant {cfg.variant!r}; train a {args.variant!r} checkpoint")
    workers = worker_count()
    COUNTERS.reset()
    runs = []
    hist = {"grasp": 0, "move": 0, "final": 0}
    for r in range(args.runs):
        seed = args.seed + 1000 * r
        rate, results = pipeline.evaluate_bundle(bundle, cfg, args.split, args.episodes, seed, workers)
        for res in results:
            if res.failure_stage:
                hist[res.failure_stage] += 1
        runs.append({"seed": seed, "success_rate": rate, "episodes": [x.to_json() for x in results]})
        print(f"run {r}: seed={seed} success_rate={rate:.4f}")
    rates = np.array([x["success_rate"] for x in runs], dtype=np.float64)
    mean = float(rates.mean()) if len(rates) else 0.0
    std = float(rates.std()) if len(rates) else 0.0
    print(f"success_rate mean={mean:.4f} std={std:.4f} over {args.runs} run(s)")
    print("failure stages: " + ", ".join(f"{k}={v}" for k, v in hist.items()))
    print(f"coord_attention_calls={COUNTERS.coord_attention_calls}")
    report = {
        "task": args.task, "split": args.split, "variant": cfg.variant, "episodes": args.episodes,
        "seed": args.seed, "runs": runs, "mean": mean, "std": std, "failure_stages": hist,
        "coord_attention_calls": COUNTERS.coord_attention_calls,
    }
    path = Path(args.report) if args.report else \
        Path(args.checkpoint) / f"eval-{args.split}-{cfg.variant}-seed{args.seed}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(io.dump_json(report), encoding="utf-8")
    print(f"report {path}")
    return 0


def cmd_grasp(args) -> int:
    ann = io.read_annotation(args.demo_annotation)
    target = io.read_cloud(args.target_cloud)
    _, match = locate_manipulation_point(ann, target)
    pose = plan_grasp(ann, target)
    out = {"matched_index": match.target_index, "score": match.score,
           "runner_up_score": match.runner_up_score, "grasp": pose.to_json()}
    print(io.dump_json(out), end="")
    if args.out:
        flag = np.zeros(len(target), dtype=np.int32)
        flag[match.target_index] = 1
        io.write_cloud(args.out, target.with_payload("match", flag), {"grasp": out})
    return 0


def cmd_export_cloud(args) -> int:
    cfg = _config_for(args, args.task)
    scene, state = make_task(args.task, args.split, args.seed)
    cloud = state.operated if args.role == "operated" else state.background
    feats = pipeline.object_features(cfg, args.role, cloud)
    io.write_cloud(args.out, cloud.with_payload("features", feats),
                   {"task": args.task, "split": args.split, "seed": args.seed, "role": args.role})
    print(f"wrote {len(cloud)} points to {args.out}")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hgm", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-demos", help="write scripted-expert demonstrations")
    g.add_argument("--task", required=True, choices=sorted(TASKS))
    g.add_argument("--split", default="train", choices=SPLITS)
    g.add_argument("--num", type=int, default=50)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_demos)

    t = sub.add_parser("train", help="train a policy bundle from a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint in the simulator")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", required=True, choices=sorted(TASKS))
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--episodes", type=int, default=50)
    e.add_argument("--runs", type=int, default=3)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--variant", choices=VARIANTS)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("grasp", help="plan a grasp on a target cloud from a demo annotation")
    q.add_argument("--demo-annotation", required=True)
    q.add_argument("--target-cloud", required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_grasp)

    x = sub.add_parser("export-cloud", help="write a scene object's initial cloud with provider features")
    x.add_argument("--task", required=True, choices=sorted(TASKS))
    x.add_argument("--split", default="test", choices=SPLITS)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--role", default="operated", choices=("operated", "background"))
    x.add_argument("--variant", choices=VARIANTS)
    x.add_argument("--config")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_cloud)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("num", "episodes", "runs", "epochs"):
        if getattr(args, name, None) is not None and getattr(args, name) < 0:
            print(f"hgm: error: --{name} must be non-negative", file=sys.stderr)
            return 1
    try:
        return args.func(args)
    except HGMError as err:
        print(f"hgm: error: {err}", file=sys.stderr)
        return 2 if err.code in RUNTIME_CODES else 1
    except OSError as err:
        print(f"hgm: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
