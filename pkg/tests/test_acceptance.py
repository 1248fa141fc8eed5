"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 train full policies and take hours on a single core.
"""
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from hypothesis import given, settings, strategies as st

from hgmanip import diffcore as dc
from hgmanip import pipeline
from hgmanip.cli import main
from hgmanip.config import default_config
from hgmanip.correspondence import DemoAnnotation, locate_manipulation_point, match_point, plan_grasp
from hgmanip.features import ObjectCategory, SyntheticRigidProvider
from hgmanip.fusion import FusionConfig, FusionModule
from hgmanip.geometry import Rotation3, apply_transform
from hgmanip.io import dump_json
from hgmanip.policy import (ActionStats, NoiseSchedule, Observation, PolicyBundle, PolicyConfig, PolicyModel,
                            build_condition, ddim_sample_normalized, denormalize_actions,
                            normalize_actions)
from hgmanip.simenv import TASKS, make_mug

from gradcases import cases, gradcheck

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))
from run_end_to_end import run as run_experiment  # noqa: E402


def report(n, ok, detail):
    print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


def featurize(cloud, noise):
    return cloud.with_payload("features", SyntheticRigidProvider(noise_sigma=noise).compute(cloud))


def random_mug(rng, center=(0, 0, 0), yaw=0.0):
    lo = {k: min(TASKS["place-synth"].shape_ranges[s][k][0] for s in ("train", "test"))
          for k in ("mug_radius", "mug_height", "mug_handle")}
    hi = {k: max(TASKS["place-synth"].shape_ranges[s][k][1] for s in ("train", "test")) for k in lo}
    return make_mug(*(rng.uniform(lo[k], hi[k]) for k in ("mug_radius", "mug_height", "mug_handle")), center, yaw)


def random_rotation(rng):
    return Rotation3.from_array(rng.normal(size=4))


# ---------------------------------------------------------------- criterion 1

def test_criterion_1_correspondence_accuracy():
    rng = np.random.default_rng(2024)
    demo = make_mug(0.0375, 0.085, 0.0275, (0, 0, 0), 0.0)
    hits, seconds = {}, {}
    for noise in (0.01, 0.0):
        t0 = time.perf_counter()
        ann = DemoAnnotation(featurize(demo.cloud, noise), demo.manip_index, demo.reference_indices,
                             ObjectCategory.RIGID)
        ok = 0
        for _ in range(1000):
            obj = random_mug(rng)
            R, t = random_rotation(rng), rng.uniform(-0.5, 0.5, size=3)
            target = featurize(apply_transform(obj.cloud, R, t), noise)
            p, _ = locate_manipulation_point(ann, target)
            ok += np.linalg.norm(p - target.points[obj.manip_index]) <= 0.01
        hits[noise] = ok / 1000
        seconds[noise] = time.perf_counter() - t0
    passed = hits[0.01] >= 0.99 and hits[0.0] == 1.0 and max(seconds.values()) < 10.0
    assert report(1, passed, f"1000 scenes each: noise 0.01 hit rate {hits[0.01]:.3f} in {seconds[0.01]:.2f}s, "
                             f"noise 0 hit rate {hits[0.0]:.3f} in {seconds[0.0]:.2f}s")


# ---------------------------------------------------------------- criterion 2

def test_criterion_2_grasp_equivariance():
    rng = np.random.default_rng(7)
    demo = make_mug(0.0375, 0.085, 0.0275, (0, 0, 0), 0.0)
    demo_orient = Rotation3.from_axis_angle([1, 0, 0], np.pi) * Rotation3.from_axis_angle([0, 0, 1], 0.3)
    ann = DemoAnnotation(featurize(demo.cloud, 0.0), demo.manip_index, demo.reference_indices,
                         ObjectCategory.RIGID, demo_orient)
    worst_pos, worst_deg = 0.0, 0.0
    for i in range(100):
        # positions under arbitrary rigid motions, orientations under tabletop (yaw) motions
        R = random_rotation(rng) if i % 2 else Rotation3.from_axis_angle([0, 0, 1], rng.uniform(-np.pi, np.pi))
        t = rng.uniform(-0.5, 0.5, size=3)
        pose = plan_grasp(ann, featurize(apply_transform(demo.cloud, R, t), 0.0))
        truth = R.apply(demo.cloud.points[demo.manip_index]) + t
        worst_pos = max(worst_pos, float(np.linalg.norm(pose.position - truth)))
        if i % 2 == 0:
            worst_deg = max(worst_deg, float(np.degrees(pose.orientation.angle_to(R * demo_orient))))
    passed = worst_pos <= 1e-4 and worst_deg <= 2.0
    assert report(2, passed, f"worst position error {worst_pos:.2e} m, worst orientation error {worst_deg:.2e} deg")


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_gradient_checks():
    worst = {}
    for seed in range(20):
        for name, build, arrays in cases(seed):
            worst[name] = max(worst.get(name, 0.0), gradcheck(build, arrays))
    bad = {k: v for k, v in worst.items() if v > 1e-3}
    assert report(3, not bad, f"{len(worst)} primitives x 20 instances, worst relative error "
                              f"{max(worst.values()):.2e}" + (f", failing {sorted(bad)}" if bad else ""))


# ---------------------------------------------------------------- criterion 4

def overfit_one_demo(steps=12000):
    """Fit a small policy to one demo's windows; returns (rms error, max error, final loss) of DDIM samples."""
    demos, _ = pipeline.generate_demos("place-synth", "train", 1, 0)
    cfg = default_config("place-synth")
    cfg.policy.denoiser_widths = (256, 256)
    cfg.policy.lr = 1e-3
    cfg.policy.lr_warmup_steps = 20
    bundle, samples = pipeline.build_bundle(cfg, [pipeline.episode_from_demo(demos[0])], 0)
    log = pipeline.train(bundle, samples, steps, 0)  # one batch per epoch
    b = bundle.obs_stats.apply({k: np.asarray(v, np.float32) for k, v in samples.items()})
    with dc.no_grad():
        cond = bundle.model.condition(b["clouds"], b["joints"], b["operated"], b["background"])
    x0 = ddim_sample_normalized(cond, bundle.model.predict_eps, bundle.schedule, b["actions"].shape,
                                cfg.policy.num_inference_steps, seed=0)
    diff = x0 - samples["actions"]  # both in normalized units
    return (float(np.sqrt(np.mean(diff ** 2))), float(np.max(np.abs(diff))),
            float(np.mean([r[1] for r in log.rows[-50:]])))


def test_criterion_4_ddim_algebra():
    s = NoiseSchedule()
    shape = (4, 8, 4)
    x0 = ddim_sample_normalized(None, lambda x, t, c: np.zeros_like(x), s, shape, 10, seed=11)
    xT = np.random.default_rng(11).standard_normal(shape)
    zero_err = float(np.max(np.abs(x0 - xT / np.sqrt(s.alpha_bar[91]))))
    rms, worst, loss = overfit_one_demo()
    passed = zero_err <= 1e-5 and rms <= 0.05
    assert report(4, passed, f"zero denoiser error {zero_err:.1e}; overfit denoiser (final loss {loss:.4f}) "
                             f"chunk error rms {rms:.4f}, max {worst:.4f} normalized units")


# ---------------------------------------------------------------- criteria 5, 6

EXPERIMENTS = {}


# The ablation comparison trains every variant with lr 1e-3: at the default lr the
# 300-epoch budget leaves all variants under-trained and the comparison measures noise.
ABLATION_OVERRIDES = ("policy.lr=1e-3",)


def experiment(task, variant, splits, epochs=300, overrides=()):
    key = (task, variant, epochs, tuple(overrides))
    have = EXPERIMENTS.get(key)
    if have is None or not set(splits) <= set(have["splits"]):
        need = tuple(sorted(set(splits) | set(have["splits"] if have else ())))
        EXPERIMENTS[key] = run_experiment(task, variant, epochs, num_demos=50, episodes=50, runs=3, seed=42,
                                          demo_seed=0, splits=need, workers=os.cpu_count() or 1, verbose=True,
                                          overrides=overrides)
    return EXPERIMENTS[key]


def test_criterion_5_end_to_end_learning():
    r = experiment("place-synth", "full", ("train", "test"))
    tr, te = r["splits"]["train"], r["splits"]["test"]
    minutes = r["total_seconds"] / 60
    passed = tr["mean"] >= 0.80 and te["mean"] >= 0.60 and minutes <= 45
    assert report(5, passed, f"train {tr['mean']:.3f} +- {tr['std']:.3f}, test {te['mean']:.3f} +- {te['std']:.3f}, "
                             f"{minutes:.1f} min on {os.cpu_count()} core(s)")


def test_criterion_6_ablation_direction(tmp_path):
    lines, tasks_ok = [], 0
    for task in ("place-synth", "hang-synth", "stack-synth"):
        full = experiment(task, "full", ("test",), overrides=ABLATION_OVERRIDES)["splits"]["test"]["mean"]
        lower = {}
        for v in ("no-cg", "no-pe", "no-mfm"):
            lower[v] = experiment(task, v, ("test",), overrides=ABLATION_OVERRIDES)["splits"]["test"]["mean"]
        ok = all(x < full for x in lower.values())
        tasks_ok += ok
        lines.append(f"{task}: full {full:.3f} " + " ".join(f"{k} {x:.3f}" for k, x in lower.items()))
    # wiring check: the no-PE variant must never call coordinate attention
    demos = tmp_path / "d"
    cfg = default_config("place-synth", "no-pe")
    cfg.policy.denoiser_widths = (64, 64)
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(dump_json(cfg.to_json()))
    assert main(["gen-demos", "--task", "place-synth", "--num", "2", "--out", str(demos)]) == 0
    assert main(["train", "--data", str(demos), "--config", str(cfg_path), "--epochs", "1",
                 "--out", str(tmp_path / "ck")]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "ck"), "--task", "place-synth", "--variant", "no-pe",
                 "--episodes", "2", "--runs", "1", "--report", str(tmp_path / "r.json")]) == 0
    calls = json.loads((tmp_path / "r.json").read_text())["coord_attention_calls"]
    passed = tasks_ok >= 2 and calls == 0
    assert report(6, passed, f"{tasks_ok}/3 tasks with every ablation strictly below full; no-PE coordinate "
                             f"attention calls {calls}; " + "; ".join(lines))


# ---------------------------------------------------------------- criterion 7

def tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(Path(d).rglob("*")) if p.is_file()}


def test_criterion_7_determinism(tmp_path):
    assert main(["gen-demos", "--task", "place-synth", "--num", "4", "--seed", "1", "--out",
                 str(tmp_path / "demos")]) == 0
    ckpts, reports = [], []
    for run in ("a", "b"):
        ck = tmp_path / f"ck-{run}"
        assert main(["train", "--data", str(tmp_path / "demos"), "--epochs", "2", "--seed", "5",
                     "--out", str(ck)]) == 0
        rep = tmp_path / f"report-{run}.json"
        assert main(["eval", "--checkpoint", str(ck), "--task", "place-synth", "--episodes", "3",
                     "--runs", "2", "--seed", "8", "--report", str(rep)]) == 0
        ckpts.append(tree_bytes(ck))
        reports.append(rep.read_bytes())
    same_ckpt, same_report = ckpts[0] == ckpts[1], reports[0] == reports[1]
    assert report(7, same_ckpt and same_report, f"checkpoint bytes identical: {same_ckpt} "
                                                f"({len(ckpts[0])} files); report bytes identical: {same_report}")


# ---------------------------------------------------------------- criterion 8

def test_criterion_8_invariance_suite():
    worst = {"argmax": 0, "relational": 0.0, "condition": 0.0, "round_trip": 0.0}

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.lists(st.floats(1e-3, 1e3), min_size=20, max_size=20))
    def argmax_under_scaling(seed, scales):
        rng = np.random.default_rng(seed)
        T, q = rng.normal(size=(20, 16)), rng.normal(size=16)
        flipped = match_point(q, T).target_index != match_point(q, T * np.array(scales)[:, None]).target_index
        worst["argmax"] += flipped
        assert not flipped

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def relational_permutation(seed):
        rng = np.random.default_rng(seed)
        m = FusionModule(dc.ParameterStore(seed % 1000), FusionConfig(), 8, 8)
        op, bg = rng.normal(size=(32, 8)), rng.normal(size=(32, 8))
        err = float(np.max(np.abs(m.relational_feature(op, bg[rng.permutation(32)]).data
                                  - m.relational_feature(op, bg).data)))
        worst["relational"] = max(worst["relational"], err)
        assert err <= 1e-6

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def condition_permutation(seed):
        rng = np.random.default_rng(seed)
        cfg, fusion = PolicyConfig(), FusionConfig()
        model = PolicyModel(cfg, fusion, 8, 8, seed=seed % 1000)
        stats = ActionStats(-np.ones(cfg.action_dim), np.ones(cfg.action_dim))
        bundle = PolicyBundle(cfg, fusion, model, NoiseSchedule(), stats)
        window = [Observation(rng.normal(size=(cfg.n_points, 3)), rng.normal(size=cfg.joint_dim),
                              rng.normal(size=(32, 8)), rng.normal(size=(32, 8))) for _ in range(cfg.n_obs_steps)]
        shuffled = [Observation(o.global_cloud[rng.permutation(cfg.n_points)], o.joint_state,
                                o.operated_descriptors, o.background_descriptors) for o in window]
        err = float(np.max(np.abs(build_condition(shuffled, bundle) - build_condition(window, bundle))))
        worst["condition"] = max(worst["condition"], err)
        assert err <= 1e-6

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1e-3, 10.0))
    def normalization_round_trip(seed, spread):
        chunks = np.random.default_rng(seed).normal(scale=spread, size=(16, 8, 4))
        stats = ActionStats.fit(chunks)
        err = float(np.max(np.abs(denormalize_actions(normalize_actions(chunks, stats), stats) - chunks)))
        worst["round_trip"] = max(worst["round_trip"], err)
        assert err <= 1e-6

    failures = []
    for check in (argmax_under_scaling, relational_permutation, condition_permutation, normalization_round_trip):
        try:
            check()
        except AssertionError:
            failures.append(check.__name__)
    assert report(8, not failures, f"argmax flips {worst['argmax']}; relational feature {worst['relational']:.1e}; "
                                   f"condition {worst['condition']:.1e}; round trip {worst['round_trip']:.1e}"
                                   + (f"; failing {failures}" if failures else ""))
