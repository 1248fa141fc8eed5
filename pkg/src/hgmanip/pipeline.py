"""End-to-end glue: demonstration datasets, descriptor preparation, training,
checkpoints, and the policy agent driven by the simulator's evaluator."""
from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from . import io
from .config import ROLES, TaskConfig
from .correspondence import DemoAnnotation, plan_grasp
from .errors import HGMError
from .features import (ObjectCategory, PcaModel, default_providers, descriptor_route, fit_pca,
                       semantic_part)
from .geometry import GraspPose, PointCloud, Rotation3, fps_indices
from .policy import (ActionStats, NoiseSchedule, ObsStats, PolicyBundle, PolicyModel, build_condition,
                     ddim_sample, normalize_actions, Observation, train_step)
from .simenv import (Agent, Demonstration, Scene, SimState, evaluate, global_cloud, make_task,
                     scripted_expert)

TOKEN_FPS_SEED = 0
ANCHOR_FPS_SEED = 0
RIGID_PROVIDER = "rigid-synth"


# ------------------------------------------------------------------- datasets

@dataclass
class Episode:
    """One demonstration as stored on disk (float32 round trip)."""

    seed: int
    operated0: PointCloud          # initial operated cloud with payloads
    background0: PointCloud
    operated_points: np.ndarray    # (T+1, No, 3)
    background_points: np.ndarray  # (T+1, Nb, 3)
    global_clouds: np.ndarray      # (T+1, P, 3)
    joints: np.ndarray             # (T+1, J)
    actions: np.ndarray            # (T, A)
    grasp_step: int
    manip_index: int
    reference_indices: tuple[int, ...]
    grasp_orientation: Rotation3
    success: bool


def generate_demos(task: str, split: str, num: int, seed: int,
                   on_episode: Callable[[int, bool], None] | None = None):
    """Scripted-expert demos for seeds ``seed..seed+num-1``; returns (demos, failed seeds)."""
    demos, failed = [], []
    for i in range(num):
        scene, state = make_task(task, split, seed + i)
        try:
            demos.append(scripted_expert(scene, state))
            ok = True
        except HGMError as err:
            if err.code != "expert-failed":
                raise
            failed.append(seed + i)
            ok = False
        if on_episode is not None:
            on_episode(seed + i, ok)
    return demos, failed


def _payload_stack(clouds: Sequence[PointCloud], prefix: str) -> dict[str, np.ndarray]:
    if not clouds:
        return {}
    return {f"{prefix}.payload.{name}": np.stack([c.payloads[name] for c in clouds])
            for name in clouds[0].payloads}


def demos_to_arrays(demos: Sequence[Demonstration], n_points: int = 128) -> dict[str, np.ndarray]:
    s_off, a_off = [0], [0]
    clouds, joints, op_pts, bg_pts, actions = [], [], [], [], []
    for d in demos:
        for st in d.states:
            clouds.append(global_cloud(st, n_points))
            joints.append(st.joint_state)
            op_pts.append(st.operated.points)
            bg_pts.append(st.background.points)
        actions.extend(d.actions)
        s_off.append(s_off[-1] + len(d.states))
        a_off.append(a_off[-1] + len(d.actions))
    E = len(demos)
    refs = max((len(d.scene.operated.reference_indices) for d in demos), default=0)

    def stack(rows, shape):
        return np.stack(rows) if rows else np.zeros(shape)

    arrays = {
        "state_offsets": np.array(s_off, dtype=np.int32),
        "action_offsets": np.array(a_off, dtype=np.int32),
        "global_clouds": stack(clouds, (0, n_points, 3)),
        "joints": stack(joints, (0, 4)),
        "operated_points": stack(op_pts, (0, 0, 3)),
        "background_points": stack(bg_pts, (0, 0, 3)),
        "actions": stack(actions, (0, 4)),
        "grasp_steps": np.array([d.grasp_step for d in demos], dtype=np.int32),
        "seeds": np.array([d.scene.seed for d in demos], dtype=np.int32),
        "success": np.array([int(d.success) for d in demos], dtype=np.int32),
        "manip_index": np.array([d.scene.operated.manip_index for d in demos], dtype=np.int32),
        "reference_indices": np.array([list(d.scene.operated.reference_indices) for d in demos],
                                      dtype=np.int32).reshape(E, refs),
        "grasp_orientation": stack([d.grasp_orientation.as_array() for d in demos], (0, 4)),
    }
    arrays.update(_payload_stack([d.states[0].operated for d in demos], "operated"))
    arrays.update(_payload_stack([d.states[0].background for d in demos], "background"))
    return arrays


def write_dataset(out, demos: Sequence[Demonstration], task: str, split: str, seed: int,
                  num_requested: int, failed: Sequence[int], cfg: TaskConfig) -> None:
    manifest = {
        "kind": "dataset",
        "task": task,
        "split": split,
        "seed": seed,
        "num_episodes": len(demos),
        "num_requested": num_requested,
        "partial": bool(failed),
        "failed_seeds": list(failed),
        "config": cfg.task_echo(),
    }
    io.write_manifest_dir(out, manifest, demos_to_arrays(demos, cfg.policy.n_points))
    if demos:
        write_demo_annotation(Path(out) / "annotation", demos[0], cfg)


def _cloud_from(arrays: Mapping[str, np.ndarray], prefix: str, e: int, points: np.ndarray) -> PointCloud:
    tag = f"{prefix}.payload."
    payloads = {}
    for k, v in arrays.items():
        if k.startswith(tag):
            row = v[e]
            payloads[k[len(tag):]] = row.astype(np.float64) if row.dtype.kind == "f" else row
    return PointCloud(points.astype(np.float64), payloads)


def read_dataset(directory) -> tuple[dict, list[Episode]]:
    manifest, a = io.read_manifest_dir(directory)
    if manifest.get("kind") != "dataset":
        raise HGMError("bad-dataset", f"{directory}: not a dataset manifest")
    so, ao = a["state_offsets"], a["action_offsets"]
    episodes = []
    for e in range(int(manifest["num_episodes"])):
        s0, s1, a0, a1 = so[e], so[e + 1], ao[e], ao[e + 1]
        op_pts = a["operated_points"][s0:s1].astype(np.float64)
        bg_pts = a["background_points"][s0:s1].astype(np.float64)
        episodes.append(Episode(
            seed=int(a["seeds"][e]),
            operated0=_cloud_from(a, "operated", e, op_pts[0]),
            background0=_cloud_from(a, "background", e, bg_pts[0]),
            operated_points=op_pts,
            background_points=bg_pts,
            global_clouds=a["global_clouds"][s0:s1].astype(np.float64),
            joints=a["joints"][s0:s1].astype(np.float64),
            actions=a["actions"][a0:a1].astype(np.float64),
            grasp_step=int(a["grasp_steps"][e]),
            manip_index=int(a["manip_index"][e]),
            reference_indices=tuple(int(i) for i in a["reference_indices"][e]),
            grasp_orientation=Rotation3.from_array(a["grasp_orientation"][e]),
            success=bool(a["success"][e]),
        ))
    return manifest, episodes


def episode_from_demo(d: Demonstration, n_points: int = 128) -> Episode:
    """In-memory equivalent of a stored episode, without the float32 round trip."""
    st = d.states
    return Episode(
        seed=d.scene.seed,
        operated0=st[0].operated,
        background0=st[0].background,
        operated_points=np.stack([s.operated.points for s in st]),
        background_points=np.stack([s.background.points for s in st]),
        global_clouds=np.stack([global_cloud(s, n_points) for s in st]),
        joints=np.stack([s.joint_state for s in st]),
        actions=np.asarray(d.actions, dtype=np.float64),
        grasp_step=d.grasp_step,
        manip_index=d.scene.operated.manip_index,
        reference_indices=tuple(d.scene.operated.reference_indices),
        grasp_orientation=d.grasp_orientation,
        success=d.success,
    )


# --------------------------------------------------------------- descriptors

def role_provider(cfg: TaskConfig, role: str) -> str:
    return RIGID_PROVIDER if cfg.variant == "no-mfm" else cfg.entry(role).provider


def role_route(cfg: TaskConfig, role: str) -> str:
    return "pca" if cfg.variant == "no-mfm" else descriptor_route(cfg.entry(role).category)


def make_providers(cfg: TaskConfig) -> dict:
    return default_providers(cfg.noise_sigma, cfg.embed_dim)


def object_features(cfg: TaskConfig, role: str, cloud: PointCloud, providers=None) -> np.ndarray:
    providers = providers or make_providers(cfg)
    pid = role_provider(cfg, role)
    if pid not in providers:
        raise HGMError("no-provider", pid)
    return providers[pid].compute(cloud)


def annotation_for(cfg: TaskConfig, ep: Episode, providers=None) -> DemoAnnotation:
    feats = object_features(cfg, "operated", ep.operated0, providers)
    category = cfg.entry("operated").category
    return DemoAnnotation(
        demo_cloud=ep.operated0.with_payload("features", feats),
        manipulation_index=ep.manip_index,
        reference_indices=ep.reference_indices,
        category=category,
        grasp_orientation=ep.grasp_orientation,
        fixed_orientation=Rotation3.identity() if category is ObjectCategory.DEFORMABLE else None,
    )


def write_demo_annotation(directory, demo: Demonstration, cfg: TaskConfig) -> None:
    io.write_annotation(directory, annotation_for(cfg, episode_from_demo(demo, cfg.policy.n_points)))


@dataclass
class DescriptorContext:
    """Per-role provider features reduced to token semantics, plus fitted contexts."""

    contexts: dict      # role -> PcaModel | anchor matrix
    routes: dict        # role -> route name
    providers: dict     # role -> provider id


def fit_contexts(cfg: TaskConfig, episodes: Sequence[Episode], providers=None) -> DescriptorContext:
    providers = providers or make_providers(cfg)
    routes = {r: role_route(cfg, r) for r in ROLES}
    pids = {r: role_provider(cfg, r) for r in ROLES}
    feats = {r: [object_features(cfg, r, _initial(ep, r), providers) for ep in episodes] for r in ROLES}
    contexts: dict = {}
    pca_rows = [f for r in ROLES if routes[r] == "pca" for f in feats[r]]
    if pca_rows:
        model = fit_pca(np.concatenate(pca_rows, axis=0), cfg.pca_dim)
        for r in ROLES:
            if routes[r] == "pca":
                contexts[r] = model
    for r in ROLES:
        if routes[r] == "anchor-similarity":
            if not episodes:
                raise HGMError("missing-context", "anchors need at least one demonstration")
            pts = _initial(episodes[0], r).points
            contexts[r] = feats[r][0][fps_indices(pts, cfg.num_anchors, ANCHOR_FPS_SEED)]
    return DescriptorContext(contexts, routes, pids)


def _initial(ep: Episode, role: str) -> PointCloud:
    return ep.operated0 if role == "operated" else ep.background0


class DescriptorTracker:
    """Features computed once on the initial clouds; coordinates refreshed per step."""

    def __init__(self, cfg: TaskConfig, ctx: DescriptorContext, operated0: PointCloud,
                 background0: PointCloud, providers=None):
        self.tokens, self.semantic = {}, {}
        for role, cloud in (("operated", operated0), ("background", background0)):
            feats = object_features(cfg, role, cloud, providers)
            idx = fps_indices(cloud.points, cfg.num_tokens, TOKEN_FPS_SEED)
            self.tokens[role] = idx
            self.semantic[role] = semantic_part(feats[idx], ctx.routes[role], ctx.contexts[role])

    def descriptors(self, role: str, points: np.ndarray) -> np.ndarray:
        return np.concatenate([self.semantic[role], points[self.tokens[role]]], axis=1)


def descriptor_widths(cfg: TaskConfig, ctx: DescriptorContext) -> dict[str, int]:
    out = {}
    for r in ROLES:
        c = ctx.contexts[r]
        out[r] = (c.k if isinstance(c, PcaModel) else np.asarray(c).shape[0]) + 3
    return out


# ------------------------------------------------------------------ training

def policy_start(cfg: TaskConfig, ep: Episode) -> int:
    """First state the policy controls: after the grasp unless stage 1 is disabled."""
    return 0 if cfg.variant == "no-cg" else ep.grasp_step


def build_samples(cfg: TaskConfig, ctx: DescriptorContext, episodes: Sequence[Episode],
                  providers=None) -> dict[str, np.ndarray]:
    pc = cfg.policy
    H, n_obs = pc.horizon, pc.n_obs_steps
    out = {k: [] for k in ("clouds", "joints", "operated", "background", "actions")}
    for ep in episodes:
        tracker = DescriptorTracker(cfg, ctx, ep.operated0, ep.background0, providers)
        start, T = policy_start(cfg, ep), len(ep.actions)
        for s in range(start, T):
            win = [max(start, s - n_obs + 1 + j) for j in range(n_obs)]
            out["clouds"].append(ep.global_clouds[win])
            out["joints"].append(ep.joints[win])
            out["operated"].append(tracker.descriptors("operated", ep.operated_points[s]))
            out["background"].append(tracker.descriptors("background", ep.background_points[s]))
            idx = np.minimum(np.arange(s, s + H), T - 1)  # pad past the end with the last action
            out["actions"].append(ep.actions[idx])
    if not out["actions"]:
        raise HGMError("empty-dataset", "no training samples")
    return {k: np.stack(v) for k, v in out.items()}


def build_bundle(cfg: TaskConfig, episodes: Sequence[Episode], seed: int | None = None):
    """Fit contexts and statistics and initialise an untrained bundle; returns (bundle, samples)."""
    seed = cfg.seed if seed is None else seed
    providers = make_providers(cfg)
    ctx = fit_contexts(cfg, episodes, providers)
    samples = build_samples(cfg, ctx, episodes, providers)
    stats = ActionStats.fit(samples["actions"])
    obs_stats = ObsStats.fit(samples["clouds"], samples["joints"], samples["operated"],
                             samples["background"]) if cfg.policy.normalize_obs else None
    widths = descriptor_widths(cfg, ctx)
    model = PolicyModel(cfg.policy, cfg.fusion, widths["operated"], widths["background"], seed=seed)
    bundle = PolicyBundle(
        config=cfg.policy, fusion_config=cfg.fusion, model=model,
        schedule=NoiseSchedule(cfg.policy.num_train_timesteps), stats=stats,
        contexts=ctx.contexts, routes=ctx.routes, providers=ctx.providers,
        annotation=annotation_for(cfg, episodes[0], providers) if cfg.variant != "no-cg" else None,
        task=cfg.to_json(), variant=cfg.variant, obs_stats=obs_stats,
    )
    samples["actions"] = normalize_actions(samples["actions"], stats)
    return bundle, samples


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]]

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in self.rows:
            w.writerow([step, repr(float(loss)), repr(float(lr))])
        return buf.getvalue()

    def epoch_means(self, steps_per_epoch: int) -> list[float]:
        losses = [r[1] for r in self.rows]
        return [float(np.mean(losses[i:i + steps_per_epoch])) for i in range(0, len(losses), steps_per_epoch)]


def train(bundle: PolicyBundle, samples: Mapping[str, np.ndarray], epochs: int, seed: int,
          on_step: Callable[[int, float, float], None] | None = None) -> TrainLog:
    pc = bundle.config
    n = len(samples["actions"])
    B = min(pc.batch_size, n)
    per_epoch = -(-n // B)
    sched = dc.LrSchedule(max(1, epochs * per_epoch), pc.lr, pc.lr_warmup_steps)
    rng = np.random.default_rng(seed)
    f = dc.default_dtype()
    cast = {k: np.asarray(v, dtype=f) for k, v in samples.items()}
    log = TrainLog([])
    ema = dc.Ema(bundle.model.store, pc.ema_power) if pc.ema_power > 0 else None
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = np.sort(order[b * B:(b + 1) * B])
            batch = {k: v[idx] for k, v in cast.items()}
            loss = train_step(batch, bundle, rng, sched)
            if ema is not None:
                ema.update()
            step = bundle.model.store.step
            lr = dc.lr_at(sched, step)
            log.rows.append((step, loss, lr))
            if on_step is not None:
                on_step(step, loss, lr)
    if ema is not None:
        ema.copy_to_store()  # inference uses the averaged weights
    return log


def train_from_episodes(cfg: TaskConfig, episodes: Sequence[Episode], epochs: int, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    bundle, samples = build_bundle(cfg, episodes, seed)
    log = train(bundle, samples, epochs, seed)
    return bundle, log


# -------------------------------------------------------------- checkpoints

def save_checkpoint(out, bundle: PolicyBundle, extra: Mapping | None = None) -> None:
    arrays = {f"param.{name}": p.data for name, p in bundle.model.store.params.items()}
    contexts = {}
    for role, c in bundle.contexts.items():
        if isinstance(c, PcaModel):
            arrays[f"context.{role}.mean"] = c.mean
            arrays[f"context.{role}.components"] = c.components
            contexts[role] = "pca"
        else:
            arrays[f"context.{role}.anchors"] = np.asarray(c)
            contexts[role] = "anchors"
    arrays["stats.low"] = bundle.stats.low
    arrays["stats.high"] = bundle.stats.high
    if bundle.obs_stats is not None:
        for part in ("xyz", "joints"):
            st = getattr(bundle.obs_stats, part)
            arrays[f"obs.{part}.low"], arrays[f"obs.{part}.high"] = st.low, st.high
    manifest = {
        "kind": "checkpoint",
        "config": bundle.task,
        "variant": bundle.variant,
        "routes": bundle.routes,
        "providers": bundle.providers,
        "contexts": contexts,
        "optimizer_step": bundle.model.store.step,
        "stats": {"low": [float(x) for x in np.asarray(bundle.stats.low, dtype=np.float32)],
                  "high": [float(x) for x in np.asarray(bundle.stats.high, dtype=np.float32)]},
        **(dict(extra) if extra else {}),
    }
    if bundle.annotation is not None:
        manifest["annotation"] = io.annotation_to_json(bundle.annotation)
        arrays.update(io.cloud_arrays(bundle.annotation.demo_cloud, prefix="annotation."))
    io.write_manifest_dir(out, manifest, arrays)


def load_checkpoint(directory) -> tuple[PolicyBundle, TaskConfig]:
    manifest, a = io.read_manifest_dir(directory)
    if manifest.get("kind") != "checkpoint":
        raise HGMError("bad-checkpoint", f"{directory}: not a checkpoint manifest")
    cfg = TaskConfig.from_json(manifest["config"])
    contexts = {}
    for role, kind in manifest["contexts"].items():
        if kind == "pca":
            contexts[role] = PcaModel(a[f"context.{role}.mean"].astype(np.float64),
                                      a[f"context.{role}.components"].astype(np.float64))
        else:
            contexts[role] = a[f"context.{role}.anchors"].astype(np.float64)
    widths = {}
    for r in ROLES:
        c = contexts[r]
        widths[r] = (c.k if isinstance(c, PcaModel) else c.shape[0]) + 3
    model = PolicyModel(cfg.policy, cfg.fusion, widths["operated"], widths["background"], seed=cfg.seed)
    for name, p in model.store.params.items():
        key = f"param.{name}"
        if key not in a or a[key].shape != p.data.shape:
            raise HGMError("bad-checkpoint", f"parameter {name} missing or mis-shaped")
        p.data[...] = a[key]
    model.store.step = int(manifest.get("optimizer_step", 0))
    obs_stats = None
    if "obs.xyz.low" in a:
        obs_stats = ObsStats(*[ActionStats(a[f"obs.{part}.low"].astype(np.float64),
                                           a[f"obs.{part}.high"].astype(np.float64))
                               for part in ("xyz", "joints")])
    annotation = None
    if "annotation" in manifest:
        annotation = io.annotation_from_json(manifest["annotation"],
                                             io.cloud_from_arrays(a, prefix="annotation."))
    bundle = PolicyBundle(
        config=cfg.policy, fusion_config=cfg.fusion, model=model,
        schedule=NoiseSchedule(cfg.policy.num_train_timesteps),
        stats=ActionStats(a["stats.low"].astype(np.float64), a["stats.high"].astype(np.float64)),
        contexts=contexts, routes=manifest["routes"], providers=manifest["providers"],
        annotation=annotation, task=manifest["config"], variant=manifest["variant"], obs_stats=obs_stats,
    )
    return bundle, cfg


# -------------------------------------------------------------------- agent

class PolicyAgent(Agent):
    """Correspondence grasp (unless disabled) followed by receding-horizon DDIM sampling."""

    def __init__(self, bundle: PolicyBundle, cfg: TaskConfig, sample_seed: int = 0):
        self.bundle, self.cfg = bundle, cfg
        self.uses_grasp_stage = cfg.variant != "no-cg"
        self.n_obs_steps = bundle.config.n_obs_steps
        self.n_action_steps = bundle.config.n_action_steps
        self.sample_seed = sample_seed
        self.providers = make_providers(cfg)
        self.ctx = DescriptorContext(bundle.contexts, bundle.routes, bundle.providers)
        self.tracker: DescriptorTracker | None = None
        self.calls = 0
        self.episode_seed = 0

    def reset(self, scene: Scene, state: SimState) -> None:
        self.tracker = DescriptorTracker(self.cfg, self.ctx, state.operated, state.background, self.providers)
        self.calls = 0
        self.episode_seed = scene.seed

    def plan_grasp(self, scene: Scene, state: SimState) -> GraspPose:
        feats = object_features(self.cfg, "operated", state.operated, self.providers)
        return plan_grasp(self.bundle.annotation, state.operated.with_payload("features", feats))

    def observation(self, state: SimState) -> Observation:
        t = self.tracker
        return Observation(global_cloud(state, self.bundle.config.n_points), state.joint_state,
                           t.descriptors("operated", state.operated.points),
                           t.descriptors("background", state.background.points))

    def sample(self, window: Sequence[SimState]) -> np.ndarray:
        cond = build_condition([self.observation(s) for s in window], self.bundle)
        seed = int(np.random.SeedSequence([self.sample_seed, self.episode_seed, self.calls]).generate_state(1)[0])
        self.calls += 1
        return ddim_sample(cond, self.bundle, seed=seed)


def evaluate_bundle(bundle: PolicyBundle, cfg: TaskConfig, split: str, episodes: int, seed: int,
                    workers: int = 1):
    return evaluate(lambda: PolicyAgent(bundle, cfg, sample_seed=seed), cfg.task, split, episodes, seed,
                    workers=workers)
