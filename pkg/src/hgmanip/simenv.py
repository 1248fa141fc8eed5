"""Desk-scale synthetic manipulation tasks with a kinematic gripper and scripted expert.

Three tasks cover the interaction taxonomy:

* ``place-synth``  rigid mug -> rigid plate   (place the mug bottom on the plate centre)
* ``hang-synth``   cloth sheet -> rigid line  (hang the collar over a clothesline)
* ``stack-synth``  cloth sheet -> cloth sheet (lay one collar onto the other)

Objects are point clouds on fixed parametric grids, so point identities are
stable across shapes and through time. Every cloud carries ``label`` and
``canonical`` payloads, plus ``nocs`` (rigid, shape-normalised coordinates) or
``uv`` (deformable, intrinsic coordinates).
"""
from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import HGMError
from .features import ObjectCategory
from .geometry import GraspPose, PointCloud, Rotation3, fps_indices

ACTION_CAP = 0.05
EXPERT_SPEED = 0.03
GRASP_RADIUS = 0.02
ORIENTATION_TOLERANCE = np.deg2rad(15.0)
DEFORM_FALLOFF = 0.15
PREGRASP_HEIGHT = 0.08
HOME = np.array([0.0, 0.0, 0.3])
GLOBAL_FPS_SEED = 0


class Label(enum.IntEnum):
    BODY = 0
    HANDLE = 1
    BOTTOM = 2
    PLATE = 3
    RIM = 4
    GOAL = 5
    LINE = 6
    POST = 7
    SHEET = 8
    COLLAR = 9
    SHOULDER = 10
    HEM = 11


# ------------------------------------------------------------------ objects

@dataclass(frozen=True)
class SceneObject:
    cloud: PointCloud          # world frame
    category: ObjectCategory
    rotation: Rotation3        # world-from-object
    manip_index: int = -1
    reference_indices: tuple[int, ...] = ()
    designated_index: int = -1  # operated point judged for success
    goal_index: int = -1        # background goal site
    graspable: np.ndarray | None = None  # bool mask


def _yaw(angle: float) -> Rotation3:
    return Rotation3.from_axis_angle([0.0, 0.0, 1.0], angle)


def _place(canonical: np.ndarray, rotation: Rotation3, center) -> np.ndarray:
    return rotation.apply(canonical) + np.asarray(center, dtype=np.float64)


def make_mug(radius: float, height: float, handle: float, center, yaw: float) -> SceneObject:
    pts, nocs, labels = [], [], []
    thetas = 2 * np.pi * np.arange(16) / 16
    for z in np.linspace(0.0, height, 7):
        for th in thetas:
            pts.append((radius * np.cos(th), radius * np.sin(th), z))
            nocs.append((0.6 * np.cos(th), 0.6 * np.sin(th), 2 * z / height - 1))
            labels.append(Label.BODY)
    ref = 3 * 16 + 8  # theta = pi at z = h/2, opposite the handle
    bottom = len(pts)
    pts.append((0.0, 0.0, 0.0)); nocs.append((0.0, 0.0, -1.0)); labels.append(Label.BOTTOM)
    for th in 2 * np.pi * np.arange(8) / 8:
        pts.append((0.5 * radius * np.cos(th), 0.5 * radius * np.sin(th), 0.0))
        nocs.append((0.3 * np.cos(th), 0.3 * np.sin(th), -1.0))
        labels.append(Label.BOTTOM)
    manip = -1
    for phi in np.linspace(0.0, np.pi, 11):
        for dy in (-0.005, 0.0, 0.005):
            if np.isclose(phi, np.pi / 2) and dy == 0.0:
                manip = len(pts)
            pts.append((radius + handle * np.sin(phi), dy, height / 2 - height / 4 * np.cos(phi)))
            nocs.append((0.6 + 0.4 * np.sin(phi), 10.0 * dy, -0.5 * np.cos(phi)))
            labels.append(Label.HANDLE)
    canonical = np.array(pts)
    labels = np.array(labels, dtype=np.int32)
    rot = _yaw(yaw)
    cloud = PointCloud(_place(canonical, rot, center),
                       {"label": labels, "nocs": np.array(nocs), "canonical": canonical})
    return SceneObject(cloud, ObjectCategory.RIGID, rot, manip_index=manip, reference_indices=(ref,),
                       designated_index=bottom, graspable=labels == Label.HANDLE)


def make_plate(radius: float, center, yaw: float) -> SceneObject:
    surface = 0.01
    pts, nocs, labels = [(0.0, 0.0, surface)], [(0.0, 0.0, -1.0)], [Label.GOAL]
    rings = [(0.15, 8, Label.GOAL, surface, -1.0), (0.3, 8, Label.GOAL, surface, -1.0),
             (0.5, 16, Label.PLATE, surface, -1.0), (0.7, 16, Label.PLATE, surface, -1.0),
             (0.9, 16, Label.PLATE, surface, -1.0), (1.0, 24, Label.RIM, 2 * surface, 1.0)]
    for rho, n, lab, z, nz in rings:
        for th in 2 * np.pi * np.arange(n) / n:
            pts.append((rho * radius * np.cos(th), rho * radius * np.sin(th), z))
            nocs.append((rho * np.cos(th), rho * np.sin(th), nz))
            labels.append(lab)
    canonical = np.array(pts)
    rot = _yaw(yaw)
    cloud = PointCloud(_place(canonical, rot, center),
                       {"label": np.array(labels, dtype=np.int32), "nocs": np.array(nocs),
                        "canonical": canonical})
    return SceneObject(cloud, ObjectCategory.RIGID, rot, goal_index=0)


SHEET_NU, SHEET_NV = 13, 11
SHEET_Z = 0.002


def make_sheet(width: float, length: float, center, yaw: float) -> SceneObject:
    us = np.linspace(0.0, 1.0, SHEET_NU)
    vs = np.linspace(0.0, 1.0, SHEET_NV)
    uv = np.array([(u, v) for v in vs for u in us])
    labels = np.full(len(uv), Label.SHEET, dtype=np.int32)
    top = uv[:, 1] >= 0.9 - 1e-9
    labels[top] = Label.SHOULDER
    labels[top & (np.abs(uv[:, 0] - 0.5) <= 0.17)] = Label.COLLAR
    labels[uv[:, 1] <= 0.1 + 1e-9] = Label.HEM
    canonical = np.stack([(uv[:, 0] - 0.5) * width, (uv[:, 1] - 0.5) * length,
                          np.zeros(len(uv))], axis=1)
    rot = _yaw(yaw)
    world = _place(canonical, rot, center) + np.array([0.0, 0.0, SHEET_Z])
    cloud = PointCloud(world, {"label": labels, "uv": uv, "canonical": canonical})
    collar = (SHEET_NV - 1) * SHEET_NU + SHEET_NU // 2
    return SceneObject(cloud, ObjectCategory.DEFORMABLE, rot, manip_index=collar,
                       designated_index=collar, goal_index=collar,
                       graspable=np.ones(len(uv), dtype=bool))


def make_clothesline(length: float, height: float, center, yaw: float) -> SceneObject:
    pts, nocs, labels = [], [], []
    for x in np.linspace(-length / 2, length / 2, 25):
        pts.append((x, 0.0, height)); nocs.append((2 * x / length, 0.0, 1.0)); labels.append(Label.LINE)
    for side in (-1.0, 1.0):
        for z in np.linspace(0.0, height, 9)[:-1]:
            pts.append((side * length / 2, 0.0, z)); nocs.append((side, 0.0, 2 * z / height - 1))
            labels.append(Label.POST)
    canonical = np.array(pts)
    rot = _yaw(yaw)
    cloud = PointCloud(_place(canonical, rot, center),
                       {"label": np.array(labels, dtype=np.int32), "nocs": np.array(nocs),
                        "canonical": canonical})
    return SceneObject(cloud, ObjectCategory.RIGID, rot, goal_index=12)


# -------------------------------------------------------------------- tasks

@dataclass(frozen=True)
class TaskSpec:
    name: str
    operated_category: ObjectCategory
    background_category: ObjectCategory
    shape_ranges: Mapping[str, Mapping[str, tuple[float, float]]]  # split -> param -> interval
    position_jitter: Mapping[str, float]                             # split -> metres
    yaw_range: Mapping[str, float]                                   # split -> radians
    operated_center: tuple[float, float]
    background_center: tuple[float, float]
    background_yaw: float = 0.0
    carry_height: float = 0.2
    place_offset: tuple[float, float, float] = (0.0, 0.0, 0.005)
    tolerance: float = 0.03
    max_steps: int = 60
    operated_name: str = ""
    background_name: str = ""


SPLITS = ("train", "test")

TASKS: dict[str, TaskSpec] = {
    "place-synth": TaskSpec(
        name="place-synth",
        operated_category=ObjectCategory.RIGID,
        background_category=ObjectCategory.RIGID,
        shape_ranges={
            "train": {"mug_radius": (0.035, 0.040), "mug_height": (0.080, 0.090),
                      "mug_handle": (0.025, 0.030), "plate_radius": (0.080, 0.090)},
            "test": {"mug_radius": (0.042, 0.048), "mug_height": (0.092, 0.100),
                     "mug_handle": (0.031, 0.036), "plate_radius": (0.092, 0.100)},
        },
        position_jitter={"train": 0.03, "test": 0.06},
        yaw_range={"train": np.deg2rad(15.0), "test": np.deg2rad(30.0)},
        operated_center=(-0.12, -0.06),
        background_center=(0.12, 0.06),
        carry_height=0.2,
        place_offset=(0.0, 0.0, 0.005),
        operated_name="mug",
        background_name="plate",
    ),
    "hang-synth": TaskSpec(
        name="hang-synth",
        operated_category=ObjectCategory.DEFORMABLE,
        background_category=ObjectCategory.RIGID,
        shape_ranges={
            "train": {"sheet_width": (0.16, 0.18), "sheet_length": (0.14, 0.16),
                      "line_length": (0.25, 0.28), "line_height": (0.18, 0.20)},
            "test": {"sheet_width": (0.19, 0.22), "sheet_length": (0.17, 0.19),
                     "line_length": (0.29, 0.33), "line_height": (0.21, 0.24)},
        },
        position_jitter={"train": 0.03, "test": 0.06},
        yaw_range={"train": np.deg2rad(10.0), "test": np.deg2rad(30.0)},
        operated_center=(-0.12, -0.06),
        background_center=(0.12, 0.06),
        background_yaw=np.pi / 2,
        carry_height=0.3,
        place_offset=(0.0, 0.0, 0.02),
        operated_name="top",
        background_name="clothesline",
    ),
    "stack-synth": TaskSpec(
        name="stack-synth",
        operated_category=ObjectCategory.DEFORMABLE,
        background_category=ObjectCategory.DEFORMABLE,
        shape_ranges={
            "train": {"sheet_width": (0.16, 0.18), "sheet_length": (0.14, 0.16),
                      "base_width": (0.16, 0.18), "base_length": (0.14, 0.16)},
            "test": {"sheet_width": (0.19, 0.22), "sheet_length": (0.17, 0.19),
                     "base_width": (0.19, 0.22), "base_length": (0.17, 0.19)},
        },
        position_jitter={"train": 0.03, "test": 0.06},
        yaw_range={"train": np.deg2rad(10.0), "test": np.deg2rad(30.0)},
        operated_center=(-0.12, -0.08),
        background_center=(0.12, 0.08),
        carry_height=0.1,
        place_offset=(0.0, 0.0, 0.01),
        operated_name="top",
        background_name="top",
    ),
}


def get_task(name: str) -> TaskSpec:
    if name not in TASKS:
        raise HGMError("unknown-task", f"{name!r}; known: {sorted(TASKS)}")
    return TASKS[name]


@dataclass(frozen=True)
class Scene:
    """Static per-episode information (ground truth the policy never sees directly)."""

    spec: TaskSpec
    split: str
    seed: int
    params: Mapping[str, float]
    operated: SceneObject
    background: SceneObject

    @property
    def required_orientation(self) -> Rotation3:
        return self.operated.rotation


@dataclass(frozen=True)
class SimState:
    operated: PointCloud
    background: PointCloud
    gripper: np.ndarray
    orientation: Rotation3 = field(default_factory=Rotation3.identity)
    closed: bool = False
    attached: bool = False
    grasp_index: int = -1
    step_count: int = 0

    @property
    def joint_state(self) -> np.ndarray:
        return np.array([*self.gripper, 1.0 if self.closed else 0.0])


def _rng(name: str, split: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(name.encode()), SPLITS.index(split), int(seed) & 0xFFFFFFFF])


def make_task(name: str, split: str, seed: int) -> tuple[Scene, SimState]:
    spec = get_task(name)
    if split not in SPLITS:
        raise HGMError("unknown-split", split)
    rng = _rng(name, split, seed)
    params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in spec.shape_ranges[split].items()}
    jit, yaw_r = spec.position_jitter[split], spec.yaw_range[split]
    op_c = np.array([*spec.operated_center, 0.0]) + np.array([*rng.uniform(-jit, jit, 2), 0.0])
    bg_c = np.array([*spec.background_center, 0.0]) + np.array([*rng.uniform(-jit, jit, 2), 0.0])
    op_yaw = float(rng.uniform(-yaw_r, yaw_r))
    bg_yaw = spec.background_yaw + float(rng.uniform(-yaw_r, yaw_r))
    if name == "place-synth":
        op = make_mug(params["mug_radius"], params["mug_height"], params["mug_handle"], op_c, op_yaw)
        bg = make_plate(params["plate_radius"], bg_c, bg_yaw)
    elif name == "hang-synth":
        op = make_sheet(params["sheet_width"], params["sheet_length"], op_c, op_yaw)
        bg = make_clothesline(params["line_length"], params["line_height"], bg_c, bg_yaw)
    else:
        op = make_sheet(params["sheet_width"], params["sheet_length"], op_c, op_yaw)
        bg = make_sheet(params["base_width"], params["base_length"], bg_c, bg_yaw)
    scene = Scene(spec, split, int(seed), params, op, bg)
    state = SimState(op.cloud, bg.cloud, HOME.copy())
    return scene, state


# ------------------------------------------------------------------ dynamics

def _move_operated(scene: Scene, state: SimState, delta: np.ndarray) -> PointCloud:
    cloud = state.operated
    if scene.operated.category is ObjectCategory.DEFORMABLE:
        rest = np.asarray(cloud.payloads["canonical"])
        d = np.linalg.norm(rest - rest[state.grasp_index], axis=1)
        disp = np.exp(-d / DEFORM_FALLOFF)[:, None] * delta[None, :]
        return cloud.with_points(cloud.points + disp)
    return cloud.with_points(cloud.points + delta)


def set_orientation(state: SimState, orientation: Rotation3) -> SimState:
    return replace(state, orientation=orientation)


def step(scene: Scene, state: SimState, action) -> SimState:
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape[0] != 4 or not np.all(np.isfinite(action)):
        raise HGMError("bad-action", f"expected 4 finite values, got {action}")
    delta = np.clip(action[:3], -ACTION_CAP, ACTION_CAP)
    close_cmd = action[3] > 0.5
    gripper = state.gripper + delta
    new = replace(state, gripper=gripper, step_count=state.step_count + 1)
    if state.attached:
        new = replace(new, operated=_move_operated(scene, state, delta))
    if close_cmd and not state.closed:
        new = replace(new, closed=True)
        new = _try_attach(scene, new)
    elif not close_cmd and state.closed:
        new = replace(new, closed=False, attached=False, grasp_index=-1)
    return new


def _try_attach(scene: Scene, state: SimState) -> SimState:
    mask = scene.operated.graspable
    pts = state.operated.points
    d = np.linalg.norm(pts - state.gripper, axis=1)
    d = np.where(mask, d, np.inf)
    i = int(np.argmin(d))
    if d[i] > GRASP_RADIUS:
        return state
    if scene.operated.category is not ObjectCategory.DEFORMABLE:
        if state.orientation.angle_to(scene.required_orientation) > ORIENTATION_TOLERANCE:
            return state
    attached = replace(state, attached=True, grasp_index=i)
    snap = state.gripper - pts[i]
    return replace(attached, operated=_move_operated(scene, attached, snap))


# ------------------------------------------------------------------- success

def goal_site(scene: Scene, state: SimState) -> np.ndarray:
    return state.background.points[scene.background.goal_index]


def _hang_ok(scene: Scene, state: SimState, p: np.ndarray) -> bool:
    line = np.asarray(state.background.payloads["label"]) == Label.LINE
    ends = state.background.points[line][[0, -1]]
    a, b = ends
    ab = (b - a)[:2]
    s = float(np.dot(p[:2] - a[:2], ab) / np.dot(ab, ab))
    rel = p[:2] - a[:2]
    lateral = abs(float(ab[0] * rel[1] - ab[1] * rel[0])) / float(np.linalg.norm(ab))
    dz = p[2] - a[2]
    return 0.0 <= s <= 1.0 and lateral <= scene.spec.tolerance and 0.0 <= dz <= 0.06


def placement_reached(scene: Scene, state: SimState) -> bool:
    """Geometric part of success, ignoring the gripper."""
    p = state.operated.points[scene.operated.designated_index]
    if scene.spec.name == "hang-synth":
        return _hang_ok(scene, state, p)
    return float(np.linalg.norm(p - goal_site(scene, state))) <= scene.spec.tolerance


def success(scene: Scene, state: SimState) -> bool:
    return (not state.closed) and placement_reached(scene, state)


def distance_to_goal(scene: Scene, state: SimState) -> float:
    p = state.operated.points[scene.operated.designated_index]
    return float(np.linalg.norm(p - goal_site(scene, state)))


# -------------------------------------------------------------------- expert

def ground_truth_grasp(scene: Scene, state: SimState) -> GraspPose:
    pos = state.operated.points[scene.operated.manip_index]
    orient = scene.required_orientation if scene.operated.category is not ObjectCategory.DEFORMABLE \
        else Rotation3.identity()
    return GraspPose(pos, orient, 0.0)


def _toward(current: np.ndarray, target: np.ndarray, speed: float = EXPERT_SPEED) -> np.ndarray:
    return np.clip(target - current, -speed, speed)


def approach_action(state: SimState, grasp_position: np.ndarray) -> np.ndarray | None:
    """Scripted pre-grasp / descend / close primitive; ``None`` once the gripper has closed."""
    if state.closed:
        return None
    g = state.gripper
    target = np.asarray(grasp_position, dtype=np.float64)
    if np.allclose(g, target, atol=1e-9):
        return np.array([0.0, 0.0, 0.0, 1.0])
    if np.allclose(g[:2], target[:2], atol=1e-9):
        return np.array([*_toward(g, target), 0.0])
    return np.array([*_toward(g, target + [0.0, 0.0, PREGRASP_HEIGHT]), 0.0])


def place_target(scene: Scene, state: SimState) -> np.ndarray:
    p = state.operated.points[scene.operated.designated_index]
    return goal_site(scene, state) + np.asarray(scene.spec.place_offset) + (state.gripper - p)


def transport_action(scene: Scene, state: SimState) -> np.ndarray:
    """Lift, carry at a fixed height, descend over the target, release."""
    g = state.gripper
    if not state.attached:
        return np.array([0.0, 0.0, 0.0, 0.0])
    tgt = place_target(scene, state)
    if np.allclose(g, tgt, atol=1e-9):
        return np.array([0.0, 0.0, 0.0, 0.0])
    carry = scene.spec.carry_height
    if np.allclose(g[:2], tgt[:2], atol=1e-9):
        return np.array([*_toward(g, tgt), 1.0])
    if g[2] >= carry - 1e-9:
        return np.array([*_toward(g, np.array([tgt[0], tgt[1], carry])), 1.0])
    return np.array([*_toward(g, np.array([g[0], g[1], carry])), 1.0])


def expert_action(scene: Scene, state: SimState) -> np.ndarray:
    if state.attached:
        return transport_action(scene, state)
    a = approach_action(state, ground_truth_grasp(scene, state).position)
    # closed without a grasp: reopen and retry
    return a if a is not None else np.array([0.0, 0.0, 0.0, 0.0])


@dataclass
class Demonstration:
    scene: Scene
    states: list[SimState]     # T + 1 states
    actions: np.ndarray        # (T, 4)
    grasp_step: int            # index of the first post-grasp state
    grasp_orientation: Rotation3
    success: bool


def scripted_expert(scene: Scene, state: SimState) -> Demonstration:
    spec = scene.spec
    gt = ground_truth_grasp(scene, state)
    state = set_orientation(state, gt.orientation)
    states, actions = [state], []
    grasp_step = -1
    while state.step_count < spec.max_steps and not success(scene, state):
        a = expert_action(scene, state)
        state = step(scene, state, a)
        actions.append(a)
        states.append(state)
        if grasp_step < 0 and state.attached:
            grasp_step = len(states) - 1
    ok = success(scene, state)
    if not ok or grasp_step < 0:
        raise HGMError("expert-failed", f"{spec.name}/{scene.split}/seed {scene.seed}")
    return Demonstration(scene, states, np.array(actions), grasp_step, gt.orientation, ok)


# ----------------------------------------------------------------- observation

def global_cloud(state: SimState, n_points: int = 128) -> np.ndarray:
    pts = np.concatenate([state.operated.points, state.background.points], axis=0)
    return pts[fps_indices(pts, n_points, GLOBAL_FPS_SEED)]


# ---------------------------------------------------------------- evaluation

@dataclass
class EpisodeResult:
    seed: int
    success: bool
    steps: int
    final_distance: float
    failure_stage: str | None  # "grasp" | "move" | "final" | None

    def to_json(self) -> dict:
        return {"seed": self.seed, "success": self.success, "steps": self.steps,
                "final_distance": round(self.final_distance, 6), "failure_stage": self.failure_stage}


class Agent:
    """Interface the evaluator drives.

    ``reset`` sees the initial state of every episode; ``plan_grasp`` is called
    next when ``uses_grasp_stage`` is set; ``sample`` gets the padded state window.
    """

    uses_grasp_stage = True
    n_obs_steps = 3
    n_action_steps = 4

    def plan_grasp(self, scene: Scene, state: SimState) -> GraspPose:
        raise NotImplementedError

    def reset(self, scene: Scene, state: SimState) -> None:
        pass

    def sample(self, window: Sequence[SimState]) -> np.ndarray:
        raise NotImplementedError


class ExpertAgent(Agent):
    """Ground-truth grasp plus expert chunks rolled out on a copy of the simulator."""

    def __init__(self, horizon: int = 8, n_action_steps: int = 4):
        self.horizon, self.n_action_steps = horizon, n_action_steps
        self.scene: Scene | None = None

    def plan_grasp(self, scene, state):
        return ground_truth_grasp(scene, state)

    def reset(self, scene, state):
        self.scene = scene

    def sample(self, window):
        state, chunk = window[-1], []
        for _ in range(self.horizon):
            a = expert_action(self.scene, state)
            chunk.append(a)
            state = step(self.scene, state, a)
        return np.array(chunk)


class EpisodeEnv:
    """Adapter giving :func:`hgmanip.policy.act` its observe/step/done surface."""

    def __init__(self, scene: Scene, state: SimState, on_step: Callable[[SimState], None] | None = None):
        self.scene, self.state = scene, state
        self.on_step = on_step

    @property
    def done(self) -> bool:
        return success(self.scene, self.state) or self.state.step_count >= self.scene.spec.max_steps

    def observe(self) -> SimState:
        return self.state

    def step(self, action) -> None:
        a = np.asarray(action, dtype=np.float64).copy()
        a[3] = np.clip(a[3], 0.0, 1.0)
        self.state = step(self.scene, self.state, a)
        if self.on_step is not None:
            self.on_step(self.state)


def _grasped_correctly(scene: Scene, state: SimState) -> bool:
    if not state.attached:
        return False
    manip = state.operated.points[scene.operated.manip_index]
    return float(np.linalg.norm(state.operated.points[state.grasp_index] - manip)) <= scene.spec.tolerance


def run_episode(agent: Agent, name: str, split: str, seed: int) -> EpisodeResult:
    from .policy import act

    scene, state = make_task(name, split, seed)
    spec = scene.spec
    flags = {"grasp": False, "reached": False}

    def track(s: SimState) -> None:
        if _grasped_correctly(scene, s):
            flags["grasp"] = True
        if flags["grasp"] and placement_reached(scene, s):
            flags["reached"] = True

    agent.reset(scene, state)
    if agent.uses_grasp_stage:
        pose = agent.plan_grasp(scene, state)
        state = set_orientation(state, pose.orientation)
        while state.step_count < spec.max_steps:
            a = approach_action(state, pose.position)
            if a is None:
                break
            state = step(scene, state, a)
            track(state)
    env = EpisodeEnv(scene, state, on_step=track)
    if not env.done:
        act(agent.sample, env, agent.n_obs_steps, agent.n_action_steps)
    final = env.state
    ok = success(scene, final)
    stage = None if ok else ("grasp" if not flags["grasp"] else "move" if not flags["reached"] else "final")
    return EpisodeResult(seed, ok, final.step_count, distance_to_goal(scene, final), stage)


def evaluate(agent_factory: Callable[[], Agent], name: str, split: str, episodes: int, seed: int,
             workers: int = 1) -> tuple[float, list[EpisodeResult]]:
    """Success rate over ``episodes`` scenes seeded ``seed + i``; results in episode order.

    ``agent_factory`` builds one agent per worker so agents need not be thread-safe.
    """
    seeds = [seed + i for i in range(episodes)]
    if workers <= 1 or episodes <= 1:
        agent = agent_factory()
        results = [run_episode(agent, name, split, s) for s in seeds]
    else:
        from concurrent.futures import ThreadPoolExecutor
        import threading

        local = threading.local()

        def one(s):
            if not hasattr(local, "agent"):
                local.agent = agent_factory()
            return run_episode(local.agent, name, split, s)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, seeds))
    rate = sum(r.success for r in results) / max(1, len(results))
    return rate, results
