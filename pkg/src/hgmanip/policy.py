"""Diffusion action head: condition construction, epsilon-prediction training, DDIM sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .correspondence import DemoAnnotation
from .errors import HGMError
from .fusion import FusionConfig, FusionModule


LOSS_WEIGHTINGS = ("residual", "min-snr", "none")


@dataclass
class PolicyConfig:
    horizon: int = 8
    n_obs_steps: int = 3
    n_action_steps: int = 4
    num_inference_steps: int = 10
    num_train_timesteps: int = 100
    n_points: int = 128
    action_dim: int = 4
    joint_dim: int = 4
    cloud_embed_dim: int = 64
    joint_embed_dim: int = 32
    cloud_encoder_widths: tuple[int, ...] = (64,)
    joint_encoder_widths: tuple[int, ...] = (32,)
    time_embed_dim: int = 64
    denoiser_widths: tuple[int, ...] = (512, 512, 512)
    batch_size: int = 128
    lr: float = 1e-4
    betas: tuple[float, float] = (0.95, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-6
    lr_warmup_steps: int = 500
    num_epochs: int = 3000
    seed: int = 42
    normalize_obs: bool = True
    precondition: bool = True
    sigma_data: float = 0.5
    loss_weighting: str = "residual"  # "residual" | "min-snr" | "none"
    min_snr_gamma: float = 5.0
    residual_weight_cap: float = 200.0
    ema_power: float = 0.0            # > 0 enables a weight average (e.g. 0.75)

    def __post_init__(self):
        for name in ("cloud_encoder_widths", "joint_encoder_widths", "denoiser_widths", "betas"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.loss_weighting not in LOSS_WEIGHTINGS:
            raise HGMError("bad-config", f"unknown loss weighting {self.loss_weighting!r}")

    @property
    def condition_dim_per_step(self) -> int:
        return self.cloud_embed_dim + self.joint_embed_dim


class NoiseSchedule:
    """Squared-cosine cumulative schedule on integer steps ``0..T`` with ``alpha_bar[0] = 1``.

    ``beta_t = min(1 - f(t)/f(t-1), max_beta)``, so ``alpha_bar`` follows
    ``f(t)/f(0)`` exactly except at the clipped final step.
    """

    def __init__(self, num_train_timesteps: int = 100, s: float = 0.008, max_beta: float = 0.999):
        T = num_train_timesteps
        self.T, self.s = T, s
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((t / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], max_beta)
        self.betas = np.concatenate([[0.0], betas])
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def ddim_timesteps(self, num_inference_steps: int) -> list[tuple[int, int]]:
        """(t, t_prev) pairs, evenly strided, the last one ending at t_prev = 0."""
        stride = self.T // num_inference_steps
        ts = [1 + stride * i for i in range(num_inference_steps)][::-1]
        return [(t, t - stride if t - stride >= 1 else 0) for t in ts]


@dataclass(frozen=True)
class ActionStats:
    """Per-dimension min/max of training actions."""

    low: np.ndarray
    high: np.ndarray

    @classmethod
    def fit(cls, actions: np.ndarray) -> "ActionStats":
        flat = np.asarray(actions, dtype=np.float64).reshape(-1, np.shape(actions)[-1])
        return cls(flat.min(axis=0), flat.max(axis=0))

    @property
    def active(self) -> np.ndarray:
        return (self.high - self.low) > 1e-8


def normalize_actions(chunk: np.ndarray, stats: ActionStats) -> np.ndarray:
    chunk = np.asarray(chunk, dtype=np.float64)
    span = np.where(stats.active, stats.high - stats.low, 1.0)
    out = 2.0 * (chunk - stats.low) / span - 1.0
    return np.where(stats.active, out, chunk)


def denormalize_actions(chunk: np.ndarray, stats: ActionStats) -> np.ndarray:
    chunk = np.asarray(chunk, dtype=np.float64)
    span = np.where(stats.active, stats.high - stats.low, 1.0)
    out = (chunk + 1.0) / 2.0 * span + stats.low
    return np.where(stats.active, out, chunk)


@dataclass(frozen=True)
class ObsStats:
    """Min/max of world coordinates and joint states; maps observations into [-1, 1].

    Coordinates share one per-axis range whether they come from the global cloud
    or from a descriptor's coordinate tail.
    """

    xyz: ActionStats
    joints: ActionStats

    @classmethod
    def fit(cls, clouds: np.ndarray, joints: np.ndarray, *coord_sets: np.ndarray) -> "ObsStats":
        pts = [np.asarray(clouds, dtype=np.float64).reshape(-1, 3)]
        pts += [np.asarray(c, dtype=np.float64)[..., -3:].reshape(-1, 3) for c in coord_sets]
        return cls(ActionStats.fit(np.concatenate(pts)), ActionStats.fit(joints))

    def apply(self, batch: dict) -> dict:
        out = dict(batch)
        f = dc.default_dtype()
        out["clouds"] = normalize_actions(batch["clouds"], self.xyz).astype(f)
        out["joints"] = normalize_actions(batch["joints"], self.joints).astype(f)
        for key in ("operated", "background"):
            d = np.array(batch[key], dtype=np.float64)
            d[..., -3:] = normalize_actions(d[..., -3:], self.xyz)
            out[key] = d.astype(f)
        return out


def add_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward process sample at integer step(s) ``t`` (scalar or one per batch row)."""
    ab = np.asarray(schedule.alpha_bar[np.asarray(t)], dtype=np.float64)
    ab = ab.reshape(ab.shape + (1,) * (np.ndim(x0) - ab.ndim))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class Observation:
    global_cloud: np.ndarray            # (n_points, 3)
    joint_state: np.ndarray             # (J,)
    operated_descriptors: np.ndarray    # (M, d_op + 3)
    background_descriptors: np.ndarray  # (N, d_bg + 3)


def stack_window(window: Sequence[Observation], n_obs_steps: int) -> dict[str, np.ndarray]:
    if len(window) != n_obs_steps:
        raise HGMError("window-length", f"expected {n_obs_steps} observations, got {len(window)}")
    return {
        "clouds": np.stack([o.global_cloud for o in window])[None],
        "joints": np.stack([o.joint_state for o in window])[None],
        "operated": np.asarray(window[-1].operated_descriptors)[None],
        "background": np.asarray(window[-1].background_descriptors)[None],
    }


def pad_window(history: Sequence, n_obs_steps: int) -> list:
    """Last ``n_obs_steps`` items, left-padded by repeating the first available one."""
    window = list(history[-n_obs_steps:])
    return [window[0]] * (n_obs_steps - len(window)) + window


def precondition_coefficients(alpha_bar: np.ndarray, sigma_data: float):
    """(skip, out, in) scalings so the network's regression target has unit variance at every t.

    With x_t = sqrt(ab) x0 + s eps and Var(x0) = sigma_data^2 the epsilon estimate is
    ``skip * x_t + out * F(in * x_t)``: ``skip * x_t`` is the best linear guess of eps
    and ``out`` is the standard deviation of what remains.
    """
    ab = np.asarray(alpha_bar, dtype=np.float64)
    var = (1.0 - ab) + ab * sigma_data ** 2
    skip = np.sqrt(1.0 - ab) / var
    out = sigma_data * np.sqrt(ab) / np.sqrt(var)
    return skip, out, 1.0 / np.sqrt(var)


class PolicyModel:
    def __init__(self, cfg: PolicyConfig, fusion_cfg: FusionConfig, operated_dim: int,
                 background_dim: int, seed: int | None = None, alpha_bar: np.ndarray | None = None):
        self.cfg, self.fusion_cfg = cfg, fusion_cfg
        self.alpha_bar = NoiseSchedule(cfg.num_train_timesteps).alpha_bar if alpha_bar is None else alpha_bar
        self.store = dc.ParameterStore(cfg.seed if seed is None else seed)
        s = self.store
        self.fusion = FusionModule(s, fusion_cfg, operated_dim, background_dim)
        self.cloud_enc = dc.MLP(s, "cond.cloud", (3, *cfg.cloud_encoder_widths, cfg.cloud_embed_dim))
        self.joint_enc = dc.MLP(s, "cond.joint", (cfg.joint_dim, *cfg.joint_encoder_widths, cfg.joint_embed_dim))
        self.time_mlp = dc.MLP(s, "denoiser.time", (cfg.time_embed_dim, 2 * cfg.time_embed_dim, cfg.time_embed_dim))
        chunk = cfg.horizon * cfg.action_dim
        d_in = chunk + cfg.time_embed_dim + self.condition_dim
        self.denoiser = dc.MLP(s, "denoiser.net", (d_in, *cfg.denoiser_widths, chunk))

    @property
    def condition_dim(self) -> int:
        return self.cfg.n_obs_steps * self.cfg.condition_dim_per_step + self.fusion_cfg.model_dim

    def condition(self, clouds, joints, operated, background) -> dc.Tensor:
        """Batched condition: clouds (B, n_obs, P, 3), joints (B, n_obs, J), descriptors (B, M|N, d+3)."""
        clouds = np.asarray(clouds)
        B, n_obs = clouds.shape[:2]
        if n_obs != self.cfg.n_obs_steps:
            raise HGMError("window-length", f"expected {self.cfg.n_obs_steps} observations, got {n_obs}")
        pooled = dc.max_pool(self.cloud_enc(dc.Tensor(clouds)), axis=2)
        joint = self.joint_enc(dc.Tensor(joints))
        per_step = dc.reshape(dc.concat([pooled, joint], axis=-1), (B, n_obs * self.cfg.condition_dim_per_step))
        rel = self.fusion.relational_feature(operated, background)
        return dc.concat([per_step, rel], axis=-1)

    def predict_eps(self, x_t: np.ndarray | dc.Tensor, t: np.ndarray, cond: dc.Tensor) -> dc.Tensor:
        x_t = dc.as_tensor(x_t)
        B = x_t.shape[0]
        t = np.broadcast_to(t, (B,))
        temb = self.time_mlp(dc.Tensor(timestep_embedding(t, self.cfg.time_embed_dim)))
        if not self.cfg.precondition:
            out = self.denoiser(dc.concat([dc.reshape(x_t, (B, -1)), temb, cond], axis=-1))
            return dc.reshape(out, x_t.shape)
        f = dc.default_dtype()
        skip, scale, c_in = (c.astype(f).reshape(B, 1) for c in
                             precondition_coefficients(self.alpha_bar[t], self.cfg.sigma_data))
        flat = dc.reshape(x_t, (B, -1))
        out = self.denoiser(dc.concat([dc.mul(flat, c_in), temb, cond], axis=-1))
        eps = dc.add(dc.mul(flat, skip), dc.mul(out, scale))
        return dc.reshape(eps, x_t.shape)


@dataclass
class PolicyBundle:
    """Everything needed at inference: weights, schedule, normalisation and descriptor contexts."""

    config: PolicyConfig
    fusion_config: FusionConfig
    model: PolicyModel
    schedule: NoiseSchedule
    stats: ActionStats
    contexts: dict = field(default_factory=dict)      # role -> PcaModel | anchor matrix
    routes: dict = field(default_factory=dict)        # role -> "pca" | "anchor-similarity"
    providers: dict = field(default_factory=dict)     # role -> provider id
    annotation: DemoAnnotation | None = None
    task: dict = field(default_factory=dict)
    variant: str = "full"
    obs_stats: ObsStats | None = None


def build_condition(obs_window: Sequence[Observation], bundle: PolicyBundle) -> np.ndarray:
    cfg = bundle.config
    w = stack_window(obs_window, cfg.n_obs_steps)
    if bundle.obs_stats is not None:
        w = bundle.obs_stats.apply(w)
    with dc.no_grad():
        cond = bundle.model.condition(w["clouds"], w["joints"], w["operated"], w["background"])
    return cond.data[0]


def min_snr_weights(alpha_bar: np.ndarray, gamma: float) -> np.ndarray:
    """min(SNR, gamma) / SNR: down-weights the nearly noise-free steps, 1 elsewhere."""
    snr = alpha_bar / np.maximum(1.0 - alpha_bar, 1e-12)
    return np.minimum(snr, gamma) / snr


def residual_weights(alpha_bar: np.ndarray, sigma_data: float, cap: float = 200.0) -> np.ndarray:
    """min(1 / c_out^2, cap), normalised to mean 1 over t >= 1.

    With the preconditioned predictor the epsilon error equals c_out times the
    network's residual error, so these weights give every step the same weight
    on the unit-variance residual (the noisy steps otherwise barely train). The
    cap stops the last, almost pure-noise steps (c_out -> 0) from dominating.
    """
    _, out, _ = precondition_coefficients(alpha_bar, sigma_data)
    w = np.minimum(1.0 / np.maximum(out, 1e-12) ** 2, cap)
    return w / np.mean(w[1:])


def loss_weights(cfg: "PolicyConfig", schedule: NoiseSchedule) -> np.ndarray | None:
    if cfg.loss_weighting == "residual":
        return residual_weights(schedule.alpha_bar, cfg.sigma_data, cfg.residual_weight_cap)
    if cfg.loss_weighting == "min-snr":
        return min_snr_weights(schedule.alpha_bar, cfg.min_snr_gamma)
    return None


def diffusion_loss(predict: Callable, x0: np.ndarray, cond, schedule: NoiseSchedule,
                   rng: np.random.Generator | None = None, t: np.ndarray | None = None,
                   eps: np.ndarray | None = None, weights: np.ndarray | None = None) -> dc.Tensor:
    """Batch mean of the per-chunk squared error between predicted and injected noise.

    ``weights`` (indexed by timestep) scales each chunk's error; None means unweighted.
    """
    B = x0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    if eps is None:
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = add_noise(x0, t, eps, schedule)
    pred = predict(x_t, t, cond)
    per_item = int(np.prod(x0.shape[1:]))
    if weights is None:
        return dc.mul(dc.mse_loss(pred, eps), float(per_item))
    w = np.asarray(weights, dtype=np.float64)[np.asarray(t)].astype(x0.dtype)
    diff = dc.sub(pred, dc.Tensor(eps))
    sq = dc.mul(dc.mul(diff, diff), dc.Tensor(w.reshape((B,) + (1,) * (x0.ndim - 1))))
    return dc.mul(dc.sum_all(sq), 1.0 / B)


def train_step(batch: dict, bundle: PolicyBundle, rng: np.random.Generator,
               schedule: dc.LrSchedule) -> float:
    """One optimiser step. ``batch['actions']`` must already be normalised."""
    model, cfg = bundle.model, bundle.config
    if bundle.obs_stats is not None:
        batch = bundle.obs_stats.apply(batch)
    x0 = np.asarray(batch["actions"], dtype=dc.default_dtype())
    cond = model.condition(batch["clouds"], batch["joints"], batch["operated"], batch["background"])
    try:
        loss = diffusion_loss(model.predict_eps, x0, cond, bundle.schedule, rng,
                              weights=loss_weights(cfg, bundle.schedule))
    except HGMError as err:
        if err.code == "non-finite":
            raise HGMError("diverged", err.detail) from err
        raise
    dc.backward(loss, model.store)
    lr = dc.lr_at(schedule, model.store.step + 1)
    dc.adamw_step(model.store, lr, cfg.betas, cfg.eps, cfg.weight_decay)
    return float(loss.data)


def ddim_sample_normalized(cond: np.ndarray, predict: Callable, schedule: NoiseSchedule,
                           shape: tuple[int, ...], num_inference_steps: int = 10,
                           seed: int = 0) -> np.ndarray:
    """Deterministic (eta = 0) DDIM from a seeded Gaussian; returns normalised x_0."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(dc.default_dtype())
    ab = schedule.alpha_bar
    f = dc.default_dtype()
    with dc.no_grad():
        for t, t_prev in schedule.ddim_timesteps(num_inference_steps):
            eps = np.asarray(dc.as_tensor(predict(x, np.full(shape[0], t), cond)).data, dtype=f)
            a_t, a_prev = f(ab[t]), f(ab[t_prev])
            x0_hat = (x - np.sqrt(f(1) - a_t) * eps) / np.sqrt(a_t)
            x = np.sqrt(a_prev) * x0_hat + np.sqrt(f(1) - a_prev) * eps
    return x


def ddim_sample(cond: np.ndarray, bundle: PolicyBundle, num_inference_steps: int | None = None,
                seed: int = 0) -> np.ndarray:
    """Sample one denormalised (horizon, action_dim) chunk for a single condition vector."""
    cfg = bundle.config
    steps = num_inference_steps or cfg.num_inference_steps
    cond_t = dc.Tensor(np.asarray(cond).reshape(1, -1))
    x0 = ddim_sample_normalized(cond_t, bundle.model.predict_eps, bundle.schedule,
                                (1, cfg.horizon, cfg.action_dim), steps, seed)
    return denormalize_actions(x0[0], bundle.stats)


def act(sampler: Callable[[list], np.ndarray], env, n_obs_steps: int = 3,
        n_action_steps: int = 4) -> tuple[list[np.ndarray], int]:
    """Receding-horizon control loop.

    ``env`` exposes ``observe()``, ``step(action)`` and a ``done`` flag. Every
    ``n_action_steps`` steps the sampler gets the latest (padded) observation
    window and the first ``n_action_steps`` actions of its chunk are executed.
    Returns the executed actions and the number of sampler calls.
    """
    history = [env.observe()]
    executed: list[np.ndarray] = []
    calls = 0
    while not env.done:
        chunk = np.asarray(sampler(pad_window(history, n_obs_steps)))
        calls += 1
        for action in chunk[:n_action_steps]:
            env.step(action)
            executed.append(np.asarray(action))
            if env.done:
                break
            history.append(env.observe())
    return executed, calls
