"""Rectified-flow training targets and samplers over action sequences.

An action sequence is N relative end-effector poses. The flow decouples
translation and rotation: translations follow straight lines in R^3 while
rotations follow geodesics on SO(3), both giving a time-constant target
velocity per (noise, data) pair. Baseline objectives for the architecture
comparison (plain regression loss, epsilon-prediction diffusion with a
deterministic DDIM sampler) live here as well.

Translations are expected in normalized units during flow computation;
samplers de-normalize at the output boundary when given a normalizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import liegroup as lg

# Flow times are kept strictly below 1 so the 1/(1-t) target stays finite.
MAX_FLOW_TIME = 1.0 - 1e-6


@dataclass
class ActionSequence:
    """N relative poses, stored as stacked arrays for batch-friendly math."""

    translations: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) unit quaternions [w, x, y, z]

    def __post_init__(self):
        self.translations = np.asarray(self.translations, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.translations.shape != (len(self), 3) or self.rotations.shape != (len(self), 4):
            raise ValueError(
                f"inconsistent shapes {self.translations.shape} / {self.rotations.shape}"
            )

    def __len__(self) -> int:
        return self.translations.shape[0]

    @staticmethod
    def from_poses(poses: Sequence[lg.Pose]) -> "ActionSequence":
        return ActionSequence(
            np.stack([p.translation for p in poses]),
            np.stack([p.rotation.q for p in poses]),
        )

    @staticmethod
    def identity(n: int) -> "ActionSequence":
        q = np.zeros((n, 4))
        q[:, 0] = 1.0
        return ActionSequence(np.zeros((n, 3)), q)

    def poses(self) -> list[lg.Pose]:
        return [
            lg.Pose(self.translations[i], lg.Rotation(self.rotations[i], normalize=False))
            for i in range(len(self))
        ]

    def pose(self, i: int) -> lg.Pose:
        return lg.Pose(self.translations[i], lg.Rotation(self.rotations[i], normalize=False))

    def copy(self) -> "ActionSequence":
        return ActionSequence(self.translations.copy(), self.rotations.copy())


@dataclass
class VelocitySequence:
    """Per-pose twists paired with an ActionSequence of the same length."""

    linear: np.ndarray  # (N, 3)
    angular: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=np.float64)
        self.angular = np.asarray(self.angular, dtype=np.float64)
        if self.linear.shape != self.angular.shape or self.linear.shape[-1] != 3:
            raise ValueError("linear/angular must both be (N, 3)")

    def __len__(self) -> int:
        return self.linear.shape[0]

    def twists(self) -> list[lg.Twist]:
        return [lg.Twist(self.linear[i], self.angular[i]) for i in range(len(self))]


@dataclass
class ActionNormalizer:
    """Per-dimension affine map between physical and normalized translations."""

    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,), floored at 1e-6

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(3), 1e-6)

    @staticmethod
    def identity() -> "ActionNormalizer":
        return ActionNormalizer(np.zeros(3), np.ones(3))

    def normalize(self, t: np.ndarray) -> np.ndarray:
        return (t - self.mean) / self.std

    def denormalize(self, t: np.ndarray) -> np.ndarray:
        return t * self.std + self.mean


# A velocity model maps (current actions, observation context, flow time)
# to predicted (linear, angular) velocities, each (N, 3).
VelocityModel = Callable[[ActionSequence, object, float], tuple[np.ndarray, np.ndarray]]


def sample_noise(rng: np.random.Generator, n: int, sigma_rot: float = 1.0) -> ActionSequence:
    """Initial flow sample: standard-normal translations, tangent-Gaussian rotations."""
    if n < 1:
        raise ValueError("need at least one pose")
    t = rng.standard_normal((n, 3))
    w = rng.standard_normal((n, 3)) * sigma_rot
    return ActionSequence(t, lg.quat_exp(w))


def interpolate(a0: ActionSequence, a1: ActionSequence, t: float) -> ActionSequence:
    """Point on the straight-line / geodesic path at flow time t in [0, 1]."""
    if len(a0) != len(a1):
        raise ValueError(f"length mismatch: {len(a0)} vs {len(a1)}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time t={t} outside [0, 1]")
    trans = t * a1.translations + (1.0 - t) * a0.translations
    rot = lg.quat_slerp_geodesic(a0.rotations, a1.rotations, float(t))
    return ActionSequence(trans, rot)


def target_velocity(a_t: ActionSequence, a1: ActionSequence, t: float) -> VelocitySequence:
    """Velocity field of the rectified path at (a_t, t).

    linear = (p1 - p_t) / (1 - t), angular = log(r_t^-1 r1) / (1 - t).
    """
    if len(a_t) != len(a1):
        raise ValueError(f"length mismatch: {len(a_t)} vs {len(a1)}")
    if t >= MAX_FLOW_TIME:
        raise ValueError(f"flow time t={t} too close to 1 for target computation")
    inv = 1.0 / (1.0 - t)
    linear = (a1.translations - a_t.translations) * inv
    rel = lg.quat_multiply(lg.quat_conjugate(a_t.rotations), a1.rotations)
    angular = lg.quat_log(rel) * inv
    return VelocitySequence(linear, angular)


def flow_loss(predicted: VelocitySequence, target: VelocitySequence) -> float:
    """Mean over the sequence of squared linear plus squared angular error norms."""
    if len(predicted) != len(target):
        raise ValueError("length mismatch")
    err_lin = np.sum((predicted.linear - target.linear) ** 2, axis=-1)
    err_ang = np.sum((predicted.angular - target.angular) ** 2, axis=-1)
    return float(np.mean(err_lin + err_ang))


def bc_loss(predicted: ActionSequence, demo: ActionSequence) -> float:
    """Squared translation error plus squared geodesic rotation distance, mean over N."""
    if len(predicted) != len(demo):
        raise ValueError("length mismatch")
    err_lin = np.sum((predicted.translations - demo.translations) ** 2, axis=-1)
    rel = lg.quat_multiply(lg.quat_conjugate(predicted.rotations), demo.rotations)
    err_rot = np.sum(lg.quat_log(rel) ** 2, axis=-1)
    return float(np.mean(err_lin + err_rot))


def sample_actions(
    model: VelocityModel,
    obs: object,
    k_steps: int,
    rng: np.random.Generator,
    n_actions: int = 16,
    sigma_rot: float = 1.0,
    normalizer: ActionNormalizer | None = None,
) -> ActionSequence:
    """Euler integration of the learned velocity field from noise to actions.

    Runs in normalized translation units; the returned sequence is
    de-normalized to physical units when a normalizer is given.
    """
    if k_steps < 1:
        raise ValueError("need at least one integration step")
    actions = sample_noise(rng, n_actions, sigma_rot)
    dt = 1.0 / k_steps
    for k in range(k_steps):
        t_k = k / k_steps
        v_lin, v_ang = model(actions, obs, t_k)
        trans = actions.translations + np.asarray(v_lin, dtype=np.float64) * dt
        rot = lg.quat_multiply(actions.rotations, lg.quat_exp(np.asarray(v_ang, dtype=np.float64) * dt))
        actions = ActionSequence(trans, rot)
    if normalizer is not None:
        actions = ActionSequence(normalizer.denormalize(actions.translations), actions.rotations)
    return actions


# ---------------------------------------------------------------------------
# Diffusion baseline (epsilon-prediction DDPM training, DDIM inference)
# ---------------------------------------------------------------------------

@dataclass
class CosineSchedule:
    """Squared-cosine noise schedule with the usual beta clipping."""

    n_steps: int = 100
    offset: float = 0.008
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        k = np.arange(self.n_steps + 1, dtype=np.float64)
        f = np.cos((k / self.n_steps + self.offset) / (1.0 + self.offset) * np.pi / 2.0) ** 2
        raw = f / f[0]
        betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, 0.999)
        self.alpha_bar = np.cumprod(1.0 - betas)

    def __len__(self) -> int:
        return self.n_steps


def ddpm_target(
    a1: ActionSequence,
    t_idx: int,
    rng: np.random.Generator,
    schedule: CosineSchedule,
    sigma_rot: float = 1.0,
) -> tuple[ActionSequence, VelocitySequence]:
    """Forward-noise a1 at step t_idx; returns (noised sequence, injected noise).

    Translations follow the standard forward process; rotations are
    right-multiplied by exp of the scaled tangent noise. The target keeps
    the unscaled noise, in tangent coordinates for the rotation part.
    """
    if not 0 <= t_idx < len(schedule):
        raise ValueError(f"t_idx {t_idx} outside [0, {len(schedule)})")
    ab = schedule.alpha_bar[t_idx]
    eps_lin = rng.standard_normal((len(a1), 3))
    eps_ang = rng.standard_normal((len(a1), 3))
    trans = np.sqrt(ab) * a1.translations + np.sqrt(1.0 - ab) * eps_lin
    rot = lg.quat_multiply(a1.rotations, lg.quat_exp(np.sqrt(1.0 - ab) * sigma_rot * eps_ang))
    return ActionSequence(trans, rot), VelocitySequence(eps_lin, eps_ang)


def ddim_sample(
    model: VelocityModel,
    obs: object,
    steps: int,
    rng: np.random.Generator,
    schedule: CosineSchedule,
    n_actions: int = 16,
    sigma_rot: float = 1.0,
    normalizer: ActionNormalizer | None = None,
) -> ActionSequence:
    """Deterministic DDIM refinement given an epsilon-prediction model.

    The model is called with the diffusion time normalized to [0, 1]
    (t_idx / (T - 1)), mirroring the flow sampler's interface.
    """
    if steps < 1:
        raise ValueError("need at least one DDIM step")
    n_train = len(schedule)
    # evaluation points from the noisiest level down; the last one emits x0
    taus = np.unique(np.linspace(n_train - 1, 0, num=min(steps, n_train)).round().astype(int))[::-1]
    actions = sample_noise(rng, n_actions, sigma_rot)
    for i, tau in enumerate(taus):
        ab = schedule.alpha_bar[tau]
        t_norm = tau / max(n_train - 1, 1)
        eps_lin, eps_ang = model(actions, obs, float(t_norm))
        eps_lin = np.asarray(eps_lin, dtype=np.float64)
        eps_ang = np.asarray(eps_ang, dtype=np.float64)
        x0_trans = (actions.translations - np.sqrt(1.0 - ab) * eps_lin) / np.sqrt(ab)
        x0_rot = lg.quat_multiply(
            actions.rotations, lg.quat_exp(-np.sqrt(1.0 - ab) * sigma_rot * eps_ang)
        )
        if i == len(taus) - 1:
            actions = ActionSequence(x0_trans, x0_rot)
        else:
            ab_next = schedule.alpha_bar[taus[i + 1]]
            trans = np.sqrt(ab_next) * x0_trans + np.sqrt(1.0 - ab_next) * eps_lin
            rot = lg.quat_multiply(
                x0_rot, lg.quat_exp(np.sqrt(1.0 - ab_next) * sigma_rot * eps_ang)
            )
            actions = ActionSequence(trans, rot)
    if normalizer is not None:
        actions = ActionSequence(normalizer.denormalize(actions.translations), actions.rotations)
    return actions
