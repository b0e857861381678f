"""Deterministic planar match-striking simulator.

Motion lives in the world y-z plane (x and out-of-plane rotations are
projected away each step) while all state is kept in full SE(3) so the
learning stack stays dimension-general. The striker plate is a segment
mounted at a configurable angle; the match tip is a point rigidly grasped
in the end-effector frame with a per-episode grasp offset.

Contact model: the commanded tip position may dip below the plate surface;
the realized tip is projected back to at most `max_penetration`, while the
normal force is a stiff spring on the commanded (attempted) depth. The
match lights when tip contact inside the valid sub-segment sustains a
force inside [force_min, force_max] at tangential speed >= speed_min for
two consecutive steps; exceeding force_max makes the match slip through
the fingers and ends the episode.

Observations: a wrist-frame grayscale rendering (anti-aliased 2 px
strokes), an event-tactile frame (Poisson counts gated on force/contact
changes, split by force-change sign), and the end-effector twist.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import liegroup as lg
from .flowmatch import ActionSequence


class Outcome(enum.Enum):
    SUCCESS = "success"
    WRONG_LOCATION = "wrong_location"
    NO_CONTACT = "no_contact"
    INSUFFICIENT_FORCE = "insufficient_force"
    TOO_MUCH_FORCE = "too_much_force"


class MatchState(enum.Enum):
    UNLIT = "unlit"
    LIT = "lit"
    SLIPPED = "slipped"


@dataclass
class ScenarioConfig:
    """Scenario plus physics constants; thresholds are frozen defaults."""

    fixed_grasp: bool = False
    translation_range: float = 0.01  # m, grasp offset sampling
    rotation_range_deg: float = 10.0  # deg, grasp tilt about x
    mount_angle_deg: float = 20.0
    striker_texture: str = "plain"  # plain | dotted
    illumination: float = 1.0

    control_dt: float = 0.04  # 25 Hz
    timeout_s: float = 10.0
    clamp_lin: float = 0.02  # m per step
    clamp_ang_deg: float = 5.0  # deg per step
    k_normal: float = 400.0  # N/m on attempted penetration
    force_min: float = 1.0
    force_max: float = 8.0
    speed_min: float = 0.15  # m/s tangential
    ignite_steps: int = 2
    max_penetration: float = 0.005  # m, realized tip depth cap

    striker_length: float = 0.12
    valid_margin: float = 0.015  # ends of the plate cannot ignite
    image_size: int = 48
    tactile_size: int = 16
    tactile_window: float = 0.02  # m, tip-centered
    events_per_newton: float = 40.0
    events_per_meter: float = 2000.0
    force_change_gate: float = 1e-3  # N
    # nominal grasp: tip location in the EE frame before variation
    nominal_tip_offset: tuple[float, float, float] = (0.0, 0.01, -0.085)

    def __post_init__(self):
        if not 0.0 <= self.mount_angle_deg <= 45.0:
            raise ValueError("mount_angle_deg must lie in [0, 45]")
        if self.striker_texture not in ("plain", "dotted"):
            raise ValueError(f"unknown striker texture {self.striker_texture!r}")
        if self.illumination < 0:
            raise ValueError("illumination gain must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "nominal_tip_offset" in d:
            d["nominal_tip_offset"] = tuple(d["nominal_tip_offset"])
        return ScenarioConfig(**d)


@dataclass
class StrikerGeometry:
    mount_angle_deg: float
    start: np.ndarray  # (3,)
    end: np.ndarray  # (3,)
    force_min: float
    force_max: float
    speed_min: float

    @property
    def direction(self) -> np.ndarray:
        d = self.end - self.start
        return d / np.linalg.norm(d)

    @property
    def normal(self) -> np.ndarray:
        d = self.direction
        # in-plane normal on the upper side of the plate
        return np.array([0.0, -d[2], d[1]])

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))


@dataclass
class ContactInfo:
    in_contact: bool = False
    normal_force: float = 0.0
    tangential_speed: float = 0.0
    contact_point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    arc_pos: float = 0.0  # position along the plate, m from start
    valid_location: bool = False
    shaft_contact: bool = False
    d_force: float = 0.0
    d_point: float = 0.0  # contact-point travel this step, m


@dataclass
class Observation:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    tactile: np.ndarray  # (h, w, 2) uint16 event counts
    proprio: np.ndarray  # (6,) twist [linear, angular]


@dataclass
class WorldState:
    ee_pose: lg.Pose
    ee_velocity: lg.Twist
    grasp_offset: lg.Pose
    striker: StrikerGeometry
    match_state: MatchState
    contact: ContactInfo
    time: float
    ignite_streak: int = 0
    terminated: bool = False
    # episode aggregates for outcome classification
    ever_tip_contact: bool = False
    ever_valid_contact: bool = False
    ever_shaft_contact: bool = False
    max_force: float = 0.0

    def tip_position(self) -> np.ndarray:
        return lg.compose(self.ee_pose, self.grasp_offset).translation


# fixed camera window (meters, EE-frame y/z), spanning image_size pixels
CAMERA_U = (-0.05, 0.19)
CAMERA_V = (-0.20, 0.04)
EE_START = np.array([0.0, -0.06, 0.16])
STRIKER_START = np.array([0.0, 0.05, 0.04])
GRIP_LOCAL = np.array([0.0, 0.0, -0.02])  # match grip point in the EE frame


class MatchStrikeSim:
    """Episode engine; all randomness flows through the generator from reset."""

    def __init__(self, config: ScenarioConfig, render_observations: bool = True):
        self.config = config
        self.render_observations = render_observations
        self._rng = np.random.default_rng(0)

    # -- lifecycle -----------------------------------------------------

    def reset(self, seed: int) -> tuple[WorldState, Observation]:
        cfg = self.config
        self._rng = np.random.default_rng(seed)
        alpha = math.radians(cfg.mount_angle_deg)
        direction = np.array([0.0, math.cos(alpha), math.sin(alpha)])
        striker = StrikerGeometry(
            mount_angle_deg=cfg.mount_angle_deg,
            start=STRIKER_START.copy(),
            end=STRIKER_START + cfg.striker_length * direction,
            force_min=cfg.force_min,
            force_max=cfg.force_max,
            speed_min=cfg.speed_min,
        )
        if cfg.fixed_grasp:
            delta = np.zeros(3)
            tilt = 0.0
        else:
            delta = np.array(
                [0.0, self._rng.uniform(-1.0, 1.0), self._rng.uniform(-1.0, 1.0)]
            ) * cfg.translation_range
            tilt = self._rng.uniform(-1.0, 1.0) * math.radians(cfg.rotation_range_deg)
        grasp = lg.Pose(np.asarray(cfg.nominal_tip_offset) + delta, lg.Rotation.about_x(tilt))
        state = WorldState(
            ee_pose=lg.Pose(EE_START.copy(), lg.Rotation.identity()),
            ee_velocity=lg.Twist.zero(),
            grasp_offset=grasp,
            striker=striker,
            match_state=MatchState.UNLIT,
            contact=ContactInfo(),
            time=0.0,
        )
        obs = self.render_observation(state, self._rng)
        return state, obs

    def step(self, state: WorldState, target: lg.Pose) -> tuple[WorldState, Observation, Outcome | None]:
        """Advance one control period toward a relative target pose."""
        if state.terminated:
            raise RuntimeError("episode already terminated")
        cfg = self.config
        if not (np.all(np.isfinite(target.translation)) and np.all(np.isfinite(target.rotation.q))):
            raise ValueError("non-finite action target")

        prev_pose = state.ee_pose
        prev_contact = state.contact
        prev_tip = state.tip_position()

        cmd = lg.compose(prev_pose, target)
        dp = cmd.translation - prev_pose.translation
        norm = np.linalg.norm(dp)
        if norm > cfg.clamp_lin:
            dp = dp * (cfg.clamp_lin / norm)
        dw = lg.log_so3(prev_pose.rotation.inverse().compose(cmd.rotation))
        wnorm = np.linalg.norm(dw)
        clamp_ang = math.radians(cfg.clamp_ang_deg)
        if wnorm > clamp_ang:
            dw = dw * (clamp_ang / wnorm)

        new_p = prev_pose.translation + dp
        new_r = prev_pose.rotation.compose(lg.exp_so3(dw))
        # planar projection: keep x = 0 and rotation about x only
        new_p[0] = 0.0
        w_full = lg.log_so3(new_r)
        new_r = lg.exp_so3(np.array([w_full[0], 0.0, 0.0]))

        striker = state.striker
        d, n = striker.direction, striker.normal
        tip_raw = new_p + new_r.apply(state.grasp_offset.translation)
        rel = tip_raw - striker.start
        s = float(rel @ d)
        depth_raw = float(-(rel @ n))
        on_plate = 0.0 <= s <= striker.length

        attempted_depth = depth_raw if (on_plate and depth_raw > 0.0) else 0.0
        if on_plate and depth_raw > cfg.max_penetration:
            new_p = new_p + (depth_raw - cfg.max_penetration) * n

        pose = lg.Pose(new_p, new_r)
        tip = pose.translation + new_r.apply(state.grasp_offset.translation)
        force = cfg.k_normal * attempted_depth
        in_contact = attempted_depth > 0.0
        valid = in_contact and cfg.valid_margin <= s <= striker.length - cfg.valid_margin
        contact_point = striker.start + s * d if in_contact else np.zeros(3)
        tangential_speed = abs(float((tip - prev_tip) @ d)) / cfg.control_dt if in_contact else 0.0

        shaft = self._shaft_contact(pose, state.grasp_offset, striker)

        d_force = force - prev_contact.normal_force
        if prev_contact.in_contact and in_contact:
            d_point = float(np.linalg.norm(contact_point - prev_contact.contact_point))
        else:
            d_point = 0.0

        contact = ContactInfo(
            in_contact=in_contact,
            normal_force=force,
            tangential_speed=tangential_speed,
            contact_point=contact_point,
            arc_pos=s if in_contact else 0.0,
            valid_location=valid,
            shaft_contact=shaft,
            d_force=d_force,
            d_point=d_point,
        )

        twist = lg.Twist(
            (new_p - prev_pose.translation) / cfg.control_dt,
            lg.log_so3(prev_pose.rotation.inverse().compose(new_r)) / cfg.control_dt,
        )

        match_state = state.match_state
        ignite_streak = state.ignite_streak
        if match_state is MatchState.UNLIT:
            if force > cfg.force_max:
                match_state = MatchState.SLIPPED
                ignite_streak = 0
            else:
                qualifies = valid and force >= cfg.force_min and tangential_speed >= cfg.speed_min
                ignite_streak = ignite_streak + 1 if qualifies else 0
                if ignite_streak >= cfg.ignite_steps:
                    match_state = MatchState.LIT

        new_state = WorldState(
            ee_pose=pose,
            ee_velocity=twist,
            grasp_offset=state.grasp_offset,
            striker=striker,
            match_state=match_state,
            contact=contact,
            time=state.time + cfg.control_dt,
            ignite_streak=ignite_streak,
            ever_tip_contact=state.ever_tip_contact or in_contact,
            ever_valid_contact=state.ever_valid_contact or valid,
            ever_shaft_contact=state.ever_shaft_contact or shaft,
            max_force=max(state.max_force, force),
        )

        outcome: Outcome | None = None
        if match_state is MatchState.LIT:
            outcome = Outcome.SUCCESS
        elif match_state is MatchState.SLIPPED:
            outcome = Outcome.TOO_MUCH_FORCE
        elif new_state.time >= cfg.timeout_s - 1e-9:
            outcome = self._classify_aggregates(new_state)
        new_state.terminated = outcome is not None

        obs = self.render_observation(new_state, self._rng)
        return new_state, obs, outcome

    def _shaft_contact(self, pose: lg.Pose, grasp: lg.Pose, striker: StrikerGeometry) -> bool:
        """True when an interior shaft point (not the tip) dips below the plate."""
        grip = pose.translation + pose.rotation.apply(GRIP_LOCAL)
        tip = pose.translation + pose.rotation.apply(grasp.translation)
        d, n = striker.direction, striker.normal
        for frac in (0.25, 0.5, 0.75, 0.9):
            p = grip + (tip - grip) * frac
            rel = p - striker.start
            s = float(rel @ d)
            if 0.0 <= s <= striker.length and float(-(rel @ n)) > 0.0:
                return True
        return False

    @staticmethod
    def _classify_aggregates(state: WorldState) -> Outcome:
        if state.match_state is MatchState.LIT:
            return Outcome.SUCCESS
        if state.match_state is MatchState.SLIPPED:
            return Outcome.TOO_MUCH_FORCE
        if not state.ever_tip_contact and not state.ever_shaft_contact:
            return Outcome.NO_CONTACT
        if not state.ever_valid_contact:
            return Outcome.WRONG_LOCATION
        return Outcome.INSUFFICIENT_FORCE

    # -- rendering -------------------------------------------------------

    def render_observation(self, state: WorldState, rng: np.random.Generator) -> Observation:
        if not self.render_observations:
            size = self.config.image_size
            tsize = self.config.tactile_size
            return Observation(
                image=np.zeros((size, size), dtype=np.float32),
                tactile=np.zeros((tsize, tsize, 2), dtype=np.uint16),
                proprio=state.ee_velocity.as_array(),
            )
        return Observation(
            image=self._render_image(state),
            tactile=self._render_tactile(state, rng),
            proprio=state.ee_velocity.as_array(),
        )

    def _render_image(self, state: WorldState) -> np.ndarray:
        cfg = self.config
        size = cfg.image_size
        # pixel-center coordinates in the EE (wrist camera) frame
        us = np.linspace(CAMERA_U[0], CAMERA_U[1], size)
        vs = np.linspace(CAMERA_V[1], CAMERA_V[0], size)  # top row = high v
        uu, vv = np.meshgrid(us, vs)
        px_m = (CAMERA_U[1] - CAMERA_U[0]) / size

        inv_r = state.ee_pose.rotation.inverse()

        def to_cam(p_world: np.ndarray) -> np.ndarray:
            q = inv_r.apply(p_world - state.ee_pose.translation)
            return q[1:]  # (u, v) = (y, z) in the wrist frame

        img = np.zeros((size, size), dtype=np.float64)

        def stroke(a, b, brightness, texture=None):
            au, av = a
            bu, bv = b
            seg = np.array([bu - au, bv - av])
            seg_len2 = float(seg @ seg)
            du, dv = uu - au, vv - av
            if seg_len2 < 1e-12:
                t = np.zeros_like(du)
            else:
                t = np.clip((du * seg[0] + dv * seg[1]) / seg_len2, 0.0, 1.0)
            dist = np.hypot(du - t * seg[0], dv - t * seg[1]) / px_m
            alpha = np.clip(1.5 - dist, 0.0, 1.0) * brightness
            if texture is not None:
                alpha = alpha * texture(t)
            np.maximum(img, alpha, out=img)

        # striker plate
        tex = None
        if cfg.striker_texture == "dotted":
            period = 0.015 / max(state.striker.length, 1e-9)
            tex = lambda t: np.where((t / period) % 1.0 < 0.5, 1.0, 0.25)
        stroke(to_cam(state.striker.start), to_cam(state.striker.end), 0.9, tex)
        # match shaft: grip point to tip
        grip_w = state.ee_pose.translation + state.ee_pose.rotation.apply(GRIP_LOCAL)
        tip_w = state.tip_position()
        stroke(to_cam(grip_w), to_cam(tip_w), 0.7)
        # gripper jaws are rigid in the wrist frame
        stroke((-0.009, -0.018), (-0.009, 0.004), 0.5)
        stroke((0.009, -0.018), (0.009, 0.004), 0.5)

        img = np.clip(img * cfg.illumination, 0.0, 1.0)
        return img.astype(np.float32)

    def _render_tactile(self, state: WorldState, rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        tsize = cfg.tactile_size
        counts = np.zeros((tsize, tsize, 2), dtype=np.uint16)
        c = state.contact
        grid_res = cfg.tactile_window / tsize
        d_force = c.d_force if abs(c.d_force) >= cfg.force_change_gate else 0.0
        d_point = c.d_point if c.d_point >= grid_res else 0.0
        rate = cfg.events_per_newton * abs(d_force) + cfg.events_per_meter * d_point
        if rate <= 0.0:
            return counts
        # blob center: contact point relative to the tip, in the wrist frame
        tip = state.tip_position()
        offset = state.ee_pose.rotation.inverse().apply(c.contact_point - tip)
        half = cfg.tactile_window / 2.0
        cu = np.clip(offset[1], -half, half)
        cv = np.clip(offset[2], -half, half)
        axis = (np.arange(tsize) + 0.5) * grid_res - half
        gu, gv = np.meshgrid(axis, axis)
        sigma = 2.0 * grid_res
        w = np.exp(-((gu - cu) ** 2 + (gv - cv) ** 2) / (2 * sigma**2))
        w /= w.sum()
        channel = 0 if d_force >= 0.0 else 1
        counts[:, :, channel] = rng.poisson(rate * w).astype(np.uint16)
        return counts


# ---------------------------------------------------------------------------
# Scripted expert
# ---------------------------------------------------------------------------

@dataclass
class ExpertParams:
    press_depth: float = 0.006  # m attempted -> ~2.4 N at k=400
    standoff: float = 0.012  # m above the contact point during approach
    contact_arc: float = 0.035  # m along the plate where pressing starts
    approach_gain: float = 0.55
    approach_clamp: float = 0.012  # m per step
    press_speed: float = 0.08  # m/s descending
    hold_gain: float = 0.15  # weak depth correction during the sweep
    sweep_speed: float = 0.30  # m/s along the plate
    rot_step_deg: float = 2.0
    jitter_translation: float = 0.001  # m, demonstration diversity
    jitter_rotation_deg: float = 0.5


def scripted_expert(
    state: WorldState,
    rng: np.random.Generator | None = None,
    n_actions: int = 16,
    params: ExpertParams | None = None,
    config: ScenarioConfig | None = None,
) -> ActionSequence:
    """Three-phase strike plan: approach, press, accelerate along the plate.

    Returns the next `n_actions` relative poses (expressed in the current
    end-effector frame) at fixed control spacing, with a small seeded
    jitter on every waypoint. Pass rng=None for the deterministic plan.
    """
    p = params or ExpertParams()
    cfg = config or ScenarioConfig()
    striker = state.striker
    d, n = striker.direction, striker.normal
    contact_pt = striker.start + p.contact_arc * d

    ee_p = state.ee_pose.translation.copy()
    ee_r = state.ee_pose.rotation
    offset_p = state.grasp_offset.translation
    tilt = lg.log_so3(state.grasp_offset.rotation)[0]

    rot_step = math.radians(p.rot_step_deg)
    poses = []
    ee_w = lg.log_so3(ee_r)[0]
    target_w = -tilt  # undo the grasp tilt for a consistent attack angle
    for _ in range(n_actions):
        # rotation: move toward the target attack angle, clamped per step
        dw = np.clip(target_w - ee_w, -rot_step, rot_step)
        ee_w = ee_w + dw
        r_i = lg.exp_so3(np.array([ee_w, 0.0, 0.0]))
        tip = ee_p + r_i.apply(offset_p)

        rel = tip - striker.start
        depth = float(-(rel @ n))  # > 0 once the tip is past the surface
        along = float(rel @ d)
        predicted_force = cfg.k_normal * max(depth, 0.0)
        if predicted_force >= cfg.force_min * 1.2:
            # accelerate: hold depth, move along the plate
            hold = (p.press_depth - depth) * p.hold_gain
            step_vec = d * (p.sweep_speed * cfg.control_dt) - n * hold
        elif abs(along - p.contact_arc) < 0.006:
            # aligned above the contact point: descend toward the target depth
            press_target = contact_pt - p.press_depth * n
            to_press = press_target - tip
            step = p.press_speed * cfg.control_dt
            norm = float(np.linalg.norm(to_press))
            step_vec = to_press if norm <= step else to_press * (step / norm)
        else:
            approach_target = contact_pt + p.standoff * n
            to_standoff = approach_target - tip
            step_vec = to_standoff * p.approach_gain
            norm = float(np.linalg.norm(step_vec))
            if norm > p.approach_clamp:
                step_vec = step_vec * (p.approach_clamp / norm)
        tip = tip + step_vec
        ee_p = tip - r_i.apply(offset_p)
        if rng is not None:
            ee_p = ee_p + np.array([0.0, *rng.normal(0.0, p.jitter_translation, 2)])
            r_i = lg.exp_so3(
                np.array([ee_w + rng.normal(0.0, math.radians(p.jitter_rotation_deg)), 0.0, 0.0])
            )
        ee_p[0] = 0.0
        poses.append(lg.Pose(ee_p.copy(), r_i))

    inv0 = lg.inverse(state.ee_pose)
    return ActionSequence.from_poses([lg.compose(inv0, pose) for pose in poses])


# ---------------------------------------------------------------------------
# Outcome classification over recorded episodes
# ---------------------------------------------------------------------------

def classify_outcome(episode) -> Outcome:
    """Classify a terminated episode from its per-frame contact telemetry.

    Accepts any object with `.frames` (each exposing `.contact` and
    `.match_state`) and a `.scenario` dict carrying `timeout_s`.
    """
    frames = episode.frames
    if not frames:
        raise ValueError("empty episode")
    last_state = frames[-1].match_state
    timeout = float(episode.scenario.get("timeout_s", 10.0))
    last_time = float(frames[-1].wall_time)
    if last_state == MatchState.UNLIT.value and last_time < timeout - 1e-9:
        raise ValueError("episode not terminated: match unlit before timeout")
    if last_state == MatchState.LIT.value:
        return Outcome.SUCCESS
    if last_state == MatchState.SLIPPED.value:
        return Outcome.TOO_MUCH_FORCE
    tip = any(f.contact.in_contact for f in frames)
    shaft = any(f.contact.shaft_contact for f in frames)
    valid = any(f.contact.in_contact and f.contact.valid_location for f in frames)
    if not tip and not shaft:
        return Outcome.NO_CONTACT
    if not valid:
        return Outcome.WRONG_LOCATION
    return Outcome.INSUFFICIENT_FORCE


def reset(config: ScenarioConfig, seed: int) -> tuple[WorldState, Observation, MatchStrikeSim]:
    """Convenience wrapper building a simulator and resetting it."""
    sim = MatchStrikeSim(config)
    state, obs = sim.reset(seed)
    return state, obs, sim
