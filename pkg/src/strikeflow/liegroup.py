"""SO(3)/SE(3) primitives: quaternion rotations, poses, exp/log maps.

Everything here is float64. Scalar types (Rotation, Pose, Twist) wrap
vectorized quaternion kernels that also operate on stacked arrays, so the
flow-matching hot path can process whole batches without Python loops.

Quaternions are stored as [w, x, y, z] with unit norm; the serialization
convention is qw >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this angle (rad) exp/log switch to their Taylor expansions.
SMALL_ANGLE = 1e-8


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# Vectorized quaternion kernels. All accept (..., k) stacks.
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading dimensions."""
    w1, x1, y1, z1 = (q1[..., i] for i in range(4))
    w2, x2, y2, z2 = (q2[..., i] for i in range(4))
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate 3-vectors v by unit quaternions q."""
    qv = q[..., 1:]
    qw = q[..., :1]
    t = 2.0 * np.cross(qv, v)
    return v + qw * t + np.cross(qv, t)


def quat_exp(w: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vectors -> unit quaternions (Rodrigues exponential).

    For angles below SMALL_ANGLE uses the series sin(t/2)/t = 1/2 - t^2/48
    to avoid dividing by a vanishing norm.
    """
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < SMALL_ANGLE
    # sin(theta/2)/theta, with Taylor fallback where theta ~ 0
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    q = np.concatenate([np.cos(half), k * w], axis=-1)
    return quat_normalize(q)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Unit quaternions -> principal axis-angle vectors, norm <= pi.

    Quaternion form is robust at angle pi (no trace-based branch needed);
    the sign flip maps to the w >= 0 hemisphere first.
    """
    q = np.asarray(q, dtype=np.float64)
    q = np.where(q[..., :1] < 0.0, -q, q)
    s = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    small = s < SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 2.0 / np.maximum(q[..., :1], 0.5), angle / np.where(small, 1.0, s))
    return k * q[..., 1:]


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = (q[..., i] for i in range(4))
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix -> quaternion via Shepperd's method.

    Branches on the largest of (trace, diagonal entries), which stays
    well-conditioned for rotations near pi where the trace approaches -1.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {m.shape}")
    t = np.trace(m)
    if t > m[0, 0] and t > m[1, 1] and t > m[2, 2]:
        r = np.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array([0.5 * r, (m[2, 1] - m[1, 2]) * s, (m[0, 2] - m[2, 0]) * s, (m[1, 0] - m[0, 1]) * s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        r = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        s = 0.5 / r
        q = np.array([(m[2, 1] - m[1, 2]) * s, 0.5 * r, (m[0, 1] + m[1, 0]) * s, (m[0, 2] + m[2, 0]) * s])
    elif m[1, 1] >= m[2, 2]:
        r = np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2])
        s = 0.5 / r
        q = np.array([(m[0, 2] - m[2, 0]) * s, (m[0, 1] + m[1, 0]) * s, 0.5 * r, (m[1, 2] + m[2, 1]) * s])
    else:
        r = np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2])
        s = 0.5 / r
        q = np.array([(m[1, 0] - m[0, 1]) * s, (m[0, 2] + m[2, 0]) * s, (m[1, 2] + m[2, 1]) * s, 0.5 * r])
    return quat_normalize(q)


def quat_slerp_geodesic(q0: np.ndarray, q1: np.ndarray, t: float | np.ndarray) -> np.ndarray:
    """Geodesic q0 * exp(t * log(q0^-1 q1)); t may broadcast."""
    rel = quat_multiply(quat_conjugate(q0), q1)
    w = quat_log(rel)
    t = np.asarray(t, dtype=np.float64)
    return quat_multiply(q0, quat_exp(t[..., None] * w if t.ndim else t * w))


# ---------------------------------------------------------------------------
# Scalar types
# ---------------------------------------------------------------------------

class Rotation:
    """An SO(3) element backed by a unit quaternion [w, x, y, z]."""

    __slots__ = ("q",)

    def __init__(self, q: np.ndarray, normalize: bool = True):
        q = np.asarray(q, dtype=np.float64).reshape(4)
        _check_finite(q, "quaternion")
        self.q = quat_normalize(q) if normalize else q

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]), normalize=False)

    @staticmethod
    def from_rotvec(w: np.ndarray) -> "Rotation":
        w = np.asarray(w, dtype=np.float64).reshape(3)
        _check_finite(w, "rotation vector")
        return Rotation(quat_exp(w), normalize=False)

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Rotation":
        return Rotation(quat_from_matrix(m), normalize=False)

    @staticmethod
    def about_x(angle: float) -> "Rotation":
        return Rotation.from_rotvec(np.array([angle, 0.0, 0.0]))

    def as_rotvec(self) -> np.ndarray:
        return quat_log(self.q)

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def as_quat(self) -> np.ndarray:
        """Canonical quaternion with qw >= 0."""
        return -self.q if self.q[0] < 0 else self.q.copy()

    def compose(self, other: "Rotation") -> "Rotation":
        # renormalize to bound drift over long composition chains
        return Rotation(quat_multiply(self.q, other.q))

    def inverse(self) -> "Rotation":
        return Rotation(quat_conjugate(self.q), normalize=False)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(v, dtype=np.float64))

    def angle_to(self, other: "Rotation") -> float:
        return float(np.linalg.norm(quat_log(quat_multiply(quat_conjugate(self.q), other.q))))

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return self.compose(other)

    def __repr__(self) -> str:
        return f"Rotation(q={np.round(self.as_quat(), 6)})"


@dataclass
class Pose:
    """SE(3) element: translation (m) plus rotation."""

    translation: np.ndarray
    rotation: Rotation

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_finite(self.translation, "translation")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), Rotation.identity())

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.translation + self.rotation.apply(point)

    def as_array(self) -> np.ndarray:
        """[px, py, pz, qw, qx, qy, qz] with qw >= 0."""
        return np.concatenate([self.translation, self.rotation.as_quat()])

    @staticmethod
    def from_array(a: np.ndarray) -> "Pose":
        a = np.asarray(a, dtype=np.float64).reshape(7)
        return Pose(a[:3], Rotation(a[3:]))

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def __repr__(self) -> str:
        return f"Pose(t={np.round(self.translation, 6)}, {self.rotation})"


@dataclass
class Twist:
    """Body velocity: linear (m per unit time) and angular (rad per unit time)."""

    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=np.float64).reshape(3)
        self.angular = np.asarray(self.angular, dtype=np.float64).reshape(3)
        _check_finite(self.linear, "linear velocity")
        _check_finite(self.angular, "angular velocity")

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------

def exp_so3(w: np.ndarray) -> Rotation:
    """Rodrigues exponential of an axis-angle vector."""
    return Rotation.from_rotvec(w)


def log_so3(r: Rotation) -> np.ndarray:
    """Principal logarithm, result norm <= pi."""
    return r.as_rotvec()


def compose(a: Pose, b: Pose) -> Pose:
    """SE(3) product: rotation a.r * b.r, translation a.p + a.r * b.p."""
    return Pose(a.translation + a.rotation.apply(b.translation), a.rotation.compose(b.rotation))


def inverse(p: Pose) -> Pose:
    r_inv = p.rotation.inverse()
    return Pose(-r_inv.apply(p.translation), r_inv)


def geodesic_interp(r0: Rotation, r1: Rotation, t: float) -> Rotation:
    """r0 * exp(t * log(r0^-1 r1)) for t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation parameter t={t} outside [0, 1]")
    return Rotation(quat_slerp_geodesic(r0.q, r1.q, float(t)), normalize=False)
