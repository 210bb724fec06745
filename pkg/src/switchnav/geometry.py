"""SE(3) poses, quaternion conversions, trajectory alignment and ATE metrics.

Conventions used throughout the package:

* quaternions are Hamilton, world-from-body, stored as (w, x, y, z) and
  normalized after every operation that produces one;
* rigid transforms carry a 3x3 rotation matrix and a 3-vector translation,
  acting on points as ``p' = R @ p + t``;
* tangent vectors are 6-dim ``[rho, theta]`` (translation part first).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_QUAT_NORM_TOL = 1e-6


class GeometryError(ValueError):
    """Invalid geometric input (zero quaternion, bad shapes, degenerate data)."""


class InsufficientDataError(GeometryError):
    """Not enough associated samples for the requested computation."""


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3).copy()
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"non-finite 3-vector: {a}")
    return a


def _as_quat(q) -> np.ndarray:
    a = np.asarray(q, dtype=float).reshape(4).copy()
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"non-finite quaternion: {a}")
    n = np.linalg.norm(a)
    if n < _QUAT_NORM_TOL:
        raise GeometryError("zero-norm quaternion")
    return a / n


@dataclass(frozen=True)
class Pose:
    """World-frame pose: position (m) plus unit quaternion (w, x, y, z)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _as_vec3(self.position))
        object.__setattr__(self, "orientation", _as_quat(self.orientation))
        self.position.setflags(write=False)
        self.orientation.setflags(write=False)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def to_transform(self) -> "RigidTransform":
        return RigidTransform(quat_to_rotation(self.orientation), self.position)


@dataclass(frozen=True)
class RigidTransform:
    """Rigid body transform: orthonormal rotation (det +1) and translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3).copy()
        if not np.all(np.isfinite(r)):
            raise GeometryError("non-finite rotation matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", _as_vec3(self.translation))
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_translation(x: float, y: float, z: float) -> "RigidTransform":
        return RigidTransform(np.eye(3), np.array([x, y, z], dtype=float))

    def to_pose(self) -> Pose:
        return Pose(self.translation, rotation_to_quat(self.rotation))

    def apply(self, point) -> np.ndarray:
        return self.rotation @ _as_vec3(point) + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z).

    The input is normalized internally; a (near-)zero quaternion raises
    :class:`GeometryError`.
    """
    w, x, y, z = _as_quat(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix, w >= 0."""
    r = np.asarray(r, dtype=float)
    t = np.trace(r)
    if t > 0.0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            q = np.array(
                [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
            )
        elif i == 1:
            s = math.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
            q = np.array(
                [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
            )
        else:
            s = math.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
            q = np.array(
                [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
            )
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a*b of (w, x, y, z) quaternions, normalized."""
    aw, ax, ay, az = _as_quat(a)
    bw, bx, by, bz = _as_quat(b)
    q = np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )
    return q / np.linalg.norm(q)


def yaw_quat(yaw: float) -> np.ndarray:
    """Quaternion for a rotation of ``yaw`` radians about world z."""
    return np.array([math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0)])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a then b in world terms: acts on points as a(b(p))."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


def relative(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Displacement taking a to b, i.e. invert(a) composed with b."""
    return compose(invert(a), b)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle (rad) of a rotation matrix."""
    c = (np.trace(r) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def transform_distance(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """(translation distance m, rotation angle rad) between two transforms.

    The angle is the log-map norm, which stays accurate for angles far below
    the resolution of the acos-of-trace formula (~1e-8 rad).
    """
    d = relative(a, b)
    return float(np.linalg.norm(d.translation)), float(np.linalg.norm(so3_log(d.rotation)))


# --- SO(3)/SE(3) tangent-space machinery -------------------------------------
#
# Small-angle branches switch to series expansions below _SMALL_ANGLE to keep
# the coefficients well conditioned.

_SMALL_ANGLE = 1e-7


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(theta) -> np.ndarray:
    """Rotation matrix of a rotation vector (Rodrigues)."""
    theta = np.asarray(theta, dtype=float).reshape(3)
    angle = float(np.linalg.norm(theta))
    k = skew(theta)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(angle) / angle
    b = (1.0 - math.cos(angle)) / (angle * angle)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix; handles angles near 0 and pi."""
    r = np.asarray(r, dtype=float)
    angle = rotation_angle(r)
    if angle < _SMALL_ANGLE:
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if math.pi - angle < 1e-6:
        # Axis from the dominant diagonal of (R + I)/2.
        m = (r + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(m)))
        axis = np.zeros(3)
        axis[i] = math.sqrt(max(m[i, i], 0.0))
        for j in range(3):
            if j != i:
                axis[j] = m[i, j] / axis[i]
        axis /= np.linalg.norm(axis)
        # Pick the sign consistent with the off-diagonal skew part.
        v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if np.dot(axis, v) < 0.0:
            axis = -axis
        return axis * angle
    scale = angle / (2.0 * math.sin(angle))
    return scale * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])


def so3_left_jacobian(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(3)
    angle = float(np.linalg.norm(theta))
    k = skew(theta)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    a2 = angle * angle
    c1 = (1.0 - math.cos(angle)) / a2
    c2 = (angle - math.sin(angle)) / (a2 * angle)
    return np.eye(3) + c1 * k + c2 * (k @ k)


def so3_left_jacobian_inv(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(3)
    angle = float(np.linalg.norm(theta))
    k = skew(theta)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    half = angle / 2.0
    cot = 1.0 / math.tan(half)
    c = (1.0 - half * cot) / (angle * angle)
    return np.eye(3) - 0.5 * k + c * (k @ k)


def se3_exp(xi) -> RigidTransform:
    """Exponential map of a 6-vector [rho, theta]."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, theta = xi[:3], xi[3:]
    return RigidTransform(so3_exp(theta), so3_left_jacobian(theta) @ rho)


def se3_log(t: RigidTransform) -> np.ndarray:
    """Logarithm map: 6-vector [rho, theta] with se3_exp(se3_log(t)) == t."""
    theta = so3_log(t.rotation)
    rho = so3_left_jacobian_inv(theta) @ t.translation
    return np.concatenate([rho, theta])


def se3_adjoint(t: RigidTransform) -> np.ndarray:
    """6x6 adjoint: Exp(Ad(T) xi) == T Exp(xi) T^-1 for [rho, theta] twists."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = t.rotation
    ad[:3, 3:] = skew(t.translation) @ t.rotation
    ad[3:, 3:] = t.rotation
    return ad


def _se3_q_matrix(rho, theta) -> np.ndarray:
    """Top-right block of the SE(3) left Jacobian (Barfoot-style closed form)."""
    rho = np.asarray(rho, dtype=float).reshape(3)
    theta = np.asarray(theta, dtype=float).reshape(3)
    angle = float(np.linalg.norm(theta))
    rx = skew(rho)
    tx = skew(theta)
    txrx = tx @ rx
    rxtx = rx @ tx
    txrxtx = txrx @ tx
    if angle < 1e-4:
        c1 = 1.0 / 6.0 - angle * angle / 120.0
        c2 = -1.0 / 24.0 + angle * angle / 720.0
        c3 = -1.0 / 2.0 * (c2 - 3.0 * (-1.0 / 120.0 + angle * angle / 5040.0))
    else:
        a2 = angle * angle
        c1 = (angle - math.sin(angle)) / (a2 * angle)
        c2 = (1.0 - a2 / 2.0 - math.cos(angle)) / (a2 * a2)
        c3 = -1.0 / 2.0 * (c2 - 3.0 * (angle - math.sin(angle) - a2 * angle / 6.0) / (a2 * a2 * angle))
    q = 0.5 * rx
    q += c1 * (txrx + rxtx + txrxtx)
    q -= c2 * (tx @ txrx + rxtx @ tx - 3.0 * txrxtx)
    q += c3 * (txrxtx @ tx + tx @ txrxtx)
    return q


def se3_left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, theta = xi[:3], xi[3:]
    j = so3_left_jacobian(theta)
    out = np.zeros((6, 6))
    out[:3, :3] = j
    out[:3, 3:] = _se3_q_matrix(rho, theta)
    out[3:, 3:] = j
    return out


def se3_left_jacobian_inv(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, theta = xi[:3], xi[3:]
    jinv = so3_left_jacobian_inv(theta)
    q = _se3_q_matrix(rho, theta)
    out = np.zeros((6, 6))
    out[:3, :3] = jinv
    out[:3, 3:] = -jinv @ q @ jinv
    out[3:, 3:] = jinv
    return out


def se3_right_jacobian_inv(xi) -> np.ndarray:
    """Inverse right Jacobian: d/d(delta) log(Exp(xi) Exp(delta)) at delta=0."""
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float).reshape(6))


# --- trajectories -------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered pose sequence with strictly increasing timestamps."""

    timestamps: np.ndarray
    poses: tuple[Pose, ...]

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1).copy()
        if len(ts) != len(self.poses):
            raise GeometryError("timestamp/pose length mismatch")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0.0):
            raise GeometryError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", tuple(self.poses))
        self.timestamps.setflags(write=False)

    def __len__(self) -> int:
        return len(self.timestamps)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.position for p in self.poses])

    def path_length(self) -> float:
        pos = self.positions()
        if len(pos) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1)))

    @staticmethod
    def from_samples(samples) -> "Trajectory":
        """Build from an iterable of (timestamp, Pose)."""
        samples = list(samples)
        return Trajectory(
            np.array([s[0] for s in samples], dtype=float),
            tuple(s[1] for s in samples),
        )


DEFAULT_MAX_TIME_GAP = 0.05


def associate(
    est: Trajectory, ref: Trajectory, max_gap: float = DEFAULT_MAX_TIME_GAP
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-timestamp association; returns index arrays (est_idx, ref_idx).

    Each estimate sample is paired with the nearest reference sample; pairs
    further apart than ``max_gap`` seconds are dropped.
    """
    if len(est) == 0 or len(ref) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    rt = ref.timestamps
    pos = np.searchsorted(rt, est.timestamps)
    lo = np.clip(pos - 1, 0, len(rt) - 1)
    hi = np.clip(pos, 0, len(rt) - 1)
    pick = np.where(
        np.abs(rt[hi] - est.timestamps) < np.abs(rt[lo] - est.timestamps), hi, lo
    )
    ok = np.abs(rt[pick] - est.timestamps) <= max_gap
    return np.nonzero(ok)[0], pick[ok]


def se3_align(
    est: Trajectory, ref: Trajectory, max_gap: float = DEFAULT_MAX_TIME_GAP
) -> RigidTransform:
    """Rigid (no-scale) least-squares alignment of est onto ref.

    Returns the transform minimizing the sum of squared position residuals
    over time-associated pairs, with the SVD determinant correction so the
    rotation is always proper. Raises :class:`InsufficientDataError` with
    fewer than 3 matches.
    """
    ei, ri = associate(est, ref, max_gap)
    if len(ei) < 3:
        raise InsufficientDataError(f"need >= 3 associated samples, got {len(ei)}")
    x = est.positions()[ei]
    y = ref.positions()[ri]
    mx = x.mean(axis=0)
    my = y.mean(axis=0)
    h = (x - mx).T @ (y - my)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = my - r @ mx
    return RigidTransform(r, t)


def rmse_ate(
    est: Trajectory,
    ref: Trajectory,
    align: bool = True,
    max_gap: float = DEFAULT_MAX_TIME_GAP,
) -> float:
    """Root-mean-square absolute translation error in meters.

    With ``align`` the estimate is first rigidly aligned to the reference.
    """
    ei, ri = associate(est, ref, max_gap)
    if len(ei) == 0:
        raise InsufficientDataError("no associated samples")
    x = est.positions()[ei]
    y = ref.positions()[ri]
    if align:
        t = se3_align(est, ref, max_gap)
        x = x @ t.rotation.T + t.translation
    err = x - y
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
