"""Model-based dead reckoning from commanded velocities and absolute attitude.

The vehicle executes motion primitives from a forward speed command ``v_x``
and a heave command ``v_z``. Orientation is taken as an absolute reading from
the IMU each step (no gyro integration). Position advances by first-order
Euler integration of the commanded body velocity rotated into the world
frame; the water-pressure depth reading overrides the integrated z whenever a
depth sample arrives. Because the controller uses the same commands, the
dead-reckoned track reproduces the commanded pattern regardless of what the
vehicle actually did.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, quat_to_rotation

MAX_COMMAND_SPEED = 1.0  # m/s, applies to |v_x| and |v_z|
MAX_STEP_DT = 0.1  # s; larger steps indicate dropped or duplicated ticks

#: Depth convention: +1 means the pressure reading maps directly onto world z
#: (z-down, positive depth); use -1 for a z-up world.
DEFAULT_DEPTH_SIGN = 1.0


class InvalidStepError(ValueError):
    """Raised for non-positive or oversized integration steps."""


@dataclass(frozen=True)
class VelocityCommand:
    """Forward/heave speed command pair (m/s) at a timestamp."""

    v_x: float
    v_z: float
    timestamp: float

    def __post_init__(self):
        if not (math.isfinite(self.v_x) and math.isfinite(self.v_z)):
            raise ValueError("non-finite velocity command")
        if abs(self.v_x) > MAX_COMMAND_SPEED or abs(self.v_z) > MAX_COMMAND_SPEED:
            raise ValueError(
                f"command exceeds max speed {MAX_COMMAND_SPEED} m/s: "
                f"v_x={self.v_x}, v_z={self.v_z}"
            )


@dataclass(frozen=True)
class ImuSample:
    """Absolute attitude reading: unit quaternion (w, x, y, z)."""

    orientation: np.ndarray
    timestamp: float

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"IMU quaternion norm {n} not within 1e-6 of 1")
        object.__setattr__(self, "orientation", q / n)
        self.orientation.setflags(write=False)


@dataclass(frozen=True)
class DepthSample:
    """Absolute water depth (m) from the pressure sensor."""

    depth_z: float
    timestamp: float

    def __post_init__(self):
        if not math.isfinite(self.depth_z):
            raise ValueError("non-finite depth sample")


@dataclass(frozen=True)
class PEState:
    pose: Pose
    last_update: float = 0.0

    @staticmethod
    def initial(pose: Pose | None = None, t: float = 0.0) -> "PEState":
        return PEState(pose if pose is not None else Pose.identity(), t)


def pe_step(state: PEState, imu: ImuSample, cmd: VelocityCommand, dt: float) -> PEState:
    """Advance the dead-reckoned pose by one integration step.

    Orientation is replaced by the IMU reading; position moves by the body
    velocity ``[v_x, 0, v_z]`` rotated into the world frame, times ``dt``.
    """
    if not (dt > 0.0) or dt > MAX_STEP_DT:
        raise InvalidStepError(f"step dt={dt} outside (0, {MAX_STEP_DT}]")
    r = quat_to_rotation(imu.orientation)
    body_vel = np.array([cmd.v_x, 0.0, cmd.v_z])
    position = state.pose.position + r @ body_vel * dt
    return PEState(Pose(position, imu.orientation), state.last_update + dt)


def pe_apply_depth(
    state: PEState, depth: DepthSample, depth_sign: float = DEFAULT_DEPTH_SIGN
) -> PEState:
    """Substitute the absolute depth reading for the integrated z."""
    p = state.pose.position.copy()
    p[2] = depth_sign * depth.depth_z
    return PEState(Pose(p, state.pose.orientation), state.last_update)


def pe_reset(state: PEState, pose: Pose) -> PEState:
    """Replace the pose (e.g. re-seed from another estimator); keeps the clock."""
    return PEState(pose, state.last_update)


def integrate_commands(
    quats: np.ndarray,
    v_x: np.ndarray,
    v_z: np.ndarray,
    dt: float,
    origin: np.ndarray | None = None,
    depth: np.ndarray | None = None,
    depth_sign: float = DEFAULT_DEPTH_SIGN,
) -> np.ndarray:
    """Vectorized equivalent of repeated :func:`pe_step` calls.

    ``quats`` is (N, 4) in (w, x, y, z) order; returns (N, 3) positions after
    each of the N steps. When ``depth`` (length N) is given, z is overwritten
    by the depth reading after every step, mirroring a 1:1 interleaved
    step/depth stream. Agrees with the step-wise path to float precision.
    """
    quats = np.asarray(quats, dtype=float)
    n = len(quats)
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    # Rotate [v_x, 0, v_z] by each quaternion (columns of the rotation matrix).
    dx = (1 - 2 * (y * y + z * z)) * v_x + 2 * (x * z + w * y) * v_z
    dy = (2 * (x * y + w * z)) * v_x + 2 * (y * z - w * x) * v_z
    dz = (2 * (x * z - w * y)) * v_x + (1 - 2 * (x * x + y * y)) * v_z
    steps = np.stack([dx, dy, dz], axis=1) * dt
    pos = np.cumsum(steps, axis=0)
    if origin is not None:
        pos = pos + np.asarray(origin, dtype=float).reshape(1, 3)
    if depth is not None:
        pos = pos.copy()
        pos[:, 2] = depth_sign * np.asarray(depth, dtype=float).reshape(n)
    return pos
