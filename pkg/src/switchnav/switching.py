"""Health-monitored hard switching between VIO and scaled dead reckoning.

The robust pose tracks whichever source is currently trusted, *locally*: at a
switch instant the current robust pose and the incoming source's pose are
captured as anchors, and from then on the robust pose is

    robust = anchor_robust  o  inv(anchor_source)  o  source_pose

so the source's relative displacement is replayed on top of the pose held at
the switch. The anchor pair stays constant until the next switch, which makes
the robust pose continuous across switches by construction.

Dead-reckoned positions are corrected by a translation scale estimated as the
ratio of VIO-travelled to dead-reckoned distance over healthy segments (the
forward speed command is only correct up to external forces such as current).
Switching is debounced: a run of consecutive unhealthy keyframe verdicts is
required to leave VIO, and a longer run of healthy ones to return to it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, RigidTransform, compose, invert, quat_to_rotation
from .health_monitor import HealthVerdict


class EstimatorMode(enum.Enum):
    VIO_TRACKING = "vio"
    PE_TRACKING = "pe"


@dataclass(frozen=True)
class SwitchParams:
    fail_streak_to_switch: int = 3
    ok_streak_to_switch: int = 5
    scale_min_segment_length: float = 0.5  # m of dead-reckoned travel

    def __post_init__(self):
        if self.fail_streak_to_switch < 1 or self.ok_streak_to_switch < 1:
            raise ValueError("debounce counts must be >= 1")
        if self.scale_min_segment_length <= 0:
            raise ValueError("scale_min_segment_length must be positive")


@dataclass(frozen=True)
class SwitchEvent:
    timestamp: float
    from_mode: EstimatorMode
    to_mode: EstimatorMode
    robust_before: RigidTransform
    robust_after: RigidTransform

    def record(self) -> str:
        t = self.robust_after.translation
        return (
            f"{self.timestamp:.6f} {self.from_mode.value} {self.to_mode.value} "
            f"{t[0]:.9f} {t[1]:.9f} {t[2]:.9f}"
        )


@dataclass
class SwitchingState:
    """Mutable estimator state; advanced by a single owner."""

    mode: EstimatorMode = EstimatorMode.VIO_TRACKING
    robust: RigidTransform = field(default_factory=RigidTransform.identity)
    anchor_robust: RigidTransform = field(default_factory=RigidTransform.identity)
    anchor_pe: RigidTransform = field(default_factory=RigidTransform.identity)
    anchor_vio: RigidTransform = field(default_factory=RigidTransform.identity)
    scale: float = 1.0
    fail_streak: int = 0
    ok_streak: int = 0
    switch_log: list[SwitchEvent] = field(default_factory=list)
    # Latest scaled dead-reckoned pose, refreshed by ingest_pe; used when a
    # switch captures its anchors.
    latest_pe_scaled: RigidTransform = field(default_factory=RigidTransform.identity)
    # Cumulative healthy-window path sums feeding the scale estimate.
    vio_path_accum: float = 0.0
    pe_path_accum: float = 0.0


def scaled_pe_pose(
    t_pe_raw: RigidTransform, scale: float, pe_origin: RigidTransform
) -> RigidTransform:
    """Scale the dead-reckoned translation about an origin; rotation unchanged."""
    if not scale > 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    o = pe_origin.translation
    return RigidTransform(t_pe_raw.rotation, o + scale * (t_pe_raw.translation - o))


def _pairwise_body_path(samples: list[tuple[float, Pose]]) -> float:
    """Sum of body-frame displacement norms between consecutive samples."""
    total = 0.0
    for (_, a), (_, b) in zip(samples, samples[1:]):
        r_inv = quat_to_rotation(a.orientation).T
        total += float(np.linalg.norm(r_inv @ (b.position - a.position)))
    return total


def update_scale(
    state: SwitchingState,
    vio_keyframe_poses: list[tuple[float, Pose]],
    pe_poses_at_same_times: list[tuple[float, Pose]],
    params: SwitchParams,
) -> SwitchingState:
    """Fold a healthy keyframe window into the travelled-distance ratio.

    The two sequences must be time-matched pairwise. The scale is only
    replaced once the accumulated dead-reckoned path length reaches
    ``scale_min_segment_length``; until then it keeps its previous value.
    """
    if state.mode is not EstimatorMode.VIO_TRACKING:
        raise ValueError("scale updates only while VIO is tracking")
    if len(vio_keyframe_poses) != len(pe_poses_at_same_times):
        raise ValueError(
            f"sequence length mismatch: {len(vio_keyframe_poses)} vs "
            f"{len(pe_poses_at_same_times)}"
        )
    state.vio_path_accum += _pairwise_body_path(vio_keyframe_poses)
    state.pe_path_accum += _pairwise_body_path(pe_poses_at_same_times)
    if state.pe_path_accum >= params.scale_min_segment_length:
        state.scale = state.vio_path_accum / state.pe_path_accum
    return state


def ingest_pe(state: SwitchingState, t_pe_scaled: RigidTransform, t: float) -> RigidTransform:
    """Feed a scaled dead-reckoned pose; returns the current robust pose.

    While VIO is tracking this only refreshes the stored pose used for anchor
    capture; while dead reckoning is active it moves the robust pose.
    """
    state.latest_pe_scaled = t_pe_scaled
    if state.mode is EstimatorMode.PE_TRACKING:
        state.robust = compose(
            compose(state.anchor_robust, invert(state.anchor_pe)), t_pe_scaled
        )
    return state.robust


def ingest_vio(
    state: SwitchingState,
    t_vio: RigidTransform | None,
    verdict: HealthVerdict,
    t: float,
    params: SwitchParams,
) -> RigidTransform:
    """Feed a VIO keyframe pose plus its health verdict; returns the robust pose.

    ``t_vio`` may be None for verdict-only ticks (keyframe-timeout polls with
    no pose attached); those count toward the failure debounce like any other
    unhealthy verdict.
    """
    if state.mode is EstimatorMode.VIO_TRACKING:
        if verdict.healthy and t_vio is not None:
            state.fail_streak = 0
            state.robust = compose(
                compose(state.anchor_robust, invert(state.anchor_vio)), t_vio
            )
        elif not verdict.healthy:
            state.fail_streak += 1
            if state.fail_streak >= params.fail_streak_to_switch:
                _switch_to_pe(state, t)
    else:
        if verdict.healthy and t_vio is not None:
            state.ok_streak += 1
            if state.ok_streak >= params.ok_streak_to_switch:
                _switch_to_vio(state, t_vio, t)
        elif not verdict.healthy:
            state.ok_streak = 0
    return state.robust


def _switch_to_pe(state: SwitchingState, t: float) -> None:
    before = state.robust
    state.anchor_robust = state.robust
    state.anchor_pe = state.latest_pe_scaled
    state.mode = EstimatorMode.PE_TRACKING
    state.fail_streak = 0
    state.ok_streak = 0
    state.robust = compose(
        compose(state.anchor_robust, invert(state.anchor_pe)), state.latest_pe_scaled
    )
    state.switch_log.append(
        SwitchEvent(t, EstimatorMode.VIO_TRACKING, EstimatorMode.PE_TRACKING, before, state.robust)
    )


def _switch_to_vio(state: SwitchingState, t_vio: RigidTransform, t: float) -> None:
    before = state.robust
    state.anchor_robust = state.robust
    state.anchor_vio = t_vio
    state.mode = EstimatorMode.VIO_TRACKING
    state.fail_streak = 0
    state.ok_streak = 0
    state.robust = compose(
        compose(state.anchor_robust, invert(state.anchor_vio)), t_vio
    )
    state.switch_log.append(
        SwitchEvent(t, EstimatorMode.PE_TRACKING, EstimatorMode.VIO_TRACKING, before, state.robust)
    )


def apply_correction(state: SwitchingState, correction: RigidTransform) -> SwitchingState:
    """Shift the live estimate after a graph optimization moved past poses.

    The correction (optimized over pre-optimization pose of the newest
    keyframe) is applied to the robust pose and the robust-side anchor, so
    new relative displacements continue from the optimized trajectory. The
    source-side anchors live in their estimators' own frames and stay put.
    """
    state.robust = compose(correction, state.robust)
    state.anchor_robust = compose(correction, state.anchor_robust)
    return state
