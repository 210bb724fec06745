"""Per-keyframe VIO health checks, evaluated hierarchically.

A keyframe is judged against five conditions, most important first; the
verdict carries the first criterion that failed:

1. keyframe timeout — no keyframe for longer than ``kf_wait_time`` while the
   vehicle is commanded to move (stationary vehicles are exempt);
2. too few triangulated 3D keypoints with detections in this keyframe;
3. a starved image quadrant, checked only when the total detection count is
   below ``10 * min_kps_per_quadrant`` (a dense cluster of many detections in
   one corner is still usable);
4. ratio of newly triangulated keypoints to total keypoints above 0.75;
5. ratio of keypoints with below-average detector response above 0.85.

Count comparisons are strict ``<`` against their thresholds and ratio
comparisons strict ``>``; a keyframe with zero keypoints fails criterion 2.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass


class HealthStatus(enum.Enum):
    HEALTHY = "healthy"
    UNHEALTHY = "unhealthy"


class FailReason(enum.Enum):
    KEYFRAME_TIMEOUT = "keyframe_timeout"
    FEW_TRACKED_KEYPOINTS = "few_tracked_keypoints"
    QUADRANT_STARVATION = "quadrant_starvation"
    HIGH_NEW_KEYPOINT_RATIO = "high_new_keypoint_ratio"
    WEAK_FEATURE_RESPONSES = "weak_feature_responses"


@dataclass(frozen=True)
class HealthVerdict:
    status: HealthStatus
    reason: FailReason | None = None

    def __post_init__(self):
        if (self.status is HealthStatus.UNHEALTHY) != (self.reason is not None):
            raise ValueError("reason must be present iff unhealthy")

    @property
    def healthy(self) -> bool:
        return self.status is HealthStatus.HEALTHY


HEALTHY = HealthVerdict(HealthStatus.HEALTHY)


def unhealthy(reason: FailReason) -> HealthVerdict:
    return HealthVerdict(HealthStatus.UNHEALTHY, reason)


@dataclass(frozen=True)
class KeyframeStats:
    """Feature bookkeeping for one keyframe.

    ``tracked_3d_kps`` counts triangulated 3D keypoints that have detections
    in this keyframe; ``detections_per_quadrant`` splits the detections over
    the four image quadrants; ``new_kps`` are keypoints triangulated for the
    first time; ``weak_response_kps`` have detector response below the
    keyframe's mean response.
    """

    timestamp: float
    tracked_3d_kps: int
    total_detections: int
    detections_per_quadrant: tuple[int, int, int, int]
    new_kps: int
    total_kps: int
    weak_response_kps: int

    def __post_init__(self):
        q = tuple(int(v) for v in self.detections_per_quadrant)
        if len(q) != 4:
            raise ValueError("detections_per_quadrant must have 4 entries")
        object.__setattr__(self, "detections_per_quadrant", q)
        counts = (self.tracked_3d_kps, self.total_detections, self.new_kps,
                  self.total_kps, self.weak_response_kps) + q
        if any(c < 0 for c in counts):
            raise ValueError("keyframe counts must be non-negative")
        if sum(q) != self.total_detections:
            raise ValueError(
                f"quadrant counts sum {sum(q)} != total_detections {self.total_detections}"
            )
        if self.new_kps > self.total_kps:
            raise ValueError("new_kps exceeds total_kps")
        if self.weak_response_kps > self.total_kps:
            raise ValueError("weak_response_kps exceeds total_kps")


@dataclass(frozen=True)
class HealthParams:
    kf_wait_time: float = 2.0
    min_kps: int = 15
    min_kps_per_quadrant: int = 2
    new_kp_ratio_max: float = 0.75
    weak_response_ratio_max: float = 0.85
    stationary_speed_eps: float = 0.05

    def __post_init__(self):
        if self.kf_wait_time <= 0 or self.min_kps <= 0 or self.min_kps_per_quadrant <= 0:
            raise ValueError("thresholds must be positive")
        for r in (self.new_kp_ratio_max, self.weak_response_ratio_max):
            if not 0.0 < r <= 1.0:
                raise ValueError(f"ratio threshold {r} outside (0, 1]")
        if self.stationary_speed_eps < 0 or not math.isfinite(self.stationary_speed_eps):
            raise ValueError("bad stationary_speed_eps")


def evaluate_timeout(
    now: float, last_kf_time: float, commanded_speed: float, params: HealthParams
) -> HealthVerdict:
    """Criterion 1: keyframe silence while the vehicle is moving."""
    if now < last_kf_time:
        raise ValueError(f"now={now} precedes last keyframe time {last_kf_time}")
    gap = now - last_kf_time
    if gap > params.kf_wait_time and abs(commanded_speed) > params.stationary_speed_eps:
        return unhealthy(FailReason.KEYFRAME_TIMEOUT)
    return HEALTHY


def evaluate_keyframe(stats: KeyframeStats, params: HealthParams) -> HealthVerdict:
    """Criteria 2-5 on a keyframe's feature statistics, first failure wins."""
    if stats.tracked_3d_kps < params.min_kps or stats.total_kps == 0:
        return unhealthy(FailReason.FEW_TRACKED_KEYPOINTS)
    if stats.total_detections < 10 * params.min_kps_per_quadrant:
        if any(c < params.min_kps_per_quadrant for c in stats.detections_per_quadrant):
            return unhealthy(FailReason.QUADRANT_STARVATION)
    if stats.new_kps / stats.total_kps > params.new_kp_ratio_max:
        return unhealthy(FailReason.HIGH_NEW_KEYPOINT_RATIO)
    if stats.weak_response_kps / stats.total_kps > params.weak_response_ratio_max:
        return unhealthy(FailReason.WEAK_FEATURE_RESPONSES)
    return HEALTHY


# --- keyframe-stats log records (for replay tests and stream files) -----------

STATS_FIELDS = (
    "timestamp tracked_3d_kps total_detections q0 q1 q2 q3 "
    "new_kps total_kps weak_response_kps"
)


def stats_to_record(stats: KeyframeStats) -> str:
    q = stats.detections_per_quadrant
    return (
        f"{stats.timestamp:.6f} {stats.tracked_3d_kps} {stats.total_detections} "
        f"{q[0]} {q[1]} {q[2]} {q[3]} {stats.new_kps} {stats.total_kps} "
        f"{stats.weak_response_kps}"
    )


def stats_from_record(line: str) -> KeyframeStats:
    parts = line.split()
    if len(parts) != 10:
        raise ValueError(f"expected 10 fields ({STATS_FIELDS}), got {len(parts)}")
    return KeyframeStats(
        timestamp=float(parts[0]),
        tracked_3d_kps=int(parts[1]),
        total_detections=int(parts[2]),
        detections_per_quadrant=(int(parts[3]), int(parts[4]), int(parts[5]), int(parts[6])),
        new_kps=int(parts[7]),
        total_kps=int(parts[8]),
        weak_response_kps=int(parts[9]),
    )
