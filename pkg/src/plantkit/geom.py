"""Planar geometry and the object-level scene tokenizer.

Poses, oriented boxes, polyline simplification, and the conversion of a
privileged world snapshot into the fixed-layout token set the planner
consumes: ego-relative vehicle tokens followed by route-segment tokens.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .sim.world import WorldState

TWO_PI = 2.0 * math.pi


class InvalidInputError(ValueError):
    """Raised when an operation precondition is violated."""


def norm_angle(yaw: float) -> float:
    """Normalize an angle into [0, 2*pi); the 2*pi endpoint maps to 0."""
    yaw = math.fmod(yaw, TWO_PI)
    if yaw < 0.0:
        yaw += TWO_PI
    return 0.0 if yaw == TWO_PI else yaw


@dataclass(frozen=True)
class Pose2:
    """Position plus heading; yaw is always stored normalized."""

    x: float
    y: float
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", norm_angle(self.yaw))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class OrientedBox:
    """Axis-aligned-in-body rectangle: width across, length along heading."""

    center: Pose2
    width: float
    length: float

    def __post_init__(self):
        if self.width <= 0.0 or self.length <= 0.0:
            raise InvalidInputError(
                f"box extents must be positive, got {self.width}x{self.length}"
            )

    def corners(self) -> np.ndarray:
        """4x2 corner array in world coordinates, counter-clockwise."""
        c, s = math.cos(self.center.yaw), math.sin(self.center.yaw)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.center.x, self.center.y])

    def inflated(self, margin: float) -> "OrientedBox":
        return OrientedBox(self.center, self.width + 2 * margin, self.length + 2 * margin)


class TokenKind(enum.Enum):
    VEHICLE = "vehicle"
    ROUTE_SEGMENT = "route_segment"


@dataclass(frozen=True)
class ObjectToken:
    """One object in the scene as the six attributes fed to the planner.

    z carries the vehicle speed (m/s) or, for route segments, the integer
    ordering index starting at 0 nearest the ego.
    """

    kind: TokenKind
    z: float
    x: float
    y: float
    yaw: float
    w: float
    h: float
    source_id: str | None = None

    def attributes(self) -> np.ndarray:
        return np.array([self.z, self.x, self.y, self.yaw, self.w, self.h])


@dataclass
class RoutePolyline:
    """Dense route points (world frame) with the lane width they belong to."""

    points: np.ndarray
    lane_width: float = 3.5

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 2 or self.points.shape[1] != 2:
            raise InvalidInputError("route polyline needs at least two 2-d points")


@dataclass(frozen=True)
class FovConfig:
    """What the tokenizer is allowed to see around the ego vehicle."""

    d_max: float = 30.0
    side: float = 30.0
    back: float = 30.0
    include_speed: bool = True

    def __post_init__(self):
        if min(self.d_max, self.side, self.back) < 0.0:
            raise InvalidInputError("field-of-view ranges must be non-negative")


# -- frames -----------------------------------------------------------------


def to_ego_frame(world_pose: Pose2, ego_pose: Pose2) -> Pose2:
    """Express ``world_pose`` in the frame centered on the ego.

    Ego position becomes the origin and the ego heading the +x axis.
    """
    dx = world_pose.x - ego_pose.x
    dy = world_pose.y - ego_pose.y
    c, s = math.cos(ego_pose.yaw), math.sin(ego_pose.yaw)
    return Pose2(c * dx + s * dy, -s * dx + c * dy, world_pose.yaw - ego_pose.yaw)


def from_ego_frame(ego_frame_pose: Pose2, ego_pose: Pose2) -> Pose2:
    """Inverse of :func:`to_ego_frame`."""
    c, s = math.cos(ego_pose.yaw), math.sin(ego_pose.yaw)
    x = ego_pose.x + c * ego_frame_pose.x - s * ego_frame_pose.y
    y = ego_pose.y + s * ego_frame_pose.x + c * ego_frame_pose.y
    return Pose2(x, y, ego_frame_pose.yaw + ego_pose.yaw)


def points_to_ego_frame(ego_pose: Pose2, points: np.ndarray) -> np.ndarray:
    """World-frame xy points expressed in the ego frame, shape (N, 2)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    c, s = math.cos(ego_pose.yaw), math.sin(ego_pose.yaw)
    dx = pts[:, 0] - ego_pose.x
    dy = pts[:, 1] - ego_pose.y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=1)


# -- polyline simplification ------------------------------------------------


def _perp_distance(point: np.ndarray, start: np.ndarray, end: np.ndarray) -> float:
    span = end - start
    norm = math.hypot(span[0], span[1])
    if norm == 0.0:
        return math.hypot(*(point - start))
    return abs(span[0] * (start[1] - point[1]) - (start[0] - point[0]) * span[1]) / norm


def rdp_simplify(points: Sequence, epsilon: float) -> np.ndarray:
    """Ramer-Douglas-Peucker simplification.

    Recursively splits at the point farthest from the start-end chord until
    every dropped point lies within ``epsilon`` of the simplified polyline.
    The first and last points always survive.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise InvalidInputError("rdp_simplify needs at least two points")
    if epsilon < 0.0:
        raise InvalidInputError("epsilon must be non-negative")

    keep = np.zeros(pts.shape[0], dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, pts.shape[0] - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d_best, i_best = -1.0, lo
        for i in range(lo + 1, hi):
            d = _perp_distance(pts[i], pts[lo], pts[hi])
            if d > d_best:
                d_best, i_best = d, i
        if d_best > epsilon:
            keep[i_best] = True
            stack.append((lo, i_best))
            stack.append((i_best, hi))
    return pts[keep]


# -- route segmentation -----------------------------------------------------


def build_route_segments(
    simplified: Sequence, n_s: int, l_max: float, lane_width: float
) -> list[ObjectToken]:
    """Turn a simplified ego-frame route into exactly ``n_s`` segment tokens.

    Spans between consecutive points are consumed front to back; a span
    longer than ``l_max`` contributes an l_max-long segment and leaves its
    remainder for the next token. When geometry runs out early, the last
    segment is repeated with an incremented ordering index so the planner
    always receives a fixed-width input.
    """
    pts = np.asarray(simplified, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise InvalidInputError("build_route_segments needs at least two points")
    if n_s < 1:
        raise InvalidInputError("n_s must be at least 1")

    spans: list[tuple[np.ndarray, np.ndarray]] = [
        (pts[i], pts[i + 1]) for i in range(pts.shape[0] - 1)
    ]
    tokens: list[ObjectToken] = []
    idx = 0
    while len(tokens) < n_s and idx < len(spans):
        start, end = spans[idx]
        vec = end - start
        span_len = math.hypot(vec[0], vec[1])
        if span_len <= 1e-12:
            idx += 1
            continue
        if span_len > l_max:
            cut = start + vec * (l_max / span_len)
            spans[idx] = (cut, end)
            end, seg_len = cut, l_max
        else:
            idx += 1
            seg_len = span_len
        mid = 0.5 * (start + end)
        yaw = norm_angle(math.atan2(end[1] - start[1], end[0] - start[0]))
        tokens.append(
            ObjectToken(
                TokenKind.ROUTE_SEGMENT,
                z=float(len(tokens)),
                x=float(mid[0]),
                y=float(mid[1]),
                yaw=yaw,
                w=lane_width,
                h=seg_len,
            )
        )
    if not tokens:
        raise InvalidInputError("route spans are degenerate")
    while len(tokens) < n_s:
        last = tokens[-1]
        tokens.append(
            ObjectToken(
                TokenKind.ROUTE_SEGMENT,
                z=float(len(tokens)),
                x=last.x,
                y=last.y,
                yaw=last.yaw,
                w=last.w,
                h=last.h,
            )
        )
    return tokens


# -- vehicle filtering ------------------------------------------------------


@dataclass(frozen=True)
class VehicleObservation:
    """One candidate vehicle already expressed in the ego frame."""

    source_id: str
    pose: Pose2
    width: float
    length: float
    speed: float


def filter_vehicles(
    vehicles: Iterable[VehicleObservation], fov: FovConfig
) -> list[VehicleObservation]:
    """Keep vehicles inside the configured field of view.

    A vehicle survives iff its center is within d_max radially, within
    ``side`` laterally, and no further than ``back`` behind the ego. With
    speed input disabled the speed attribute is zeroed.
    """
    kept = []
    for obs in vehicles:
        if math.hypot(obs.pose.x, obs.pose.y) > fov.d_max:
            continue
        if abs(obs.pose.y) > fov.side:
            continue
        if obs.pose.x < -fov.back:
            continue
        if not fov.include_speed and obs.speed != 0.0:
            obs = VehicleObservation(obs.source_id, obs.pose, obs.width, obs.length, 0.0)
        kept.append(obs)
    return kept


# -- scene tokenization -----------------------------------------------------

ROUTE_SAMPLE_SPACING = 1.0
RDP_EPSILON_DEFAULT = 0.5


def tokenize_scene(
    world: "WorldState",
    ego_id: str,
    fov: FovConfig,
    n_s: int = 2,
    l_max: float = 10.0,
    rdp_epsilon: float = RDP_EPSILON_DEFAULT,
) -> tuple[list[ObjectToken], str]:
    """Build the planner input for one frame.

    Returns (tokens, light) where tokens are the filtered vehicle tokens in
    ascending-distance order (source_id tiebreak) followed by exactly
    ``n_s`` route tokens, and light is "green" or "red" for the next
    signal on the remaining route (green when there is none in range).
    """
    ego = world.vehicle(ego_id)
    if ego is None or ego.route is None:
        raise InvalidInputError(f"ego {ego_id!r} missing or without a route")
    ego_pose = ego.pose

    observations = []
    for vehicle in world.vehicles:
        if vehicle.id == ego_id:
            continue
        rel = to_ego_frame(vehicle.pose, ego_pose)
        observations.append(
            VehicleObservation(vehicle.id, rel, vehicle.width, vehicle.length, vehicle.speed)
        )
    kept = filter_vehicles(observations, fov)
    kept.sort(key=lambda o: (math.hypot(o.pose.x, o.pose.y), o.source_id))

    tokens = [
        ObjectToken(
            TokenKind.VEHICLE,
            z=obs.speed,
            x=obs.pose.x,
            y=obs.pose.y,
            yaw=obs.pose.yaw,
            w=obs.width,
            h=obs.length,
            source_id=obs.source_id,
        )
        for obs in kept
    ]

    ahead = world.route_points_ahead(ego_id, fov.d_max, spacing=ROUTE_SAMPLE_SPACING)
    ego_frame_pts = _world_points_to_ego(ahead, ego_pose)
    simplified = rdp_simplify(ego_frame_pts, rdp_epsilon)
    lane_width = world.route_lane_width(ego_id)
    tokens.extend(build_route_segments(simplified, n_s, l_max, lane_width))

    signal = world.next_signal_on_route(ego_id, fov.d_max)
    light = "red" if signal is not None and signal.phase == "red" else "green"
    return tokens, light


def _world_points_to_ego(points: np.ndarray, ego_pose: Pose2) -> np.ndarray:
    c, s = math.cos(ego_pose.yaw), math.sin(ego_pose.yaw)
    shifted = np.asarray(points, dtype=np.float64) - np.array([ego_pose.x, ego_pose.y])
    rot = np.array([[c, s], [-s, c]])
    return shifted @ rot.T


# -- oriented-box overlap ---------------------------------------------------


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test for two oriented rectangles."""
    # cheap radius rejection first
    dx = a.center.x - b.center.x
    dy = a.center.y - b.center.y
    reach = 0.5 * (math.hypot(a.width, a.length) + math.hypot(b.width, b.length))
    if dx * dx + dy * dy > reach * reach:
        return False

    ca = a.corners()
    cb = b.corners()
    for yaw in (a.center.yaw, b.center.yaw):
        c, s = math.cos(yaw), math.sin(yaw)
        for axis in ((c, s), (-s, c)):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
