"""Geometry: frames, polyline simplification vs a recursive oracle, box
overlap vs shapely, field-of-view filtering, and the scene tokenizer."""
from __future__ import annotations

import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from plantkit.geom import (
    FovConfig,
    InvalidInputError,
    ObjectToken,
    OrientedBox,
    Pose2,
    TokenKind,
    VehicleObservation,
    boxes_overlap,
    build_route_segments,
    filter_vehicles,
    from_ego_frame,
    norm_angle,
    points_to_ego_frame,
    rdp_simplify,
    to_ego_frame,
    tokenize_scene,
)
from plantkit.sim.world import TrafficLight, VehicleState

from conftest import straight_world

SEED = 987123


def test_norm_angle_range_and_endpoints():
    assert norm_angle(2.0 * math.pi) == 0.0
    assert norm_angle(0.0) == 0.0
    assert abs(norm_angle(-0.25) - (2.0 * math.pi - 0.25)) < 1e-12
    rng = np.random.default_rng(SEED)
    for yaw in rng.uniform(-50.0, 50.0, size=200):
        wrapped = norm_angle(yaw)
        assert 0.0 <= wrapped < 2.0 * math.pi
        assert abs(math.sin(wrapped) - math.sin(yaw)) < 1e-9
        assert abs(math.cos(wrapped) - math.cos(yaw)) < 1e-9


def test_pose_normalizes_yaw_on_construction():
    assert Pose2(0.0, 0.0, -math.pi).yaw == pytest.approx(math.pi)
    np.testing.assert_allclose(Pose2(3.0, -2.0).xy, [3.0, -2.0])


def test_box_corners_axis_aligned():
    box = OrientedBox(Pose2(1.0, 2.0, 0.0), 2.0, 4.0)
    want = np.array([[3.0, 3.0], [-1.0, 3.0], [-1.0, 1.0], [3.0, 1.0]])
    np.testing.assert_allclose(box.corners(), want)


def test_box_corners_rotation_and_area():
    rng = np.random.default_rng(SEED)
    for _ in range(50):
        box = OrientedBox(
            Pose2(*rng.uniform(-5, 5, size=2), rng.uniform(0, 7)),
            rng.uniform(0.5, 4.0), rng.uniform(0.5, 6.0),
        )
        poly = Polygon(box.corners())
        assert poly.area == pytest.approx(box.width * box.length, rel=1e-9)
        assert poly.exterior.is_ccw


def test_box_inflation_and_validation():
    box = OrientedBox(Pose2(0, 0, 0.3), 2.0, 4.0)
    grown = box.inflated(0.5)
    assert grown.width == 3.0 and grown.length == 5.0
    assert grown.center == box.center
    with pytest.raises(InvalidInputError):
        OrientedBox(Pose2(0, 0, 0), 0.0, 1.0)


def test_ego_frame_roundtrip():
    rng = np.random.default_rng(SEED)
    for _ in range(100):
        ego = Pose2(*rng.uniform(-20, 20, size=2), rng.uniform(0, 7))
        world = Pose2(*rng.uniform(-20, 20, size=2), rng.uniform(0, 7))
        back = from_ego_frame(to_ego_frame(world, ego), ego)
        assert abs(back.x - world.x) < 1e-9
        assert abs(back.y - world.y) < 1e-9
        assert abs(math.sin(back.yaw - world.yaw)) < 1e-9


def test_ego_frame_heading_becomes_x_axis():
    ego = Pose2(5.0, 5.0, math.pi / 2.0)
    ahead = to_ego_frame(Pose2(5.0, 8.0, math.pi / 2.0), ego)
    assert ahead.x == pytest.approx(3.0)
    assert ahead.y == pytest.approx(0.0, abs=1e-12)
    assert ahead.yaw == pytest.approx(0.0, abs=1e-12)


def test_points_to_ego_frame_matches_scalar_transform():
    rng = np.random.default_rng(SEED)
    ego = Pose2(1.0, -2.0, 0.8)
    pts = rng.uniform(-10, 10, size=(20, 2))
    batch = points_to_ego_frame(ego, pts)
    for row, (px, py) in zip(batch, pts):
        single = to_ego_frame(Pose2(px, py), ego)
        np.testing.assert_allclose(row, [single.x, single.y], atol=1e-12)


# -- polyline simplification -------------------------------------------------


def _line_distance(point, start, end) -> float:
    """Distance from point to the infinite line through start and end."""
    span = end - start
    norm = math.hypot(*span)
    if norm == 0.0:
        return math.hypot(*(point - start))
    return abs(span[0] * (point[1] - start[1]) - span[1] * (point[0] - start[0])) / norm


def rdp_oracle(pts: np.ndarray, epsilon: float) -> np.ndarray:
    """Straightforward recursive reference for Ramer-Douglas-Peucker."""

    def perp(point, start, end):
        return _line_distance(point, start, end)

    def recurse(lo, hi):
        if hi - lo < 2:
            return [lo, hi]
        dists = [perp(pts[i], pts[lo], pts[hi]) for i in range(lo + 1, hi)]
        i_best = int(np.argmax(dists)) + lo + 1
        if dists[i_best - lo - 1] <= epsilon:
            return [lo, hi]
        left = recurse(lo, i_best)
        return left[:-1] + recurse(i_best, hi)

    return pts[recurse(0, len(pts) - 1)]


def test_rdp_matches_recursive_oracle_on_random_polylines():
    rng = np.random.default_rng(SEED)
    for _ in range(500):
        n = int(rng.integers(2, 13))
        pts = np.cumsum(rng.normal(scale=2.0, size=(n, 2)), axis=0)
        epsilon = float(rng.uniform(0.0, 3.0))
        got = rdp_simplify(pts, epsilon)
        want = rdp_oracle(pts, epsilon)
        np.testing.assert_array_equal(got, want)


def test_rdp_straight_line_collapses():
    pts = np.stack([np.linspace(0, 10, 11), np.zeros(11)], axis=1)
    out = rdp_simplify(pts, 0.01)
    np.testing.assert_allclose(out, [[0.0, 0.0], [10.0, 0.0]])


def test_rdp_keeps_endpoints_and_validates():
    pts = np.array([[0.0, 0.0], [1.0, 5.0], [2.0, 0.0]])
    out = rdp_simplify(pts, 100.0)
    np.testing.assert_allclose(out, pts[[0, 2]])
    with pytest.raises(InvalidInputError):
        rdp_simplify(pts[:1], 1.0)
    with pytest.raises(InvalidInputError):
        rdp_simplify(pts, -0.5)


def test_rdp_dropped_points_stay_within_epsilon_of_their_chord():
    # the RDP invariant: points pruned inside a kept section lie within
    # epsilon of the infinite line through that section's endpoints
    rng = np.random.default_rng(SEED + 1)
    for _ in range(50):
        pts = np.cumsum(rng.normal(scale=1.5, size=(10, 2)), axis=0)
        epsilon = 1.0
        kept = rdp_simplify(pts, epsilon)
        kept_idx = [
            i for i, p in enumerate(pts) if any(np.array_equal(p, k) for k in kept)
        ]
        for lo, hi in zip(kept_idx[:-1], kept_idx[1:]):
            for i in range(lo + 1, hi):
                assert _line_distance(pts[i], pts[lo], pts[hi]) <= epsilon + 1e-9


# -- route segments ----------------------------------------------------------


def test_route_segments_split_long_spans():
    pts = np.array([[0.0, 0.0], [25.0, 0.0]])
    tokens = build_route_segments(pts, n_s=3, l_max=10.0, lane_width=3.5)
    assert [t.z for t in tokens] == [0.0, 1.0, 2.0]
    assert [t.h for t in tokens] == [10.0, 10.0, 5.0]
    np.testing.assert_allclose([t.x for t in tokens], [5.0, 15.0, 22.5])
    assert all(t.w == 3.5 and t.kind is TokenKind.ROUTE_SEGMENT for t in tokens)


def test_route_segments_pad_by_repeating_last():
    pts = np.array([[0.0, 0.0], [4.0, 0.0]])
    tokens = build_route_segments(pts, n_s=3, l_max=10.0, lane_width=3.0)
    assert len(tokens) == 3
    assert tokens[1].x == tokens[0].x and tokens[2].x == tokens[0].x
    assert [t.z for t in tokens] == [0.0, 1.0, 2.0]


def test_route_segments_follow_bends():
    pts = np.array([[0.0, 0.0], [6.0, 0.0], [6.0, 6.0]])
    tokens = build_route_segments(pts, n_s=2, l_max=10.0, lane_width=3.5)
    assert tokens[0].yaw == pytest.approx(0.0)
    assert tokens[1].yaw == pytest.approx(math.pi / 2.0)
    np.testing.assert_allclose([tokens[1].x, tokens[1].y], [6.0, 3.0])


def test_route_segments_validation():
    with pytest.raises(InvalidInputError):
        build_route_segments(np.zeros((1, 2)), 2, 10.0, 3.5)
    with pytest.raises(InvalidInputError):
        build_route_segments(np.array([[0.0, 0.0], [5.0, 0.0]]), 0, 10.0, 3.5)
    with pytest.raises(InvalidInputError):
        build_route_segments(np.zeros((3, 2)), 2, 10.0, 3.5)  # degenerate spans


# -- field of view -----------------------------------------------------------


def _obs(x, y, speed=3.0, vid="v"):
    return VehicleObservation(vid, Pose2(x, y, 0.0), 2.0, 4.5, speed)


def test_fov_filter_matches_brute_force_predicate():
    rng = np.random.default_rng(SEED)
    fov = FovConfig(d_max=30.0, side=12.0, back=5.0)
    obs = [
        _obs(x, y, vid=f"v{i}")
        for i, (x, y) in enumerate(rng.uniform(-40, 40, size=(300, 2)))
    ]
    kept = {o.source_id for o in filter_vehicles(obs, fov)}
    want = {
        o.source_id
        for o in obs
        if math.hypot(o.pose.x, o.pose.y) <= 30.0
        and abs(o.pose.y) <= 12.0
        and o.pose.x >= -5.0
    }
    assert kept == want


def test_fov_boundaries_are_inclusive():
    fov = FovConfig(d_max=10.0, side=4.0, back=2.0)
    assert filter_vehicles([_obs(10.0, 0.0)], fov)
    assert not filter_vehicles([_obs(10.0 + 1e-9, 0.0)], fov)
    assert filter_vehicles([_obs(0.0, 4.0)], fov)
    assert not filter_vehicles([_obs(0.0, 4.0 + 1e-9)], fov)
    assert filter_vehicles([_obs(-2.0, 0.0)], fov)
    assert not filter_vehicles([_obs(-2.0 - 1e-9, 0.0)], fov)


def test_fov_zero_back_drops_everything_behind():
    fov = FovConfig(back=0.0)
    assert not filter_vehicles([_obs(-0.1, 0.0)], fov)
    assert filter_vehicles([_obs(0.0, 0.0)], fov)


def test_fov_speed_masking():
    fov = FovConfig(include_speed=False)
    out = filter_vehicles([_obs(5.0, 0.0, speed=7.5)], fov)
    assert out[0].speed == 0.0
    # identity preserved when speed is already zero
    src = _obs(5.0, 0.0, speed=0.0)
    assert filter_vehicles([src], fov)[0] is src


def test_fov_validation():
    with pytest.raises(InvalidInputError):
        FovConfig(d_max=-1.0)


# -- tokenizer ---------------------------------------------------------------


def test_tokenize_scene_orders_vehicles_then_routes():
    world = straight_world(
        vehicles=[
            ("far", 38.0, 2.0, "idm", None),
            ("near", 20.0, 1.0, "idm", None),
            ("behind", 2.0, 0.0, "idm", None),
        ]
    )
    tokens, light = tokenize_scene(world, "ego", FovConfig(d_max=30.0, back=30.0))
    ids = [t.source_id for t in tokens if t.kind is TokenKind.VEHICLE]
    assert ids == ["behind", "near", "far"]  # ascending straight-line distance
    assert light == "green"
    route_tokens = [t for t in tokens if t.kind is TokenKind.ROUTE_SEGMENT]
    assert len(route_tokens) == 2
    assert tokens[-2:] == route_tokens
    near = next(t for t in tokens if t.source_id == "near")
    assert near.x == pytest.approx(10.0)
    assert near.z == pytest.approx(1.0)  # z carries speed for vehicles


def test_tokenize_scene_respects_back_fov():
    world = straight_world(vehicles=[("behind", 2.0, 0.0, "idm", None)])
    tokens, _ = tokenize_scene(world, "ego", FovConfig(back=0.0))
    assert all(t.kind is TokenKind.ROUTE_SEGMENT for t in tokens)


def test_tokenize_scene_zeroes_speed_when_disabled():
    world = straight_world(vehicles=[("lead", 20.0, 4.0, "idm", None)])
    tokens, _ = tokenize_scene(world, "ego", FovConfig(include_speed=False))
    lead = next(t for t in tokens if t.kind is TokenKind.VEHICLE)
    assert lead.z == 0.0


def test_tokenize_scene_route_tokens_start_at_ego():
    world = straight_world()
    tokens, _ = tokenize_scene(world, "ego", FovConfig())
    first = tokens[0]
    # straight route ahead: first segment is centered l_max/2 ahead at yaw 0
    assert first.x == pytest.approx(5.0, abs=0.1)
    assert first.y == pytest.approx(0.0, abs=1e-9)
    assert first.h == pytest.approx(10.0, abs=1e-6)


def test_tokenize_scene_light_flag_tracks_phase():
    red = TrafficLight("L0", green_s=5.0, red_s=1000.0, offset=5.0)  # starts red
    world = straight_world(signal_s=30.0, light=red)
    _, light = tokenize_scene(world, "ego", FovConfig())
    assert light == "red"
    green = TrafficLight("L1", green_s=1000.0, red_s=5.0)
    world2 = straight_world(signal_s=30.0, light=green)
    _, light2 = tokenize_scene(world2, "ego", FovConfig())
    assert light2 == "green"


def test_tokenize_scene_ignores_signal_beyond_fov():
    red = TrafficLight("L0", green_s=5.0, red_s=1000.0, offset=5.0)
    world = straight_world(signal_s=80.0, light=red)  # 70 m ahead of ego
    _, light = tokenize_scene(world, "ego", FovConfig(d_max=30.0))
    assert light == "green"


def test_tokenize_scene_unknown_ego_raises():
    world = straight_world()
    with pytest.raises(InvalidInputError):
        tokenize_scene(world, "ghost", FovConfig())


# -- oriented box overlap ----------------------------------------------------


def test_boxes_overlap_matches_shapely_on_random_pairs():
    rng = np.random.default_rng(SEED)
    disagreements = 0
    for _ in range(500):
        a = OrientedBox(
            Pose2(*rng.uniform(-6, 6, size=2), rng.uniform(0, 7)),
            rng.uniform(0.5, 4.0), rng.uniform(0.5, 6.0),
        )
        b = OrientedBox(
            Pose2(*rng.uniform(-6, 6, size=2), rng.uniform(0, 7)),
            rng.uniform(0.5, 4.0), rng.uniform(0.5, 6.0),
        )
        got = boxes_overlap(a, b)
        want = Polygon(a.corners()).intersection(Polygon(b.corners())).area > 1e-12
        if got != want:
            disagreements += 1
    assert disagreements == 0


def test_boxes_overlap_known_cases():
    a = OrientedBox(Pose2(0, 0, 0), 2.0, 4.0)
    assert boxes_overlap(a, OrientedBox(Pose2(3.0, 0, 0), 2.0, 4.0))
    assert not boxes_overlap(a, OrientedBox(Pose2(8.0, 0, 0), 2.0, 4.0))
    # diagonal box whose corner pokes into a
    assert boxes_overlap(a, OrientedBox(Pose2(2.5, 1.5, math.pi / 4), 2.0, 4.0))
    # far but axis-aligned projections overlap: SAT must still separate
    assert not boxes_overlap(a, OrientedBox(Pose2(4.0, 2.2, 0.0), 2.0, 4.0))
