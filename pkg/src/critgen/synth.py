"""Synthetic base scenarios: three templates with guaranteed ego/adversary
path interaction (merge, crossing, same-lane following).

Every scenario spans 9 s at 10 Hz (91 steps: 1 s history + 8 s future). The
recorded traces are benign; the ego and adversary lane sequences cross or
merge so perturbation can create conflict. Output is deterministic per
(seed, template, n_background) and coordinates are rounded to the file
precision so save/load round-trips are exact.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np
from shapely.geometry import LineString
from shapely.ops import unary_union

from .geom import point_at_arc, polyline_arcs
from .scenario import DT, HORIZON, LaneInfo, MapInfo, Scenario, Trajectory

TEMPLATES = ("straight-merge", "t-junction", "curve-follow")
LANE_WIDTH = 3.5
EDGE_MARGIN = 0.6
BG_SPACING = 22.0


def derive_key(*parts) -> int:
    """Stable 128-bit key for counter-based RNG streams."""
    text = "|".join(repr(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:16], "big")


def rng_from(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))


def _hermite(p0, t0, p1, t1, n: int = 32) -> np.ndarray:
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    chord = float(np.hypot(*(p1 - p0)))
    m0 = np.asarray(t0, float) * chord
    m1 = np.asarray(t1, float) * chord
    t = np.linspace(0.0, 1.0, n)[:, None]
    h00 = 2 * t**3 - 3 * t**2 + 1
    h10 = t**3 - 2 * t**2 + t
    h01 = -2 * t**3 + 3 * t**2
    h11 = t**3 - t**2
    return h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1


def _arc_points(center, radius: float, th0: float, th1: float, n: int = 48) -> np.ndarray:
    th = np.linspace(th0, th1, n)
    return np.column_stack([center[0] + radius * np.cos(th),
                            center[1] + radius * np.sin(th)])


def _road_edges(lanes: list[LaneInfo]) -> list[np.ndarray]:
    """Union of lane strips -> closed boundary rings (exteriors + holes)."""
    strips = [
        LineString(lane.centerline).buffer(lane.width / 2 + EDGE_MARGIN)
        for lane in lanes
    ]
    merged = unary_union(strips)
    polys = list(merged.geoms) if merged.geom_type == "MultiPolygon" else [merged]
    rings = []
    for poly in polys:
        for ring in [poly.exterior, *poly.interiors]:
            coords = np.asarray(ring.coords, dtype=float)[:-1]  # drop closing dup
            rings.append(np.round(coords, 6))
    return rings


def _route_points(route: np.ndarray, s0: float, speed: float) -> np.ndarray:
    arcs = polyline_arcs(route)
    pts = [point_at_arc(route, arcs, s0 + speed * DT * t) for t in range(HORIZON)]
    return np.round(np.asarray(pts, float), 6)


def _concat_routes(*polylines: np.ndarray) -> np.ndarray:
    parts = [np.asarray(polylines[0], float)]
    for seg in polylines[1:]:
        seg = np.asarray(seg, float)
        if np.allclose(parts[-1][-1], seg[0], atol=1e-6):
            seg = seg[1:]
        parts.append(seg)
    return np.concatenate(parts)


def _merge_template(rng: np.random.Generator, n_background: int):
    bg_reach = 60.0 + BG_SPACING * n_background
    main = np.array([[-60.0, 0.0], [20.0, 0.0]])
    out = np.array([[20.0, 0.0], [180.0, 0.0]])
    ramp = _hermite((-52.0, -12.0), (math.cos(0.12), math.sin(0.12)), (20.0, 0.0), (1.0, 0.0), 40)
    bg = np.array([[-bg_reach, 7.0], [180.0, 7.0]])
    lanes = [
        LaneInfo("main", LANE_WIDTH, main, ("out",)),
        LaneInfo("out", LANE_WIDTH, out),
        LaneInfo("ramp", LANE_WIDTH, ramp, ("out",)),
    ]
    if n_background:
        lanes.append(LaneInfo("bg", LANE_WIDTH, bg))

    v_ego = 10.0 + rng.uniform(-1.0, 1.0)
    v_adv = 9.5 + rng.uniform(-0.8, 0.8)
    ego_route = _concat_routes(main, out)
    adv_route = _concat_routes(ramp, out)
    ego_s0 = 20.0 + rng.uniform(-4.0, 4.0)            # on main, ~40 m before merge
    t_ego_merge = (80.0 - ego_s0) / v_ego             # main is 80 m to the merge point
    ramp_len = float(polyline_arcs(ramp)[-1])
    gap_t = rng.uniform(0.9, 1.6)                     # adversary merges behind the ego
    adv_s0 = max(ramp_len - v_adv * (t_ego_merge + gap_t), 4.0)
    # preserve the merge-time gap when the ramp is too short for v_adv
    v_adv = (ramp_len - adv_s0) / (t_ego_merge + gap_t)
    agents = [(ego_route, ego_s0, v_ego), (adv_route, adv_s0, v_adv)]
    for i in range(n_background):
        agents.append((bg, bg_reach - 50.0 - BG_SPACING * i, 8.5 + rng.uniform(-0.5, 0.5)))
    return lanes, agents


def _tjunction_template(rng: np.random.Generator, n_background: int):
    bg_reach = 40.0 + BG_SPACING * n_background
    west = np.array([[-60.0, 0.0], [30.0, 0.0]])
    east = np.array([[30.0, 0.0], [150.0, 0.0]])
    south = np.array([[20.0, -60.0], [20.0, -10.0]])
    cross = np.array([[20.0, -10.0], [20.0, 14.0]])
    north = np.array([[20.0, 14.0], [20.0, 70.0]])
    turn = _arc_points((30.0, -10.0), 10.0, math.pi, math.pi / 2, 24)
    bg = np.array([[32.0, -7.0], [32.0 + bg_reach + 120.0, -7.0]])
    lanes = [
        LaneInfo("west", LANE_WIDTH, west, ("east",)),
        LaneInfo("east", LANE_WIDTH, east),
        LaneInfo("south", LANE_WIDTH, south, ("cross", "turn")),
        LaneInfo("cross", LANE_WIDTH, cross, ("north",)),
        LaneInfo("north", LANE_WIDTH, north),
        LaneInfo("turn", LANE_WIDTH, turn, ("east",)),
    ]
    if n_background:
        lanes.append(LaneInfo("bg", LANE_WIDTH, bg))
    v_ego = 10.0 + rng.uniform(-1.0, 1.0)
    v_adv = 8.5 + rng.uniform(-0.8, 0.8)
    ego_route = _concat_routes(west, east)
    adv_route = _concat_routes(south, cross, north)
    ego_s0 = 22.0 + rng.uniform(-4.0, 4.0)            # crossing point x=20 sits at route arc 80
    t_ego_cross = (80.0 - ego_s0) / v_ego
    lead_t = rng.uniform(1.1, 1.9)                    # adversary clears the box first
    adv_s0 = 60.0 - v_adv * (t_ego_cross - lead_t)    # y=0 sits at route arc 60
    adv_s0 = min(max(adv_s0, 4.0), 46.0)
    agents = [(ego_route, ego_s0, v_ego), (adv_route, adv_s0, v_adv)]
    for i in range(n_background):
        agents.append((bg, 4.0 + BG_SPACING * i, 8.5 + rng.uniform(-0.5, 0.5)))
    return lanes, agents


def _curve_template(rng: np.random.Generator, n_background: int):
    center = (0.0, 45.0)
    inner = _arc_points(center, 45.0, -math.pi / 2, 1.3, 96)
    half = len(inner) // 2
    lanes = [
        LaneInfo("curve-a", LANE_WIDTH, inner[: half + 1], ("curve-b",)),
        LaneInfo("curve-b", LANE_WIDTH, inner[half:]),
    ]
    per_ring = 6
    ring_lanes = []
    for k in range(max(0, (n_background + per_ring - 1) // per_ring)):
        r = 52.0 + 7.0 * k
        ring = _arc_points(center, r, -math.pi / 2 - 1.5, 1.2, 96)
        lane = LaneInfo(f"bg{k}", LANE_WIDTH, ring)
        lanes.append(lane)
        ring_lanes.append(lane)
    v_adv = 9.0 + rng.uniform(-0.8, 0.8)
    v_ego = v_adv + rng.uniform(0.2, 0.8)             # ego slowly closes on the adversary
    route = _concat_routes(inner)
    ego_s0 = 4.0 + rng.uniform(0.0, 3.0)
    adv_s0 = ego_s0 + 20.0 + rng.uniform(-3.0, 3.0)
    agents = [(route, ego_s0, v_ego), (route, adv_s0, v_adv)]
    for i in range(n_background):
        lane = ring_lanes[i // per_ring]
        agents.append((lane.centerline, 4.0 + BG_SPACING * (i % per_ring),
                       8.0 + rng.uniform(-0.5, 0.5)))
    return lanes, agents


_BUILDERS = {
    "straight-merge": _merge_template,
    "t-junction": _tjunction_template,
    "curve-follow": _curve_template,
}


def generate_synthetic(seed: int, template: str, n_background: int) -> Scenario:
    """Deterministic 9-second synthetic scenario.

    Agent 0 is the ego, agent 1 the adversary; background agents (2..) run
    on lanes that do not conflict with either.
    """
    if template not in _BUILDERS:
        raise ValueError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    if n_background < 0:
        raise ValueError("n_background must be >= 0")
    rng = rng_from("synth", seed, template, n_background)
    lanes, agents = _BUILDERS[template](rng, n_background)
    lanes = [LaneInfo(l.lane_id, l.width, np.round(l.centerline, 6), l.successors)
             for l in lanes]   # match the 6-decimal file precision exactly
    trajectories = {}
    dims = {}
    for aid, (route, s0, speed) in enumerate(agents):
        route = np.asarray(route, float)
        total = float(polyline_arcs(route)[-1])
        travel = s0 + speed * DT * (HORIZON - 1)
        if travel > total - 4.0:
            # keep everyone clear of the strip end so footprints stay on-road
            speed = max((total - 4.0 - s0) / (DT * (HORIZON - 1)), 0.0)
        trajectories[aid] = Trajectory(_route_points(route, s0, speed))
        dims[aid] = (4.5, 2.0)
    return Scenario(
        trajectories=trajectories,
        map_info=MapInfo(lanes, _road_edges(lanes)),
        ego_id=0,
        adv_id=1,
        agent_dims=dims,
        scenario_id=f"{template}-{seed}-{n_background}",
    )
