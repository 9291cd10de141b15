"""Lattice sampling of adversary future trajectories.

Candidates start at the adversary's pose at the end of the 1 s history and
cover the 8 s future (80 steps). Paths follow reachable lane sequences
(including a cut-in onto the ego's lane sequence when a curvature-bounded
blend exists) crossed with longitudinal speed profiles; seeded jitter fills
the set out to exactly 32 distinct trajectories.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import point_at_arc, polyline_arcs, project_to_polyline, tangent_at_arc, wrap_angle
from .scenario import DT, HISTORY_END, FUTURE_STEPS, MapInfo, Scenario, Trajectory, derive_motion
from .sim import MAX_WHEEL_ANGLE, WHEELBASE_FRAC
from .synth import rng_from

N_CANDIDATES = 32
MAX_SPEED = 30.0
SUBGOAL_SPACING = 8.0
OFF_LANE_LATERAL = 1.5          # beyond half-width + this -> heading fallback

# accel (m/s^2, applied until the target speed is reached), target speed delta
_PROFILES = (
    (-4.0, None),               # hard brake to a stop
    (-2.0, None),
    (0.0, 0.0),                 # hold
    (1.0, 4.0),
    (2.0, 8.0),
)
# lateral blend-target offsets (m) multiplying the base paths
_LATERALS = (0.0, 1.2, -1.2)


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[Trajectory, ...]
    scenario_id: str
    seed: int

    def __post_init__(self):
        if len(self.candidates) != N_CANDIDATES:
            raise ValueError(f"expected {N_CANDIDATES} candidates, got {len(self.candidates)}")

    def __len__(self) -> int:
        return len(self.candidates)

    def __getitem__(self, i: int) -> Trajectory:
        return self.candidates[i]


def extract_subgoals(traj: Trajectory) -> np.ndarray:
    """Checkpoints every 8 m of arc length along the trajectory, plus its endpoint."""
    pts = traj.points
    arcs = polyline_arcs(pts)
    total = float(arcs[-1])
    stops = [s * SUBGOAL_SPACING for s in range(1, int(total / SUBGOAL_SPACING + 1e-9) + 1)]
    if not stops or total - stops[-1] > 1e-9:
        stops.append(total)
    return np.asarray([point_at_arc(pts, arcs, s) for s in stops], dtype=float)


def max_curvature(length: float) -> float:
    return math.tan(MAX_WHEEL_ANGLE) / (WHEELBASE_FRAC * length)


def _path_curvature_ok(pts: np.ndarray, kappa_max: float) -> bool:
    seg = np.diff(pts, axis=0)
    ds = np.hypot(seg[:, 0], seg[:, 1])
    keep = ds > 1e-6
    if keep.sum() < 2:
        return True
    head = np.arctan2(seg[keep, 1], seg[keep, 0])
    dh = np.abs(np.arctan2(np.sin(np.diff(head)), np.cos(np.diff(head))))
    return bool(np.all(dh / np.maximum(ds[keep][1:], 1e-6) <= kappa_max))


def _hermite_path(p0, h0, p1, t1, n: int = 48) -> np.ndarray:
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    chord = float(np.hypot(*(p1 - p0)))
    m0 = np.array([math.cos(h0), math.sin(h0)]) * chord
    m1 = np.asarray(t1, float) * chord
    t = np.linspace(0.0, 1.0, n)[:, None]
    return ((2 * t**3 - 3 * t**2 + 1) * p0 + (t**3 - 2 * t**2 + t) * m0
            + (-2 * t**3 + 3 * t**2) * p1 + (t**3 - t**2) * m1)


def _extend(path: np.ndarray, reach: float) -> np.ndarray:
    """Append a straight extension along the final tangent out to `reach` arc length."""
    arcs = polyline_arcs(path)
    short = reach - float(arcs[-1])
    if short <= 0:
        return path
    ux, uy = tangent_at_arc(path, arcs, float(arcs[-1]))
    tail = path[-1] + np.outer(np.linspace(2.0, short + 4.0, max(2, int(short / 5) + 2)), [ux, uy])
    return np.vstack([path, tail])


def _lane_routes(map_info: MapInfo, lane_id: str, from_arc: float, reach: float) -> list[np.ndarray]:
    """Route polylines (lane remainder + successor chains) out to `reach` meters."""
    lane = map_info.lane_by_id[lane_id]
    arcs = map_info.lane_arcs(lane_id)
    start = point_at_arc(lane.centerline, arcs, from_arc)
    idx = int(np.searchsorted(arcs, from_arc, side="right"))
    head = np.vstack([[start], lane.centerline[idx:]]) if idx < len(lane.centerline) else np.asarray([start])
    remaining = float(arcs[-1]) - from_arc

    routes: list[np.ndarray] = []

    def walk(prefix: np.ndarray, covered: float, lid: str, visited: frozenset):
        succs = [s for s in map_info.lane_by_id[lid].successors if s not in visited]
        if covered >= reach or not succs:
            routes.append(prefix)
            return
        for s in succs:
            nxt = map_info.lane_by_id[s].centerline
            seg = nxt[1:] if np.allclose(prefix[-1], nxt[0], atol=1e-6) else nxt
            walk(np.vstack([prefix, seg]), covered + float(polyline_arcs(nxt)[-1]),
                 s, visited | {s})

    walk(head, remaining, lane_id, frozenset([lane_id]))
    return routes


def _speed_steps(v0: float, accel: float, target_delta, rng_scale: float = 1.0,
                 delta_jitter: float = 0.0) -> np.ndarray:
    """Per-step speeds over the candidate horizon for one longitudinal profile."""
    a = accel * rng_scale
    if target_delta is None:
        target = 0.0 if a < 0 else MAX_SPEED
    else:
        target = min(max(v0 + target_delta + delta_jitter, 0.0), MAX_SPEED)
    v = v0
    out = np.empty(FUTURE_STEPS)
    for k in range(FUTURE_STEPS):
        out[k] = v
        nv = v + a * DT
        if a < 0:
            v = max(nv, target)
        elif a > 0:
            v = min(nv, target)
    return out


def _positions(path: np.ndarray, speeds: np.ndarray) -> np.ndarray:
    arcs = polyline_arcs(path)
    s = np.concatenate([[0.0], np.cumsum(speeds[:-1]) * DT])
    s = np.clip(s, 0.0, float(arcs[-1]))
    return np.column_stack([np.interp(s, arcs, path[:, 0]),
                            np.interp(s, arcs, path[:, 1])])


def sample_candidates(scenario: Scenario, seed: int) -> CandidateSet:
    """Exactly 32 distinct, curvature/speed-feasible adversary futures."""
    adv = scenario.trajectories[scenario.adv_id]
    if len(adv) <= HISTORY_END:
        raise ValueError("adversary history must cover the first 10 steps")
    headings, speeds = derive_motion(adv.points)
    px, py = float(adv.points[HISTORY_END, 0]), float(adv.points[HISTORY_END, 1])
    h0 = float(headings[HISTORY_END])
    v0 = float(speeds[HISTORY_END])
    length = scenario.agent_dims[scenario.adv_id][0]
    kappa = 0.95 * max_curvature(length)
    reach = MAX_SPEED * FUTURE_STEPS * DT + 20.0
    rng = rng_from("candidates", scenario.scenario_id, seed)

    paths: list[np.ndarray] = []
    map_info = scenario.map_info
    lane, arc, lat = map_info.nearest_lane(px, py)
    on_lane = lat <= lane.width / 2 + OFF_LANE_LATERAL

    if on_lane:
        routes = [(max(10.0, 2.0 * v0), r)
                  for r in _lane_routes(map_info, lane.lane_id, arc, reach)]
        # cut-in toward the ego's lane sequence when a feasible blend exists
        ego_pts = scenario.trajectories[scenario.ego_id].points
        ex, ey = float(ego_pts[HISTORY_END, 0]), float(ego_pts[HISTORY_END, 1])
        ego_lane, ego_arc, _ = map_info.nearest_lane(ex, ey)
        if ego_lane.lane_id != lane.lane_id:
            routes += [(max(14.0, 3.0 * v0), r)
                       for r in _lane_routes(map_info, ego_lane.lane_id, ego_arc, reach)]
        for blend, route in routes:
            for lateral in _LATERALS:
                shifted = _offset_polyline(route, lateral) if lateral else route
                paths.extend(_blend_onto(px, py, h0, shifted, blend, kappa, reach))
    if not paths:
        # off-lane fallback: constant-curvature extrapolations of the pose
        for k in (0.0, 0.35 * kappa, -0.35 * kappa, 0.7 * kappa, -0.7 * kappa):
            paths.append(_arc_path(px, py, h0, k, reach))

    seen: set = set()
    chosen: list[Trajectory] = []

    def admit(path: np.ndarray, speed_steps: np.ndarray) -> bool:
        pts = _positions(path, speed_steps)
        key = tuple(np.round(pts[::8].ravel(), 1))
        if key in seen:
            return False
        seen.add(key)
        chosen.append(Trajectory(np.round(pts, 6), start_time_index=HISTORY_END))
        return True

    # profile-major interleave: every path sees the core profiles first
    for accel, delta in _PROFILES:
        for path in paths:
            if len(chosen) >= N_CANDIDATES:
                break
            admit(path, _speed_steps(v0, accel, delta))
    guard = 0
    while len(chosen) < N_CANDIDATES and guard < 4000:
        guard += 1
        path = paths[int(rng.integers(len(paths)))]
        accel, delta = _PROFILES[int(rng.integers(len(_PROFILES)))]
        admit(path, _speed_steps(v0, accel, delta,
                                 rng_scale=float(rng.uniform(0.5, 1.5)),
                                 delta_jitter=float(rng.uniform(-3.0, 3.0))))
    if len(chosen) < N_CANDIDATES:
        raise RuntimeError("failed to assemble 32 distinct candidates")
    return CandidateSet(tuple(chosen[:N_CANDIDATES]), scenario.scenario_id, seed)


def _offset_polyline(route: np.ndarray, lateral: float) -> np.ndarray:
    """Shift a polyline sideways along per-vertex normals (left positive)."""
    d = np.diff(route, axis=0)
    ln = np.hypot(d[:, 0], d[:, 1])
    ln = np.where(ln < 1e-12, 1.0, ln)
    t = d / ln[:, None]
    tv = np.vstack([t[:1], 0.5 * (t[1:] + t[:-1]), t[-1:]])
    nrm = np.hypot(tv[:, 0], tv[:, 1])
    tv /= np.where(nrm < 1e-12, 1.0, nrm)[:, None]
    normals = np.column_stack([-tv[:, 1], tv[:, 0]])
    return route + lateral * normals


def _blend_onto(px, py, h0, route: np.ndarray, blend: float, kappa: float,
                reach: float) -> list[np.ndarray]:
    """Hermite blend from the pose onto a route, then follow it; [] if too sharp."""
    arcs = polyline_arcs(route)
    a0, _ = project_to_polyline(px, py, route, arcs)
    target_arc = min(a0 + blend, float(arcs[-1]))
    tp = point_at_arc(route, arcs, target_arc)
    tt = tangent_at_arc(route, arcs, target_arc)
    head = _hermite_path((px, py), h0, tp, tt)
    idx = int(np.searchsorted(arcs, target_arc, side="right"))
    rest = route[idx:]
    path = np.vstack([head, rest]) if len(rest) else head
    path = _extend(path, reach)
    if not _path_curvature_ok(path, kappa):
        return []
    return [path]


def _arc_path(px, py, h0, curvature: float, reach: float) -> np.ndarray:
    n = max(int(reach), 8)
    ds = reach / n
    out = np.empty((n + 1, 2))
    x, y, h = px, py, h0
    for i in range(n + 1):
        out[i] = (x, y)
        x += ds * math.cos(h)
        y += ds * math.sin(h)
        h = wrap_angle(h + curvature * ds)
    return out


def write_candidate_log(cset: CandidateSet, path: str | Path) -> None:
    """Debug/corpus dump: one JSON line per candidate."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, cand in enumerate(cset.candidates):
            fh.write(json.dumps({
                "scenario_id": cset.scenario_id,
                "seed": cset.seed,
                "candidate_index": i,
                "points": [[float(x), float(y)] for x, y in cand.points],
            }, sort_keys=True, separators=(",", ":")) + "\n")


def perturbed_replay(scenario: Scenario, candidate: Trajectory) -> Trajectory:
    """Recorded history (steps 0..9) followed by the candidate (steps 10..89)."""
    hist = scenario.trajectories[scenario.adv_id].points[:HISTORY_END]
    return Trajectory(np.vstack([hist, candidate.points]), start_time_index=0)
