"""Scenario, trajectory and map data types plus the on-disk JSON format.

A scenario file is a single JSON document::

    {version, dt, ego_id, adv_id,
     agents: [{id, length, width, points: [[x, y], ...], start_index}],
     map: {lanes: [{id, width, centerline: [[x, y], ...], successors: [...]}],
           road_edges: [[[x, y], ...], ...]}}

Coordinates are meters, sampled at a fixed 0.1 s step once loaded. Numbers
are written with 6 decimal places; loading a saved file reproduces the
in-memory scenario exactly at that precision.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import RegionIndex, polyline_arcs, project_to_polyline, wrap_angle

DT = 0.1
HORIZON = 91           # 9 s: 1 s history + 8 s future at 10 Hz
HISTORY_END = 10       # step index of the last history state
FUTURE_STEPS = 80
DEFAULT_LENGTH = 4.5
DEFAULT_WIDTH = 2.0
FILE_VERSION = 1


class ScenarioError(ValueError):
    """Base class for scenario parsing/validation failures."""


class ScenarioFormatError(ScenarioError):
    """Malformed document; the message names the offending field path."""


class ScenarioValidationError(ScenarioError):
    """Well-formed document violating a scenario invariant."""


@dataclass(frozen=True)
class Trajectory:
    """Ordered (x, y) samples at a fixed 0.1 s step."""

    points: np.ndarray                # (T, 2) float64, read-only
    start_time_index: int = 0

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ScenarioValidationError("trajectory needs >= 2 (x, y) points")
        if not np.all(np.isfinite(pts)):
            raise ScenarioValidationError("trajectory contains non-finite coordinates")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Trajectory)
            and self.start_time_index == other.start_time_index
            and self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
        )

    def arc_length(self) -> float:
        return float(polyline_arcs(self.points)[-1])

    def motion(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached (headings, speeds); valid because points are immutable."""
        cached = getattr(self, "_motion", None)
        if cached is None:
            cached = derive_motion(self.points)
            object.__setattr__(self, "_motion", cached)
        return cached


def derive_motion(points: np.ndarray, dt: float = DT) -> tuple[np.ndarray, np.ndarray]:
    """Headings and speeds implied by consecutive positions.

    heading[t] and speed[t] describe the displacement out of step t; the
    final step copies the previous value. Zero displacements inherit the
    preceding heading.
    """
    pts = np.asarray(points, dtype=float)
    d = np.diff(pts, axis=0)
    step = np.hypot(d[:, 0], d[:, 1])
    speeds = np.concatenate([step, step[-1:]]) / dt
    headings = np.zeros(len(pts))
    h = 0.0
    moved = False
    for t in range(len(pts) - 1):
        if step[t] > 1e-9:
            h = math.atan2(d[t, 1], d[t, 0])
            if not moved:
                headings[:t] = h   # backfill a leading stationary stretch
                moved = True
        headings[t] = h
    headings[-1] = headings[-2] if len(pts) > 1 else h
    return headings, speeds


@dataclass(frozen=True)
class LaneInfo:
    lane_id: str
    width: float
    centerline: np.ndarray            # (n, 2)
    successors: tuple[str, ...] = ()

    def __post_init__(self):
        cl = np.ascontiguousarray(np.asarray(self.centerline, dtype=float))
        if cl.ndim != 2 or cl.shape[1] != 2 or cl.shape[0] < 2:
            raise ScenarioValidationError(f"lane {self.lane_id}: centerline needs >= 2 points")
        if not (self.width > 0):
            raise ScenarioValidationError(f"lane {self.lane_id}: width must be positive")
        cl.flags.writeable = False
        object.__setattr__(self, "centerline", cl)
        object.__setattr__(self, "successors", tuple(self.successors))


class MapInfo:
    """Lane graph plus the closed road-edge rings bounding the drivable region."""

    def __init__(self, lanes: list[LaneInfo], road_edges: list[np.ndarray]):
        self.lanes = list(lanes)
        self.road_edges = [np.ascontiguousarray(np.asarray(r, dtype=float)) for r in road_edges]
        for r in self.road_edges:
            r.flags.writeable = False
        self.lane_by_id = {l.lane_id: l for l in self.lanes}
        if len(self.lane_by_id) != len(self.lanes):
            raise ScenarioValidationError("duplicate lane ids")
        for lane in self.lanes:
            for s in lane.successors:
                if s not in self.lane_by_id:
                    raise ScenarioValidationError(f"lane {lane.lane_id}: unknown successor {s}")
        self.predecessors: dict[str, tuple[str, ...]] = {l.lane_id: () for l in self.lanes}
        for lane in self.lanes:
            for s in lane.successors:
                self.predecessors[s] = self.predecessors[s] + (lane.lane_id,)
        self.region = RegionIndex(self.road_edges)
        self._lane_arcs = {l.lane_id: polyline_arcs(l.centerline) for l in self.lanes}

    def lane_arcs(self, lane_id: str) -> np.ndarray:
        return self._lane_arcs[lane_id]

    def nearest_lane(self, x: float, y: float) -> tuple[LaneInfo, float, float]:
        """Lane whose centerline is closest to (x, y) -> (lane, arc, lateral)."""
        best = None
        for lane in self.lanes:
            arc, lat = project_to_polyline(x, y, lane.centerline, self._lane_arcs[lane.lane_id])
            if best is None or lat < best[2]:
                best = (lane, arc, lat)
        if best is None:
            raise ScenarioValidationError("map has no lanes")
        return best

    def __eq__(self, other) -> bool:
        if not isinstance(other, MapInfo):
            return NotImplemented
        if len(self.lanes) != len(other.lanes) or len(self.road_edges) != len(other.road_edges):
            return False
        for a, b in zip(self.lanes, other.lanes):
            if (a.lane_id, a.width, a.successors) != (b.lane_id, b.width, b.successors):
                return False
            if not np.array_equal(a.centerline, b.centerline):
                return False
        return all(np.array_equal(a, b) for a, b in zip(self.road_edges, other.road_edges))


@dataclass
class Scenario:
    """Recorded agent trajectories, map, and the ego/adversary role split."""

    trajectories: dict[int, Trajectory]
    map_info: MapInfo
    ego_id: int
    adv_id: int
    agent_dims: dict[int, tuple[float, float]]
    scenario_id: str = field(default="", compare=False)

    def __post_init__(self):
        if self.ego_id == self.adv_id:
            raise ScenarioValidationError("ego_id and adv_id must differ")
        for name, aid in (("ego_id", self.ego_id), ("adv_id", self.adv_id)):
            if aid not in self.trajectories:
                raise ScenarioValidationError(f"{name} {aid} has no trajectory")
        lengths = {len(t) for t in self.trajectories.values()}
        if len(lengths) != 1:
            raise ScenarioValidationError("agent trajectories have mismatched horizons")
        for aid in self.trajectories:
            self.agent_dims.setdefault(aid, (DEFAULT_LENGTH, DEFAULT_WIDTH))

    @property
    def horizon(self) -> int:
        return len(next(iter(self.trajectories.values())))

    @property
    def agent_ids(self) -> list[int]:
        return sorted(self.trajectories)

    def ego_goal(self) -> tuple[float, float]:
        p = self.trajectories[self.ego_id].points[-1]
        return float(p[0]), float(p[1])


# ---------------------------------------------------------------------------
# serialization


def _fmt_value(v, out: io.StringIO) -> None:
    if isinstance(v, bool):
        out.write("true" if v else "false")
    elif isinstance(v, float):
        out.write(f"{v:.6f}")
    elif isinstance(v, (int, np.integer)):
        out.write(str(int(v)))
    elif isinstance(v, str):
        out.write(json.dumps(v))
    elif isinstance(v, dict):
        out.write("{")
        for i, (k, item) in enumerate(v.items()):
            if i:
                out.write(",")
            out.write(json.dumps(k))
            out.write(":")
            _fmt_value(item, out)
        out.write("}")
    elif isinstance(v, (list, tuple, np.ndarray)):
        out.write("[")
        for i, item in enumerate(v):
            if i:
                out.write(",")
            _fmt_value(float(item) if isinstance(item, np.floating) else item, out)
        out.write("]")
    elif v is None:
        out.write("null")
    else:
        raise TypeError(f"cannot serialize {type(v)!r}")


def scenario_to_document(s: Scenario) -> dict:
    return {
        "version": FILE_VERSION,
        "dt": DT,
        "ego_id": s.ego_id,
        "adv_id": s.adv_id,
        "agents": [
            {
                "id": aid,
                "length": float(s.agent_dims[aid][0]),
                "width": float(s.agent_dims[aid][1]),
                "points": [[float(x), float(y)] for x, y in s.trajectories[aid].points],
                "start_index": s.trajectories[aid].start_time_index,
            }
            for aid in s.agent_ids
        ],
        "map": {
            "lanes": [
                {
                    "id": lane.lane_id,
                    "width": float(lane.width),
                    "centerline": [[float(x), float(y)] for x, y in lane.centerline],
                    "successors": list(lane.successors),
                }
                for lane in s.map_info.lanes
            ],
            "road_edges": [[[float(x), float(y)] for x, y in ring] for ring in s.map_info.road_edges],
        },
    }


def save_scenario(s: Scenario, path: str | Path) -> None:
    """Write a scenario file; rejects non-finite coordinates before touching disk."""
    for aid, traj in s.trajectories.items():
        if not np.all(np.isfinite(traj.points)):
            raise ScenarioValidationError(f"agent {aid}: non-finite coordinate")
    out = io.StringIO()
    _fmt_value(scenario_to_document(s), out)
    Path(path).write_text(out.getvalue() + "\n", encoding="utf-8")


def _require(doc: dict, key: str, kind, path: str):
    if key not in doc:
        raise ScenarioFormatError(f"{path}.{key}: missing")
    v = doc[key]
    if kind is float:
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ScenarioFormatError(f"{path}.{key}: expected number, got {type(v).__name__}")
        return float(v)
    if not isinstance(v, kind) or isinstance(v, bool) and kind is int:
        want = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ScenarioFormatError(f"{path}.{key}: expected {want}, got {type(v).__name__}")
    return v


def _parse_points(raw, path: str) -> np.ndarray:
    if not isinstance(raw, list) or len(raw) < 2:
        raise ScenarioFormatError(f"{path}: expected a list of >= 2 [x, y] pairs")
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as e:
        raise ScenarioFormatError(f"{path}: not numeric ({e})") from None
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ScenarioFormatError(f"{path}: expected [x, y] pairs")
    if not np.all(np.isfinite(arr)):
        raise ScenarioFormatError(f"{path}: non-finite coordinate")
    return arr


def _resample(points: np.ndarray, dt_src: float) -> np.ndarray:
    """Linear interpolation from a dt_src grid onto the 0.1 s grid."""
    span = (len(points) - 1) * dt_src
    n_new = int(math.floor(span / DT + 1e-9)) + 1
    t_src = np.arange(len(points)) * dt_src
    t_new = np.arange(n_new) * DT
    return np.column_stack([np.interp(t_new, t_src, points[:, 0]),
                            np.interp(t_new, t_src, points[:, 1])])


def load_scenario(path: str | Path) -> Scenario:
    """Parse and validate a scenario file.

    Trajectories recorded at a different time step are linearly resampled to
    the 0.1 s grid; agents are padded (first/last point held) onto a shared
    horizon.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ScenarioFormatError(f"$: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ScenarioFormatError("$: expected a JSON object")
    version = _require(doc, "version", int, "$")
    if version != FILE_VERSION:
        raise ScenarioFormatError(f"$.version: unsupported version {version}")
    dt_src = _require(doc, "dt", float, "$")
    if not (dt_src > 0):
        raise ScenarioFormatError("$.dt: must be positive")
    ego_id = _require(doc, "ego_id", int, "$")
    adv_id = _require(doc, "adv_id", int, "$")

    agents_raw = _require(doc, "agents", list, "$")
    trajectories: dict[int, Trajectory] = {}
    dims: dict[int, tuple[float, float]] = {}
    for i, a in enumerate(agents_raw):
        apath = f"$.agents[{i}]"
        if not isinstance(a, dict):
            raise ScenarioFormatError(f"{apath}: expected object")
        aid = _require(a, "id", int, apath)
        if aid in trajectories:
            raise ScenarioFormatError(f"{apath}.id: duplicate agent id {aid}")
        length = float(a.get("length", DEFAULT_LENGTH))
        width = float(a.get("width", DEFAULT_WIDTH))
        if length <= 0 or width <= 0:
            raise ScenarioFormatError(f"{apath}: non-positive footprint")
        pts = _parse_points(_require(a, "points", list, apath), f"{apath}.points")
        start = int(a.get("start_index", 0))
        if abs(dt_src - DT) > 1e-12:
            pts = _resample(pts, dt_src)
            start = int(round(start * dt_src / DT))
        trajectories[aid] = Trajectory(pts, start)
        dims[aid] = (length, width)
    if not trajectories:
        raise ScenarioFormatError("$.agents: empty")

    horizon = max(t.start_time_index + len(t) for t in trajectories.values())
    for aid, t in list(trajectories.items()):
        pts = t.points
        pre = t.start_time_index
        post = horizon - pre - len(pts)
        if pre or post > 0:
            pts = np.concatenate([np.repeat(pts[:1], pre, axis=0), pts,
                                  np.repeat(pts[-1:], max(post, 0), axis=0)])
            trajectories[aid] = Trajectory(pts[:horizon], t.start_time_index)

    map_raw = _require(doc, "map", dict, "$")
    lanes = []
    for i, l in enumerate(map_raw.get("lanes", [])):
        lpath = f"$.map.lanes[{i}]"
        if not isinstance(l, dict):
            raise ScenarioFormatError(f"{lpath}: expected object")
        lanes.append(LaneInfo(
            lane_id=str(_require(l, "id", (str, int), lpath)),
            width=_require(l, "width", float, lpath),
            centerline=_parse_points(_require(l, "centerline", list, lpath), f"{lpath}.centerline"),
            successors=tuple(str(x) for x in l.get("successors", [])),
        ))
    edges = [
        _parse_points(ring, f"$.map.road_edges[{i}]")
        for i, ring in enumerate(map_raw.get("road_edges", []))
    ]
    if ego_id not in trajectories:
        raise ScenarioValidationError(f"ego_id {ego_id} has no trajectory")
    if adv_id not in trajectories:
        raise ScenarioValidationError(f"adv_id {adv_id} has no trajectory")
    return Scenario(
        trajectories=trajectories,
        map_info=MapInfo(lanes, edges),
        ego_id=ego_id,
        adv_id=adv_id,
        agent_dims=dims,
        scenario_id=path.stem,
    )


def read_manifest(path: str | Path) -> list[Path]:
    """Scenario paths listed one per line, relative to the manifest's directory."""
    base = Path(path).parent
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out


def write_manifest(paths: list[Path], manifest_path: str | Path) -> None:
    base = Path(manifest_path).parent
    lines = []
    for p in paths:
        try:
            lines.append(str(Path(p).relative_to(base)))
        except ValueError:
            lines.append(str(p))
    Path(manifest_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
