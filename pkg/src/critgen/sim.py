"""Deterministic fixed-step episode simulator.

Agents update in ascending ID order, all observing the previous step's
states. Policies either return a normalized (steer, accel) action that the
kinematic bicycle integrates, or teleport along a recorded trajectory.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import PathLocator, obb_corners, sat_obb_overlap, wrap_angle
from .scenario import DT, MapInfo, Scenario, Trajectory, derive_motion

ACCEL_MIN = -6.0
ACCEL_MAX = 4.0
MAX_WHEEL_ANGLE = 0.5
WHEELBASE_FRAC = 0.6
SUCCESS_RADIUS = 2.0
TIMEOUT_FACTOR = 1.5

OUTCOMES = ("Success", "Crash", "OutOfRoad", "Timeout")


def _clamp(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else (hi if v > hi else v)


@dataclass(frozen=True, slots=True)
class Action:
    """Normalized steering/acceleration command; components clamp to [-1, 1]."""

    steer: float
    accel: float

    def __post_init__(self):
        object.__setattr__(self, "steer", _clamp(float(self.steer), -1.0, 1.0))
        object.__setattr__(self, "accel", _clamp(float(self.accel), -1.0, 1.0))


@dataclass(slots=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float
    length: float
    width: float

    def corners(self):
        return obb_corners(self.x, self.y, self.heading, self.length, self.width)

    def velocity(self) -> tuple[float, float]:
        return self.speed * math.cos(self.heading), self.speed * math.sin(self.heading)


def action_to_accel(a: float) -> float:
    """Normalized accel in [-1, 1] -> physical accel in [-6, +4] m/s^2."""
    return 5.0 * _clamp(a, -1.0, 1.0) - 1.0


def accel_to_action(a_mps2: float) -> float:
    return _clamp((a_mps2 + 1.0) / 5.0, -1.0, 1.0)


def step_kinematics(state: AgentState, action: Action, dt: float = DT) -> AgentState:
    """Kinematic bicycle step; speed floors at 0, wheelbase is 0.6 x length."""
    wheel = MAX_WHEEL_ANGLE * action.steer
    acc = action_to_accel(action.accel)
    wheelbase = WHEELBASE_FRAC * state.length
    v = state.speed
    nx = state.x + v * math.cos(state.heading) * dt
    ny = state.y + v * math.sin(state.heading) * dt
    nh = wrap_angle(state.heading + v / wheelbase * math.tan(wheel) * dt)
    nv = max(0.0, v + acc * dt)
    return AgentState(nx, ny, nh, nv, state.length, state.width)


# ---------------------------------------------------------------------------
# IDM


@dataclass(frozen=True)
class IdmParams:
    v0: float = 10.0        # desired speed, m/s
    s0: float = 2.0         # minimum gap, m
    th: float = 1.5         # time headway, s
    a_max: float = 2.0      # max acceleration, m/s^2
    b_dec: float = 4.0      # comfortable deceleration, m/s^2
    delta: float = 4.0


def idm_accel(follower: AgentState, leader: tuple[float, float] | None, params: IdmParams) -> float:
    """Car-following acceleration; leader is (bumper gap, leader speed) or None."""
    v = max(follower.speed, 0.0)
    free = 1.0 - (v / params.v0) ** params.delta if params.v0 > 0 else 0.0
    if leader is None:
        return _clamp(params.a_max * free, ACCEL_MIN, ACCEL_MAX)
    gap, lv = leader
    if gap <= 0:
        return ACCEL_MIN
    s_star = params.s0 + v * params.th + v * (v - lv) / (2.0 * math.sqrt(params.a_max * params.b_dec))
    return _clamp(params.a_max * (free - (s_star / gap) ** 2), ACCEL_MIN, ACCEL_MAX)


# ---------------------------------------------------------------------------
# collision / off-road


@dataclass(frozen=True)
class ContactInfo:
    normal: tuple[float, float]       # unit vector, oriented from a to b
    rel_speed: float                  # (v_b - v_a) . normal
    penetration: float


def detect_collision(a: AgentState, b: AgentState) -> ContactInfo | None:
    """Oriented-box overlap via the separating-axis test over the 4 box axes."""
    # cheap reject: circumscribed circles
    r = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    dx = b.x - a.x
    dy = b.y - a.y
    if dx * dx + dy * dy > r * r:
        return None
    hit = sat_obb_overlap(a.corners(), b.corners(), a.heading, b.heading)
    if hit is None:
        return None
    pen, nx, ny = hit
    if nx * dx + ny * dy < 0.0:
        nx, ny = -nx, -ny
    avx, avy = a.velocity()
    bvx, bvy = b.velocity()
    return ContactInfo((nx, ny), (bvx - avx) * nx + (bvy - avy) * ny, pen)


def detect_offroad(state: AgentState, map_info: MapInfo) -> bool:
    """True iff any footprint corner lies outside the drivable region."""
    corners = np.asarray(state.corners())
    return not bool(map_info.region.contains_many(corners).all())


# ---------------------------------------------------------------------------
# policies


class Policy:
    """Per-episode stateful controller for one agent."""

    def act(self, t: int, states: dict[int, AgentState], world: "World") -> Action:
        raise NotImplementedError

    def next_state(self, t: int, states: dict[int, AgentState], world: "World") -> AgentState | None:
        """Teleporting policies return the state for step t+1 directly."""
        return None


class World:
    """Read-only episode context shared by policies."""

    def __init__(self, scenario: Scenario, seed: int):
        self.scenario = scenario
        self.map = scenario.map_info
        self.seed = seed
        self.dt = DT


class ReplayPolicy(Policy):
    def __init__(self, traj: Trajectory, dims: tuple[float, float]):
        self.points = traj.points
        self.headings, self.speeds = traj.motion()
        self.dims = dims

    def state_at(self, t: int) -> AgentState:
        i = min(t, len(self.points) - 1)
        return AgentState(float(self.points[i, 0]), float(self.points[i, 1]),
                          float(self.headings[i]), float(self.speeds[i]),
                          self.dims[0], self.dims[1])

    def next_state(self, t, states, world):
        return self.state_at(t + 1)


class PurePursuitMixin:
    """Steering toward a lookahead point on a reference path."""

    def steer_to(self, state: AgentState, locator: PathLocator, arc: float,
                 lateral_shift: float = 0.0) -> float:
        lookahead = _clamp(1.2 * state.speed, 4.0, 12.0)
        tx, ty = locator.point_at(arc + lookahead)
        if lateral_shift:
            ux, uy = locator.tangent_at(arc + lookahead)
            tx += -uy * lateral_shift
            ty += ux * lateral_shift
        alpha = wrap_angle(math.atan2(ty - state.y, tx - state.x) - state.heading)
        wheelbase = WHEELBASE_FRAC * state.length
        wheel = math.atan2(2.0 * wheelbase * math.sin(alpha), lookahead)
        return _clamp(wheel / MAX_WHEEL_ANGLE, -1.0, 1.0)


class IdmPolicy(Policy, PurePursuitMixin):
    """Reactive car-following along the agent's recorded route."""

    LOOKAHEAD_M = 60.0
    LANE_BAND_FRAC = 0.75

    def __init__(self, agent_id: int, scenario: Scenario, params: IdmParams | None):
        self.agent_id = agent_id
        traj = scenario.trajectories[agent_id]
        pts = _dedup(traj.points)
        self.locator = PathLocator(pts)
        if params is None:
            _, speeds = derive_motion(traj.points)
            peak = float(speeds.max())
            params = IdmParams(v0=peak if peak > 0.5 else 10.0)
        self.params = params
        # coarse samples for locating other agents in this route's frame
        arcs = np.arange(0.0, self.locator.total + 2.0, 2.0)
        self.sample_xy = np.asarray([self.locator.point_at(float(s)) for s in arcs])
        self.sample_arc = arcs
        lane, _, _ = scenario.map_info.nearest_lane(float(pts[0, 0]), float(pts[0, 1]))
        self.band = self.LANE_BAND_FRAC * lane.width

    def leader(self, me: AgentState, my_arc: float, states: dict[int, AgentState]):
        best = None
        for aid, st in states.items():
            if aid == self.agent_id:
                continue
            d2 = (self.sample_xy[:, 0] - st.x) ** 2 + (self.sample_xy[:, 1] - st.y) ** 2
            i = int(np.argmin(d2))
            lat = math.sqrt(float(d2[i]))
            if lat > self.band:
                continue
            arc = float(self.sample_arc[i])
            gap = arc - my_arc - 0.5 * (me.length + st.length)
            if gap <= 0.0 or arc - my_arc > self.LOOKAHEAD_M:
                continue
            ux, uy = self.locator.tangent_at(arc)
            lv = st.speed * (math.cos(st.heading) * ux + math.sin(st.heading) * uy)
            if best is None or gap < best[0]:
                best = (gap, lv)
        return best

    def act(self, t, states, world):
        me = states[self.agent_id]
        arc, _ = self.locator.locate(me.x, me.y)
        steer = self.steer_to(me, self.locator, arc)
        leader = self.leader(me, arc, states)
        # the route end acts as a parked leader so agents stop at path end
        end_gap = self.locator.total - arc - 0.5 * me.length
        if end_gap < self.LOOKAHEAD_M and (leader is None or end_gap < leader[0]):
            leader = (max(end_gap, 0.1), 0.0)
        acc = idm_accel(me, leader, self.params)
        return Action(steer, accel_to_action(acc))


@dataclass(frozen=True)
class ReplayBinding:
    """Replay a trajectory (the agent's recorded one when trajectory is None)."""

    trajectory: Trajectory | None = None

    def make_policy(self, scenario: Scenario, agent_id: int, seed: int) -> Policy:
        traj = self.trajectory or scenario.trajectories[agent_id]
        return ReplayPolicy(traj, scenario.agent_dims[agent_id])


@dataclass(frozen=True)
class IdmBinding:
    params: IdmParams | None = None

    def make_policy(self, scenario: Scenario, agent_id: int, seed: int) -> Policy:
        return IdmPolicy(agent_id, scenario, self.params)


# ---------------------------------------------------------------------------
# episode records


@dataclass
class AgentTrace:
    xy: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    actions: np.ndarray               # (n-1, 2) normalized (steer, accel)
    offroad: np.ndarray               # (n,) bool

    def trajectory(self) -> Trajectory:
        return Trajectory(self.xy)


@dataclass
class CollisionEvent:
    pair: tuple[int, int]
    step: int
    contact: ContactInfo


@dataclass
class RolloutRecord:
    scenario_id: str
    seed: int
    outcome: str
    term_step: int
    agents: dict[int, AgentTrace]
    collision: CollisionEvent | None = None
    collision_steps: dict[int, list[int]] = field(default_factory=dict)
    offroad_steps: dict[int, list[int]] = field(default_factory=dict)

    def ego_trajectory(self, ego_id: int) -> Trajectory:
        return self.agents[ego_id].trajectory()

    def to_json_line(self) -> str:
        doc = {
            "scenario_id": self.scenario_id,
            "seed": self.seed,
            "outcome": self.outcome,
            "term_step": self.term_step,
            "agents": {
                str(aid): {
                    "xy": [[float(x), float(y)] for x, y in tr.xy],
                    "heading": [float(h) for h in tr.heading],
                    "speed": [float(v) for v in tr.speed],
                }
                for aid, tr in sorted(self.agents.items())
            },
        }
        if self.collision is not None:
            doc["contact"] = {
                "normal": [float(self.collision.contact.normal[0]),
                           float(self.collision.contact.normal[1])],
                "rel_speed": float(self.collision.contact.rel_speed),
            }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def write_rollout_log(records: list[RolloutRecord], path: str | Path) -> None:
    Path(path).write_text("".join(r.to_json_line() + "\n" for r in records), encoding="utf-8")


# ---------------------------------------------------------------------------
# engine


def run_episode(
    scenario: Scenario,
    bindings: dict[int, object],
    seed: int,
    *,
    stop_on_ego: bool = True,
    max_steps: int | None = None,
    record_events: bool = False,
) -> RolloutRecord:
    """Simulate one episode.

    Terminates on ego crash, ego off-road, ego within 2 m of its recorded
    goal, or step-budget exhaustion. With stop_on_ego=False the episode runs
    the full budget regardless (demonstration mode); record_events adds
    rising-edge collision/off-road step lists for every agent.
    """
    ids = scenario.agent_ids
    missing = [a for a in ids if a not in bindings]
    extra = [a for a in bindings if a not in scenario.trajectories]
    if missing or extra:
        raise ValueError(f"bindings incomplete: missing {missing}, unknown {extra}")

    world = World(scenario, seed)
    policies = {aid: bindings[aid].make_policy(scenario, aid, seed) for aid in ids}
    states: dict[int, AgentState] = {}
    for aid in ids:
        traj = scenario.trajectories[aid]
        pts = traj.points
        h, v = traj.motion()
        dims = scenario.agent_dims[aid]
        states[aid] = AgentState(float(pts[0, 0]), float(pts[0, 1]),
                                 float(h[0]), float(v[0]), dims[0], dims[1])

    budget = max_steps if max_steps is not None else int(TIMEOUT_FACTOR * scenario.horizon)
    gx, gy = scenario.ego_goal()
    ego = scenario.ego_id

    traces = {aid: {"xy": [], "h": [], "v": [], "a": [], "off": []} for aid in ids}
    overlap_prev: set[tuple[int, int]] = set()
    offroad_prev: dict[int, bool] = {aid: False for aid in ids}
    collision_steps: dict[int, list[int]] = {aid: [] for aid in ids}
    offroad_steps: dict[int, list[int]] = {aid: [] for aid in ids}

    region = scenario.map_info.region
    flag_ids = ids if record_events else sorted({ego, scenario.adv_id})

    def record(step_states: dict[int, AgentState], off_flags: dict[int, bool]) -> None:
        for aid in ids:
            st = step_states[aid]
            tr = traces[aid]
            tr["xy"].append((st.x, st.y))
            tr["h"].append(st.heading)
            tr["v"].append(st.speed)
            tr["off"].append(off_flags[aid])

    def offroad_flags(step_states: dict[int, AgentState]) -> dict[int, bool]:
        corners = np.asarray([c for aid in flag_ids for c in step_states[aid].corners()])
        inside = region.contains_many(corners)
        flags = {aid: False for aid in ids}
        for k, aid in enumerate(flag_ids):
            flags[aid] = not bool(inside[4 * k:4 * k + 4].all())
        return flags

    outcome = "Timeout"
    term = budget
    collision: CollisionEvent | None = None

    flags = offroad_flags(states)
    record(states, flags)
    offroad_prev = flags

    for t in range(budget):
        new_states: dict[int, AgentState] = {}
        for aid in ids:
            pol = policies[aid]
            nxt = pol.next_state(t, states, world)
            if nxt is not None:
                new_states[aid] = nxt
                traces[aid]["a"].append((0.0, 0.0))
            else:
                act = pol.act(t, states, world)
                new_states[aid] = step_kinematics(states[aid], act, DT)
                traces[aid]["a"].append((act.steer, act.accel))
        states = new_states
        step = t + 1

        flags = offroad_flags(states)
        record(states, flags)

        # collisions: ego pairs always, all pairs when recording events
        ego_contact: tuple[int, ContactInfo] | None = None
        pairs = (
            [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]]
            if record_events
            else [(min(ego, o), max(ego, o)) for o in ids if o != ego]
        )
        for a, b in pairs:
            c = detect_collision(states[a], states[b])
            key = (a, b)
            if c is not None:
                if key not in overlap_prev:
                    collision_steps[a].append(step)
                    collision_steps[b].append(step)
                overlap_prev.add(key)
                if ego in key and ego_contact is None:
                    other = b if a == ego else a
                    cc = c if a == ego else ContactInfo(
                        (-c.normal[0], -c.normal[1]), c.rel_speed, c.penetration)
                    ego_contact = (other, cc)
            else:
                overlap_prev.discard(key)
        for aid in ids:
            if flags[aid] and not offroad_prev[aid]:
                offroad_steps[aid].append(step)
        offroad_prev = flags

        if stop_on_ego:
            if ego_contact is not None:
                other, cc = ego_contact
                collision = CollisionEvent((ego, other), step, cc)
                outcome, term = "Crash", step
                break
            if flags[ego]:
                outcome, term = "OutOfRoad", step
                break
            es = states[ego]
            if math.hypot(es.x - gx, es.y - gy) <= SUCCESS_RADIUS:
                outcome, term = "Success", step
                break

    agents = {
        aid: AgentTrace(
            xy=np.asarray(traces[aid]["xy"], dtype=float),
            heading=np.asarray(traces[aid]["h"], dtype=float),
            speed=np.asarray(traces[aid]["v"], dtype=float),
            actions=np.asarray(traces[aid]["a"], dtype=float).reshape(-1, 2),
            offroad=np.asarray(traces[aid]["off"], dtype=bool),
        )
        for aid in ids
    }
    return RolloutRecord(
        scenario_id=scenario.scenario_id,
        seed=seed,
        outcome=outcome,
        term_step=term,
        agents=agents,
        collision=collision,
        collision_steps=collision_steps,
        offroad_steps=offroad_steps,
    )


def _dedup(points: np.ndarray) -> np.ndarray:
    keep = [0]
    for i in range(1, len(points)):
        if np.hypot(*(points[i] - points[keep[-1]])) > 1e-9:
            keep.append(i)
    if len(keep) < 2:
        return np.vstack([points[0], points[0] + [1e-6, 0.0]])
    return points[keep]
