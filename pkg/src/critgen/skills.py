"""Skill extraction from heuristic demonstrations and the reactive adversary.

Demonstrations come from rolling every agent with jittered IDM parameters.
Fixed-horizon (observation, action-sequence) windows are labeled by their
proximity to collision / off-road events: windows starting within twice the
horizon before a collision are adversarial, the same window before an
off-road event is excluded (exclusion wins), everything else is benign.

The skill space is a k-means codebook over flattened action sequences with
two state-conditioned empirical priors (benign / adversarial) over a
quantized observation grid. The adversary replays its ranked candidate
through a tracking controller, then switches to hierarchical skill execution
a fixed offset before the anticipated point of maximal collision risk.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .candidates import extract_subgoals, perturbed_replay
from .criticality import EgoHistory
from .geom import PathLocator, wrap_angle
from .scenario import DT, MapInfo, Scenario, Trajectory, derive_motion
from .sim import (Action, AgentState, IdmBinding, IdmParams, Policy, PurePursuitMixin,
                  RolloutRecord, accel_to_action, run_episode)
from .synth import derive_key, rng_from

H_DEFAULT = 10
C_DEFAULT = 32
OBS_DIM = 9

# own speed, heading error to subgoal, distance to subgoal, rel pos (x, y),
# rel vel (x, y) of nearest agent in own frame, lateral lane offset, edge distance
OBS_SCALES = np.array([10.0, 0.5, 10.0, 10.0, 5.0, 5.0, 5.0, 1.5, 4.0])
QUANT_EDGES = (
    (4.0, 8.0),       # speed
    (-0.15, 0.15),    # heading error
    (5.0, 12.0),      # subgoal distance
    (0.0, 12.0),      # nearest agent, longitudinal
    (-2.0, 2.0),      # nearest agent, lateral
    (-2.0, 2.0),      # relative velocity, longitudinal
    (-2.0, 2.0),      # relative velocity, lateral
    (-0.5, 0.5),      # lane offset
    (1.5, 4.0),       # road-edge distance
)
FAR_AGENT = (30.0, 0.0, 0.0, 0.0)
LIBRARY_VERSION = 1

LABEL_BENIGN = "benign"
LABEL_ADVERSARIAL = "adversarial"
LABEL_EXCLUDED = "excluded"


def quantize_obs(obs: np.ndarray) -> tuple[int, ...]:
    cell = []
    for v, (lo, hi) in zip(obs, QUANT_EDGES):
        cell.append(0 if v < lo else (1 if v < hi else 2))
    return tuple(cell)


def _signed_lane_offset(map_info: MapInfo, x: float, y: float) -> float:
    lane, arc, lat = map_info.nearest_lane(x, y)
    from .geom import point_at_arc, tangent_at_arc

    arcs = map_info.lane_arcs(lane.lane_id)
    cx, cy = point_at_arc(lane.centerline, arcs, arc)
    tx, ty = tangent_at_arc(lane.centerline, arcs, arc)
    side = tx * (y - cy) - ty * (x - cx)
    return math.copysign(lat, side) if side else lat


def build_observation(own: AgentState, others: list[AgentState], subgoal: tuple[float, float],
                      map_info: MapInfo) -> np.ndarray:
    """Fixed 9-dim observation vector; see OBS_SCALES for the feature order."""
    c, s = math.cos(own.heading), math.sin(own.heading)
    sgx, sgy = subgoal
    sg_dist = math.hypot(sgx - own.x, sgy - own.y)
    sg_err = wrap_angle(math.atan2(sgy - own.y, sgx - own.x) - own.heading) if sg_dist > 0.3 else 0.0

    rel = FAR_AGENT
    best = float("inf")
    ovx, ovy = own.velocity()
    for st in others:
        d2 = (st.x - own.x) ** 2 + (st.y - own.y) ** 2
        if d2 < best:
            best = d2
            dx, dy = st.x - own.x, st.y - own.y
            vx, vy = st.velocity()
            rel = (dx * c + dy * s, -dx * s + dy * c,
                   (vx - ovx) * c + (vy - ovy) * s, -(vx - ovx) * s + (vy - ovy) * c)
    return np.array([
        own.speed, sg_err, sg_dist, rel[0], rel[1], rel[2], rel[3],
        _signed_lane_offset(map_info, own.x, own.y),
        map_info.region.min_distance(own.x, own.y),
    ])


# ---------------------------------------------------------------------------
# demonstrations


@dataclass
class DemoTrace:
    scenario: Scenario
    record: RolloutRecord
    scenario_path: str = ""


def demo_idm_params(scenario: Scenario, agent_id: int, seed: int) -> IdmParams:
    """Per-agent jittered IDM parameters; some agents come out aggressive."""
    rng = rng_from("demo-idm", seed, scenario.scenario_id, agent_id)
    _, speeds = derive_motion(scenario.trajectories[agent_id].points)
    peak = float(speeds.max())
    v0 = (peak if peak > 0.5 else 10.0) * float(rng.uniform(0.85, 2.0))
    return IdmParams(
        v0=v0,
        s0=float(rng.uniform(0.8, 2.0)),
        th=float(rng.uniform(0.3, 1.3)),
        a_max=float(rng.uniform(1.5, 4.0)),
        b_dec=4.0,
    )


def collect_demonstrations(scenarios: list[Scenario], seed: int,
                           paths: list[str] | None = None) -> list[DemoTrace]:
    """One full-horizon episode per scenario with every agent on jittered IDM."""
    if not scenarios:
        raise ValueError("no scenarios")
    out = []
    for i, sc in enumerate(scenarios):
        bindings = {aid: IdmBinding(demo_idm_params(sc, aid, seed)) for aid in sc.agent_ids}
        rec = run_episode(sc, bindings, seed=derive_key("demo-run", seed, sc.scenario_id) % 2**31,
                          stop_on_ego=False, max_steps=sc.horizon - 1, record_events=True)
        out.append(DemoTrace(sc, rec, paths[i] if paths else ""))
    return out


@dataclass(frozen=True)
class SkillSegment:
    obs_start: np.ndarray
    actions: np.ndarray               # (H, 2)
    label: str
    source: tuple[str, int, int]      # scenario id, agent id, start step


def window_label(start: int, twice_h: int, collision_steps: list[int],
                 offroad_steps: list[int]) -> str:
    for o in offroad_steps:
        if o - twice_h <= start <= o - 1:
            return LABEL_EXCLUDED
    for c in collision_steps:
        if c - twice_h <= start <= c - 1:
            return LABEL_ADVERSARIAL
    return LABEL_BENIGN


def segment_and_label(corpus: list[DemoTrace], horizon: int = H_DEFAULT) -> list[SkillSegment]:
    """Sliding windows of length H at stride H/2 with event-window labels."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    stride = max(horizon // 2, 1)
    twice_h = 2 * horizon
    segments = []
    for demo in corpus:
        sc = demo.scenario
        rec = demo.record
        ids = sc.agent_ids
        subgoal_track = {
            aid: _SubgoalTracker(extract_subgoals(sc.trajectories[aid]),
                                 sc.trajectories[aid].points)
            for aid in ids
        }
        states = _states_at(rec, sc)
        for aid in ids:
            tr = rec.agents[aid]
            n_actions = len(tr.actions)
            coll = rec.collision_steps.get(aid, [])
            off = rec.offroad_steps.get(aid, [])
            for start in range(0, n_actions - horizon + 1, stride):
                own = states[start][aid]
                others = [states[start][o] for o in ids if o != aid]
                obs = build_observation(own, others, subgoal_track[aid].next_for(own), sc.map_info)
                segments.append(SkillSegment(
                    obs_start=obs,
                    actions=np.array(tr.actions[start: start + horizon]),
                    label=window_label(start, twice_h, coll, off),
                    source=(sc.scenario_id, aid, start),
                ))
    return segments


class _SubgoalTracker:
    """Next checkpoint along a reference path, advancing with arc progress."""

    def __init__(self, subgoals: np.ndarray, path: np.ndarray):
        self.subgoals = subgoals
        self.locator = PathLocator(_safe_path(path))
        arcs = [self.locator.locate(float(p[0]), float(p[1]))[0] for p in subgoals]
        self.locator.reset()
        self.sg_arcs = arcs

    def next_for(self, state: AgentState) -> tuple[float, float]:
        arc, _ = self.locator.locate(state.x, state.y)
        for (sx, sy), sa in zip(self.subgoals, self.sg_arcs):
            if sa > arc + 0.5:
                return float(sx), float(sy)
        p = self.subgoals[-1]
        return float(p[0]), float(p[1])


def _safe_path(points: np.ndarray) -> np.ndarray:
    from .sim import _dedup

    return _dedup(np.asarray(points, dtype=float))


def _states_at(rec: RolloutRecord, sc: Scenario) -> list[dict[int, AgentState]]:
    n = len(next(iter(rec.agents.values())).xy)
    out = []
    for t in range(n):
        out.append({
            aid: AgentState(float(tr.xy[t, 0]), float(tr.xy[t, 1]), float(tr.heading[t]),
                            float(tr.speed[t]), *sc.agent_dims[aid])
            for aid, tr in rec.agents.items()
        })
    return out


# ---------------------------------------------------------------------------
# codebook + priors


@dataclass
class SkillLibrary:
    codebook: np.ndarray                        # (C, 2H)
    horizon: int
    member_obs: list[np.ndarray]                # per cluster (m, OBS_DIM)
    member_actions: list[np.ndarray]            # per cluster (m, H, 2)
    member_labels: list[list[str]]
    member_sources: list[list[tuple[str, int, int]]]
    benign_prior: dict[tuple[int, ...], np.ndarray]
    adversarial_prior: dict[tuple[int, ...], np.ndarray]
    seed: int = 0

    @property
    def n_clusters(self) -> int:
        return len(self.codebook)

    def prior(self, mode: str) -> dict:
        if mode == "benign":
            return self.benign_prior
        if mode == "adversarial":
            return self.adversarial_prior
        raise ValueError(f"unknown prior mode {mode!r}")

    def conditional(self, mode: str, cell: tuple[int, ...]) -> np.ndarray:
        table = self.prior(mode)
        probs = table.get(cell)
        if probs is None:
            return np.full(self.n_clusters, 1.0 / self.n_clusters)
        return probs


def kmeans(x: np.ndarray, k: int, seed: int, iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Seeded k-means++ / Lloyd; empty clusters reseed to the farthest point."""
    rng = rng_from("kmeans", seed)
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 1e-18:
            centers[j] = x[int(rng.integers(n))]
        else:
            centers[j] = x[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    assign = np.zeros(n, dtype=int)
    for _ in range(iters):
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        for j in range(k):
            sel = new_assign == j
            if sel.any():
                centers[j] = x[sel].mean(axis=0)
            else:
                far = int(dists.min(axis=1).argmax())
                centers[j] = x[far]
                new_assign[far] = j
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    return centers, assign


def build_library(segments: list[SkillSegment], n_clusters: int = C_DEFAULT,
                  seed: int = 0) -> SkillLibrary:
    """Cluster non-excluded segments and fit both conditional priors."""
    usable = [s for s in segments if s.label != LABEL_EXCLUDED]
    if len(usable) < n_clusters:
        raise ValueError(f"need >= {n_clusters} usable segments, got {len(usable)}")
    horizon = usable[0].actions.shape[0]
    x = np.stack([s.actions.ravel() for s in usable])
    codebook, assign = kmeans(x, n_clusters, seed)

    member_obs = [[] for _ in range(n_clusters)]
    member_actions = [[] for _ in range(n_clusters)]
    member_labels = [[] for _ in range(n_clusters)]
    member_sources = [[] for _ in range(n_clusters)]
    counts = {LABEL_BENIGN: {}, LABEL_ADVERSARIAL: {}}
    for seg, j in zip(usable, assign):
        j = int(j)
        member_obs[j].append(seg.obs_start)
        member_actions[j].append(seg.actions)
        member_labels[j].append(seg.label)
        member_sources[j].append(seg.source)
        cell = quantize_obs(seg.obs_start)
        row = counts[seg.label].setdefault(cell, np.zeros(n_clusters))
        row[j] += 1.0

    def smooth(table: dict) -> dict:
        return {cell: (row + 1.0) / (row.sum() + n_clusters) for cell, row in table.items()}

    return SkillLibrary(
        codebook=codebook,
        horizon=horizon,
        member_obs=[np.asarray(m).reshape(-1, OBS_DIM) for m in member_obs],
        member_actions=[np.asarray(m).reshape(-1, horizon, 2) for m in member_actions],
        member_labels=member_labels,
        member_sources=member_sources,
        benign_prior=smooth(counts[LABEL_BENIGN]),
        adversarial_prior=smooth(counts[LABEL_ADVERSARIAL]),
        seed=seed,
    )


def select_skill(lib: SkillLibrary, obs: np.ndarray, mode: str, seed: int,
                 greedy: bool = False) -> int:
    """Sample (or argmax with greedy=True) a cluster from the prior conditional."""
    probs = lib.conditional(mode, quantize_obs(obs))
    if greedy:
        return int(np.argmax(probs))
    rng = rng_from("skill-select", seed)
    return int(rng.choice(len(probs), p=probs))


def execute_skill(lib: SkillLibrary, cluster: int, obs: np.ndarray) -> np.ndarray:
    """Action sequence of the member whose stored observation is nearest.

    Empty clusters fall back to the centroid sequence.
    """
    mobs = lib.member_obs[cluster]
    if len(mobs) == 0:
        return lib.codebook[cluster].reshape(lib.horizon, 2).copy()
    d2 = (((mobs - obs) / OBS_SCALES) ** 2).sum(axis=1)
    return lib.member_actions[cluster][int(np.argmin(d2))].copy()


def compute_switch_step(candidate: Trajectory, history: EgoHistory, offset: int) -> int:
    """max(0, anticipated-risk step - offset); risk = argmin mean distance to
    the historical ego positions, time-aligned."""
    entries = history.entries()
    if not entries:
        raise ValueError("ego history is empty")
    c0 = candidate.start_time_index
    best_t, best_d = c0, float("inf")
    for k in range(len(candidate)):
        t = c0 + k
        dists = []
        for ego in entries:
            i = t - ego.start_time_index
            if 0 <= i < len(ego):
                dists.append(float(np.hypot(*(candidate.points[k] - ego.points[i]))))
        if dists:
            d = sum(dists) / len(dists)
            if d < best_d:
                best_d, best_t = d, t
    return max(0, best_t - offset)


# ---------------------------------------------------------------------------
# the reactive adversary


class AdversaryPolicy(Policy, PurePursuitMixin):
    """Candidate tracking before the switch step, hierarchical skills after."""

    def __init__(self, scenario: Scenario, agent_id: int, binding: "SkillAdversaryBinding",
                 seed: int):
        self.agent_id = agent_id
        self.map = scenario.map_info
        self.switch = binding.switch_step
        self.lib = binding.library
        self.mode = binding.prior_mode
        self.seed = derive_key("adv-policy", seed, binding.seed) % 2**31
        full = perturbed_replay(scenario, binding.candidate)
        self.ref = full.points
        self.ref_head, self.ref_speed = derive_motion(full.points)
        self.locator = PathLocator(_safe_path(full.points))
        self.ref_arcs = np.concatenate([[0.0], np.cumsum(
            np.hypot(*(np.diff(full.points, axis=0).T)))])
        self.subgoals = extract_subgoals(binding.candidate)
        self.tracker = _SubgoalTracker(self.subgoals, binding.candidate.points)
        self.buffer: np.ndarray | None = None
        self.buf_pos = 0

    def act(self, t, states, world):
        me = states[self.agent_id]
        if t < self.switch:
            return self._track(t, me)
        k = t - self.switch
        if self.buffer is None or self.buf_pos >= len(self.buffer):
            others = [st for aid, st in states.items() if aid != self.agent_id]
            obs = build_observation(me, others, self.tracker.next_for(me), self.map)
            cluster = select_skill(self.lib, obs, self.mode, derive_key(self.seed, k))
            self.buffer = execute_skill(self.lib, cluster, obs)
            self.buf_pos = 0
        a = self.buffer[self.buf_pos]
        self.buf_pos += 1
        return Action(float(a[0]), float(a[1]))

    def _track(self, t: int, me: AgentState) -> Action:
        # timed preview: steer at the reference pose a few steps ahead and
        # close the longitudinal gap to the next reference point
        last = len(self.ref) - 1
        aim = self.ref[min(t + 3, last)]
        dx, dy = float(aim[0]) - me.x, float(aim[1]) - me.y
        d_aim = math.hypot(dx, dy)
        wheelbase = 0.6 * me.length
        if d_aim > 0.3:
            alpha = wrap_angle(math.atan2(dy, dx) - me.heading)
            wheel = math.atan2(2.0 * wheelbase * math.sin(alpha), max(d_aim, 1.0))
        else:
            wheel = wrap_angle(float(self.ref_head[min(t + 1, last)]) - me.heading)
        nxt = self.ref[min(t + 1, last)]
        gap = math.hypot(float(nxt[0]) - me.x, float(nxt[1]) - me.y)
        closing = math.cos(wrap_angle(math.atan2(float(nxt[1]) - me.y,
                                                 float(nxt[0]) - me.x) - me.heading))
        v_des = gap / DT * (closing if gap > 1e-6 else 1.0)
        acc = (max(v_des, 0.0) - me.speed) / DT
        return Action(wheel / 0.5, accel_to_action(acc))


@dataclass(frozen=True)
class SkillAdversaryBinding:
    candidate: Trajectory
    library: SkillLibrary
    switch_step: int
    prior_mode: str = "adversarial"
    seed: int = 0

    def make_policy(self, scenario: Scenario, agent_id: int, seed: int) -> Policy:
        return AdversaryPolicy(scenario, agent_id, self, seed)


# ---------------------------------------------------------------------------
# persistence


def save_library(lib: SkillLibrary, path: str | Path) -> None:
    doc = {
        "version": LIBRARY_VERSION,
        "horizon": lib.horizon,
        "n_clusters": lib.n_clusters,
        "seed": lib.seed,
        "codebook": lib.codebook.tolist(),
        "clusters": [
            {
                "obs": lib.member_obs[j].tolist(),
                "actions": lib.member_actions[j].reshape(len(lib.member_actions[j]), -1).tolist(),
                "labels": lib.member_labels[j],
                "sources": [list(s) for s in lib.member_sources[j]],
            }
            for j in range(lib.n_clusters)
        ],
        "benign_prior": {",".join(map(str, k)): v.tolist() for k, v in sorted(lib.benign_prior.items())},
        "adversarial_prior": {",".join(map(str, k)): v.tolist()
                              for k, v in sorted(lib.adversarial_prior.items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_library(path: str | Path) -> SkillLibrary:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != LIBRARY_VERSION:
        raise ValueError(f"unsupported library version {doc.get('version')}")
    horizon = int(doc["horizon"])

    def parse_prior(raw: dict) -> dict:
        return {tuple(int(x) for x in k.split(",")): np.asarray(v, dtype=float)
                for k, v in raw.items()}

    clusters = doc["clusters"]
    return SkillLibrary(
        codebook=np.asarray(doc["codebook"], dtype=float),
        horizon=horizon,
        member_obs=[np.asarray(c["obs"], dtype=float).reshape(-1, OBS_DIM) for c in clusters],
        member_actions=[np.asarray(c["actions"], dtype=float).reshape(-1, horizon, 2)
                        for c in clusters],
        member_labels=[list(c["labels"]) for c in clusters],
        member_sources=[[tuple(s) for s in c["sources"]] for c in clusters],
        benign_prior=parse_prior(doc["benign_prior"]),
        adversarial_prior=parse_prior(doc["adversarial_prior"]),
        seed=int(doc["seed"]),
    )


def write_demo_log(corpus: list[DemoTrace], path: str | Path) -> None:
    """Demonstration corpus with actions and event steps (extends the episode log)."""
    with open(path, "w", encoding="utf-8") as fh:
        for demo in corpus:
            rec = demo.record
            fh.write(json.dumps({
                "scenario_path": demo.scenario_path,
                "scenario_id": rec.scenario_id,
                "seed": rec.seed,
                "outcome": rec.outcome,
                "term_step": rec.term_step,
                "agents": {
                    str(aid): {
                        "xy": tr.xy.tolist(),
                        "heading": tr.heading.tolist(),
                        "speed": tr.speed.tolist(),
                        "actions": tr.actions.tolist(),
                        "offroad": tr.offroad.astype(int).tolist(),
                    } for aid, tr in sorted(rec.agents.items())
                },
                "collision_steps": {str(a): v for a, v in sorted(rec.collision_steps.items())},
                "offroad_steps": {str(a): v for a, v in sorted(rec.offroad_steps.items())},
            }, sort_keys=True, separators=(",", ":")) + "\n")


def read_demo_log(path: str | Path, scenario_loader) -> list[DemoTrace]:
    from .sim import AgentTrace

    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        sc = scenario_loader(d["scenario_path"])
        agents = {
            int(aid): AgentTrace(
                xy=np.asarray(a["xy"], dtype=float),
                heading=np.asarray(a["heading"], dtype=float),
                speed=np.asarray(a["speed"], dtype=float),
                actions=np.asarray(a["actions"], dtype=float).reshape(-1, 2),
                offroad=np.asarray(a["offroad"], dtype=bool),
            ) for aid, a in d["agents"].items()
        }
        rec = RolloutRecord(
            scenario_id=d["scenario_id"], seed=int(d["seed"]), outcome=d["outcome"],
            term_step=int(d["term_step"]), agents=agents,
            collision_steps={int(a): list(v) for a, v in d["collision_steps"].items()},
            offroad_steps={int(a): list(v) for a, v in d["offroad_steps"].items()},
        )
        out.append(DemoTrace(sc, rec, d["scenario_path"]))
    return out
