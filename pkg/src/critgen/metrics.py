"""Outcome rates, distributional realism, and collision severity statistics.

Realism compares normalized histograms of the adversary's yaw rate,
acceleration, and off-road indicator between a roll-out and the original
recorded adversary, via 1-D Wasserstein distance on a fixed binning. The
ground-truth profile is computed over the same time window as the roll-out so
an exact replay scores exactly zero.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .criticality import heading_difference
from .scenario import DT, Scenario, Trajectory, derive_motion
from .sim import AgentState, RolloutRecord, detect_offroad

YAW_EDGES = np.linspace(-1.5, 1.5, 22)          # rad/s, 21 bins
ACC_EDGES = np.linspace(-8.0, 8.0, 22)          # m/s^2, 21 bins
ROAD_EDGES = np.array([-0.5, 0.5, 1.5])         # indicator bins {0, 1}
HEAD_ON_MIN = math.radians(135.0)
SEVERE_SPEED = 5.0                               # m/s


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=float))
        object.__setattr__(self, "mass", np.asarray(self.mass, dtype=float))


def histogram(values: np.ndarray, edges: np.ndarray) -> Histogram:
    """Normalized histogram; out-of-range samples clamp into the end bins."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no samples")
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, len(edges) - 2)
    mass = np.bincount(idx, minlength=len(edges) - 1).astype(float)
    return Histogram(edges, mass / mass.sum())


@dataclass(frozen=True)
class BehaviorProfile:
    yaw: Histogram
    acc: Histogram
    road: Histogram


def _profile(headings: np.ndarray, speeds: np.ndarray, offroad: np.ndarray) -> BehaviorProfile:
    if len(headings) < 2:
        raise ValueError("trace shorter than 2 steps")
    dh = np.arctan2(np.sin(np.diff(headings)), np.cos(np.diff(headings)))
    yaw_rate = dh / DT
    acc = np.diff(speeds) / DT
    return BehaviorProfile(
        yaw=histogram(yaw_rate, YAW_EDGES),
        acc=histogram(acc, ACC_EDGES),
        road=histogram(offroad.astype(float), ROAD_EDGES),
    )


def build_profile(rollout: RolloutRecord, agent: int) -> BehaviorProfile:
    """Yaw-rate / acceleration / off-road histograms of one agent's roll-out."""
    if agent not in rollout.agents:
        raise KeyError(f"agent {agent} not in roll-out")
    tr = rollout.agents[agent]
    return _profile(tr.heading, tr.speed, tr.offroad)


def profile_of_trajectory(traj: Trajectory, scenario: Scenario, agent: int,
                          n_steps: int | None = None) -> BehaviorProfile:
    """Profile implied by a recorded trajectory (headings/speeds derived).

    Motion is derived over the full trajectory before truncation so a
    truncated exact replay still matches sample-for-sample.
    """
    headings, speeds = derive_motion(traj.points)
    pts = traj.points
    if n_steps is not None:
        pts, headings, speeds = pts[:n_steps], headings[:n_steps], speeds[:n_steps]
    if len(pts) < 2:
        raise ValueError("trace shorter than 2 steps")
    dims = scenario.agent_dims[agent]
    offroad = np.array([
        detect_offroad(AgentState(float(p[0]), float(p[1]), float(h), 0.0, *dims),
                       scenario.map_info)
        for p, h in zip(pts, headings)
    ])
    return _profile(headings, speeds, offroad)


def wasserstein_1d(p: Histogram, q: Histogram) -> float:
    """W1 between two normalized histograms on identical bin edges."""
    if p.edges.shape != q.edges.shape or not np.allclose(p.edges, q.edges, atol=1e-12):
        raise ValueError("histograms have different bin edges")
    widths = np.diff(p.edges)
    return float(np.abs(np.cumsum(p.mass) - np.cumsum(q.mass)).dot(widths))


@dataclass(frozen=True)
class RealismResult:
    yaw_wd: float
    acc_wd: float
    road_wd: float

    @property
    def mean(self) -> float:
        return (self.yaw_wd + self.acc_wd + self.road_wd) / 3.0


def realism(rollout: RolloutRecord, base: Scenario) -> RealismResult:
    """Per-axis WD between the roll-out adversary profile and the recorded one,
    over the realized time window."""
    adv = base.adv_id
    rolled = build_profile(rollout, adv)
    n = len(rollout.agents[adv].xy)
    truth = profile_of_trajectory(base.trajectories[adv], base, adv,
                                  n_steps=min(n, base.horizon))
    return RealismResult(
        yaw_wd=wasserstein_1d(rolled.yaw, truth.yaw),
        acc_wd=wasserstein_1d(rolled.acc, truth.acc),
        road_wd=wasserstein_1d(rolled.road, truth.road),
    )


@dataclass(frozen=True)
class CollisionStats:
    mean_velocity: float
    head_on_rate: float
    severe_head_on_rate: float
    n_crashes: int


def collision_stats(rollouts: list[RolloutRecord]) -> CollisionStats:
    """Contact-normal collision speed plus head-on classification rates.

    Head-on: colliding pair headings opposed within 45 degrees at contact;
    severe additionally requires contact speed above 5 m/s. Rates are over
    all episodes; velocity averages over crash episodes only.
    """
    if not rollouts:
        return CollisionStats(0.0, 0.0, 0.0, 0)
    vels = []
    head_on = 0
    severe = 0
    for r in rollouts:
        if r.outcome != "Crash" or r.collision is None:
            continue
        v = abs(r.collision.contact.rel_speed)
        vels.append(v)
        a, b = r.collision.pair
        step = min(r.collision.step, len(r.agents[a].heading) - 1)
        dh = heading_difference(float(r.agents[a].heading[step]),
                                float(r.agents[b].heading[step]))
        if dh >= HEAD_ON_MIN:
            head_on += 1
            if v > SEVERE_SPEED:
                severe += 1
    n = len(rollouts)
    return CollisionStats(
        mean_velocity=float(np.mean(vels)) if vels else 0.0,
        head_on_rate=head_on / n,
        severe_head_on_rate=severe / n,
        n_crashes=len(vels),
    )


@dataclass
class MetricsReport:
    run_id: str
    n_episodes: int
    rates: dict[str, float]
    realism: dict[str, float]
    collision: dict[str, float]
    episodes: list[dict] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        doc = {
            "run_id": self.run_id,
            "n_episodes": self.n_episodes,
            "rates": self.rates,
            "realism": self.realism,
            "collision": self.collision,
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        return cls(run_id=doc["run_id"], n_episodes=int(doc["n_episodes"]),
                   rates=dict(doc["rates"]), realism=dict(doc["realism"]),
                   collision=dict(doc["collision"]))


def aggregate(rollouts: list[RolloutRecord], bases: list[Scenario],
              run_id: str = "run") -> MetricsReport:
    """Outcome rates, mean realism, and collision stats over paired episodes."""
    if len(rollouts) != len(bases):
        raise ValueError("one base scenario per roll-out required")
    n = len(rollouts)
    counts = {k: 0 for k in ("Success", "Crash", "OutOfRoad", "Timeout")}
    per_axis = {"yaw": [], "acc": [], "road": []}
    episodes = []
    for r, base in zip(rollouts, bases):
        counts[r.outcome] += 1
        row = {"scenario_id": r.scenario_id, "seed": r.seed,
               "outcome": r.outcome, "term_step": r.term_step}
        if len(r.agents[base.adv_id].xy) >= 2:
            res = realism(r, base)
            per_axis["yaw"].append(res.yaw_wd)
            per_axis["acc"].append(res.acc_wd)
            per_axis["road"].append(res.road_wd)
            row.update(yaw_wd=res.yaw_wd, acc_wd=res.acc_wd, road_wd=res.road_wd,
                       realism=res.mean)
        if r.collision is not None:
            row["collision_velocity"] = abs(r.collision.contact.rel_speed)
        episodes.append(row)
    cs = collision_stats(rollouts)
    realism_means = {k: (float(np.mean(v)) if v else 0.0) for k, v in per_axis.items()}
    realism_means["mean"] = float(np.mean(list(realism_means.values())))
    return MetricsReport(
        run_id=run_id,
        n_episodes=n,
        rates={
            "success": counts["Success"] / n if n else 0.0,
            "crash": counts["Crash"] / n if n else 0.0,
            "offroad": counts["OutOfRoad"] / n if n else 0.0,
            "timeout": counts["Timeout"] / n if n else 0.0,
        },
        realism=realism_means,
        collision={
            "mean_vel": cs.mean_velocity,
            "head_on": cs.head_on_rate,
            "severe_head_on": cs.severe_head_on_rate,
            "n_crashes": float(cs.n_crashes),
        },
        episodes=episodes,
    )


def write_report(report: MetricsReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    cols = ["scenario_id", "seed", "outcome", "term_step", "yaw_wd", "acc_wd",
            "road_wd", "realism", "collision_velocity"]
    with open(out / "episodes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in report.episodes:
            w.writerow(row)
