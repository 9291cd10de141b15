"""Criticality measures, the simulation oracle, and candidate ranking rules.

Two analytic measures drive everything: closeness-to-collision between ego
and adversary (min time-aligned distance through a decaying exponential) and
induced ego behavior deviation between consecutive episodes (summed
time-aligned distance through a saturating exponential). Both map to [0, 1].
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .candidates import CandidateSet, perturbed_replay
from .geom import wrap_angle
from .scenario import Scenario, Trajectory, derive_motion
from .sim import IdmBinding, ReplayBinding, run_episode, obb_corners, sat_obb_overlap

B_DEFAULT = 8.0
K_DEFAULT = 5


@dataclass(frozen=True)
class CritScore:
    f_coll: float
    f_diff: float

    @property
    def total(self) -> float:
        return self.f_coll + self.f_diff


class EgoHistory:
    """Queue of the most recent ego roll-out trajectories, newest last."""

    def __init__(self, k: int = K_DEFAULT):
        if k < 1:
            raise ValueError("history size must be >= 1")
        self.k = k
        self._q: deque[Trajectory] = deque(maxlen=k)

    def push(self, traj: Trajectory) -> None:
        self._q.append(traj)

    def entries(self) -> list[Trajectory]:
        return list(self._q)

    def latest(self) -> Trajectory:
        if not self._q:
            raise ValueError("ego history is empty")
        return self._q[-1]

    def __len__(self) -> int:
        return len(self._q)


def _aligned(a: Trajectory, b: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    lo = max(a.start_time_index, b.start_time_index)
    hi = min(a.start_time_index + len(a), b.start_time_index + len(b))
    if hi <= lo:
        raise ValueError("trajectories share no time window")
    return (a.points[lo - a.start_time_index: hi - a.start_time_index],
            b.points[lo - b.start_time_index: hi - b.start_time_index])


def f_coll(ego: Trajectory, adv: Trajectory, b: float = B_DEFAULT) -> float:
    """exp(-min_t ||ego_t - adv_t|| / b) over the common time window."""
    pe, pa = _aligned(ego, adv)
    d = np.hypot(pe[:, 0] - pa[:, 0], pe[:, 1] - pa[:, 1])
    return float(math.exp(-float(d.min()) / b))


def f_diff(ego_prev: Trajectory, ego_curr: Trajectory, b: float = B_DEFAULT) -> float:
    """1 - exp(-sum_t ||prev_t - curr_t|| / b), truncated to the shorter episode."""
    n = min(len(ego_prev), len(ego_curr))
    if n == 0:
        raise ValueError("empty trajectory overlap")
    pp = ego_prev.points[:n]
    pc = ego_curr.points[:n]
    total = float(np.hypot(pp[:, 0] - pc[:, 0], pp[:, 1] - pc[:, 1]).sum())
    return 1.0 - math.exp(-total / b)


def oracle_score(scenario: Scenario, candidate: Trajectory, history: EgoHistory,
                 b: float = B_DEFAULT) -> CritScore:
    """Roll the candidate out against a reactive heuristic ego and measure both
    values on the realized trajectories."""
    if len(history) == 0:
        raise ValueError("ego history is empty")
    bindings = {aid: ReplayBinding() for aid in scenario.agent_ids}
    bindings[scenario.ego_id] = IdmBinding()
    bindings[scenario.adv_id] = ReplayBinding(perturbed_replay(scenario, candidate))
    record = run_episode(scenario, bindings, seed=0)
    ego = record.agents[scenario.ego_id].trajectory()
    adv = record.agents[scenario.adv_id].trajectory()
    return CritScore(f_coll(ego, adv, b), f_diff(history.latest(), ego, b))


# ---------------------------------------------------------------------------
# ranking


def rank_learned(model, candidates: CandidateSet, history: EgoHistory,
                 ) -> tuple[int, list[float]]:
    """Argmax of predicted (f_coll + f_diff), averaged over the history queue.

    Ties break toward the lowest candidate index.
    """
    from .scorer import score_candidates

    entries = history.entries()
    if not entries:
        raise ValueError("ego history is empty")
    pred = score_candidates(model, entries, list(candidates.candidates))
    scores = pred.sum(axis=2).mean(axis=1)
    best = int(np.argmax(scores))                # argmax returns the first max
    return best, [float(s) for s in scores]


def _sweep_overlap(cand: Trajectory, cand_head: np.ndarray, ego: Trajectory,
                   ego_head: np.ndarray, dims_adv, dims_ego) -> tuple[int | None, float]:
    """First time-aligned OBB overlap step and min center distance for one pair."""
    lo = max(cand.start_time_index, ego.start_time_index)
    hi = min(cand.start_time_index + len(cand), ego.start_time_index + len(ego))
    if hi <= lo:
        return None, float("inf")
    ci = lo - cand.start_time_index
    ei = lo - ego.start_time_index
    n = hi - lo
    cp = cand.points[ci: ci + n]
    ep = ego.points[ei: ei + n]
    d = np.hypot(cp[:, 0] - ep[:, 0], cp[:, 1] - ep[:, 1])
    min_dist = float(d.min())
    r = 0.5 * (math.hypot(*dims_adv) + math.hypot(*dims_ego))
    for j in np.nonzero(d <= r)[0]:
        ca = obb_corners(cp[j, 0], cp[j, 1], cand_head[ci + j], dims_adv[0], dims_adv[1])
        cb = obb_corners(ep[j, 0], ep[j, 1], ego_head[ei + j], dims_ego[0], dims_ego[1])
        if sat_obb_overlap(ca, cb, cand_head[ci + j], ego_head[ei + j]) is not None:
            return lo + int(j), min_dist
    return None, min_dist


def rank_heuristic_cat(candidates: CandidateSet, history: EgoHistory,
                       dims_adv: tuple[float, float] = (4.5, 2.0),
                       dims_ego: tuple[float, float] = (4.5, 2.0)) -> int:
    """Bounding-box sweep ranking.

    Primary key: number of history roll-outs the candidate overlaps (max);
    secondary: earliest overlap step (min); fallback with no overlap: minimum
    point-wise distance. Ties break toward the lowest index.
    """
    entries = history.entries()
    if not entries:
        raise ValueError("ego history is empty")
    ego_heads = [derive_motion(e.points)[0] for e in entries]
    keys = []
    for i, cand in enumerate(candidates.candidates):
        chead, _ = derive_motion(cand.points)
        count = 0
        earliest = math.inf
        min_dist = math.inf
        for ego, ehead in zip(entries, ego_heads):
            step, dist_ = _sweep_overlap(cand, chead, ego, ehead, dims_adv, dims_ego)
            min_dist = min(min_dist, dist_)
            if step is not None:
                count += 1
                earliest = min(earliest, step)
        keys.append((-count, earliest, min_dist, i))
    return min(keys)[3]


def heading_difference(h1: float, h2: float) -> float:
    """Absolute heading difference folded into [0, pi]."""
    return abs(wrap_angle(h1 - h2))
