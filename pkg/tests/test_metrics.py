from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.stats

from critgen.metrics import (ACC_EDGES, ROAD_EDGES, YAW_EDGES, Histogram, MetricsReport,
                             aggregate, build_profile, collision_stats, histogram, realism,
                             wasserstein_1d, write_report)
from critgen.scenario import Trajectory
from critgen.sim import ReplayBinding, RolloutRecord, run_episode
from critgen.synth import generate_synthetic


def unit_hist(mass):
    mass = np.asarray(mass, dtype=float)
    edges = np.arange(len(mass) + 1, dtype=float)
    return Histogram(edges, mass / mass.sum())


# ---------------------------------------------------------------------------
# wasserstein


def test_w1_identity():
    p = unit_hist([0.2, 0.5, 0.3])
    assert wasserstein_1d(p, p) == 0.0


def test_w1_unit_point_masses():
    p = unit_hist([1.0, 0.0])
    q = unit_hist([0.0, 1.0])
    assert wasserstein_1d(p, q) == pytest.approx(1.0)


def test_w1_uniform_vs_point_mass():
    p = Histogram(np.linspace(0.0, 1.0, 11), np.full(10, 0.1))
    q = Histogram(np.linspace(0.0, 1.0, 11), np.r_[1.0, np.zeros(9)])
    assert wasserstein_1d(p, q) == pytest.approx(0.45, abs=1e-12)


def test_w1_mismatched_bins_rejected():
    with pytest.raises(ValueError):
        wasserstein_1d(unit_hist([1, 1]), unit_hist([1, 1, 1]))


def test_w1_metric_axioms(rng):
    edges = np.linspace(-2.0, 2.0, 12)
    for _ in range(1000):
        raw = rng.uniform(0, 1, (3, 11))
        p, q, r = (Histogram(edges, m / m.sum()) for m in raw)
        dpq = wasserstein_1d(p, q)
        dqp = wasserstein_1d(q, p)
        assert dpq >= 0.0
        assert dpq == pytest.approx(dqp, abs=1e-12)
        assert wasserstein_1d(p, p) <= 1e-12
        assert dpq <= wasserstein_1d(p, r) + wasserstein_1d(r, q) + 1e-12


def test_w1_matches_scipy(rng):
    edges = np.linspace(-3.0, 5.0, 22)
    centers = 0.5 * (edges[:-1] + edges[1:])
    for _ in range(100):
        a = rng.uniform(0, 1, 21)
        b = rng.uniform(0, 1, 21)
        p = Histogram(edges, a / a.sum())
        q = Histogram(edges, b / b.sum())
        ref = scipy.stats.wasserstein_distance(centers, centers, p.mass, q.mass)
        assert wasserstein_1d(p, q) == pytest.approx(ref, abs=1e-9)


def test_histogram_clamps_out_of_range():
    h = histogram(np.array([-100.0, 100.0, 0.0]), np.linspace(-1.0, 1.0, 5))
    assert h.mass[0] == pytest.approx(1 / 3)
    assert h.mass[-1] == pytest.approx(1 / 3)


# ---------------------------------------------------------------------------
# profiles


def _replay_rollout(sc, seed=0, **kw):
    return run_episode(sc, {a: ReplayBinding() for a in sc.agent_ids}, seed, **kw)


def test_constant_velocity_profile_point_masses():
    sc = generate_synthetic(0, "straight-merge", 0)
    rec = _replay_rollout(sc)
    prof = build_profile(rec, sc.ego_id)
    zero_yaw_bin = np.searchsorted(YAW_EDGES, 0.0, side="right") - 1
    zero_acc_bin = np.searchsorted(ACC_EDGES, 0.0, side="right") - 1
    assert prof.yaw.mass[zero_yaw_bin] == pytest.approx(1.0)
    assert prof.acc.mass[zero_acc_bin] == pytest.approx(1.0)
    assert prof.road.mass[0] == pytest.approx(1.0)    # fully on-road


def test_alternating_speed_splits_acc_mass():
    n = 41
    x = np.cumsum(np.where(np.arange(n) % 2 == 0, 1.0, 2.0)) * 0.1
    traj = Trajectory(np.column_stack([x, np.zeros(n)]))
    from critgen.metrics import _profile
    from critgen.scenario import derive_motion

    headings, speeds = derive_motion(traj.points)
    prof = _profile(headings, speeds, np.zeros(n, dtype=bool))
    # speed alternates 10 <-> 20 m/s each step: acc = +-100 m/s^2, clamped
    # into the two end bins
    assert prof.acc.mass[0] > 0.4 and prof.acc.mass[-1] > 0.4


def test_profile_short_trace_errors():
    sc = generate_synthetic(0, "straight-merge", 0)
    rec = _replay_rollout(sc)
    for aid in rec.agents:
        rec.agents[aid].heading = rec.agents[aid].heading[:1]
        rec.agents[aid].speed = rec.agents[aid].speed[:1]
        rec.agents[aid].offroad = rec.agents[aid].offroad[:1]
    with pytest.raises(ValueError):
        build_profile(rec, sc.ego_id)


def test_realism_exact_replay_is_zero():
    for tpl in ("straight-merge", "t-junction", "curve-follow"):
        sc = generate_synthetic(3, tpl, 1)
        rec = _replay_rollout(sc)
        res = realism(rec, sc)
        assert res.yaw_wd == 0.0 and res.acc_wd == 0.0 and res.road_wd == 0.0
        assert res.mean == 0.0


def test_swerving_adversary_raises_yaw_wd():
    sc = generate_synthetic(0, "straight-merge", 0)
    pts = np.array(sc.trajectories[sc.adv_id].points)
    pts[:, 1] += 1.2 * np.sin(np.arange(len(pts)) * 0.5)
    swerve = Trajectory(pts)
    bindings = {a: ReplayBinding() for a in sc.agent_ids}
    bindings[sc.adv_id] = ReplayBinding(swerve)
    rec = run_episode(sc, bindings, 0, stop_on_ego=False, max_steps=sc.horizon - 1)
    res = realism(rec, sc)
    base = realism(_replay_rollout(sc, stop_on_ego=False, max_steps=sc.horizon - 1), sc)
    assert res.yaw_wd > base.yaw_wd


def test_realism_translation_invariant():
    # yaw/acc/road features are frame-independent: translating the whole
    # scenario leaves every WD unchanged
    sc = generate_synthetic(1, "t-junction", 0)
    rec = _replay_rollout(sc)
    res1 = realism(rec, sc)

    from critgen.scenario import LaneInfo, MapInfo, Scenario

    shift = np.array([123.0, -45.0])
    moved = Scenario(
        trajectories={a: Trajectory(t.points + shift, t.start_time_index)
                      for a, t in sc.trajectories.items()},
        map_info=MapInfo(
            [LaneInfo(l.lane_id, l.width, l.centerline + shift, l.successors)
             for l in sc.map_info.lanes],
            [r + shift for r in sc.map_info.road_edges]),
        ego_id=sc.ego_id, adv_id=sc.adv_id,
        agent_dims=dict(sc.agent_dims), scenario_id=sc.scenario_id)
    rec2 = _replay_rollout(moved)
    res2 = realism(rec2, moved)
    assert res2.yaw_wd == pytest.approx(res1.yaw_wd, abs=1e-9)
    assert res2.acc_wd == pytest.approx(res1.acc_wd, abs=1e-9)
    assert res2.road_wd == pytest.approx(res1.road_wd, abs=1e-9)


# ---------------------------------------------------------------------------
# collision stats


def _crash_record(rel_speed, h_ego, h_adv):
    from critgen.sim import AgentTrace, CollisionEvent, ContactInfo

    tr = lambda h: AgentTrace(
        xy=np.zeros((5, 2)), heading=np.full(5, h), speed=np.full(5, 5.0),
        actions=np.zeros((4, 2)), offroad=np.zeros(5, dtype=bool))
    return RolloutRecord(
        scenario_id="x", seed=0, outcome="Crash", term_step=4,
        agents={0: tr(h_ego), 1: tr(h_adv)},
        collision=CollisionEvent((0, 1), 4, ContactInfo((1.0, 0.0), rel_speed, 0.1)),
    )


def _success_record():
    from critgen.sim import AgentTrace

    tr = AgentTrace(xy=np.zeros((5, 2)), heading=np.zeros(5), speed=np.zeros(5),
                    actions=np.zeros((4, 2)), offroad=np.zeros(5, dtype=bool))
    return RolloutRecord(scenario_id="x", seed=0, outcome="Success", term_step=4,
                         agents={0: tr, 1: tr})


def test_no_crashes_zero_stats():
    cs = collision_stats([_success_record() for _ in range(4)])
    assert (cs.mean_velocity, cs.head_on_rate, cs.severe_head_on_rate) == (0.0, 0.0, 0.0)
    assert cs.n_crashes == 0


def test_severe_head_on_classification():
    opposed = _crash_record(rel_speed=-6.0, h_ego=0.0, h_adv=math.pi)
    cs = collision_stats([opposed])
    assert cs.mean_velocity == pytest.approx(6.0)
    assert cs.head_on_rate == 1.0 and cs.severe_head_on_rate == 1.0

    slow = _crash_record(rel_speed=3.0, h_ego=0.0, h_adv=math.pi)
    cs2 = collision_stats([slow])
    assert cs2.head_on_rate == 1.0 and cs2.severe_head_on_rate == 0.0

    glancing = _crash_record(rel_speed=8.0, h_ego=0.0, h_adv=math.pi / 2)
    cs3 = collision_stats([glancing])
    assert cs3.head_on_rate == 0.0 and cs3.severe_head_on_rate == 0.0


def test_head_on_band_boundary():
    at_135 = _crash_record(rel_speed=6.0, h_ego=0.0, h_adv=math.radians(135.0))
    assert collision_stats([at_135]).head_on_rate == 1.0
    at_134 = _crash_record(rel_speed=6.0, h_ego=0.0, h_adv=math.radians(134.0))
    assert collision_stats([at_134]).head_on_rate == 0.0


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_outcome_rates():
    sc = generate_synthetic(0, "straight-merge", 0)
    recs, bases = [], []
    for outcome, n in (("Success", 6), ("Crash", 3), ("OutOfRoad", 1)):
        for _ in range(n):
            r = _replay_rollout(sc)
            r.outcome = outcome
            recs.append(r)
            bases.append(sc)
    rep = aggregate(recs, bases)
    assert rep.rates["success"] == pytest.approx(0.6)
    assert rep.rates["crash"] == pytest.approx(0.3)
    assert rep.rates["offroad"] == pytest.approx(0.1)
    assert sum(rep.rates.values()) == pytest.approx(1.0)


def test_report_round_trip(tmp_path):
    sc = generate_synthetic(0, "curve-follow", 0)
    rep = aggregate([_replay_rollout(sc)], [sc], run_id="t")
    write_report(rep, tmp_path)
    back = MetricsReport.from_json((tmp_path / "report.json").read_text())
    assert back.rates == rep.rates
    assert back.realism == rep.realism
    assert back.collision == rep.collision
    assert (tmp_path / "episodes.csv").exists()
