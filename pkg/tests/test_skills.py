from __future__ import annotations

import math

import numpy as np
import pytest

from critgen.candidates import sample_candidates
from critgen.criticality import EgoHistory, f_coll
from critgen.scenario import HISTORY_END, Trajectory
from critgen.sim import ReplayBinding, run_episode
from critgen.skills import (LABEL_ADVERSARIAL, LABEL_BENIGN, LABEL_EXCLUDED, OBS_DIM,
                            SkillAdversaryBinding, SkillSegment, build_library,
                            collect_demonstrations, compute_switch_step, execute_skill,
                            load_library, quantize_obs, save_library, segment_and_label,
                            select_skill, window_label)
from critgen.synth import generate_synthetic


def straight(x0, y0, vx, vy, n=91, start=0):
    t = np.arange(n)[:, None]
    return Trajectory(np.array([[x0, y0]]) + t * np.array([[vx, vy]]) * 0.1, start)


# ---------------------------------------------------------------------------
# labeling rule


def test_collision_window_arithmetic():
    # collision at step 50, H=10 -> adversarial starts in [30, 49]
    for start in range(0, 60, 1):
        label = window_label(start, 20, [50], [])
        assert (label == LABEL_ADVERSARIAL) == (30 <= start <= 49)


def test_offroad_window_arithmetic():
    for start in range(0, 60):
        label = window_label(start, 20, [], [40])
        assert (label == LABEL_EXCLUDED) == (20 <= start <= 39)


def test_exclusion_takes_precedence():
    assert window_label(35, 20, [50], [40]) == LABEL_EXCLUDED
    assert window_label(45, 20, [50], [40]) == LABEL_ADVERSARIAL


def test_clean_trace_all_benign():
    sc = generate_synthetic(0, "curve-follow", 0)
    demos = collect_demonstrations([sc], seed=1)
    if not any(demos[0].record.collision_steps.values()) and \
       not any(demos[0].record.offroad_steps.values()):
        segs = segment_and_label(demos)
        assert segs and all(s.label == LABEL_BENIGN for s in segs)


def brute_force_labels(n_actions, horizon, coll, off):
    stride = max(horizon // 2, 1)
    out = {}
    for start in range(0, n_actions - horizon + 1, stride):
        label = LABEL_BENIGN
        for c in coll:
            if c - 2 * horizon <= start <= c - 1:
                label = LABEL_ADVERSARIAL
        for o in off:
            if o - 2 * horizon <= start <= o - 1:
                label = LABEL_EXCLUDED
        out[start] = label
    return out


def test_segment_labels_match_bruteforce_oracle(rng):
    """Random event lists injected into real traces; labels must agree exactly."""
    sc = generate_synthetic(0, "t-junction", 1)
    base = run_episode(sc, {a: ReplayBinding() for a in sc.agent_ids}, 0,
                       stop_on_ego=False, max_steps=sc.horizon - 1, record_events=True)
    from critgen.skills import DemoTrace

    for _ in range(20):
        rec = run_episode(sc, {a: ReplayBinding() for a in sc.agent_ids}, 0,
                          stop_on_ego=False, max_steps=sc.horizon - 1, record_events=True)
        for aid in sc.agent_ids:
            rec.collision_steps[aid] = sorted(
                int(x) for x in rng.integers(1, 90, size=rng.integers(0, 3)))
            rec.offroad_steps[aid] = sorted(
                int(x) for x in rng.integers(1, 90, size=rng.integers(0, 3)))
        segs = segment_and_label([DemoTrace(sc, rec)], horizon=10)
        for aid in sc.agent_ids:
            expect = brute_force_labels(len(rec.agents[aid].actions), 10,
                                        rec.collision_steps[aid], rec.offroad_steps[aid])
            got = {s.source[2]: s.label for s in segs if s.source[1] == aid}
            assert got == expect


def test_windows_never_overrun_trace():
    sc = generate_synthetic(0, "straight-merge", 0)
    demos = collect_demonstrations([sc], seed=0)
    segs = segment_and_label(demos, horizon=10)
    n_actions = len(demos[0].record.agents[0].actions)
    for s in segs:
        assert s.source[2] + 10 <= n_actions
        assert s.actions.shape == (10, 2)


# ---------------------------------------------------------------------------
# library build


def synthetic_segments(rng, n_per=120):
    """Two action archetypes with distinguishable observations."""
    segs = []
    for i in range(n_per):
        hold = np.column_stack([rng.normal(0, 0.02, 10), rng.normal(0.2, 0.02, 10)])
        obs = rng.normal(0.0, 0.5, OBS_DIM)
        obs[0] = 8.0
        segs.append(SkillSegment(obs, hold, LABEL_BENIGN, ("syn", 0, i)))
        brake = np.column_stack([rng.normal(0, 0.02, 10), rng.normal(-0.9, 0.03, 10)])
        obs2 = rng.normal(0.0, 0.5, OBS_DIM)
        obs2[0] = 2.0
        segs.append(SkillSegment(obs2, brake, LABEL_ADVERSARIAL, ("syn", 1, i)))
    return segs


def test_two_archetypes_separate(rng):
    segs = synthetic_segments(rng)
    lib = build_library(segs, 2, seed=0)
    purities = []
    for labels in lib.member_labels:
        n_adv = sum(l == LABEL_ADVERSARIAL for l in labels)
        purities.append(max(n_adv, len(labels) - n_adv) / len(labels))
    assert min(purities) >= 0.95


def test_adversarial_prior_mass_concentrates(rng):
    segs = synthetic_segments(rng)
    lib = build_library(segs, 2, seed=0)
    adv_clusters = {
        j for j, labels in enumerate(lib.member_labels)
        if sum(l == LABEL_ADVERSARIAL for l in labels) > len(labels) / 2
    }
    masses = [float(sum(row[j] for j in adv_clusters))
              for row in lib.adversarial_prior.values()]
    assert masses and float(np.mean(masses)) >= 0.7


def test_no_adversarial_segments_gives_uniform_prior(rng):
    segs = [s for s in synthetic_segments(rng) if s.label == LABEL_BENIGN]
    lib = build_library(segs, 4, seed=0)
    assert lib.adversarial_prior == {}
    probs = lib.conditional("adversarial", (0,) * OBS_DIM)
    assert np.allclose(probs, 0.25)


def test_too_few_segments_rejected(rng):
    segs = synthetic_segments(rng)[:10]
    with pytest.raises(ValueError, match="usable segments"):
        build_library(segs, 32, seed=0)


def test_priors_row_normalized(small_library):
    for table in (small_library.benign_prior, small_library.adversarial_prior):
        for row in table.values():
            assert abs(float(row.sum()) - 1.0) <= 1e-12


def test_excluded_segments_never_clustered(rng):
    segs = synthetic_segments(rng)
    segs.append(SkillSegment(np.zeros(OBS_DIM), np.zeros((10, 2)), LABEL_EXCLUDED, ("x", 0, 0)))
    lib = build_library(segs, 2, seed=0)
    assert sum(len(m) for m in lib.member_obs) == len(segs) - 1


# ---------------------------------------------------------------------------
# selection / execution


def test_select_degenerate_prior(rng):
    segs = synthetic_segments(rng)
    lib = build_library(segs, 4, seed=0)
    cell = (1,) * OBS_DIM
    probs = np.zeros(4)
    probs[3] = 1.0
    lib.adversarial_prior[cell] = probs
    obs = np.array([5.0, 0.0, 6.0, 5.0, 0.0, 0.0, 0.0, 0.0, 2.0])
    assert quantize_obs(obs) == cell
    for seed in range(5):
        assert select_skill(lib, obs, "adversarial", seed) == 3


def test_select_greedy_argmax(rng):
    segs = synthetic_segments(rng)
    lib = build_library(segs, 3, seed=0)
    cell = (1,) * OBS_DIM
    lib.benign_prior[cell] = np.array([0.2, 0.5, 0.3])
    obs = np.array([5.0, 0.0, 6.0, 5.0, 0.0, 0.0, 0.0, 0.0, 2.0])
    assert select_skill(lib, obs, "benign", seed=0, greedy=True) == 1


def test_select_sampling_frequency(rng):
    segs = synthetic_segments(rng)
    lib = build_library(segs, 3, seed=0)
    cell = (1,) * OBS_DIM
    probs = np.array([0.2, 0.5, 0.3])
    lib.benign_prior[cell] = probs
    obs = np.array([5.0, 0.0, 6.0, 5.0, 0.0, 0.0, 0.0, 0.0, 2.0])
    counts = np.zeros(3)
    for seed in range(10000):
        counts[select_skill(lib, obs, "benign", seed)] += 1
    assert np.abs(counts / 10000 - probs).max() < 0.02


def test_execute_exact_member_match(rng):
    segs = synthetic_segments(rng)
    lib = build_library(segs, 2, seed=0)
    j = 0 if len(lib.member_obs[0]) else 1
    obs = lib.member_obs[j][5]
    actions = execute_skill(lib, j, obs)
    assert np.array_equal(actions, lib.member_actions[j][5])
    assert actions.shape == (10, 2)


def test_execute_empty_cluster_falls_back_to_centroid(rng):
    segs = synthetic_segments(rng)
    lib = build_library(segs, 2, seed=0)
    lib.member_obs[1] = np.zeros((0, OBS_DIM))
    lib.member_actions[1] = np.zeros((0, 10, 2))
    actions = execute_skill(lib, 1, np.zeros(OBS_DIM))
    assert np.array_equal(actions, lib.codebook[1].reshape(10, 2))


# ---------------------------------------------------------------------------
# switch step


def test_switch_step_single_history():
    cand = straight(0, 0, 10, 0, n=80, start=HISTORY_END)
    ego_pts = np.tile(np.array([[1000.0, 0.0]]), (91, 1))
    ego_pts[42] = (4.2 + 32 * 0.0, 0.0)               # closest 0.2 m at t=42
    cand_pts = np.array(cand.points)
    assert cand.start_time_index == HISTORY_END
    cand_pts[32] = (4.0, 0.0)                         # candidate index 32 <-> t=42
    cand = Trajectory(cand_pts, HISTORY_END)
    hist = EgoHistory()
    hist.push(Trajectory(ego_pts))
    assert compute_switch_step(cand, hist, offset=10) == 32


def test_switch_step_clamps_to_zero():
    cand = straight(0, 0, 10, 0, n=80, start=HISTORY_END)
    ego_pts = np.tile(np.array([[1000.0, 0.0]]), (91, 1))
    ego_pts[14] = np.array(cand.points[4])            # risk at t=14
    hist = EgoHistory()
    hist.push(Trajectory(ego_pts))
    assert compute_switch_step(cand, hist, offset=10) == 4
    ego_pts2 = np.tile(np.array([[1000.0, 0.0]]), (91, 1))
    ego_pts2[12] = np.array(cand.points[2])
    hist2 = EgoHistory()
    hist2.push(Trajectory(ego_pts2))
    assert compute_switch_step(cand, hist2, offset=10) == 2
    ego_pts3 = np.tile(np.array([[1000.0, 0.0]]), (91, 1))
    ego_pts3[11] = np.array(cand.points[1])
    hist3 = EgoHistory()
    hist3.push(Trajectory(ego_pts3))
    assert compute_switch_step(cand, hist3, offset=15) == 0


def test_switch_step_mean_over_history():
    cand = straight(0, 0, 10, 0, n=80, start=HISTORY_END)
    hist = EgoHistory()
    for off in (0.5, -0.5):
        pts = np.tile(np.array([[500.0, 500.0]]), (91, 1))
        pts[30] = np.array(cand.points[20]) + (0.0, off)
        hist.push(Trajectory(pts))
    assert compute_switch_step(cand, hist, offset=10) == 20


def test_switch_requires_history():
    cand = straight(0, 0, 10, 0, n=80, start=HISTORY_END)
    with pytest.raises(ValueError):
        compute_switch_step(cand, EgoHistory(), offset=10)


# ---------------------------------------------------------------------------
# adversary policy


@pytest.fixture(scope="module")
def tracking_setup(small_library):
    sc = generate_synthetic(1, "t-junction", 0)
    cset = sample_candidates(sc, 0)
    return sc, cset, small_library


def test_tracking_prefix_error(tracking_setup):
    sc, cset, lib = tracking_setup
    worst = 0.0
    for ci in (0, 5, 12, 20):
        cand = cset.candidates[ci]
        binding = SkillAdversaryBinding(cand, lib, switch_step=10 ** 6, seed=0)
        bindings = {a: ReplayBinding() for a in sc.agent_ids}
        bindings[sc.adv_id] = binding
        rec = run_episode(sc, bindings, 0, stop_on_ego=False, max_steps=sc.horizon - 1)
        realized = rec.agents[sc.adv_id].xy
        for k in range(len(cand)):
            t = cand.start_time_index + k
            if t < len(realized):
                worst = max(worst, float(np.hypot(*(realized[t] - cand.points[k]))))
    assert worst < 0.5, f"tracking error {worst:.3f} m"


def test_switch_zero_runs_skills_from_start(tracking_setup):
    sc, cset, lib = tracking_setup
    cand = cset.candidates[0]
    bindings = {a: ReplayBinding() for a in sc.agent_ids}
    bindings[sc.adv_id] = SkillAdversaryBinding(cand, lib, switch_step=0, seed=3)
    rec = run_episode(sc, bindings, 3, stop_on_ego=False, max_steps=sc.horizon - 1)
    assert rec.outcome in ("Timeout", "Success", "Crash", "OutOfRoad")
    # actions recorded for the adversary come from skill replay, not tracking:
    # determinism check is the meaningful property here
    rec2 = run_episode(sc, bindings, 3, stop_on_ego=False, max_steps=sc.horizon - 1)
    assert rec.to_json_line() == rec2.to_json_line()


def test_library_save_load_round_trip(tmp_path, small_library):
    save_library(small_library, tmp_path / "lib.json")
    back = load_library(tmp_path / "lib.json")
    assert back.n_clusters == small_library.n_clusters
    assert np.allclose(back.codebook, small_library.codebook)
    assert back.benign_prior.keys() == small_library.benign_prior.keys()
    for k in small_library.benign_prior:
        assert np.allclose(back.benign_prior[k], small_library.benign_prior[k])
    for j in range(back.n_clusters):
        assert np.allclose(back.member_obs[j], small_library.member_obs[j])
        assert np.allclose(back.member_actions[j], small_library.member_actions[j])


def test_adversarial_prior_at_least_as_critical_as_benign(small_library, suite12):
    """Directional efficacy: adversarial-prior skills close more distance on a
    replay ego than benign-prior skills, on average."""
    from critgen.criticality import rank_heuristic_cat

    means = {}
    for mode in ("adversarial", "benign"):
        vals = []
        for sc in suite12:
            hist = EgoHistory()
            rec0 = run_episode(sc, {a: ReplayBinding() for a in sc.agent_ids}, 0)
            hist.push(rec0.ego_trajectory(sc.ego_id))
            cset = sample_candidates(sc, 1)
            best = rank_heuristic_cat(cset, hist)
            cand = cset.candidates[best]
            switch = compute_switch_step(cand, hist, offset=10)
            bindings = {a: ReplayBinding() for a in sc.agent_ids}
            bindings[sc.adv_id] = SkillAdversaryBinding(cand, small_library, switch,
                                                        prior_mode=mode, seed=7)
            rec = run_episode(sc, bindings, 7)
            vals.append(f_coll(rec.agents[sc.ego_id].trajectory(),
                               rec.agents[sc.adv_id].trajectory()))
        means[mode] = float(np.mean(vals))
    assert means["adversarial"] >= means["benign"] - 1e-9, means
