from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from critgen.candidates import perturbed_replay, sample_candidates
from critgen.criticality import EgoHistory, rank_heuristic_cat
from critgen.harness import (CemConfig, ConfigError, EgoControllerBinding, ModelBundle,
                             PerturbSettings, TrainableEgoParams, ego_binding_from_spec,
                             evaluate_suite, load_ego_params, perturb_probability,
                             perturb_scenario, run_scenario_protocol, save_ego_params,
                             settings_for_mode, train_ego)
from critgen.scenario import Trajectory, load_scenario, read_manifest
from critgen.sim import IdmBinding, ReplayBinding, run_episode
from critgen.skills import SkillAdversaryBinding
from critgen.synth import generate_synthetic


@pytest.fixture(scope="module")
def bundle(small_scorer, small_library):
    return ModelBundle(scorer=small_scorer, library=small_library)


@pytest.fixture()
def seeded_history():
    def make(sc, ego_binding=None):
        hist = EgoHistory()
        bindings = {a: ReplayBinding() for a in sc.agent_ids}
        if ego_binding is not None:
            bindings[sc.ego_id] = ego_binding
        rec = run_episode(sc, bindings, 0)
        hist.push(rec.ego_trajectory(sc.ego_id))
        return hist
    return make


# ---------------------------------------------------------------------------
# perturb_scenario


def test_no_adv_mode_returns_plain_replay(bundle, seeded_history):
    sc = generate_synthetic(0, "straight-merge", 0)
    binding = perturb_scenario(sc, seeded_history(sc), settings_for_mode("no-adv"), bundle, 0)
    assert isinstance(binding, ReplayBinding) and binding.trajectory is None


def test_seal_mode_returns_skill_adversary(bundle, seeded_history):
    sc = generate_synthetic(0, "t-junction", 0)
    binding = perturb_scenario(sc, seeded_history(sc), settings_for_mode("seal"), bundle, 3)
    assert isinstance(binding, SkillAdversaryBinding)
    assert binding.prior_mode == "adversarial"
    assert binding.switch_step >= 0


def test_switch_zero_ablation(bundle, seeded_history):
    sc = generate_synthetic(0, "t-junction", 0)
    settings = PerturbSettings(switch_mode="zero")
    binding = perturb_scenario(sc, seeded_history(sc), settings, bundle, 3)
    assert binding.switch_step == 0


def test_cat_heuristic_returns_replay_of_ranked_candidate(bundle, seeded_history):
    sc = generate_synthetic(0, "straight-merge", 0)
    hist = seeded_history(sc)
    binding = perturb_scenario(sc, hist, settings_for_mode("cat-heuristic"), bundle, 5)
    assert isinstance(binding, ReplayBinding)
    cset = sample_candidates(sc, 5)
    expect = rank_heuristic_cat(cset, hist,
                                dims_adv=sc.agent_dims[sc.adv_id],
                                dims_ego=sc.agent_dims[sc.ego_id])
    assert binding.trajectory == perturbed_replay(sc, cset.candidates[expect])


def test_seal_without_models_is_config_error(seeded_history):
    sc = generate_synthetic(0, "straight-merge", 0)
    with pytest.raises(ConfigError):
        perturb_scenario(sc, seeded_history(sc), settings_for_mode("seal"), ModelBundle(), 0)


def test_empty_history_rejected(bundle):
    sc = generate_synthetic(0, "straight-merge", 0)
    with pytest.raises(ValueError, match="history"):
        perturb_scenario(sc, EgoHistory(), settings_for_mode("seal"), bundle, 0)


def test_ablation_matrix_distinct():
    variants = {
        "learned-obj": PerturbSettings(objective="learned", adversary="skill"),
        "heuristic-obj": PerturbSettings(objective="heuristic", adversary="skill"),
        "adv-prior": PerturbSettings(adversary="skill"),
        "benign-prior": PerturbSettings(adversary="skill-benign"),
        "trajpred-adv": PerturbSettings(adversary="replay"),
        "no-nonreactive-start": PerturbSettings(switch_mode="zero"),
        "always-replay-candidate": PerturbSettings(switch_mode="never"),
    }
    for s in variants.values():
        s.validate()
    keys = {(s.objective, s.adversary, s.switch_mode) for s in variants.values()}
    assert len(keys) == 6          # adv-prior duplicates learned-obj; others distinct
    assert len({(n, (s.objective, s.adversary, s.switch_mode)) for n, s in variants.items()}) == 7


# ---------------------------------------------------------------------------
# history queue semantics


def test_history_queue_matches_list_model(rng):
    hist = EgoHistory(5)
    model = []
    for i in range(12):
        t = Trajectory(np.cumsum(rng.normal(1.0, 0.1, (10, 2)), axis=0))
        hist.push(t)
        model.append(t)
        if len(model) > 5:
            model.pop(0)
        assert len(hist) == len(model) <= 5
        assert hist.entries() == model


# ---------------------------------------------------------------------------
# curriculum schedule


def test_linear_ramp_10_generations():
    cfg = CemConfig(generations=10, p_max=0.9)
    ps = [perturb_probability(g, cfg) for g in range(10)]
    assert ps == pytest.approx(list(np.arange(10) * 0.1))


def test_no_curriculum_is_constant():
    cfg = CemConfig(generations=10, p_max=0.9, curriculum=False)
    assert [perturb_probability(g, cfg) for g in range(10)] == [0.9] * 10


# ---------------------------------------------------------------------------
# trainable ego


def test_param_box_round_trip():
    p = TrainableEgoParams(speed_scale=1.1, brake_gain=0.7)
    q = TrainableEgoParams.from_array(p.to_array())
    assert p == q
    clipped = TrainableEgoParams.from_array(np.full(6, 1e9))
    assert clipped.speed_scale == 1.3                  # box upper bound


def test_ego_params_save_load(tmp_path):
    p = TrainableEgoParams(headway_threshold=17.5)
    save_ego_params(p, tmp_path / "ego.json")
    assert load_ego_params(tmp_path / "ego.json") == p


def test_ego_binding_specs(tmp_path):
    assert isinstance(ego_binding_from_spec("replay"), ReplayBinding)
    assert isinstance(ego_binding_from_spec("idm"), IdmBinding)
    save_ego_params(TrainableEgoParams(), tmp_path / "e.json")
    b = ego_binding_from_spec(f"trained:{tmp_path / 'e.json'}")
    assert isinstance(b, EgoControllerBinding)
    with pytest.raises(ConfigError):
        ego_binding_from_spec("wizard")


def test_default_ego_controller_completes_clean_scenario():
    sc = generate_synthetic(0, "curve-follow", 0)
    bindings = {a: ReplayBinding() for a in sc.agent_ids}
    bindings[sc.ego_id] = EgoControllerBinding(TrainableEgoParams())
    rec = run_episode(sc, bindings, 0)
    assert rec.outcome == "Success"


# ---------------------------------------------------------------------------
# CEM training


def test_cem_deterministic_and_monotone(suite12, bundle):
    cfg = CemConfig(generations=3, population=6, elite=2, batch_size=3)
    p1, log1 = train_ego(suite12[:4], "seal", bundle, seed=1, cfg=cfg)
    p2, log2 = train_ego(suite12[:4], "seal", bundle, seed=1, cfg=cfg)
    assert p1 == p2
    assert log1 == log2
    assert log1[-1]["running_best"] >= log1[0]["best_fitness"]


def test_cem_requires_models_for_seal(suite12):
    with pytest.raises(ConfigError):
        train_ego(suite12[:2], "seal", ModelBundle(), seed=0)


# ---------------------------------------------------------------------------
# evaluation protocol


def test_protocol_exactly_k_perturb_simulate_iterations(bundle, monkeypatch):
    sc = generate_synthetic(0, "t-junction", 0)
    import critgen.harness as H

    episodes = []
    real_run = H.run_episode

    def counting_run(scenario, bindings, seed, **kw):
        episodes.append(type(bindings[scenario.adv_id]).__name__)
        return real_run(scenario, bindings, seed, **kw)

    perturbs = []
    real_perturb = H.perturb_scenario

    def counting_perturb(*a, **kw):
        out = real_perturb(*a, **kw)
        perturbs.append(1)
        return out

    monkeypatch.setattr(H, "run_episode", counting_run)
    monkeypatch.setattr(H, "perturb_scenario", counting_perturb)
    rollouts = run_scenario_protocol(sc, ReplayBinding(), settings_for_mode("seal"),
                                     bundle, base_seed=0, k=5, keep_all=True)
    assert len(perturbs) == 5                          # exactly K perturbations
    assert len(episodes) == 6                          # 1 seeding + K iterations
    assert episodes[0] == "ReplayBinding"
    assert len(rollouts) == 6


def test_history_capped_at_k(bundle, monkeypatch):
    sc = generate_synthetic(0, "t-junction", 0)
    import critgen.harness as H

    seen = []
    real_perturb = H.perturb_scenario

    def spy(scenario, history, settings, models, seed):
        seen.append(len(history))
        return real_perturb(scenario, history, settings, models, seed)

    monkeypatch.setattr(H, "perturb_scenario", spy)
    run_scenario_protocol(sc, ReplayBinding(), settings_for_mode("seal"), bundle,
                          base_seed=0, k=5)
    assert seen == [1, 2, 3, 4, 5]
    assert max(seen) <= 5


def test_final_rollout_feeds_report(bundle, suite12_dir):
    paths = read_manifest(suite12_dir / "manifest.txt")[:3]
    report, finals = evaluate_suite(paths, ReplayBinding(), "no-adv", ModelBundle(), 0)
    assert report.n_episodes == 3
    assert report.rates["success"] == 1.0
    assert all(r.outcome == "Success" for r in finals)


def test_parallel_equals_serial(bundle, suite12_dir):
    paths = read_manifest(suite12_dir / "manifest.txt")[:4]
    r1, f1 = evaluate_suite(paths, ReplayBinding(), "seal", bundle, 7, workers=1)
    r2, f2 = evaluate_suite(paths, ReplayBinding(), "seal", bundle, 7, workers=2)
    assert r1.to_json() == r2.to_json()
    assert [r.to_json_line() for r in f1] == [r.to_json_line() for r in f2]


def test_evaluate_requires_models(suite12_dir):
    paths = read_manifest(suite12_dir / "manifest.txt")[:2]
    with pytest.raises(ConfigError):
        evaluate_suite(paths, ReplayBinding(), "seal", ModelBundle(), 0)
