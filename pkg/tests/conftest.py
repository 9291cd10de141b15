from __future__ import annotations

import numpy as np
import pytest

from critgen.criticality import EgoHistory
from critgen.scenario import save_scenario
from critgen.sim import IdmBinding, ReplayBinding, run_episode
from critgen.skills import build_library, collect_demonstrations, segment_and_label
from critgen.synth import TEMPLATES, generate_synthetic


def make_suite(n, n_backgrounds=(0, 1, 2), seed0=0):
    return [generate_synthetic(seed0 + i, TEMPLATES[i % 3], n_backgrounds[i % len(n_backgrounds)])
            for i in range(n)]


@pytest.fixture(scope="session")
def suite12():
    return make_suite(12)


@pytest.fixture(scope="session")
def suite12_dir(suite12, tmp_path_factory):
    out = tmp_path_factory.mktemp("suite12")
    paths = []
    for i, sc in enumerate(suite12):
        p = out / f"scenario-{i:04d}.json"
        save_scenario(sc, p)
        paths.append(p)
    (out / "manifest.txt").write_text("\n".join(p.name for p in paths) + "\n")
    return out


@pytest.fixture(scope="session")
def small_library():
    demos = collect_demonstrations(make_suite(30, seed0=100), seed=0)
    segments = segment_and_label(demos)
    return build_library(segments, 16, seed=0)


@pytest.fixture(scope="session")
def small_scorer(suite12):
    """A lightly trained scorer; good enough for plumbing tests."""
    from critgen.candidates import sample_candidates
    from critgen.criticality import oracle_score
    from critgen.scorer import CorpusTriple, train_scorer

    scenarios = make_suite(16, seed0=300)
    triples = []
    for sc in scenarios:
        bindings = {aid: ReplayBinding() for aid in sc.agent_ids}
        bindings[sc.ego_id] = IdmBinding()
        rec = run_episode(sc, bindings, seed=0)
        hist = EgoHistory()
        hist.push(rec.ego_trajectory(sc.ego_id))
        for ci, cand in enumerate(sample_candidates(sc, 0).candidates):
            score = oracle_score(sc, cand, hist)
            triples.append(CorpusTriple(sc.scenario_id, ci, hist.latest(), cand,
                                        score.f_coll, score.f_diff))
    return train_scorer(triples, seed=0, epochs=40)


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.Philox(key=20240101))
