"""End-to-end orchestration: perturbation pipelines, the trainable ego,
curriculum training via cross-entropy-method search, and the K-step
evaluation protocol.

Evaluation runs, per scenario, one unperturbed roll-out to seed the ego
history followed by exactly K perturb->simulate iterations; only the final
iteration's outcome feeds the report.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .candidates import perturbed_replay, sample_candidates
from .criticality import EgoHistory, oracle_score, rank_heuristic_cat, rank_learned
from .geom import wrap_angle
from .metrics import MetricsReport, aggregate
from .scenario import DT, Scenario, derive_motion, load_scenario, read_manifest
from .scorer import ScorerModel
from .sim import (Action, IdmBinding, Policy, PurePursuitMixin, ReplayBinding,
                  RolloutRecord, run_episode)
from .skills import SkillAdversaryBinding, SkillLibrary, compute_switch_step
from .synth import derive_key, rng_from

GENERATOR_MODES = ("seal", "cat-heuristic", "no-adv")


class ConfigError(ValueError):
    """Bad run configuration (missing models, unknown mode, ...)."""


@dataclass(frozen=True)
class PerturbSettings:
    """Component selection for the perturbation pipeline (ablation surface)."""

    objective: str = "learned"        # learned | heuristic | oracle
    adversary: str = "skill"          # skill | skill-benign | replay
    switch_mode: str = "offset"       # offset | zero | never
    offset: int = 10
    b: float = 8.0

    def validate(self) -> None:
        if self.objective not in ("learned", "heuristic", "oracle"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.adversary not in ("skill", "skill-benign", "replay"):
            raise ConfigError(f"unknown adversary {self.adversary!r}")
        if self.switch_mode not in ("offset", "zero", "never"):
            raise ConfigError(f"unknown switch mode {self.switch_mode!r}")


def settings_for_mode(mode: str, offset: int = 10, b: float = 8.0) -> PerturbSettings | None:
    """None means no perturbation (the no-adv pipeline)."""
    if mode == "seal":
        return PerturbSettings(offset=offset, b=b)
    if mode == "cat-heuristic":
        return PerturbSettings(objective="heuristic", adversary="replay", offset=offset, b=b)
    if mode == "no-adv":
        return None
    raise ConfigError(f"unknown generator mode {mode!r}; expected one of {GENERATOR_MODES}")


@dataclass
class ModelBundle:
    scorer: ScorerModel | None = None
    library: SkillLibrary | None = None


def perturb_scenario(scenario: Scenario, history: EgoHistory,
                     settings: PerturbSettings | None, models: ModelBundle, seed: int):
    """Choose the adversary's behavior for the next episode.

    Returns the policy binding for the adversary agent; the caller leaves all
    other agents on replay.
    """
    if settings is None:
        return ReplayBinding()
    settings.validate()
    if len(history) == 0:
        raise ValueError("ego history is empty; seed it with an unperturbed roll-out")
    cset = sample_candidates(scenario, seed)

    if settings.objective == "learned":
        if models.scorer is None:
            raise ConfigError("learned objective requires a trained scorer model")
        best, _ = rank_learned(models.scorer, cset, history)
    elif settings.objective == "heuristic":
        best = rank_heuristic_cat(
            cset, history,
            dims_adv=scenario.agent_dims[scenario.adv_id],
            dims_ego=scenario.agent_dims[scenario.ego_id])
    else:
        scores = [oracle_score(scenario, c, history, settings.b).total
                  for c in cset.candidates]
        best = int(np.argmax(scores))
    candidate = cset.candidates[best]

    if settings.adversary == "replay":
        return ReplayBinding(perturbed_replay(scenario, candidate))
    if models.library is None:
        raise ConfigError("skill adversary requires a built skill library")
    if settings.switch_mode == "zero":
        switch = 0
    elif settings.switch_mode == "never":
        switch = 10 ** 6
    else:
        switch = compute_switch_step(candidate, history, settings.offset)
    prior = "benign" if settings.adversary == "skill-benign" else "adversarial"
    return SkillAdversaryBinding(candidate=candidate, library=models.library,
                                 switch_step=switch, prior_mode=prior, seed=seed)


# ---------------------------------------------------------------------------
# trainable ego


PARAM_NAMES = ("lane_keep_gain", "heading_gain", "speed_scale",
               "headway_threshold", "brake_gain", "swerve_gain")
PARAM_LO = np.array([0.2, 0.0, 0.3, 2.0, 0.0, 0.0])
PARAM_HI = np.array([2.0, 1.0, 1.3, 30.0, 1.5, 2.0])
PARAM_INIT = np.array([1.0, 0.2, 1.0, 12.0, 0.5, 0.3])


@dataclass(frozen=True)
class TrainableEgoParams:
    lane_keep_gain: float = 1.0
    heading_gain: float = 0.2
    speed_scale: float = 1.0
    headway_threshold: float = 12.0
    brake_gain: float = 0.5
    swerve_gain: float = 0.3

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "TrainableEgoParams":
        clipped = np.clip(np.asarray(arr, dtype=float), PARAM_LO, PARAM_HI)
        return cls(**{n: float(v) for n, v in zip(PARAM_NAMES, clipped)})


class EgoControllerPolicy(Policy, PurePursuitMixin):
    """Feedback controller: path following with threat-conditioned braking and
    lateral evasion, speed tracking the recorded profile."""

    def __init__(self, agent_id: int, scenario: Scenario, p: TrainableEgoParams):
        from .geom import PathLocator
        from .sim import _dedup

        self.agent_id = agent_id
        self.p = p
        traj = scenario.trajectories[agent_id]
        self.locator = PathLocator(_dedup(traj.points))
        _, self.v_ref = derive_motion(traj.points)

    def act(self, t, states, world):
        from .sim import ACCEL_MAX, ACCEL_MIN, accel_to_action

        me = states[self.agent_id]
        p = self.p
        arc, _ = self.locator.locate(me.x, me.y)

        # nearest forward threat in the body frame
        c, s = math.cos(me.heading), math.sin(me.heading)
        threat = None
        for aid, st in states.items():
            if aid == self.agent_id:
                continue
            dx, dy = st.x - me.x, st.y - me.y
            fwd = dx * c + dy * s
            lat = -dx * s + dy * c
            if -2.0 < fwd < 35.0 and abs(lat) < 8.0:
                d = math.hypot(dx, dy)
                if threat is None or d < threat[0]:
                    threat = (d, fwd, lat)

        shift = 0.0
        if threat is not None and p.swerve_gain > 0.0:
            d, fwd, lat = threat
            fade = max(0.0, 1.0 - d / 30.0)
            shift = p.swerve_gain * 2.5 * fade * (-1.0 if lat >= 0 else 1.0)
        steer = p.lane_keep_gain * self.steer_to(me, self.locator, arc, lateral_shift=shift)
        ux, uy = self.locator.tangent_at(arc + 4.0)
        align = wrap_angle(math.atan2(uy, ux) - me.heading)
        steer += p.heading_gain * align / 0.5

        i = min(t, len(self.v_ref) - 1)
        v_des = p.speed_scale * float(self.v_ref[i])
        if threat is not None:
            d, fwd, lat = threat
            if 0.0 < fwd < p.headway_threshold and abs(lat) < 2.8:
                v_des *= max(0.0, 1.0 - p.brake_gain * (1.0 - fwd / p.headway_threshold) * 2.0)
        acc = max(min((v_des - me.speed) / DT, ACCEL_MAX), ACCEL_MIN)
        return Action(steer, accel_to_action(acc))


@dataclass(frozen=True)
class EgoControllerBinding:
    params: TrainableEgoParams = TrainableEgoParams()

    def make_policy(self, scenario: Scenario, agent_id: int, seed: int) -> Policy:
        return EgoControllerPolicy(agent_id, scenario, self.params)


def ego_binding_from_spec(spec: str):
    """Parse an ego choice: replay | idm | trained:<params.json>."""
    if spec == "replay":
        return ReplayBinding()
    if spec == "idm":
        return IdmBinding()
    if spec.startswith("trained:"):
        return EgoControllerBinding(load_ego_params(spec.split(":", 1)[1]))
    raise ConfigError(f"unknown ego spec {spec!r}")


def save_ego_params(params: TrainableEgoParams, path: str | Path) -> None:
    doc = {"version": 1, "params": {n: getattr(params, n) for n in PARAM_NAMES}}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2), encoding="utf-8")


def load_ego_params(path: str | Path) -> TrainableEgoParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return TrainableEgoParams(**{n: float(doc["params"][n]) for n in PARAM_NAMES})


# ---------------------------------------------------------------------------
# evaluation protocol


def _episode_bindings(scenario: Scenario, ego_binding, adv_binding) -> dict:
    bindings = {aid: ReplayBinding() for aid in scenario.agent_ids}
    bindings[scenario.ego_id] = ego_binding
    bindings[scenario.adv_id] = adv_binding
    return bindings


def run_scenario_protocol(scenario: Scenario, ego_binding, settings: PerturbSettings | None,
                          models: ModelBundle, base_seed: int, k: int = 5,
                          keep_all: bool = False):
    """Seed roll-out + K perturb->simulate iterations; returns the final
    roll-out (or all of them with keep_all)."""
    history = EgoHistory(k)
    seed0 = derive_key("episode", base_seed, scenario.scenario_id, 0) % 2**31
    rec = run_episode(scenario, _episode_bindings(scenario, ego_binding, ReplayBinding()),
                      seed0)
    history.push(rec.ego_trajectory(scenario.ego_id))
    rollouts = [rec]
    for it in range(1, k + 1):
        seed = derive_key("episode", base_seed, scenario.scenario_id, it) % 2**31
        adv = perturb_scenario(scenario, history, settings, models, seed)
        rec = run_episode(scenario, _episode_bindings(scenario, ego_binding, adv), seed)
        history.push(rec.ego_trajectory(scenario.ego_id))
        rollouts.append(rec)
    return rollouts if keep_all else rollouts[-1]


def _protocol_task(args):
    path, ego_binding, settings, models, base_seed, k = args
    scenario = load_scenario(path)
    return run_scenario_protocol(scenario, ego_binding, settings, models, base_seed, k)


def evaluate_suite(scenario_paths: list[Path], ego_binding, mode: str,
                   models: ModelBundle, base_seed: int, *, k: int = 5,
                   offset: int = 10, b: float = 8.0, workers: int = 1,
                   run_id: str = "run") -> tuple[MetricsReport, list[RolloutRecord]]:
    """The cross-evaluation entry point: any ego binding against any generator."""
    settings = settings_for_mode(mode, offset=offset, b=b)
    if settings is not None:
        if settings.objective == "learned" and models.scorer is None:
            raise ConfigError("generator requires a scorer model (--scorer)")
        if settings.adversary.startswith("skill") and models.library is None:
            raise ConfigError("generator requires a skill library (--skills)")
    jobs = [(Path(p), ego_binding, settings, models, base_seed, k) for p in scenario_paths]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            finals = list(pool.map(_protocol_task, jobs))
    else:
        finals = [_protocol_task(j) for j in jobs]
    bases = [load_scenario(p) for p in scenario_paths]
    report = aggregate(finals, bases, run_id=run_id)
    return report, finals


# ---------------------------------------------------------------------------
# curriculum training (cross-entropy method)


@dataclass
class CemConfig:
    generations: int = 20
    population: int = 32
    elite: int = 8
    batch_size: int = 8
    p_max: float = 0.9
    curriculum: bool = True
    k: int = 5


def perturb_probability(gen: int, cfg: CemConfig) -> float:
    """Linear ramp 0 -> p_max across generations; constant without curriculum."""
    if not cfg.curriculum:
        return cfg.p_max
    if cfg.generations <= 1:
        return cfg.p_max
    return cfg.p_max * gen / (cfg.generations - 1)


def _fitness_of(outcome: str) -> float:
    return {"Success": 1.0, "Crash": -0.5, "OutOfRoad": -0.5}.get(outcome, 0.0)


def train_ego(scenarios: list[Scenario], mode: str, models: ModelBundle, seed: int,
              cfg: CemConfig | None = None, offset: int = 10, b: float = 8.0,
              ) -> tuple[TrainableEgoParams, list[dict]]:
    """CEM search over the ego controller parameters under the curriculum.

    Per-scenario ego-history queues persist across the whole run and are
    updated after every roll-out. Deterministic per seed.
    """
    cfg = cfg or CemConfig()
    settings = settings_for_mode(mode, offset=offset, b=b)
    if settings is not None:
        if settings.objective == "learned" and models.scorer is None:
            raise ConfigError("seal-mode training requires a scorer model")
        if settings.adversary.startswith("skill") and models.library is None:
            raise ConfigError("seal-mode training requires a skill library")
    if not scenarios:
        raise ConfigError("no training scenarios")

    rng = rng_from("cem", seed)
    mean = PARAM_INIT.copy()
    sigma = (PARAM_HI - PARAM_LO) / 4.0
    sigma_floor = (PARAM_HI - PARAM_LO) * 0.02
    histories: dict[str, EgoHistory] = {s.scenario_id: EgoHistory(cfg.k) for s in scenarios}
    best_params = TrainableEgoParams.from_array(mean)
    best_fitness = -math.inf
    log: list[dict] = []
    ep_counter = 0

    for gen in range(cfg.generations):
        p_perturb = perturb_probability(gen, cfg)
        batch_idx = [int(i) for i in rng.integers(0, len(scenarios), size=cfg.batch_size)]
        perturb_flags = [bool(rng.uniform() < p_perturb) for _ in batch_idx]
        samples = [np.clip(rng.normal(mean, sigma), PARAM_LO, PARAM_HI)
                   for _ in range(cfg.population)]

        fitnesses = []
        for vec in samples:
            params = TrainableEgoParams.from_array(vec)
            ego = EgoControllerBinding(params)
            score = 0.0
            for sc_i, flag in zip(batch_idx, perturb_flags):
                sc = scenarios[sc_i]
                hist = histories[sc.scenario_id]
                if flag and len(hist) == 0:
                    ep_counter += 1
                    rec0 = run_episode(sc, _episode_bindings(sc, ego, ReplayBinding()),
                                       derive_key("cem-ep", seed, ep_counter) % 2**31)
                    hist.push(rec0.ego_trajectory(sc.ego_id))
                ep_counter += 1
                ep_seed = derive_key("cem-ep", seed, ep_counter) % 2**31
                adv = (perturb_scenario(sc, hist, settings, models, ep_seed)
                       if flag else ReplayBinding())
                rec = run_episode(sc, _episode_bindings(sc, ego, adv), ep_seed)
                hist.push(rec.ego_trajectory(sc.ego_id))
                score += _fitness_of(rec.outcome)
            fitnesses.append(score / cfg.batch_size)

        order = sorted(range(cfg.population), key=lambda i: (-fitnesses[i], i))
        elites = np.stack([samples[i] for i in order[: cfg.elite]])
        mean = elites.mean(axis=0)
        sigma = np.maximum(elites.std(axis=0), sigma_floor)
        gen_best = order[0]
        if fitnesses[gen_best] > best_fitness:
            best_fitness = fitnesses[gen_best]
            best_params = TrainableEgoParams.from_array(samples[gen_best])
        log.append({
            "generation": gen,
            "p_perturb": p_perturb,
            "best_fitness": fitnesses[gen_best],
            "mean_fitness": float(np.mean(fitnesses)),
            "running_best": best_fitness,
        })
    return best_params, log


# ---------------------------------------------------------------------------
# run manifests


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir: str | Path, command: str, config: dict,
                       inputs: list[str | Path], artifacts: list[str]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "tool_version": __version__,
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in sorted(map(str, inputs))},
        "artifacts": sorted(artifacts),
    }
    (out / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n",
                                       encoding="utf-8")
