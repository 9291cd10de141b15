"""Command-line pipeline driver.

Every subcommand writes its artifacts plus a manifest.json capturing the
tool version, configuration, and SHA-256 of each input, which makes any
stage byte-reproducible from its manifest.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .candidates import sample_candidates
from .criticality import EgoHistory, oracle_score
from .harness import (CemConfig, ConfigError, ModelBundle, ego_binding_from_spec,
                      evaluate_suite, save_ego_params, train_ego, write_run_manifest)
from .metrics import write_report
from .scenario import (ScenarioError, load_scenario, read_manifest, save_scenario,
                       write_manifest)
from .scorer import read_corpus, save_model, load_model, train_scorer, write_corpus, CorpusTriple
from .sim import IdmBinding, ReplayBinding, run_episode, write_rollout_log
from .skills import (build_library, collect_demonstrations, load_library, read_demo_log,
                     save_library, segment_and_label, write_demo_log)
from .synth import TEMPLATES, derive_key, generate_synthetic

TRAIN_FRACTION = 0.8


def parse_config_file(path: str | Path) -> dict[str, str]:
    """`key = value` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_models(args) -> ModelBundle:
    models = ModelBundle()
    if getattr(args, "scorer", None):
        models.scorer = load_model(args.scorer)
    if getattr(args, "skills", None):
        models.library = load_library(args.skills)
    return models


def _model_inputs(args) -> list[Path]:
    out = []
    for name in ("manifest", "scorer", "skills", "corpus"):
        v = getattr(args, name, None)
        if v:
            out.append(Path(v))
    return out


def cmd_gen_scenarios(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    backgrounds = [int(x) for x in args.backgrounds.split(",")]
    paths = []
    for i in range(args.count):
        sc = generate_synthetic(args.seed + i, TEMPLATES[i % len(TEMPLATES)],
                                backgrounds[i % len(backgrounds)])
        p = out / f"scenario-{i:04d}.json"
        save_scenario(sc, p)
        paths.append(p)
    write_manifest(paths, out / "manifest.txt")
    n_train = int(TRAIN_FRACTION * len(paths))
    write_manifest(paths[:n_train], out / "train.txt")
    write_manifest(paths[n_train:], out / "eval.txt")
    write_run_manifest(out, "gen-scenarios", vars_of(args), [],
                       [p.name for p in paths] + ["manifest.txt", "train.txt", "eval.txt"])
    print(f"wrote {len(paths)} scenarios to {out}")
    return 0


def cmd_collect_demos(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = read_manifest(args.manifest)
    scenarios = [load_scenario(p) for p in paths]
    demos = collect_demonstrations(scenarios, args.seed, paths=[str(p) for p in paths])
    write_demo_log(demos, out / "demos.jsonl")
    n_events = sum(1 for d in demos if any(d.record.collision_steps.values()))
    write_run_manifest(out, "collect-demos", vars_of(args), [args.manifest], ["demos.jsonl"])
    print(f"wrote {len(demos)} demonstrations ({n_events} with collision events)")
    return 0


def cmd_build_skills(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    demos = read_demo_log(args.corpus, load_scenario)
    segments = segment_and_label(demos, args.horizon)
    lib = build_library(segments, args.clusters, args.seed)
    save_library(lib, out / "skills.json")
    n_adv = sum(lab == "adversarial" for labs in lib.member_labels for lab in labs)
    write_run_manifest(out, "build-skills", vars_of(args), [args.corpus], ["skills.json"])
    print(f"library: {lib.n_clusters} clusters, {sum(len(m) for m in lib.member_obs)} segments "
          f"({n_adv} adversarial)")
    return 0


def cmd_gen_corpus(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = read_manifest(args.manifest)
    triples: list[CorpusTriple] = []
    for p in paths:
        sc = load_scenario(p)
        seed = derive_key("corpus", args.seed, sc.scenario_id) % 2**31
        bindings = {aid: ReplayBinding() for aid in sc.agent_ids}
        bindings[sc.ego_id] = IdmBinding()
        rec = run_episode(sc, bindings, seed)
        history = EgoHistory()
        history.push(rec.ego_trajectory(sc.ego_id))
        cset = sample_candidates(sc, seed)
        for ci, cand in enumerate(cset.candidates[: args.per_scenario]):
            score = oracle_score(sc, cand, history, args.b)
            triples.append(CorpusTriple(sc.scenario_id, ci, history.latest(), cand,
                                        score.f_coll, score.f_diff))
    write_corpus(triples, out / "corpus.jsonl")
    write_run_manifest(out, "gen-corpus", vars_of(args), [args.manifest], ["corpus.jsonl"])
    print(f"wrote {len(triples)} scored triples from {len(paths)} scenarios")
    return 0


def cmd_train_scorer(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = read_corpus(args.corpus)
    model = train_scorer(corpus, args.seed, epochs=args.epochs,
                         per_head_loss=args.per_head_loss)
    save_model(model, out / "scorer.json")
    write_run_manifest(out, "train-scorer", vars_of(args), [args.corpus], ["scorer.json"])
    print(f"scorer trained: train_loss={model.train_loss:.5f} val_loss={model.val_loss:.5f}")
    return 0


def cmd_train_ego(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = _load_models(args)
    scenarios = [load_scenario(p) for p in read_manifest(args.manifest)]
    cfg = CemConfig(generations=args.generations, population=args.population,
                    elite=args.elite, batch_size=args.batch,
                    curriculum=not args.no_curriculum, k=args.k)
    params, log = train_ego(scenarios, args.generator, models, args.seed, cfg,
                            offset=args.offset, b=args.b)
    save_ego_params(params, out / "ego.json")
    with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(log[0]))
        w.writeheader()
        w.writerows(log)
    write_run_manifest(out, "train-ego", vars_of(args), _model_inputs(args),
                       ["ego.json", "train_log.csv"])
    print(f"trained ego: final best fitness {log[-1]['running_best']:.3f}")
    return 0


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = _load_models(args)
    ego = ego_binding_from_spec(args.ego)
    paths = read_manifest(args.manifest)
    report, finals = evaluate_suite(paths, ego, args.generator, models, args.seed,
                                    k=args.k, offset=args.offset, b=args.b,
                                    workers=args.workers, run_id=args.run_id)
    write_report(report, out)
    write_rollout_log(finals, out / "rollouts.jsonl")
    write_run_manifest(out, "evaluate", vars_of(args), _model_inputs(args),
                       ["report.json", "episodes.csv", "rollouts.jsonl"])
    print(json.dumps({"rates": report.rates, "realism": report.realism,
                      "collision": report.collision}, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        doc = json.loads((Path(run_dir) / "report.json").read_text(encoding="utf-8"))
        rows.append({
            "run_id": doc["run_id"],
            "n_episodes": doc["n_episodes"],
            "success": doc["rates"]["success"],
            "crash": doc["rates"]["crash"],
            "offroad": doc["rates"]["offroad"],
            "timeout": doc["rates"]["timeout"],
            "realism": doc["realism"]["mean"],
            "yaw_wd": doc["realism"]["yaw"],
            "acc_wd": doc["realism"]["acc"],
            "road_wd": doc["realism"]["road"],
            "coll_vel": doc["collision"]["mean_vel"],
            "head_on": doc["collision"]["head_on"],
            "severe_head_on": doc["collision"]["severe_head_on"],
        })
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {args.out} ({len(rows)} runs)")
    return 0


def vars_of(args) -> dict:
    return {k: str(v) for k, v in vars(args).items() if k != "func" and v is not None}


def _add_common_eval(sp, with_ego: bool) -> None:
    sp.add_argument("--manifest", required=True, help="scenario manifest (one path per line)")
    sp.add_argument("--generator", default="seal", choices=("seal", "cat-heuristic", "no-adv"))
    if with_ego:
        sp.add_argument("--ego", default="replay", help="replay | idm | trained:<ego.json>")
    sp.add_argument("--scorer", help="scorer model JSON (needed for seal)")
    sp.add_argument("--skills", help="skill library JSON (needed for seal)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--k", type=int, default=5, help="history length / eval iterations")
    sp.add_argument("--b", type=float, default=8.0, help="criticality distance scale, m")
    sp.add_argument("--offset", type=int, default=10, help="switch offset before peak risk, steps")
    sp.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="critgen",
                                 description="Safety-critical scenario perturbation pipeline")
    ap.add_argument("--config", help="key = value config file; flags override it")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-scenarios", help="generate a synthetic scenario suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=50)
    sp.add_argument("--backgrounds", default="0,1,2")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_scenarios)

    sp = sub.add_parser("collect-demos", help="all-IDM demonstration roll-outs")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_collect_demos)

    sp = sub.add_parser("build-skills", help="segment demos and build the skill library")
    sp.add_argument("--corpus", required=True, help="demos.jsonl from collect-demos")
    sp.add_argument("--clusters", type=int, default=32)
    sp.add_argument("--horizon", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_skills)

    sp = sub.add_parser("gen-corpus", help="oracle-scored training corpus for the scorer")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--per-scenario", type=int, default=32)
    sp.add_argument("--b", type=float, default=8.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("train-scorer", help="train the criticality scorer")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=300)
    sp.add_argument("--per-head-loss", action="store_true",
                    help="supervise each head instead of their sum")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_scorer)

    sp = sub.add_parser("train-ego", help="CEM curriculum training of the ego controller")
    _add_common_eval(sp, with_ego=False)
    sp.add_argument("--generations", type=int, default=20)
    sp.add_argument("--population", type=int, default=32)
    sp.add_argument("--elite", type=int, default=8)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--no-curriculum", action="store_true")
    sp.set_defaults(func=cmd_train_ego)

    sp = sub.add_parser("evaluate", help="K-step perturbation evaluation")
    _add_common_eval(sp, with_ego=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--run-id", default="run")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="aggregate run reports into one CSV")
    sp.add_argument("--runs", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        overrides = parse_config_file(args.config)
        explicit = {a.split("=")[0].lstrip("-").replace("-", "_")
                    for a in (argv if argv is not None else sys.argv[1:])
                    if a.startswith("--")}
        for key, val in overrides.items():
            attr = key.replace("-", "_")
            if not hasattr(args, attr) or attr in explicit:
                continue
            current = getattr(args, attr)
            if isinstance(current, bool):
                setattr(args, attr, val.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(args, attr, int(val))
            elif isinstance(current, float):
                setattr(args, attr, float(val))
            else:
                setattr(args, attr, val)
    try:
        return args.func(args)
    except (ConfigError, ScenarioError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
