"""Command-line pipeline: world -> labeled data -> user model -> offline trajectories
-> agent -> evaluation, plus an identifiability diagnostic.

Every command reads a run config, writes new files under the output directory and
records each file in ``manifest.jsonl``. Exit codes:

    0  success
    1  unexpected internal error
    2  usage error (bad flags)
    3  invalid config
    4  dependency missing (an upstream artifact has not been produced)
    5  stage failure (training or evaluation raised a domain error)
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import emtrainer
from .agent import GreedyPolicy, SlateAgent, train_agent, write_loss_trace
from .config import ConfigError, RunConfig, load_config
from .datasets import (LabeledDatasets, PairGroup, PairwiseRecord, RankedList, SessionShape,
                       load_records, make_pickapic_testset, make_ranked_testset, read_jsonl,
                       save_records, synth_pairwise, synth_relevance, synth_sequential, write_jsonl)
from .env import (LearnedSimulator, RandomPolicy, SlateEnv, TruthSimulator, generate_offline_dataset,
                  identifiability_check, load_trajectories, save_trajectories, trajectory_header)
from .evalharness import evaluate_policy, format_report_table, pickapic_accuracy, rank_correlation_eval
from .usermodel import UserModel, UserModelConfig
from .world import World, make_world

log = logging.getLogger("slatelab")

OUT_ENV = "SLATELAB_OUT"
EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_STAGE = 0, 1, 2, 3, 4, 5

WORLD_FILE = "world.json"
PAIRWISE_FILE = "data/pairwise.jsonl"
RELEVANCE_FILE = "data/relevance.jsonl"
SEQUENTIAL_FILE = "data/sequential.jsonl"
TEST_PAIRS_FILE = "data/test_pairs.jsonl"
TEST_RANKED_FILE = "data/test_ranked.jsonl"
HIDDEN_FILE = "diagnostics/hidden_types.json"
USER_MODEL_FILE = "user_model.json"
EM_LOG_FILE = "logs/em_trace.tsv"
TRAJ_FILE = "trajectories.jsonl"
AGENT_FILE = "agent.json"
AGENT_LOG_FILE = "logs/iql_trace.tsv"
POLICY_REPORT_FILE = "reports/policy_eval.json"
POLICY_TABLE_FILE = "reports/policy_eval.txt"
USER_REPORT_FILE = "reports/user_model_eval.json"
IDENT_FILE = "reports/identifiability.json"


class DependencyMissing(RuntimeError):
    pass


class StageFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------

class Run:
    """Resolved config, output root and manifest bookkeeping for one command."""

    def __init__(self, config: RunConfig, out: Path, command: str, n_jobs: int = 1):
        self.config = config
        self.out = out
        self.command = command
        self.n_jobs = n_jobs
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def require(self, rel: str, producer: str) -> Path:
        p = self.out / rel
        if not p.exists():
            raise DependencyMissing(f"dependency missing: {p} (run `slatelab {producer}` first)")
        return p

    def record(self, rel: str) -> None:
        """Add or replace the manifest entry for one produced file."""
        manifest = self.out / "manifest.jsonl"
        entries = []
        if manifest.exists():
            entries = [json.loads(line) for line in manifest.read_text().splitlines() if line.strip()]
        digest = hashlib.sha256((self.out / rel).read_bytes()).hexdigest()
        entries = [e for e in entries if e["path"] != rel]
        entries.append({"path": rel, "command": self.command, "config_hash": self.config.hash(),
                        "seed": self.config.seed, "sha256": digest,
                        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())})
        manifest.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in entries))

    def world(self) -> World:
        path = self.require(WORLD_FILE, "gen-world")
        d = json.loads(path.read_text())
        cfg = self.config.world
        if d["config"] != cfg.to_dict() or d["seed"] != self.config.seed_for("world"):
            raise DependencyMissing(f"dependency missing: {path} was built from a different world config; "
                                    "rerun `slatelab gen-world`")
        return make_world(cfg, d["seed"])

    def user_model(self) -> UserModel:
        return UserModel.load(self.require(USER_MODEL_FILE, "fit-user"))

    def env(self, world: World, simulator: str | None = None) -> SlateEnv:
        kind = simulator or self.config.env.simulator
        sim = TruthSimulator(world) if kind == "truth" else LearnedSimulator(world, self.user_model())
        return SlateEnv(sim, self.config.env.episode)


def _world_fingerprint(world: World) -> str:
    h = hashlib.sha256()
    for arr in (world.vocab.word_embeddings, world.generator.weight, world.generator.bias,
                *[u.taste_vector for u in world.users]):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_world(run: Run) -> dict:
    world = make_world(run.config.world, run.config.seed_for("world"))
    header = world.header()
    header["fingerprint"] = _world_fingerprint(world)
    header["type_categories"] = world.type_categories
    run.path(WORLD_FILE).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    run.record(WORLD_FILE)
    return {"world": WORLD_FILE, "n_types": world.n_types, "fingerprint": header["fingerprint"]}


def cmd_gen_data(run: Run) -> dict:
    world = run.world()
    cfg, ev = run.config.user, run.config.eval
    seed = run.config.seed_for("data")
    hidden: dict[str, list[int]] = {}
    written = []
    if cfg.n_pairwise:
        recs, hidden["pairwise"] = synth_pairwise(world, cfg.n_pairwise, seed, cfg.comparisons_per_group,
                                                  run.n_jobs)
        save_records(run.path(PAIRWISE_FILE), "pairwise", recs, world, {"seed": seed})
        written.append(PAIRWISE_FILE)
    if cfg.n_relevance:
        recs, hidden["relevance"] = synth_relevance(world, cfg.n_relevance, seed, run.n_jobs)
        save_records(run.path(RELEVANCE_FILE), "relevance", recs, world, {"seed": seed})
        written.append(RELEVANCE_FILE)
    if cfg.n_sequential:
        e = run.config.env.episode
        shape = SessionShape(e.horizon, e.slate_size, e.items_per_prompt, e.n_candidates, e.n_categories)
        recs, hidden["sequential"] = synth_sequential(world, cfg.n_sequential, seed, shape, run.n_jobs)
        save_records(run.path(SEQUENTIAL_FILE), "sequential", recs, world, {"seed": seed})
        written.append(SEQUENTIAL_FILE)

    test_seed = run.config.seed_for("testsets")
    groups, hidden["test_pairs"] = make_pickapic_testset(world, ev.n_test_groups, ev.test_pairs_per_group,
                                                         test_seed)
    write_jsonl(run.path(TEST_PAIRS_FILE), {"dataset": "test_pairs", "world": world.header(), "seed": test_seed},
                ({"prompt": list(g.prompt), "pairs": [p.to_json() for p in g.pairs]} for g in groups))
    lists, hidden["test_ranked"] = make_ranked_testset(world, ev.n_ranked_lists, ev.ranked_list_size, test_seed)
    write_jsonl(run.path(TEST_RANKED_FILE), {"dataset": "test_ranked", "world": world.header(), "seed": test_seed},
                ({"prompt": list(r.prompt), "items": r.items.tolist()} for r in lists))
    written += [TEST_PAIRS_FILE, TEST_RANKED_FILE]
    # hidden types go to a diagnostics file that no trainer reads
    run.path(HIDDEN_FILE).write_text(json.dumps(hidden, sort_keys=True) + "\n")
    written.append(HIDDEN_FILE)
    for rel in written:
        run.record(rel)
    return {"files": written}


def _load_training_data(run: Run) -> LabeledDatasets:
    cfg = run.config.user
    data = LabeledDatasets()
    if cfg.n_pairwise:
        data.pairwise = load_records(run.require(PAIRWISE_FILE, "gen-data"), "pairwise")[1]
    if cfg.n_relevance:
        data.relevance = load_records(run.require(RELEVANCE_FILE, "gen-data"), "relevance")[1]
    if cfg.n_sequential:
        data.sequential = load_records(run.require(SEQUENTIAL_FILE, "gen-data"), "sequential")[1]
    return data


def cmd_fit_user(run: Run) -> dict:
    world = run.world()
    data = _load_training_data(run)
    cfg = run.config.user
    w = world.config
    mcfg = UserModelConfig(n_types=cfg.n_types, text_dim=w.prompt_dim + 1, item_dim=w.item_dim,
                           embed_dim=cfg.embed_dim, slate_size=run.config.env.episode.slate_size, agg=cfg.agg)
    try:
        res = emtrainer.fit(cfg.em, mcfg, world.vocab, data, seed=run.config.seed_for("fit-user"),
                            world_seed=world.seed)
    except ValueError as exc:
        raise StageFailure(f"user-model fit failed: {exc}") from exc
    res.model.save(run.path(USER_MODEL_FILE))
    emtrainer.write_training_log(run.path(EM_LOG_FILE), res.log)
    run.record(USER_MODEL_FILE)
    run.record(EM_LOG_FILE)
    return {"user_model": USER_MODEL_FILE, "prior": [round(float(p), 4) for p in res.prior],
            "restart_marginal_loglik": res.restarts}


def cmd_gen_trajectories(run: Run) -> dict:
    world = run.world()
    env = run.env(world)
    mode = run.config.env.reward_mode
    n = run.config.agent.n_trajectories
    seed = run.config.seed_for("trajectories")
    trajs = generate_offline_dataset(env, n, mode, seed, n_jobs=run.n_jobs)
    save_trajectories(run.path(TRAJ_FILE), trajs, trajectory_header(env, mode, seed, n))
    run.record(TRAJ_FILE)
    return {"trajectories": TRAJ_FILE, "n": n, "reward_mode": mode,
            "mean_return": float(np.mean([t.total_return for t in trajs]))}


def cmd_train_agent(run: Run) -> dict:
    world = run.world()
    header, trajs = load_trajectories(run.require(TRAJ_FILE, "gen-trajectories"))
    env_cfg = run.config.env.episode
    agent = SlateAgent.initialize(world.vocab, env_cfg, world.config.max_words, run.config.agent.iql,
                                  np.random.default_rng([run.config.seed_for("agent-init")]))
    try:
        res = train_agent(agent, trajs, run.config.seed_for("train-agent"))
    except ValueError as exc:
        raise StageFailure(f"agent training failed: {exc}") from exc
    res.agent.save(run.path(AGENT_FILE))
    write_loss_trace(run.path(AGENT_LOG_FILE), res.log)
    run.record(AGENT_FILE)
    run.record(AGENT_LOG_FILE)
    return {"agent": AGENT_FILE, "trained_on": header.get("reward_mode"), "steps": len(res.log)}


def cmd_evaluate(run: Run, policies: list[str]) -> dict:
    world = run.world()
    # policies are always judged against the planted users
    env = run.env(world, "truth")
    mode = run.config.env.reward_mode
    n = run.config.eval.n_episodes
    seed = run.config.seed_for("evaluate")
    reports = []
    for name in policies:
        if name == "random":
            pol = RandomPolicy()
        else:
            pol = GreedyPolicy(SlateAgent.load(run.require(AGENT_FILE, "train-agent"), world.vocab))
        reports.append(evaluate_policy(pol, env, n, mode, seed, run.n_jobs, name=name))
    run.path(POLICY_REPORT_FILE).write_text(
        json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n")
    table = format_report_table(reports)
    run.path(POLICY_TABLE_FILE).write_text(table + "\n")
    run.record(POLICY_REPORT_FILE)
    run.record(POLICY_TABLE_FILE)
    out = {"reports": POLICY_REPORT_FILE, "table": table}

    if (run.out / USER_MODEL_FILE).exists() and (run.out / TEST_PAIRS_FILE).exists():
        model = run.user_model()
        _, rows = read_jsonl(run.out / TEST_PAIRS_FILE)
        groups = [PairGroup(tuple(r["prompt"]), [PairwiseRecord.from_json(p) for p in r["pairs"]]) for r in rows]
        _, rows = read_jsonl(run.require(TEST_RANKED_FILE, "gen-data"))
        lists = [RankedList(tuple(r["prompt"]), np.asarray(r["items"], dtype=float)) for r in rows]
        summary = {"pickapic_accuracy": pickapic_accuracy(model, world.vocab, groups,
                                                          run.config.eval.tie_threshold),
                   "rank_correlation": rank_correlation_eval(model, world.vocab, lists,
                                                             seed=run.config.seed_for("rank-eval"))}
        run.path(USER_REPORT_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        run.record(USER_REPORT_FILE)
        out["user_model"] = summary
    return out


def cmd_diagnose(run: Run) -> dict:
    world = run.world()
    kind = "learned" if (run.out / USER_MODEL_FILE).exists() else "truth"
    env = run.env(world, kind)
    rep = identifiability_check(env, run.config.eval.identifiability_samples, run.config.seed_for("diagnose"))
    d = rep.to_json()
    d["simulator"] = kind
    run.path(IDENT_FILE).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    run.record(IDENT_FILE)
    return {"identifiability": IDENT_FILE, "identified": np.asarray(rep.identified).tolist(), "merged": rep.merged}


def cmd_pipeline(run: Run, policies: list[str]) -> dict:
    steps = [("gen-world", cmd_gen_world), ("gen-data", cmd_gen_data), ("fit-user", cmd_fit_user),
             ("diagnose", cmd_diagnose), ("gen-trajectories", cmd_gen_trajectories),
             ("train-agent", cmd_train_agent)]
    out = {}
    for name, fn in steps:
        run.command = name
        log.info("stage %s", name)
        out[name] = fn(run)
    run.command = "evaluate"
    out["evaluate"] = cmd_evaluate(run, policies)
    return out


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = ("gen-world", "gen-data", "fit-user", "gen-trajectories", "train-agent", "evaluate", "diagnose",
            "pipeline", "show-config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slatelab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run config; defaults apply when omitted")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_ENV} or ./runs)")
        p.add_argument("--jobs", type=int, default=1, help="worker threads for sampling and evaluation")
        p.add_argument("--reward-mode", choices=("sparse", "dense"))
        p.add_argument("--k-types", type=int, help="number of user types in the fitted model")
        p.add_argument("--n-trajectories", type=int)
        p.add_argument("--policy", choices=("random", "trained", "both"), default="both")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.reward_mode:
        overrides["env.reward_mode"] = args.reward_mode
    if args.k_types is not None:
        overrides["user.n_types"] = args.k_types
        overrides["user.em.n_types"] = args.k_types
    if args.n_trajectories is not None:
        overrides["agent.n_trajectories"] = args.n_trajectories
    return cfg.with_overrides(overrides) if overrides else cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "show-config":
        print(cfg.to_json())
        return EXIT_OK
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    out = args.out or Path(os.environ.get(OUT_ENV, "runs"))
    run = Run(cfg, out, args.command, args.jobs)
    policies = ["random", "trained"] if args.policy == "both" else [args.policy]
    handlers = {"gen-world": cmd_gen_world, "gen-data": cmd_gen_data, "fit-user": cmd_fit_user,
                "gen-trajectories": cmd_gen_trajectories, "train-agent": cmd_train_agent,
                "diagnose": cmd_diagnose,
                "evaluate": lambda r: cmd_evaluate(r, policies),
                "pipeline": lambda r: cmd_pipeline(r, policies)}
    try:
        result = handlers[args.command](run)
    except DependencyMissing as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except StageFailure as exc:
        print(f"error: stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        log.debug("internal error", exc_info=True)
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    table = result.pop("table", None) if isinstance(result, dict) else None
    if args.command == "pipeline":
        table = result["evaluate"].pop("table", None)
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    if table:
        print(table)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
