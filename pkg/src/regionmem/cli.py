"""Command-line entry point: ``regionmem <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import fixtures
from .config import InvalidConfig, dump_config, load_config, normalize_key, parse_bool
from .consolidation import IntervalLog, run_consolidation, select_working_region
from .deployment import StreamConfig, run_online_stream
from .env.base import UnknownTask
from .env.scripted import ScriptedTaskAgent, ToyRuleWriter
from .env.toy import ToyEnv, ToyWorld, default_tasks, load_tasks, save_tasks
from .memory import BankError, MemoryBank, load_bank, load_entries, provenance_trajectories, render_entry, save_bank
from .policies import DedupAbstractPolicy
from .retrieval import HashingEmbedder, HttpEmbedder
from .reward import RewardConfig, ToyRunner, evaluate_replacement
from .training import TrainingConfig, build_offline_pool, collect_toy_trajectories, emit_training_data

log = logging.getLogger("regionmem")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_RUNTIME = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class UnknownSubcommand(CliError):
    pass


def _existing(path: Optional[str], what: str) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}", EXIT_IO)
    return p


# -- parser ----------------------------------------------------------------------

def _endpoint_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("HTTP endpoint (used when a role is set to http)")
    g.add_argument("--base-url", default="http://localhost:8000", help="OpenAI-compatible server root")
    g.add_argument("--model", default="default", help="chat model name")
    g.add_argument("--api-key-env", default="OPENAI_API_KEY", help="environment variable holding the API key")
    g.add_argument("--temperature", type=float, default=0.7, help="sampling temperature")
    g.add_argument("--top-p", type=float, default=0.9, help="nucleus sampling top-p")
    g.add_argument("--max-retries", type=int, default=3, help="retries per chat request")
    g.add_argument("--embedder", choices=("hashing", "http"), default="hashing", help="retrieval embedder")
    g.add_argument("--embed-model", default="text-embedding", help="embedding model for --embedder http")


def _reward_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("reward")
    g.add_argument("--alpha", type=float, default=0.5, help="counterfactual weight")
    g.add_argument("--rho", type=float, default=0.5, help="mask fraction")
    g.add_argument("--mc-fraction", type=float, default=0.25, help="MC samples as a fraction of distinct masks")
    g.add_argument("--mc-min", type=int, default=1, help="minimum MC samples")
    g.add_argument("--fmt-weight", type=float, default=0.5, help="format-penalty weight")
    g.add_argument("--no-format-penalty", action="store_true", help="drop the format-penalty term")
    g.add_argument("--mask-seed", type=int, default=0, help="seed for mask sampling")
    g.add_argument("--binary-return", action="store_true", help="score episodes 1/0 on success instead of the final score")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="regionmem", formatter_class=fmt,
                                     description="Typed agent memory with region-rewriting consolidation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    subs = {}

    p = sub.add_parser("run-online", formatter_class=fmt, help="prequential stream over a task file")
    p.add_argument("--config", help="flat key = value config file (flags win)")
    p.add_argument("--env", choices=("toy", "alfworld", "scienceworld", "webarena"), default="toy",
                   help="environment adapter")
    p.add_argument("--tasks", help="task file (JSON list or JSONL); bundled toy tasks when omitted")
    p.add_argument("--world", help="toy world JSON; bundled world when omitted")
    p.add_argument("--cadence", type=int, default=10, help="sessions between consolidation events")
    p.add_argument("--topk", type=int, default=3, help="retrieval cap per task")
    p.add_argument("--budget", type=int, default=1500, help="retrieval token budget")
    p.add_argument("--refresh-every", type=int, default=8, help="in-episode refresh period in steps (0 disables)")
    p.add_argument("--refresh-last-k", type=int, default=3, help="recent actions in the refresh query")
    p.add_argument("--max-steps", type=int, default=None, help="agent step cap (env default when omitted)")
    p.add_argument("--turn-budget", type=int, default=40, help="consolidator turn budget")
    p.add_argument("--seed", type=int, default=42, help="stream seed")
    p.add_argument("--shuffle", action="store_true", help="shuffle the task order with --seed")
    p.add_argument("--agent", choices=("scripted", "http"), default="scripted", help="task agent")
    p.add_argument("--writer", choices=("scripted", "http"), default="scripted", help="writer policy")
    p.add_argument("--dreamer", choices=("scripted", "http", "off"), default="scripted",
                   help="consolidator policy (off = writer only)")
    p.add_argument("--out", default="runs/online", help="output directory")
    _endpoint_args(p)
    subs["run-online"] = p

    p = sub.add_parser("inspect-bank", formatter_class=fmt, help="summarize a bank JSONL file")
    p.add_argument("--config", help="flat key = value config file (flags win)")
    p.add_argument("--bank", required=True, help="bank JSONL file")
    p.add_argument("--entry", help="print one entry")
    p.add_argument("--provenance", help="print the provenance of one entry")
    subs["inspect-bank"] = p

    p = sub.add_parser("consolidate", formatter_class=fmt, help="one consolidation event over a fixed bank")
    p.add_argument("--config", help="flat key = value config file (flags win)")
    p.add_argument("--bank", required=True, help="bank JSONL file")
    p.add_argument("--region-from-interval", required=True,
                   help="JSON interval log {written_ids, retrieved_ids} or a JSON list of entry ids")
    p.add_argument("--dreamer", choices=("scripted", "http"), default="scripted", help="consolidator policy")
    p.add_argument("--turn-budget", type=int, default=40, help="consolidator turn budget")
    p.add_argument("--session-index", type=int, default=None, help="session stamp for new entries")
    p.add_argument("--out", help="output bank path (default: <bank>.consolidated.jsonl)")
    _endpoint_args(p)
    subs["consolidate"] = p

    p = sub.add_parser("reward-eval", formatter_class=fmt, help="reward report for a replacement set")
    p.add_argument("--config", help="flat key = value config file (flags win)")
    p.add_argument("--replacement", required=True, help="entries JSONL file")
    p.add_argument("--tasks", required=True, help="eval task file")
    p.add_argument("--world", help="toy world JSON; bundled world when omitted")
    p.add_argument("--samples", type=int, default=None, help="force Monte Carlo with this many masks")
    p.add_argument("--out", help="write the report JSON here")
    _reward_args(p)
    subs["reward-eval"] = p

    p = sub.add_parser("emit-training-data", formatter_class=fmt, help="group rollouts as JSONL training records")
    p.add_argument("--config", help="flat key = value config file (flags win)")
    p.add_argument("--steps", type=int, default=1, help="training steps to emit")
    p.add_argument("--group-size", type=int, default=8, help="rollouts per group")
    p.add_argument("--support", type=int, default=4, help="support trajectories per region")
    p.add_argument("--pool-tasks", help="tasks whose trajectories form the pool (default: first 40 bundled tasks)")
    p.add_argument("--eval-tasks", help="eval tasks (default: last 20 bundled tasks)")
    p.add_argument("--drop-prob", type=float, default=0.3, help="per-group drop rate of the scripted consolidator")
    p.add_argument("--dreamer", choices=("scripted", "http"), default="scripted", help="consolidator policy")
    p.add_argument("--turn-budget", type=int, default=40, help="consolidator turn budget")
    p.add_argument("--seed", type=int, default=0, help="region sampling seed")
    p.add_argument("--out", default="training_steps.jsonl", help="output JSONL path")
    _reward_args(p)
    _endpoint_args(p)
    subs["emit-training-data"] = p

    p = sub.add_parser("write-fixtures", formatter_class=fmt, help="write the bundled reward fixtures")
    p.add_argument("--out", default="fixtures", help="output directory")
    subs["write-fixtures"] = p
    return parser, subs


def _apply_config(sub: argparse.ArgumentParser, path: str) -> dict:
    values = load_config(path)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in values.items():
        dest = normalize_key(key)
        if dest not in actions:
            raise InvalidConfig(f"{path}: unknown key {key!r}")
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = parse_bool(value)
        else:
            if action.choices is not None and value not in action.choices:
                raise InvalidConfig(f"{path}: {key} must be one of {sorted(action.choices)}")
            defaults[dest] = value
    sub.set_defaults(**defaults)
    return values


def _prescan(argv: Sequence[str], commands) -> tuple[Optional[str], Optional[str]]:
    """(subcommand, --config value) found without full parsing, so a config
    file can supply required flags."""
    command = next((a for a in argv if a in commands), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    return command, config


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser, subs = build_parser()
    command, config = _prescan(argv, subs)
    if command is not None and config is not None and "--config" in {
            o for a in subs[command]._actions for o in a.option_strings}:
        _existing(config, "config file")
        values = _apply_config(subs[command], config)
        for action in subs[command]._actions:
            if action.dest in values:
                action.required = False
    args = parser.parse_args(argv)
    if args.command is None:
        raise UnknownSubcommand("a subcommand is required: " + ", ".join(subs))
    return args


# -- shared builders --------------------------------------------------------------

def _chat_client(args):
    from .llm import ChatClient, ChatConfig
    cfg = ChatConfig(base_url=args.base_url, model=args.model, api_key=os.environ.get(args.api_key_env),
                     temperature=args.temperature, top_p=args.top_p, max_retries=args.max_retries)
    return ChatClient(cfg)


def _embedder(args):
    if args.embedder == "http":
        base = args.base_url.rstrip("/")
        return HttpEmbedder(base if base.endswith("/v1") else base + "/v1", args.embed_model,
                            api_key=os.environ.get(args.api_key_env))
    return HashingEmbedder()


def _world(path: Optional[str]) -> ToyWorld:
    p = _existing(path, "world file")
    if p is None:
        return ToyWorld.default()
    return ToyWorld.from_dict(json.loads(p.read_text(encoding="utf-8")))


def _tasks(path: Optional[str], what: str = "tasks file"):
    p = _existing(path, what)
    return default_tasks() if p is None else load_tasks(p)


def _reward_config(args) -> RewardConfig:
    return RewardConfig(alpha=args.alpha, rho=args.rho, mc_samples_fraction=args.mc_fraction,
                        mc_min_samples=args.mc_min, format_penalty_weight=args.fmt_weight,
                        mask_seed=args.mask_seed, use_format_penalty=not args.no_format_penalty,
                        binary_return=args.binary_return)


def _resolved(args) -> dict:
    skip = {"command", "config", "verbose", "api_key_env"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# -- subcommands ------------------------------------------------------------------

def cmd_run_online(args) -> int:
    if args.env != "toy":
        raise CliError(f"the {args.env} adapter is an interface stub; only --env toy runs here")
    tasks = _tasks(args.tasks)
    world = _world(args.world)
    if not tasks:
        raise CliError(f"no tasks in {args.tasks}")
    config = StreamConfig(cadence_k=args.cadence, top_k_cap=args.topk, token_budget=args.budget,
                          refresh_every=args.refresh_every, refresh_last_k_actions=args.refresh_last_k,
                          max_agent_steps=args.max_steps, seed=args.seed, shuffle_tasks=args.shuffle,
                          env_profile=args.env, turn_budget=args.turn_budget)
    client = _chat_client(args) if "http" in (args.agent, args.writer, args.dreamer) else None
    if args.agent == "http":
        from .llm import HttpTaskAgent
        agent = HttpTaskAgent(client)
    else:
        agent = ScriptedTaskAgent(world.rooms)
    if args.writer == "http":
        from .llm import HttpWriterPolicy
        writer = HttpWriterPolicy(client)
    else:
        writer = ToyRuleWriter(world.decoys)
    if args.dreamer == "off":
        dreamer = None
    elif args.dreamer == "http":
        from .llm import HttpConsolidatorPolicy
        dreamer = HttpConsolidatorPolicy(client)
    else:
        dreamer = DedupAbstractPolicy()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = _resolved(args)
    (out / "config.resolved").write_text(dump_config(resolved), encoding="utf-8")
    env = ToyEnv(world, tasks)
    bank, metrics = run_online_stream(tasks, env, agent, writer, dreamer, config, out_dir=out,
                                      embedder=_embedder(args), extra_config=resolved)
    print(f"tasks: {len(tasks)}")
    print(f"success rate: {metrics.success_rate:.4f}")
    print(f"mean final score: {metrics.mean_final_score:.4f}")
    print(f"AUC: {metrics.auc:.4f}")
    print(f"active bank: {metrics.active_entries} entries, {metrics.active_bank_tokens} tokens")
    print(f"retired bank: {metrics.retired_entries} entries, {metrics.retired_bank_tokens} tokens")
    print(f"consolidation events: {metrics.consolidation_events}")
    print(f"logs: {out}")
    return EXIT_OK


def cmd_inspect_bank(args) -> int:
    path = _existing(args.bank, "bank file")
    bank = load_bank(path, strict=False)
    if args.entry:
        if args.entry not in bank:
            raise CliError(f"no entry {args.entry!r} in {path}")
        e = bank[args.entry]
        print(f"{e.id} [{e.kind}{'/' + e.proc_type if e.proc_type else ''}] status={e.status} "
              f"session={e.created_session} tokens={e.token_count}")
        print(render_entry(e))
        return EXIT_OK
    if args.provenance:
        if args.provenance not in bank:
            raise CliError(f"no entry {args.provenance!r} in {path}")
        _print_provenance(bank, args.provenance, 0)
        print("trajectories: " + ", ".join(provenance_trajectories(bank, args.provenance)))
        return EXIT_OK
    print(f"entries: {len(bank)}")
    print(f"active: {len(bank.active())} ({bank.active_tokens()} tokens)")
    print(f"retired: {len(bank.retired())} ({bank.retired_tokens()} tokens)")
    print(f"trajectories: {len(bank.trajectory_log)}")
    for e in bank.active():
        print(f"  {e.id} | {e.kind} | {e.name} | {e.summary}")
    return EXIT_OK


def _print_provenance(bank: MemoryBank, entry_id: str, depth: int) -> None:
    e = bank[entry_id]
    pad = "  " * depth
    trajs = f" <- {', '.join(e.source_trajectory_ids)}" if not e.source_entry_ids else ""
    print(f"{pad}{e.id} [{e.status}] {e.name}{trajs}")
    for sid in e.source_entry_ids:
        if sid in bank:
            _print_provenance(bank, sid, depth + 1)
        else:
            print(f"{pad}  {sid} (missing)")


def _read_interval(path: Path) -> IntervalLog:
    data = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(data, list):
        return IntervalLog(written_ids=[str(i) for i in data])
    if isinstance(data, dict):
        return IntervalLog.from_dict(data)
    raise CliError(f"{path}: expected a JSON object or list")


def cmd_consolidate(args) -> int:
    bank_path = _existing(args.bank, "bank file")
    interval_path = _existing(args.region_from_interval, "interval file")
    bank = load_bank(bank_path)
    region = select_working_region(bank, _read_interval(interval_path))
    out = Path(args.out) if args.out else bank_path.with_suffix(".consolidated.jsonl")
    if len(region) == 0:
        print("working region is empty; nothing to consolidate")
        save_bank(bank, out)
        return EXIT_OK
    if args.dreamer == "http":
        from .llm import HttpConsolidatorPolicy
        policy = HttpConsolidatorPolicy(_chat_client(args))
    else:
        policy = DedupAbstractPolicy()
    before = bank.active_tokens()
    session_index = args.session_index
    if session_index is None:
        session_index = max((e.created_session for e in bank.entries.values()), default=0) + 1
    bank, session = run_consolidation(bank, region, policy, turn_budget=args.turn_budget,
                                      session_index=session_index, embedder=_embedder(args))
    save_bank(bank, out)
    log_path = out.with_suffix(".session.json")
    log_path.write_text(json.dumps(session.to_log(session_index, session.applied), indent=1) + "\n",
                        encoding="utf-8")
    print(f"region: {len(region)} entries; turns used: {len(session.transcript)}; "
          f"termination: {session.termination_reason}")
    print(f"applied: {session.applied}; replacement entries: {len(session.replacement_ids)}")
    print(f"active tokens: {before} -> {bank.active_tokens()}")
    print(f"bank: {out}")
    return EXIT_OK


def cmd_reward_eval(args) -> int:
    rep_path = _existing(args.replacement, "replacement file")
    tasks = _tasks(args.tasks, "tasks file")
    entries = load_entries(rep_path)
    config = _reward_config(args)
    runner = ToyRunner(_world(args.world), binary=config.binary_return)
    report = evaluate_replacement(entries, tasks, runner, config, num_samples=args.samples)
    text = json.dumps(report.to_dict(), indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(f"entries: {len(entries)}; eval tasks: {len(tasks)}")
    print(f"utility: {report.utility:.6f}")
    print(f"cf_estimate: {report.cf_estimate:.6f}")
    print("cf_exact: " + ("n/a" if report.cf_exact is None else f"{report.cf_exact:.6f}"))
    print(f"composite: {report.composite:.6f}")
    print(f"masks evaluated: {len(report.mask_utilities)}")
    return EXIT_OK


def cmd_emit_training_data(args) -> int:
    if args.group_size < 2:
        raise CliError("--group-size must be >= 2")
    bundled = default_tasks()
    pool_tasks = load_tasks(_existing(args.pool_tasks, "pool tasks file")) if args.pool_tasks else bundled[:40]
    eval_tasks = load_tasks(_existing(args.eval_tasks, "eval tasks file")) if args.eval_tasks else bundled[40:]
    world = ToyWorld.default()
    pool = build_offline_pool(collect_toy_trajectories(pool_tasks, world), ToyRuleWriter(world.decoys))
    if args.dreamer == "http":
        from .llm import HttpConsolidatorPolicy
        policies = HttpConsolidatorPolicy(_chat_client(args))
    else:
        policies = [DedupAbstractPolicy(args.drop_prob, seed=args.seed * 1000 + g)
                    for g in range(args.group_size)]
    config = TrainingConfig(group_size=args.group_size, support_size=args.support, seed=args.seed,
                            turn_budget=args.turn_budget, reward=_reward_config(args))
    records = emit_training_data(pool, eval_tasks, policies, config, args.steps, args.out)
    for rec in records:
        comps = [r["composite"] for r in rec.rollouts]
        print(f"step {rec.step_index}: region {len(rec.region_ids)} entries; "
              f"composite min/max {min(comps):.4f}/{max(comps):.4f}")
    print(f"records: {args.out}")
    return EXIT_OK


def cmd_write_fixtures(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fixtures.write_entries(fixtures.load_bearing(), out / "load_bearing.jsonl")
    fixtures.write_entries(fixtures.duplicate_pair(), out / "duplicate_pair.jsonl")
    fixtures.write_entries(fixtures.harmful_pair(), out / "harmful_pair.jsonl")
    fixtures.write_entries(fixtures.mixed_set(12), out / "mixed_12.jsonl")
    save_tasks(fixtures.thermometer_tasks(), out / "thermometer_tasks.json")
    save_tasks(fixtures.mixed_tasks(), out / "mixed_tasks.json")
    print(f"fixtures written to {out}")
    return EXIT_OK


COMMANDS = {
    "run-online": cmd_run_online,
    "inspect-bank": cmd_inspect_bank,
    "consolidate": cmd_consolidate,
    "reward-eval": cmd_reward_eval,
    "emit-training-data": cmd_emit_training_data,
    "write-fixtures": cmd_write_fixtures,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:   # argparse usage errors and --help
        return int(exc.code or 0)
    except (CliError, InvalidConfig) as exc:
        print(f"regionmem: error: {exc}", file=sys.stderr)
        return getattr(exc, "code", EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = COMMANDS[args.command](args)
    except CliError as exc:
        print(f"regionmem: error: {exc}", file=sys.stderr)
        return exc.code
    except InvalidConfig as exc:
        print(f"regionmem: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, BankError, UnknownTask, KeyError, ValueError) as exc:
        print(f"regionmem: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        print(f"regionmem: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    sys.stdout.flush()
    return code


if __name__ == "__main__":
    sys.exit(main())
