"""neuralmap command line: gen-mazes, train, eval, heatmap, gradcheck."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck, plotting
from .agents import AGENT_KINDS, AgentConfig, make_agent
from .autodiff.checkpoint import CheckpointError, load_into, read_checkpoint
from .heatmap import UnsupportedAgentError, export, landmark_check, record_episode
from .maze import build_test_set, load_maze_set, save_maze_set, size_buckets
from .trainer import REPORT_KEYS, TrainConfig, config_from_dict, config_to_dict, evaluate, train_loop

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_sizes(text: str) -> tuple:
    """'7-15' -> odd sizes 7..15; '5,7' -> (5, 7)."""
    try:
        if "-" in text:
            lo, hi = (int(v) for v in text.split("-"))
            sizes = tuple(s for s in range(lo, hi + 1) if s % 2 == 1)
        else:
            sizes = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"bad --sizes value {text!r}") from None
    if not sizes or any(s % 2 == 0 or not 5 <= s <= 15 for s in sizes):
        raise UsageError(f"sizes must be odd integers in [5, 15], got {text!r}")
    return sizes


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _seed(value):
    env = os.environ.get("NMAP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"NMAP_SEED must be an integer, got {env!r}") from None
    return value


# ------------------------------------------------------------------ commands

def cmd_gen_mazes(args) -> int:
    sizes = parse_sizes(args.sizes)
    seed = _seed(args.seed)
    mazes = build_test_set(args.count, np.random.default_rng(seed), sizes) if args.count else []
    save_maze_set(args.out, mazes)
    counts = {s: sum(m.size == s for m in mazes) for s in sizes}
    print("size,count")
    for s, n in counts.items():
        print(f"{s},{n}")
    b = size_buckets(mazes)
    print(f"# small={b['small']} large={b['large']} total={b['total']}")
    return EXIT_OK


def build_train_config(args) -> TrainConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    try:
        config = config_from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    agent, env = config.agent, config.env
    if args.agent:
        agent = replace(agent, kind=args.agent)
    if args.write or args.map_size:
        m = dict(agent.map)
        if args.write:
            m["write"] = args.write
        if args.map_size:
            m["height"] = m["width"] = args.map_size
        agent = replace(agent, map=m)
    if args.sizes:
        env = replace(env, sizes=parse_sizes(args.sizes))
    over = {k: getattr(args, k) for k in ("n_envs", "lr", "seed", "eval_interval") if getattr(args, k) is not None}
    if args.entropy is not None:
        over["entropy_coef"] = args.entropy
    if args.steps is not None:
        over["total_steps"] = args.steps
    config = replace(config, agent=agent, env=env, **over)
    return replace(config, seed=_seed(config.seed))


def cmd_train(args) -> int:
    if not args.test_set or not Path(args.test_set).is_file():
        raise UsageError(f"held-out test set {args.test_set!r} not found; run gen-mazes first")
    config = build_train_config(args)
    test = load_maze_set(args.test_set)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config_to_dict(config), indent=2))
    (out / "test_set.txt").write_text(str(Path(args.test_set).resolve()) + "\n")
    report = train_loop(config, out, test, log=_log)
    if (out / "metrics.csv").stat().st_size and config.total_steps and config.agent.kind != "random":
        plotting.learning_curves({config.agent.kind: out / "metrics.csv"}, out / "learning_curve.png")
    _print_report(report)
    return EXIT_OK


def load_agent(checkpoint, config_path=None):
    """Rebuild the agent described by a checkpoint (or by an explicit config) and load weights."""
    manifest, params, _ = read_checkpoint(checkpoint)
    if config_path:
        config = config_from_dict(json.loads(Path(config_path).read_text()))
    else:
        config = config_from_dict(manifest["extra"]["config"])
    agent = make_agent(config.agent, np.random.default_rng([config.seed, 1]))
    load_into(agent.parameters(), params)
    return agent, config


def _agent_for_eval(args):
    if args.checkpoint:
        return load_agent(args.checkpoint, args.config)
    if args.agent in ("random", "oracle"):
        config = TrainConfig(agent=AgentConfig(kind=args.agent))
        return make_agent(config.agent, np.random.default_rng(0)), config
    raise UsageError("eval needs --checkpoint, or --agent random|oracle")


def _print_report(report: dict) -> None:
    print("bucket,count,success_rate,mean_length")
    for k in REPORT_KEYS:
        b = report[k]
        rate = "" if b["success_rate"] is None else f"{b['success_rate']:.4f}"
        length = "" if b["mean_length"] is None else f"{b['mean_length']:.2f}"
        print(f"{k},{b['count']},{rate},{length}")


def cmd_eval(args) -> int:
    agent, config = _agent_for_eval(args)
    mazes = load_maze_set(args.maze_set)
    sizes = parse_sizes(args.train_sizes) if args.train_sizes else config.env.sizes
    seed = _seed(args.seed if args.seed is not None else config.seed)
    report = evaluate(agent, mazes, seed, args.cap, greedy=True, train_sizes=sizes, n_train=args.n_train)
    report = {k: report[k] for k in REPORT_KEYS}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2))
    _print_report(report)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    agent, _ = load_agent(args.checkpoint)
    mazes = {m.id: m for m in load_maze_set(args.maze_set)}
    if args.maze_id not in mazes:
        raise UsageError(f"maze {args.maze_id!r} not in {args.maze_set}")
    maze = mazes[args.maze_id]
    ep = record_episode(agent, maze, np.random.default_rng(_seed(args.seed)), args.color, args.cap)
    stem = f"heatmap_{maze.id}"
    paths = export(ep, args.out, stem)
    check = landmark_check(ep)
    events = {"wrong goal seen": check["t_wrong"], "correct goal seen": check["t_correct"]}
    plotting.attention_frames(ep.attention, ep.poses, Path(args.out) / f"{stem}.png", maze, check["cell"])
    if check["cell"] is not None:
        plotting.cell_series(ep.attention, check["cell"], Path(args.out) / f"{stem}_cell.png", events)
    (Path(args.out) / f"{stem}_check.json").write_text(json.dumps(check, indent=1))
    print(f"heatmap,{paths['heatmap']}")
    print(f"trajectory,{paths['trajectory']}")
    print(f"outcome,{ep.outcome}")
    print(f"length,{len(ep.poses)}")
    for k in ("eligible", "t_wrong", "t_correct", "at_sight", "episode_mean", "passed"):
        print(f"{k},{check.get(k)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(_seed(args.seed))
    print(gradcheck.format_table(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAILED {r.name}: max rel err {r.max_error:.3e} at {r.worst_input}[{r.worst_index}]",
              file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuralmap", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-mazes", help="build a held-out maze set (line-JSON)")
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--sizes", default="7-15")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_mazes)

    t = sub.add_parser("train", help="A2C training run")
    t.add_argument("--config", help="JSON run config; flags below override it")
    t.add_argument("--agent", choices=AGENT_KINDS)
    t.add_argument("--write", choices=("hard", "gru"))
    t.add_argument("--map-size", type=int)
    t.add_argument("--sizes", help="training maze sizes, e.g. 5,7")
    t.add_argument("--steps", type=int)
    t.add_argument("--n-envs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--entropy", type=float, help="entropy bonus weight; 0 gives the plain A2C loss")
    t.add_argument("--eval-interval", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--test-set")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="bucketed success rates on a maze set")
    e.add_argument("--checkpoint")
    e.add_argument("--config", help="build the model from this config instead of the checkpoint's")
    e.add_argument("--agent", choices=("random", "oracle"))
    e.add_argument("--maze-set", required=True)
    e.add_argument("--cap", type=int, default=500)
    e.add_argument("--train-sizes")
    e.add_argument("--n-train", type=int, default=200)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("heatmap", help="export context attention for one greedy episode")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--maze-set", required=True)
    h.add_argument("--maze-id", required=True)
    h.add_argument("--color", choices=("green", "blue"))
    h.add_argument("--cap", type=int, default=500)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_heatmap)

    c = sub.add_parser("gradcheck", help="finite-difference suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"neuralmap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, UnsupportedAgentError) as exc:
        print(f"neuralmap: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError, ArithmeticError, KeyError) as exc:
        print(f"neuralmap: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
