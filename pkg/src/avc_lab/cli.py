"""Command-line entry point: ``avc-lab {gen-scenarios,train,eval,solve}``.

Exit codes: 0 success, 1 usage/parse/topology error, 2 numerical failure
(diverged power flow, non-finite training loss).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .harness import (CaseId, ExperimentConfig, NumericalFailure, config_from_mapping, evaluate,
                      generate_corpus, load_config, resolve_case_path, sparkline, train)
from .powerflow import SolverConfig, bus_table, branch_table, solve, write_state_csv
from .raw_io import CaseError, RawFormatError, parse_raw
from .scenario import CorpusError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avc-lab", description="DQN voltage-control experiments on AC power-flow cases.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--case-id", choices=[c.value for c in CaseId],
                        help="start from a case-study preset (default CASE1)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")

    g = sub.add_parser("gen-scenarios", help="generate a scenario corpus")
    common(g)
    g.add_argument("--case", default=None, help="base RAW case (default: bundled ieee14.raw)")
    g.add_argument("--count", type=_positive, default=None, help="number of scenarios")
    g.add_argument("--seed", type=int, default=None, help="corpus seed")
    g.add_argument("--contingencies", choices=["none", "case2"], default=None,
                   help="draw one outage per scenario from the 4-line pool")
    g.add_argument("--out", required=True, help="corpus directory")

    t = sub.add_parser("train", help="train an agent on a corpus")
    common(t)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--episodes", type=_positive, default=None, help="stop after this many episodes")
    t.add_argument("--seed", type=int, default=None, help="agent seed")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a held-out corpus")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.add_argument("--episodes", type=_positive, default=None)
    e.add_argument("--seed", type=int, default=None, help="exploration seed")

    s = sub.add_parser("solve", help="solve one case and print the result")
    s.add_argument("case", help="RAW file (bare 'ieee14.raw' resolves to the bundled case)")
    s.add_argument("--csv", action="store_true", help="machine-readable bus and branch tables")
    s.add_argument("--no-q-limits", action="store_true", help="ignore generator reactive limits")
    s.add_argument("--tolerance", type=float, default=SolverConfig.tolerance)
    s.add_argument("--max-iterations", type=_positive, default=SolverConfig.max_iterations)
    return p


def _config(args) -> ExperimentConfig:
    base = ExperimentConfig.for_case(args.case_id) if args.case_id else None
    config = load_config(args.config, base) if args.config else (base or ExperimentConfig())
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return config_from_mapping(overrides, config) if overrides else config


def cmd_gen_scenarios(args) -> int:
    config = _config(args)
    if args.contingencies is not None:
        wanted = args.contingencies == "case2"
        if wanted != config.uses_contingencies:
            config = config_from_mapping({"case_id": "CASE2" if wanted else "CASE1"}, config)
    if args.case:
        config = config_from_mapping({"case_file": str(resolve_case_path(args.case))}, config)
    seed = config.corpus_seed if args.seed is None else args.seed
    count = args.count or config.count
    discarded = generate_corpus(config, args.out, seed=seed, count=count)
    print(f"wrote {count} scenarios to {args.out} (seed {seed}, "
          f"contingencies {'case2' if config.uses_contingencies else 'none'}, {discarded} draws discarded)")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    if args.seed is not None:
        config = config_from_mapping({"agent_seed": str(args.seed)}, config)
    try:
        result = train(config, args.corpus, args.out, episodes=args.episodes, resume=args.resume)
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    rewards = [r.final_reward for r in result.rows]
    print(f"trained {len(result.rows)} episodes ({result.skipped} violation-free scenarios skipped), "
          f"{result.solves} power-flow solves, {result.wall_time:.1f} s")
    if rewards:
        print(f"final reward  {sparkline(rewards)}")
        last = [r.rolling_mean for r in result.rows if r.rolling_mean is not None]
        if last:
            print(f"rolling mean (last {config.rolling_window}): {last[-1]:.2f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _config(args)
    if args.seed is not None:
        config = config_from_mapping({"eval_seed": str(args.seed)}, config)
    result = evaluate(args.checkpoint, args.corpus, config, args.out, episodes=args.episodes)
    for k, v in result.summary.items():
        print(f"{k} = {v:.4f}" if isinstance(v, float) else f"{k} = {v}")
    return EXIT_OK


def cmd_solve(args) -> int:
    case = parse_raw(resolve_case_path(args.case))
    config = SolverConfig(tolerance=args.tolerance, max_iterations=args.max_iterations,
                          enforce_q_limits=not args.no_q_limits)
    state = solve(case, config)
    if args.csv:
        write_state_csv(state, case, sys.stdout)
    else:
        status = "converged" if state.converged else "DIVERGED"
        print(f"{case.title or 'case'}: {status} in {state.iterations} iterations, "
              f"max mismatch {state.max_mismatch:.3e} p.u.")
        print(f"{'bus':>5} {'type':>5} {'vm':>9} {'va_deg':>10} {'p_mw':>10} {'q_mvar':>10}")
        for b, t, vm, va, p, q in bus_table(state, case):
            print(f"{b:>5} {t:>5} {vm:9.5f} {va:10.4f} {p:10.3f} {q:10.3f}")
        print(f"{'from':>5} {'to':>5} {'ckt':>3} {'st':>2} {'p_from':>9} {'q_from':>9} "
              f"{'p_to':>9} {'q_to':>9} {'p_loss':>8}")
        for f, t, c, st, pf, qf, pt, qt, loss in branch_table(state, case):
            print(f"{f:>5} {t:>5} {c:>3} {st:>2} {pf:9.3f} {qf:9.3f} {pt:9.3f} {qt:9.3f} {loss:8.4f}")
        if state.q_limited:
            print(f"reactive-limited generator buses (*): {sorted(state.q_limited)}")
    return EXIT_OK if state.converged else EXIT_NUMERICAL


COMMANDS = {"gen-scenarios": cmd_gen_scenarios, "train": cmd_train, "eval": cmd_eval,
            "solve": cmd_solve}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, RawFormatError, CaseError, CorpusError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
