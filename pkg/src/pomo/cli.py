"""``pomo`` command line: generate | train | eval | solve | report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from pomo import bench
from pomo.errors import ConfigError, PomoError
from pomo.instances import KINDS, load_dataset, make_dataset, save_dataset

log = logging.getLogger("pomo")

DEFAULT_SEED = 1234


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None), help="random seed (default 1234)")
    parser.add_argument("--threads", type=int, default=d(1), help="CPU threads (default 1)")
    parser.add_argument("--preset", choices=("desk", "paper"), default=d(None),
                        help="model/training size preset")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pomo", description=__doc__.splitlines()[0])
    _common(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _common(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a random dataset")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--size", type=int, required=True, help="nodes (tsp), customers (cvrp) or items (kp)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--capacity", type=float, help="kp capacity override")
    p.add_argument("--demand-scale", type=float, help="cvrp demand divisor override")
    p.add_argument("--out", required=True, help="output path; .jsonl/.json selects the text format")

    p = sub.add_parser("train", parents=[common], help="train a policy from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="directory for checkpoints and train_log.csv")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--time-budget", type=float, help="stop after the epoch that crosses this many seconds")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--modes", default="single,multi,aug8",
                   help="comma-separated subset of single, multi, aug8, sample:K")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--label", help="method label prefix (default pomo or am)")
    p.add_argument("--dump-trajectories", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("solve", parents=[common], help="run exact solvers and heuristics on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--solvers", help="comma-separated solver names (default depends on the problem)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", parents=[common], help="merge result CSVs into a gap table")
    p.add_argument("results", nargs="*", help="results.csv files or eval/solve output directories")
    p.add_argument("--oracle", help="method to measure gaps against (default: an exact solver)")
    p.add_argument("--out", help="directory for report.txt, report.csv and report.png")
    p.add_argument("--no-figure", action="store_true")
    return parser


def _seed(args) -> int:
    return DEFAULT_SEED if args.seed is None else args.seed


def cmd_generate(args) -> int:
    overrides = {}
    if args.capacity is not None:
        overrides["capacity"] = args.capacity
    if args.demand_scale is not None:
        overrides["demand_scale"] = args.demand_scale
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    try:
        ds = make_dataset(args.kind, args.size, args.count, _seed(args), **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, args.out)
    log.info("wrote %d %s%d instances to %s", len(ds), args.kind, args.size, args.out)
    return 0


def cmd_train(args) -> int:
    from pomo.train import TrainConfig, train

    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.preset is not None:
        raw["preset"] = args.preset
    config = TrainConfig.from_dict(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.RunManifest(
        command="train",
        config=asdict(config),
        revision=bench.source_revision(),
        datasets={},
        checkpoint=str(out / "last.ckpt"),
        environment=bench.environment(args.threads),
        extra={"resume": args.resume},
    ).write(out)
    run = train(config, out, resume_from=args.resume, time_budget=args.time_budget)
    log.info("finished at epoch %d", run.next_epoch - 1)
    return 0


def _modes(text: str) -> list:
    modes = [m.strip() for m in text.split(",") if m.strip()]
    if not modes:
        raise ConfigError("--modes is empty")
    for m in modes:
        bench.parse_mode(m)
    return modes


def cmd_eval(args) -> int:
    from pomo.model import load_checkpoint

    modes = _modes(args.modes)
    policy, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset, expected_kind=policy.config.kind)
    rows = bench.run_eval(
        policy, ds, modes, args.out,
        seed=_seed(args), threads=args.threads, batch_size=args.batch_size, label=args.label,
        dataset_path=args.dataset, checkpoint=args.checkpoint, dump_trajectories=args.dump_trajectories,
    )
    sys.stdout.write(bench.format_table(rows))
    return 0


def cmd_solve(args) -> int:
    ds = load_dataset(args.dataset)
    solvers = [s.strip() for s in args.solvers.split(",") if s.strip()] if args.solvers else None
    rows = bench.run_solvers(ds, solvers, args.out, seed=_seed(args), threads=args.threads,
                             dataset_path=args.dataset)
    sys.stdout.write(bench.format_table(rows))
    return 0


def cmd_report(args) -> int:
    _, table = bench.run_report(args.results, args.out, oracle=args.oracle, figure=not args.no_figure)
    sys.stdout.write(table)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "solve": cmd_solve,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    bench.log_to_stderr(logging.DEBUG if args.verbose else logging.INFO)
    try:
        bench.set_threads(args.threads)
        return COMMANDS[args.command](args)
    except PomoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
