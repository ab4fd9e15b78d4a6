"""
Command line: gen-db, train, eval, table, export-mesh, replay.

Every flag is a shortcut for a config key; `--set section.key=value`
reaches the rest. Summaries go to stdout as JSON, logs to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__, workflows
from .config import apply_overrides, load_config
from .errors import WorkbenchError

logger = logging.getLogger(__name__)

# flag dest -> config key
_FLAG_KEYS = {
    "gen-db": {
        "box": "goaldb.box",
        "grid": "goaldb.grid",
        "workers": "goaldb.workers",
    },
    "train": {
        "workers": "train.workers",
        "episodes": "train.episodes",
        "steps": "train.steps_per_episode",
        "db": "train.db_path",
        "resume": "train.resume_from",
        "reduction": "train.reduction",
        "checkpoint_every": "train.checkpoint_every",
    },
    "eval": {
        "checkpoint": "evaluation.checkpoint",
        "db": "evaluation.db_path",
        "episodes": "evaluation.episodes",
        "max_steps": "evaluation.max_steps",
        "threshold": "evaluation.threshold",
        "reinit": "evaluation.reinitialize",
        "workers": "evaluation.workers",
        "trajectory": "evaluation.trajectory",
        "allow_fingerprint_mismatch": "evaluation.allow_fingerprint_mismatch",
    },
    "table": {
        "nodes": "experiment.node_counts",
        "boxes": "experiment.boxes",
        "thresholds": "experiment.thresholds",
        "grid": "goaldb.grid",
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlo-workbench",
        description="Shape control of a soft bar with synchronized DDPG.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. agent.gamma=0.98")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-db", help="generate a goal database")
    gen.add_argument("--box", choices=["small", "large"])
    gen.add_argument("--grid", help="lattice counts NX,NY,NZ")
    gen.add_argument("--workers", type=int)
    gen.add_argument("--out", help="output directory")

    tr = sub.add_parser("train", help="synchronized training")
    tr.add_argument("--workers", type=int)
    tr.add_argument("--episodes", type=int)
    tr.add_argument("--steps", type=int, help="transitions per episode")
    tr.add_argument("--db", help="goal database file (default: sweep the small box first)")
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--reduction", choices=["sum", "mean"])
    tr.add_argument("--checkpoint-every", type=int)
    tr.add_argument("--out", help="output directory")

    ev = sub.add_parser("eval", help="testing protocol")
    ev.add_argument("--checkpoint")
    ev.add_argument("--db", help="goal database file")
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--max-steps", type=int)
    ev.add_argument("--threshold", type=float)
    ev.add_argument("--reinit", action=argparse.BooleanOptionalAction, default=None,
                    help="reset the bar between episodes (--no-reinit chains them)")
    ev.add_argument("--workers", type=int)
    ev.add_argument("--trajectory", action="store_true", default=None,
                    help="also write trajectory.csv")
    ev.add_argument("--allow-fingerprint-mismatch", action="store_true", default=None)
    ev.add_argument("--out", help="output directory")

    tb = sub.add_parser("table", help="train and evaluate over the experiment grid")
    tb.add_argument("--nodes", help="selected-node counts, e.g. 2,4,6")
    tb.add_argument("--boxes", help="box presets, e.g. small,large")
    tb.add_argument("--thresholds", help="done thresholds in m, e.g. 0.05,0.03")
    tb.add_argument("--grid", help="lattice counts NX,NY,NZ for every database")
    tb.add_argument("--out", help="output directory")

    ex = sub.add_parser("export-mesh", help="dump the rest-state mesh")
    ex.add_argument("--out", help="output directory")

    rp = sub.add_parser("replay", help="re-run a trajectory CSV")
    rp.add_argument("trajectory", help="trajectory CSV written by eval --trajectory")
    rp.add_argument("--box", choices=["small", "large"])
    rp.add_argument("--out", help="output directory")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    for dest, key in _FLAG_KEYS.get(args.command, {}).items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = str(value).lower() if isinstance(value, bool) else str(value)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = apply_overrides(load_config(args.config), _overrides(args))
        if args.command == "gen-db":
            summary = workflows.gen_db(cfg, args.out)
        elif args.command == "train":
            summary = workflows.train(cfg, args.out)
        elif args.command == "eval":
            summary = workflows.evaluate(cfg, args.out)
        elif args.command == "table":
            summary = workflows.table(cfg, args.out)
        elif args.command == "export-mesh":
            summary = workflows.export_mesh(cfg, args.out)
        else:
            summary = workflows.replay(cfg, args.trajectory, args.out, args.box)
    except (WorkbenchError, FileNotFoundError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 1
    table = summary.pop("table", None)
    if table:
        print(table)
    print(json.dumps(summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
