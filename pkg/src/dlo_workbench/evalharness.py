"""
Testing protocol: deterministic policy, goals drawn per episode, episodes
stopping at done or after max_steps. Reports done percentage, mean and
standard deviation of the final errors, and the best final error.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import DdpgAgent, load_agent, select_action
from .environment import BOX_PRESETS, ShapeEnv, TrajectoryRecorder
from .errors import ConfigError, DimensionMismatchError, SimulationDivergedError
from .goaldb import DeformationDb, load_db, sample_goals

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = "evalreport v1"
EPISODE_COLUMNS = ("episode", "goal_id", "steps_taken", "done", "final_error_m")
REPORT_HEADER = ("Threshold (m)", "Reinit", "Episodes", "Done (%)", "Mean error (m) +- sigma",
                 "Best (m)")


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str | None = None
    db_path: str | None = None
    episodes: int = 1000
    max_steps: int = 30
    threshold: float = 0.05
    reinitialize: bool = True
    seed: int = 0
    workers: int = 1
    trajectory: bool = False
    allow_fingerprint_mismatch: bool = False

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError(f"episodes must be >= 1, got {self.episodes}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if not self.threshold > 0:
            raise ConfigError(f"threshold must be > 0, got {self.threshold}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


@dataclass
class EpisodeOutcome:
    episode: int
    goal_id: int | None
    steps_taken: int
    done: bool
    final_error: float
    diverged: bool = False


@dataclass
class EvalReport:
    done_pct: float
    mean_error: float
    std_error: float
    best_error: float
    threshold: float
    reinitialize: bool
    seed: int
    outcomes: list[EpisodeOutcome] = field(default_factory=list)

    @classmethod
    def from_outcomes(cls, outcomes: list[EpisodeOutcome], cfg: EvalConfig) -> EvalReport:
        errors = np.array([o.final_error for o in outcomes])
        done = sum(1 for o in outcomes if o.done)
        return cls(
            done_pct=100.0 * done / len(outcomes),
            mean_error=float(np.mean(errors)),
            std_error=float(np.std(errors)),
            best_error=float(np.min(errors)),
            threshold=cfg.threshold,
            reinitialize=cfg.reinitialize,
            seed=cfg.seed,
            outcomes=outcomes,
        )

    @property
    def diverged(self) -> int:
        return sum(1 for o in self.outcomes if o.diverged)

    def summary(self) -> dict:
        return {
            "format": REPORT_FORMAT_VERSION,
            "episodes": len(self.outcomes),
            "threshold": self.threshold,
            "reinitialize": self.reinitialize,
            "seed": self.seed,
            "done_pct": self.done_pct,
            "mean_error": self.mean_error,
            "std_error": self.std_error,
            "best_error": self.best_error,
            "diverged": self.diverged,
        }

    def table_cells(self) -> tuple[str, ...]:
        return (
            f"{self.threshold:g}",
            "yes" if self.reinitialize else "no",
            str(len(self.outcomes)),
            f"{self.done_pct:.2f}",
            f"{self.mean_error:.5f} +- {self.std_error:.5f}",
            f"{self.best_error:.5f}",
        )

    def format_table(self) -> str:
        return _render_table(REPORT_HEADER, [self.table_cells()])


def _render_table(header, rows) -> str:
    widths = [max(len(cell) for cell in column) for column in zip(header, *rows)]
    lines = [
        " | ".join(h.ljust(w) for h, w in zip(header, widths)),
        "-+-".join("-" * w for w in widths),
    ]
    lines += [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


# ============================================================
# Experiment grid
# ============================================================

EXPERIMENT_COLUMNS = (
    "num_nodes", "box", "threshold_m", "reinitialize", "episodes", "done_pct", "mean_error_m",
    "std_error_m", "best_error_m", "diverged",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Grid swept by the table workflow: one database and one trained agent per
    (node count, box), one evaluation per (threshold, reinitialize) on top.
    """

    node_counts: tuple[int, ...] = (2, 4, 6)
    boxes: tuple[str, ...] = ("small", "large")
    thresholds: tuple[float, ...] = (0.05, 0.03)
    reinitialize: tuple[bool, ...] = (True, False)

    def __post_init__(self):
        for name in ("node_counts", "boxes", "thresholds", "reinitialize"):
            if not getattr(self, name):
                raise ConfigError(f"experiment {name} must not be empty")
        if min(self.node_counts) < 1:
            raise ConfigError(f"node counts must be >= 1, got {self.node_counts}")
        unknown = sorted(set(self.boxes) - set(BOX_PRESETS))
        if unknown:
            raise ConfigError(f"unknown box presets {unknown}; choose from {sorted(BOX_PRESETS)}")
        if min(self.thresholds) <= 0:
            raise ConfigError(f"thresholds must be > 0, got {self.thresholds}")


@dataclass
class ExperimentRow:
    num_nodes: int
    box: str
    report: EvalReport

    def as_record(self) -> dict:
        summary = self.report.summary()
        return {
            "num_nodes": self.num_nodes,
            "box": self.box,
            "threshold_m": summary["threshold"],
            "reinitialize": summary["reinitialize"],
            "episodes": summary["episodes"],
            "done_pct": summary["done_pct"],
            "mean_error_m": summary["mean_error"],
            "std_error_m": summary["std_error"],
            "best_error_m": summary["best_error"],
            "diverged": summary["diverged"],
        }


def format_experiment_table(rows: list[ExperimentRow]) -> str:
    """One line per evaluation, grouped the way the rows were produced."""
    header = ("m", "Box") + REPORT_HEADER
    cells = [(str(r.num_nodes), r.box) + r.report.table_cells() for r in rows]
    return _render_table(header, cells)


def write_experiment_table(rows: list[ExperimentRow], output_dir: str | Path) -> tuple[Path, Path]:
    """table.txt for reading, table.csv with full-precision values."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = out / "table.txt"
    text.write_text(f"{REPORT_FORMAT_VERSION}\n{format_experiment_table(rows)}\n")
    machine = out / "table.csv"
    with open(machine, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=EXPERIMENT_COLUMNS)
        writer.writeheader()
        for row in rows:
            record = row.as_record()
            record["reinitialize"] = int(record["reinitialize"])
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in record.items()})
    return text, machine


# ============================================================
# Episodes
# ============================================================

def _run_episode(
    agent: DdpgAgent, env: ShapeEnv, db: DeformationDb, cfg: EvalConfig, k: int,
    recorder: TrajectoryRecorder | None = None,
) -> EpisodeOutcome:
    goal = sample_goals(db, 1, [cfg.seed, k], without_replacement=False)[0]
    observation = env.reset(goal, reinitialize=cfg.reinitialize)
    final_error = env.mean_distance()
    steps = 0
    done = False
    try:
        while not env.finished:
            action = select_action(agent, observation.as_vector(), explore=False)
            result = env.step(action)
            steps += 1
            observation = result.observation
            final_error = result.info["mean_distance"]
            done = result.done
            if recorder is not None:
                recorder.record(k, steps, action, result)
    except SimulationDivergedError as exc:
        logger.warning("Episode %d diverged at node %d; counted as not done", k, exc.node_index)
        env.restore_pristine()
        return EpisodeOutcome(k, goal.id, steps, False, final_error, diverged=True)
    return EpisodeOutcome(k, goal.id, steps, bool(done), float(final_error))


def evaluate_policy(
    agent: DdpgAgent,
    scenario,
    db: DeformationDb,
    cfg: EvalConfig,
    trajectory_path: str | Path | None = None,
) -> EvalReport:
    """
    Run the protocol for an in-memory agent.

    Episode k draws its goal from default_rng([seed, k]), so reinitializing
    runs give the same report for any worker count. Without reinitialization
    episodes chain and always run in order on one environment.
    """
    if agent.state_dim != scenario.env_config.observation_dim:
        raise DimensionMismatchError(
            f"agent expects state dim {agent.state_dim}, scenario produces"
            f" {scenario.env_config.observation_dim}"
        )

    def make_env() -> ShapeEnv:
        return scenario.make_env(
            box=db.box,
            distance_threshold=cfg.threshold,
            max_episode_steps=cfg.max_steps,
            reinitialize=cfg.reinitialize,
            terminate_on_done=True,
        )

    workers = cfg.workers if cfg.reinitialize and trajectory_path is None else 1
    if workers == 1:
        env = make_env()
        recorder = (
            TrajectoryRecorder(trajectory_path, scenario.env_config.num_nodes)
            if trajectory_path is not None else None
        )
        try:
            outcomes = [_run_episode(agent, env, db, cfg, k, recorder) for k in range(cfg.episodes)]
        finally:
            if recorder is not None:
                recorder.close()
    else:
        shards = np.array_split(np.arange(cfg.episodes), workers)

        def run_shard(episodes) -> list[EpisodeOutcome]:
            env = make_env()
            return [_run_episode(agent, env, db, cfg, int(k)) for k in episodes]

        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = [o for part in pool.map(run_shard, shards) for o in part]

    report = EvalReport.from_outcomes(outcomes, cfg)
    logger.info(
        "Evaluation: %d episodes, done %.2f%%, mean error %.5f +- %.5f m, best %.5f m",
        len(outcomes), report.done_pct, report.mean_error, report.std_error, report.best_error,
    )
    return report


def run_eval(cfg: EvalConfig, scenario, output_dir: str | Path | None = None) -> EvalReport:
    """
    Load checkpoint and database, check both against the scenario, evaluate,
    and write the per-episode CSV and the report into `output_dir`.
    """
    if cfg.checkpoint is None or cfg.db_path is None:
        raise ConfigError("evaluation needs both a checkpoint and a goal database")
    strict = not cfg.allow_fingerprint_mismatch
    db = load_db(cfg.db_path, scenario.fingerprint, strict=strict)
    agent, _ = load_agent(
        cfg.checkpoint, scenario.fingerprint, allow_mismatch=cfg.allow_fingerprint_mismatch
    )
    out = Path(output_dir) if output_dir is not None else None
    trajectory = out / "trajectory.csv" if out is not None and cfg.trajectory else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = evaluate_policy(agent, scenario, db, cfg, trajectory)
    if out is not None:
        write_episode_csv(report, out / "episodes.csv")
        write_report(report, out)
    return report


# ============================================================
# Output files
# ============================================================

def write_episode_csv(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(EPISODE_COLUMNS)
        for o in report.outcomes:
            goal_id = "" if o.goal_id is None else o.goal_id
            writer.writerow([o.episode, goal_id, o.steps_taken, int(o.done), repr(o.final_error)])
    return path


def read_episode_csv(path: str | Path) -> list[EpisodeOutcome]:
    with open(path, newline="") as handle:
        return [
            EpisodeOutcome(
                episode=int(row["episode"]),
                goal_id=int(row["goal_id"]) if row["goal_id"] else None,
                steps_taken=int(row["steps_taken"]),
                done=row["done"] == "1",
                final_error=float(row["final_error_m"]),
            )
            for row in csv.DictReader(handle)
        ]


def write_report(report: EvalReport, output_dir: str | Path) -> tuple[Path, Path]:
    """Human-readable table in report.txt, machine-readable summary in summary.json."""
    out = Path(output_dir)
    summary = report.summary()
    text = out / "report.txt"
    text.write_text(
        f"{REPORT_FORMAT_VERSION}\n{report.format_table()}\n\nsummary {json.dumps(summary)}\n"
    )
    machine = out / "summary.json"
    machine.write_text(json.dumps(summary, indent=2) + "\n")
    return text, machine
