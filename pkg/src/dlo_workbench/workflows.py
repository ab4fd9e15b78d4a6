"""
End-to-end runs shared by the CLI and the MCP server.

Each workflow builds the scenario from the config, registers the run,
does the work, writes manifest.json and returns a plain summary dict.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

from . import registry, softbody
from .config import RUNS_DIR, WorkbenchConfig, config_hash
from .environment import read_trajectory, replay_trajectory
from .evalharness import (
    ExperimentRow,
    evaluate_policy,
    format_experiment_table,
    run_eval,
    write_episode_csv,
    write_experiment_table,
    write_report,
)
from .goaldb import generate_db, save_db
from .scenario import Scenario, build_scenario
from .trainer import run_training

logger = logging.getLogger(__name__)


def default_output_dir(command: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    return RUNS_DIR / f"{command}-{stamp}"


def scenario_for(cfg: WorkbenchConfig) -> Scenario:
    return build_scenario(cfg.material, cfg.scenario)


@contextmanager
def _registered(command: str, cfg: WorkbenchConfig, output_dir: Path, fingerprint: str):
    """Register the run; mark it failed if the body raises."""
    run = {"id": registry.record_run(command, cfg.seed, config_hash(cfg), output_dir, fingerprint),
           "artifacts": {}, "summary": {}}
    try:
        yield run
    except Exception as exc:
        registry.finish_run(run["id"], "failed", {"error": str(exc)})
        raise
    for kind, path in run["artifacts"].items():
        registry.add_artifact(run["id"], kind, path)
    manifest = registry.write_manifest(
        output_dir, command, cfg.seed, config_hash(cfg), run["artifacts"],
        {"run_id": run["id"], "fingerprint": fingerprint},
    )
    registry.add_artifact(run["id"], "manifest", manifest, "json")
    registry.finish_run(run["id"], "completed", run["summary"])
    run["summary"]["run_id"] = run["id"]
    run["summary"]["manifest"] = str(manifest)


def gen_db(cfg: WorkbenchConfig, output_dir: str | Path | None = None) -> dict:
    """Sweep the configured box and save `goals.db`."""
    out = Path(output_dir) if output_dir is not None else default_output_dir("gen-db")
    settings = cfg.goaldb
    scenario = scenario_for(cfg)
    box = scenario.box(settings.box)
    grid = settings.resolved_grid()
    with _registered("gen-db", cfg, out, scenario.fingerprint) as run:
        db = generate_db(scenario, box, grid, settings)
        path = save_db(db, out / "goals.db")
        run["artifacts"]["goal_database"] = path
        run["summary"].update({
            "box": settings.box,
            "grid": list(grid),
            "records": len(db),
            "skipped": db.skipped,
            "path": str(path),
            "fingerprint": db.fingerprint,
        })
    return run["summary"]


def train(cfg: WorkbenchConfig, output_dir: str | Path | None = None) -> dict:
    """
    Synchronized training; writes learning_curve.csv and agent.ckpt.

    Without train.db_path a small-box database is swept first (goaldb grid
    and settle settings apply) and saved next to the checkpoint.
    """
    out = Path(output_dir) if output_dir is not None else default_output_dir("train")
    tcfg = cfg.train_config()
    scenario = scenario_for(cfg)
    with _registered("train", cfg, out, scenario.fingerprint) as run:
        db = None
        if tcfg.db_path is None:
            settings = dataclasses.replace(cfg.goaldb, box="small")
            grid = settings.resolved_grid()
            logger.info("No goal database given; sweeping the small box on a %s grid", grid)
            db = generate_db(scenario, scenario.box("small"), grid, settings)
            db_path = save_db(db, out / "goals.db")
            run["artifacts"]["goal_database"] = db_path
            run["summary"]["db_path"] = str(db_path)
        result = run_training(tcfg, scenario, db, output_dir=out,
                              metadata={"config_hash": config_hash(cfg)})
        run["artifacts"]["checkpoint"] = result.checkpoint_path
        run["artifacts"]["learning_curve"] = result.curve_path
        last = result.stats[-1]
        run["summary"].update({
            "workers": tcfg.workers,
            "episodes": len(result.stats),
            "transitions": result.transitions,
            "final_mean_reward": last.mean_reward,
            "final_mean_distance": last.mean_final_distance,
            "checkpoint": str(result.checkpoint_path),
            "learning_curve": str(result.curve_path),
        })
    return run["summary"]


def evaluate(cfg: WorkbenchConfig, output_dir: str | Path | None = None) -> dict:
    """Testing protocol; writes episodes.csv, report.txt and summary.json."""
    out = Path(output_dir) if output_dir is not None else default_output_dir("eval")
    ecfg = cfg.eval_config()
    scenario = scenario_for(cfg)
    with _registered("eval", cfg, out, scenario.fingerprint) as run:
        report = run_eval(ecfg, scenario, out)
        run["artifacts"]["episodes"] = out / "episodes.csv"
        run["artifacts"]["report"] = out / "report.txt"
        if ecfg.trajectory:
            run["artifacts"]["trajectory"] = out / "trajectory.csv"
        run["summary"].update(report.summary())
        run["summary"]["table"] = report.format_table()
    return run["summary"]


def export_mesh(cfg: WorkbenchConfig, output_dir: str | Path | None = None) -> dict:
    """Dump the pristine (settled) bar as `mesh.txt`."""
    out = Path(output_dir) if output_dir is not None else default_output_dir("export-mesh")
    scenario = scenario_for(cfg)
    with _registered("export-mesh", cfg, out, scenario.fingerprint) as run:
        path = softbody.export_mesh(scenario.mesh, out / "mesh.txt")
        run["artifacts"]["mesh"] = path
        run["summary"].update({
            "path": str(path),
            "nodes": scenario.mesh.n_nodes,
            "tets": len(scenario.mesh.tets),
            "edges": len(scenario.mesh.edges),
        })
    return run["summary"]


def replay(
    cfg: WorkbenchConfig,
    trajectory: str | Path,
    output_dir: str | Path | None = None,
    box: str | None = None,
) -> dict:
    """
    Re-run a trajectory CSV and write node_positions.csv
    (episode, step, node, x, y, z for every mesh node at every control step).
    """
    trajectory = Path(trajectory)
    if not trajectory.is_file():
        raise FileNotFoundError(f"trajectory not found: {trajectory}")
    out = Path(output_dir) if output_dir is not None else default_output_dir("replay")
    scenario = scenario_for(cfg)
    rows = read_trajectory(trajectory)
    env = scenario.make_env(
        box=scenario.box(box or cfg.scenario.box),
        max_episode_steps=max(len(rows), 1),
        terminate_on_done=False,
    )
    with _registered("replay", cfg, out, scenario.fingerprint) as run:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "node_positions.csv"
        steps = 0
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["episode", "step", "node", "x", "y", "z"])
            for episode, step, positions in replay_trajectory(
                env, rows, reinitialize=cfg.scenario.reinitialize
            ):
                steps += 1
                for node, (x, y, z) in enumerate(positions):
                    writer.writerow([episode, step, node, repr(float(x)), repr(float(y)),
                                     repr(float(z))])
        run["artifacts"]["node_positions"] = path
        run["summary"].update({"steps": steps, "path": str(path), "source": str(trajectory)})
    return run["summary"]


def table(cfg: WorkbenchConfig, output_dir: str | Path | None = None) -> dict:
    """
    Sweep the experiment grid and aggregate every evaluation into one table.

    For each node count and box: a goal database, a trained agent and one
    evaluation per (threshold, reinitialize). Writes table.txt, table.csv and
    curves.csv (mean episode reward of every trained agent, side by side).
    """
    out = Path(output_dir) if output_dir is not None else default_output_dir("table")
    grid = cfg.experiment
    base = scenario_for(cfg)
    tcfg = dataclasses.replace(cfg.train_config(), db_path=None, resume_from=None)
    rows: list[ExperimentRow] = []
    curves: dict[str, list[float]] = {}
    with _registered("table", cfg, out, base.fingerprint) as run:
        for m in grid.node_counts:
            scenario = base.with_num_nodes(m)
            for box in grid.boxes:
                cell = out / f"m{m}-{box}"
                settings = dataclasses.replace(cfg.goaldb, box=box)
                db = generate_db(scenario, scenario.box(box), settings.resolved_grid(), settings)
                save_db(db, cell / "goals.db")
                result = run_training(tcfg, scenario, db, output_dir=cell / "train",
                                      metadata={"config_hash": config_hash(cfg)})
                curves[f"m{m}_{box}"] = [s.mean_reward for s in result.stats]
                for threshold in grid.thresholds:
                    for reinit in grid.reinitialize:
                        ecfg = dataclasses.replace(
                            cfg.eval_config(), threshold=threshold, reinitialize=reinit,
                            trajectory=False,
                        )
                        report = evaluate_policy(result.agents[0], scenario, db, ecfg)
                        mode = "reinit" if reinit else "chained"
                        eval_dir = cell / f"eval-{threshold:g}-{mode}"
                        eval_dir.mkdir(parents=True, exist_ok=True)
                        write_episode_csv(report, eval_dir / "episodes.csv")
                        write_report(report, eval_dir)
                        rows.append(ExperimentRow(m, box, report))
                logger.info("Finished grid cell m=%d box=%s", m, box)
        text, machine = write_experiment_table(rows, out)
        curve_path = _write_curves(curves, out / "curves.csv")
        run["artifacts"].update({"table": text, "table_csv": machine, "curves": curve_path})
        run["summary"].update({
            "cells": len(grid.node_counts) * len(grid.boxes),
            "evaluations": len(rows),
            "final_mean_reward": {name: values[-1] for name, values in curves.items()},
            "path": str(text),
            "table": format_experiment_table(rows),
        })
    return run["summary"]


def _write_curves(curves: dict[str, list[float]], path: Path) -> Path:
    names = list(curves)
    episodes = max(len(values) for values in curves.values())
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["episode", *names])
        for e in range(episodes):
            writer.writerow([e, *(repr(curves[n][e]) if e < len(curves[n]) else ""
                                  for n in names)])
    return path
