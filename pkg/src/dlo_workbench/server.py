"""
DLO Shape Workbench MCP Server

Provides tools for driving the workbench from an MCP client:
- Generate goal databases
- Train and evaluate agents
- Export the rest-state mesh
- Inspect the scenario and past runs
"""

import os

from mcp.server.fastmcp import FastMCP

from . import registry, workflows
from .config import apply_overrides, dump_config, load_config
from .errors import WorkbenchError

# Configuration
CONFIG_PATH = os.environ.get("DLO_WORKBENCH_CONFIG")

# Initialize MCP server
mcp = FastMCP("DLO Shape Workbench")


def _config(overrides: dict = None):
    """Config file (if any) plus per-call overrides; None values are skipped."""
    cleaned = {k: str(v) for k, v in (overrides or {}).items() if v is not None}
    return apply_overrides(load_config(CONFIG_PATH), cleaned)


def _format_summary(title: str, summary: dict) -> str:
    result = f"**{title}**\n\n"
    for key, value in summary.items():
        if key == "table":
            continue
        result += f"• {key.replace('_', ' ')}: {value}\n"
    return result


# ============================================================
# TOOLS
# ============================================================

@mcp.tool()
def generate_goal_database(
    box: str = "small",
    grid: str = None,
    workers: int = None,
    output_dir: str = None,
) -> str:
    """
    Sweep the gripper tip over a workspace box and record settled deformations.

    Args:
        box: Box preset (small: 0.15 x 0.5 x 0.25 m, large: 0.2 x 0.8 x 0.3 m)
        grid: Optional lattice counts "NX,NY,NZ" (default: preset for the box)
        workers: Parallel sweep workers
        output_dir: Directory for goals.db and manifest.json

    Returns:
        Record count, skipped points and the database path
    """
    if box not in ("small", "large"):
        return f"Error: Unknown box '{box}'. Use 'small' or 'large'."
    try:
        cfg = _config({"goaldb.box": box, "goaldb.grid": grid, "goaldb.workers": workers})
        summary = workflows.gen_db(cfg, output_dir)
    except (WorkbenchError, FileNotFoundError, ValueError) as e:
        return f"Error: {e}"
    return _format_summary("Goal database generated", summary)


@mcp.tool()
def train_agent(
    db_path: str,
    episodes: int = None,
    workers: int = None,
    steps_per_episode: int = None,
    seed: int = None,
    output_dir: str = None,
) -> str:
    """
    Run synchronized training against a goal database.

    Args:
        db_path: Goal database written by generate_goal_database
        episodes: Number of synchronized episodes
        workers: Number of agent replicas
        steps_per_episode: Transitions per episode
        seed: Global seed
        output_dir: Directory for the learning curve, checkpoints and manifest

    Returns:
        Final episode statistics and the checkpoint path
    """
    if not os.path.isfile(db_path):
        return f"Error: Goal database not found: {db_path}"
    try:
        cfg = _config({
            "train.db_path": db_path,
            "train.episodes": episodes,
            "train.workers": workers,
            "train.steps_per_episode": steps_per_episode,
            "seed": seed,
        })
        summary = workflows.train(cfg, output_dir)
    except (WorkbenchError, FileNotFoundError, ValueError) as e:
        return f"Error: {e}"
    return _format_summary("Training finished", summary)


@mcp.tool()
def evaluate_agent(
    checkpoint: str,
    db_path: str,
    episodes: int = None,
    threshold: float = None,
    reinitialize: bool = True,
    seed: int = None,
    output_dir: str = None,
) -> str:
    """
    Run the testing protocol for a trained agent.

    Args:
        checkpoint: Agent checkpoint (agent.ckpt)
        db_path: Goal database to draw test goals from
        episodes: Number of test episodes (default 1000)
        threshold: Done threshold on the mean node distance in m (0.05 or 0.03)
        reinitialize: Reset the bar between episodes
        seed: Goal draw seed
        output_dir: Directory for episodes.csv, report.txt and summary.json

    Returns:
        Done percentage, mean error +- sigma and best error
    """
    for path, what in ((checkpoint, "Checkpoint"), (db_path, "Goal database")):
        if not os.path.isfile(path):
            return f"Error: {what} not found: {path}"
    try:
        cfg = _config({
            "evaluation.checkpoint": checkpoint,
            "evaluation.db_path": db_path,
            "evaluation.episodes": episodes,
            "evaluation.threshold": threshold,
            "evaluation.reinitialize": str(bool(reinitialize)).lower(),
            "seed": seed,
        })
        summary = workflows.evaluate(cfg, output_dir)
    except (WorkbenchError, FileNotFoundError, ValueError) as e:
        return f"Error: {e}"
    return f"{summary['table']}\n\n" + _format_summary("Evaluation finished", summary)


@mcp.tool()
def export_mesh(output_dir: str = None) -> str:
    """
    Write the rest-state mesh dump (tetmesh v1) for offline plotting.

    Args:
        output_dir: Directory for mesh.txt and manifest.json

    Returns:
        Mesh counts and the file path
    """
    try:
        summary = workflows.export_mesh(_config(), output_dir)
    except (WorkbenchError, ValueError) as e:
        return f"Error: {e}"
    return _format_summary("Mesh exported", summary)


@mcp.tool()
def describe_scenario() -> str:
    """
    Describe the configured bar, selected nodes, workspace box and fingerprint.

    Returns:
        Scenario overview
    """
    try:
        scenario = workflows.scenario_for(_config())
    except (WorkbenchError, ValueError) as e:
        return f"Error: {e}"
    mesh = scenario.mesh
    env = scenario.env_config
    box = env.box
    settings = scenario.settings
    result = "**Scenario**\n\n"
    result += (
        f"• Bar: {settings.length} m x {settings.cross_section[0]} m x"
        f" {settings.cross_section[1]} m, cells {settings.cells}, {settings.split} split\n"
    )
    result += f"• Mesh: {mesh.n_nodes} nodes, {len(mesh.tets)} tets, {len(mesh.edges)} edges\n"
    result += f"• Pinned / grasped nodes: {len(mesh.pinned)} / {len(mesh.grasped)}\n"
    result += f"• Selected nodes: {list(env.selected_node_ids)}\n"
    result += f"• Tip rest position: {[round(float(v), 6) for v in scenario.tip.position]}\n"
    result += f"• Box ({settings.box}): center {box.center}, extents {box.extents}\n"
    result += f"• Control step: {env.control_dt} s ({env.substeps} substeps)\n"
    result += f"• Fingerprint: {scenario.fingerprint}\n"
    return result


@mcp.tool()
def list_runs(command: str = None, limit: int = 20) -> str:
    """
    List recent workbench runs.

    Args:
        command: Optional filter (gen-db, train, eval, table, export-mesh, replay)
        limit: Maximum number of runs

    Returns:
        One line per run, newest first
    """
    runs = registry.list_runs(command, limit)
    if not runs:
        return "No runs recorded yet."
    result = "**Runs**\n\n"
    for run in runs:
        result += (
            f"• #{run['id']} {run['command']} [{run['status']}] seed={run['seed']}"
            f" started {run['started_at']} → {run['output_dir']}\n"
        )
    return result


@mcp.tool()
def get_run(run_id: int) -> str:
    """
    Show one run with its summary and artifacts.

    Args:
        run_id: Run id from list_runs

    Returns:
        Run details or error if not found
    """
    run = registry.get_run(run_id)
    if not run:
        return f"No run found with id: {run_id}"
    result = f"**Run #{run['id']}: {run['command']}**\n\n"
    result += f"Status: {run['status']}\n"
    result += f"Seed: {run['seed']}\n"
    result += f"Config hash: {run['config_hash']}\n"
    result += f"Fingerprint: {run['fingerprint']}\n"
    result += f"Started: {run['started_at']}\n"
    result += f"Finished: {run['finished_at'] or '-'}\n"
    if run["summary"]:
        result += "\nSummary:\n"
        for key, value in run["summary"].items():
            result += f"• {key}: {value}\n"
    if run["artifacts"]:
        result += "\nArtifacts:\n"
        for artifact in run["artifacts"]:
            result += f"• {artifact['kind']} ({artifact['format'] or '-'}): {artifact['path']}\n"
    return result


# ============================================================
# RESOURCES
# ============================================================

@mcp.resource("workbench://config")
def config_resource() -> str:
    """Effective configuration in key = value form."""
    try:
        return dump_config(load_config(CONFIG_PATH))
    except WorkbenchError as e:
        return f"Error: {e}"


@mcp.resource("workbench://runs")
def runs_resource() -> str:
    """Recent runs."""
    return list_runs()


# ============================================================
# MAIN
# ============================================================

def main():
    """Run the MCP server."""
    mcp.run()


if __name__ == "__main__":
    main()
