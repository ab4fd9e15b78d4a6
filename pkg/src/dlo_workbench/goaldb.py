"""
Deformation-goal databases.

A database is produced by sweeping the gripper tip over a regular lattice in
a workspace box: for every lattice point the bar is reset, the tip is driven
to the point, the bar settles, and the selected-node positions become one
goal record.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .environment import ShapeEnv, WorkspaceBox, move_tip, settle_env
from .errors import (
    ConfigError,
    DatabaseFormatError,
    EpisodeProtocolError,
    FingerprintMismatchError,
    SimulationDivergedError,
)

logger = logging.getLogger(__name__)

GOALDB_FORMAT_VERSION = "goaldb v1"
GRID_PRESETS = {"small": (6, 31, 5), "large": (6, 26, 17)}


@dataclass(eq=False)
class GoalRecord:
    id: int
    tip_pos: np.ndarray
    targets: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, GoalRecord):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.tip_pos, other.tip_pos)
            and np.array_equal(self.targets, other.targets)
        )


@dataclass(eq=False)
class DeformationDb:
    box: WorkspaceBox
    selected_node_ids: tuple[int, ...]
    fingerprint: str
    records: list[GoalRecord] = field(default_factory=list)
    skipped: int = 0

    @property
    def num_nodes(self) -> int:
        return len(self.selected_node_ids)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DeformationDb):
            return NotImplemented
        return (
            self.box == other.box
            and self.selected_node_ids == other.selected_node_ids
            and self.fingerprint == other.fingerprint
            and self.records == other.records
        )


@dataclass(frozen=True)
class GoalDbSettings:
    """Sweep settings; `grid` None means the preset matching `box`."""

    box: str = "small"
    grid: tuple[int, int, int] | None = None
    settle_max_steps: int = 5000
    settle_vel_tol: float = 1e-6
    move_max_steps: int = 1000
    workers: int = 1

    def resolved_grid(self) -> tuple[int, int, int]:
        if self.grid is not None:
            return tuple(int(g) for g in self.grid)
        if self.box not in GRID_PRESETS:
            raise ConfigError(f"no grid preset for box {self.box!r}")
        return GRID_PRESETS[self.box]


# ============================================================
# Generation
# ============================================================

def lattice_points(box: WorkspaceBox, grid) -> list[np.ndarray]:
    """
    Regular lattice over the closed box, in boustrophedon order.

    An axis with count 1 uses the box centre on that axis.
    """
    counts = tuple(int(g) for g in grid)
    if len(counts) != 3 or min(counts) < 1:
        raise ConfigError(f"grid needs 3 counts >= 1, got {grid}")
    lower, upper, center = box.lower, box.upper, np.array(box.center)
    axes = [
        np.array([center[a]]) if counts[a] == 1 else np.linspace(lower[a], upper[a], counts[a])
        for a in range(3)
    ]
    points = []
    row = 0
    for iz, z in enumerate(axes[2]):
        ys = axes[1] if iz % 2 == 0 else axes[1][::-1]
        for y in ys:
            xs = axes[0] if row % 2 == 0 else axes[0][::-1]
            points.extend(np.array([x, y, z]) for x in xs)
            row += 1
    return points


def _sweep(env: ShapeEnv, points, settings: GoalDbSettings, offset: int):
    """Records (tip, targets) or None per point for one shard."""
    results = []
    for k, point in enumerate(points):
        env.restore_pristine()
        try:
            move_tip(env, point, settings.move_max_steps)
            settled = settle_env(env, settings.settle_max_steps, settings.settle_vel_tol)
        except SimulationDivergedError as exc:
            logger.warning(
                "Skipping lattice point %d: simulation diverged at node %d",
                offset + k, exc.node_index,
            )
            results.append(None)
            continue
        except EpisodeProtocolError as exc:
            logger.warning("Skipping lattice point %d: %s", offset + k, exc)
            results.append(None)
            continue
        if not settled.converged:
            logger.info(
                "Skipping lattice point %d: not settled after %d steps (max speed %.3e)",
                offset + k, settled.steps, settled.max_speed,
            )
            results.append(None)
            continue
        results.append((env.tip.position.copy(), env.selected_positions()))
    return results


def generate_db(
    scenario, box: WorkspaceBox, grid, settings: GoalDbSettings | None = None
) -> DeformationDb:
    """
    Sweep the lattice and record settled deformations.

    Args:
        scenario: Pristine scenario (see scenario.build_scenario)
        box: Box the lattice spans; the tip is confined to it
        grid: Per-axis lattice counts (nx, ny, nz)
        settings: Settling limits and worker count

    Returns:
        Database with records in lattice order; unsettled points are counted
        in `skipped`
    """
    settings = settings or GoalDbSettings()
    points = lattice_points(box, grid)
    workers = max(1, min(settings.workers, len(points)))
    shards = np.array_split(np.arange(len(points)), workers)
    envs = [scenario.make_env(box=box) for _ in shards]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_sweep, env, [points[i] for i in shard], settings,
                        int(shard[0]) if len(shard) else 0)
            for env, shard in zip(envs, shards)
        ]
        outcomes = [item for future in futures for item in future.result()]

    records = []
    skipped = 0
    for outcome in outcomes:
        if outcome is None:
            skipped += 1
            continue
        tip_pos, targets = outcome
        records.append(GoalRecord(len(records), tip_pos, targets))
    db = DeformationDb(
        box=box,
        selected_node_ids=scenario.env_config.selected_node_ids,
        fingerprint=scenario.fingerprint,
        records=records,
        skipped=skipped,
    )
    logger.info(
        "Generated %d goal records from %d lattice points (%d skipped)",
        len(records), len(points), skipped,
    )
    return db


# ============================================================
# Storage
# ============================================================

def save_db(db: DeformationDb, path: str | Path) -> Path:
    """Write the `goaldb v1` text format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    box = " ".join(repr(float(v)) for v in (*db.box.center, *db.box.extents))
    nodes = ",".join(str(i) for i in db.selected_node_ids)
    lines = [
        f"{GOALDB_FORMAT_VERSION} m={db.num_nodes} box={box} fingerprint={db.fingerprint}"
        f" count={len(db.records)} nodes={nodes}"
    ]
    for record in db.records:
        values = " ".join(repr(float(v)) for v in (*record.tip_pos, *record.targets))
        lines.append(f"{record.id} {values}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_header(line: str) -> dict:
    tokens = line.split()
    if tokens[:2] != GOALDB_FORMAT_VERSION.split():
        raise DatabaseFormatError(f"unsupported goal database header {line[:40]!r}")
    header = {}
    i = 2
    while i < len(tokens):
        key, sep, value = tokens[i].partition("=")
        if not sep:
            raise DatabaseFormatError(f"malformed header token {tokens[i]!r}")
        if key == "box":
            header["box"] = [float(value)] + [float(t) for t in tokens[i + 1: i + 6]]
            i += 6
            continue
        header[key] = value
        i += 1
    for key in ("m", "box", "fingerprint", "count", "nodes"):
        if key not in header:
            raise DatabaseFormatError(f"goal database header lacks {key!r}")
    return header


def load_db(
    path: str | Path, expected_fingerprint: str | None = None, strict: bool = True
) -> DeformationDb:
    """
    Read a database, verifying its fingerprint against the current scenario.

    With strict=False a fingerprint mismatch is logged instead of raised.
    """
    path = Path(path)
    if not path.exists():
        raise DatabaseFormatError(f"goal database not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise DatabaseFormatError(f"empty goal database: {path}")
    try:
        header = _parse_header(lines[0])
        m = int(header["m"])
        count = int(header["count"])
        box_values = header["box"]
        box = WorkspaceBox(tuple(box_values[:3]), tuple(box_values[3:]))
        nodes = tuple(int(i) for i in header["nodes"].split(",") if i)
    except (ValueError, ConfigError) as exc:
        raise DatabaseFormatError(f"bad goal database header in {path}: {exc}") from exc
    if len(nodes) != m:
        raise DatabaseFormatError(f"header m={m} disagrees with {len(nodes)} node ids")

    body = [line for line in lines[1:] if line.strip()]
    if len(body) != count:
        raise DatabaseFormatError(f"header count={count} but {len(body)} records in {path}")
    records = []
    for line in body:
        parts = line.split()
        if len(parts) != 4 + 3 * m:
            raise DatabaseFormatError(f"record has {len(parts)} fields, expected {4 + 3 * m}")
        try:
            values = np.array([float(v) for v in parts[1:]])
            records.append(GoalRecord(int(parts[0]), values[:3], values[3:]))
        except ValueError as exc:
            raise DatabaseFormatError(f"bad record in {path}: {exc}") from exc

    db = DeformationDb(box, nodes, header["fingerprint"], records)
    if expected_fingerprint is not None and db.fingerprint != expected_fingerprint:
        message = (
            f"goal database {path} was generated for scenario {db.fingerprint}"
            f" (nodes {list(nodes)}), current scenario is {expected_fingerprint}"
        )
        if strict:
            raise FingerprintMismatchError(message)
        logger.warning("%s (continuing, strict=False)", message)
    return db


# ============================================================
# Sampling
# ============================================================

def sample_goals(
    db: DeformationDb, k: int, seed, without_replacement: bool = True
) -> list[GoalRecord]:
    """Uniform seeded draw of k records."""
    if len(db.records) == 0:
        raise ValueError("cannot sample from an empty goal database")
    if k < 0 or (without_replacement and k > len(db.records)):
        raise ValueError(f"cannot draw {k} distinct goals from {len(db.records)} records")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(len(db.records), size=k, replace=not without_replacement)
    return [db.records[int(i)] for i in idx]
