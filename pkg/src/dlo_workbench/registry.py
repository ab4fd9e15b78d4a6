"""
Run registry.
SQLite index of every gen-db / train / eval / table / export-mesh / replay run and
the artifacts it produced, plus the manifest.json written next to them.
"""

import json
import logging
import sqlite3
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

logger = logging.getLogger(__name__)

REGISTRY_PATH = Path(__file__).parent.parent.parent / "data" / "runs.db"

ARTIFACT_VERSIONS = {
    "mesh": "tetmesh v1",
    "network": "mlp v1",
    "goal_database": "goaldb v1",
    "checkpoint": "agentckpt v1",
}


def get_connection():
    """Get registry connection."""
    REGISTRY_PATH.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(REGISTRY_PATH)
    conn.row_factory = sqlite3.Row
    return conn


def init_database():
    """Create the registry tables if missing."""
    conn = get_connection()
    cursor = conn.cursor()
    cursor.executescript("""
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            command TEXT NOT NULL,  -- gen-db, train, eval, table, export-mesh, replay
            seed INTEGER,
            config_hash TEXT,
            fingerprint TEXT,
            output_dir TEXT,
            status TEXT DEFAULT 'running',  -- running, completed, failed
            summary TEXT,  -- JSON object
            started_at TEXT NOT NULL,
            finished_at TEXT
        );

        CREATE TABLE IF NOT EXISTS artifacts (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id INTEGER NOT NULL,
            kind TEXT NOT NULL,
            path TEXT NOT NULL,
            format TEXT,
            FOREIGN KEY (run_id) REFERENCES runs(id)
        );
    """)
    conn.commit()
    conn.close()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def record_run(command: str, seed: int, config_hash: str, output_dir=None,
               fingerprint: str = None):
    """Register a started run and return its id."""
    init_database()
    conn = get_connection()
    cursor = conn.cursor()
    cursor.execute("""
        INSERT INTO runs (command, seed, config_hash, fingerprint, output_dir, started_at)
        VALUES (?, ?, ?, ?, ?, ?)
    """, (command, seed, config_hash, fingerprint,
          str(output_dir) if output_dir is not None else None, _now()))
    run_id = cursor.lastrowid
    conn.commit()
    conn.close()
    return run_id


def add_artifact(run_id: int, kind: str, path, format: str = None):
    """Attach an output file to a run."""
    conn = get_connection()
    cursor = conn.cursor()
    cursor.execute("""
        INSERT INTO artifacts (run_id, kind, path, format) VALUES (?, ?, ?, ?)
    """, (run_id, kind, str(path), format or ARTIFACT_VERSIONS.get(kind)))
    conn.commit()
    conn.close()


def finish_run(run_id: int, status: str = "completed", summary: dict = None):
    """Mark a run completed or failed. Returns False for an unknown id."""
    conn = get_connection()
    cursor = conn.cursor()
    cursor.execute("""
        UPDATE runs SET status = ?, summary = ?, finished_at = ? WHERE id = ?
    """, (status, json.dumps(summary or {}, sort_keys=True), _now(), run_id))
    affected = cursor.rowcount
    conn.commit()
    conn.close()
    return affected > 0


def _run_dict(row, artifacts=None):
    run = dict(row)
    run["summary"] = json.loads(run["summary"]) if run["summary"] else {}
    if artifacts is not None:
        run["artifacts"] = [dict(a) for a in artifacts]
    return run


def get_run(run_id: int):
    """Look up a run with its artifacts."""
    init_database()
    conn = get_connection()
    cursor = conn.cursor()
    cursor.execute("SELECT * FROM runs WHERE id = ?", (run_id,))
    row = cursor.fetchone()
    if not row:
        conn.close()
        return None
    cursor.execute(
        "SELECT kind, path, format FROM artifacts WHERE run_id = ? ORDER BY id", (run_id,)
    )
    artifacts = cursor.fetchall()
    conn.close()
    return _run_dict(row, artifacts)


def list_runs(command: str = None, limit: int = 20):
    """Most recent runs first, optionally filtered by command."""
    init_database()
    conn = get_connection()
    cursor = conn.cursor()
    if command:
        cursor.execute(
            "SELECT * FROM runs WHERE command = ? ORDER BY id DESC LIMIT ?", (command, limit)
        )
    else:
        cursor.execute("SELECT * FROM runs ORDER BY id DESC LIMIT ?", (limit,))
    runs = [_run_dict(row) for row in cursor.fetchall()]
    conn.close()
    return runs


def write_manifest(output_dir, command: str, seed: int, config_hash: str,
                   artifacts: dict = None, extra: dict = None):
    """Write manifest.json into the run's output directory."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": seed,
        "config_hash": config_hash,
        "package_version": __version__,
        "artifact_versions": ARTIFACT_VERSIONS,
        "artifacts": {k: str(v) for k, v in (artifacts or {}).items()},
        "created_at": _now(),
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("Wrote manifest %s", path)
    return path
