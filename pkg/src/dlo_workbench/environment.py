"""
Goal-conditioned episodic environment on top of the soft bar.

State: gripper tip position and velocity, current and desired positions of
the selected mesh nodes. Action: Cartesian tip velocity in [-1, 1]^3 (m/s),
integrated over one control step and clamped to the deformation box.
Reward: minus the mean distance between current and desired node positions.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import softbody
from .errors import ConfigError, DimensionMismatchError, EpisodeProtocolError
from .softbody import GripperTip, TetMesh

logger = logging.getLogger(__name__)

SMALL_BOX_EXTENTS = (0.15, 0.5, 0.25)
LARGE_BOX_EXTENTS = (0.2, 0.8, 0.3)
BOX_PRESETS = {"small": SMALL_BOX_EXTENTS, "large": LARGE_BOX_EXTENTS}

# The box top sits this fraction of the z extent above the gripper rest position.
_BOX_HEADROOM = 0.1


# ============================================================
# Domain types
# ============================================================

@dataclass(frozen=True)
class WorkspaceBox:
    """Axis-aligned deformation workspace; extents are full side lengths."""

    center: tuple[float, float, float]
    extents: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))
        if len(self.center) != 3 or len(self.extents) != 3:
            raise ConfigError("box center and extents need 3 components")
        if min(self.extents) <= 0:
            raise ConfigError(f"box extents must be > 0, got {self.extents}")

    @property
    def lower(self) -> np.ndarray:
        return np.array(self.center) - 0.5 * np.array(self.extents)

    @property
    def upper(self) -> np.ndarray:
        return np.array(self.center) + 0.5 * np.array(self.extents)

    def clamp(self, point) -> np.ndarray:
        return np.minimum(np.maximum(np.asarray(point, dtype=np.float64), self.lower), self.upper)

    def contains(self, point, tol: float = 0.0) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))

    @classmethod
    def preset(cls, name: str, tip_rest, center=None) -> WorkspaceBox:
        """
        Box preset anchored at the gripper rest position.

        The box extends mostly downward (toward the pinned end) with a little
        headroom above the rest position. An explicit `center` keeps the
        preset extents and replaces the anchoring.
        """
        if name not in BOX_PRESETS:
            raise ConfigError(f"unknown box preset {name!r}; choose from {sorted(BOX_PRESETS)}")
        extents = BOX_PRESETS[name]
        if center is None:
            center = np.asarray(tip_rest, dtype=np.float64) + np.array(
                [0.0, 0.0, (_BOX_HEADROOM - 0.5) * extents[2]]
            )
        return cls(tuple(center), extents)


@dataclass(frozen=True)
class Action:
    """Cartesian gripper-tip velocity, each component in [-1, 1] m/s."""

    tip_velocity: tuple[float, float, float]

    def __post_init__(self):
        v = np.asarray(self.tip_velocity, dtype=np.float64)
        if v.shape != (3,):
            raise DimensionMismatchError(f"action needs 3 components, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(np.abs(v) > 1.0):
            raise ValueError(f"action components must lie in [-1, 1], got {v}")
        object.__setattr__(self, "tip_velocity", tuple(float(c) for c in v))


@dataclass
class Observation:
    """Tip state plus current (P_c) and desired (P_d) selected-node positions."""

    tip_pos: np.ndarray
    tip_vel: np.ndarray
    current_nodes: np.ndarray
    goal_nodes: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.tip_pos, self.tip_vel, self.current_nodes, self.goal_nodes])


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EnvConfig:
    """Episode contract shared by training, testing and goal generation."""

    selected_node_ids: tuple[int, ...]
    box: WorkspaceBox
    control_dt: float = 0.06
    substeps: int = 20
    distance_threshold: float = 0.05
    max_episode_steps: int = 300
    reinitialize: bool = True
    terminate_on_done: bool = False

    def __post_init__(self):
        object.__setattr__(self, "selected_node_ids", tuple(int(i) for i in self.selected_node_ids))
        if len(self.selected_node_ids) == 0:
            raise ConfigError("at least one selected node is required")
        if self.substeps < 1:
            raise ConfigError(f"substeps must be >= 1, got {self.substeps}")
        if not self.distance_threshold > 0:
            raise ConfigError(f"distance_threshold must be > 0, got {self.distance_threshold}")
        if self.max_episode_steps < 1:
            raise ConfigError(f"max_episode_steps must be >= 1, got {self.max_episode_steps}")

    @property
    def num_nodes(self) -> int:
        return len(self.selected_node_ids)

    @property
    def observation_dim(self) -> int:
        return observation_dim(self.num_nodes)


def observation_dim(num_nodes: int) -> int:
    """Length of the flattened state: 6 for the tip plus 6 per selected node."""
    return 6 + 6 * num_nodes


# ============================================================
# Reward
# ============================================================

def node_distances(current, goal) -> np.ndarray:
    c = np.asarray(current, dtype=np.float64).ravel()
    g = np.asarray(goal, dtype=np.float64).ravel()
    if c.shape != g.shape or c.size == 0 or c.size % 3:
        raise DimensionMismatchError(
            f"node vectors need equal non-zero length divisible by 3, got {c.size} and {g.size}"
        )
    return np.linalg.norm((c - g).reshape(-1, 3), axis=1)


def reward(current, goal) -> float:
    """r = -(1/m) * sum_i ||P_c,i - P_d,i||; always <= 0."""
    return -float(np.mean(node_distances(current, goal)))


# ============================================================
# Node selection
# ============================================================

def select_default_nodes(mesh: TetMesh, m: int) -> list[int]:
    """
    Pick m surface nodes evenly spaced along the bar axis.

    Candidates are free nodes on the face facing +x, on the line closest to the
    face centre. Target axial coordinates sit at k/(m+1) of the distance from
    the pinned face to the grasped face; each target takes the nearest unused
    candidate.
    """
    if m < 1:
        raise ConfigError(f"need at least one selected node, got {m}")
    rest = mesh.rest_pos
    base = rest[mesh.pinned].mean(axis=0)
    top = mesh.grasp_anchor
    axis = top - base
    span = float(np.linalg.norm(axis))
    axis = axis / span

    lateral = np.array([1.0, 0.0, 0.0]) - axis[0] * axis
    if np.linalg.norm(lateral) < 1e-9:
        lateral = np.array([0.0, 1.0, 0.0]) - axis[1] * axis
    lateral /= np.linalg.norm(lateral)
    binormal = np.cross(axis, lateral)

    free = mesh.free_nodes
    rel = rest[free] - base
    axial = rel @ axis
    side = rel @ lateral
    offset = np.abs(rel @ binormal)
    tol = 1e-9 * max(span, 1.0)
    on_face = side >= side.max() - tol
    centred = offset <= offset[on_face].min() + tol
    mask = on_face & centred & (axial > tol) & (axial < span - tol)
    candidates = free[mask]
    cand_axial = axial[mask]
    if m > len(candidates):
        raise ConfigError(f"requested {m} selected nodes, only {len(candidates)} candidates")

    chosen: list[int] = []
    used = np.zeros(len(candidates), dtype=bool)
    for k in range(1, m + 1):
        target = span * k / (m + 1)
        gap = np.where(used, np.inf, np.abs(cand_axial - target))
        best = int(np.argmin(gap))
        used[best] = True
        chosen.append(best)
    chosen.sort(key=lambda idx: cand_axial[idx])
    return [int(candidates[idx]) for idx in chosen]


# ============================================================
# Environment
# ============================================================

class ShapeEnv:
    """
    One soft bar, one gripper tip, one goal at a time.

    The environment keeps a pristine copy of mesh and tip for reinitializing
    resets. Instances share no mutable state.
    """

    def __init__(self, mesh: TetMesh, tip: GripperTip, config: EnvConfig):
        if not np.isclose(config.control_dt, config.substeps * mesh.sim_dt, rtol=1e-9, atol=0):
            raise ConfigError(
                f"control_dt {config.control_dt} must equal substeps {config.substeps}"
                f" x sim_dt {mesh.sim_dt}"
            )
        if max(config.selected_node_ids) >= mesh.n_nodes or min(config.selected_node_ids) < 0:
            raise ConfigError("selected node id out of range")
        self.config = config
        self._pristine_mesh = mesh.copy()
        self._pristine_tip = tip.copy()
        self.mesh = mesh.copy()
        self.tip = tip.copy()
        self.goal: np.ndarray | None = None
        self.goal_id: int | None = None
        self.steps_taken = 0
        self.finished = False
        self.fingerprint = scenario_fingerprint(
            mesh, config.selected_node_ids, config.control_dt, config.substeps
        )

    # ------------------------------------------------------------
    # queries
    # ------------------------------------------------------------

    def selected_positions(self) -> np.ndarray:
        return self.mesh.node_pos[list(self.config.selected_node_ids)].ravel().copy()

    def observe(self) -> Observation:
        goal = self.goal if self.goal is not None else np.zeros(3 * self.config.num_nodes)
        return Observation(
            tip_pos=self.tip.position.copy(),
            tip_vel=self.tip.velocity.copy(),
            current_nodes=self.selected_positions(),
            goal_nodes=goal.copy(),
        )

    def mean_distance(self) -> float:
        if self.goal is None:
            raise EpisodeProtocolError("no goal set; call reset() first")
        return float(np.mean(node_distances(self.selected_positions(), self.goal)))

    # ------------------------------------------------------------
    # episode protocol
    # ------------------------------------------------------------

    def reset(self, goal, reinitialize: bool | None = None) -> Observation:
        """
        Start an episode toward `goal` (a GoalRecord or a 3m-vector of targets).

        With reinitialize the mesh and tip return to the pristine state; without
        it they are left exactly as the previous episode ended.
        """
        targets = np.asarray(getattr(goal, "targets", goal), dtype=np.float64).ravel()
        expected = 3 * self.config.num_nodes
        if targets.size != expected:
            raise DimensionMismatchError(
                f"goal has {targets.size} coordinates, expected {expected}"
            )
        if reinitialize is None:
            reinitialize = self.config.reinitialize
        if reinitialize:
            self.restore_pristine()
        self.goal = targets.copy()
        self.goal_id = getattr(goal, "id", None)
        self.steps_taken = 0
        self.finished = False
        return self.observe()

    def restore_pristine(self) -> None:
        self.mesh = self._pristine_mesh.copy()
        self.tip = self._pristine_tip.copy()

    def step(self, action) -> StepResult:
        """
        Integrate one tip velocity over control_dt and run the physics substeps.

        The tip target is clamped into the box; the tip moves linearly toward
        the clamped target during the substeps.
        """
        if self.goal is None:
            raise EpisodeProtocolError("no goal set; call reset() first")
        if self.finished:
            raise EpisodeProtocolError("episode already finished; call reset()")
        act = action if isinstance(action, Action) else Action(tuple(np.asarray(action).ravel()))
        velocity = np.array(act.tip_velocity)

        target = self.tip.position + velocity * self.config.control_dt
        clamped = self.config.box.clamp(target)
        was_clamped = not np.array_equal(clamped, target)
        self._advance_to(clamped)

        distances = node_distances(self.selected_positions(), self.goal)
        mean_distance = float(np.mean(distances))
        done = mean_distance < self.config.distance_threshold
        self.steps_taken += 1
        if self.steps_taken >= self.config.max_episode_steps or (
            done and self.config.terminate_on_done
        ):
            self.finished = True
        return StepResult(
            observation=self.observe(),
            reward=-mean_distance,
            done=bool(done),
            info={
                "mean_distance": mean_distance,
                "node_distances": distances,
                "clamped": was_clamped,
                "step": self.steps_taken,
            },
        )

    def _advance_to(self, target: np.ndarray) -> None:
        start = self.tip.position.copy()
        self.tip.velocity = (target - start) / self.config.control_dt
        for _ in range(self.config.substeps):
            softbody.step(self.mesh, self.tip, self.mesh.sim_dt)
        self.tip.position = np.array(target, dtype=np.float64)
        softbody.attach_grasp(self.mesh, self.tip)


# ============================================================
# Episode-free tip driving
# ============================================================

def move_tip(env: ShapeEnv, target, max_control_steps: int = 1000) -> int:
    """
    Drive the tip to `target` (clamped into the box) at most 1 m/s per axis.

    Returns the number of control steps used. The final step lands exactly on
    the target.
    """
    goal = env.config.box.clamp(target)
    reach = env.config.control_dt
    for count in range(1, max_control_steps + 1):
        remaining = goal - env.tip.position
        if np.all(np.abs(remaining) <= reach):
            env._advance_to(goal)
            return count
        env._advance_to(env.config.box.clamp(env.tip.position + np.clip(remaining, -reach, reach)))
    raise EpisodeProtocolError(f"tip did not reach {goal} within {max_control_steps} steps")


def settle_env(env: ShapeEnv, max_steps: int, vel_tol: float) -> softbody.SettleResult:
    return softbody.settle(env.mesh, env.tip, max_steps, vel_tol, dt=env.mesh.sim_dt)


# ============================================================
# Fingerprint
# ============================================================

def scenario_fingerprint(
    mesh: TetMesh, selected_node_ids, control_dt: float, substeps: int
) -> str:
    """Hash of mesh topology, rest geometry, physics constants, timing and node selection."""
    digest = hashlib.sha256()
    for array in (
        mesh.rest_pos, mesh.tets, mesh.edges, mesh.pinned, mesh.grasped, mesh.node_mass,
        mesh.stiffness.edge, mesh.gravity,
    ):
        digest.update(np.ascontiguousarray(array).tobytes())
    digest.update(repr((
        mesh.stiffness.volume, mesh.stiffness.damping, mesh.sim_dt,
        float(control_dt), int(substeps), tuple(int(i) for i in selected_node_ids),
    )).encode())
    return digest.hexdigest()[:16]


# ============================================================
# Trajectory CSV
# ============================================================

def trajectory_header(num_nodes: int) -> list[str]:
    coords = [f"{axis}{i}" for i in range(num_nodes) for axis in "xyz"]
    return (
        ["episode", "step", "tip_x", "tip_y", "tip_z", "action_vx", "action_vy", "action_vz",
         "reward", "done"]
        + [f"goal_{c}" for c in coords]
        + [f"current_{c}" for c in coords]
    )


class TrajectoryRecorder:
    """One CSV row per control step."""

    def __init__(self, path: str | Path, num_nodes: int):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.num_nodes = num_nodes
        self._file = open(self.path, "w", newline="")
        self._writer = csv.writer(self._file)
        self._writer.writerow(trajectory_header(num_nodes))

    def record(self, episode: int, step: int, action, result: StepResult) -> None:
        obs = result.observation
        row = [episode, step]
        row += [repr(float(v)) for v in obs.tip_pos]
        row += [repr(float(v)) for v in np.asarray(action, dtype=np.float64).ravel()]
        row += [repr(float(result.reward)), int(result.done)]
        row += [repr(float(v)) for v in obs.goal_nodes]
        row += [repr(float(v)) for v in obs.current_nodes]
        self._writer.writerow(row)

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> TrajectoryRecorder:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_trajectory(path: str | Path) -> list[dict]:
    """Parse a trajectory CSV into dicts with `episode`, `step`, `action`, `goal` arrays."""
    rows = []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        goal_cols = [i for i, name in enumerate(header) if name.startswith("goal_")]
        action_cols = [header.index(f"action_v{axis}") for axis in "xyz"]
        for record in reader:
            rows.append({
                "episode": int(record[0]),
                "step": int(record[1]),
                "action": np.array([float(record[i]) for i in action_cols]),
                "goal": np.array([float(record[i]) for i in goal_cols]),
            })
    return rows


def replay_trajectory(env: ShapeEnv, rows: list[dict], reinitialize: bool = True):
    """
    Re-run logged actions and yield (episode, step, node positions) per control step.

    A new episode starts whenever the episode column changes.
    """
    current_episode = None
    for row in rows:
        if current_episode is None or row["episode"] != current_episode:
            env.reset(row["goal"], reinitialize=reinitialize or current_episode is None)
            current_episode = row["episode"]
        env.step(np.clip(row["action"], -1.0, 1.0))
        yield row["episode"], row["step"], env.mesh.node_pos.copy()
