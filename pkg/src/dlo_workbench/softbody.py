"""
Soft bar dynamics on a tetrahedral mesh.

The bar is an edge-spring network over the tet-mesh links plus one
volume-preservation spring per tetrahedron. The bottom face is pinned to
the ground, the top face is rigidly grasped by the gripper tip.

Time stepping is backward Euler, solved as a minimization:

    x+ = argmin_y 1/2 |y - x - dt v|_M^2 + dt^2 E(y) + damping + gravity terms
    v+ = (x+ - x) / dt

Each step runs projected Newton iterations: a positive definite stiffness
matrix assembled with scipy.sparse over the free degrees of freedom and
factorized with SuperLU, a backtracking line search that never flips a
tetrahedron, and recursive step halving when the solve stalls. All
operations are deterministic: identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import ConfigError, MeshConstructionError, SimulationDivergedError

logger = logging.getLogger(__name__)

MESH_FORMAT_VERSION = "tetmesh v1"
DEFAULT_GRAVITY = (0.0, 0.0, -9.81)
DEFAULT_SIM_DT = 0.003

_MIN_VOLUME_FRACTION = 1e-12
_MIN_LENGTH = 1e-12  # m

# Newton solve
_NEWTON_ABS_TOL = 1e-13  # m
_NEWTON_REL_TOL = 1e-6  # of the step displacement
_MAX_NEWTON_ITERS = 50
_CHORD_CONTRACTION = 0.5
_QUADRATIC_REGIME = 1e-7  # m; smaller updates skip the energy test
_ARMIJO = 1e-4
_MAX_BACKTRACKS = 30
_MAX_SUBDIVISIONS = 6


# ============================================================
# Domain types
# ============================================================

@dataclass(frozen=True)
class MaterialParams:
    """Mechanical parameters of the foam bar."""

    young_modulus: float = 2.5e6
    poisson_ratio: float = 0.3
    total_mass: float = 0.2
    damping_ratio: float = 0.01
    friction_coeff: float = 0.5  # stored only, no sliding contact is simulated
    sim_dt: float = DEFAULT_SIM_DT

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ConfigError(f"young_modulus must be > 0, got {self.young_modulus}")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ConfigError(f"poisson_ratio must be in [0, 0.5), got {self.poisson_ratio}")
        if not self.total_mass > 0:
            raise ConfigError(f"total_mass must be > 0, got {self.total_mass}")
        if not self.damping_ratio >= 0:
            raise ConfigError(f"damping_ratio must be >= 0, got {self.damping_ratio}")
        if not self.sim_dt > 0:
            raise ConfigError(f"sim_dt must be > 0, got {self.sim_dt}")


@dataclass(frozen=True)
class Stiffness:
    """Spring constants derived from a material for one mesh."""

    edge: np.ndarray  # N/m, one per edge
    volume: float  # Pa
    damping: float  # N*s/m, per node


@dataclass
class GripperTip:
    """The point rigidly attached to the grasped face."""

    position: np.ndarray
    velocity: np.ndarray

    @classmethod
    def at(cls, position) -> GripperTip:
        return cls(np.array(position, dtype=np.float64), np.zeros(3))

    def copy(self) -> GripperTip:
        return GripperTip(self.position.copy(), self.velocity.copy())


@dataclass
class TetMesh:
    """Node state, topology and constraint sets of the soft bar."""

    node_pos: np.ndarray  # (n, 3) m
    node_vel: np.ndarray  # (n, 3) m/s
    node_mass: np.ndarray  # (n,) kg
    tets: np.ndarray  # (t, 4), positively oriented at rest
    edges: np.ndarray  # (e, 2)
    edge_rest: np.ndarray  # (e,) m
    tet_rest_volume: np.ndarray  # (t,) m^3
    pinned: np.ndarray  # sorted node ids
    grasped: np.ndarray  # sorted node ids
    rest_pos: np.ndarray  # (n, 3) positions at construction
    stiffness: Stiffness
    gravity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sim_dt: float = DEFAULT_SIM_DT
    _pattern: _HessianPattern | None = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_pos)

    @property
    def grasp_anchor(self) -> np.ndarray:
        """Rest position of the gripper tip: centroid of the grasped face."""
        if len(self.grasped) == 0:
            raise MeshConstructionError("mesh has no grasped nodes")
        return self.rest_pos[self.grasped].mean(axis=0)

    @property
    def free_nodes(self) -> np.ndarray:
        constrained = np.union1d(self.pinned, self.grasped)
        return np.setdiff1d(np.arange(self.n_nodes), constrained)

    def copy(self) -> TetMesh:
        """Deep copy of the state; the cached sparsity pattern is shared (read-only)."""
        return TetMesh(
            node_pos=self.node_pos.copy(),
            node_vel=self.node_vel.copy(),
            node_mass=self.node_mass.copy(),
            tets=self.tets,
            edges=self.edges,
            edge_rest=self.edge_rest,
            tet_rest_volume=self.tet_rest_volume,
            pinned=self.pinned,
            grasped=self.grasped,
            rest_pos=self.rest_pos,
            stiffness=self.stiffness,
            gravity=self.gravity.copy(),
            sim_dt=self.sim_dt,
            _pattern=self._pattern,
        )

    @classmethod
    def from_geometry(
        cls,
        positions,
        tets,
        node_mass,
        stiffness: Stiffness | None = None,
        edges=None,
        pinned=(),
        grasped=(),
        gravity=(0.0, 0.0, 0.0),
        material: MaterialParams | None = None,
    ) -> TetMesh:
        """
        Build a validated mesh from raw arrays.

        Tets with negative signed volume are reoriented. When `edges` is None the
        edge set is the deduplicated union of tet edges. Either `stiffness` or
        `material` must be given.
        """
        pos = np.array(positions, dtype=np.float64).reshape(-1, 3)
        n = len(pos)
        tet_arr = np.array(tets, dtype=np.int64).reshape(-1, 4)
        if tet_arr.size and (tet_arr.min() < 0 or tet_arr.max() >= n):
            raise MeshConstructionError("tet index out of range")

        volumes = _signed_volumes(pos, tet_arr)
        flipped = volumes < 0
        if np.any(flipped):
            tet_arr = tet_arr.copy()
            tet_arr[flipped, 2], tet_arr[flipped, 3] = (
                tet_arr[flipped, 3].copy(), tet_arr[flipped, 2].copy()
            )
            volumes = np.abs(volumes)
        scale = np.ptp(pos, axis=0).max() if n else 0.0
        degenerate = volumes <= _MIN_VOLUME_FRACTION * max(scale, 1e-300) ** 3
        if np.any(degenerate):
            raise MeshConstructionError(
                f"degenerate tetrahedron {int(np.flatnonzero(degenerate)[0])} (zero volume)"
            )

        if edges is None:
            edge_arr = _edges_from_tets(tet_arr)
        else:
            edge_arr = np.array(edges, dtype=np.int64).reshape(-1, 2)
        if edge_arr.size and (edge_arr.min() < 0 or edge_arr.max() >= n):
            raise MeshConstructionError("edge index out of range")
        rest_len = np.linalg.norm(pos[edge_arr[:, 1]] - pos[edge_arr[:, 0]], axis=1)
        if np.any(rest_len <= 0):
            raise MeshConstructionError("edge with zero rest length")

        pinned_arr = np.unique(np.asarray(pinned, dtype=np.int64))
        grasped_arr = np.unique(np.asarray(grasped, dtype=np.int64))
        for name, ids in (("pinned", pinned_arr), ("grasped", grasped_arr)):
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise MeshConstructionError(f"{name} index out of range")
        if np.intersect1d(pinned_arr, grasped_arr).size:
            raise MeshConstructionError("a node cannot be both pinned and grasped")

        mass = np.broadcast_to(np.asarray(node_mass, dtype=np.float64), (n,)).copy()
        if stiffness is None:
            if material is None:
                raise MeshConstructionError("either stiffness or material is required")
            stiffness = derive_stiffness(rest_len, float(volumes.sum()), mass, material)

        return cls(
            node_pos=pos.copy(),
            node_vel=np.zeros_like(pos),
            node_mass=mass,
            tets=tet_arr,
            edges=edge_arr,
            edge_rest=rest_len,
            tet_rest_volume=volumes,
            pinned=pinned_arr,
            grasped=grasped_arr,
            rest_pos=pos.copy(),
            stiffness=stiffness,
            gravity=np.array(gravity, dtype=np.float64),
            sim_dt=material.sim_dt if material is not None else DEFAULT_SIM_DT,
        )


@dataclass
class SettleResult:
    """Outcome of `settle`."""

    converged: bool
    steps: int
    max_speed: float

    @property
    def reason(self) -> str:
        return "velocity_tolerance" if self.converged else "max_steps"


# ============================================================
# Construction
# ============================================================

def derive_stiffness(
    edge_rest: np.ndarray, total_volume: float, node_mass: np.ndarray,
    material: MaterialParams,
) -> Stiffness:
    """
    Map material constants onto spring constants.

    k_e = E * V_total / (L_e^2 * edge_count), k_v = E / (3 (1 - 2 nu)),
    c = 2 * zeta * sqrt(mean(k_e) * mean(m_node)).
    """
    edge_count = max(len(edge_rest), 1)
    k_edge = material.young_modulus * total_volume / (edge_rest ** 2 * edge_count)
    k_volume = material.young_modulus / (3.0 * (1.0 - 2.0 * material.poisson_ratio))
    k_mean = float(k_edge.mean()) if len(k_edge) else 0.0
    damping = 2.0 * material.damping_ratio * np.sqrt(k_mean * float(np.mean(node_mass)))
    return Stiffness(edge=k_edge, volume=float(k_volume), damping=float(damping))


def build_bar_mesh(
    length: float,
    cross_section: tuple[float, float],
    cells: tuple[int, int, int],
    material: MaterialParams,
    split: str = "five",
    gravity=DEFAULT_GRAVITY,
) -> TetMesh:
    """
    Box-shaped bar along +z, centred on the z axis, bottom face at z = 0.

    Each hexahedral cell is split into 5 tets (alternating parity, so face
    diagonals match between neighbours) or 6 tets (Kuhn split). Bottom-face
    nodes are pinned, top-face nodes grasped, mass lumped uniformly.

    Args:
        length: Bar length along z (m)
        cross_section: (width along x, depth along y) in m
        cells: Subdivision counts (nx, ny, nz)
        material: Material constants
        split: "five" or "six"
        gravity: Gravity vector (m/s^2)

    Returns:
        The rest-state mesh with derived stiffness
    """
    width, depth = (float(v) for v in cross_section)
    nx, ny, nz = (int(c) for c in cells)
    if min(length, width, depth) <= 0:
        raise MeshConstructionError("bar dimensions must be > 0")
    if min(nx, ny, nz) < 1:
        raise MeshConstructionError("subdivision counts must be >= 1")
    if split not in ("five", "six"):
        raise MeshConstructionError(f"unknown split {split!r}; use 'five' or 'six'")

    def node_id(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    grid = np.array(
        [(i, j, k) for k in range(nz + 1) for j in range(ny + 1) for i in range(nx + 1)],
        dtype=np.float64,
    )
    positions = np.column_stack([
        -width / 2 + grid[:, 0] * width / nx,
        -depth / 2 + grid[:, 1] * depth / ny,
        grid[:, 2] * length / nz,
    ])

    tets = []
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                tets.extend(_split_cell(i, j, k, node_id, split))

    n_nodes = len(positions)
    k_index = grid[:, 2].astype(np.int64)
    mesh = TetMesh.from_geometry(
        positions,
        tets,
        node_mass=material.total_mass / n_nodes,
        pinned=np.flatnonzero(k_index == 0),
        grasped=np.flatnonzero(k_index == nz),
        gravity=gravity,
        material=material,
    )
    logger.info(
        "Built bar mesh: %d nodes, %d tets, %d edges (%s split)",
        mesh.n_nodes, len(mesh.tets), len(mesh.edges), split,
    )
    return mesh


def _split_cell(i, j, k, node_id, split):
    corners = {
        (a, b, c): node_id(i + a, j + b, k + c)
        for a in (0, 1) for b in (0, 1) for c in (0, 1)
    }
    if split == "six":
        tets = []
        for perm in itertools.permutations(range(3)):
            v = [0, 0, 0]
            path = [tuple(v)]
            for axis in perm:
                v[axis] = 1
                path.append(tuple(v))
            tets.append([corners[p] for p in path])
        return tets

    # Central tet on the globally-even corners, one corner tet per odd corner.
    even = [c for c in corners if (i + j + k + sum(c)) % 2 == 0]
    odd = [c for c in corners if (i + j + k + sum(c)) % 2 == 1]
    tets = [[corners[c] for c in even]]
    for o in odd:
        neighbours = []
        for axis in range(3):
            n = list(o)
            n[axis] = 1 - n[axis]
            neighbours.append(corners[tuple(n)])
        tets.append([corners[o]] + neighbours)
    return tets


def _edges_from_tets(tets: np.ndarray) -> np.ndarray:
    if len(tets) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.concatenate([tets[:, [a, b]] for a, b in itertools.combinations(range(4), 2)])
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


# ============================================================
# Energy and forces
# ============================================================

def _signed_volumes(pos: np.ndarray, tets: np.ndarray) -> np.ndarray:
    if len(tets) == 0:
        return np.zeros(0)
    a = pos[tets[:, 1]] - pos[tets[:, 0]]
    b = pos[tets[:, 2]] - pos[tets[:, 0]]
    c = pos[tets[:, 3]] - pos[tets[:, 0]]
    return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0


def _volume_gradients(pos: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """dV/dx for each tet vertex, shape (t, 4, 3)."""
    a = pos[tets[:, 1]] - pos[tets[:, 0]]
    b = pos[tets[:, 2]] - pos[tets[:, 0]]
    c = pos[tets[:, 3]] - pos[tets[:, 0]]
    g1 = np.cross(b, c) / 6.0
    g2 = np.cross(c, a) / 6.0
    g3 = np.cross(a, b) / 6.0
    return np.stack([-(g1 + g2 + g3), g1, g2, g3], axis=1)


def _scatter_add(n: int, indices: np.ndarray, values: np.ndarray) -> np.ndarray:
    flat = (indices.reshape(-1, 1) * 3 + np.arange(3)).ravel()
    return np.bincount(flat, weights=values.reshape(-1), minlength=3 * n).reshape(n, 3)


def elastic_energy(mesh: TetMesh, stiffness: Stiffness | None = None) -> float:
    """
    Total spring energy (J) of the current configuration.

    E = sum_edges 1/2 k_e (l - L)^2 + sum_tets 1/2 k_v (V - V0)^2 / V0
    """
    return _energy_at(mesh, mesh.node_pos, stiffness or mesh.stiffness)


def _energy_at(mesh: TetMesh, pos: np.ndarray, k: Stiffness | None = None) -> float:
    k = k or mesh.stiffness
    d = pos[mesh.edges[:, 1]] - pos[mesh.edges[:, 0]]
    stretch = np.linalg.norm(d, axis=1) - mesh.edge_rest
    energy = 0.5 * np.dot(k.edge, stretch * stretch)
    if len(mesh.tets):
        dv = _signed_volumes(pos, mesh.tets) - mesh.tet_rest_volume
        energy += 0.5 * k.volume * np.sum(dv * dv / mesh.tet_rest_volume)
    return float(energy)


def elastic_forces(mesh: TetMesh, stiffness: Stiffness | None = None) -> np.ndarray:
    """-grad(elastic_energy), shape (n, 3)."""
    return _forces_at(mesh, mesh.node_pos, stiffness or mesh.stiffness)


def _forces_at(mesh: TetMesh, pos: np.ndarray, k: Stiffness | None = None) -> np.ndarray:
    k = k or mesh.stiffness
    n = len(pos)
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    d = pos[j] - pos[i]
    length = np.maximum(np.linalg.norm(d, axis=1), _MIN_LENGTH)
    tension = (k.edge * (length - mesh.edge_rest) / length)[:, None] * d
    forces = _scatter_add(n, i, tension) - _scatter_add(n, j, tension)
    if len(mesh.tets):
        grads = _volume_gradients(pos, mesh.tets)
        dv = _signed_volumes(pos, mesh.tets) - mesh.tet_rest_volume
        coef = -k.volume * dv / mesh.tet_rest_volume
        forces += _scatter_add(n, mesh.tets, coef[:, None, None] * grads)
    return forces


def internal_forces(mesh: TetMesh, include_damping: bool = True) -> np.ndarray:
    """
    Elastic plus viscous force on every node (N).

    Pinned and grasped nodes are reported too; `step` never applies them.
    """
    forces = elastic_forces(mesh)
    if include_damping:
        forces -= mesh.stiffness.damping * mesh.node_vel
    return forces


def mechanical_energy(mesh: TetMesh) -> float:
    """Free-node kinetic energy + elastic energy + gravitational potential (J)."""
    free = mesh.free_nodes
    v = mesh.node_vel[free]
    kinetic = 0.5 * np.sum(mesh.node_mass[free] * np.sum(v * v, axis=1))
    potential = -np.sum(mesh.node_mass * (mesh.node_pos @ mesh.gravity))
    return float(kinetic + elastic_energy(mesh) + potential)


# ============================================================
# Implicit system
# ============================================================

class _HessianPattern:
    """Sparse index layout of the free-free stiffness blocks."""

    def __init__(self, mesh: TetMesh):
        n = mesh.n_nodes
        self.free_nodes = mesh.free_nodes
        self.n_free = len(self.free_nodes)
        free_id = np.full(n, -1, dtype=np.int64)
        free_id[self.free_nodes] = np.arange(self.n_free)

        i, j = mesh.edges[:, 0], mesh.edges[:, 1]
        # block order per edge: (i,i), (j,j), (i,j), (j,i)
        rows = [i, j, i, j]
        cols = [i, j, j, i]
        if len(mesh.tets):
            rows.append(np.repeat(mesh.tets[:, :, None], 4, axis=2).ravel())
            cols.append(np.repeat(mesh.tets[:, None, :], 4, axis=1).ravel())
        row_free = free_id[np.concatenate(rows)]
        col_free = free_id[np.concatenate(cols)]

        self.mask = (row_free >= 0) & (col_free >= 0)
        count = int(self.mask.sum())
        p = np.arange(3)[None, :, None]
        q = np.arange(3)[None, None, :]
        rows_3 = 3 * row_free[self.mask][:, None, None] + p
        cols_3 = 3 * col_free[self.mask][:, None, None] + q
        self.rows = np.broadcast_to(rows_3, (count, 3, 3)).ravel()
        self.cols = np.broadcast_to(cols_3, (count, 3, 3)).ravel()


def _pattern_of(mesh: TetMesh) -> _HessianPattern:
    if mesh._pattern is None:
        mesh._pattern = _HessianPattern(mesh)
    return mesh._pattern


def _hessian_blocks(mesh: TetMesh, pos: np.ndarray) -> np.ndarray:
    """
    Projected (PSD) 3x3 blocks in `_HessianPattern` order.

    The lateral edge term is clamped at zero under compression and the volume
    term keeps only its Gauss-Newton part.
    """
    k = mesh.stiffness
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    d = pos[j] - pos[i]
    length = np.maximum(np.linalg.norm(d, axis=1), _MIN_LENGTH)
    u = d / length[:, None]
    uu = u[:, :, None] * u[:, None, :]
    lateral = np.maximum(0.0, 1.0 - mesh.edge_rest / length)
    h_edge = k.edge[:, None, None] * (uu + lateral[:, None, None] * (np.eye(3) - uu))
    blocks = [h_edge, h_edge, -h_edge, -h_edge]
    if len(mesh.tets):
        g = _volume_gradients(pos, mesh.tets)
        coef = k.volume / mesh.tet_rest_volume
        h_tet = coef[:, None, None, None, None] * (
            g[:, :, None, :, None] * g[:, None, :, None, :]
        )
        blocks.append(h_tet.reshape(-1, 3, 3))
    return np.concatenate(blocks)


def _factorize(mesh: TetMesh, pattern: _HessianPattern, pos: np.ndarray, dt: float):
    """SuperLU factors of diag(m + dt c) + dt^2 K_ff at `pos`."""
    size = 3 * pattern.n_free
    blocks = _hessian_blocks(mesh, pos)
    k_ff = sparse.coo_matrix(
        (blocks[pattern.mask].ravel(), (pattern.rows, pattern.cols)), shape=(size, size)
    )
    diagonal = np.repeat(mesh.node_mass[pattern.free_nodes], 3) + dt * mesh.stiffness.damping
    return splu((sparse.diags(diagonal) + dt * dt * k_ff).tocsc())


class _IncrementalPotential:
    """
    Backward-Euler objective over the free node positions y, scaled by dt^2.

        phi(y) = 1/2 |y - x - dt v|_M^2 + dt^2 E(y) + 1/2 c dt |y - x|^2
                 - dt^2 (M g) . (y - x)

    Pinned and grasped nodes sit at their end-of-step targets in `full`.
    Its minimizer is the implicit position update; it decreases along every
    Newton direction since the projected Hessian is positive definite.
    """

    def __init__(self, mesh: TetMesh, pattern: _HessianPattern, dt: float, full: np.ndarray):
        self.mesh = mesh
        self.pattern = pattern
        self.dt = dt
        self.free = pattern.free_nodes
        self.full = full
        self.start = mesh.node_pos[self.free].copy()
        self.predicted = self.start + dt * mesh.node_vel[self.free]
        self.mass = mesh.node_mass[self.free][:, None]
        self.drag = mesh.stiffness.damping * dt
        self.load = dt * dt * self.mass * mesh.gravity

    def place(self, y: np.ndarray) -> np.ndarray:
        self.full[self.free] = y
        return self.full

    def value(self, y: np.ndarray) -> float:
        pos = self.place(y)
        inertia = y - self.predicted
        moved = y - self.start
        return float(
            0.5 * np.sum(self.mass * inertia * inertia)
            + self.dt * self.dt * _energy_at(self.mesh, pos)
            + 0.5 * self.drag * np.sum(moved * moved)
            - np.sum(self.load * moved)
        )

    def gradient(self, y: np.ndarray) -> np.ndarray:
        forces = _forces_at(self.mesh, self.place(y))[self.free]
        return (
            self.mass * (y - self.predicted) - self.dt * self.dt * forces
            + self.drag * (y - self.start) - self.load
        )

    def factorize(self, y: np.ndarray):
        return _factorize(self.mesh, self.pattern, self.place(y), self.dt)

    def volumes(self, y: np.ndarray) -> np.ndarray:
        return _signed_volumes(self.place(y), self.mesh.tets)


@dataclass
class _NewtonResult:
    positions: np.ndarray  # (n, 3), constrained nodes at their targets
    converged: bool
    iterations: int
    last_update: float


def _keeps_orientation(volumes: np.ndarray, positive: np.ndarray) -> bool:
    return bool(np.all(volumes[positive] > 0))


def _line_search(phi: _IncrementalPotential, y: np.ndarray, grad: np.ndarray,
                 direction: np.ndarray, size: float) -> np.ndarray | None:
    """
    Backtrack from the full Newton step until phi decreases (Armijo) and no
    tet that is positive at `y` flips. Returns None when no step qualifies.
    """
    positive = phi.volumes(y) > 0
    if size < _QUADRATIC_REGIME:
        trial = y + direction
        if _keeps_orientation(phi.volumes(trial), positive):
            return trial
    slope = float(np.sum(grad * direction))
    if not slope < 0:
        return None
    base = phi.value(y)
    alpha = 1.0
    for _ in range(_MAX_BACKTRACKS):
        trial = y + alpha * direction
        if _keeps_orientation(phi.volumes(trial), positive):
            value = phi.value(trial)
            if np.isfinite(value) and value <= base + _ARMIJO * alpha * slope:
                return trial
        alpha *= 0.5
    return None


def _end_of_step_targets(mesh: TetMesh, tip: GripperTip, dt: float) -> np.ndarray:
    full = mesh.node_pos.copy()
    if len(mesh.pinned):
        full[mesh.pinned] = mesh.rest_pos[mesh.pinned]
    if len(mesh.grasped):
        offsets = mesh.rest_pos[mesh.grasped] - mesh.grasp_anchor
        full[mesh.grasped] = offsets + (tip.position + dt * tip.velocity)
    return full


def _newton_solve(mesh: TetMesh, tip: GripperTip, dt: float) -> _NewtonResult:
    """
    Minimize the incremental potential over the free nodes.

    The factorization is refreshed at the first iteration and whenever the
    chord update stops contracting. Converges when the max-norm of the update
    falls below an absolute floor plus a fraction of this step's displacement.
    """
    pattern = _pattern_of(mesh)
    full = _end_of_step_targets(mesh, tip, dt)
    if pattern.n_free == 0:
        return _NewtonResult(full, True, 0, 0.0)
    phi = _IncrementalPotential(mesh, pattern, dt, full)

    y = phi.predicted.copy()
    if not _keeps_orientation(phi.volumes(y), phi.volumes(phi.start) > 0):
        y = phi.start.copy()

    lu = None
    previous = np.inf
    size = np.inf
    for iteration in range(1, _MAX_NEWTON_ITERS + 1):
        grad = phi.gradient(y)
        if not np.all(np.isfinite(grad)):
            break
        fresh = lu is None
        if fresh:
            lu = phi.factorize(y)
        direction = -lu.solve(grad.ravel()).reshape(-1, 3)
        size = float(np.max(np.abs(direction)))
        if not fresh and size > _CHORD_CONTRACTION * previous:
            lu = phi.factorize(y)
            direction = -lu.solve(grad.ravel()).reshape(-1, 3)
            size = float(np.max(np.abs(direction)))

        trial = _line_search(phi, y, grad, direction, size)
        if trial is None and not fresh:
            lu = phi.factorize(y)
            direction = -lu.solve(grad.ravel()).reshape(-1, 3)
            size = float(np.max(np.abs(direction)))
            trial = _line_search(phi, y, grad, direction, size)
        if trial is None:
            break
        y = trial
        tol = _NEWTON_ABS_TOL + _NEWTON_REL_TOL * float(np.max(np.abs(y - phi.start)))
        if size < tol:
            return _NewtonResult(phi.place(y).copy(), True, iteration, size)
        previous = size
    return _NewtonResult(phi.place(y).copy(), False, iteration, size)


def _check_finite(values: np.ndarray, node_ids: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(values).all(axis=1)
    if np.any(bad):
        node = int(node_ids[np.flatnonzero(bad)[0]])
        raise SimulationDivergedError(node, f"non-finite {what} at node {node}")


# ============================================================
# Time stepping
# ============================================================

def step(mesh: TetMesh, tip: GripperTip, dt: float) -> TetMesh:
    """
    Advance the mesh and the tip by one physics step, in place.

    Free nodes take the backward-Euler update, pinned nodes stay at their
    rest position with zero velocity, grasped nodes are translated rigidly
    with the tip, which itself moves by dt * tip.velocity. A step whose
    Newton solve does not converge is split into two half steps, recursively.

    Args:
        mesh: Mesh to advance (mutated)
        tip: Gripper tip (mutated: position advances along its velocity)
        dt: Step size, normally material.sim_dt

    Returns:
        The same mesh instance

    Raises:
        SimulationDivergedError: The state holds or produced a non-finite value
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    nodes = np.arange(mesh.n_nodes)
    _check_finite(mesh.node_pos, nodes, "position")
    _check_finite(mesh.node_vel, nodes, "velocity")
    _advance(mesh, tip, dt, depth=0)
    return mesh


def _advance(mesh: TetMesh, tip: GripperTip, dt: float, depth: int) -> None:
    result = _newton_solve(mesh, tip, dt)
    if not result.converged and depth < _MAX_SUBDIVISIONS:
        logger.debug(
            "Newton stalled at %.3e m after %d iterations; halving dt to %.3e",
            result.last_update, result.iterations, dt / 2,
        )
        _advance(mesh, tip, dt / 2, depth + 1)
        _advance(mesh, tip, dt / 2, depth + 1)
        return
    if not result.converged:
        logger.warning(
            "Newton solve left an update of %.3e m at dt %.3e; keeping the best iterate",
            result.last_update, dt,
        )

    free = _pattern_of(mesh).free_nodes
    positions = result.positions[free]
    _check_finite(positions, free, "position")
    mesh.node_vel[free] = (positions - mesh.node_pos[free]) / dt
    mesh.node_pos[free] = positions

    tip.position = tip.position + dt * tip.velocity
    if len(mesh.pinned):
        mesh.node_pos[mesh.pinned] = mesh.rest_pos[mesh.pinned]
        mesh.node_vel[mesh.pinned] = 0.0
    if len(mesh.grasped):
        attach_grasp(mesh, tip)


def attach_grasp(mesh: TetMesh, tip: GripperTip) -> None:
    """Place the grasped face rigidly at the tip and give it the tip velocity."""
    offsets = mesh.rest_pos[mesh.grasped] - mesh.grasp_anchor
    mesh.node_pos[mesh.grasped] = offsets + tip.position
    mesh.node_vel[mesh.grasped] = tip.velocity


def max_free_speed(mesh: TetMesh) -> float:
    free = mesh.free_nodes
    if len(free) == 0:
        return 0.0
    v = mesh.node_vel[free]
    return float(np.sqrt(np.max(np.sum(v * v, axis=1))))


def settle(
    mesh: TetMesh,
    tip: GripperTip,
    max_steps: int,
    vel_tol: float,
    dt: float | None = None,
) -> SettleResult:
    """
    Step with a stationary tip until every free node is slower than vel_tol.

    The speed check runs before each step, so an already-resting mesh costs
    no step at all.
    """
    if max_steps <= 0:
        raise ValueError(f"max_steps must be > 0, got {max_steps}")
    dt = dt if dt is not None else mesh.sim_dt
    tip.velocity = np.zeros(3)
    steps = 0
    speed = max_free_speed(mesh)
    while speed >= vel_tol and steps < max_steps:
        step(mesh, tip, dt)
        steps += 1
        speed = max_free_speed(mesh)
    result = SettleResult(converged=bool(speed < vel_tol), steps=steps, max_speed=speed)
    logger.debug("settle: %s after %d steps (max speed %.3e)", result.reason, steps, speed)
    return result


# ============================================================
# Mesh dump
# ============================================================

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def export_mesh(mesh: TetMesh, path: str | Path) -> Path:
    """
    Write the `tetmesh v1` text dump used for offline plotting.

    Layout: header `tetmesh v1 <n_nodes> <n_tets> <n_edges>`, node lines
    `x y z vx vy vz`, tet lines, edge lines `i j rest_length`, then one
    `pinned ...` and one `grasped ...` line.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{MESH_FORMAT_VERSION} {mesh.n_nodes} {len(mesh.tets)} {len(mesh.edges)}"]
    for pos, vel in zip(mesh.node_pos, mesh.node_vel):
        lines.append(_fmt(np.concatenate([pos, vel])))
    lines.extend(" ".join(str(int(v)) for v in tet) for tet in mesh.tets)
    lines.extend(
        f"{int(a)} {int(b)} {float(rest)!r}" for (a, b), rest in zip(mesh.edges, mesh.edge_rest)
    )
    lines.append("pinned " + " ".join(str(int(v)) for v in mesh.pinned))
    lines.append("grasped " + " ".join(str(int(v)) for v in mesh.grasped))
    path.write_text("\n".join(lines) + "\n")
    return path
