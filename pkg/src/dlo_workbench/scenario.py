"""
The pristine experimental setup: a bar settled under gravity, its gripper
tip, and the episode contract every environment clone shares.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .environment import (
    EnvConfig,
    ShapeEnv,
    WorkspaceBox,
    scenario_fingerprint,
    select_default_nodes,
)
from .errors import ConfigError
from .softbody import (
    DEFAULT_GRAVITY,
    GripperTip,
    MaterialParams,
    TetMesh,
    build_bar_mesh,
    settle,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScenarioSettings:
    """
    Bar geometry, node selection and episode timing.

    `selected_node_ids` replaces the automatic pick of `num_nodes` nodes;
    `box_center` moves both box presets away from the tip anchoring.
    """

    length: float = 1.0
    cross_section: tuple[float, float] = (0.05, 0.05)
    cells: tuple[int, int, int] = (2, 2, 12)
    split: str = "five"
    gravity: tuple[float, float, float] = DEFAULT_GRAVITY
    num_nodes: int = 2
    selected_node_ids: tuple[int, ...] | None = None
    box_center: tuple[float, float, float] | None = None
    control_dt: float = 0.06
    substeps: int = 20
    distance_threshold: float = 0.05
    max_episode_steps: int = 300
    box: str = "small"
    reinitialize: bool = True
    rest_max_steps: int = 20000
    rest_vel_tol: float = 1e-10


@dataclass
class Scenario:
    mesh: TetMesh
    tip: GripperTip
    env_config: EnvConfig
    settings: ScenarioSettings
    material: MaterialParams

    @property
    def fingerprint(self) -> str:
        cfg = self.env_config
        return scenario_fingerprint(self.mesh, cfg.selected_node_ids, cfg.control_dt, cfg.substeps)

    def box(self, preset: str) -> WorkspaceBox:
        return WorkspaceBox.preset(preset, self.tip.position, self.settings.box_center)

    def with_num_nodes(self, m: int) -> Scenario:
        """Same settled bar with the automatic pick of m selected nodes."""
        nodes = tuple(select_default_nodes(self.mesh, m))
        settings = dataclasses.replace(self.settings, num_nodes=m, selected_node_ids=None)
        env_config = dataclasses.replace(self.env_config, selected_node_ids=nodes)
        return Scenario(self.mesh, self.tip, env_config, settings, self.material)

    def make_env(self, **overrides) -> ShapeEnv:
        """Independent environment on a copy of the pristine state."""
        config = dataclasses.replace(self.env_config, **overrides)
        return ShapeEnv(self.mesh.copy(), self.tip.copy(), config)


def _selected_nodes(mesh: TetMesh, settings: ScenarioSettings) -> list[int]:
    if settings.selected_node_ids is None:
        return select_default_nodes(mesh, settings.num_nodes)
    nodes = [int(i) for i in settings.selected_node_ids]
    if not nodes or len(set(nodes)) != len(nodes):
        raise ConfigError(f"selected_node_ids must be distinct and non-empty, got {nodes}")
    if min(nodes) < 0 or max(nodes) >= mesh.n_nodes:
        raise ConfigError(f"selected_node_ids must lie in [0, {mesh.n_nodes}), got {nodes}")
    constrained = sorted(set(nodes) - set(mesh.free_nodes.tolist()))
    if constrained:
        raise ConfigError(f"selected nodes {constrained} are pinned or grasped")
    return nodes


def build_scenario(
    material: MaterialParams | None = None, settings: ScenarioSettings | None = None
) -> Scenario:
    """
    Build the bar, settle it under gravity with the tip at rest and pick the
    selected nodes.

    Args:
        material: Material constants (defaults when None)
        settings: Geometry and episode settings (defaults when None)

    Returns:
        The scenario whose mesh state is the pristine episode start
    """
    material = material or MaterialParams()
    settings = settings or ScenarioSettings()
    expected_dt = settings.substeps * material.sim_dt
    if not np.isclose(settings.control_dt, expected_dt, rtol=1e-9, atol=0):
        raise ConfigError(
            f"control_dt {settings.control_dt} must equal substeps x sim_dt = {expected_dt}"
        )

    mesh = build_bar_mesh(
        settings.length,
        settings.cross_section,
        settings.cells,
        material,
        split=settings.split,
        gravity=settings.gravity,
    )
    tip = GripperTip.at(mesh.grasp_anchor)
    if np.any(mesh.gravity):
        result = settle(mesh, tip, settings.rest_max_steps, settings.rest_vel_tol)
        if not result.converged:
            logger.warning(
                "Rest state did not settle below %.1e m/s after %d steps (max speed %.3e)",
                settings.rest_vel_tol, result.steps, result.max_speed,
            )
        mesh.node_vel[:] = 0.0

    nodes = _selected_nodes(mesh, settings)
    env_config = EnvConfig(
        selected_node_ids=tuple(nodes),
        box=WorkspaceBox.preset(settings.box, tip.position, settings.box_center),
        control_dt=settings.control_dt,
        substeps=settings.substeps,
        distance_threshold=settings.distance_threshold,
        max_episode_steps=settings.max_episode_steps,
        reinitialize=settings.reinitialize,
    )
    scenario = Scenario(mesh, tip, env_config, settings, material)
    logger.info("Scenario ready: nodes %s, fingerprint %s", nodes, scenario.fingerprint)
    return scenario
