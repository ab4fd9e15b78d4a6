"""
Shared test fixtures for the DLO Shape Workbench tests.

Key design: each test gets a fresh temporary run registry and runs
directory, so tests never touch the real data/runs.db. The small 2x2x4 bar
scenario, the default 2x2x12 scenario and the small goal database are built
once per session; environments cloned from them never mutate the pristine
state.
"""

import numpy as np
import pytest

from src.dlo_workbench.agent import AgentConfig
from src.dlo_workbench.goaldb import GoalDbSettings, generate_db
from src.dlo_workbench.scenario import ScenarioSettings, build_scenario
from src.dlo_workbench.softbody import MaterialParams
from src.dlo_workbench.trainer import TrainConfig, run_training

SMALL_CONFIG = """\
# 2x2x4 bar, tiny networks: fast end-to-end runs
scenario.cells = 2,2,4
scenario.max_episode_steps = 50
agent.hidden = 16,16,16
agent.batch_size = 8
agent.buffer_capacity = 500
train.workers = 2
train.episodes = 2
train.steps_per_episode = 10
train.checkpoint_every = 1
goaldb.grid = 2,2,2
goaldb.settle_max_steps = 3000
evaluation.episodes = 5
"""


@pytest.fixture(autouse=True)
def temp_registry(tmp_path, monkeypatch):
    """
    Redirect registry.REGISTRY_PATH and the default runs directory to temp paths.

    This fixture is autouse so every test automatically gets a fresh,
    empty registry, completely isolated from data/runs.db.
    """
    import src.dlo_workbench.config as config_module
    import src.dlo_workbench.registry as registry_module
    import src.dlo_workbench.workflows as workflows_module

    temp_db = tmp_path / "test_runs.db"
    monkeypatch.setattr(registry_module, "REGISTRY_PATH", temp_db)
    monkeypatch.setattr(config_module, "RUNS_DIR", tmp_path / "runs")
    monkeypatch.setattr(workflows_module, "RUNS_DIR", tmp_path / "runs")

    registry_module.init_database()

    yield temp_db


# ---------------------------------------------------------------------------
# Scenario helpers
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def small_settings():
    """2x2x4 bar, two selected nodes, short episodes."""
    return ScenarioSettings(cells=(2, 2, 4), num_nodes=2, max_episode_steps=50)


@pytest.fixture(scope="session")
def small_scenario(small_settings):
    return build_scenario(MaterialParams(), small_settings)


@pytest.fixture(scope="session")
def default_scenario():
    """The full 2x2x12 bar with default settings, settled under gravity."""
    return build_scenario()


@pytest.fixture(scope="session")
def desk_scale_training(default_scenario, tmp_path_factory):
    """
    8 workers, 40 episodes of 150 steps on a 112-record small-box database.

    Shared by the slow learning and evaluation tests so the run happens once.
    """
    db = generate_db(default_scenario, default_scenario.box("small"), (4, 7, 4),
                     GoalDbSettings(workers=8))
    cfg = TrainConfig(workers=8, episodes=40, steps_per_episode=150, seed=0)
    result = run_training(cfg, default_scenario, db, tmp_path_factory.mktemp("desk_scale"))
    return db, result


@pytest.fixture(scope="session")
def small_db(small_scenario):
    """12-record database over the small box."""
    settings = GoalDbSettings(settle_max_steps=3000, settle_vel_tol=1e-6)
    return generate_db(small_scenario, small_scenario.box("small"), (2, 3, 2), settings)


@pytest.fixture()
def tiny_agent_config():
    """Small networks and batches for fast agent and trainer tests."""
    return AgentConfig(hidden=(16, 16, 16), batch_size=8, buffer_capacity=500)


@pytest.fixture()
def small_config_file(tmp_path):
    path = tmp_path / "small.conf"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
