"""
Tests for synchronized data-parallel training: the gradient reduction,
replica consistency, and end-to-end runs on the small scenario.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.dlo_workbench import neural
from src.dlo_workbench.agent import (
    Transition,
    load_agent,
    make_agent,
    replicate_agent,
)
from src.dlo_workbench.errors import ConfigError, DimensionMismatchError
from src.dlo_workbench.neural import MlpGradients, add_gradients
from src.dlo_workbench.trainer import (
    LEARNING_CURVE_COLUMNS,
    TrainConfig,
    allreduce_sum,
    compute_gradients,
    read_learning_curve,
    replica_consistency_check,
    run_training,
    synchronized_update,
)

STATE_DIM = 18


def _random_grads(net, rng):
    grads = MlpGradients.zeros_like(net)
    for _, _, g in grads.arrays():
        g[...] = rng.normal(size=g.shape)
    return grads


def _replicas(config, count, seed=0):
    base = make_agent(STATE_DIM, config, seed)
    return [replicate_agent(base, [seed, 2, w]) for w in range(count)]


def _fill(agent, rng, count=40):
    for _ in range(count):
        agent.buffer.store(Transition(
            rng.normal(size=STATE_DIM), rng.uniform(-1, 1, 3), -float(rng.uniform(0, 0.3)),
            rng.normal(size=STATE_DIM), bool(rng.random() < 0.1),
        ))


def _small_train_config(agent_config, **overrides):
    values = {
        "workers": 2, "episodes": 2, "steps_per_episode": 10, "agent": agent_config,
        "checkpoint_every": 1, "seed": 3,
    }
    values.update(overrides)
    return TrainConfig(**values)


# ============================================================
# Configuration
# ============================================================

class TestTrainConfig:
    def test_defaults_are_full_scale(self):
        cfg = TrainConfig()
        assert (cfg.workers, cfg.episodes, cfg.steps_per_episode) == (32, 63, 300)
        assert cfg.reduction == "sum"

    @pytest.mark.parametrize("kwargs", [
        {"workers": 0}, {"episodes": 0}, {"reduction": "max"}, {"updates_per_step": -1},
    ])
    def test_invalid_values_raise(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


# ============================================================
# Gradient reduction
# ============================================================

class TestAllreduceSum:
    """Tests for allreduce_sum()."""

    @pytest.fixture()
    def net(self, tiny_agent_config):
        return make_agent(STATE_DIM, tiny_agent_config, 0).critic

    def test_identical_gradients_scale_by_workers(self, net, rng):
        g = _random_grads(net, rng)
        total = allreduce_sum([g, g, g, g])
        assert_allclose(total.flat(), 4 * g.flat(), rtol=1e-15)
        exact = allreduce_sum([g, g, g, g], compensated=True)
        assert_array_equal(exact.flat(), 4 * g.flat())

    def test_opposite_gradients_cancel(self, net, rng):
        g = _random_grads(net, rng)
        negated = neural.scale_gradients(g, -1.0)
        assert np.all(allreduce_sum([g, negated]).flat() == 0.0)

    def test_worker_order(self, net, rng):
        grads = [_random_grads(net, rng) for _ in range(6)]
        shuffled = [grads[i] for i in (4, 1, 5, 0, 3, 2)]
        assert_allclose(allreduce_sum(grads).flat(), allreduce_sum(shuffled).flat(), atol=1e-12)
        assert_array_equal(
            allreduce_sum(grads, compensated=True).flat(),
            allreduce_sum(shuffled, compensated=True).flat(),
        )

    def test_compensated_sum_keeps_small_terms(self, net):
        grads = []
        for value in (1e16, 1.0, -1e16):
            g = MlpGradients.zeros_like(net)
            for _, _, a in g.arrays():
                a[...] = value
            grads.append(g)
        assert np.all(allreduce_sum(grads).flat() == 0.0)
        assert np.all(allreduce_sum(grads, compensated=True).flat() == 1.0)

    def test_mean_reduction(self, net, rng):
        grads = [_random_grads(net, rng) for _ in range(4)]
        assert_allclose(allreduce_sum(grads, "mean").flat(), allreduce_sum(grads).flat() / 4,
                        rtol=1e-15)

    def test_inputs_untouched(self, net, rng):
        g = _random_grads(net, rng)
        before = g.flat().copy()
        allreduce_sum([g, g])
        assert_array_equal(g.flat(), before)

    def test_shape_mismatch_raises(self, net, rng, tiny_agent_config):
        actor = make_agent(STATE_DIM, tiny_agent_config, 0).actor
        with pytest.raises(DimensionMismatchError):
            allreduce_sum([_random_grads(net, rng), _random_grads(actor, rng)])

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            allreduce_sum([])


class TestParallelEquivalence:
    """Summed replica gradients equal one serial pass over all batches."""

    def test_sum_matches_serial_accumulation(self, tiny_agent_config, rng):
        agents = _replicas(tiny_agent_config, 4)
        for agent in agents:
            _fill(agent, rng)
        batches = [a.buffer.sample_batch(8, [0, w]) for w, a in enumerate(agents)]

        parallel = allreduce_sum([compute_gradients(a, b)[1] for a, b in zip(agents, batches)])

        serial = None
        for batch in batches:
            _, grads, _, _ = compute_gradients(agents[0], batch)
            serial = grads if serial is None else add_gradients(serial, grads)
        assert_allclose(parallel.flat(), serial.flat(), atol=1e-12)


# ============================================================
# Replica consistency
# ============================================================

class TestReplicaConsistency:
    """Tests for synchronized_update() and replica_consistency_check()."""

    def test_fresh_replicas_identical(self, tiny_agent_config):
        assert replica_consistency_check(_replicas(tiny_agent_config, 3)).consistent

    def test_identical_after_many_updates(self, tiny_agent_config, rng):
        agents = _replicas(tiny_agent_config, 3)
        for agent in agents:
            _fill(agent, rng)
        rngs = [np.random.default_rng([0, 3, w]) for w in range(3)]
        cfg = TrainConfig(workers=3, agent=tiny_agent_config)
        start = agents[0].critic.copy()
        for _ in range(100):
            synchronized_update(agents, rngs, cfg)
        report = replica_consistency_check(agents)
        assert report.consistent, report.describe()
        assert neural.weight_distance(agents[0].critic, start) > 0
        assert agents[2].critic_opt.step == 100

    def test_pinpoints_perturbed_element(self, tiny_agent_config):
        agents = _replicas(tiny_agent_config, 3)
        w = agents[2].critic.weights[1]
        w[3, 4] = np.nextafter(w[3, 4], np.inf)
        report = replica_consistency_check(agents)
        assert not report.consistent
        assert (report.replica, report.network, report.kind, report.layer, report.index) == (
            2, "critic", "weight", 1, (3, 4)
        )
        assert "replica 2" in report.describe()

    def test_detects_optimizer_drift(self, tiny_agent_config):
        agents = _replicas(tiny_agent_config, 2)
        agents[1].actor_opt.m_biases[0][2] = 1e-9
        report = replica_consistency_check(agents)
        assert (report.network, report.kind, report.layer, report.index) == (
            "actor_opt", "m_biases", 0, (2,)
        )

    def test_single_replica_is_consistent(self, tiny_agent_config):
        assert replica_consistency_check(_replicas(tiny_agent_config, 1)).consistent


# ============================================================
# Training loop
# ============================================================

class TestRunTraining:
    """End-to-end runs on the small scenario."""

    def test_writes_curve_and_checkpoints(self, small_scenario, small_db, tiny_agent_config,
                                          tmp_path):
        cfg = _small_train_config(tiny_agent_config)
        result = run_training(cfg, small_scenario, small_db, tmp_path)

        assert [s.episode for s in result.stats] == [0, 1]
        assert result.transitions == 2 * 2 * 10
        assert all(r <= 0.0 for s in result.stats for r in s.rewards)

        rows = read_learning_curve(result.curve_path)
        assert len(rows) == 2
        header = result.curve_path.read_text().splitlines()[0]
        assert tuple(header.split(",")) == LEARNING_CURVE_COLUMNS
        assert rows[1]["mean_reward"] == result.stats[1].mean_reward

        assert (tmp_path / "checkpoints" / "episode_0001.ckpt").exists()
        assert (tmp_path / "checkpoints" / "episode_0002.ckpt").exists()
        agent, meta = load_agent(result.checkpoint_path, small_scenario.fingerprint)
        assert meta["episode"] == 2
        assert meta["env_fingerprint"] == small_scenario.fingerprint

    def test_replicas_stay_identical(self, small_scenario, small_db, tiny_agent_config):
        result = run_training(_small_train_config(tiny_agent_config), small_scenario, small_db)
        assert replica_consistency_check(result.agents).consistent
        assert result.agents[0].critic_opt.step > 0

    def test_deterministic(self, small_scenario, small_db, tiny_agent_config, tmp_path):
        cfg = _small_train_config(tiny_agent_config)
        first = run_training(cfg, small_scenario, small_db, tmp_path / "a")
        second = run_training(cfg, small_scenario, small_db, tmp_path / "b")
        assert first.curve_path.read_bytes() == second.curve_path.read_bytes()
        assert first.checkpoint_path.read_bytes() == second.checkpoint_path.read_bytes()

    def test_thread_count_does_not_change_result(self, small_scenario, small_db,
                                                 tiny_agent_config):
        pooled = run_training(_small_train_config(tiny_agent_config, threads=2),
                              small_scenario, small_db)
        single = run_training(_small_train_config(tiny_agent_config, threads=1),
                              small_scenario, small_db)
        assert neural.serialize_weights(pooled.agents[0].actor) == neural.serialize_weights(
            single.agents[0].actor
        )

    def test_single_worker(self, small_scenario, small_db, tiny_agent_config):
        result = run_training(_small_train_config(tiny_agent_config, workers=1),
                              small_scenario, small_db)
        assert len(result.agents) == 1
        assert result.transitions == 20

    def test_resume_continues_episode_counter(self, small_scenario, small_db,
                                              tiny_agent_config, tmp_path):
        first = run_training(_small_train_config(tiny_agent_config), small_scenario, small_db,
                             tmp_path / "first")
        resumed = run_training(
            _small_train_config(tiny_agent_config, episodes=1,
                                resume_from=str(first.checkpoint_path)),
            small_scenario, small_db, tmp_path / "resumed",
        )
        assert [s.episode for s in resumed.stats] == [2]
        _, meta = load_agent(resumed.checkpoint_path)
        assert meta["episode"] == 3

    def test_needs_database(self, small_scenario, tiny_agent_config):
        with pytest.raises(ConfigError):
            run_training(_small_train_config(tiny_agent_config), small_scenario)

    def test_too_few_goals_raise(self, small_scenario, small_db, tiny_agent_config):
        cfg = _small_train_config(tiny_agent_config, workers=len(small_db) + 1)
        with pytest.raises(ConfigError):
            run_training(cfg, small_scenario, small_db)


@pytest.mark.slow
def test_desk_scale_training_improves_reward(desk_scale_training):
    """8 workers, 40 episodes of 150 steps on the default bar; no worker diverges."""
    _, result = desk_scale_training
    rewards = [s.mean_reward for s in result.stats]
    assert len(rewards) == 40
    assert np.mean(rewards[-4:]) > np.mean(rewards[:4])
    assert result.transitions == 8 * 40 * 150
    assert replica_consistency_check(result.agents).consistent
