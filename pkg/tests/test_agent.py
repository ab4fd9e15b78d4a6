"""
Tests for the DDPG agent: replay memory, OU noise, acting, Bellman targets,
critic and policy losses, update ordering and checkpoints.
"""

import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.dlo_workbench import neural
from src.dlo_workbench.agent import (
    AgentConfig,
    Batch,
    OuNoise,
    ReplayBuffer,
    Transition,
    apply_updates,
    bellman_targets,
    critic_update,
    load_agent,
    make_agent,
    ou_sample,
    policy_update,
    replicate_agent,
    save_agent,
    select_action,
)
from src.dlo_workbench.errors import (
    BufferNotReadyError,
    CheckpointFormatError,
    ConfigError,
    DimensionMismatchError,
    FingerprintMismatchError,
)
from src.dlo_workbench.neural import MlpGradients

STATE_DIM = 12


def _transition(rng, state_dim=STATE_DIM, done=False):
    return Transition(
        state=rng.normal(size=state_dim),
        action=rng.uniform(-1, 1, 3),
        reward=-float(rng.uniform(0, 0.3)),
        next_state=rng.normal(size=state_dim),
        done=done,
    )


def _batch(rng, n=4, state_dim=STATE_DIM):
    return Batch.from_transitions(
        [_transition(rng, state_dim, done=bool(i % 3 == 2)) for i in range(n)]
    )


def _zero_final_layer(net, bias):
    net.weights[-1][...] = 0.0
    net.biases[-1][...] = bias


def _kink_free(agent, batch, margin=1e-3):
    """True when no ReLU pre-activation touched by either loss sits near zero."""
    actions, actor_cache = neural.forward(agent.actor, batch.states)
    _, on_policy = neural.forward(agent.critic, np.hstack([batch.states, actions]))
    _, logged = neural.forward(agent.critic, np.hstack([batch.states, batch.actions]))
    caches = (actor_cache, on_policy, logged)
    return all(
        np.abs(z).min() > margin for cache in caches for z in cache.pre_activations[:-1]
    )


def _smooth_agent(config):
    for seed in range(200):
        agent = make_agent(STATE_DIM, config, seed)
        rng = np.random.default_rng(seed)
        agent.critic.weights[-1] = rng.uniform(-0.5, 0.5, agent.critic.weights[-1].shape)
        agent.actor.weights[-1] = rng.uniform(-0.5, 0.5, agent.actor.weights[-1].shape)
        batch = _batch(rng)
        if _kink_free(agent, batch):
            return agent, batch
    raise AssertionError("no kink-free case found")


def _numeric_grads(net, loss_fn, h=1e-6):
    grads = MlpGradients.zeros_like(net)
    for (_, _, param), (_, _, grad) in zip(net.arrays(), grads.arrays()):
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + h
            plus = loss_fn()
            param[index] = original - h
            minus = loss_fn()
            param[index] = original
            grad[index] = (plus - minus) / (2 * h)
    return grads


# ============================================================
# Configuration
# ============================================================

class TestAgentConfig:
    def test_defaults(self):
        config = AgentConfig()
        assert (config.gamma, config.tau, config.batch_size) == (0.99, 0.01, 128)
        assert (config.actor_lr, config.critic_lr) == (1e-4, 1e-3)
        assert config.hidden == (256, 256, 256)

    @pytest.mark.parametrize("kwargs", [
        {"gamma": 1.0}, {"gamma": 0.5}, {"tau": 0.0}, {"batch_size": 0}, {"actor_lr": -1.0},
    ])
    def test_invalid_values_raise(self, kwargs):
        with pytest.raises(ConfigError):
            AgentConfig(**kwargs)


# ============================================================
# Replay memory
# ============================================================

class TestReplayBuffer:
    """Tests for ReplayBuffer."""

    def test_fifo_eviction(self, rng):
        buffer = ReplayBuffer(2, STATE_DIM)
        first, second, third = (_transition(rng) for _ in range(3))
        for t in (first, second, third):
            buffer.store(t)
        assert len(buffer) == 2
        stored = {tuple(s) for s in buffer.states}
        assert tuple(first.state) not in stored
        assert {tuple(second.state), tuple(third.state)} == stored

    def test_size_capped_at_capacity(self, rng):
        buffer = ReplayBuffer(5, STATE_DIM)
        for count in range(1, 9):
            buffer.store(_transition(rng))
            assert len(buffer) == min(count, 5)

    def test_sample_from_single_transition(self, rng):
        buffer = ReplayBuffer(10, STATE_DIM)
        t = _transition(rng)
        buffer.store(t)
        batch = buffer.sample_batch(1, 0)
        assert_array_equal(batch.states[0], t.state)
        assert batch.rewards[0] == t.reward

    def test_underfilled_buffer_raises(self, rng):
        buffer = ReplayBuffer(10, STATE_DIM)
        buffer.store(_transition(rng))
        with pytest.raises(BufferNotReadyError):
            buffer.sample_batch(2, 0)

    def test_same_seed_same_batch(self, rng):
        buffer = ReplayBuffer(50, STATE_DIM)
        for _ in range(50):
            buffer.store(_transition(rng))
        assert_array_equal(buffer.sample_batch(8, [1, 2]).states,
                           buffer.sample_batch(8, [1, 2]).states)

    def test_uniform_draws(self):
        buffer = ReplayBuffer(100, 1)
        for i in range(100):
            buffer.store(Transition(np.array([float(i)]), np.zeros(3), 0.0,
                                    np.array([float(i)]), False))
        batch = buffer.sample_batch(100_000, 42)
        counts = np.bincount(batch.states[:, 0].astype(int), minlength=100)
        chi_square = np.sum((counts - 1000.0) ** 2 / 1000.0)
        assert chi_square < 150  # 99 degrees of freedom

    def test_wrong_state_dim_raises(self, rng):
        buffer = ReplayBuffer(10, STATE_DIM)
        with pytest.raises(DimensionMismatchError):
            buffer.store(_transition(rng, state_dim=STATE_DIM + 1))


# ============================================================
# Exploration noise
# ============================================================

class TestOuNoise:
    """Tests for OuNoise and ou_sample()."""

    def test_zero_sigma_at_mean_stays(self):
        noise = OuNoise(theta=0.15, sigma=0.0, mu=np.full(3, 0.3))
        for _ in range(10):
            assert_array_equal(ou_sample(noise), np.full(3, 0.3))

    def test_unit_theta_decays_in_one_step(self):
        noise = OuNoise(theta=1.0, sigma=0.0, state=np.ones(3))
        assert_array_equal(ou_sample(noise), np.zeros(3))

    def test_reset_returns_to_mean(self):
        noise = OuNoise(rng=np.random.default_rng(0))
        ou_sample(noise)
        noise.reset()
        assert_array_equal(noise.state, np.zeros(3))

    def test_stationary_statistics(self):
        noise = OuNoise(theta=0.15, sigma=0.2, rng=np.random.default_rng(0))
        samples = np.array([ou_sample(noise)[0] for _ in range(100_000)])
        lag_one = np.corrcoef(samples[:-1], samples[1:])[0, 1]
        assert lag_one == pytest.approx(0.85, rel=0.02)
        assert np.var(samples) == pytest.approx(0.04 / (1 - 0.85 ** 2), rel=0.05)

    def test_invalid_parameters_raise(self):
        with pytest.raises(ValueError):
            OuNoise(theta=0.0)


# ============================================================
# Acting
# ============================================================

class TestSelectAction:
    """Tests for select_action()."""

    def test_greedy_action_in_range(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        for _ in range(20):
            action = select_action(agent, rng.normal(size=STATE_DIM), explore=False)
            assert action.shape == (3,)
            assert np.all(np.abs(action) < 1.0)

    def test_greedy_does_not_touch_noise(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        state = rng.normal(size=STATE_DIM)
        select_action(agent, state, explore=False)
        assert_array_equal(agent.noise.state, np.zeros(3))

    def test_zero_noise_exploration_equals_greedy(self, rng):
        config = AgentConfig(hidden=(16, 16, 16), ou_sigma=0.0)
        agent = make_agent(STATE_DIM, config, 0)
        state = rng.normal(size=STATE_DIM)
        assert_array_equal(select_action(agent, state, True), select_action(agent, state, False))

    def test_exploration_is_clamped(self, rng):
        config = AgentConfig(hidden=(16, 16, 16), ou_mu=5.0, ou_sigma=0.0)
        agent = make_agent(STATE_DIM, config, 0)
        action = select_action(agent, rng.normal(size=STATE_DIM), explore=True)
        assert_array_equal(action, np.ones(3))

    def test_replicas_share_weights(self, tiny_agent_config):
        a = make_agent(STATE_DIM, tiny_agent_config, 5, noise_seed=[5, 2, 0])
        b = make_agent(STATE_DIM, tiny_agent_config, 5, noise_seed=[5, 2, 1])
        for name, net in a.networks().items():
            assert neural.weight_distance(net, b.networks()[name]) == 0.0


# ============================================================
# Losses
# ============================================================

class TestBellmanTargets:
    """Tests for bellman_targets()."""

    def test_terminal_is_reward(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        batch = _batch(rng)
        batch.dones[:] = 1.0
        assert_array_equal(bellman_targets(agent, batch), batch.rewards)

    def test_known_value(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        _zero_final_layer(agent.critic_target, 2.0)
        batch = _batch(rng, n=1)
        batch.rewards[:] = -0.5
        batch.dones[:] = 0.0
        assert bellman_targets(agent, batch)[0] == pytest.approx(1.48, abs=1e-12)

    def test_matches_loop_oracle(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        batch = _batch(rng, n=6)
        expected = []
        for s_next, r, d in zip(batch.next_states, batch.rewards, batch.dones):
            a_next, _ = neural.forward(agent.actor_target, s_next)
            q_next, _ = neural.forward(agent.critic_target, np.concatenate([s_next, a_next]))
            expected.append(r + 0.99 * q_next[0] * (1 - d))
        assert_allclose(bellman_targets(agent, batch), expected, atol=1e-12)

    def test_ignores_online_networks(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        batch = _batch(rng)
        before = bellman_targets(agent, batch)
        _zero_final_layer(agent.critic, 7.0)
        _zero_final_layer(agent.actor, 0.5)
        assert_array_equal(bellman_targets(agent, batch), before)


class TestCriticUpdate:
    """Tests for critic_update()."""

    def test_exact_targets_give_zero_loss(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        batch = _batch(rng)
        batch.dones[:] = 1.0
        q, _ = neural.forward(agent.critic, np.hstack([batch.states, batch.actions]))
        batch.rewards[:] = q[:, 0]
        loss, grads = critic_update(agent, batch)
        assert loss == 0.0
        assert np.all(grads.flat() == 0.0)

    def test_unit_error_gives_unit_loss(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        _zero_final_layer(agent.critic, 0.0)
        batch = _batch(rng, n=1)
        batch.rewards[:] = 1.0
        batch.dones[:] = 1.0
        loss, _ = critic_update(agent, batch)
        assert loss == 1.0

    def test_gradient_matches_finite_differences(self, tiny_agent_config):
        agent, batch = _smooth_agent(tiny_agent_config)
        _, analytic = critic_update(agent, batch)
        numeric = _numeric_grads(agent.critic, lambda: critic_update(agent, batch)[0])
        for (_, _, a), (_, _, n) in zip(analytic.arrays(), numeric.arrays()):
            assert_allclose(a, n, rtol=1e-5, atol=1e-8)

    def test_does_not_modify_weights(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        before = {k: neural.serialize_weights(v) for k, v in agent.networks().items()}
        critic_update(agent, _batch(rng))
        after = {k: neural.serialize_weights(v) for k, v in agent.networks().items()}
        assert before == after


class TestPolicyUpdate:
    """Tests for policy_update()."""

    def test_loss_matches_loop_oracle(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        batch = _batch(rng, n=5)
        expected = 0.0
        for s in batch.states:
            a, _ = neural.forward(agent.actor, s)
            q, _ = neural.forward(agent.critic, np.concatenate([s, a]))
            expected -= q[0] / 5
        loss, _ = policy_update(agent, batch)
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_differences(self, tiny_agent_config):
        agent, batch = _smooth_agent(tiny_agent_config)
        _, analytic = policy_update(agent, batch)
        numeric = _numeric_grads(agent.actor, lambda: policy_update(agent, batch)[0])
        for (_, _, a), (_, _, n) in zip(analytic.arrays(), numeric.arrays()):
            assert_allclose(a, n, rtol=1e-5, atol=1e-8)

    def test_critic_unchanged(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        before = neural.serialize_weights(agent.critic)
        policy_update(agent, _batch(rng))
        assert neural.serialize_weights(agent.critic) == before

    def test_action_blind_critic_gives_zero_gradient(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        agent.critic.weights[0][STATE_DIM:, :] = 0.0
        _, grads = policy_update(agent, _batch(rng))
        assert np.all(grads.flat() == 0.0)


# ============================================================
# Updates
# ============================================================

class TestApplyUpdates:
    """Tests for apply_updates()."""

    def test_hook_order(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        events = []
        agent.hooks.append(events.append)
        batch = _batch(rng)
        _, critic_grads = critic_update(agent, batch)
        _, actor_grads = policy_update(agent, batch)
        apply_updates(agent, critic_grads, actor_grads)
        assert events == ["critic", "actor", "targets"]

    def test_zero_gradients_only_move_targets(self, tiny_agent_config):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        other = make_agent(STATE_DIM, tiny_agent_config, 1)
        agent.actor_target = other.actor_target
        agent.critic_target = other.critic_target
        actor_before = neural.serialize_weights(agent.actor)
        start = neural.weight_distance(agent.actor_target, agent.actor)
        for _ in range(50):
            apply_updates(agent, MlpGradients.zeros_like(agent.critic),
                          MlpGradients.zeros_like(agent.actor))
        assert neural.serialize_weights(agent.actor) == actor_before
        lag = neural.weight_distance(agent.actor_target, agent.actor)
        assert lag == pytest.approx(start * 0.99 ** 50, rel=1e-9)

    def test_learning_moves_online_networks(self, tiny_agent_config, rng):
        agent = make_agent(STATE_DIM, tiny_agent_config, 0)
        before = agent.critic.copy()
        batch = _batch(rng)
        _, critic_grads = critic_update(agent, batch)
        _, actor_grads = policy_update(agent, batch)
        apply_updates(agent, critic_grads, actor_grads)
        assert neural.weight_distance(agent.critic, before) > 0
        assert agent.critic_opt.step == 1
        assert agent.actor_opt.step == 1


# ============================================================
# Checkpoints
# ============================================================

class TestCheckpoint:
    """Tests for save_agent() and load_agent()."""

    def _trained(self, config, rng):
        agent = make_agent(STATE_DIM, config, 3)
        for _ in range(3):
            batch = _batch(rng)
            _, critic_grads = critic_update(agent, batch)
            _, actor_grads = policy_update(agent, batch)
            apply_updates(agent, critic_grads, actor_grads)
        return agent

    def test_round_trip(self, tiny_agent_config, rng, tmp_path):
        agent = self._trained(tiny_agent_config, rng)
        path = save_agent(agent, tmp_path / "agent.ckpt",
                          {"env_fingerprint": "abc", "episode": 4})
        loaded, meta = load_agent(path, expected_fingerprint="abc")

        assert loaded.config == agent.config
        assert meta["episode"] == 4
        assert meta["agent"]["batch_size"] == 8
        for name, net in agent.networks().items():
            assert neural.serialize_weights(loaded.networks()[name]) == neural.serialize_weights(
                net
            )
        assert loaded.actor_opt.step == 3
        assert_array_equal(loaded.critic_opt.v_weights[0], agent.critic_opt.v_weights[0])
        assert len(loaded.buffer) == 0

    def test_fingerprint_mismatch_raises(self, tiny_agent_config, rng, tmp_path):
        path = save_agent(make_agent(STATE_DIM, tiny_agent_config, 0), tmp_path / "a.ckpt",
                          {"env_fingerprint": "abc"})
        with pytest.raises(FingerprintMismatchError):
            load_agent(path, expected_fingerprint="xyz")

    def test_fingerprint_override_warns(self, tiny_agent_config, tmp_path, caplog):
        path = save_agent(make_agent(STATE_DIM, tiny_agent_config, 0), tmp_path / "a.ckpt",
                          {"env_fingerprint": "abc"})
        with caplog.at_level(logging.WARNING):
            load_agent(path, expected_fingerprint="xyz", allow_mismatch=True)
        assert "override accepted" in caplog.text

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(CheckpointFormatError):
            load_agent(tmp_path / "missing.ckpt")

    def test_foreign_file_raises(self, tmp_path):
        path = tmp_path / "notes.ckpt"
        path.write_bytes(b"hello\n")
        with pytest.raises(CheckpointFormatError):
            load_agent(path)

    def test_replica_copies_optimizer_state(self, tiny_agent_config, rng):
        agent = self._trained(tiny_agent_config, rng)
        replica = replicate_agent(agent, noise_seed=[9, 2, 1])
        assert replica.critic_opt.step == agent.critic_opt.step
        assert neural.weight_distance(replica.actor, agent.actor) == 0.0
        replica.actor.weights[0][0, 0] += 1.0
        assert agent.actor.weights[0][0, 0] != replica.actor.weights[0][0, 0]
