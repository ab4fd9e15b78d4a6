"""
DDPG agent: exploration noise, replay memory, Bellman targets, critic and
policy losses, target-network maintenance and checkpoints.

Losses return gradients without applying them; `apply_updates` is the only
place weights change.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neural
from .errors import (
    BufferNotReadyError,
    CheckpointFormatError,
    ConfigError,
    DimensionMismatchError,
    FingerprintMismatchError,
    NonFiniteLossError,
)
from .neural import AdamState, MlpGradients, MlpSpec, MlpWeights

logger = logging.getLogger(__name__)

ACTION_DIM = 3
CHECKPOINT_FORMAT_VERSION = "agentckpt v1"
UPDATE_EVENTS = ("critic", "actor", "targets")


# ============================================================
# Configuration and data
# ============================================================

@dataclass(frozen=True)
class AgentConfig:
    """DDPG hyperparameters."""

    gamma: float = 0.99
    tau: float = 0.01
    batch_size: int = 128
    buffer_capacity: int = 50000
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    hidden: tuple[int, ...] = (256, 256, 256)
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    ou_mu: float = 0.0
    ou_dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0.9 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must be in [0.9, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ConfigError("batch_size and buffer_capacity must be >= 1")
        if not (self.actor_lr > 0 and self.critic_lr > 0):
            raise ConfigError("learning rates must be > 0")
        if not self.ou_theta > 0 or self.ou_sigma < 0:
            raise ConfigError("OU noise needs theta > 0 and sigma >= 0")


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class Batch:
    """N transitions stacked row-wise."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_transitions(cls, transitions: list[Transition]) -> Batch:
        return cls(
            states=np.stack([np.asarray(t.state, dtype=np.float64) for t in transitions]),
            actions=np.stack([np.asarray(t.action, dtype=np.float64) for t in transitions]),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=np.stack([np.asarray(t.next_state, dtype=np.float64) for t in transitions]),
            dones=np.array([float(bool(t.done)) for t in transitions]),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int = ACTION_DIM):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.state_dim = state_dim
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity)
        self.size = 0
        self._next = 0

    def __len__(self) -> int:
        return self.size

    def store(self, t: Transition) -> None:
        state = np.asarray(t.state, dtype=np.float64)
        next_state = np.asarray(t.next_state, dtype=np.float64)
        if state.shape != (self.state_dim,) or next_state.shape != (self.state_dim,):
            raise DimensionMismatchError(
                f"transition state dim {state.shape} / {next_state.shape},"
                f" buffer expects {self.state_dim}"
            )
        i = self._next
        self.states[i] = state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = next_state
        self.dones[i] = float(bool(t.done))
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_batch(self, n: int, seed) -> Batch:
        """Uniform draw with replacement; `seed` is a Generator or a seed for one."""
        if self.size < n:
            raise BufferNotReadyError(f"buffer holds {self.size} transitions, batch needs {n}")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        idx = rng.integers(0, self.size, size=n)
        return Batch(
            self.states[idx].copy(),
            self.actions[idx].copy(),
            self.rewards[idx].copy(),
            self.next_states[idx].copy(),
            self.dones[idx].copy(),
        )


@dataclass
class OuNoise:
    """Ornstein-Uhlenbeck process over the 3 action components."""

    theta: float = 0.15
    sigma: float = 0.2
    mu: np.ndarray = field(default_factory=lambda: np.zeros(ACTION_DIM))
    dt: float = 1.0
    rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False)
    state: np.ndarray | None = None

    def __post_init__(self):
        if not self.theta > 0 or self.sigma < 0:
            raise ValueError("OU noise needs theta > 0 and sigma >= 0")
        self.mu = np.broadcast_to(np.asarray(self.mu, dtype=np.float64), (ACTION_DIM,)).copy()
        if self.state is None:
            self.state = self.mu.copy()

    def reset(self) -> None:
        self.state = self.mu.copy()


def ou_sample(noise: OuNoise) -> np.ndarray:
    """x <- x + theta (mu - x) dt + sigma sqrt(dt) N(0, 1)."""
    noise.state = (
        noise.state
        + noise.theta * (noise.mu - noise.state) * noise.dt
        + noise.sigma * np.sqrt(noise.dt) * noise.rng.standard_normal(ACTION_DIM)
    )
    return noise.state.copy()


# ============================================================
# Agent
# ============================================================

@dataclass
class DdpgAgent:
    config: AgentConfig
    actor: MlpWeights
    critic: MlpWeights
    actor_target: MlpWeights
    critic_target: MlpWeights
    actor_opt: AdamState
    critic_opt: AdamState
    noise: OuNoise
    buffer: ReplayBuffer
    hooks: list[Callable[[str], None]] = field(default_factory=list, repr=False)

    @property
    def state_dim(self) -> int:
        return self.actor.spec.input_dim

    def networks(self) -> dict[str, MlpWeights]:
        return {
            "actor": self.actor,
            "critic": self.critic,
            "actor_target": self.actor_target,
            "critic_target": self.critic_target,
        }

    def optimizers(self) -> dict[str, AdamState]:
        return {"actor_opt": self.actor_opt, "critic_opt": self.critic_opt}


def network_specs(state_dim: int, config: AgentConfig) -> tuple[MlpSpec, MlpSpec]:
    """Actor: state -> tanh action. Critic: [state, action] -> Q."""
    actor = MlpSpec(state_dim, ACTION_DIM, config.hidden, output_activation="tanh")
    critic = MlpSpec(state_dim + ACTION_DIM, 1, config.hidden, output_activation="identity")
    return actor, critic


def _make_noise(config: AgentConfig, noise_seed) -> OuNoise:
    return OuNoise(
        theta=config.ou_theta, sigma=config.ou_sigma, mu=np.full(ACTION_DIM, config.ou_mu),
        dt=config.ou_dt, rng=np.random.default_rng(noise_seed),
    )


def make_agent(state_dim: int, config: AgentConfig, seed: int, noise_seed=None) -> DdpgAgent:
    """
    Fresh agent; network weights depend only on `seed`, so replicas built
    with the same seed start bit-identical whatever their noise streams.
    """
    actor_spec, critic_spec = network_specs(state_dim, config)
    actor = neural.init_weights(actor_spec, [seed, 0])
    critic = neural.init_weights(critic_spec, [seed, 1])
    return DdpgAgent(
        config=config,
        actor=actor,
        critic=critic,
        actor_target=actor.copy(),
        critic_target=critic.copy(),
        actor_opt=AdamState.for_weights(actor, config.actor_lr),
        critic_opt=AdamState.for_weights(critic, config.critic_lr),
        noise=_make_noise(config, noise_seed if noise_seed is not None else [seed, 2]),
        buffer=ReplayBuffer(config.buffer_capacity, state_dim),
    )


def replicate_agent(agent: DdpgAgent, noise_seed) -> DdpgAgent:
    """Deep copy of networks and optimizer states with an empty buffer and its own noise."""
    return DdpgAgent(
        config=agent.config,
        actor=agent.actor.copy(),
        critic=agent.critic.copy(),
        actor_target=agent.actor_target.copy(),
        critic_target=agent.critic_target.copy(),
        actor_opt=agent.actor_opt.copy(),
        critic_opt=agent.critic_opt.copy(),
        noise=_make_noise(agent.config, noise_seed),
        buffer=ReplayBuffer(agent.config.buffer_capacity, agent.state_dim),
    )


# ============================================================
# Acting
# ============================================================

def select_action(agent: DdpgAgent, state, explore: bool) -> np.ndarray:
    """Actor output, plus clamped OU noise when exploring."""
    action, _ = neural.forward(agent.actor, np.asarray(state, dtype=np.float64).ravel())
    if explore:
        action = np.clip(action + ou_sample(agent.noise), -1.0, 1.0)
    return action


# ============================================================
# Losses
# ============================================================

def _check_batch(agent: DdpgAgent, batch: Batch) -> int:
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if batch.states.shape != (n, agent.state_dim) or batch.actions.shape != (n, ACTION_DIM):
        raise DimensionMismatchError(
            f"batch shapes {batch.states.shape}/{batch.actions.shape} do not fit the agent"
        )
    return n


def bellman_targets(agent: DdpgAgent, batch: Batch) -> np.ndarray:
    """Q_B = r + gamma * Q'(s', mu'(s')) * (1 - d), from the target networks only."""
    _check_batch(agent, batch)
    next_actions, _ = neural.forward(agent.actor_target, batch.next_states)
    q_next, _ = neural.forward(agent.critic_target, np.hstack([batch.next_states, next_actions]))
    return batch.rewards + agent.config.gamma * q_next[:, 0] * (1.0 - batch.dones)


def critic_update(agent: DdpgAgent, batch: Batch) -> tuple[float, MlpGradients]:
    """MSE between Bellman targets and Q(s, a); gradients for the critic only."""
    n = _check_batch(agent, batch)
    targets = bellman_targets(agent, batch)
    q, cache = neural.forward(agent.critic, np.hstack([batch.states, batch.actions]))
    diff = q[:, 0] - targets
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"critic loss is {loss}")
    grads, _ = neural.backward(agent.critic, cache, (2.0 / n * diff)[:, None])
    return loss, grads


def policy_update(agent: DdpgAgent, batch: Batch) -> tuple[float, MlpGradients]:
    """-mean Q(s, mu(s)); the gradient flows through the critic's action input into the actor."""
    n = _check_batch(agent, batch)
    actions, actor_cache = neural.forward(agent.actor, batch.states)
    q, critic_cache = neural.forward(agent.critic, np.hstack([batch.states, actions]))
    loss = -float(np.mean(q[:, 0]))
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"policy loss is {loss}")
    _, input_grad = neural.backward(agent.critic, critic_cache, np.full((n, 1), -1.0 / n))
    grads, _ = neural.backward(agent.actor, actor_cache, input_grad[:, agent.state_dim:])
    return loss, grads


def apply_updates(
    agent: DdpgAgent, critic_grads: MlpGradients, actor_grads: MlpGradients
) -> None:
    """ADAM on the critic, ADAM on the actor, then one Polyak step of both targets."""
    neural.adam_step(agent.critic, critic_grads, agent.critic_opt)
    _notify(agent, "critic")
    neural.adam_step(agent.actor, actor_grads, agent.actor_opt)
    _notify(agent, "actor")
    neural.polyak_update(agent.critic_target, agent.critic, agent.config.tau)
    neural.polyak_update(agent.actor_target, agent.actor, agent.config.tau)
    _notify(agent, "targets")


def _notify(agent: DdpgAgent, event: str) -> None:
    for hook in agent.hooks:
        hook(event)


# ============================================================
# Checkpoints
# ============================================================

def save_agent(agent: DdpgAgent, path: str | Path, metadata: dict | None = None) -> Path:
    """
    Write the four networks, both optimizer states and a JSON metadata block.

    The metadata always carries the agent hyperparameters; callers add the
    environment fingerprint, episode counter and config hash.
    """
    meta = {"agent": dataclasses.asdict(agent.config), **(metadata or {})}
    sections = {name: neural.serialize_weights(net) for name, net in agent.networks().items()}
    sections.update(
        {name: neural.serialize_adam(state) for name, state in agent.optimizers().items()}
    )
    sections["metadata"] = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(neural.pack_sections(CHECKPOINT_FORMAT_VERSION, sections))
    logger.info("Saved agent checkpoint to %s", path)
    return path


def load_agent(
    path: str | Path,
    expected_fingerprint: str | None = None,
    allow_mismatch: bool = False,
    noise_seed=None,
) -> tuple[DdpgAgent, dict]:
    """
    Read a checkpoint written by `save_agent`.

    Returns:
        (agent with an empty replay buffer, metadata dict)
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(f"checkpoint not found: {path}")
    sections = neural.unpack_sections(path.read_bytes(), CHECKPOINT_FORMAT_VERSION)
    required = ("actor", "critic", "actor_target", "critic_target",
                "actor_opt", "critic_opt", "metadata")
    missing = [name for name in required if name not in sections]
    if missing:
        raise CheckpointFormatError(f"checkpoint {path} lacks sections {missing}")
    try:
        meta = json.loads(sections["metadata"].decode())
        config = AgentConfig(**meta["agent"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"bad checkpoint metadata in {path}: {exc}") from exc

    found = meta.get("env_fingerprint")
    if expected_fingerprint is not None and found != expected_fingerprint:
        message = (
            f"checkpoint {path} was trained on scenario {found}, current scenario is"
            f" {expected_fingerprint}"
        )
        if not allow_mismatch:
            raise FingerprintMismatchError(message)
        logger.warning("%s (override accepted)", message)

    actor = neural.deserialize_weights(sections["actor"])
    critic = neural.deserialize_weights(sections["critic"])
    actor_spec, critic_spec = network_specs(actor.spec.input_dim, config)
    if actor.spec != actor_spec or critic.spec != critic_spec:
        raise CheckpointFormatError("stored networks do not match the stored hyperparameters")
    agent = DdpgAgent(
        config=config,
        actor=actor,
        critic=critic,
        actor_target=neural.deserialize_weights(sections["actor_target"], actor_spec),
        critic_target=neural.deserialize_weights(sections["critic_target"], critic_spec),
        actor_opt=neural.deserialize_adam(sections["actor_opt"], actor),
        critic_opt=neural.deserialize_adam(sections["critic_opt"], critic),
        noise=_make_noise(config, noise_seed),
        buffer=ReplayBuffer(config.buffer_capacity, actor_spec.input_dim),
    )
    return agent, meta
