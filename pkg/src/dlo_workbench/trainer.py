"""
Synchronized data-parallel DDPG training.

W workers each own an environment, an agent replica, a replay buffer and
their own noise and batch streams. At every synchronization point each
worker computes critic and actor gradients on its own batch; the gradients
are summed in worker-index order and every replica applies the identical
update, so all replicas keep bit-identical weights.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import (
    AgentConfig,
    DdpgAgent,
    Transition,
    apply_updates,
    critic_update,
    load_agent,
    make_agent,
    policy_update,
    replicate_agent,
    save_agent,
    select_action,
)
from .environment import Observation, ShapeEnv
from .errors import (
    ConfigError,
    DimensionMismatchError,
    SimulationDivergedError,
    TrainingAbortedError,
)
from .goaldb import DeformationDb, load_db, sample_goals
from .neural import MlpGradients

logger = logging.getLogger(__name__)

LEARNING_CURVE_COLUMNS = (
    "episode", "mean_reward", "min_reward", "max_reward", "mean_final_distance", "done_count",
)
REDUCTIONS = ("sum", "mean")

# Seed streams: default_rng([seed, stream, ...])
_GOAL_STREAM = 1
_NOISE_STREAM = 2
_BATCH_STREAM = 3


@dataclass(frozen=True)
class TrainConfig:
    """Defaults are the full-scale setup: 32 workers, 63 episodes of 300 transitions."""

    workers: int = 32
    episodes: int = 63
    steps_per_episode: int = 300
    updates_per_step: int = 1
    seed: int = 0
    db_path: str | None = None
    agent: AgentConfig = field(default_factory=AgentConfig)
    checkpoint_every: int = 10
    reduction: str = "sum"
    compensated: bool = False
    threads: int = 0
    resume_from: str | None = None
    allow_fingerprint_mismatch: bool = False

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.episodes < 1 or self.steps_per_episode < 1:
            raise ConfigError("episodes and steps_per_episode must be >= 1")
        if self.updates_per_step < 0:
            raise ConfigError("updates_per_step must be >= 0")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")


@dataclass
class EpisodeStats:
    episode: int
    rewards: list[float]
    final_distances: list[float]
    done_count: int
    diverged_workers: list[int] = field(default_factory=list)

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards))

    @property
    def min_reward(self) -> float:
        return float(np.min(self.rewards))

    @property
    def max_reward(self) -> float:
        return float(np.max(self.rewards))

    @property
    def mean_final_distance(self) -> float:
        return float(np.mean(self.final_distances))

    def row(self) -> list:
        return [
            self.episode,
            repr(self.mean_reward),
            repr(self.min_reward),
            repr(self.max_reward),
            repr(self.mean_final_distance),
            self.done_count,
        ]


@dataclass
class ConsistencyReport:
    consistent: bool
    replica: int | None = None
    network: str | None = None
    kind: str | None = None
    layer: int | None = None
    index: tuple[int, ...] | None = None

    def describe(self) -> str:
        if self.consistent:
            return "all replicas bit-identical"
        return (
            f"replica {self.replica} differs in {self.network} {self.kind} layer {self.layer}"
            f" at index {self.index}"
        )


@dataclass
class TrainingResult:
    stats: list[EpisodeStats]
    agents: list[DdpgAgent]
    checkpoint_path: Path | None = None
    curve_path: Path | None = None
    transitions: int = 0


@dataclass
class _Worker:
    index: int
    env: ShapeEnv
    agent: DdpgAgent
    batch_rng: np.random.Generator
    observation: Observation | None = None
    active: bool = False
    diverged: bool = False
    cumulative_reward: float = 0.0
    final_distance: float = float("nan")
    done: bool = False
    transitions: int = 0


# ============================================================
# Gradient synchronization
# ============================================================

def _compensated_sum(stacked: np.ndarray) -> np.ndarray:
    """
    Neumaier summation along axis 0.

    Values are sorted per element first, so the result is the same for any
    worker order.
    """
    ordered = np.sort(stacked, axis=0)
    total = ordered[0].copy()
    carry = np.zeros_like(total)
    for value in ordered[1:]:
        partial = total + value
        carry += np.where(np.abs(total) >= np.abs(value),
                          (total - partial) + value,
                          (value - partial) + total)
        total = partial
    return total + carry


def allreduce_sum(
    grads: list[MlpGradients], reduction: str = "sum", compensated: bool = False
) -> MlpGradients:
    """
    Elementwise sum over workers in index order.

    With compensated=True the sum carries a per-element error term
    (Neumaier) over value-sorted workers, so the result does not depend on
    worker order.
    """
    if not grads:
        raise ValueError("allreduce over zero workers")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    reference = [a.shape for _, _, a in grads[0].arrays()]
    for w, g in enumerate(grads[1:], start=1):
        if [a.shape for _, _, a in g.arrays()] != reference:
            raise DimensionMismatchError(f"worker {w} gradient shapes differ from worker 0")

    def reduce(arrays: list[np.ndarray]) -> np.ndarray:
        if compensated:
            total = _compensated_sum(np.stack(arrays))
        else:
            total = arrays[0].copy()
            for a in arrays[1:]:
                total += a
        if reduction == "mean":
            total /= len(arrays)
        return total

    layers = range(len(grads[0].weights))
    return MlpGradients(
        [reduce([g.weights[i] for g in grads]) for i in layers],
        [reduce([g.biases[i] for g in grads]) for i in layers],
    )


def compute_gradients(agent: DdpgAgent, batch) -> tuple[float, MlpGradients, float, MlpGradients]:
    """Critic and actor gradients of one replica on one batch, before any update."""
    critic_loss, critic_grads = critic_update(agent, batch)
    actor_loss, actor_grads = policy_update(agent, batch)
    return critic_loss, critic_grads, actor_loss, actor_grads


def synchronized_update(
    agents: list[DdpgAgent],
    rngs: list[np.random.Generator],
    cfg: TrainConfig,
    pool: ThreadPoolExecutor | None = None,
) -> tuple[float, float]:
    """
    One global update: local batches, local gradients, ordered reduction,
    identical application on every replica.

    Returns:
        (mean critic loss, mean policy loss) over workers
    """
    n = agents[0].config.batch_size
    batches = [agent.buffer.sample_batch(n, rng) for agent, rng in zip(agents, rngs)]
    if pool is None:
        results = [compute_gradients(a, b) for a, b in zip(agents, batches)]
    else:
        results = list(pool.map(compute_gradients, agents, batches))
    critic_sum = allreduce_sum([r[1] for r in results], cfg.reduction, cfg.compensated)
    actor_sum = allreduce_sum([r[3] for r in results], cfg.reduction, cfg.compensated)
    if not (critic_sum.all_finite() and actor_sum.all_finite()):
        raise TrainingAbortedError("summed gradient is not finite")
    for agent in agents:
        apply_updates(agent, critic_sum, actor_sum)
    return (
        float(np.mean([r[0] for r in results])),
        float(np.mean([r[2] for r in results])),
    )


def replica_consistency_check(agents: list[DdpgAgent]) -> ConsistencyReport:
    """Bitwise comparison of every replica's networks and optimizer states against replica 0."""
    if len(agents) < 2:
        return ConsistencyReport(True)
    reference = agents[0]
    for r, other in enumerate(agents[1:], start=1):
        pairs = [
            (name, reference.networks()[name].arrays(), net.arrays())
            for name, net in other.networks().items()
        ]
        pairs += [
            (name, reference.optimizers()[name].arrays(), opt.arrays())
            for name, opt in other.optimizers().items()
        ]
        for name, ref_arrays, arrays in pairs:
            for (kind, layer, a), (_, _, b) in zip(ref_arrays, arrays):
                if a.shape != b.shape:
                    return ConsistencyReport(False, r, name, kind, layer, None)
                bits_a = np.ascontiguousarray(a).view(np.uint64)
                bits_b = np.ascontiguousarray(b).view(np.uint64)
                differs = bits_a != bits_b
                if np.any(differs):
                    index = np.unravel_index(int(np.argmax(differs)), a.shape)
                    return ConsistencyReport(
                        False, r, name, kind, layer, tuple(int(i) for i in index)
                    )
        for name, opt in other.optimizers().items():
            if opt.step != reference.optimizers()[name].step:
                return ConsistencyReport(False, r, name, "step", None, None)
    return ConsistencyReport(True)


# ============================================================
# Training loop
# ============================================================

def _act(worker: _Worker) -> None:
    if not worker.active:
        return
    state = worker.observation.as_vector()
    action = select_action(worker.agent, state, explore=True)
    try:
        result = worker.env.step(action)
    except SimulationDivergedError as exc:
        logger.warning(
            "Worker %d diverged at node %d; aborting its episode", worker.index, exc.node_index
        )
        worker.active = False
        worker.diverged = True
        return
    worker.agent.buffer.store(
        Transition(state, action, result.reward, result.observation.as_vector(), result.done)
    )
    worker.observation = result.observation
    worker.cumulative_reward += result.reward
    worker.final_distance = result.info["mean_distance"]
    worker.done = result.done
    worker.transitions += 1


def _start_episode(worker: _Worker, goal) -> None:
    if worker.diverged:
        worker.env.restore_pristine()
    worker.observation = worker.env.reset(goal)
    worker.agent.noise.reset()
    worker.active = True
    worker.diverged = False
    worker.cumulative_reward = 0.0
    worker.final_distance = worker.env.mean_distance()
    worker.done = False


def run_training(
    cfg: TrainConfig,
    scenario,
    db: DeformationDb | None = None,
    output_dir: str | Path | None = None,
    metadata: dict | None = None,
) -> TrainingResult:
    """
    Train W synchronized replicas on goals drawn from the database.

    Args:
        cfg: Training configuration
        scenario: Pristine scenario the environments are cloned from
        db: Goal database (loaded from cfg.db_path when None)
        output_dir: Where the learning curve and checkpoints go (nothing is
            written when None)
        metadata: Extra entries for the checkpoint metadata block

    Returns:
        Per-episode statistics, the final replicas and output paths
    """
    fingerprint = scenario.fingerprint
    if db is None:
        if cfg.db_path is None:
            raise ConfigError("training needs a goal database (train.db_path)")
        db = load_db(cfg.db_path, fingerprint, strict=not cfg.allow_fingerprint_mismatch)
    if len(db) < cfg.workers:
        raise ConfigError(f"{cfg.workers} workers need distinct goals, db has {len(db)}")

    state_dim = scenario.env_config.observation_dim
    start_episode = 0
    if cfg.resume_from:
        base, meta = load_agent(
            cfg.resume_from, fingerprint, allow_mismatch=cfg.allow_fingerprint_mismatch
        )
        if base.config != cfg.agent:
            logger.warning("Resuming with the checkpoint's agent hyperparameters")
        start_episode = int(meta.get("episode", 0))
        logger.info("Resuming from %s at episode %d (replay buffers start empty)",
                    cfg.resume_from, start_episode)
    else:
        base = make_agent(state_dim, cfg.agent, cfg.seed)

    workers = [
        _Worker(
            index=w,
            env=scenario.make_env(
                max_episode_steps=cfg.steps_per_episode, terminate_on_done=False
            ),
            agent=replicate_agent(base, [cfg.seed, _NOISE_STREAM, w]),
            batch_rng=np.random.default_rng([cfg.seed, _BATCH_STREAM, w]),
        )
        for w in range(cfg.workers)
    ]
    agents = [w.agent for w in workers]
    rngs = [w.batch_rng for w in workers]

    out = Path(output_dir) if output_dir is not None else None
    curve_file = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        curve_file = open(out / "learning_curve.csv", "w", newline="")
        writer = csv.writer(curve_file)
        writer.writerow(LEARNING_CURVE_COLUMNS)

    meta_base = {"env_fingerprint": fingerprint, "seed": cfg.seed, **(metadata or {})}
    stats: list[EpisodeStats] = []
    checkpoint_path = None
    total = 0
    try:
        with ThreadPoolExecutor(max_workers=cfg.threads or cfg.workers) as pool:
            for episode in range(start_episode, start_episode + cfg.episodes):
                goals = sample_goals(db, cfg.workers, [cfg.seed, _GOAL_STREAM, episode])
                for worker, goal in zip(workers, goals):
                    _start_episode(worker, goal)
                for _ in range(cfg.steps_per_episode):
                    list(pool.map(_act, workers))
                    if cfg.updates_per_step and all(
                        len(a.buffer) >= a.config.batch_size for a in agents
                    ):
                        for _ in range(cfg.updates_per_step):
                            synchronized_update(agents, rngs, cfg, pool)

                episode_stats = EpisodeStats(
                    episode=episode,
                    rewards=[w.cumulative_reward for w in workers],
                    final_distances=[w.final_distance for w in workers],
                    done_count=sum(int(w.done) for w in workers),
                    diverged_workers=[w.index for w in workers if w.diverged],
                )
                stats.append(episode_stats)
                if writer is not None:
                    writer.writerow(episode_stats.row())
                    curve_file.flush()
                logger.info(
                    "Episode %d: mean reward %.4f, mean final distance %.4f m, done %d/%d",
                    episode, episode_stats.mean_reward, episode_stats.mean_final_distance,
                    episode_stats.done_count, cfg.workers,
                )

                report = replica_consistency_check(agents)
                if not report.consistent:
                    raise TrainingAbortedError(f"replicas diverged: {report.describe()}")

                finished = episode + 1
                every = cfg.checkpoint_every
                if out is not None and every and finished % every == 0:
                    save_agent(
                        agents[0], out / "checkpoints" / f"episode_{finished:04d}.ckpt",
                        {**meta_base, "episode": finished},
                    )
    finally:
        if curve_file is not None:
            curve_file.close()
        total = sum(w.transitions for w in workers)

    if out is not None:
        checkpoint_path = save_agent(
            agents[0], out / "agent.ckpt",
            {**meta_base, "episode": start_episode + cfg.episodes},
        )
    return TrainingResult(
        stats=stats,
        agents=agents,
        checkpoint_path=checkpoint_path,
        curve_path=(out / "learning_curve.csv") if out is not None else None,
        transitions=total,
    )


def read_learning_curve(path: str | Path) -> list[dict]:
    with open(path, newline="") as handle:
        return [
            {
                "episode": int(row["episode"]),
                "mean_reward": float(row["mean_reward"]),
                "min_reward": float(row["min_reward"]),
                "max_reward": float(row["max_reward"]),
                "mean_final_distance": float(row["mean_final_distance"]),
                "done_count": int(row["done_count"]),
            }
            for row in csv.DictReader(handle)
        ]
