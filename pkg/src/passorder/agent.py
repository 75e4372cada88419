"""Q-learning pieces: config, exploration schedule, TD loss and the learner."""

from __future__ import annotations

import logging
import threading
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .exceptions import ConfigError, NoLegalAction, TrainingDiverged
from .network import Adam, QNetwork
from .replay import ReplayMemory
from .state import MAX_ACTIONS

log = logging.getLogger(__name__)

DEFAULT_GAMMA = {"H": 0.9, "M": 0.5, "L": 0.5}


@dataclass
class TrainConfig:
    gamma: float = 0.9
    tau: int = 1000  # target sync period, in train steps
    delta: int = 4000  # evaluation period, a multiple of tau
    batch_size: int = 32
    learning_rate: float = 1e-4
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_anneal_steps: int = 100_000
    max_actions: int = MAX_ACTIONS
    n_blocks: int = 4
    width: int = 256
    dtype: str = "float64"
    # Bootstrap with max(0, max Q): the greedy stop rule makes stopping worth 0.
    stop_floor: bool = False
    replay_capacity: int = 1_000_000
    min_fill: Optional[int] = None  # defaults to 10 * batch_size
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.tau < 1 or self.delta < 1 or self.delta % self.tau:
            raise ConfigError(f"delta ({self.delta}) must be a positive multiple of tau ({self.tau})")
        if self.batch_size < 1 or self.max_actions < 1:
            raise ConfigError("batch_size and max_actions must be positive")
        if self.eps_anneal_steps < 1:
            raise ConfigError("eps_anneal_steps must be positive")

    @property
    def fill(self) -> int:
        return self.min_fill if self.min_fill is not None else 10 * self.batch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def epsilon(config: TrainConfig, step: int) -> float:
    """Linear annealing from ``eps_start`` to ``eps_end``."""
    slope = (config.eps_start - config.eps_end) / config.eps_anneal_steps
    return max(config.eps_end, config.eps_start - step * slope)


def greedy_action(q: np.ndarray, mask: np.ndarray) -> int:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise NoLegalAction("no legal action")
    return int(np.argmax(np.where(mask, q, -np.inf)))  # first max -> lowest id


def select_action(q: np.ndarray, eps: float, mask: np.ndarray, rng: np.random.Generator) -> int:
    """Epsilon-greedy over legal actions; one coin toss per call."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise NoLegalAction("no legal action")
    if eps > 0 and rng.random() < eps:
        return int(rng.choice(np.flatnonzero(mask)))
    return greedy_action(q, mask)


# --- batches and loss ---------------------------------------------------

@dataclass
class Batch:
    X: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    discounts: np.ndarray
    terminal: np.ndarray
    X_next: np.ndarray
    mask_next: np.ndarray

    def __len__(self):
        return len(self.actions)


class StateTable:
    """fingerprint -> (features, legal mask), shared by explorer and learner."""

    def __init__(self):
        self._rows: dict = {}
        self._lock = threading.Lock()

    def __contains__(self, fp):
        return fp in self._rows

    def __len__(self):
        return len(self._rows)

    def put(self, fp: str, features: np.ndarray, mask: np.ndarray) -> None:
        with self._lock:
            self._rows.setdefault(fp, (features, np.asarray(mask, dtype=bool)))

    def get(self, fp: str):
        return self._rows[fp]

    def batch(self, experiences) -> Batch:
        rows = [self._rows[e.s] for e in experiences]
        nxt = [self._rows[e.s_next] for e in experiences]
        return Batch(
            X=np.stack([r[0] for r in rows]),
            actions=np.array([e.a for e in experiences], dtype=np.int64),
            rewards=np.array([e.r for e in experiences], dtype=np.float64),
            discounts=np.array([e.discount for e in experiences], dtype=np.float64),
            terminal=np.array([e.terminal for e in experiences], dtype=bool),
            X_next=np.stack([r[0] for r in nxt]),
            mask_next=np.stack([r[1] for r in nxt]),
        )


def td_targets(batch: Batch, target_net: QNetwork, stop_floor: bool = False) -> np.ndarray:
    """r for terminal transitions, else r + d * max over legal a' of Q_target(s', a')."""
    q_next = target_net.forward(batch.X_next)
    masked = np.where(batch.mask_next, q_next, -np.inf)
    best = masked.max(axis=1)
    best = np.where(np.isfinite(best), best, 0.0)
    if stop_floor:
        best = np.maximum(best, 0.0)
    boot = np.where(batch.terminal, 0.0, batch.discounts * best)
    return batch.rewards + boot


def td_loss(batch: Batch, net: QNetwork, target_net: QNetwork, config: Optional[TrainConfig] = None):
    """Mean squared TD error; returns ``(loss, targets)``."""
    targets = td_targets(batch, target_net, bool(config and config.stop_floor))
    q = net.forward(batch.X)
    q_sa = q[np.arange(len(batch)), batch.actions]
    return float(np.mean((q_sa - targets) ** 2)), targets


def gradients(net: QNetwork, batch: Batch, target_net: QNetwork,
              config: Optional[TrainConfig] = None, scale: float = 1.0):
    """Analytic gradient of ``scale * td_loss``; targets are constants."""
    loss, grads, _ = _loss_and_grads(net, batch, target_net, scale,
                                     bool(config and config.stop_floor))
    return grads


def _loss_and_grads(net, batch, target_net, scale=1.0, stop_floor=False):
    targets = td_targets(batch, target_net, stop_floor)
    q, cache = net.forward(batch.X, keep=True)
    n = len(batch)
    rows = np.arange(n)
    err = q[rows, batch.actions] - targets
    dq = np.zeros_like(q)
    dq[rows, batch.actions] = scale * 2.0 * err / n
    return float(np.mean(err ** 2)), net.backward(cache, dq), targets


# --- learner ------------------------------------------------------------

@dataclass
class Learner:
    """Online network, fixed-target copy, optimizer and step counter."""

    net: QNetwork
    config: TrainConfig
    memory: ReplayMemory
    table: StateTable
    target: QNetwork = None
    optimizer: Adam = None
    step: int = 0
    rng: np.random.Generator = None
    losses: list = field(default_factory=list)

    def __post_init__(self):
        if self.target is None:
            self.target = self.net.copy()
        if self.optimizer is None:
            self.optimizer = Adam(self.net.params, lr=self.config.learning_rate)
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed)
        self._snapshot = self.net.copy()
        self._snap_lock = threading.Lock()

    @classmethod
    def create(cls, input_dim: int, n_actions: int, config: TrainConfig,
               memory: Optional[ReplayMemory] = None, table: Optional[StateTable] = None):
        net = QNetwork(input_dim, n_actions, config.n_blocks, config.width, seed=config.seed,
                       dtype=config.dtype)
        memory = memory or ReplayMemory(config.replay_capacity, config.fill)
        return cls(net, config, memory, table or StateTable())

    def ready(self) -> bool:
        return self.memory.ready(self.config.batch_size)

    def train_step(self) -> float:
        """One optimizer step on a uniformly sampled batch."""
        experiences = self.memory.sample(self.config.batch_size, self.rng)
        batch = self.table.batch(experiences)
        loss, grads, targets = _loss_and_grads(self.net, batch, self.target,
                                               stop_floor=self.config.stop_floor)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(
                f"non-finite loss at step {self.step}",
                {"experiences": experiences, "targets": targets, "loss": loss},
            )
        self.optimizer.step(self.net.params, grads)
        self.step += 1
        if self.step % self.config.tau == 0:
            self.target.load_params(self.net)
        self.losses.append(loss)
        return loss

    def publish(self) -> None:
        snap = self.net.copy()
        with self._snap_lock:
            self._snapshot = snap

    def snapshot(self) -> QNetwork:
        with self._snap_lock:
            return self._snapshot
