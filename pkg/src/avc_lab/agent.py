"""DQN agent: epsilon-greedy policy, replay memory, Bellman-target regression.

Single online network, no target network, one replay per environment step
during training, epsilon decayed once per finished training episode.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .env import EpisodeLog, VoltageControlEnv
from .qnet import NetworkSpec, QNetwork
from .scenario import Scenario


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_min: float = 0.01
    epsilon_decay: float = 0.995
    learning_rate: float = 0.001
    memory_capacity: int = 2000
    batch_size: int = 32
    replay_every: int = 1  # environment steps per replay call
    hidden: tuple[int, ...] = (64, 64)
    # evaluation phase
    eval_epsilon: float = 0.001
    eval_epsilon_decay: float = 0.9  # recorded only; epsilon is not decayed in EVAL
    eval_learning_rate: float = 0.001

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if not 0 <= self.epsilon_min <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_min <= epsilon_start <= 1")
        if self.memory_capacity < self.batch_size or self.batch_size < 1:
            raise ValueError("memory_capacity must be >= batch_size >= 1")
        if self.replay_every < 1:
            raise ValueError("replay_every must be >= 1")


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


class Transition(NamedTuple):
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool


class ReplayMemory:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self._buf: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._buf)

    def __getitem__(self, k: int) -> Transition:
        return self._buf[k]

    def __iter__(self):
        return iter(self._buf)

    def append(self, t: Transition) -> None:
        self._buf.append(t)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        """Uniform, without replacement."""
        if batch_size > len(self._buf):
            raise ValueError(f"memory holds {len(self._buf)} transitions, {batch_size} requested")
        idx = rng.choice(len(self._buf), size=batch_size, replace=False)
        return [self._buf[i] for i in idx]


class DQNAgent:
    def __init__(self, obs_dim: int, n_actions: int, config: AgentConfig | None = None,
                 seed: int = 0, qnet: QNetwork | None = None):
        self.config = config or AgentConfig()
        self.n_actions = n_actions
        spec = NetworkSpec(obs_dim, n_actions, self.config.hidden)
        if qnet is not None and qnet.spec != spec:
            raise ValueError(f"network spec {qnet.spec} does not match agent {spec}")
        self.qnet = qnet or QNetwork(spec, seed=seed)
        self.memory = ReplayMemory(self.config.memory_capacity)
        self.epsilon = self.config.epsilon_start
        self.rng = np.random.default_rng(seed)
        self.steps_seen = 0
        self.last_loss: float | None = None

    def act(self, obs, epsilon: float | None = None, rng: np.random.Generator | None = None) -> int:
        """Epsilon-greedy; greedy ties go to the lowest action id."""
        eps = self.epsilon if epsilon is None else epsilon
        rng = rng if rng is not None else self.rng
        if eps > 0 and rng.random() < eps:
            return int(rng.integers(self.n_actions))
        return int(np.argmax(self.qnet(obs)))

    def remember(self, t: Transition) -> None:
        self.memory.append(t)

    def replay(self, batch_size: int | None = None, rng: np.random.Generator | None = None) -> float | None:
        """One masked regression step toward Bellman targets.

        Returns the loss, or None when memory holds fewer than ``batch_size``
        transitions.
        """
        batch_size = batch_size or self.config.batch_size
        if len(self.memory) < batch_size:
            return None
        batch = self.memory.sample(batch_size, rng if rng is not None else self.rng)
        obs = np.stack([t.obs for t in batch])
        next_obs = np.stack([t.next_obs for t in batch])
        actions = np.array([t.action for t in batch])
        rewards = np.array([t.reward for t in batch], dtype=float)
        done = np.array([t.done for t in batch], dtype=bool)

        targets_a = rewards.copy()
        if self.config.gamma > 0 and not done.all():
            q_next = self.qnet(next_obs[~done])
            targets_a[~done] += self.config.gamma * q_next.max(axis=1)
        rows = np.arange(batch_size)
        targets = np.zeros((batch_size, self.n_actions))
        targets[rows, actions] = targets_a
        mask = np.zeros((batch_size, self.n_actions), dtype=bool)
        mask[rows, actions] = True
        self.last_loss = self.qnet.train_step(obs, targets, mask, self.config.learning_rate)
        return self.last_loss

    def decay_epsilon(self) -> float:
        self.epsilon = max(self.config.epsilon_min, self.epsilon * self.config.epsilon_decay)
        return self.epsilon

    def run_episode(self, env: VoltageControlEnv, scenario: Scenario, mode: Mode = Mode.TRAIN) -> EpisodeLog:
        """Reset ``env`` on ``scenario`` and act until the episode terminates.

        TRAIN: explore with the current epsilon, store transitions, replay,
        decay epsilon at the end. EVAL: fixed ``eval_epsilon``, no learning.
        A scenario without initial violations returns a log with n = 0 and is
        not counted (epsilon untouched).
        """
        mode = Mode(mode)
        obs, violation = env.reset(scenario)
        if not violation:
            return env.log
        eps = self.epsilon if mode is Mode.TRAIN else self.config.eval_epsilon
        done = False
        while not done:
            action = self.act(obs, eps)
            next_obs, reward, done, _ = env.step(action)
            if mode is Mode.TRAIN:
                self.remember(Transition(obs, action, reward, next_obs, done))
                self.steps_seen += 1
                if self.steps_seen % self.config.replay_every == 0:
                    self.replay()
            obs = next_obs
        if mode is Mode.TRAIN:
            self.decay_epsilon()
        return env.log

    # -- checkpoints: qnet file + "<path>.agent" sidecar of key = value lines

    def save(self, path: str | os.PathLike, extra: dict | None = None) -> None:
        path = Path(path)
        self.qnet.save(path)
        lines = [f"{k} = {_fmt_value(v)}" for k, v in asdict(self.config).items()]
        lines.append(f"epsilon = {self.epsilon!r}")
        lines.append(f"steps_seen = {self.steps_seen}")
        for k, v in (extra or {}).items():
            lines.append(f"{k} = {v}")
        Path(str(path) + ".agent").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike, seed: int = 0) -> tuple["DQNAgent", dict[str, str]]:
        """Restore an agent; also returns the raw sidecar mapping."""
        path = Path(path)
        sidecar = read_kv(Path(str(path) + ".agent"))
        names = {f.name: f.type for f in fields(AgentConfig)}
        kwargs = {}
        for k, v in sidecar.items():
            if k in names:
                kwargs[k] = _parse_value(k, v)
        config = AgentConfig(**kwargs)
        qnet = QNetwork.load(path)
        agent = cls(qnet.spec.input_dim, qnet.spec.output_dim, config, seed=seed, qnet=qnet)
        agent.epsilon = float(sidecar.get("epsilon", config.epsilon_start))
        agent.steps_seen = int(sidecar.get("steps_seen", 0))
        return agent, sidecar


def _fmt_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, text: str):
    if key == "hidden":
        return tuple(int(h) for h in text.split(",") if h.strip())
    if key in ("memory_capacity", "batch_size", "replay_every"):
        return int(text)
    return float(text)


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
