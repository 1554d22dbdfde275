from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np


@runtime_checkable
class Agent(Protocol):
    name: str
    context_dim: int
    num_actions: int

    def act(self, context: np.ndarray) -> int: ...

    def observe(self, context: np.ndarray, action: int, reward: float) -> None: ...


@dataclass
class AgentRngs:
    """Independent generators for parameter init, action sampling and training."""

    init: np.random.Generator
    act: np.random.Generator
    train: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "AgentRngs":
        if isinstance(seed, AgentRngs):
            return seed
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        return cls(*(np.random.default_rng(s) for s in ss.spawn(3)))


@dataclass
class MaskedBatch:
    contexts: np.ndarray        # N x d
    reward_vectors: np.ndarray  # N x C, zero where unobserved
    masks: np.ndarray           # N x C, one-hot at the taken action


class ReplayBuffer:
    """Append-only store of (context, action, reward) triples."""

    def __init__(self, context_dim: int, num_actions: int, capacity: int = 1024):
        self.context_dim = context_dim
        self.num_actions = num_actions
        self._contexts = np.empty((capacity, context_dim))
        self._actions = np.empty(capacity, dtype=np.int64)
        self._rewards = np.empty(capacity)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def append(self, context, action: int, reward: float) -> None:
        if not 0 <= action < self.num_actions:
            raise ValueError(f"action {action} out of range [0, {self.num_actions})")
        if self._n == len(self._actions):
            grow = 2 * len(self._actions)
            self._contexts = np.resize(self._contexts, (grow, self.context_dim))
            self._actions = np.resize(self._actions, grow)
            self._rewards = np.resize(self._rewards, grow)
        self._contexts[self._n] = context
        self._actions[self._n] = action
        self._rewards[self._n] = reward
        self._n += 1

    @property
    def contexts(self) -> np.ndarray:
        return self._contexts[: self._n]

    @property
    def actions(self) -> np.ndarray:
        return self._actions[: self._n]

    @property
    def rewards(self) -> np.ndarray:
        return self._rewards[: self._n]

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform with replacement; the batch is capped at the current length."""
        if self._n == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self._n, size=min(batch_size, self._n))

    def masked_batch(self, indices: np.ndarray | None = None) -> MaskedBatch:
        if indices is None:
            indices = np.arange(self._n)
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= self._n):
            raise IndexError("batch index beyond buffer length")
        n = len(indices)
        actions = self._actions[indices]
        masks = np.zeros((n, self.num_actions))
        masks[np.arange(n), actions] = 1.0
        rewards = masks * self._rewards[indices][:, None]
        return MaskedBatch(self._contexts[indices].copy(), rewards, masks)


class UniformAgent:
    """Picks every action with equal probability, ignoring the context."""

    name = "uniform"

    def __init__(self, context_dim: int, num_actions: int, seed=None):
        if num_actions < 1:
            raise ValueError("need at least one action")
        self.context_dim = context_dim
        self.num_actions = num_actions
        self.rng = AgentRngs.from_seed(seed).act

    def act(self, context) -> int:
        return uniform_act(self.num_actions, self.rng)

    def observe(self, context, action: int, reward: float) -> None:
        pass

    def config(self) -> dict:
        return {}


def uniform_act(num_actions: int, rng: np.random.Generator) -> int:
    return int(rng.integers(num_actions))


def argmax_first(values: np.ndarray) -> int:
    """Argmax with ties going to the lowest index."""
    return int(np.argmax(values))
