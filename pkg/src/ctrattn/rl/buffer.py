"""Proportional prioritized replay backed by a binary sum tree."""
from __future__ import annotations

import numpy as np

from .. import kernels


class SumTree:
    """Complete binary tree over ``capacity`` leaves; node 1 holds the total."""

    def __init__(self, capacity: int, backend=kernels):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.leaf_offset = 1 << (capacity - 1).bit_length()
        self.tree = np.zeros(2 * self.leaf_offset)
        self._k = backend

    @property
    def total(self) -> float:
        return float(self.tree[1])

    @property
    def leaves(self) -> np.ndarray:
        return self.tree[self.leaf_offset : self.leaf_offset + self.capacity]

    def update(self, idx, values) -> None:
        idx = np.ascontiguousarray(np.atleast_1d(idx), dtype=np.int64)
        values = np.ascontiguousarray(np.atleast_1d(values), dtype=np.float64)
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("priorities must be finite and non-negative")
        if np.any((idx < 0) | (idx >= self.capacity)):
            raise IndexError("leaf index out of range")
        self._k.sumtree_update(self.tree, self.leaf_offset, idx, values)

    def find(self, values) -> np.ndarray:
        """Leaf index whose cumulative interval contains each value in [0, total)."""
        values = np.ascontiguousarray(np.atleast_1d(values), dtype=np.float64)
        out = np.empty(len(values), dtype=np.int64)
        self._k.sumtree_find(self.tree, self.leaf_offset, values, out)
        return np.minimum(out, self.capacity - 1)


class PrioritizedBuffer:
    """Ring buffer of feature transitions sampled in proportion to priority**alpha."""

    def __init__(self, capacity: int, feature_shape: tuple[int, ...], alpha: float = 0.6, eps: float = 1e-6,
                 dtype=np.float16):
        self.capacity = capacity
        self.alpha = alpha
        self.eps = eps
        self.tree = SumTree(capacity)
        self.obs = np.zeros((capacity, *feature_shape), dtype=dtype)
        self.next_obs = np.zeros((capacity, *feature_shape), dtype=dtype)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self.max_priority = 1.0
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action: int, reward: float, next_obs, done: bool) -> int:
        i = self.pos
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = float(done)
        self.tree.update(i, self.max_priority**self.alpha)
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def probabilities(self) -> np.ndarray:
        return self.tree.leaves[: self.size] / self.tree.total

    def sample(self, batch_size: int, beta: float, rng: np.random.Generator):
        """Returns (batch dict, importance weights, indices).

        Weights are (N * P(i))**-beta scaled by the batch maximum.
        """
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        total = self.tree.total
        u = rng.random(batch_size) * total
        idx = self.tree.find(u)
        idx = np.minimum(idx, self.size - 1)
        p = self.tree.leaves[idx] / total
        w = (self.size * p) ** (-beta)
        w = w / w.max()
        batch = {
            "obs": self.obs[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_obs": self.next_obs[idx],
            "dones": self.dones[idx],
        }
        return batch, w, idx

    def update_priorities(self, idx, td_errors) -> None:
        p = np.abs(np.asarray(td_errors, dtype=np.float64)) + self.eps
        self.tree.update(idx, p**self.alpha)
        self.max_priority = max(self.max_priority, float(p.max()))


def per_sample(buffer: PrioritizedBuffer, beta: float, rng: np.random.Generator, batch_size: int = 32):
    return buffer.sample(batch_size, beta, rng)
