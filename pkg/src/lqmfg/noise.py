"""Q-Wiener increments and the binomial common-noise tree."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .model import ModelSpec, TimeGrid

DEFAULT_NODE_CAP = 2**20


class TreeTooLarge(ValueError):
    pass


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator determined only by ``(seed, *key)``, never by draw order elsewhere."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Unscaled per-mode Brownian increments, shape ``(n_paths, n_steps, modes)``.

    The V-valued increment of path p at step k is
    ``sum_j sqrt(lam_j) * increments[p, k, j] * e_j``.
    """

    increments: np.ndarray
    lam: np.ndarray
    seed: int
    which: str

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    def scaled(self) -> np.ndarray:
        return self.increments * np.sqrt(self.lam)


_STREAM_TAG = {"idio": 1, "common": 2}


def sample_q_wiener(spec: ModelSpec, grid: TimeGrid, n_paths: int, seed: int,
                    which: str = "idio") -> PathEnsemble:
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if which not in _STREAM_TAG:
        raise ValueError(f"which must be 'idio' or 'common', got {which!r}")
    lam = spec.lambda_idio if which == "idio" else spec.lambda_common
    m = len(lam)
    sd = np.sqrt(grid.dt)
    out = np.empty((n_paths, grid.n_steps, m))
    for p in range(n_paths):
        out[p] = substream(seed, _STREAM_TAG[which], p).normal(0.0, sd, size=(grid.n_steps, m))
    out.setflags(write=False)
    return PathEnsemble(out, np.asarray(lam, dtype=float), int(seed), which)


@dataclass(frozen=True, eq=False)
class NoiseTree:
    """Non-recombining tree for the common noise.

    At every step each common mode moves by ``+sqrt(dt)`` or ``-sqrt(dt)``
    with probability 1/2, so a node has ``2**m_common`` children, all equally
    likely.  Nodes at depth k are indexed ``0 .. branching**k - 1`` and the
    children of node ``i`` are ``i*branching + b``; bit j of ``b`` set means
    mode j moved down.
    """

    grid: TimeGrid
    m_common: int

    @property
    def depth(self) -> int:
        return self.grid.n_steps

    @property
    def branching(self) -> int:
        return 2**self.m_common

    @cached_property
    def branch_increments(self) -> np.ndarray:
        """Per-branch increments, shape (branching, m_common)."""
        b = np.arange(self.branching)[:, None]
        bits = (b >> np.arange(self.m_common)[None, :]) & 1
        return np.where(bits == 1, -1.0, 1.0) * np.sqrt(self.grid.dt)

    def n_nodes(self, k: int) -> int:
        return self.branching**k

    def probability(self, k: int) -> float:
        return float(self.branching) ** (-k)

    @property
    def total_nodes(self) -> int:
        return sum(self.n_nodes(k) for k in range(self.depth + 1))

    def node_offset(self, k: int) -> int:
        return sum(self.n_nodes(j) for j in range(k))

    def parents(self, k: int) -> np.ndarray:
        """Parent index (at depth k-1) of every node at depth k."""
        return np.arange(self.n_nodes(k)) // self.branching

    def expectation(self, values: np.ndarray) -> np.ndarray:
        """Unconditional expectation of a depth-level node function."""
        return values.mean(axis=0)

    def conditional(self, child_values: np.ndarray) -> np.ndarray:
        """E[f(child) | parent] for every parent; ``child_values`` is depth k+1."""
        n_parent = child_values.shape[0] // self.branching
        return child_values.reshape((n_parent, self.branching) + child_values.shape[1:]).mean(axis=1)

    def conditional_times_increment(self, child_values: np.ndarray) -> np.ndarray:
        """E[f(child) * dbeta_j | parent], shape (n_parent, m_common, ...)."""
        n_parent = child_values.shape[0] // self.branching
        blocks = child_values.reshape((n_parent, self.branching) + child_values.shape[1:])
        return np.einsum("pb...,bj->pj...", blocks, self.branch_increments) / self.branching

    def expand(self, parent_values: np.ndarray) -> np.ndarray:
        """Repeat a depth-k node function onto the depth-(k+1) nodes."""
        return np.repeat(parent_values, self.branching, axis=0)

    def cumulative_increments(self, k: int) -> np.ndarray:
        """Cumulative common-noise increment record at each depth-k node, (n_nodes, m_common)."""
        cum = np.zeros((1, self.m_common))
        for _ in range(k):
            cum = (cum[:, None, :] + self.branch_increments[None, :, :]).reshape(-1, self.m_common)
        return cum

    def branch_of(self, increments: np.ndarray) -> np.ndarray:
        """Quantize simulated increments (..., m_common) to branch labels by sign."""
        down = (np.asarray(increments) < 0).astype(np.int64)
        return (down << np.arange(self.m_common)).sum(axis=-1)

    def node_path(self, branches: np.ndarray) -> np.ndarray:
        """Depth-indexed node indices along branch sequences.

        ``branches`` has shape (n_paths, n_steps); the result has shape
        (n_paths, n_steps + 1) with index 0 (the root) in column 0.
        """
        branches = np.asarray(branches, dtype=np.int64)
        idx = np.zeros((branches.shape[0], branches.shape[1] + 1), dtype=np.int64)
        for k in range(branches.shape[1]):
            idx[:, k + 1] = idx[:, k] * self.branching + branches[:, k]
        return idx


def build_noise_tree(spec: ModelSpec, grid: TimeGrid, node_cap: int = DEFAULT_NODE_CAP) -> NoiseTree:
    leaves = (2**spec.m_common) ** grid.n_steps
    if leaves > node_cap:
        raise TreeTooLarge(
            f"common-noise tree would have {leaves} leaves (> cap {node_cap}); "
            "use a coarser grid or fewer common modes"
        )
    return NoiseTree(grid, spec.m_common)
