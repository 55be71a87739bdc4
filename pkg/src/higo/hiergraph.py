"""Multi-level grid-graph pyramid with 4-neighbour edges and 2x2 parent/child maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = ["LevelGraph", "Hierarchy", "build_hierarchy", "neighbors", "HierarchyConfigError"]

# N, S, E, W
_OFFSETS = ((-1, 0), (1, 0), (0, 1), (0, -1))


class HierarchyConfigError(ValueError):
    pass


@dataclass
class LevelGraph:
    """One grid level in raster node order.

    ``slots`` is an (N, 4) neighbour table in N/S/E/W order with ``-1`` where
    the neighbour is out of bounds; ``slot_mask`` marks the valid entries. The
    same edges are also available as directed ``(src, dst)`` pairs.
    """
    h: int
    w: int
    wrap: bool = False
    slots: np.ndarray = field(init=False)
    slot_mask: np.ndarray = field(init=False)
    edge_feature: np.ndarray = field(init=False)
    edges: np.ndarray = field(init=False)

    def __post_init__(self):
        n = self.h * self.w
        slots = np.full((n, 4), -1, dtype=np.int64)
        for i in range(self.h):
            for j in range(self.w):
                for k, (di, dj) in enumerate(_OFFSETS):
                    ii, jj = i + di, j + dj
                    if self.wrap and dj and self.w > 2:
                        jj %= self.w
                    if 0 <= ii < self.h and 0 <= jj < self.w:
                        slots[i * self.w + j, k] = ii * self.w + jj
        self.slots = slots
        self.slot_mask = slots >= 0
        self.edge_feature = self.slot_mask.astype(np.float64)
        src = np.repeat(np.arange(n), 4)[self.slot_mask.ravel()]
        self.edges = np.stack([src, slots.ravel()[self.slot_mask.ravel()]], axis=1)
        self._gather = None

    @property
    def num_nodes(self) -> int:
        return self.h * self.w

    @property
    def degree(self) -> np.ndarray:
        return self.slot_mask.sum(axis=1)

    def gather_matrix(self) -> sp.csr_matrix:
        """Sparse (4N x N) map from node features to the flattened neighbour table."""
        if self._gather is None:
            n = self.num_nodes
            rows = np.flatnonzero(self.slot_mask.ravel())
            cols = self.slots.ravel()[rows]
            self._gather = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(4 * n, n))
        return self._gather


@dataclass
class Hierarchy:
    levels: list[LevelGraph]
    parent: list[np.ndarray]     # parent[l][v] = node on level l+1
    children: list[np.ndarray]   # children[l][p] = 4 nodes on level l in NW, NE, SW, SE order
    inter_edge_feature: list[np.ndarray] = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.levels)

    def child_matrices(self, l: int) -> list[sp.csr_matrix]:
        """Four sparse selectors picking child k of each parent (level l -> l+1)."""
        ch = self.children[l]
        n_par, n_child = ch.shape[0], self.levels[l].num_nodes
        rows = np.arange(n_par)
        return [sp.csr_matrix((np.ones(n_par), (rows, ch[:, k])), shape=(n_par, n_child))
                for k in range(4)]

    def parent_matrix(self, l: int) -> sp.csr_matrix:
        """Sparse (N_l x N_{l+1}) broadcast of parent features to children."""
        par = self.parent[l]
        n = par.shape[0]
        return sp.csr_matrix((np.ones(n), (np.arange(n), par)),
                             shape=(n, self.levels[l + 1].num_nodes))

    def child_slot(self, l: int) -> np.ndarray:
        """Position (0..3) of every level-l node inside its parent's child list."""
        par = self.parent[l]
        ch = self.children[l]
        return np.argmax(ch[par] == np.arange(par.size)[:, None], axis=1)


def build_hierarchy(H: int, W: int, L: int, wrap: bool = False) -> Hierarchy:
    if L < 1:
        raise HierarchyConfigError("L must be >= 1")
    levels = []
    h, w = H, W
    for l in range(L):
        if l > 0:
            if h % 2 or w % 2:
                raise HierarchyConfigError(
                    f"level {l + 1}: grid {h}x{w} cannot be halved (H={H}, W={W}, L={L})")
            h, w = h // 2, w // 2
        levels.append(LevelGraph(h, w, wrap=wrap))
    parent, children, inter = [], [], []
    for l in range(L - 1):
        fine, coarse = levels[l], levels[l + 1]
        i, j = np.divmod(np.arange(fine.num_nodes), fine.w)
        parent.append((i // 2) * coarse.w + j // 2)
        pi, pj = np.divmod(np.arange(coarse.num_nodes), coarse.w)
        top = 2 * pi * fine.w + 2 * pj
        children.append(np.stack([top, top + 1, top + fine.w, top + fine.w + 1], axis=1))
        inter.append(np.ones(fine.num_nodes))
    return Hierarchy(levels, parent, children, inter)


def neighbors(level: LevelGraph, node: int) -> list[tuple[int, float]]:
    """In-bounds (neighbour, edge feature) pairs in N, S, E, W order."""
    if not 0 <= node < level.num_nodes:
        raise IndexError(f"node {node} out of range for {level.h}x{level.w} grid")
    return [(int(level.slots[node, k]), float(level.edge_feature[node, k]))
            for k in range(4) if level.slot_mask[node, k]]
