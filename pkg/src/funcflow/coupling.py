"""Exact mini-batch optimal transport between two equal-size batches of fields."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Field, check_same_grid


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"cost matrix must be square, got shape {m.shape}")
        object.__setattr__(self, "entries", m)

    @property
    def b(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class Coupling:
    sigma: np.ndarray  # sigma[i] = target paired with source i
    total_cost: float


def cost_matrix(batch0: Field, batch1: Field) -> CostMatrix:
    """Squared Hilbert-norm distances ``M[i, j] = ||batch0[i] - batch1[j]||^2``.

    Computed from explicit differences rather than the norm expansion so that
    identical fields cost exactly zero.
    """
    check_same_grid(batch0.grid, batch1.grid)
    a, b = batch0.values, batch1.values
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError("cost_matrix expects batched fields of shape (B, ny, nx)")
    if len(a) != len(b) or len(a) < 1:
        raise ValueError(f"batch sizes must be equal and >= 1, got {len(a)} and {len(b)}")
    n = len(a)
    flat_b = b.reshape(n, -1)
    m = np.empty((n, n))
    for i in range(n):
        d = flat_b - a[i].reshape(1, -1)
        m[i] = np.einsum("jk,jk->j", d, d)
    return CostMatrix(m * batch0.grid.cell_area)


def _shortest_augmenting_path(c: np.ndarray):
    """Hungarian method with potentials; returns (row->col, row duals, col duals).

    Duals satisfy ``c - u[:, None] - v[None, :] >= 0`` with equality on the matching.
    Each free row is matched by one Dijkstra search over reduced costs; the
    potentials are updated once per augmentation.
    """
    n = c.shape[0]
    # warm start: column then row reduction keeps the duals feasible, and rows
    # are greedily matched along tight edges before any augmentation
    v = c.min(axis=0)
    u = (c - v[None, :]).min(axis=1)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        tight = np.flatnonzero((c[i] - u[i] - v == 0.0) & (row4col < 0))
        if tight.size:
            col4row[i] = tight[0]
            row4col[tight[0]] = i
    for cur in np.flatnonzero(col4row < 0):
        dist = np.full(n, np.inf)
        pred = np.full(n, -1, dtype=np.int64)
        remaining = np.ones(n, dtype=bool)
        scanned_rows = [cur]
        i, base = cur, 0.0
        while True:
            r = base + c[i] - u[i] - v
            upd = remaining & (r < dist)
            dist[upd] = r[upd]
            pred[upd] = i
            masked = np.where(remaining, dist, np.inf)
            j = int(np.argmin(masked))
            base = masked[j]
            if row4col[j] >= 0:
                # among equally short columns prefer a free one: it ends the search
                ties = np.flatnonzero((masked == base) & (row4col < 0))
                if ties.size:
                    j = int(ties[0])
            remaining[j] = False
            if row4col[j] < 0:
                sink = j
                break
            i = int(row4col[j])
            scanned_rows.append(i)
        rows = np.array(scanned_rows[1:], dtype=np.int64)
        u[cur] += base
        if rows.size:
            u[rows] += base - dist[col4row[rows]]
        cols = np.flatnonzero(~remaining)
        v[cols] -= base - dist[cols]
        j = sink
        while True:
            i = pred[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur:
                break
    return col4row, u, v


def _lexicographic_pass(tight: np.ndarray, match: np.ndarray) -> np.ndarray:
    """Smallest-first perfect matching inside the tight-edge graph.

    Every optimal permutation uses only edges that are tight for an optimal
    dual, so the lexicographically smallest optimal permutation is the
    lexicographically smallest perfect matching of ``tight``.
    """
    n = len(match)
    match = match.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    fixed_col = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in np.flatnonzero(tight[i] & ~fixed_col):
            if match[i] == j:
                break
            path = _alternating_path(tight, match, owner, fixed_col, i, j)
            if path is not None:
                for r, col in path:
                    match[r] = col
                    owner[col] = r
                match[i] = j
                owner[j] = i
                break
        fixed_col[match[i]] = True
    return match


def _alternating_path(tight, match, owner, fixed_col, i, j):
    """Re-seat the owner of column ``j`` so that column ``match[i]`` is reused.

    Returns the list of (row, new column) moves, or None if impossible.
    """
    goal = match[i]
    start = owner[j]
    parent = {start: None}
    queue = [start]
    blocked = fixed_col.copy()
    blocked[j] = True
    seen_col = blocked.copy()
    while queue:
        r = queue.pop(0)
        for col in np.flatnonzero(tight[r] & ~seen_col):
            seen_col[col] = True
            if col == goal:
                moves = [(r, col)]
                while parent[r] is not None:
                    prev_row, prev_col = parent[r]
                    moves.append((prev_row, prev_col))
                    r = prev_row
                return moves
            nxt = owner[col]
            if nxt == i or nxt in parent:
                continue
            parent[nxt] = (r, col)
            queue.append(nxt)
    return None


def solve_assignment(m: CostMatrix) -> Coupling:
    """Minimum-cost permutation; ties resolve to the lexicographically smallest."""
    c = m.entries
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    n = c.shape[0]
    match, u, v = _shortest_augmenting_path(c)
    reduced = c - u[:, None] - v[None, :]
    tol = 1e-10 * max(1.0, float(np.abs(c).max()))
    tight = reduced <= tol
    tight[np.arange(n), match] = True
    sigma = _lexicographic_pass(tight, match)
    total = float(c[np.arange(n), sigma].sum())
    return Coupling(sigma, total)


def identity_cost(m: CostMatrix) -> float:
    return float(np.trace(m.entries))


def empirical_w2(batch0: Field, batch1: Field) -> float:
    """W2 distance between the two equal-weight empirical measures."""
    m = cost_matrix(batch0, batch1)
    return float(np.sqrt(max(solve_assignment(m).total_cost, 0.0) / m.b))
