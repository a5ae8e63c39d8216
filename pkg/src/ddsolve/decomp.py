"""Structured grids, overlapping block decompositions and the interface skeleton.

All index sets use the lexicographic numbering of :class:`CartesianGrid`
(x fastest), so a 2D point ``(ix, iy)`` has global index ``ix + nx * iy``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class CartesianGrid:
    """Uniform grid of interior unknowns on the unit box."""

    dim: int
    points_per_axis: tuple[int, ...]
    h: float

    @property
    def n(self) -> int:
        return int(np.prod(self.points_per_axis))

    # alias matching the usual N_v notation
    total_unknowns = n

    def ravel(self, multi_index) -> np.ndarray:
        return np.ravel_multi_index(tuple(multi_index), self.points_per_axis, order="F")

    def unravel(self, k) -> tuple[np.ndarray, ...]:
        return np.unravel_index(k, self.points_per_axis, order="F")

    @cached_property
    def multi_indices(self) -> np.ndarray:
        """(N_v, dim) integer array of per-axis indices, row k for unknown k."""
        return np.stack(self.unravel(np.arange(self.n)), axis=1)

    def coordinates(self) -> np.ndarray:
        """Physical coordinates (i + 1) * h of every unknown, shape (N_v, dim)."""
        return (self.multi_indices + 1) * self.h


def build_grid(dim: int, points_per_axis, h: float) -> CartesianGrid:
    if dim not in (1, 2, 3):
        raise ValueError(f"dim must be 1, 2 or 3, got {dim}")
    points = tuple(int(p) for p in np.atleast_1d(points_per_axis))
    if len(points) != dim:
        raise ValueError(f"expected {dim} axis counts, got {len(points)}")
    if any(p < 1 for p in points):
        raise ValueError(f"every axis needs at least one point, got {points}")
    if not h > 0:
        raise ValueError(f"mesh spacing must be positive, got {h}")
    return CartesianGrid(dim, points, float(h))


def split_axis(n: int, count: int) -> list[tuple[int, int]]:
    """Half-open block ranges; the remainder goes one cell each to the trailing blocks."""
    if count < 1 or count > n:
        raise ValueError(f"cannot split {n} points into {count} blocks")
    base, rem = divmod(n, count)
    sizes = [base + (1 if b >= count - rem else 0) for b in range(count)]
    starts = np.concatenate([[0], np.cumsum(sizes)])
    return [(int(starts[b]), int(starts[b + 1])) for b in range(count)]


@dataclass(frozen=True)
class Decomposition:
    grid: CartesianGrid
    counts_per_axis: tuple[int, ...]
    overlap_layers: int
    nonoverlap_sets: tuple[np.ndarray, ...]
    overlap_sets: tuple[np.ndarray, ...]
    owner: np.ndarray
    # per subdomain, per axis, half-open (lo, hi) ranges of the overlapping block
    overlap_boxes: tuple[tuple[tuple[int, int], ...], ...] = field(repr=False)

    @property
    def n_subdomains(self) -> int:
        return len(self.nonoverlap_sets)

    N = n_subdomains

    def sizes(self) -> list[int]:
        return [len(s) for s in self.overlap_sets]


def _box_indices(grid: CartesianGrid, box) -> np.ndarray:
    axes = [np.arange(lo, hi) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.sort(grid.ravel([m.ravel() for m in mesh]))


def partition_overlapping(grid: CartesianGrid, counts_per_axis, overlap_layers: int) -> Decomposition:
    """Tile ``grid`` with axis-aligned blocks and grow each by ``overlap_layers`` layers."""
    counts = tuple(int(c) for c in np.atleast_1d(counts_per_axis))
    if len(counts) != grid.dim:
        raise ValueError(f"expected {grid.dim} subdomain counts, got {len(counts)}")
    if overlap_layers < 1:
        raise ValueError("overlap_layers must be at least 1")
    ranges = [split_axis(n, c) for n, c in zip(grid.points_per_axis, counts)]
    for axis, (c, r) in enumerate(zip(counts, ranges)):
        if c > 1 and overlap_layers >= min(hi - lo for lo, hi in r):
            raise ValueError(
                f"overlap of {overlap_layers} layers swallows a neighbouring block along axis {axis}"
            )

    nonoverlap, overlap, boxes = [], [], []
    owner = np.empty(grid.n, dtype=np.int64)
    # x-fastest ordering of the subdomain multi-index, like the grid itself
    for j, block in enumerate(product(*reversed(ranges))):
        block = tuple(reversed(block))
        core = _box_indices(grid, block)
        grown = tuple(
            (max(lo - overlap_layers, 0), min(hi + overlap_layers, n))
            for (lo, hi), n in zip(block, grid.points_per_axis)
        )
        nonoverlap.append(core)
        overlap.append(_box_indices(grid, grown))
        boxes.append(grown)
        owner[core] = j
    for arr in nonoverlap + overlap:
        arr.flags.writeable = False
    owner.flags.writeable = False
    return Decomposition(grid, counts, int(overlap_layers), tuple(nonoverlap), tuple(overlap), owner, tuple(boxes))


@dataclass(frozen=True)
class TransferOps:
    """Boolean restriction/prolongation maps stored as index arrays.

    ``R_j u = u[indices[j]]``; ``P_j`` scatters back into those slots;
    ``P~_j`` scatters only the slots flagged in ``owned[j]``.
    """

    n: int
    indices: tuple[np.ndarray, ...]
    owned: tuple[np.ndarray, ...]

    def restrict(self, j: int, u: np.ndarray) -> np.ndarray:
        return u[self.indices[j]]

    def prolong(self, j: int, w: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n, dtype=np.result_type(w, float))
        out[self.indices[j]] = w
        return out

    def prolong_owned(self, j: int, w: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Add ``P~_j w`` into ``out`` (a fresh zero vector if omitted)."""
        if out is None:
            out = np.zeros(self.n, dtype=np.result_type(w, float))
        mask = self.owned[j]
        out[self.indices[j][mask]] += w[mask]
        return out

    def restriction_matrix(self, j: int) -> sp.csr_matrix:
        idx = self.indices[j]
        return sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), self.n))

    def owned_prolongation_matrix(self, j: int) -> sp.csr_matrix:
        idx = self.indices[j]
        rows = idx[self.owned[j]]
        cols = np.flatnonzero(self.owned[j])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n, len(idx)))


def build_transfer_operators(decomposition: Decomposition) -> TransferOps:
    owned = []
    for j, idx in enumerate(decomposition.overlap_sets):
        mask = decomposition.owner[idx] == j
        mask.flags.writeable = False
        owned.append(mask)
    return TransferOps(decomposition.grid.n, decomposition.overlap_sets, tuple(owned))


@dataclass(frozen=True)
class Skeleton:
    """Unknowns that act as Dirichlet data for at least one overlapping subdomain."""

    n: int
    indices: np.ndarray

    @property
    def n_bar(self) -> int:
        return len(self.indices)

    def restrict(self, u: np.ndarray) -> np.ndarray:
        return u[self.indices]

    def extend(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n, dtype=np.result_type(v, float))
        out[self.indices] = v
        return out

    def restriction_matrix(self) -> sp.csr_matrix:
        m = self.n_bar
        return sp.csr_matrix((np.ones(m), (np.arange(m), self.indices)), shape=(m, self.n))


def compute_skeleton(decomposition: Decomposition, pattern) -> Skeleton:
    """Structural skeleton of ``pattern`` (any sparse matrix with the stencil of A).

    Unknown k belongs to the skeleton when some subdomain j does not contain k
    but one of its rows couples to k.
    """
    pattern = sp.csr_matrix(pattern)
    n = decomposition.grid.n
    if pattern.shape != (n, n):
        raise ValueError(f"pattern has shape {pattern.shape}, expected {(n, n)}")
    if pattern.nnz == 0:
        raise ValueError("empty sparsity pattern")
    hit = np.zeros(n, dtype=bool)
    for idx in decomposition.overlap_sets:
        inside = np.zeros(n, dtype=bool)
        inside[idx] = True
        cols = pattern[idx].indices
        hit[cols[~inside[cols]]] = True
    indices = np.flatnonzero(hit)
    indices.flags.writeable = False
    return Skeleton(n, indices)


def decomposition_summary(decomposition: Decomposition, skeleton: Skeleton | None = None) -> dict:
    out = {
        "N_v": decomposition.grid.n,
        "N": decomposition.n_subdomains,
        "overlap_layers": decomposition.overlap_layers,
        "subdomain_sizes": decomposition.sizes(),
    }
    if skeleton is not None:
        out["N_bar"] = skeleton.n_bar
        out["K"] = skeleton.indices.tolist()
    return out


def decomposition_to_json(decomposition: Decomposition, skeleton: Skeleton | None = None, **kwargs) -> str:
    return json.dumps(decomposition_summary(decomposition, skeleton), **kwargs)
