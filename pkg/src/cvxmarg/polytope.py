"""Local-consistency constraints ``A b = d`` with full row rank."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import InvalidArgument, NumericalFailure
from .model import RegionGraph

RANK_TOL = 1e-10
_DENSE_RANK_LIMIT = 3000
# Below this many matrix cells, dense kernels beat scipy.sparse call overhead.
_DENSE_OPS_LIMIT = 20000


@dataclass(frozen=True)
class ConstraintSystem:
    """Retained consistency rows.

    ``row_tags`` entries are ``("clique_norm", c)``, ``("singleton_norm", i)``
    or ``("marginalization", c, i, x_i)`` where ``c`` is a region index and
    ``i`` a hidden variable index.
    """

    A: sp.csr_matrix
    d: np.ndarray
    row_tags: tuple[tuple, ...]

    def __post_init__(self):
        object.__setattr__(self, "_AT", self.A.T.tocsr())
        dense = self.A.toarray() if self.A.shape[0] * self.A.shape[1] <= _DENSE_OPS_LIMIT else None
        object.__setattr__(self, "_dense", dense)
        object.__setattr__(self, "_schur_map", None if dense is not None else _schur_map(self.A))

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    def matvec(self, b: np.ndarray) -> np.ndarray:
        return self._dense @ b if self._dense is not None else self.A @ b

    def rmatvec(self, lam: np.ndarray) -> np.ndarray:
        return self._dense.T @ lam if self._dense is not None else self._AT @ lam

    def schur(self, dinv: np.ndarray):
        """``A diag(dinv) A^T``, dense for small systems, else sparse CSC."""
        if self._dense is not None:
            return (self._dense * dinv) @ self._dense.T
        pattern, scatter = self._schur_map.pattern, self._schur_map.scatter
        return sp.csc_matrix((scatter @ dinv, pattern.indices, pattern.indptr), shape=pattern.shape)

    def schur_band(self, dinv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Lower band storage of ``A diag(dinv) A^T`` under a bandwidth-reducing permutation.

        Returns ``(ab, perm)`` where ``ab`` is in the layout of
        ``scipy.linalg.cholesky_banded(ab, lower=True)`` for the matrix with
        rows and columns reordered by ``perm``.
        """
        smap = self._schur_map
        if smap is None:
            raise InvalidArgument("system uses dense kernels")
        ab = np.zeros(smap.band_shape)
        ab.ravel()[smap.band_slots] = smap.band_scatter @ dinv
        return ab, smap.perm

    @property
    def dense_kernels(self) -> bool:
        return self._dense is not None


@dataclass(frozen=True)
class _SchurMap:
    pattern: sp.csc_matrix
    scatter: sp.csr_matrix
    perm: np.ndarray
    band_shape: tuple[int, int]
    band_slots: np.ndarray
    band_scatter: sp.csr_matrix


def _schur_map(A: sp.csr_matrix) -> _SchurMap:
    """Fixed pattern of ``A diag(v) A^T`` and the linear maps from ``v`` to its entries."""
    A = sp.csc_matrix(A)
    m = A.shape[0]
    pattern = (abs(A) @ abs(A).T).tocsc()
    pattern.sort_indices()
    r1, r2, cols, vals = [], [], [], []
    for j in range(A.shape[1]):
        rows = A.indices[A.indptr[j]:A.indptr[j + 1]]
        a = A.data[A.indptr[j]:A.indptr[j + 1]]
        r1.append(np.repeat(rows, len(rows)))
        r2.append(np.tile(rows, len(rows)))
        cols.append(np.full(len(rows) ** 2, j))
        vals.append(np.outer(a, a).ravel())
    r1, r2, cols, vals = map(np.concatenate, (r1, r2, cols, vals))
    # slot of (r1, r2) in the CSC data array
    slot = sp.csc_matrix((np.arange(pattern.nnz) + 1, pattern.indices, pattern.indptr), shape=(m, m))
    pos = np.asarray(slot[r1, r2]).ravel() - 1
    scatter = sp.csr_matrix((vals, (pos, cols)), shape=(pattern.nnz, A.shape[1]))

    perm = np.asarray(reverse_cuthill_mckee(pattern, symmetric_mode=True), dtype=np.int64)
    inv = np.empty(m, np.int64)
    inv[perm] = np.arange(m)
    coo = pattern.tocoo()
    pi, pj = inv[coo.row], inv[coo.col]
    lower = pi >= pj
    bandwidth = int((pi - pj)[lower].max())
    band_slots = (pi - pj)[lower] * m + pj[lower]
    # CSC data order equals COO order from tocoo(), so rows of `scatter` line up
    band_scatter = scatter[np.flatnonzero(lower)]
    return _SchurMap(pattern, scatter, perm, (bandwidth + 1, m), band_slots, band_scatter)


def _rows(graph: RegionGraph, prune: bool):
    ha = graph.hidden_arity
    rows: list[tuple[list[int], list[float], float, tuple]] = []
    for c in graph.clique_regions:
        blk = graph.block(c)
        rows.append((list(range(blk.start, blk.stop)), [1.0] * (blk.stop - blk.start), 1.0, ("clique_norm", c)))
    for s in graph.singleton_regions:
        blk = graph.block(s)
        i = graph.regions[s].hidden[0]
        rows.append((list(range(blk.start, blk.stop)), [1.0] * ha, 1.0, ("singleton_norm", i)))
    last = ha - 1 if prune else ha
    for c in graph.clique_regions:
        reg = graph.regions[c]
        k = len(reg.hidden)
        start = graph.offsets[c]
        configs = np.arange(ha**k)
        for t, i in enumerate(reg.hidden):
            digit = (configs // ha ** (k - 1 - t)) % ha
            s_start = graph.offsets[graph.singleton_of[i]]
            for xi in range(last):
                cols = [int(start + p) for p in np.flatnonzero(digit == xi)] + [int(s_start + xi)]
                vals = [1.0] * (len(cols) - 1) + [-1.0]
                rows.append((cols, vals, 0.0, ("marginalization", c, i, xi)))
    return rows


def _assemble(graph: RegionGraph, rows) -> tuple[sp.csr_matrix, np.ndarray]:
    indptr = np.cumsum([0] + [len(r[0]) for r in rows])
    indices = np.concatenate([r[0] for r in rows]).astype(np.int64) if rows else np.zeros(0, np.int64)
    data = np.concatenate([r[1] for r in rows]) if rows else np.zeros(0)
    A = sp.csr_matrix((data, indices, indptr), shape=(len(rows), graph.size))
    A.sort_indices()
    return A, np.array([r[2] for r in rows])


def full_system(graph: RegionGraph) -> tuple[sp.csr_matrix, np.ndarray]:
    """Every marginalization, clique and singleton row, without pruning."""
    return _assemble(graph, _rows(graph, prune=False))


def _verify_full_row_rank(A: sp.csr_matrix) -> None:
    m, n = A.shape
    if m > n:
        raise NumericalFailure(f"constraint matrix has {m} rows but only {n} columns")
    if m * n <= _DENSE_RANK_LIMIT**2 // 4:
        R = scipy.linalg.qr(A.T.toarray(), mode="r", pivoting=True)[0]
        pivots = np.abs(np.diag(R))
        if pivots.size and pivots.min() <= RANK_TOL * pivots.max():
            raise NumericalFailure(f"constraint matrix is rank deficient (min pivot {pivots.min():.3e})")
        return
    lu = spla.splu((A @ A.T).tocsc(), permc_spec="MMD_AT_PLUS_A")
    pivots = np.abs(lu.U.diagonal())
    if pivots.min() <= RANK_TOL * pivots.max():
        raise NumericalFailure(f"constraint matrix is rank deficient (min pivot {pivots.min():.3e})")


def build_constraints(graph: RegionGraph) -> ConstraintSystem:
    """Consistency rows pruned to full row rank.

    Row order is clique normalizations, singleton normalizations, then
    marginalization rows per clique and member. The marginalization row for
    the last state of each member is dropped: it follows from the remaining
    rows of that member together with both normalizations.
    """
    rows = _rows(graph, prune=True)
    A, d = _assemble(graph, rows)
    _verify_full_row_rank(A)
    return ConstraintSystem(A=A, d=d, row_tags=tuple(r[3] for r in rows))


def consistency_residual(system: ConstraintSystem, b) -> float:
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (system.A.shape[1],):
        raise InvalidArgument(f"belief vector has shape {b.shape}, expected ({system.A.shape[1]},)")
    if system.A.shape[0] == 0:
        return 0.0
    return float(np.max(np.abs(system.matvec(b) - system.d)))


def uniform_beliefs(graph: RegionGraph) -> np.ndarray:
    sizes = np.diff(graph.offsets)
    return np.repeat(1.0 / sizes, sizes)
