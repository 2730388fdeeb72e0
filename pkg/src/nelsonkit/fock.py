"""Truncated symmetric Fock space over a momentum grid, and the fibered
Hamiltonians assembled on it as exactly Hermitian sparse matrices.

Discretization convention: modes are l^2-normalized, and the coupling enters
through smeared amplitudes g_p = g(k_p) * sqrt(w) with w the quadrature
weight.  With this convention the canonical commutation relations hold
exactly on the truncated basis (below the top sector); all quadrature error
lives in g and in diagonals of functions of operators.
"""

from __future__ import annotations

import struct
from bisect import insort
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb, sqrt
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import SizingError
from .model import ModelSpec

__all__ = [
    "MomentumGrid",
    "FockBasis",
    "OperatorMatrix",
    "enumerate_basis",
    "build_dGamma",
    "build_creation",
    "build_field",
    "assemble_H",
    "assemble_H1",
    "save_operator",
    "load_operator",
]


@dataclass(frozen=True)
class MomentumGrid:
    """Regular tensor grid on [-K, K]^nu, symmetric under k -> -k."""

    nu: int
    half_width: float
    points_per_axis: int

    def __post_init__(self):
        if self.nu not in (1, 2):
            raise ValueError("nu must be 1 or 2")
        if self.points_per_axis < 2:
            raise ValueError("need at least 2 points per axis")

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.points_per_axis - 1)

    @property
    def weight(self) -> float:
        return self.spacing**self.nu

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.points_per_axis)

    @property
    def n_nodes(self) -> int:
        return self.points_per_axis**self.nu

    @property
    def nodes(self) -> np.ndarray:
        """All nodes, shape (G, nu), row-major over axes."""
        ax = self.axis
        if self.nu == 1:
            return ax[:, None]
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def check_resolves(self, model: ModelSpec):
        if np.isfinite(model.coupling.uv_cutoff) and (
            self.half_width < model.coupling.uv_cutoff
        ):
            raise ValueError(
                "grid half_width must be >= the coupling UV cutoff so the "
                "interaction is fully resolved"
            )


class FockBasis:
    """Boson-number-truncated symmetric basis: sorted multisets of node ids.

    ``states[n]`` lists the sector-n states; ``index[state]`` is the global
    index; the vacuum () is index 0.  ``occupancy`` is a (dim, G) sparse
    matrix of occupation counts, so per-state sums of any per-node quantity
    f are just ``occupancy @ f``.
    """

    def __init__(self, grid: MomentumGrid, n_max: int, dim_cap: int = 2_000_000):
        if n_max < 1:
            raise ValueError("n_max must be >= 1")
        G = grid.n_nodes
        dims = [comb(G + n - 1, n) for n in range(n_max + 1)]
        total = sum(dims)
        if total > dim_cap:
            worst = max(range(n_max + 1), key=lambda n: dims[n])
            raise SizingError(
                f"basis dimension {total} exceeds cap {dim_cap} "
                f"(sector {worst} alone has {dims[worst]} states)"
            )
        self.grid = grid
        self.n_max = n_max
        self.states: List[List[tuple]] = []
        self.index = {}
        self.offsets = []
        idx = 0
        for n in range(n_max + 1):
            self.offsets.append(idx)
            sector = list(combinations_with_replacement(range(G), n))
            self.states.append(sector)
            for s in sector:
                self.index[s] = idx
                idx += 1
        self.dim = idx
        rows, cols, vals = [], [], []
        for n in range(n_max + 1):
            for s in self.states[n]:
                i = self.index[s]
                for p in set(s):
                    rows.append(i)
                    cols.append(p)
                    vals.append(s.count(p))
        self.occupancy = sp.csr_matrix(
            (vals, (rows, cols)), shape=(self.dim, G), dtype=float
        )

    def sector_dims(self) -> List[int]:
        return [len(s) for s in self.states]

    def sector_of(self, i: int) -> int:
        for n in range(self.n_max, -1, -1):
            if i >= self.offsets[n]:
                return n
        raise IndexError(i)

    def sector_slice(self, n: int) -> slice:
        lo = self.offsets[n]
        hi = self.offsets[n + 1] if n + 1 <= self.n_max else self.dim
        return slice(lo, hi)

    def indices_up_to_sector(self, n: int) -> np.ndarray:
        hi = self.offsets[n + 1] if n + 1 <= self.n_max else self.dim
        return np.arange(hi)

    def total_momentum(self) -> np.ndarray:
        """Per-state sum of node momenta, shape (dim, nu)."""
        return self.occupancy @ self.grid.nodes

    def state_sums(self, per_node: np.ndarray) -> np.ndarray:
        """Per-state sum of a per-node quantity (shape (G,) or (G, m))."""
        return self.occupancy @ np.asarray(per_node)


def enumerate_basis(grid: MomentumGrid, n_max: int,
                    dim_cap: int = 2_000_000) -> FockBasis:
    return FockBasis(grid, n_max, dim_cap=dim_cap)


@dataclass
class OperatorMatrix:
    """Hermitian sparse operator with a block-structure tag.

    Hermiticity is exact: every off-diagonal entry is stored together with
    its conjugate computed from the same floats.
    """

    matrix: sp.csr_matrix
    block: str  # "diagonal" | "adjacent" | "sector-preserving" | "general"
    label: str = ""

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def hermiticity_defect(self) -> float:
        d = self.matrix - self.matrix.getH()
        return 0.0 if d.nnz == 0 else float(abs(d).max())

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def __add__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        blocks = {self.block, other.block}
        if blocks == {"diagonal"}:
            tag = "diagonal"
        elif blocks <= {"diagonal", "sector-preserving"}:
            tag = "sector-preserving"
        else:
            tag = "general"
        return OperatorMatrix(
            (self.matrix + other.matrix).tocsr(), tag,
            f"{self.label}+{other.label}",
        )

    def verify_block_structure(self, basis: FockBasis) -> bool:
        coo = self.matrix.tocoo()
        sec = np.array([basis.sector_of(int(i)) for i in coo.row])
        sec_c = np.array([basis.sector_of(int(j)) for j in coo.col])
        if self.block == "diagonal":
            return bool(np.all(coo.row == coo.col))
        if self.block == "adjacent":
            return bool(np.all(np.abs(sec - sec_c) == 1))
        if self.block == "sector-preserving":
            return bool(np.all(sec == sec_c))
        return True


def _diag_operator(values: np.ndarray, label: str) -> OperatorMatrix:
    return OperatorMatrix(
        sp.diags(np.asarray(values, dtype=complex), format="csr"),
        "diagonal",
        label,
    )


def build_dGamma(basis: FockBasis, per_node) -> "OperatorMatrix | list":
    """Second quantization of a multiplication operator.

    ``per_node`` of shape (G,) gives one diagonal operator whose entry on
    the state {k_1..k_n} is sum_i f(k_i); shape (G, m) gives a list of m
    such operators (e.g. the nu components of the boson momentum).
    """
    per_node = np.asarray(per_node, dtype=float)
    if per_node.ndim == 1:
        return _diag_operator(basis.state_sums(per_node), "dGamma")
    return [
        _diag_operator(basis.state_sums(per_node[:, j]), f"dGamma[{j}]")
        for j in range(per_node.shape[1])
    ]


def creation_structure(basis: FockBasis, p: int):
    """Yield (row, col, occ) for mode-p creation: entry sqrt(occ) at
    (row, col), occ the occupation of p in the target state.

    Exposed separately so tests can re-run the assembly in exact arithmetic.
    """
    for n in range(basis.n_max):
        for s in basis.states[n]:
            col = basis.index[s]
            target = list(s)
            insort(target, p)
            row = basis.index[tuple(target)]
            yield row, col, target.count(p)


def build_creation(basis: FockBasis, mode_values: np.ndarray) -> OperatorMatrix:
    """a*(f) for l^2 mode coefficients f, coupling sector n to n+1.

    Not Hermitian on its own; used as a building block and in tests.
    """
    mode_values = np.asarray(mode_values, dtype=complex)
    rows, cols, vals = [], [], []
    for p in range(basis.grid.n_nodes):
        fp = mode_values[p]
        if fp == 0:
            continue
        for row, col, occ in creation_structure(basis, p):
            rows.append(row)
            cols.append(col)
            vals.append(fp * sqrt(occ))
    mat = sp.csr_matrix(
        (vals, (rows, cols)), shape=(basis.dim, basis.dim), dtype=complex
    )
    return OperatorMatrix(mat, "adjacent", "creation")


def build_field(basis: FockBasis, mode_values: np.ndarray) -> OperatorMatrix:
    """Field operator phi(f) = a*(f) + a(f) for l^2 mode coefficients f.

    Couples adjacent sectors only; exactly Hermitian by paired storage.
    """
    mode_values = np.asarray(mode_values, dtype=complex)
    rows, cols, vals = [], [], []
    for p in range(basis.grid.n_nodes):
        fp = mode_values[p]
        if fp == 0:
            continue
        for row, col, occ in creation_structure(basis, p):
            amp = fp * sqrt(occ)
            rows.append(row)
            cols.append(col)
            vals.append(amp)
            rows.append(col)
            cols.append(row)
            vals.append(np.conj(amp))
    mat = sp.csr_matrix(
        (vals, (rows, cols)), shape=(basis.dim, basis.dim), dtype=complex
    )
    return OperatorMatrix(mat, "adjacent", "field")


def smeared_modes(model: ModelSpec, grid: MomentumGrid) -> np.ndarray:
    """Coupling amplitudes g_p = g(k_p) sqrt(w) on the grid nodes."""
    w = sqrt(grid.weight)
    return np.array([model.g(k) * w for k in grid.nodes])


def free_diagonal(model: ModelSpec, grid: MomentumGrid, basis: FockBasis,
                  xi) -> np.ndarray:
    """Diagonal of H0(xi): sum_i omega(k_i) + Omega(xi - sum_i k_i)."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    omega_nodes = np.array([model.omega(k) for k in grid.nodes])
    tot_omega = basis.state_sums(omega_nodes)
    tot_k = basis.total_momentum()
    shifted = xi[None, :] - tot_k
    Om = np.array([model.Omega(p) for p in shifted])
    return tot_omega + Om


def assemble_H(model: ModelSpec, grid: MomentumGrid, basis: FockBasis,
               xi) -> OperatorMatrix:
    """Fiber Hamiltonian H(xi) = dGamma(omega) + Omega(xi - dGamma(k)) + phi(g)."""
    grid.check_resolves(model)
    diag = _diag_operator(free_diagonal(model, grid, basis, xi), "H0")
    if model.coupling.kind == "zero" or model.coupling.lam == 0.0:
        out = diag
        out.label = "H"
        return out
    fld = build_field(basis, smeared_modes(model, grid))
    out = diag + fld
    out.block = "general"
    out.label = "H"
    return out


def assemble_H1(model: ModelSpec, grid: MomentumGrid, basis: FockBasis,
                xi, k) -> OperatorMatrix:
    """Extended one-boson fiber: H(xi - k) + omega(k) * identity."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    k = np.atleast_1d(np.asarray(k, dtype=float))
    inner = assemble_H(model, grid, basis, xi - k)
    shift = _diag_operator(
        np.full(basis.dim, model.omega(k), dtype=float), "omega-shift"
    )
    out = inner + shift
    out.block = inner.block
    out.label = "H1"
    return out


# ---------------------------------------------------------------------------
# binary interchange format
#
# Layout (little-endian throughout):
#   magic  b"NKOP"      4 bytes
#   version u8          currently 1
#   dim    u64
#   nnz    u64
#   nnz triplets of (row u64, col u64, re f64, im f64)


def save_operator(op: OperatorMatrix, path):
    coo = op.matrix.tocoo()
    with open(path, "wb") as fh:
        fh.write(b"NKOP")
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack("<QQ", op.dim, coo.nnz))
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(struct.pack("<QQdd", int(r), int(c), v.real, v.imag))


def load_operator(path) -> OperatorMatrix:
    with open(path, "rb") as fh:
        if fh.read(4) != b"NKOP":
            raise ValueError("not an operator dump")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != 1:
            raise ValueError(f"unsupported dump version {version}")
        dim, nnz = struct.unpack("<QQ", fh.read(16))
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=complex)
        for i in range(nnz):
            r, c, re, im = struct.unpack("<QQdd", fh.read(32))
            rows[i], cols[i], vals[i] = r, c, complex(re, im)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(dim, dim))
    return OperatorMatrix(mat, "general", "loaded")
