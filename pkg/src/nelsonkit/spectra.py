"""Eigenvalue computation and mass-shell tracing over a radial xi grid.

Rotation invariance is exploited throughout: shells are computed along the
fixed ray xi = s * e1 and read as functions of s = |xi|.  A synthetic
closed-form shell source is provided so the downstream geometry can be
exercised even when the eigensolver path produces a single branch and no
crossings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .errors import SolverError, RangeError
from .fock import FockBasis, MomentumGrid, OperatorMatrix, assemble_H, free_diagonal
from .model import ModelSpec

__all__ = [
    "EigenResult",
    "lowest_eigs",
    "ground_energy",
    "ShellBranch",
    "Crossing",
    "MassShellAtlas",
    "trace_shells",
    "analytic_shell_source",
    "FreeGroundOracle",
    "GroundShellEvaluator",
]


@dataclass
class EigenResult:
    values: np.ndarray
    vectors: np.ndarray  # columns are eigenvectors
    residuals: np.ndarray
    meta: dict


def _as_sparse(H):
    if isinstance(H, OperatorMatrix):
        return H.matrix
    if sp.issparse(H):
        return H.tocsr()
    return sp.csr_matrix(np.asarray(H))


def _gershgorin_lower(A: sp.csr_matrix) -> float:
    d = A.diagonal().real
    offsum = np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(A.diagonal())
    return float(np.min(d - offsum))


def lowest_eigs(H, count: int, tol: float = 1e-9,
                dense_cutoff: int = 1500, maxiter: Optional[int] = None) -> EigenResult:
    """Smallest ``count`` eigenpairs with a residual guarantee.

    Exact sort for diagonal operators, dense diagonalization below
    ``dense_cutoff``, and above it shift-invert Lanczos anchored strictly
    below the spectrum by a Gershgorin bound (plain smallest-algebraic
    Lanczos can silently skip the ground level on strongly clustered
    spectra).  The start vector is deterministic so repeated runs are
    bit-identical.  Residuals ||Hv - lv|| must satisfy <= tol * (1 + |l|).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    A = _as_sparse(H)
    n = A.shape[0]
    count = min(count, n)
    real_input = np.all(A.data.imag == 0.0) if A.nnz else True
    if real_input:
        A = A.real
    coo = A.tocoo()
    if n <= 2_000_000 and (coo.nnz == 0 or np.all(coo.row == coo.col)):
        d = A.diagonal().real
        order = np.argsort(d, kind="stable")[:count]
        vals = d[order]
        vecs = np.zeros((n, count), dtype=A.dtype)
        for j, i in enumerate(order):
            vecs[i, j] = 1.0
        method = "diagonal"
    elif n <= dense_cutoff or count >= n - 1:
        dense = A.toarray()
        vals, vecs = np.linalg.eigh(dense)
        vals, vecs = vals[:count], vecs[:, :count]
        method = "dense"
    else:
        v0 = np.full(n, 1.0 / np.sqrt(n))
        sigma = _gershgorin_lower(A) - 1.0
        vals, vecs = spla.eigsh(
            A, k=count, sigma=sigma, which="LM", tol=tol * 1e-2, v0=v0,
            maxiter=maxiter or n * 20,
        )
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]
        method = "shift-invert-lanczos"
    res = np.array(
        [np.linalg.norm(A @ vecs[:, j] - vals[j] * vecs[:, j]) for j in range(count)]
    )
    scale = 1.0 + np.abs(vals)
    if np.any(res > tol * scale):
        raise SolverError(
            f"eigensolver residuals exceed tolerance {tol}", residuals=res
        )
    return EigenResult(values=vals, vectors=vecs, residuals=res,
                       meta={"method": method, "tol": tol, "dim": n})


def ground_energy(model: ModelSpec, grid: MomentumGrid, basis: FockBasis,
                  xi, tol: float = 1e-9, dense_cutoff: int = 1500) -> float:
    """Bottom of the spectrum of the assembled fiber Hamiltonian at xi."""
    H = assemble_H(model, grid, basis, xi)
    return float(lowest_eigs(H, 1, tol=tol, dense_cutoff=dense_cutoff).values[0])


# ---------------------------------------------------------------------------
# shells


class ShellBranch:
    """One isolated-eigenvalue branch S(|xi|) on an annulus [r_lo, r_hi].

    Backed either by traced samples (cubic interpolation) or by a closed
    form.  ``value``/``deriv``/``deriv2`` act on the radius.
    """

    def __init__(self, radii=None, energies=None, fn=None, dfn=None,
                 d2fn=None, domain=None, multiplicity=1, branch_id=0,
                 provenance="eigensolver"):
        self.multiplicity = multiplicity
        self.branch_id = branch_id
        self.provenance = provenance
        if fn is not None:
            self.fn = fn
            self._dfn = dfn
            self._d2fn = d2fn
            self.domain = tuple(domain)
            self.radii = np.linspace(domain[0], domain[1], 65)
            self.energies = np.array([fn(r) for r in self.radii])
            self._spline = None
        else:
            radii = np.asarray(radii, dtype=float)
            energies = np.asarray(energies, dtype=float)
            if radii.size < 2:
                raise ValueError("a traced branch needs at least two samples")
            self.radii, self.energies = radii, energies
            self.domain = (float(radii[0]), float(radii[-1]))
            self.fn = None
            self._spline = CubicSpline(radii, energies, bc_type="natural")

    def contains(self, r: float, slack: float = 0.0) -> bool:
        return self.domain[0] - slack <= r <= self.domain[1] + slack

    def value(self, r: float) -> float:
        if self.fn is not None:
            return float(self.fn(r))
        return float(self._spline(r))

    def value_many(self, rs) -> np.ndarray:
        rs = np.asarray(rs, dtype=float)
        if self.fn is not None:
            return np.array([float(self.fn(r)) for r in rs])
        return np.asarray(self._spline(rs), dtype=float)

    def deriv(self, r: float) -> float:
        if self.fn is not None:
            if self._dfn is not None:
                return float(self._dfn(r))
            h = 1e-6 * (1.0 + abs(r))
            return (self.fn(r + h) - self.fn(r - h)) / (2 * h)
        return float(self._spline(r, 1))

    def deriv2(self, r: float) -> float:
        if self.fn is not None:
            if self._d2fn is not None:
                return float(self._d2fn(r))
            h = 1e-5 * (1.0 + abs(r))
            return (self.deriv(r + h) - self.deriv(r - h)) / (2 * h)
        return float(self._spline(r, 2))

    def lipschitz(self) -> float:
        dE = np.diff(self.energies)
        dr = np.diff(self.radii)
        return float(np.max(np.abs(dE / np.where(dr == 0, 1.0, dr))))


@dataclass
class Crossing:
    radius: float
    energy: float
    multiplicity: int = 2
    tangent: bool = False


@dataclass
class MassShellAtlas:
    """Traced (or synthetic) isolated branches plus their level crossings."""

    branches: List[ShellBranch]
    crossings: List[Crossing]
    source: str  # "eigensolver" | "analytic-synthetic"
    xi_radii: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ess_bottom: Optional[np.ndarray] = None
    notes: dict = field(default_factory=dict)

    @property
    def ground(self) -> ShellBranch:
        return self.branches[0]

    def branches_at(self, r: float, slack: float = 0.0) -> List[ShellBranch]:
        return [b for b in self.branches if b.contains(r, slack)]

    def crossing_multiplicity_consistent(self) -> bool:
        """Emanating multiplicities must sum to the crossing multiplicity."""
        for c in self.crossings:
            eps = 1e-9 * (1 + abs(c.radius))
            ends = [
                b for b in self.branches
                if (abs(b.domain[0] - c.radius) < eps or abs(b.domain[1] - c.radius) < eps)
                and abs(b.value(np.clip(c.radius, *b.domain)) - c.energy) < 1e-6 * (1 + abs(c.energy))
            ]
            if ends and sum(b.multiplicity for b in ends) not in (
                c.multiplicity, 2 * c.multiplicity
            ):
                return False
        return True


# ---------------------------------------------------------------------------
# free (g = 0) ground-state oracle, used for extrapolation beyond the traced
# radial range


class FreeGroundOracle:
    """min over basis states of the noninteracting diagonal at momentum p."""

    def __init__(self, model: ModelSpec, grid: MomentumGrid, basis: FockBasis):
        self.model = model
        omega_nodes = np.array([model.omega(k) for k in grid.nodes])
        self.tot_omega = basis.state_sums(omega_nodes)
        self.tot_k = basis.total_momentum()

    def __call__(self, p) -> float:
        p = np.atleast_1d(np.asarray(p, dtype=float))
        shifted = p[None, :] - self.tot_k
        r = np.linalg.norm(shifted, axis=1)
        Om = self.model.Omega.radial_many(r)
        return float(np.min(self.tot_omega + Om))

    def many(self, ps) -> np.ndarray:
        """Batched evaluation, chunked to keep the (batch, dim) distance
        table in cache-friendly sizes."""
        ps = np.atleast_2d(np.asarray(ps, dtype=float))
        out = np.empty(len(ps))
        chunk = max(1, int(2_000_000 / max(1, len(self.tot_omega))))
        for lo in range(0, len(ps), chunk):
            hi = min(lo + chunk, len(ps))
            diff = ps[lo:hi, None, :] - self.tot_k[None, :, :]
            r = np.sqrt(np.sum(diff * diff, axis=2))
            Om = self.model.Omega.radial_many(r)
            out[lo:hi] = np.min(self.tot_omega[None, :] + Om, axis=1)
        return out


class GroundShellEvaluator:
    """Ground energy Sigma_0 as a function of radius, with flagged
    extrapolation by the noninteracting diagonal outside the traced range."""

    def __init__(self, atlas: MassShellAtlas, oracle: Optional[FreeGroundOracle] = None):
        self.branch = atlas.ground
        self.oracle = oracle
        self.used_extrapolation = False

    def value(self, r: float) -> float:
        if self.branch.contains(r, slack=1e-12):
            return self.branch.value(r)
        if self.oracle is None:
            raise RangeError(
                f"radius {r} outside traced range {self.branch.domain} and "
                "no extrapolation oracle supplied"
            )
        self.used_extrapolation = True
        nu = self.oracle.tot_k.shape[1]
        p = np.zeros(nu)
        p[0] = r
        return self.oracle(p)


# ---------------------------------------------------------------------------
# tracing


def _ess_estimate(ground_eval: Callable[[float], float], model: ModelSpec,
                  grid: MomentumGrid, s: float) -> float:
    """One free boson on top of the ground branch, minimized over grid nodes."""
    nodes = grid.nodes
    xi = np.zeros(grid.nu)
    xi[0] = s
    vals = []
    for k in nodes:
        r = float(np.linalg.norm(xi - k))
        vals.append(ground_eval(r) + model.omega(k))
    return float(np.min(vals))


def _one_boson_spacing(model: ModelSpec, grid: MomentumGrid, s: float) -> float:
    """First level gap above the bottom of the discretized one-boson band
    (exact double degeneracies from the k -> -k symmetry are skipped)."""
    xi = np.zeros(grid.nu)
    xi[0] = s
    vals = np.sort(
        [model.Omega(xi - k) + model.omega(k) for k in grid.nodes]
    )
    diffs = np.diff(vals[: min(len(vals), 8)])
    diffs = diffs[diffs > 1e-13]
    return float(diffs[0]) if diffs.size else grid.spacing ** 2


def trace_shells(model: ModelSpec, grid: MomentumGrid, basis: FockBasis,
                 xi_radii: Sequence[float], n_branches: int = 1,
                 gap_tol: Optional[float] = None, cross_tol: Optional[float] = None,
                 overlap_tol: float = 0.1, eig_tol: float = 1e-9,
                 dense_cutoff: int = 1500) -> MassShellAtlas:
    """Trace isolated branches over a monotone radial xi grid.

    Branch continuation matches eigenvectors between adjacent xi samples by
    maximal overlap; a branch ends when its energy rises above the
    essential-bottom estimate minus ``gap_tol``.  Near-degenerate
    continuations are recorded as crossing candidates, never silently
    resolved.
    """
    xi_radii = np.asarray(list(xi_radii), dtype=float)
    if xi_radii.size < 2 or np.any(np.diff(xi_radii) <= 0):
        raise ValueError("xi_radii must be strictly increasing with >= 2 points")
    if n_branches < 1:
        raise ValueError("n_branches must be >= 1")
    if cross_tol is None:
        cross_tol = 10.0 * eig_tol

    oracle = FreeGroundOracle(model, grid, basis)
    k_solve = min(n_branches + 3, basis.dim)

    energies = np.full((len(xi_radii), k_solve), np.nan)
    vectors = []
    for i, s in enumerate(xi_radii):
        xi = np.zeros(grid.nu)
        xi[0] = s
        H = assemble_H(model, grid, basis, xi)
        res = lowest_eigs(H, k_solve, tol=eig_tol, dense_cutoff=dense_cutoff)
        energies[i] = res.values
        vectors.append(res.vectors)

    # pass 1 ground branch -> essential bottom estimate per radius
    ground_branch = ShellBranch(
        radii=xi_radii, energies=energies[:, 0], multiplicity=1, branch_id=0
    )
    ground_eval = GroundShellEvaluator(
        MassShellAtlas([ground_branch], [], "eigensolver"), oracle
    ).value
    ess = np.array([_ess_estimate(ground_eval, model, grid, s) for s in xi_radii])
    if gap_tol is None:
        gap_tol = 2.0 * max(
            _one_boson_spacing(model, grid, s) for s in (xi_radii[0], xi_radii[-1])
        )

    branches, crossings, candidates = continue_branches(
        xi_radii, energies, vectors, ess, n_branches=n_branches,
        gap_tol=gap_tol, cross_tol=cross_tol, overlap_tol=overlap_tol,
    )
    if not branches:
        branches = [ground_branch]
    atlas = MassShellAtlas(
        branches=branches, crossings=crossings, source="eigensolver",
        xi_radii=xi_radii, ess_bottom=ess,
        notes={"gap_tol": gap_tol, "cross_tol": cross_tol,
               "crossing_candidates": candidates},
    )
    return atlas


def continue_branches(xi_radii, energies, vectors, ess, n_branches: int,
                      gap_tol: float, cross_tol: float,
                      overlap_tol: float = 0.1):
    """Continuation core: match eigenvectors across adjacent radii by
    maximal overlap, terminate branches at the essential bottom, and record
    crossings (interpolated sign changes of branch-energy differences plus
    near-degenerate coincidences).  Ambiguous continuations always become
    crossing candidates, never silent choices."""
    xi_radii = np.asarray(xi_radii, dtype=float)
    energies = np.asarray(energies, dtype=float)
    k_solve = energies.shape[1]
    crossings: List[Crossing] = []
    candidates: List[dict] = []
    active = {}   # branch id -> column index at previous radius
    records = {}  # branch id -> (list of radii, list of energies)
    next_id = 0
    for b in range(min(n_branches, k_solve)):
        if energies[0, b] < ess[0] - gap_tol:
            active[next_id] = b
            records[next_id] = ([xi_radii[0]], [energies[0, b]])
            next_id += 1

    for i in range(1, len(xi_radii)):
        Vp, Vc = vectors[i - 1], vectors[i]
        overlap = np.abs(Vp.conj().T @ Vc)  # (k_prev, k_cur)
        new_active = {}
        taken = set()
        for bid, col in sorted(active.items()):
            row = overlap[col]
            order = np.argsort(row)[::-1]
            best = next((c for c in order if c not in taken), None)
            if best is None:
                continue
            # ambiguity: two comparable overlaps signal a crossing candidate
            runner = next((c for c in order if c != best and c not in taken), None)
            if runner is not None and row[best] - row[runner] < overlap_tol:
                candidates.append(
                    {"radius": float(xi_radii[i]),
                     "columns": (int(best), int(runner))}
                )
            e = energies[i, best]
            if e > ess[i] - gap_tol:
                continue  # branch absorbed at the essential bottom
            taken.add(best)
            new_active[bid] = best
            records[bid][0].append(float(xi_radii[i]))
            records[bid][1].append(float(e))
        # open new branches for untaken low-lying levels
        for c in range(k_solve):
            if c in taken or len(new_active) >= n_branches:
                continue
            if energies[i, c] < ess[i] - gap_tol:
                new_active[next_id] = c
                records[next_id] = ([float(xi_radii[i])],
                                    [float(energies[i, c])])
                next_id += 1
        # coincidences among continued branches
        ids = sorted(new_active)
        for a_pos in range(len(ids)):
            for b_pos in range(a_pos + 1, len(ids)):
                ea = energies[i, new_active[ids[a_pos]]]
                eb = energies[i, new_active[ids[b_pos]]]
                if abs(ea - eb) <= cross_tol:
                    crossings.append(
                        Crossing(radius=float(xi_radii[i]),
                                 energy=float(0.5 * (ea + eb)))
                    )
        active = new_active

    branches = []
    for bid in sorted(records):
        radii, es = records[bid]
        if len(radii) < 2:
            continue
        branches.append(
            ShellBranch(radii=np.array(radii), energies=np.array(es),
                        multiplicity=1, branch_id=bid)
        )

    # pairwise sign changes of interpolated branch energies are crossings
    for a_i in range(len(branches)):
        for b_i in range(a_i + 1, len(branches)):
            a, b = branches[a_i], branches[b_i]
            lo = max(a.domain[0], b.domain[0])
            hi = min(a.domain[1], b.domain[1])
            if hi <= lo:
                continue
            common = np.array([r for r in xi_radii if lo <= r <= hi])
            if common.size < 2:
                continue
            diff = a.value_many(common) - b.value_many(common)
            for m in range(len(common) - 1):
                if abs(diff[m]) <= cross_tol:
                    crossings.append(
                        Crossing(float(common[m]), float(a.value(common[m]))))
                elif diff[m] * diff[m + 1] < 0:
                    t = diff[m] / (diff[m] - diff[m + 1])
                    rc = float(common[m] + t * (common[m + 1] - common[m]))
                    crossings.append(Crossing(rc, float(a.value(rc))))
    deduped = []
    for c in sorted(crossings, key=lambda c: (c.radius, c.energy)):
        if not any(abs(c.radius - d.radius) < 1e-6 * (1 + abs(c.radius)) and
                   abs(c.energy - d.energy) < 1e-6 * (1 + abs(c.energy))
                   for d in deduped):
            deduped.append(c)
    return branches, deduped, candidates


def analytic_shell_source(defs: Sequence[dict]) -> MassShellAtlas:
    """Atlas from closed-form branches.

    Each def is a dict with keys ``fn`` (callable of radius), ``domain``
    (r_lo, r_hi), and optionally ``dfn``, ``d2fn``, ``multiplicity``.
    Crossings are found by pairwise root finding of S_a - S_b on the domain
    overlaps; tangencies (touching without a sign change) are reported as
    tangent, not as crossings.
    """
    branches = []
    for i, d in enumerate(defs):
        branches.append(
            ShellBranch(
                fn=d["fn"], dfn=d.get("dfn"), d2fn=d.get("d2fn"),
                domain=d["domain"], multiplicity=d.get("multiplicity", 1),
                branch_id=i, provenance="analytic-synthetic",
            )
        )
    crossings: List[Crossing] = []
    for i in range(len(branches)):
        for j in range(i + 1, len(branches)):
            a, b = branches[i], branches[j]
            lo = max(a.domain[0], b.domain[0])
            hi = min(a.domain[1], b.domain[1])
            if hi <= lo:
                continue
            rs = np.linspace(lo, hi, 512)
            diff = np.array([a.value(r) - b.value(r) for r in rs])
            for m in range(len(rs) - 1):
                if diff[m] * diff[m + 1] < 0:
                    rc = brentq(lambda r: a.value(r) - b.value(r),
                                rs[m], rs[m + 1], xtol=1e-14)
                    crossings.append(
                        Crossing(float(rc), float(a.value(rc)),
                                 multiplicity=a.multiplicity + b.multiplicity)
                    )
            # exact zeros: a crossing only when the sign flips through them
            for m in np.nonzero(diff == 0.0)[0]:
                left = diff[:m][diff[:m] != 0.0]
                right = diff[m + 1:][diff[m + 1:] != 0.0]
                through = (left.size and right.size
                           and np.sign(left[-1]) != np.sign(right[0]))
                crossings.append(
                    Crossing(float(rs[m]), float(a.value(rs[m])),
                             multiplicity=a.multiplicity + b.multiplicity,
                             tangent=not through)
                )
            # near-tangency: tiny |diff| without any sign change
            near = (np.abs(diff) < 1e-12) & (diff != 0.0)
            if np.any(near) and not np.any(diff[:-1] * diff[1:] < 0):
                m = int(np.argmin(np.abs(diff)))
                crossings.append(
                    Crossing(float(rs[m]), float(a.value(rs[m])), tangent=True)
                )
    crossings = [c for c in crossings]
    rad = np.unique(np.concatenate([b.radii for b in branches]))
    return MassShellAtlas(
        branches=branches, crossings=crossings,
        source="analytic-synthetic", xi_radii=rad,
    )
