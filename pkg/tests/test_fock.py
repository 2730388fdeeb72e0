import os
from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import nelsonkit as nk
from nelsonkit.errors import SizingError
from nelsonkit.fock import (
    FockBasis,
    build_creation,
    build_dGamma,
    build_field,
    creation_structure,
    free_diagonal,
    load_operator,
    save_operator,
    smeared_modes,
)


def small_basis(G=4, n_max=3):
    grid = nk.MomentumGrid(nu=1, half_width=1.0, points_per_axis=G)
    return grid, nk.enumerate_basis(grid, n_max)


# ---------------------------------------------------------------------------
# basis enumeration


def test_sector_dimensions_stars_and_bars():
    grid = nk.MomentumGrid(nu=1, half_width=1.0, points_per_axis=3)
    basis = nk.enumerate_basis(grid, 2)
    assert basis.sector_dims() == [1, 3, 6]
    assert basis.dim == 10
    assert basis.states[0][0] == ()
    assert basis.index[()] == 0


def test_single_mode_tower():
    grid = nk.MomentumGrid(nu=1, half_width=1.0, points_per_axis=2)
    # use a 1-node "grid" via n=2 then restrict? enumerate over G=2 instead:
    basis = nk.enumerate_basis(grid, 3)
    assert basis.sector_dims() == [1, 2, 3, 4]


def test_two_boson_dimension_binomial_oracle():
    grid = nk.MomentumGrid(nu=2, half_width=1.0, points_per_axis=8)  # G=64
    basis = nk.enumerate_basis(grid, 2)
    assert basis.sector_dims() == [1, 64, comb(65, 2)]


def test_dimension_cap_names_sector():
    grid = nk.MomentumGrid(nu=1, half_width=1.0, points_per_axis=64)
    with pytest.raises(SizingError) as err:
        nk.enumerate_basis(grid, 3, dim_cap=1000)
    assert "sector" in str(err.value)


def test_index_map_is_bijective():
    _, basis = small_basis(5, 2)
    seen = set(basis.index.values())
    assert len(seen) == basis.dim
    assert seen == set(range(basis.dim))
    for n, sector in enumerate(basis.states):
        for s in sector:
            assert tuple(sorted(s)) == s


# ---------------------------------------------------------------------------
# dGamma


def test_dgamma_vacuum_and_occupancy(nelson1d, grid33, basis33):
    om = np.array([nelson1d.omega(k) for k in grid33.nodes])
    op = build_dGamma(basis33, om)
    assert op.matrix[0, 0] == 0.0
    p = 7
    i = basis33.index[(p, p)]
    assert op.matrix[i, i] == 2 * om[p]


@given(st.integers(0, 3), st.integers(0, 3))
@settings(max_examples=20, deadline=None)
def test_dgamma_matches_direct_sum(p, q):
    grid, basis = small_basis(4, 2)
    rng = np.random.default_rng(11)
    f = rng.normal(size=4)
    op = build_dGamma(basis, f)
    state = tuple(sorted((p, q)))
    i = basis.index[state]
    assert op.matrix[i, i] == pytest.approx(f[p] + f[q], abs=1e-14)


def test_dgamma_operators_commute(grid33, basis33):
    rng = np.random.default_rng(5)
    f = rng.normal(size=grid33.n_nodes)
    g = rng.normal(size=grid33.n_nodes)
    A = build_dGamma(basis33, f).matrix
    B = build_dGamma(basis33, g).matrix
    assert abs(A @ B - B @ A).max() == 0.0


# ---------------------------------------------------------------------------
# field operator and exact CCR


def test_field_single_creation_element(nelson1d, grid33, basis33):
    ghat = smeared_modes(nelson1d, grid33)
    phi = build_field(basis33, ghat)
    p = 12
    i = basis33.index[(p,)]
    assert phi.matrix[i, 0] == ghat[p]
    assert phi.matrix[0, i] == np.conj(ghat[p])


def test_zero_coupling_zero_matrix(grid33, basis33):
    phi = build_field(basis33, np.zeros(grid33.n_nodes))
    assert phi.matrix.nnz == 0


def test_field_adjacent_sector_sparsity(nelson1d, grid33, basis33):
    phi = build_field(basis33, smeared_modes(nelson1d, grid33))
    assert phi.verify_block_structure(basis33)
    assert phi.hermiticity_defect() == 0.0


# exact arithmetic in Q(sqrt 2, sqrt 3, ...): numbers sum_m q_m sqrt(m)
def _sqfree(n):
    c, m = 1, n
    d = 2
    while d * d <= m:
        while m % (d * d) == 0:
            m //= d * d
            c *= d
        d += 1
    return c, m


class Rad(dict):
    @classmethod
    def of_sqrt(cls, n, coeff=Fraction(1)):
        c, m = _sqfree(n)
        return cls({m: coeff * c})

    def plus(self, other):
        out = Rad(self)
        for m, q in other.items():
            out[m] = out.get(m, Fraction(0)) + q
        return out

    def times(self, other):
        out = Rad()
        for m1, q1 in self.items():
            for m2, q2 in other.items():
                c, m = _sqfree(m1 * m2)
                out[m] = out.get(m, Fraction(0)) + q1 * q2 * c
        return out

    def is_zero(self):
        return all(q == 0 for q in self.values())


def _exact_creation(basis, g):
    """Creation matrix a*(g) as {(i, j): Rad} using the same structural
    enumeration as the floating-point builder."""
    mat = {}
    for p in range(basis.grid.n_nodes):
        if g[p] == 0:
            continue
        for row, col, occ in creation_structure(basis, p):
            entry = Rad.of_sqrt(occ, g[p])
            mat[(row, col)] = mat.get((row, col), Rad()).plus(entry)
    return mat


def _exact_matmul(A, B, dim):
    out = {}
    by_col = {}
    for (i, j), v in B.items():
        by_col.setdefault(i, []).append((j, v))
    for (i, k), va in A.items():
        for (j, vb) in by_col.get(k, []):
            out[(i, j)] = out.get((i, j), Rad()).plus(va.times(vb))
    return out


def test_ccr_block_identity_exact_arithmetic():
    """[a(f), a*(g)] = <f, g> identity on sectors below the top one,
    verified in exact arithmetic over Q(sqrt m): zero tolerance."""
    grid, basis = small_basis(4, 3)
    f = [Fraction(1, 2), Fraction(-2), Fraction(3, 4), Fraction(1)]
    g = [Fraction(2), Fraction(1, 3), Fraction(0), Fraction(-5, 4)]
    C = _exact_creation(basis, g)           # a*(g)
    Cf = _exact_creation(basis, f)          # a*(f);  a(f) = transpose (real f)
    A = {(j, i): v for (i, j), v in Cf.items()}
    AC = _exact_matmul(A, C, basis.dim)
    CA = _exact_matmul(C, A, basis.dim)
    comm = dict(AC)
    for key, v in CA.items():
        comm[key] = comm.get(key, Rad()).plus(Rad({m: -q for m, q in v.items()}))
    inner = sum(fp * gp for fp, gp in zip(f, g))
    top = basis.offsets[basis.n_max]
    for i in range(top):
        for j in range(top):
            expect = Rad({1: inner}) if i == j else Rad()
            got = comm.get((i, j), Rad())
            delta = got.plus(Rad({m: -q for m, q in expect.items()}))
            assert delta.is_zero(), (i, j, got, expect)


def test_ccr_block_identity_floating_point():
    grid, basis = small_basis(4, 3)
    rng = np.random.default_rng(2)
    f = rng.normal(size=4)
    g = rng.normal(size=4)
    Cg = build_creation(basis, g).matrix
    Cf = build_creation(basis, f).matrix
    A = Cf.getH()
    comm = (A @ Cg - Cg @ A).toarray()
    top = basis.offsets[basis.n_max]
    block = comm[:top, :top]
    assert np.allclose(block, np.dot(f, g) * np.eye(top), atol=5e-14)


# ---------------------------------------------------------------------------
# Hamiltonians


def test_vacuum_diagonal_is_particle_energy(nelson1d, grid33, basis33):
    xi = np.array([0.7])
    H = nk.assemble_H(nelson1d, grid33, basis33, xi)
    assert H.matrix[0, 0] == pytest.approx(nelson1d.Omega(xi), abs=0)


def test_free_hamiltonian_block_diagonal(nelson1d_free, grid33, basis33):
    xi = np.array([0.3])
    H = nk.assemble_H(nelson1d_free, grid33, basis33, xi)
    assert H.block == "diagonal"
    for p, k in enumerate(grid33.nodes):
        i = basis33.index[(p,)]
        want = nelson1d_free.Omega(xi - k) + nelson1d_free.omega(k)
        assert H.matrix[i, i] == pytest.approx(want, rel=1e-15)


def test_hamiltonian_is_sum_of_parts(nelson1d, grid33, basis33):
    xi = np.array([0.2])
    H = nk.assemble_H(nelson1d, grid33, basis33, xi)
    diag = free_diagonal(nelson1d, grid33, basis33, xi)
    phi = build_field(basis33, smeared_modes(nelson1d, grid33))
    import scipy.sparse as sp
    rebuilt = sp.diags(diag.astype(complex)) + phi.matrix
    assert abs(H.matrix - rebuilt).max() == 0.0
    assert H.hermiticity_defect() == 0.0


def test_free_spectrum_is_diagonal_multiset():
    model = nk.nelson_preset(nu=1, lam=0.0, uv_cutoff=1.0)
    grid = nk.MomentumGrid(nu=1, half_width=1.0, points_per_axis=5)
    basis = nk.enumerate_basis(grid, 2)
    H = nk.assemble_H(model, grid, basis, np.array([0.4]))
    dense = H.matrix.toarray()
    evals = np.linalg.eigvalsh(dense)
    assert np.allclose(np.sort(np.real(np.diag(dense))), evals, atol=1e-12)


def test_extended_fiber_is_shift(nelson1d, grid33, basis33):
    xi = np.array([0.5])
    k0 = np.array([0.0])
    H1 = nk.assemble_H1(nelson1d, grid33, basis33, xi, k0)
    H = nk.assemble_H(nelson1d, grid33, basis33, xi)
    diff = (H1.matrix - H.matrix).toarray()
    m = nelson1d.omega(k0)
    assert np.allclose(diff, m * np.eye(basis33.dim), atol=0)


def test_extended_fiber_spectrum_shift(nelson1d):
    grid = nk.MomentumGrid(nu=1, half_width=2.0, points_per_axis=9)
    basis = nk.enumerate_basis(grid, 2)
    xi = np.array([0.4])
    k = grid.nodes[6]
    H1 = nk.assemble_H1(nelson1d, grid, basis, xi, k)
    Hs = nk.assemble_H(nelson1d, grid, basis, xi - k)
    e1 = np.linalg.eigvalsh(H1.matrix.toarray())
    es = np.linalg.eigvalsh(Hs.matrix.toarray())
    assert np.allclose(e1, es + nelson1d.omega(k), atol=1e-12)


def test_binary_dump_roundtrip(tmp_path, nelson1d, grid33, basis33):
    H = nk.assemble_H(nelson1d, grid33, basis33, np.array([0.1]))
    path = tmp_path / "H.nkop"
    save_operator(H, path)
    back = load_operator(path)
    assert back.dim == H.dim
    assert abs(back.matrix - H.matrix).max() == 0.0
