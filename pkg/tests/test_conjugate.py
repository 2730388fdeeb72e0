import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import nelsonkit as nk
from nelsonkit.conjugate import (
    ConjugateOptions,
    PolarFrame,
    build_conjugate,
    build_vector_field,
    calibrate,
    crossing_momenta,
    flow_map,
)
from nelsonkit.errors import PreconditionError, SupportError
from nelsonkit.spectra import FreeGroundOracle


# ---------------------------------------------------------------------------
# polar frame


@given(st.floats(0.05, 3.0), st.floats(0.01, 3.1), st.sampled_from([1.0, -1.0]))
@settings(max_examples=60, deadline=None)
def test_polar_radius_identity(s, theta, w):
    frame = PolarFrame(np.array([0.8, -0.6]))
    k = frame.k_of(s, theta, w)
    assert np.linalg.norm(k - frame.xi) == pytest.approx(s, abs=1e-12)


def test_polar_tangent_matches_finite_differences():
    frame = PolarFrame(np.array([1.1, 0.3]))
    h = 1e-7
    for s, theta, w in [(0.7, 0.9, 1.0), (1.4, 2.2, -1.0)]:
        fd = (frame.k_of(s, theta + h, w) - frame.k_of(s, theta - h, w)) / (2 * h)
        assert np.allclose(frame.v_of(s, theta, w), fd, atol=1e-7)


def test_polar_roundtrip():
    frame = PolarFrame(np.array([0.5, 1.2]))
    for s, theta, w in [(0.4, 0.7, 1.0), (1.1, 2.8, -1.0)]:
        k = frame.k_of(s, theta, w)
        s2, t2, w2 = frame.polar_of(k)
        assert s2 == pytest.approx(s, abs=1e-12)
        assert t2 == pytest.approx(theta, abs=1e-12)
        assert w2 == w


# ---------------------------------------------------------------------------
# crossing landings


def test_crossing_momenta_constructed_inverse(synthetic2d):
    model, atlas, _, _, (Rc, Ec) = synthetic2d
    xi = np.array([2.0, 0.0])
    # |k(Rc, theta)|^2 = 4 + Rc^2 - 4 Rc cos(theta); choose E so that the
    # unique landing is at theta = pi/2
    E = Ec + model.omega.radial(np.sqrt(4 + Rc * Rc))
    seeds = crossing_momenta(model, atlas, xi, E)
    ours = [s for s in seeds if abs(s["radius"] - Rc) < 1e-12]
    assert len(ours) == 1
    assert ours[0]["theta"] == pytest.approx(np.pi / 2, abs=1e-10)


def test_crossing_momenta_empty_cases(synthetic2d):
    model, atlas, _, _, _ = synthetic2d
    assert crossing_momenta(model, atlas, np.array([0.0, 0.0]), 1.9) == []
    pol = nk.polaron_preset(nu=2, lam=0.0, c0=1.0)
    assert crossing_momenta(pol, atlas, np.array([1.2, 0.0]), 1.9) == []


def test_crossing_momenta_bisection_oracle(synthetic2d):
    model, atlas, xi, _, (Rc, Ec) = synthetic2d
    E = 1.96
    seeds = crossing_momenta(model, atlas, xi, E)
    assert seeds
    s = float(np.linalg.norm(xi))
    target = E - Ec

    def f(th):
        kk = np.sqrt(s * s + Rc * Rc - 2 * s * Rc * np.cos(th))
        return model.omega.radial(kk) - target

    for sd in seeds:
        lo, hi = 1e-12, np.pi - 1e-12
        # plain bisection, independent of the production root finder
        a, b = lo, hi
        assert f(a) * f(b) < 0
        for _ in range(200):
            mid = 0.5 * (a + b)
            if f(a) * f(mid) <= 0:
                b = mid
            else:
                a = mid
        assert sd["theta"] == pytest.approx(0.5 * (a + b), abs=1e-10)


def test_collinear_landing_violates_precondition(synthetic2d):
    model, atlas, xi, _, (Rc, Ec) = synthetic2d
    s = float(np.linalg.norm(xi))
    E_parallel = Ec + model.omega.radial(abs(s - Rc))
    with pytest.raises(PreconditionError):
        crossing_momenta(model, atlas, xi, E_parallel)


# ---------------------------------------------------------------------------
# calibration


def test_calibrate_no_crossings_no_tori(traced, nelson1d):
    atlas, oracle, rep = traced
    lam = 0.5 * (rep.sigma1 + rep.sigma2)
    calib = calibrate(nelson1d, atlas, np.array([0.0]), lam, report=rep,
                      oracle=oracle)
    assert calib.tori == []
    assert calib.emission.crossing_samples.size == 0
    assert calib.delta_prime > 0


def test_calibrate_rejects_threshold_energy(traced, nelson1d):
    atlas, oracle, rep = traced
    with pytest.raises(PreconditionError):
        calibrate(nelson1d, atlas, np.array([0.0]), rep.sigma1, report=rep,
                  oracle=oracle)
    with pytest.raises(PreconditionError):
        calibrate(nelson1d, atlas, np.array([0.0]), rep.sigma2 + 0.5,
                  report=rep, oracle=oracle)


@pytest.fixture(scope="module")
def calibrated(synthetic2d):
    model, atlas, xi, rep, _ = synthetic2d
    E = 1.96
    calib = calibrate(model, atlas, xi, E, report=rep)
    bundle = build_vector_field(model, atlas, xi, E, calib=calib)
    return model, atlas, xi, E, calib, bundle


def test_cascade_is_monotone(calibrated):
    _, _, _, _, calib, _ = calibrated
    r1, r2, r3, r4 = calib.record.eps_r_cascade
    t1, t2 = calib.record.eps_theta_cascade
    assert calib.record.eps_r <= r1 <= r2 <= r3 <= r4
    assert calib.record.eps_theta <= t1 <= t2


def test_torus_invariants(calibrated):
    model, _, xi, _, calib, _ = calibrated
    frame = calib.frame
    for t in calib.tori:
        assert t.eps_theta < min(t.theta, np.pi - t.theta) / 2
        assert t.eps_r < t.radius
        # positive gradient floor and the sign identity on the torus
        for th in t.theta + np.linspace(-t.eps_theta, t.eps_theta, 9):
            for r in t.radius + np.linspace(-t.eps_r, t.eps_r, 5):
                for w in (1.0, -1.0):
                    k = frame.k_of(r, th, w)
                    g = model.omega.grad(k)
                    assert np.linalg.norm(g) > 0
                    lhs = np.linalg.norm(g)
                    rhs = t.sigma * np.dot(k / np.linalg.norm(k), g)
                    assert lhs == pytest.approx(rhs, abs=1e-12)
        assert t.c_ij > 0


def test_sigma_matches_analytic_sign(calibrated):
    model, _, _, _, calib, _ = calibrated
    frame = calib.frame
    for t in calib.tori:
        k = frame.k_of(t.radius, t.theta, 1.0)
        assert t.sigma == np.sign(np.dot(k, model.omega.grad(k)))


def test_partition_of_unity(calibrated):
    _, _, _, _, calib, bundle = calibrated
    rng = np.random.default_rng(17)
    pts = calib.emission.samples
    idx = rng.choice(len(pts), size=50, replace=False)
    for i in idx:
        assert abs(bundle.partition_sum(pts[i]) - 1.0) <= 1e-12
    for k in calib.emission.crossing_samples[::4]:
        assert abs(bundle.partition_sum(k) - 1.0) <= 1e-12


def test_sup_norm_bound(calibrated):
    _, _, _, _, calib, bundle = calibrated
    assert calib.record.sup_bound <= bundle.sup_bound + 1e-12
    assert bundle.sup_bound == 2.0 + max(t.radius for t in calib.tori)


def test_infrared_exclusion_for_singular_coupling():
    model = nk.polaron_preset(nu=1, lam=0.3, c0=1.0, uv_cutoff=3.0)
    grid = nk.MomentumGrid(nu=1, half_width=3.0, points_per_axis=49)
    basis = nk.enumerate_basis(grid, 2)
    atlas = nk.trace_shells(model, grid, basis, np.linspace(0.0, 2.4, 13))
    oracle = FreeGroundOracle(model, grid, basis)
    rep = nk.full_report(model, atlas, np.array([0.0]), oracle=oracle)
    lam = 0.5 * (rep.sigma1 + rep.sigma2)
    bundle = build_vector_field(model, atlas, np.array([0.0]), lam,
                                report=rep, oracle=oracle)
    assert bundle.exc_active
    for k in np.linspace(-0.05, 0.05, 11):
        assert np.linalg.norm(bundle(np.array([k]))) == 0.0


# ---------------------------------------------------------------------------
# conjugate operators


def test_zero_field_gives_zero_operators(grid33, basis33, traced, nelson1d):
    class ZeroBundle:
        nu = 1
        def __call__(self, k):
            return np.zeros(1)
        def many(self, ks):
            return np.zeros((len(np.atleast_2d(ks)), 1))
        def divergence(self, k):
            return 0.0
    a, A = build_conjugate(basis33, grid33, ZeroBundle())
    assert a.matrix.nnz == 0
    assert A.matrix.nnz == 0


def test_conjugate_exactly_hermitian(traced, nelson1d, grid33, basis33):
    atlas, oracle, rep = traced
    lam = 0.5 * (rep.sigma1 + rep.sigma2)
    bundle = build_vector_field(nelson1d, atlas, np.array([0.0]), lam,
                                report=rep, oracle=oracle)
    a, A = build_conjugate(basis33, grid33, bundle)
    assert a.hermiticity_defect() == 0.0
    assert A.hermiticity_defect() == 0.0
    assert A.verify_block_structure(basis33)  # sector preserving
    rng = np.random.default_rng(3)
    for _ in range(20):
        psi = rng.normal(size=grid33.n_nodes) + 1j * rng.normal(size=grid33.n_nodes)
        val = np.vdot(psi, a.matrix @ psi)
        assert abs(val.imag) < 1e-12 * (1 + abs(val.real))


def test_support_error_near_boundary(grid33, basis33):
    class WideBundle:
        nu = 1
        def __call__(self, k):
            return np.ones(1)
        def many(self, ks):
            return np.ones((len(np.atleast_2d(ks)), 1))
        def divergence(self, k):
            return 0.0
    with pytest.raises(SupportError):
        build_conjugate(basis33, grid33, WideBundle())


# ---------------------------------------------------------------------------
# flow


class LinearPlateauBundle:
    """v(k) = alpha (k - kbar) inside a plateau, for closed-form flows."""

    nu = 1

    def __init__(self, alpha=0.4, kbar=0.2, halfwidth=0.6):
        self.alpha = alpha
        self.kbar = np.array([kbar])
        self.halfwidth = halfwidth

    def __call__(self, k):
        k = np.atleast_1d(k)
        if abs(float(k[0]) - self.kbar[0]) <= self.halfwidth:
            return self.alpha * (k - self.kbar)
        return np.zeros(1)

    def divergence(self, k):
        k = np.atleast_1d(k)
        if abs(float(k[0]) - self.kbar[0]) <= self.halfwidth:
            return self.alpha
        return 0.0


def test_flow_identity_outside_support(calibrated):
    _, _, _, _, _, bundle = calibrated
    k0 = np.array([3.9, 3.9])
    psi, J = flow_map(bundle, k0, 0.7, 0.02)
    assert np.array_equal(psi, k0)
    assert J == 1.0


def test_flow_norm_bound(calibrated):
    _, _, _, _, calib, bundle = calibrated
    rng = np.random.default_rng(9)
    pts = calib.emission.samples
    vmax = calib.record.sup_bound
    for i in rng.choice(len(pts), size=12, replace=False):
        for t in (0.15, 0.6):
            psi, J = flow_map(bundle, pts[i], t, 0.02)
            assert np.linalg.norm(psi - pts[i]) <= t * vmax + 1e-9
            assert J > 0


def test_flow_locally_linear_closed_form():
    b = LinearPlateauBundle()
    k0 = np.array([0.35])
    t = 0.5
    psi, J = flow_map(b, k0, t, 0.01)
    exact = b.kbar + (k0 - b.kbar) * np.exp(b.alpha * t)
    assert abs(psi[0] - exact[0]) < 1e-8
    assert J == pytest.approx(np.exp(b.alpha * t), abs=1e-8)


def test_flow_rejects_large_steps(calibrated):
    _, _, _, _, _, bundle = calibrated
    with pytest.raises(ValueError):
        flow_map(bundle, np.array([0.1, 0.1]), 0.5, 0.5)
