import numpy as np
import pytest

import nelsonkit as nk
from nelsonkit.model import (
    CouplingSpec,
    ModelSpec,
    OneBodyDispersion,
    ParticleDispersion,
)
from nelsonkit.spectra import Crossing, MassShellAtlas
from nelsonkit.thresholds import (
    ThresholdOptions,
    discreteness_check,
    sigma_n_fn,
    sigma_n_min,
    threshold_hash,
    threshold_parallel,
    threshold_shell,
)


def rel_model(nu=1, constant=False, c0=1.0):
    omega = (OneBodyDispersion(kind="constant", c0=c0) if constant
             else OneBodyDispersion(kind="relativistic", m=1.0))
    return ModelSpec(nu=nu, omega=omega,
                     Omega=ParticleDispersion(kind="nonrelativistic"),
                     coupling=CouplingSpec(kind="zero"))


def quadratic_atlas(hi=3.0):
    return nk.analytic_shell_source(
        [{"fn": lambda r: r * r, "dfn": lambda r: 2 * r,
          "d2fn": lambda r: 2.0, "domain": (0.0, hi)}])


def half_quadratic_atlas(hi=3.0):
    return nk.analytic_shell_source(
        [{"fn": lambda r: r * r / 2.0, "dfn": lambda r: r,
          "d2fn": lambda r: 1.0, "domain": (0.0, hi)}])


def with_crossing(atlas, radius, energy):
    return MassShellAtlas(branches=atlas.branches,
                          crossings=[Crossing(radius, energy)],
                          source=atlas.source, xi_radii=atlas.xi_radii)


# ---------------------------------------------------------------------------
# composite energies


def test_sigma1_fn_at_rest_boson(traced, nelson1d):
    atlas, oracle, rep = traced
    xi = np.array([0.3])
    val = sigma_n_fn(nelson1d, atlas, xi, [np.zeros(1)], oracle=oracle)
    assert val == pytest.approx(atlas.ground.value(0.3) + 1.0, abs=1e-12)


def test_free_composite_profile():
    model = rel_model()
    atlas = quadratic_atlas()
    val = sigma_n_fn(model, atlas, np.array([0.0]), [np.array([0.0])])
    assert val == pytest.approx(1.0, abs=0)


def test_sigma_fn_matches_recalculation(traced, nelson1d, grid33, basis33):
    atlas, oracle, _ = traced
    xi = np.array([0.2])
    rng = np.random.default_rng(8)
    for _ in range(4):
        k = rng.uniform(-0.7, 0.7, size=1)
        got = sigma_n_fn(nelson1d, atlas, xi, [k], oracle=oracle)
        want = atlas.ground.value(float(np.abs(xi - k))) + nelson1d.omega(k)
        assert got == pytest.approx(want, abs=1e-12)


def test_free_one_boson_threshold_is_mass_gap():
    model = rel_model()
    atlas = quadratic_atlas()
    out = sigma_n_min(model, atlas, np.array([0.0]), 1)
    assert out.value == pytest.approx(1.0, abs=1e-9)
    assert np.linalg.norm(out.minimizer) < 1e-4


def test_free_two_boson_threshold_doubles():
    model = rel_model()
    atlas = quadratic_atlas()
    out = sigma_n_min(model, atlas, np.array([0.0]), 2)
    assert out.value == pytest.approx(2.0, abs=1e-8)


def test_minimizer_beats_dense_verification_grid(traced, nelson1d):
    atlas, oracle, _ = traced
    xi = np.array([0.4])
    out = sigma_n_min(nelson1d, atlas, xi, 1, oracle=oracle)
    ks = np.linspace(-1.5, 1.5, 301)
    vals = [sigma_n_fn(nelson1d, atlas, xi, [np.array([k])], oracle=oracle)
            for k in ks]
    assert out.value <= min(vals) + 1e-9


def test_essential_bottom_free_cases(grid33, basis33):
    model = rel_model()
    atlas = quadratic_atlas()
    assert nk.essential_bottom(model, atlas, np.array([0.0])) == \
        pytest.approx(1.0, abs=1e-9)
    pol = rel_model(constant=True, c0=0.7)
    assert nk.essential_bottom(pol, quadratic_atlas(hi=4.0),
                               np.array([0.0])) == pytest.approx(0.7, abs=1e-9)


def test_monotonicity_of_boson_thresholds(traced, nelson1d):
    atlas, oracle, _ = traced
    m = 1.0
    s1_all, s2_all = [], []
    for s in (0.0, 0.5, 1.0):
        xi = np.array([s])
        s1 = sigma_n_min(nelson1d, atlas, xi, 1, oracle=oracle).value
        s2 = sigma_n_min(nelson1d, atlas, xi, 2, oracle=oracle).value
        assert s2 >= s1
        s1_all.append(s1)
        s2_all.append(s2)
    # quantified strictness for unbounded omega: adding a boson costs at
    # least the mass gap relative to the lowest one-boson threshold
    for s2 in s2_all:
        assert s2 - min(s1_all) >= m - 0.05
    # at xi = 0 the two statements coincide
    assert s2_all[0] - s1_all[0] >= m - 0.05


# ---------------------------------------------------------------------------
# shell-critical family


def test_shell_family_at_origin():
    model = rel_model()
    atlas = half_quadratic_atlas()
    hits = threshold_shell(model, atlas, np.array([0.0]))
    assert len(hits) == 1
    assert hits[0].energy == pytest.approx(1.0, abs=1e-10)
    assert np.linalg.norm(hits[0].witness) < 1e-10


def test_shell_family_matches_bisection_oracle():
    from scipy.optimize import brentq
    model = rel_model()
    atlas = half_quadratic_atlas(hi=6.0)
    xi = np.array([2.0])
    hits = threshold_shell(model, atlas, xi)
    # critical equation along the ray: (k - 2) + k/sqrt(k^2+1) = 0
    g = lambda k: (k - 2.0) + k / np.sqrt(k * k + 1.0)
    k_star = brentq(g, 0.0, 2.0, xtol=1e-15)
    e_star = 0.5 * (2.0 - k_star) ** 2 + np.sqrt(k_star**2 + 1.0)
    assert any(abs(h.energy - e_star) < 1e-10 for h in hits)


def test_shell_family_constant_omega():
    model = rel_model(constant=True, c0=0.8)
    atlas = half_quadratic_atlas()
    xi = np.array([1.1])
    hits = threshold_shell(model, atlas, xi)
    # grad omega = 0 forces grad S(xi - k) = 0, i.e. xi - k = 0
    assert any(abs(h.energy - 0.8) < 1e-10 and
               abs(np.linalg.norm(h.witness) - 1.1) < 1e-8 for h in hits)


def test_witnesses_satisfy_defining_equation(synthetic2d):
    model, atlas, xi, rep, _ = synthetic2d
    opts = ThresholdOptions()
    for h in rep.t_shell:
        k = h.witness
        r = float(np.linalg.norm(xi - k))
        for b in atlas.branches:
            if b.contains(r, slack=1e-9):
                g = b.deriv(float(np.clip(r, *b.domain))) * (k - xi) / r \
                    if r > 0 else np.zeros(2)
                res = np.linalg.norm(g + model.omega.grad(k))
                if res <= opts.newton_tol:
                    break
        else:
            pytest.fail(f"witness {k} matches no branch")


# ---------------------------------------------------------------------------
# crossing families


def test_parallel_family_closed_form():
    model = rel_model()
    atlas = with_crossing(half_quadratic_atlas(), 1.0, 0.5)
    hits = threshold_parallel(model, atlas, np.array([2.0]))
    es = sorted(h.energy for h in hits)
    assert es[0] == pytest.approx(0.5 + np.sqrt(2.0), abs=1e-14)
    assert es[1] == pytest.approx(0.5 + np.sqrt(10.0), abs=1e-14)


def test_parallel_family_at_zero_momentum():
    model = rel_model()
    atlas = with_crossing(half_quadratic_atlas(), 1.0, 0.5)
    hits = threshold_parallel(model, atlas, np.array([0.0]))
    assert len(hits) == 1
    assert hits[0].energy == pytest.approx(0.5 + np.sqrt(2.0), abs=1e-14)


def test_parallel_family_no_crossings(traced, nelson1d):
    atlas, _, _ = traced
    assert threshold_parallel(nelson1d, atlas, np.array([0.5])) == []


def test_hash_family_sphere_condition():
    model = rel_model()
    atlas = with_crossing(half_quadratic_atlas(), 1.0, 0.5)
    on = threshold_hash(model, atlas, np.array([1.0]))
    assert len(on) == 1
    assert on[0].energy == pytest.approx(1.5, abs=1e-12)
    off = threshold_hash(model, atlas, np.array([0.7]))
    assert off == []


def test_hash_family_constant_omega():
    model = rel_model(constant=True, c0=0.8)
    atlas = with_crossing(half_quadratic_atlas(), 1.0, 0.5)
    hits = threshold_hash(model, atlas, np.array([0.4]))
    assert len(hits) == 1
    assert hits[0].energy == pytest.approx(1.3, abs=1e-14)


def test_hash_subset_of_parallel_at_origin():
    for constant in (False, True):
        model = rel_model(constant=constant, c0=0.8)
        atlas = with_crossing(half_quadratic_atlas(), 1.0, 0.5)
        xi = np.array([0.0])
        hash_es = {round(h.energy, 10) for h in threshold_hash(model, atlas, xi)}
        par_es = {round(h.energy, 10) for h in threshold_parallel(model, atlas, xi)}
        assert hash_es <= par_es


# ---------------------------------------------------------------------------
# exceptional set


def test_exc_empty_for_regular_coupling(traced, nelson1d):
    atlas, _, _ = traced
    assert nk.exc_set(nelson1d, atlas, np.array([0.4])) == []


def test_exc_single_shift_for_polaron():
    model = nk.polaron_preset(nu=1, lam=0.2, c0=0.8)
    atlas = quadratic_atlas()
    out = nk.exc_set(model, atlas, np.array([0.5]))
    assert len(out) == 1
    assert out[0] == pytest.approx(0.8 + 0.25, abs=1e-12)


def test_exc_two_branches_two_shifts():
    model = nk.polaron_preset(nu=1, lam=0.2, c0=0.8)
    atlas = nk.analytic_shell_source([
        {"fn": lambda r: r * r, "domain": (0.0, 2.0)},
        {"fn": lambda r: 1.5 + r * r / 3.0, "domain": (0.0, 2.0)},
    ])
    out = nk.exc_set(model, atlas, np.array([0.6]))
    assert len(out) == 2
    assert out[0] == pytest.approx(0.8 + 0.36, abs=1e-12)
    assert out[1] == pytest.approx(0.8 + 1.5 + 0.12, abs=1e-12)


# ---------------------------------------------------------------------------
# full reports


def test_free_report_at_origin():
    model = rel_model()
    atlas = quadratic_atlas()
    rep = nk.full_report(model, atlas, np.array([0.0]))
    assert rep.sigma1 == pytest.approx(1.0, abs=1e-9)
    assert rep.sigma2 == pytest.approx(2.0, abs=1e-8)
    assert len(rep.t_shell) == 1
    assert rep.t_shell[0].energy == pytest.approx(1.0, abs=1e-9)
    assert rep.t_parallel == [] and rep.t_hash == [] and rep.exc == []


def test_synthetic_report_all_families_inside_window(synthetic2d):
    _, _, _, rep, _ = synthetic2d
    assert rep.t_shell and rep.t_parallel
    for h in rep.t_shell + rep.t_parallel + rep.t_hash:
        assert rep.sigma1 - 1e-8 <= h.energy < rep.sigma2


def test_discreteness_check(synthetic2d):
    _, _, _, rep, _ = synthetic2d
    out = discreteness_check([rep], eps=0.05)
    assert out["pass"]
    assert all(c < 64 for c in out["counts"])


def test_threshold_lists_vary_continuously(synthetic2d):
    model, atlas, _, _, _ = synthetic2d
    prev = None
    for s in np.linspace(1.1, 1.3, 5):
        hits = threshold_parallel(model, atlas, np.array([s, 0.0]))
        es = np.sort([h.energy for h in hits])
        if prev is not None and len(prev) == len(es):
            assert np.max(np.abs(es - prev)) < 0.2
        prev = es
