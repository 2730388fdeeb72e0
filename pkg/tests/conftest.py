import numpy as np
import pytest

import nelsonkit as nk
from nelsonkit.model import (
    CouplingSpec,
    ModelSpec,
    OneBodyDispersion,
    ParticleDispersion,
)
from nelsonkit.spectra import FreeGroundOracle


@pytest.fixture(scope="session")
def nelson1d():
    return nk.nelson_preset(nu=1, lam=0.4, uv_cutoff=2.0)


@pytest.fixture(scope="session")
def nelson1d_free():
    return nk.nelson_preset(nu=1, lam=0.0, uv_cutoff=2.0)


@pytest.fixture(scope="session")
def grid33():
    return nk.MomentumGrid(nu=1, half_width=2.0, points_per_axis=33)


@pytest.fixture(scope="session")
def basis33(grid33):
    return nk.enumerate_basis(grid33, 2)


@pytest.fixture(scope="session")
def traced(nelson1d, grid33, basis33):
    """Coupled Nelson atlas with its free-ground oracle and xi=0 report."""
    atlas = nk.trace_shells(nelson1d, grid33, basis33,
                            np.linspace(0.0, 1.6, 17), n_branches=1)
    oracle = FreeGroundOracle(nelson1d, grid33, basis33)
    rep = nk.full_report(nelson1d, atlas, np.array([0.0]), oracle=oracle)
    return atlas, oracle, rep


@pytest.fixture(scope="session")
def synthetic2d():
    """nu=2 scenario with a designed crossing between two excited branches.

    Ground S0 = r^2/4, excited Sa = 0.62 + r^2/6 and Sb a rising parabola
    crossing Sa at radius 1.3, all above the ground; relativistic bosons.
    """
    model = ModelSpec(
        nu=2,
        omega=OneBodyDispersion(kind="relativistic", m=1.0),
        Omega=ParticleDispersion(kind="nonrelativistic"),
        coupling=CouplingSpec(kind="zero", lam=0.0, uv_cutoff=4.0),
    )
    Rc = 1.3
    Ec = 0.62 + Rc * Rc / 6.0
    defs = [
        {"fn": lambda r: r * r / 4.0, "dfn": lambda r: r / 2.0,
         "d2fn": lambda r: 0.5, "domain": (0.0, 2.6)},
        {"fn": lambda r: 0.62 + r * r / 6.0, "dfn": lambda r: r / 3.0,
         "d2fn": lambda r: 1.0 / 3.0, "domain": (0.0, 2.0)},
        {"fn": lambda r: Ec - 0.15 * (r - Rc) + 0.5 * (r - Rc) ** 2,
         "dfn": lambda r: -0.15 + (r - Rc), "d2fn": lambda r: 1.0,
         "domain": (0.0, 2.0)},
    ]
    atlas = nk.analytic_shell_source(defs)
    xi = np.array([1.2, 0.0])
    rep = nk.full_report(model, atlas, xi)
    return model, atlas, xi, rep, (Rc, Ec)
