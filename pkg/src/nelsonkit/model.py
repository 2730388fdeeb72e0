"""Dispersion relations, couplings, and model presets.

A model bundles the boson dispersion omega, the particle dispersion Omega,
and the coupling function g, together with the spatial dimension nu (1 or 2)
and the growth exponent of Omega.  Everything here is a pure function of an
immutable :class:`ModelSpec`, safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, PreconditionError

__all__ = [
    "OneBodyDispersion",
    "ParticleDispersion",
    "CouplingSpec",
    "ModelSpec",
    "EvalRecord",
    "ConditionReport",
    "evaluate",
    "check_minimal_conditions",
    "nelson_preset",
    "polaron_preset",
]


def _norm(k):
    k = np.atleast_1d(np.asarray(k, dtype=float))
    return float(np.sqrt(np.dot(k, k)))


@dataclass(frozen=True)
class OneBodyDispersion:
    """Boson dispersion omega(k), rotation invariant.

    kinds:
      - "relativistic": omega(k) = sqrt(|k|^2 + m^2), m > 0
      - "constant":     omega(k) = c0 > 0 (optical-phonon style)
      - "custom":       radial profile supplied as callables of r = |k|
    """

    kind: str
    m: float = 1.0
    c0: float = 1.0
    profile: Optional[Callable[[float], float]] = None
    profile_d1: Optional[Callable[[float], float]] = None
    profile_d2: Optional[Callable[[float], float]] = None
    singular_radii: tuple = ()

    def radial(self, r: float) -> float:
        if self.kind == "relativistic":
            return float(np.sqrt(r * r + self.m * self.m))
        if self.kind == "constant":
            return self.c0
        self._guard(r)
        return float(self.profile(r))

    def radial_d1(self, r: float) -> float:
        if self.kind == "relativistic":
            return r / np.sqrt(r * r + self.m * self.m)
        if self.kind == "constant":
            return 0.0
        self._guard(r)
        if self.profile_d1 is not None:
            return float(self.profile_d1(r))
        h = 1e-6 * (1.0 + abs(r))
        return (self.profile(r + h) - self.profile(max(r - h, 0.0))) / (
            (r + h) - max(r - h, 0.0)
        )

    def radial_d2(self, r: float) -> float:
        if self.kind == "relativistic":
            m2 = self.m * self.m
            return m2 / (r * r + m2) ** 1.5
        if self.kind == "constant":
            return 0.0
        self._guard(r)
        if self.profile_d2 is not None:
            return float(self.profile_d2(r))
        h = 1e-5 * (1.0 + abs(r))
        return (self.radial_d1(r + h) - self.radial_d1(max(r - h, 0.0))) / (
            (r + h) - max(r - h, 0.0)
        )

    def _guard(self, r):
        for s in self.singular_radii:
            if abs(r - s) < 1e-12:
                raise DomainError(f"omega evaluated at declared singularity r={s}")

    def radial_many(self, rs) -> np.ndarray:
        rs = np.asarray(rs, dtype=float)
        if self.kind == "relativistic":
            return np.sqrt(rs * rs + self.m * self.m)
        if self.kind == "constant":
            return np.full_like(rs, self.c0)
        return np.array([self.radial(float(r)) for r in rs])

    def __call__(self, k) -> float:
        return self.radial(_norm(k))

    def grad(self, k) -> np.ndarray:
        k = np.atleast_1d(np.asarray(k, dtype=float))
        r = _norm(k)
        if r == 0.0:
            return np.zeros_like(k)
        return self.radial_d1(r) * k / r

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    @property
    def unbounded(self) -> bool:
        """True when omega -> infinity at large |k| (first branch of the
        escape condition)."""
        if self.kind == "relativistic":
            return True
        if self.kind == "constant":
            return False
        # probe the custom profile
        return self.radial(1e3) > 10.0 * self.radial(1.0)


@dataclass(frozen=True)
class ParticleDispersion:
    """Particle dispersion Omega(eta) >= 0, rotation invariant.

    kinds:
      - "nonrelativistic": Omega(eta) = |eta|^2
      - "relativistic":    Omega(eta) = sqrt(|eta|^2 + M^2) - M
                           (additively normalized so Omega(0) = 0 >= 0)
      - "polynomial":      Omega(eta) = sum_j coeffs[j] |eta|^(2j), coeffs[0]=0
    """

    kind: str
    M: float = 1.0
    coeffs: tuple = ()

    def radial(self, r: float) -> float:
        if self.kind == "nonrelativistic":
            return r * r
        if self.kind == "relativistic":
            return float(np.sqrt(r * r + self.M * self.M) - self.M)
        acc = 0.0
        for j, c in enumerate(self.coeffs):
            acc += c * r ** (2 * j)
        return acc

    def radial_d1(self, r: float) -> float:
        if self.kind == "nonrelativistic":
            return 2.0 * r
        if self.kind == "relativistic":
            return r / np.sqrt(r * r + self.M * self.M)
        acc = 0.0
        for j, c in enumerate(self.coeffs):
            if j > 0:
                acc += 2 * j * c * r ** (2 * j - 1)
        return acc

    def radial_many(self, rs) -> np.ndarray:
        rs = np.asarray(rs, dtype=float)
        if self.kind == "nonrelativistic":
            return rs * rs
        if self.kind == "relativistic":
            return np.sqrt(rs * rs + self.M * self.M) - self.M
        acc = np.zeros_like(rs)
        for j, c in enumerate(self.coeffs):
            acc = acc + c * rs ** (2 * j)
        return acc

    def __call__(self, eta) -> float:
        return self.radial(_norm(eta))

    def grad(self, eta) -> np.ndarray:
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        r = _norm(eta)
        if r == 0.0:
            return np.zeros_like(eta)
        return self.radial_d1(r) * eta / r

    def hess_diag_bound(self, r: float) -> float:
        """Crude bound on |second radial derivative| near radius r."""
        h = 1e-5 * (1.0 + r)
        return abs(self.radial_d1(r + h) - self.radial_d1(max(r - h, 0.0))) / (
            (r + h) - max(r - h, 0.0)
        )

    def default_growth_exponent(self) -> float:
        if self.kind == "nonrelativistic":
            return 2.0
        if self.kind == "relativistic":
            return 1.0
        deg = 2 * (len(self.coeffs) - 1) if self.coeffs else 0
        return float(min(deg, 2))


@dataclass(frozen=True)
class CouplingSpec:
    """Coupling function g(k), rotation invariant, with a hard UV cutoff.

    kinds:
      - "nelson":   g(k) = lam / sqrt(omega(k))
      - "polaron":  g(k) = lam / |k|     (infrared singular)
      - "gaussian": g(k) = lam * exp(-|k|^2 / 2)
      - "zero":     g = 0

    ``ir_singular`` is set when the gradient of g is not locally
    square-integrable at the origin; the polaron kind sets it for every
    implemented dimension.  At an infrared singularity the evaluated value
    is the documented regularization g(0) = 0.
    """

    kind: str
    lam: float = 0.0
    uv_cutoff: float = np.inf
    ir_singular: bool = field(default=False)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("coupling strength must be nonnegative")
        if not self.uv_cutoff > 0:
            raise ValueError("uv_cutoff must be positive")
        if self.kind == "polaron" and not self.ir_singular:
            object.__setattr__(self, "ir_singular", True)

    def value(self, k, omega: OneBodyDispersion) -> float:
        r = _norm(k)
        if r > self.uv_cutoff:
            return 0.0
        if self.kind == "zero":
            return 0.0
        if self.kind == "nelson":
            return self.lam / np.sqrt(omega.radial(r))
        if self.kind == "polaron":
            if r == 0.0:
                return 0.0  # regularized value at the singularity
            return self.lam / r
        if self.kind == "gaussian":
            return self.lam * np.exp(-0.5 * r * r)
        raise ValueError(f"unknown coupling kind {self.kind!r}")

    def grad(self, k, omega: OneBodyDispersion) -> np.ndarray:
        """Analytic gradient away from k = 0 (and away from the cutoff
        sphere, where the hard truncation is ignored)."""
        k = np.atleast_1d(np.asarray(k, dtype=float))
        r = _norm(k)
        if r > self.uv_cutoff or self.kind == "zero":
            return np.zeros_like(k)
        if r == 0.0:
            if self.ir_singular:
                raise DomainError("gradient of an infrared-singular coupling at 0")
            return np.zeros_like(k)
        if self.kind == "nelson":
            w = omega.radial(r)
            dw = omega.radial_d1(r)
            return (-0.5 * self.lam * w ** (-1.5) * dw) * k / r
        if self.kind == "polaron":
            return (-self.lam / r ** 3) * k
        if self.kind == "gaussian":
            return -self.lam * np.exp(-0.5 * r * r) * k
        raise ValueError(f"unknown coupling kind {self.kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Immutable bundle of dispersions and coupling for dimension nu."""

    nu: int
    omega: OneBodyDispersion
    Omega: ParticleDispersion
    coupling: CouplingSpec
    s_Omega: float = -1.0

    def __post_init__(self):
        if self.nu not in (1, 2):
            raise ValueError("nu must be 1 or 2")
        if self.s_Omega < 0:
            object.__setattr__(
                self, "s_Omega", self.Omega.default_growth_exponent()
            )
        if not 0.0 <= self.s_Omega <= 2.0:
            raise ValueError("s_Omega must lie in [0, 2]")
        expected = self.Omega.default_growth_exponent()
        if abs(self.s_Omega - expected) > 1e-12:
            raise ValueError(
                f"s_Omega={self.s_Omega} inconsistent with Omega kind "
                f"{self.Omega.kind!r} (expected {expected})"
            )

    def g(self, k) -> float:
        return self.coupling.value(k, self.omega)

    def grad_g(self, k) -> np.ndarray:
        return self.coupling.grad(k, self.omega)


@dataclass(frozen=True)
class EvalRecord:
    omega: float
    grad_omega: np.ndarray
    Omega: float
    grad_Omega: np.ndarray
    g: float


def evaluate(model: ModelSpec, k, eta) -> EvalRecord:
    """Point evaluation of all model functions and their gradients."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    if k.shape != (model.nu,) or eta.shape != (model.nu,):
        raise ValueError("k and eta must be nu-vectors")
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(eta))):
        raise ValueError("k and eta must be finite")
    return EvalRecord(
        omega=model.omega(k),
        grad_omega=model.omega.grad(k),
        Omega=model.Omega(eta),
        grad_Omega=model.Omega.grad(eta),
        g=model.g(k),
    )


# ---------------------------------------------------------------------------
# standing-hypothesis checks


@dataclass
class ConditionReport:
    """Sampled verification of the model's standing hypotheses.

    Condition names:
      positivity            inf omega > 0 on the sampled box
      subadditivity         omega(k1+k2) < omega(k1) + omega(k2), strictly
      growth-omega          omega(k) <= C <k>  (fitted constant reported)
      growth-Omega          Omega lower/derivative bounds with exponent s_Omega
      escape                omega -> inf, or omega bounded and Omega -> inf
      rotation-invariance   omega/Omega invariant under sampled rotations (nu=2)
      bounded-derivatives   sampled |d omega| and |d^2 Omega| bounded
    """

    passed: dict
    details: dict
    subadditivity_margin: float

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def failed_conditions(self):
        return [name for name, good in self.passed.items() if not good]


def check_minimal_conditions(
    model: ModelSpec, sample_budget: int = 400, box: float = 8.0, seed: int = 0
) -> ConditionReport:
    """Sample-based check of the standing hypotheses on [-box, box]^nu.

    ``sample_budget`` controls the number of sampled pairs/points and must be
    at least 100.  The report records the worst strict-subadditivity margin
    observed; downstream stages should refuse models whose report fails
    unless explicitly overridden.
    """
    if sample_budget < 100:
        raise ValueError("sample_budget must be >= 100")
    rng = np.random.default_rng(seed)
    nu = model.nu
    passed, details = {}, {}

    pts = rng.uniform(-box, box, size=(sample_budget, nu))
    # include the origin and axis points
    pts = np.vstack([pts, np.zeros((1, nu))])
    omega_vals = np.array([model.omega(p) for p in pts])
    inf_omega = float(omega_vals.min())
    passed["positivity"] = inf_omega > 0.0
    details["inf_omega"] = inf_omega

    # strict subadditivity on uniform pairs plus adversarial near-collinear
    # pairs (where equality would first fail for concave radial profiles)
    pairs = rng.uniform(-box / 2, box / 2, size=(sample_budget, 2, nu))
    coll = rng.uniform(0.05, box / 2, size=(sample_budget // 2, 2))
    u = rng.normal(size=(sample_budget // 2, nu))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    jitter = 1e-3 * rng.normal(size=(sample_budget // 2, nu))
    coll_pairs = np.stack(
        [coll[:, :1] * u, coll[:, 1:] * (u + jitter)], axis=1
    )
    margin = np.inf
    for k1, k2 in np.vstack([pairs, coll_pairs]):
        m = model.omega(k1) + model.omega(k2) - model.omega(k1 + k2)
        margin = min(margin, m)
    passed["subadditivity"] = margin > 0.0
    details["subadditivity_margin"] = float(margin)

    # growth fits
    kb = np.array([model.omega(p) for p in pts])
    bracket = np.sqrt(1.0 + np.sum(pts**2, axis=1))
    c_omega = float(np.max(kb / bracket))
    passed["growth-omega"] = np.isfinite(c_omega)
    details["C_omega"] = c_omega

    Om = np.array([model.Omega(p) for p in pts])
    s = model.s_Omega
    # smallest C with Omega >= C^-1 <k>^s - C on the samples
    lo = np.maximum(bracket**s - Om, 0.0)
    c_lower = float(np.max(np.sqrt(lo))) if lo.size else 1.0
    grads = np.array([np.linalg.norm(model.Omega.grad(p)) for p in pts])
    c_d1 = float(np.max(grads / np.maximum(bracket ** (s - 1), 1e-300)))
    passed["growth-Omega"] = np.isfinite(c_lower) and np.isfinite(c_d1)
    details["C_Omega_lower"] = max(c_lower, 1.0)
    details["C_Omega_grad"] = c_d1

    # escape condition: which branch holds
    far = 50.0 * box
    omega_far = model.omega.radial(far)
    omega_escapes = omega_far > 4.0 * model.omega.radial(1.0)
    Omega_escapes = model.Omega.radial(far) > 4.0 * model.Omega.radial(1.0) + 1.0
    branch = "omega-unbounded" if omega_escapes else "omega-bounded"
    passed["escape"] = bool(omega_escapes or Omega_escapes)
    details["escape_branch"] = branch

    if nu == 2:
        worst = 0.0
        for p in pts[:: max(1, len(pts) // 64)]:
            phi = rng.uniform(0, 2 * np.pi)
            R = np.array(
                [[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]]
            )
            worst = max(
                worst,
                abs(model.omega(R @ p) - model.omega(p)),
                abs(model.Omega(R @ p) - model.Omega(p)),
            )
        passed["rotation-invariance"] = worst < 1e-10
        details["rotation_defect"] = worst
    else:
        passed["rotation-invariance"] = True
        details["rotation_defect"] = 0.0

    dom = np.array([np.linalg.norm(model.omega.grad(p)) for p in pts])
    d2Om = np.array(
        [model.Omega.hess_diag_bound(np.linalg.norm(p)) for p in pts]
    )
    passed["bounded-derivatives"] = bool(
        np.max(dom) < 1e6 and np.max(d2Om) < 1e6
    )
    details["sup_grad_omega"] = float(np.max(dom))
    details["sup_hess_Omega"] = float(np.max(d2Om))

    return ConditionReport(
        passed=passed, details=details, subadditivity_margin=float(margin)
    )


def require_valid(report: ConditionReport, override: bool = False):
    """Raise unless the report passed (or the caller overrides)."""
    if not report.ok and not override:
        raise PreconditionError(
            "model failed standing-hypothesis checks: "
            + ", ".join(report.failed_conditions())
        )


# ---------------------------------------------------------------------------
# presets


def nelson_preset(nu: int = 1, lam: float = 0.5, m: float = 1.0,
                  uv_cutoff: float = 4.0) -> ModelSpec:
    """Massive relativistic bosons, quadratic particle, g = lam/sqrt(omega)."""
    return ModelSpec(
        nu=nu,
        omega=OneBodyDispersion(kind="relativistic", m=m),
        Omega=ParticleDispersion(kind="nonrelativistic"),
        coupling=CouplingSpec(kind="nelson", lam=lam, uv_cutoff=uv_cutoff),
    )


def polaron_preset(nu: int = 1, lam: float = 0.5, c0: float = 1.0,
                   uv_cutoff: float = 4.0) -> ModelSpec:
    """Constant (optical) boson dispersion, quadratic particle, g = lam/|k|."""
    return ModelSpec(
        nu=nu,
        omega=OneBodyDispersion(kind="constant", c0=c0),
        Omega=ParticleDispersion(kind="nonrelativistic"),
        coupling=CouplingSpec(kind="polaron", lam=lam, uv_cutoff=uv_cutoff),
    )
