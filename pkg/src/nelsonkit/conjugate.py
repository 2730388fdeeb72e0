"""Relative-velocity vector field and the conjugate operators built from it.

Away from thresholds, a state at energy E and total momentum xi can only
break up into a bound system plus one boson with nonzero relative velocity.
The vector field assembled here encodes that velocity: angular-derivative
pieces on tori surrounding crossing-landing momenta, glued by a partition
of unity to normalized shell-gradient pieces elsewhere.  Its symmetrized
first-quantized derivative and the second quantization of that operator are
the conjugate operators used by the commutator positivity checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from .bumps import plateau_bump, radial_floor, window_bump
from .errors import PreconditionError, ResolutionError, SupportError
from .fock import FockBasis, MomentumGrid, OperatorMatrix
from .model import ModelSpec
from .spectra import MassShellAtlas, ShellBranch
from .thresholds import (
    EmissionSets,
    ThresholdOptions,
    ThresholdReport,
    full_report,
)

__all__ = [
    "ConjugateOptions",
    "PolarFrame",
    "TorusSpec",
    "CalibrationRecord",
    "CalibrationResult",
    "VectorFieldBundle",
    "crossing_momenta",
    "calibrate",
    "build_vector_field",
    "build_conjugate",
    "flow_map",
]


@dataclass(frozen=True)
class ConjugateOptions:
    angular_samples: int = 64
    radial_samples: int = 9
    emission_radial: int = 240
    emission_angular: int = 160
    scan_points: int = 1024
    max_halvings: int = 60
    width_floor: float = 1e-9
    grad_floor: float = 1e-8
    newton_tol: float = 1e-10
    dedup_tol: float = 1e-8
    flow_max_dt: float = 0.05
    fd_step: float = 1e-6


DEFAULT_CONJ = ConjugateOptions()


class PolarFrame:
    """Polar coordinates centered at xi != 0 (nu = 2).

    k(s, theta, w) = xi - s cos(theta) u + s sin(theta) w n, with u = xi/|xi|
    and n the rotated unit normal; w in {-1, +1}.  The angular tangent
    v(s, theta, w) = dk/dtheta has |v| = s and |k(s,theta,w) - xi| = s.
    """

    def __init__(self, xi):
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        if xi.shape != (2,):
            raise ValueError("PolarFrame requires nu = 2")
        s = float(np.linalg.norm(xi))
        if s == 0.0:
            raise ValueError("PolarFrame requires xi != 0")
        self.xi = xi
        self.u = xi / s
        self.n = np.array([-self.u[1], self.u[0]])

    def k_of(self, s, theta, w):
        return self.xi - s * np.cos(theta) * self.u + s * np.sin(theta) * w * self.n

    def v_of(self, s, theta, w):
        return s * (np.sin(theta) * self.u + np.cos(theta) * w * self.n)

    def polar_of(self, k):
        d = np.asarray(k, dtype=float) - self.xi
        s = float(np.linalg.norm(d))
        if s == 0.0:
            return 0.0, 0.0, 1.0
        c = float(np.clip(-np.dot(d, self.u) / s, -1.0, 1.0))
        theta = float(np.arccos(c))
        perp = float(np.dot(d, self.n))
        w = 1.0 if perp >= 0 else -1.0
        return s, theta, w


@dataclass
class TorusSpec:
    """Calibrated torus around one crossing-landing circle."""

    index: Tuple[int, int]
    radius: float           # R_i, distance from xi
    theta: float            # center angle in (0, pi)
    sigma: float            # sign of k . grad omega on the torus
    eps_theta: float
    eps_r: float
    crossing_energy: float
    c_ij: float = np.nan    # inf of sigma * v . grad omega on the window

    @property
    def window(self) -> Tuple[float, float]:
        return (self.theta - self.eps_theta, self.theta + self.eps_theta)

    def rho_theta(self, theta):
        """Angular cutoff: 1 on the window, supported in the doubled window."""
        return window_bump(theta, self.theta, self.eps_theta, 2 * self.eps_theta)

    def rho_r(self, r):
        """Radial cutoff: 1 on [R - eps_r, R + eps_r], supported within 2 eps_r."""
        return plateau_bump(r, self.radius - self.eps_r, self.radius + self.eps_r,
                            self.eps_r)


@dataclass
class CalibrationRecord:
    delta_prime: float
    eps_theta: float = np.nan
    eps_r: float = np.nan
    eps_r_cascade: tuple = ()      # (eps_r1, eps_r2, eps_r3, eps_r4)
    eps_theta_cascade: tuple = ()  # (eps_theta1, eps_theta2)
    lipschitz_L: float = np.nan
    c_lower: float = np.nan        # c'' from the angular-window infimum
    c_prime: float = np.nan
    c_ij: dict = field(default_factory=dict)
    sigma_ij: dict = field(default_factory=dict)
    crossing_gap: float = np.inf
    lip_map_bound: float = np.nan
    sup_bound: float = np.nan
    exc_active: bool = False

    def as_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float):
                return v if np.isfinite(v) else None
            return v
        return {
            "delta_prime": self.delta_prime,
            "eps_theta": clean(self.eps_theta),
            "eps_r": clean(self.eps_r),
            "eps_r_cascade": [clean(float(x)) for x in self.eps_r_cascade],
            "eps_theta_cascade": [clean(float(x)) for x in self.eps_theta_cascade],
            "lipschitz_L": clean(self.lipschitz_L),
            "c_lower": clean(self.c_lower),
            "c_prime": clean(self.c_prime),
            "c_ij": {str(k): v for k, v in self.c_ij.items()},
            "sigma_ij": {str(k): v for k, v in self.sigma_ij.items()},
            "crossing_gap": clean(float(self.crossing_gap)),
            "lip_map_bound": clean(self.lip_map_bound),
            "sup_bound": clean(self.sup_bound),
            "exc_active": self.exc_active,
        }


@dataclass
class CalibrationResult:
    delta_prime: float
    tori: List[TorusSpec]
    emission: EmissionSets
    record: CalibrationRecord
    frame: Optional[PolarFrame]
    shells_in_play: List[ShellBranch]
    threshold_distance: float = np.inf  # from E to the nearest listed threshold


# ---------------------------------------------------------------------------
# crossing landings


def _omega_on_circle(model: ModelSpec, s: float, R: float, theta):
    """omega at k(R, theta, w); independent of w by rotation invariance."""
    dist = np.sqrt(s * s + R * R - 2.0 * s * R * np.cos(theta))
    if np.ndim(theta) == 0:
        return model.omega.radial(float(dist))
    return np.array([model.omega.radial(float(d)) for d in dist])


def crossing_momenta(model: ModelSpec, shells: MassShellAtlas, xi, E: float,
                     opts: ConjugateOptions = DEFAULT_CONJ) -> List[dict]:
    """Angles on each crossing circle where a boson emission at energy E
    lands exactly on the crossing.

    Empty when nu = 1, xi = 0, or omega is constant.  A root at theta in
    {0, pi} means (xi, E) sits in the parallel threshold family and violates
    the precondition.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    s = float(np.linalg.norm(xi))
    if model.nu < 2 or s == 0.0 or model.omega.is_constant:
        return []
    out = []
    for ci, c in enumerate(shells.crossings):
        if c.tangent:
            continue
        target = E - c.energy
        f = lambda th: _omega_on_circle(model, s, c.radius, th) - target
        ths = np.linspace(0.0, np.pi, opts.scan_points)
        vals = f(ths)
        roots = []
        for i in range(len(ths) - 1):
            if vals[i] == 0.0:
                roots.append(float(ths[i]))
            elif vals[i] * vals[i + 1] < 0:
                roots.append(float(brentq(lambda t: float(f(t)), ths[i],
                                          ths[i + 1], xtol=1e-15)))
        if vals[-1] == 0.0:
            roots.append(float(np.pi))
        dedup = []
        for r in sorted(roots):
            if not dedup or abs(r - dedup[-1]) > 1e-10:
                dedup.append(r)
        for th in dedup:
            if th < 1e-9 or th > np.pi - 1e-9:
                raise PreconditionError(
                    "crossing landing collinear with xi: (xi, E) lies in the "
                    "parallel threshold family"
                )
            frame = PolarFrame(xi)
            out.append({
                "crossing": ci,
                "radius": c.radius,
                "theta": th,
                "energy": c.energy,
                "witnesses": [frame.k_of(c.radius, th, w) for w in (1.0, -1.0)],
            })
    return out


# ---------------------------------------------------------------------------
# calibration cascade


def _torus_grad_inf(model, frame, R, theta0, eps_th, eps_r, opts):
    ths = theta0 + np.linspace(-eps_th, eps_th, opts.angular_samples)
    rs = R + np.linspace(-eps_r, eps_r, opts.radial_samples)
    worst = np.inf
    for r in rs:
        for th in ths:
            for w in (1.0, -1.0):
                k = frame.k_of(r, th, w)
                worst = min(worst, float(np.linalg.norm(model.omega.grad(k))))
    return worst


def _branch_window_radii(branch: ShellBranch, model: ModelSpec, E, dp):
    """Radii where the branch can place the bound system for window
    energies: S(r) <= E + dp - inf omega."""
    lo, hi = branch.domain
    return lo, hi


def _sample_emission(model, shells, xi, E, dp, shell_ids, opts):
    """Point cloud of the emission set for the window [E - dp, E + dp]."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    nu = xi.size
    samples, per_shell = [], {}
    for b in shells.branches:
        if b.branch_id not in shell_ids:
            continue
        lo, hi = b.domain
        rs = np.linspace(lo, hi, opts.emission_radial)
        Svals = b.value_many(rs)
        if nu == 1:
            s = float(xi[0])
            ks = np.concatenate([s - rs, s + rs])[:, None]
            Sv = np.concatenate([Svals, Svals])
        else:
            s = float(np.linalg.norm(xi))
            if s == 0.0:
                u = np.array([1.0, 0.0])
                n = np.array([0.0, 1.0])
            else:
                u = xi / s
                n = np.array([-u[1], u[0]])
            ths = np.linspace(0.0, np.pi, opts.emission_angular)
            R, TH, W = np.meshgrid(rs, ths, np.array([1.0, -1.0]),
                                   indexing="ij")
            R, TH, W = R.ravel(), TH.ravel(), W.ravel()
            ks = (xi[None, :]
                  - (R * np.cos(TH))[:, None] * u[None, :]
                  + (R * np.sin(TH) * W)[:, None] * n[None, :])
            Sv = np.repeat(Svals, 2 * len(ths))
        om = model.omega.radial_many(np.linalg.norm(ks, axis=1))
        mask = np.abs(Sv + om - E) <= dp
        pts = ks[mask]
        if len(pts):
            per_shell[b.branch_id] = pts
            samples.append(pts)
    return (np.vstack(samples) if samples else np.zeros((0, nu))), per_shell


def calibrate(model: ModelSpec, shells: MassShellAtlas, xi, E: float,
              report: Optional[ThresholdReport] = None,
              oracle=None,
              opts: ConjugateOptions = DEFAULT_CONJ,
              topts: ThresholdOptions = ThresholdOptions()) -> CalibrationResult:
    """Run the width-selection cascade at (xi, E).

    Chooses the window half-width delta', the torus widths (angular first,
    then radial through hole, gradient, crossing-isolation, cover,
    radial-face, and Lipschitz steps), and assembles the emission sets.
    Raises :class:`PreconditionError` when E sits on a threshold and
    :class:`ResolutionError` (naming the step) when a width collapses.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    s = float(np.linalg.norm(xi))
    if report is None:
        report = full_report(model, shells, xi, oracle=oracle, opts=topts)
    if not (report.sigma1 <= E < report.sigma2):
        raise PreconditionError(
            f"energy {E} outside the one-boson window {report.window}"
        )
    dist = report.nearest_threshold_distance(E)
    if dist <= topts.dedup_tol:
        raise PreconditionError(
            "energy within dedup_tol of a detected threshold energy"
        )
    room = min(report.sigma2 - E, E - report.sigma1)
    if room <= 0:
        room = report.sigma2 - E
    dp = 0.5 * min(dist, room) if room > 0 else 0.5 * dist

    seeds = crossing_momenta(model, shells, xi, E, opts)
    record = CalibrationRecord(delta_prime=dp,
                               exc_active=model.coupling.ir_singular)
    frame = PolarFrame(xi) if (model.nu == 2 and s > 0 and seeds) else None

    tori: List[TorusSpec] = []
    eps_theta = eps_r2 = eps_r3 = eps_r4 = np.nan
    eps_th1 = eps_th2 = np.nan
    if seeds:
        radii = sorted({round(sd["radius"], 12) for sd in seeds})
        rad_index = {R: i for i, R in enumerate(radii)}
        # hole constraints
        eps_r4 = 0.5 * min(1.0, min(radii))
        eps_th2 = min(1.0, 0.25 * min(
            min(sd["theta"], np.pi - sd["theta"]) for sd in seeds
        ))
        if eps_r4 < opts.width_floor or eps_th2 < opts.width_floor:
            raise ResolutionError("torus-hole width collapsed below floor",
                                  step="torus-hole")
        # shrink until |grad omega| is bounded below on every torus
        eps_th1, eps_r3 = eps_th2, eps_r4
        center_inf = min(
            float(np.linalg.norm(model.omega.grad(
                frame.k_of(sd["radius"], sd["theta"], 1.0))))
            for sd in seeds
        )
        if center_inf <= opts.grad_floor:
            raise ResolutionError(
                "grad omega vanishes on a landing circle (hash-family point)",
                step="torus-gradient",
            )
        for _ in range(opts.max_halvings):
            worst = min(
                _torus_grad_inf(model, frame, sd["radius"], sd["theta"],
                                eps_th1, eps_r3, opts)
                for sd in seeds
            )
            if worst >= 0.5 * center_inf:
                break
            eps_th1 *= 0.5
            eps_r3 *= 0.5
            if eps_th1 < opts.width_floor or eps_r3 < opts.width_floor:
                raise ResolutionError(
                    "torus widths collapsed while seeking a gradient floor",
                    step="torus-gradient",
                )
        # signs and crossing isolation
        crossing_pts = [(c.radius, c.energy) for c in shells.crossings
                        if not c.tangent]
        d_gap = np.inf
        for a in range(len(crossing_pts)):
            for b in range(a + 1, len(crossing_pts)):
                dr = crossing_pts[a][0] - crossing_pts[b][0]
                de = crossing_pts[a][1] - crossing_pts[b][1]
                d_gap = min(d_gap, sqrt(dr * dr + de * de))
        record.crossing_gap = d_gap
        C_lip = 0.0
        for sd in seeds:
            rmax = sd["radius"] + eps_r3
            gmax = 0.0
            ths = sd["theta"] + np.linspace(-eps_th1, eps_th1,
                                            opts.angular_samples)
            for th in ths:
                k = frame.k_of(sd["radius"], th, 1.0)
                gmax = max(gmax, float(np.linalg.norm(model.omega.grad(k))))
            C_lip = max(C_lip, (1.0 + rmax) * (1.0 + gmax) * 2.0)
        record.lip_map_bound = C_lip
        shrink = d_gap / (2.0 * C_lip) if np.isfinite(d_gap) else np.inf
        eps_theta = min(eps_th1, shrink)
        eps_r2 = min(eps_r3, shrink)
        if eps_theta < opts.width_floor or eps_r2 < opts.width_floor:
            raise ResolutionError("crossing-isolation shrink collapsed",
                                  step="crossing-isolation")
        for sd in seeds:
            k0 = frame.k_of(sd["radius"], sd["theta"], 1.0)
            sgn = np.sign(float(np.dot(k0, model.omega.grad(k0))))
            tori.append(TorusSpec(
                index=(rad_index[round(sd["radius"], 12)], len(tori)),
                radius=sd["radius"], theta=sd["theta"], sigma=float(sgn),
                eps_theta=eps_theta, eps_r=eps_r2,
                crossing_energy=sd["energy"],
            ))
            record.sigma_ij[tori[-1].index] = float(sgn)

    # window half-width: shrink until landings are covered by the torus
    # windows and each torus speaks to a single crossing
    crossings = [c for c in shells.crossings if not c.tangent]
    for _ in range(opts.max_halvings):
        ok = True
        for c in crossings:
            ths = np.linspace(0.0, np.pi, opts.scan_points)
            om = _omega_on_circle(model, s, c.radius, ths) if (
                model.nu == 2 and s > 0) else None
            if om is None:
                # nu = 1 / xi = 0 / constant omega: landing exists iff the
                # collinear energies fall in the window; must be avoided
                if model.nu == 1 or s == 0.0 or model.omega.is_constant:
                    if s == 0.0 or model.omega.is_constant:
                        reach = [model.omega.radial(c.radius)] if s == 0.0 else []
                        if model.omega.is_constant:
                            reach = [model.omega.c0]
                    else:
                        reach = [model.omega.radial(abs(s - c.radius)),
                                 model.omega.radial(s + c.radius)]
                    for wv in reach:
                        if abs((c.energy + wv) - E) <= dp:
                            ok = False
                continue
            hit = np.abs((om + c.energy) - E) <= dp
            if not np.any(hit):
                continue
            windows = [t.window for t in tori
                       if abs(t.radius - c.radius) < 1e-12]
            if not windows:
                ok = False
                continue
            for th, h in zip(ths, hit):
                if h and not any(lo < th < hi for lo, hi in windows):
                    ok = False
                    break
        # same-crossing check on each closed torus
        if ok:
            for t in tori:
                ths = t.theta + np.linspace(-t.eps_theta, t.eps_theta, 33)
                rs = t.radius + np.linspace(-t.eps_r, t.eps_r, 9)
                for c in crossings:
                    if abs(c.energy - t.crossing_energy) < 1e-14 and \
                       abs(c.radius - t.radius) < 1e-14:
                        continue
                    if abs(c.radius - t.radius) > t.eps_r + 1e-15:
                        continue
                    for r in rs:
                        om = _omega_on_circle(model, s, r, ths)
                        if np.any(np.abs((om + c.energy) - E) <= dp):
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
        if ok:
            break
        dp *= 0.5
        if dp < opts.width_floor:
            raise ResolutionError(
                "window half-width collapsed while covering crossing landings",
                step="window-cover",
            )
    record.delta_prime = dp

    # reachable shells
    shell_ids = []
    for b in shells.branches:
        lo, hi = b.domain
        rs = np.linspace(lo, hi, opts.emission_radial)
        Sv = b.value_many(rs)
        w_lo = model.omega.radial(0.0) if not model.omega.is_constant else model.omega.c0
        # a branch is reachable if some radius and boson direction meets J'
        reach = False
        for r, S in zip(rs, Sv):
            if model.nu == 1 or s == 0.0:
                cand = [abs(s - r), s + r]
            else:
                cand = np.sqrt(
                    s * s + r * r - 2 * s * r * np.cos(
                        np.linspace(0, np.pi, 48))
                )
            for rho in np.atleast_1d(cand):
                if abs(S + model.omega.radial(float(rho)) - E) <= dp:
                    reach = True
                    break
            if reach:
                break
        if reach:
            shell_ids.append(b.branch_id)

    samples, per_shell = _sample_emission(model, shells, xi, E, dp,
                                          shell_ids, opts)

    # radial-face margins
    eps_r = eps_r2
    torus_radii = sorted({t.radius for t in tori})
    if samples.size:
        r_samples = np.linalg.norm(xi[None, :] - samples, axis=1)
        if tori:
            th_samples = np.array([frame.polar_of(k)[1] for k in samples])
            in_torus = np.zeros(len(samples), dtype=bool)
            for t in tori:
                in_torus |= (np.abs(r_samples - t.radius) < t.eps_r) & (
                    np.abs(th_samples - t.theta) < t.eps_theta)
            outside = ~in_torus
            r_face = np.inf
            for t in tori:
                ang_away = np.ones(len(samples), dtype=bool)
                for t2 in tori:
                    ang_away &= np.abs(th_samples - t2.theta) >= t2.eps_theta
                mask = outside & ang_away
                if np.any(mask):
                    r_face = min(r_face, float(np.min(
                        np.abs(r_samples[mask] - t.radius))))
            eps_r = min(eps_r, r_face)
        boundary_radii = []
        for b in shells.branches:
            if b.branch_id not in shell_ids:
                continue
            for edge in b.domain:
                if edge > 0 and not any(abs(edge - R) < 1e-12
                                        for R in torus_radii):
                    boundary_radii.append(edge)
        r_edge = np.inf
        for R in boundary_radii:
            r_edge = min(r_edge, float(np.min(np.abs(r_samples - R))))
        if model.coupling.ir_singular:
            r_exc = float(np.min(np.linalg.norm(samples, axis=1)))
            r_edge = min(r_edge, r_exc)
        if not tori:
            eps_r = r_edge if np.isfinite(r_edge) else 1.0
        else:
            eps_r = min(eps_r, r_edge)
        if not np.isfinite(eps_r) or eps_r < opts.width_floor:
            raise ResolutionError(
                "radial-face margin collapsed (emission set touches a "
                "shell boundary sphere)", step="radial-face",
            )
    eps_r1 = eps_r

    # Lipschitz estimate of the localized commutator family and the final
    # radial width
    L = np.nan
    c_lower = np.nan
    if tori:
        chi2 = lambda t: window_bump(t, E, 0.75 * dp, dp)
        branches_near = {
            t.index: [b for b in shells.branches
                      if b.contains(t.radius, slack=eps_r1)]
            for t in tori
        }
        Lmax = 0.0
        for t in tori:
            ths = t.theta + np.linspace(-t.eps_theta, t.eps_theta,
                                        opts.angular_samples)
            rs = t.radius + np.linspace(-eps_r1, eps_r1, 5)
            for b in branches_near[t.index]:
                lo, hi = b.domain
                prev = None
                for r in rs:
                    rb = float(np.clip(r, lo, hi))
                    vals = []
                    for th in ths:
                        for w in (1.0, -1.0):
                            k = frame.k_of(r, th, w)
                            sym = t.sigma * t.rho_theta(th) * float(
                                np.dot(frame.v_of(r, th, w),
                                       model.omega.grad(k)))
                            e_ch = b.value(rb) + model.omega(k)
                            vals.append(sym * chi2(e_ch) ** 2)
                    vals = np.array(vals)
                    if prev is not None:
                        Lmax = max(Lmax, float(np.max(np.abs(vals - prev))) /
                                   (rs[1] - rs[0]))
                    prev = vals
        L = Lmax
        c_vals = {}
        for t in tori:
            ths = t.theta + np.linspace(-t.eps_theta, t.eps_theta,
                                        opts.angular_samples)
            c = np.inf
            for th in ths:
                for w in (1.0, -1.0):
                    k = frame.k_of(t.radius, th, w)
                    c = min(c, t.sigma * float(
                        np.dot(frame.v_of(t.radius, th, w),
                               model.omega.grad(k))))
            if c <= 0:
                raise ResolutionError(
                    "angular-window commutator symbol not positive",
                    step="torus-positivity",
                )
            t.c_ij = float(c)
            c_vals[t.index] = float(c)
        record.c_ij = c_vals
        c_lower = min(c_vals.values())
        if L > 0:
            eps_r = min(eps_r1, c_lower / (2.0 * L * (1.0 + c_lower)))
        if eps_r < opts.width_floor:
            raise ResolutionError("final radial width collapsed in the "
                                  "Lipschitz step", step="lipschitz")
        for t in tori:
            t.eps_r = eps_r

    record.eps_theta = eps_theta
    record.eps_r = eps_r
    record.eps_r_cascade = (eps_r1, eps_r2, eps_r3, eps_r4)
    record.eps_theta_cascade = (eps_th1, eps_th2)
    record.lipschitz_L = L
    record.c_lower = c_lower
    record.c_prime = c_lower / 2.0 if np.isfinite(c_lower) else np.nan

    # re-sample the emission cloud against the final torus widths
    samples, per_shell = _sample_emission(model, shells, xi, E, dp,
                                          shell_ids, opts)
    crossing_samples = []
    for t in tori:
        ths = t.theta + np.linspace(-t.eps_theta, t.eps_theta, 17)
        for th in ths:
            for w in (1.0, -1.0):
                crossing_samples.append(frame.k_of(t.radius, th, w))
    crossing_samples = (np.array(crossing_samples) if crossing_samples
                        else np.zeros((0, model.nu)))

    branch_map = {b.branch_id: b for b in shells.branches}

    def member(k, _ids=tuple(shell_ids)):
        k = np.atleast_1d(np.asarray(k, dtype=float))
        r = float(np.linalg.norm(xi - k))
        for bid in _ids:
            b = branch_map[bid]
            if b.contains(r) and abs(b.value(r) + model.omega(k) - E) <= dp:
                return True
        return False

    member_shell = {}
    for bid in shell_ids:
        def mk(bid=bid):
            b = branch_map[bid]
            def fn(k):
                k = np.atleast_1d(np.asarray(k, dtype=float))
                r = float(np.linalg.norm(xi - k))
                return b.contains(r) and abs(
                    b.value(r) + model.omega(k) - E) <= dp
            return fn
        member_shell[bid] = mk()

    emission = EmissionSets(
        xi=xi, delta_prime=dp, shell_ids=shell_ids, member=member,
        member_shell=member_shell, samples=samples,
        shell_samples=per_shell, crossing_samples=crossing_samples,
    )
    return CalibrationResult(
        delta_prime=dp, tori=tori, emission=emission, record=record,
        frame=frame,
        shells_in_play=[branch_map[b] for b in shell_ids],
        threshold_distance=dist,
    )


# ---------------------------------------------------------------------------
# the vector field


class VectorFieldBundle:
    """The glued relative-velocity field with its partition and calibration.

    ``pieces`` maps piece labels to (cutoff, direction) closed-form
    evaluators; ``__call__`` evaluates the field at one momentum, ``many``
    over an (N, nu) array.  ``partition_values`` returns per-piece cutoff
    values whose sum is exactly 1 on the emission set.
    """

    def __init__(self, model: ModelSpec, shells: MassShellAtlas, xi,
                 E: float, calib: CalibrationResult,
                 opts: ConjugateOptions = DEFAULT_CONJ):
        self.model = model
        self.xi = np.atleast_1d(np.asarray(xi, dtype=float))
        self.energy = E
        self.calib = calib
        self.opts = opts
        self.nu = model.nu
        self.tori = calib.tori
        self.frame = calib.frame
        dp = calib.delta_prime

        self.exc_active = model.coupling.ir_singular
        self._rho0 = None
        if self.exc_active:
            if calib.emission.samples.size:
                r_exc = float(np.min(np.linalg.norm(
                    calib.emission.samples, axis=1)))
            else:
                r_exc = 1.0
            eps_eff = calib.record.eps_r if np.isfinite(calib.record.eps_r) \
                else r_exc
            self._rho0 = min(r_exc, max(eps_eff, opts.width_floor))

        eps_r = calib.record.eps_r
        if not np.isfinite(eps_r):
            eps_r = max(calib.delta_prime, opts.width_floor)
        self.eps_r = eps_r

        # per-shell pieces: energy window times radial plateau (times the
        # infrared floor when the coupling is singular at 0).  The energy
        # collar h_E is taken as wide as the (eps_r/2)-momentum-fattening
        # budget allows, so the field varies on grid-resolvable scales, but
        # never wide enough for the fattened band to touch a threshold
        # energy (the gradient direction must stay well-defined on it).
        self.shell_pieces = []
        room = calib.threshold_distance - dp
        for b in calib.shells_in_play:
            g0 = self._grad_inf(b, calib.emission.shell_samples.get(
                b.branch_id, np.zeros((0, self.nu))))
            if g0 < opts.grad_floor:
                raise PreconditionError(
                    "post-emission dispersion gradient below grad_floor on "
                    "the emission set: E meets the shell-critical family"
                )
            h_E = min(0.45 * eps_r * min(g0, 1.0),
                      0.9 * room if np.isfinite(room) else 1.0)
            h_E = max(h_E, 1e-3 * dp)
            for _ in range(20):
                gb = self._band_grad_inf(b, dp + h_E)
                if gb >= 0.5 * min(g0, 1.0) * 0.1 or gb >= opts.grad_floor * 10:
                    break
                h_E *= 0.5
            lo, hi = b.domain
            self.shell_pieces.append({
                "branch": b, "h_E": h_E, "r_lo": lo, "r_hi": hi,
            })
        self.sup_bound = 2.0 + max((t.radius for t in self.tori), default=0.0)
        worst = self._sampled_sup()
        if worst > self.sup_bound + 1e-12:
            raise ValueError(
                f"vector field sup-norm {worst} exceeds bound {self.sup_bound}"
            )
        calib.record.sup_bound = worst

    # -- pieces ------------------------------------------------------------

    def _grad_inf(self, branch, samples):
        if samples.size == 0:
            return np.inf
        vals = [np.linalg.norm(self._grad_S1(branch, k)) for k in samples]
        return float(np.min(vals))

    def _band_grad_inf(self, branch, half_width):
        """min |grad S1| over the energy band |S1 - E| <= half_width,
        sampled along the collinear axis (fattened-band safety check)."""
        lo, hi = branch.domain
        s = float(np.linalg.norm(self.xi))
        u = self.xi / s if s > 0 else np.eye(self.nu)[0]
        worst = np.inf
        for sign in (1.0, -1.0):
            for r in np.linspace(lo + 1e-12, hi - 1e-12, 120):
                k = self.xi - sign * r * u
                e = branch.value(r) + self.model.omega(k)
                if abs(e - self.energy) <= half_width:
                    worst = min(worst, float(np.linalg.norm(
                        self._grad_S1(branch, k))))
        return worst

    def _grad_S1(self, branch, k):
        r = float(np.linalg.norm(self.xi - k))
        rr = float(np.clip(r, *branch.domain))
        g = (branch.deriv(rr) * (k - self.xi) / r) if r > 0 else \
            np.zeros(self.nu)
        return g + self.model.omega.grad(k)

    def _torus_phi(self, k):
        """Per-torus cutoff values at k (empty when there are no tori)."""
        if not self.tori:
            return []
        s, th, w = self.frame.polar_of(k)
        return [
            (t, float(t.rho_theta(th)) * float(t.rho_r(s)), s, th, w)
            for t in self.tori
        ]

    def _shell_phi_tilde(self, piece, k):
        b = piece["branch"]
        r = float(np.linalg.norm(self.xi - k))
        lo, hi = piece["r_lo"], piece["r_hi"]
        lo_eff = lo + self.eps_r if lo > 1e-14 else -1.0
        hi_eff = hi - self.eps_r
        if hi_eff < lo_eff:
            return 0.0
        margin_lo = 0.5 * self.eps_r if lo > 1e-14 else 0.5
        beta = float(plateau_bump(r, lo_eff, hi_eff, margin_lo,
                                  0.5 * self.eps_r))
        if beta == 0.0:
            return 0.0
        rr = float(np.clip(r, lo, hi))
        e_val = b.value(rr) + self.model.omega(k)
        chi = float(plateau_bump(e_val, self.energy - self.calib.delta_prime,
                                 self.energy + self.calib.delta_prime,
                                 piece["h_E"]))
        if chi == 0.0:
            return 0.0
        eta = 1.0
        if self._rho0 is not None:
            eta = float(radial_floor(np.linalg.norm(k), 0.5 * self._rho0,
                                     self._rho0))
        return beta * chi * eta

    def partition_values(self, k):
        """Cutoff value of every piece at k; the torus pieces come first,
        then the telescoped shell pieces.  Sums to exactly 1 on the
        emission set."""
        k = np.atleast_1d(np.asarray(k, dtype=float))
        vals = {}
        torus_total = 0.0
        for t, phi, *_ in self._torus_phi(k):
            vals[f"torus:{t.index}"] = phi
            torus_total += phi
        remainder = 1.0 - torus_total
        for piece in self.shell_pieces:
            pt = self._shell_phi_tilde(piece, k)
            contrib = pt * remainder
            vals[f"shell:{piece['branch'].branch_id}"] = contrib
            remainder = remainder * (1.0 - pt)
        return vals

    def partition_sum(self, k):
        return float(sum(self.partition_values(k).values()))

    def __call__(self, k):
        k = np.atleast_1d(np.asarray(k, dtype=float))
        v = np.zeros(self.nu)
        torus_total = 0.0
        for t, phi, s, th, w in self._torus_phi(k):
            torus_total += phi
            if phi > 0.0:
                v = v + t.sigma * phi * self.frame.v_of(s, th, w)
        remainder = 1.0 - torus_total
        for piece in self.shell_pieces:
            pt = self._shell_phi_tilde(piece, k)
            if pt > 0.0 and remainder != 0.0:
                g = self._grad_S1(piece["branch"], k)
                nrm = float(np.linalg.norm(g))
                if nrm > 1e-14:
                    v = v + (pt * remainder / nrm) * g
            remainder = remainder * (1.0 - pt)
        return v

    def many(self, ks):
        ks = np.atleast_2d(np.asarray(ks, dtype=float))
        return np.array([self(k) for k in ks])

    def dominant_piece(self, k):
        vals = self.partition_values(k)
        if not vals:
            return ""
        label, phi = max(vals.items(), key=lambda kv: kv[1])
        return label if phi > 0 else ""

    def divergence(self, k):
        k = np.atleast_1d(np.asarray(k, dtype=float))
        h = self.opts.fd_step * (1.0 + float(np.linalg.norm(k)))
        acc = 0.0
        for a in range(self.nu):
            dk = np.zeros(self.nu)
            dk[a] = h
            acc += (self(k + dk)[a] - self(k - dk)[a]) / (2.0 * h)
        return float(acc)

    def _sampled_sup(self):
        pts = [self.calib.emission.samples, self.calib.emission.crossing_samples]
        cloud = np.vstack([p for p in pts if p.size]) if any(
            p.size for p in pts) else np.zeros((0, self.nu))
        worst = 0.0
        for k in cloud[:: max(1, len(cloud) // 400)] if cloud.size else []:
            worst = max(worst, float(np.linalg.norm(self(k))))
        for t in self.tori:
            for th in t.theta + np.linspace(-2 * t.eps_theta, 2 * t.eps_theta, 21):
                for r in t.radius + np.linspace(-2 * t.eps_r, 2 * t.eps_r, 7):
                    for w in (1.0, -1.0):
                        worst = max(worst, float(np.linalg.norm(
                            self(self.frame.k_of(r, th, w)))))
        return worst

    def support_points(self):
        """Point cloud covering the support (emission cloud plus torus
        lattices), used for support checks and exports."""
        pts = [self.calib.emission.samples,
               self.calib.emission.crossing_samples]
        for t in self.tori:
            lat = []
            for th in t.theta + np.linspace(-2 * t.eps_theta, 2 * t.eps_theta, 15):
                for r in t.radius + np.linspace(-2 * t.eps_r, 2 * t.eps_r, 5):
                    for w in (1.0, -1.0):
                        lat.append(self.frame.k_of(r, th, w))
            pts.append(np.array(lat))
        pts = [p for p in pts if p.size]
        return np.vstack(pts) if pts else np.zeros((0, self.nu))

    def sample_on_grid(self, grid: MomentumGrid):
        nodes = grid.nodes
        vals = self.many(nodes)
        ids = [self.dominant_piece(k) for k in nodes]
        return nodes, vals, ids


def build_vector_field(model: ModelSpec, shells: MassShellAtlas, xi, E: float,
                       calib: Optional[CalibrationResult] = None,
                       report: Optional[ThresholdReport] = None,
                       oracle=None,
                       opts: ConjugateOptions = DEFAULT_CONJ) -> VectorFieldBundle:
    """Glue torus pieces and normalized shell-gradient pieces into the
    relative-velocity field at (xi, E)."""
    if calib is None:
        calib = calibrate(model, shells, xi, E, report=report, oracle=oracle,
                          opts=opts)
    return VectorFieldBundle(model, shells, xi, E, calib, opts=opts)


# ---------------------------------------------------------------------------
# conjugate operators


def _derivative_matrix(M: int, h: float) -> sp.csr_matrix:
    """Antisymmetric central-difference matrix on M points (zero beyond the
    box, which is exact for interior-supported functions)."""
    off = np.full(M - 1, 0.5 / h)
    return sp.diags([off, -off], [1, -1], format="csr")


def build_conjugate(basis: FockBasis, grid: MomentumGrid,
                    bundle: VectorFieldBundle,
                    opts: ConjugateOptions = DEFAULT_CONJ):
    """One-body operator a = (v . iD + iD . v)/2 on the grid (exactly
    Hermitian) and its second quantization A = dGamma(a), sector preserving.

    Raises :class:`SupportError` when the sampled field is nonzero within
    one stencil of the box boundary.
    """
    nodes = grid.nodes
    vvals = bundle.many(nodes)
    M = grid.points_per_axis
    if grid.nu == 1:
        layer = np.zeros(M, dtype=bool)
        layer[[0, 1, M - 2, M - 1]] = True
        boundary = layer
    else:
        idx = np.arange(M)
        edge = (idx <= 1) | (idx >= M - 2)
        I, J = np.meshgrid(edge, edge, indexing="ij")
        boundary = (I | J).ravel()
    if np.any(np.linalg.norm(vvals[boundary], axis=1) > 0.0):
        raise SupportError(
            "vector field is nonzero within one stencil of the box boundary"
        )

    h = grid.spacing
    D1 = _derivative_matrix(M, h)
    if grid.nu == 1:
        d_axes = [D1]
    else:
        I_M = sp.identity(M, format="csr")
        d_axes = [sp.kron(D1, I_M, format="csr"),
                  sp.kron(I_M, D1, format="csr")]

    rows, cols, vals = [], [], []
    for ax, D in enumerate(d_axes):
        coo = D.tocoo()
        v_ax = vvals[:, ax]
        for p, q, dval in zip(coo.row, coo.col, coo.data):
            amp = 0.5j * (v_ax[p] + v_ax[q]) * dval
            if amp != 0:
                rows.append(p)
                cols.append(q)
                vals.append(amp)
    G = grid.n_nodes
    a_mat = sp.csr_matrix((vals, (rows, cols)), shape=(G, G), dtype=complex)
    a_op = OperatorMatrix(a_mat, "general", "one-body-a")

    a_coo = a_mat.tocoo()
    neighbors = {}
    for p, q, val in zip(a_coo.row, a_coo.col, a_coo.data):
        neighbors.setdefault(int(q), []).append((int(p), val))

    rows, cols, vals = [], [], []
    for n in range(basis.n_max + 1):
        for state in basis.states[n]:
            i = basis.index[state]
            for p in set(state):
                n_p = state.count(p)
                for q, a_qp in neighbors.get(p, ()):
                    pos = state.index(p)
                    lst = list(state)
                    del lst[pos]
                    n_q = lst.count(q) + 1
                    lst.append(q)
                    lst.sort()
                    j = basis.index[tuple(lst)]
                    rows.append(j)
                    cols.append(i)
                    vals.append(a_qp * sqrt(n_p * n_q))
    A_mat = sp.csr_matrix((vals, (rows, cols)),
                          shape=(basis.dim, basis.dim), dtype=complex)
    A_op = OperatorMatrix(A_mat, "sector-preserving", "A-conjugate")
    return a_op, A_op


# ---------------------------------------------------------------------------
# the one-body flow


def flow_map(bundle: VectorFieldBundle, k0, t: float, dt: float,
             opts: ConjugateOptions = DEFAULT_CONJ):
    """Integrate dk/ds = v(k) from k0 for time t with step dt (RK4), and the
    Jacobian determinant via the exponential of the integrated divergence.

    Returns (psi_t(k0), J_t(k0)); for points outside the support psi = k0
    and J = 1 exactly.
    """
    if dt > opts.flow_max_dt:
        raise ValueError(
            f"dt={dt} exceeds the configured stability bound "
            f"{opts.flow_max_dt}"
        )
    k0 = np.atleast_1d(np.asarray(k0, dtype=float))
    single = k0.ndim == 1
    ks = np.atleast_2d(k0).astype(float).copy()
    logJ = np.zeros(len(ks))
    remaining = float(t)
    sgn = 1.0 if remaining >= 0 else -1.0
    remaining = abs(remaining)
    while remaining > 1e-15:
        step = sgn * min(dt, remaining)
        for i in range(len(ks)):
            k = ks[i]
            f1 = bundle(k)
            d1 = bundle.divergence(k)
            f2 = bundle(k + 0.5 * step * f1)
            d2 = bundle.divergence(k + 0.5 * step * f1)
            f3 = bundle(k + 0.5 * step * f2)
            d3 = bundle.divergence(k + 0.5 * step * f2)
            f4 = bundle(k + step * f3)
            d4 = bundle.divergence(k + step * f3)
            ks[i] = k + (step / 6.0) * (f1 + 2 * f2 + 2 * f3 + f4)
            logJ[i] += (step / 6.0) * (d1 + 2 * d2 + 2 * d3 + d4)
        remaining -= abs(step)
    J = np.exp(logJ)
    if single:
        return ks[0], float(J[0])
    return ks, J
