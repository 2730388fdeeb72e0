"""One- and two-boson threshold functions, the one-boson energy window, and
the three threshold families plus the exceptional set.

Energies in the window [sigma1, sigma2) at fixed total momentum xi support
at most one asymptotic boson.  Inside it, thresholds are energies of zero
breakup velocity and come in three flavors: critical points of the
post-emission dispersion (shell family), crossing landings collinear with
xi (parallel family), and crossing landings with flat boson dispersion
(hash family).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, minimize

from .errors import RangeError
from .model import ModelSpec
from .spectra import FreeGroundOracle, MassShellAtlas, ShellBranch

__all__ = [
    "ThresholdOptions",
    "ThresholdHit",
    "ThresholdReport",
    "EmissionSets",
    "SigmaMin",
    "sigma_n_fn",
    "sigma_n_min",
    "essential_bottom",
    "threshold_shell",
    "threshold_parallel",
    "threshold_hash",
    "exc_set",
    "full_report",
    "discreteness_check",
]


@dataclass(frozen=True)
class ThresholdOptions:
    newton_tol: float = 1e-10
    dedup_tol: float = 1e-8
    scan_points: int = 193  # 1-D scan lattice for critical-point seeds
    descent_starts: int = 8
    domain_margin: float = 1e-9  # keep witnesses strictly inside annuli
    max_newton_iter: int = 60


DEFAULT_OPTIONS = ThresholdOptions()


@dataclass
class ThresholdHit:
    energy: float
    witness: np.ndarray  # momentum k (shell/hash) or signed radius r (parallel)
    label: str = ""


@dataclass
class ThresholdReport:
    xi: np.ndarray
    sigma1: float
    sigma2: float
    t_shell: List[ThresholdHit]
    t_parallel: List[ThresholdHit]
    t_hash: List[ThresholdHit]
    exc: List[float]

    @property
    def window(self) -> Tuple[float, float]:
        return (self.sigma1, self.sigma2)

    def all_energies(self) -> np.ndarray:
        es = (
            [h.energy for h in self.t_shell]
            + [h.energy for h in self.t_parallel]
            + [h.energy for h in self.t_hash]
            + list(self.exc)
        )
        return np.sort(np.array(es)) if es else np.zeros(0)

    def nearest_threshold_distance(self, E: float) -> float:
        es = self.all_energies()
        if es.size == 0:
            return np.inf
        return float(np.min(np.abs(es - E)))


@dataclass
class EmissionSets:
    """Numerical realization of the emission geometry for a window J' at
    fixed xi: momenta available for one-boson emission, the reachable shell
    points, and the crossing-landing set.  Sets are carried as sampled
    point clouds plus membership predicates (both closed-form)."""

    xi: np.ndarray
    delta_prime: float
    shell_ids: List[int]
    member: Callable[[np.ndarray], bool]  # k in K_{J'}
    member_shell: dict  # branch id -> predicate k in K_{J'} cap (A + xi)
    samples: np.ndarray  # points of K_{J'}, shape (N, nu)
    shell_samples: dict  # branch id -> (N_i, nu) points
    crossing_samples: np.ndarray  # K^X landings, shape (M, nu)

    def grid_mask(self, nodes: np.ndarray) -> np.ndarray:
        return np.array([self.member(k) for k in np.atleast_2d(nodes)])

    @property
    def bounded(self) -> bool:
        return self.samples.size == 0 or bool(
            np.all(np.isfinite(self.samples))
        )


@dataclass
class SigmaMin:
    value: float
    minimizer: np.ndarray
    used_extrapolation: bool
    method: str


def _ground_value(shells: MassShellAtlas, r: float,
                  oracle: Optional[FreeGroundOracle]) -> Tuple[float, bool]:
    g = shells.ground
    if g.contains(r, slack=1e-12):
        return g.value(r), False
    if oracle is None:
        raise RangeError(
            f"ground branch needed at radius {r}, traced domain {g.domain}, "
            "and no extrapolation oracle supplied"
        )
    nu = oracle.tot_k.shape[1]
    p = np.zeros(nu)
    p[0] = r
    return oracle(p), True


def sigma_n_fn(model: ModelSpec, shells: MassShellAtlas, xi, ks,
               oracle: Optional[FreeGroundOracle] = None) -> float:
    """Composite energy Sigma_0(xi - sum k_j) + sum omega(k_j)."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    ks = np.atleast_2d(np.asarray(ks, dtype=float))
    total = ks.sum(axis=0)
    r = float(np.linalg.norm(xi - total))
    base, _ = _ground_value(shells, r, oracle)
    return base + sum(model.omega(k) for k in ks)


def sigma_n_min(model: ModelSpec, shells: MassShellAtlas, xi, n: int,
                oracle: Optional[FreeGroundOracle] = None,
                scan_half_width: Optional[float] = None,
                scan_points: Optional[int] = None,
                opts: ThresholdOptions = DEFAULT_OPTIONS) -> SigmaMin:
    """Global minimum of the composite energy over n boson momenta.

    Coarse tensor-grid scan followed by Nelder-Mead descent from the best
    starts.  Descent results are accepted only when they do not exceed the
    scan value; divergence falls back to the scan value, flagged in
    ``method``.
    """
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    nu = model.nu
    s = float(np.linalg.norm(xi))
    if scan_half_width is None:
        scan_half_width = max(shells.ground.domain[1], s) + 1.0
    if scan_points is None:
        scan_points = 65 if nu == 1 else 25
    ax = np.linspace(-scan_half_width, scan_half_width, scan_points)
    if nu == 1:
        nodes = ax[:, None]
    else:
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        nodes = np.column_stack([X.ravel(), Y.ravel()])

    used_extrap = False

    def ground_at(rs: np.ndarray) -> np.ndarray:
        # out-of-range radii without an oracle score +inf in the scan (the
        # minimum is attained at physical configurations inside the range)
        nonlocal used_extrap
        rs = np.asarray(rs, dtype=float)
        out = np.empty_like(rs)
        lo, hi = shells.ground.domain
        inside = (rs >= lo - 1e-12) & (rs <= hi + 1e-12)
        if np.any(inside):
            out[inside] = shells.ground.value_many(rs[inside])
        if np.any(~inside):
            if oracle is None:
                out[~inside] = np.inf
            else:
                used_extrap = True
                ps = np.zeros((int(np.sum(~inside)), nu))
                ps[:, 0] = rs[~inside]
                out[~inside] = oracle.many(ps)
        return out

    omega_nodes = np.array([model.omega(k) for k in nodes])
    if n == 1:
        tot = nodes
        tot_omega = omega_nodes
        rr = np.linalg.norm(xi[None, :] - tot, axis=1)
        vals = ground_at(rr) + tot_omega
        flat = np.argsort(vals)[: opts.descent_starts]
        starts = [nodes[i] for i in flat]
    else:
        G = len(nodes)
        tot_omega = omega_nodes[:, None] + omega_nodes[None, :]
        diff = xi[None, None, :] - nodes[:, None, :] - nodes[None, :, :]
        rr = np.linalg.norm(diff, axis=2)
        vals2 = ground_at(rr.ravel()).reshape(G, G) + tot_omega
        flat = np.argsort(vals2.ravel())[: opts.descent_starts]
        starts = [
            np.concatenate([nodes[i // G], nodes[i % G]]) for i in flat
        ]
        vals = vals2.ravel()

    best_scan = float(np.min(vals))

    def objective(z):
        ks = z.reshape(n, nu)
        try:
            return sigma_n_fn(model, shells, xi, ks, oracle=oracle)
        except RangeError:
            return np.inf

    best_val, best_x, method = best_scan, np.asarray(starts[0], dtype=float), "scan"
    for x0 in starts:
        res = minimize(objective, np.asarray(x0, dtype=float),
                       method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 2000})
        if np.isfinite(res.fun) and res.fun <= best_val + 1e-15:
            if res.fun < best_val:
                best_val, best_x, method = float(res.fun), res.x, "scan+descent"
    if best_val > best_scan:  # descent diverged; keep the scan value
        best_val, method = best_scan, "scan-fallback"
        best_x = np.asarray(starts[0], dtype=float)
    return SigmaMin(value=best_val, minimizer=best_x.reshape(n, nu),
                    used_extrapolation=used_extrap, method=method)


def essential_bottom(model: ModelSpec, shells: MassShellAtlas, xi,
                     oracle: Optional[FreeGroundOracle] = None,
                     **kw) -> float:
    """Bottom of the essential spectrum: the one-boson threshold."""
    return sigma_n_min(model, shells, xi, 1, oracle=oracle, **kw).value


# ---------------------------------------------------------------------------
# shell-critical thresholds


def _dedupe(hits: List[ThresholdHit], tol: float) -> List[ThresholdHit]:
    out: List[ThresholdHit] = []
    for h in sorted(hits, key=lambda h: h.energy):
        if not out or abs(h.energy - out[-1].energy) > tol:
            out.append(h)
    return out


def _collinear_candidates(model: ModelSpec, branch: ShellBranch, s: float,
                          opts: ThresholdOptions) -> List[float]:
    """Roots t of d/dt [S(|s - t|) + omega(|t|)] = 0 via Newton from scan
    seeds; stagnating seeds are dropped."""
    r_lo, r_hi = branch.domain
    m = opts.domain_margin + 1e-6 * (1 + r_hi)

    def gprime(t):
        r = abs(s - t)
        sgn_r = -np.sign(s - t) if r > 0 else 0.0
        rho = abs(t)
        sgn_t = np.sign(t) if rho > 0 else 0.0
        return sgn_r * branch.deriv(r) + sgn_t * model.omega.radial_d1(rho)

    def gsecond(t):
        h = 1e-7 * (1.0 + abs(t))
        return (gprime(t + h) - gprime(t - h)) / (2 * h)

    segments = []
    if r_hi - m > max(r_lo, 0.0) + m:
        segments.append((s - (r_hi - m), s - (max(r_lo, 0.0) + m)))
        segments.append((s + max(r_lo, 0.0) + m, s + r_hi - m))
    roots: List[float] = []
    for a, b in segments:
        if b <= a:
            continue
        ts = np.linspace(a, b, opts.scan_points)
        vals = np.array([gprime(t) for t in ts])
        seeds = list(ts[:: max(1, opts.scan_points // 16)])
        for i in range(len(ts) - 1):
            if vals[i] == 0.0:
                roots.append(float(ts[i]))
            elif vals[i] * vals[i + 1] < 0:
                seeds.append(0.5 * (ts[i] + ts[i + 1]))
        for t0 in seeds:
            t = float(t0)
            ok = False
            for _ in range(opts.max_newton_iter):
                f = gprime(t)
                if abs(f) < opts.newton_tol:
                    ok = True
                    break
                df = gsecond(t)
                if df == 0.0 or not np.isfinite(df):
                    break
                step = f / df
                if abs(step) > 0.5 * (b - a):
                    break  # stagnation / runaway: drop this seed
                t -= step
            if ok and a - 1e-12 <= t <= b + 1e-12:
                roots.append(t)
    return roots


def threshold_shell(model: ModelSpec, shells: MassShellAtlas, xi,
                    opts: ThresholdOptions = DEFAULT_OPTIONS) -> List[ThresholdHit]:
    """Critical energies of k -> S(xi - k) + omega(k) for every branch.

    The primary search runs along the ray through xi (rotation-invariance
    reduction); for nu = 2 a full-plane Newton multistart acts as a safety
    net.  Every witness satisfies its defining equation to ``newton_tol``.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    nu = model.nu
    s = float(np.linalg.norm(xi))
    u = xi / s if s > 0 else np.eye(nu)[0]
    hits: List[ThresholdHit] = []

    def grad_S1(branch, k):
        # gradient in k of S(|xi - k|) + omega(k); zero iff the boson and
        # the residual system share a group velocity
        r = float(np.linalg.norm(xi - k))
        gS = (branch.deriv(r) * (k - xi) / r) if r > 0 else np.zeros(nu)
        return gS + model.omega.grad(k)

    for branch in shells.branches:
        for t in _collinear_candidates(model, branch, s, opts):
            k = t * u
            res = grad_S1(branch, k)
            if np.linalg.norm(res) <= opts.newton_tol:
                E = branch.value(abs(s - t)) + model.omega(k)
                hits.append(ThresholdHit(E, k, label=f"shell:{branch.branch_id}"))
        # degenerate candidates: boson at rest, or residue at rest; these sit
        # at r-domain endpoints and are admitted with boundary slack
        for k in ([np.zeros(nu)] + ([s * u] if branch.contains(0.0, 1e-12) else [])):
            r = float(np.linalg.norm(xi - k))
            if not branch.contains(r, slack=1e-12):
                continue
            if np.linalg.norm(grad_S1(branch, k)) <= opts.newton_tol:
                rr = float(np.clip(r, *branch.domain))
                E = branch.value(rr) + model.omega(k)
                hits.append(ThresholdHit(E, k, label=f"shell:{branch.branch_id}"))
        if nu == 2:
            hits.extend(_planar_safety_net(model, branch, xi, opts))
    return _dedupe(hits, opts.dedup_tol)


def _planar_safety_net(model: ModelSpec, branch: ShellBranch, xi,
                       opts: ThresholdOptions) -> List[ThresholdHit]:
    """Damped Newton on the 2-vector criticality equation from a coarse
    lattice of planar seeds."""
    nu = 2
    r_lo, r_hi = branch.domain
    m = opts.domain_margin + 1e-6 * (1 + r_hi)

    def F(k):
        r = np.linalg.norm(xi - k)
        if r <= 0:
            return None
        gS = branch.deriv(float(r)) * (k - xi) / r
        return model.omega.grad(k) + gS

    hits = []
    span = r_hi + np.linalg.norm(xi)
    seeds = np.linspace(-span, span, 9)
    for sx in seeds:
        for sy in seeds:
            k = np.array([sx, sy])
            ok = False
            for _ in range(opts.max_newton_iter):
                f = F(k)
                if f is None:
                    break
                if np.linalg.norm(f) < opts.newton_tol:
                    ok = True
                    break
                J = np.zeros((nu, nu))
                h = 1e-7 * (1 + np.linalg.norm(k))
                for a in range(nu):
                    dk = np.zeros(nu)
                    dk[a] = h
                    fp, fm = F(k + dk), F(k - dk)
                    if fp is None or fm is None:
                        J = None
                        break
                    J[:, a] = (fp - fm) / (2 * h)
                if J is None:
                    break
                try:
                    step = np.linalg.solve(J, f)
                except np.linalg.LinAlgError:
                    break
                if not np.all(np.isfinite(step)) or np.linalg.norm(step) > span:
                    break
                k = k - step
            if ok:
                r = float(np.linalg.norm(xi - k))
                if r_lo + m <= r <= r_hi - m:
                    E = branch.value(r) + model.omega(k)
                    hits.append(
                        ThresholdHit(E, k, label=f"shell:{branch.branch_id}")
                    )
    return hits


def threshold_parallel(model: ModelSpec, shells: MassShellAtlas, xi,
                       opts: ThresholdOptions = DEFAULT_OPTIONS) -> List[ThresholdHit]:
    """Crossing landings along the ray through xi: closed form per crossing."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    s = float(np.linalg.norm(xi))
    hits: List[ThresholdHit] = []
    for c in shells.crossings:
        if c.tangent:
            continue
        if s == 0.0:
            E = c.energy + model.omega.radial(c.radius)
            hits.append(ThresholdHit(E, np.array([c.radius]), label="parallel"))
            continue
        for r in (s - c.radius, s + c.radius):
            E = c.energy + model.omega.radial(abs(r))
            hits.append(ThresholdHit(E, np.array([r]), label="parallel"))
    return _dedupe(hits, opts.dedup_tol)


def _flat_radii(model: ModelSpec, rho_max: float) -> List[float]:
    """All rho >= 0 where the radial derivative of omega vanishes."""
    if model.omega.is_constant:
        return []  # every radius is flat; handled by the caller
    radii = [0.0]  # smooth rotation-invariant dispersions are flat at 0
    rs = np.linspace(1e-9, rho_max, 512)
    d = np.array([model.omega.radial_d1(r) for r in rs])
    for i in range(len(rs) - 1):
        if d[i] == 0.0:
            radii.append(float(rs[i]))
        elif d[i] * d[i + 1] < 0:
            radii.append(float(brentq(model.omega.radial_d1, rs[i], rs[i + 1],
                                      xtol=1e-14)))
    return sorted(set(round(r, 14) for r in radii))


def threshold_hash(model: ModelSpec, shells: MassShellAtlas, xi,
                   opts: ThresholdOptions = DEFAULT_OPTIONS) -> List[ThresholdHit]:
    """Crossing landings via a boson emitted at a flat radius of omega."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    nu = model.nu
    s = float(np.linalg.norm(xi))
    u = xi / s if s > 0 else np.eye(nu)[0]
    hits: List[ThresholdHit] = []
    crossings = [c for c in shells.crossings if not c.tangent]
    if model.omega.is_constant:
        for c in crossings:
            # any k with |xi - k| = R_c works; one energy per crossing
            hits.append(
                ThresholdHit(c.energy + model.omega.c0,
                             (s - c.radius) * u, label="hash")
            )
        return _dedupe(hits, opts.dedup_tol)
    rho_max = s + max((c.radius for c in crossings), default=0.0) + 1.0
    flats = _flat_radii(model, rho_max)
    for c in crossings:
        for rho in flats:
            lo, hi = abs(s - c.radius), s + c.radius
            if nu == 1:
                feasible = (abs(rho - lo) <= 1e-12) or (abs(rho - hi) <= 1e-12)
            else:
                feasible = lo - 1e-12 <= rho <= hi + 1e-12
            if not feasible:
                continue
            witness = _sphere_intersection_witness(s, u, rho, c.radius, nu)
            hits.append(
                ThresholdHit(c.energy + model.omega.radial(rho), witness,
                             label="hash")
            )
    return _dedupe(hits, opts.dedup_tol)


def _sphere_intersection_witness(s, u, rho, Rc, nu):
    """A momentum with |k| = rho and |xi - k| = Rc."""
    if rho == 0.0:
        return np.zeros(nu)
    if nu == 1 or s == 0.0:
        sign = 1.0 if abs(s - rho) - Rc <= abs(s + rho) - Rc else -1.0
        return sign * rho * u
    cos_a = np.clip((s * s + rho * rho - Rc * Rc) / (2 * s * rho), -1.0, 1.0)
    sin_a = np.sqrt(max(0.0, 1.0 - cos_a * cos_a))
    n = np.array([-u[1], u[0]])
    return rho * (cos_a * u + sin_a * n)


def exc_set(model: ModelSpec, shells: MassShellAtlas, xi,
            opts: ThresholdOptions = DEFAULT_OPTIONS) -> List[float]:
    """Exceptional energies omega(0) + (isolated spectrum at xi); empty for
    infrared-regular couplings."""
    if not model.coupling.ir_singular:
        return []
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    s = float(np.linalg.norm(xi))
    w0 = model.omega.radial(0.0)
    energies = []
    for b in shells.branches:
        if b.contains(s):
            energies.append(w0 + b.value(s))
    for c in shells.crossings:
        if abs(c.radius - s) <= opts.dedup_tol:
            energies.append(w0 + c.energy)
    out = []
    for e in sorted(energies):
        if not out or abs(e - out[-1]) > opts.dedup_tol:
            out.append(e)
    return out


def full_report(model: ModelSpec, shells: MassShellAtlas, xi,
                oracle: Optional[FreeGroundOracle] = None,
                opts: ThresholdOptions = DEFAULT_OPTIONS,
                **minkw) -> ThresholdReport:
    """All threshold families at xi, clipped to the window [sigma1, sigma2)."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    sigma1 = sigma_n_min(model, shells, xi, 1, oracle=oracle, opts=opts,
                         **minkw).value
    sigma2 = sigma_n_min(model, shells, xi, 2, oracle=oracle, opts=opts,
                         **minkw).value

    def clip(hits):
        return [h for h in hits
                if sigma1 - opts.dedup_tol <= h.energy < sigma2]

    return ThresholdReport(
        xi=xi,
        sigma1=sigma1,
        sigma2=sigma2,
        t_shell=clip(threshold_shell(model, shells, xi, opts)),
        t_parallel=clip(threshold_parallel(model, shells, xi, opts)),
        t_hash=clip(threshold_hash(model, shells, xi, opts)),
        exc=[e for e in exc_set(model, shells, xi, opts)
             if sigma1 - opts.dedup_tol <= e < sigma2],
    )


def discreteness_check(reports: Sequence[ThresholdReport], eps: float = 0.1,
                       count_cap: int = 64,
                       opts: ThresholdOptions = DEFAULT_OPTIONS) -> dict:
    """Empirical check that each compact sub-window [sigma1, sigma2 - eps]
    carries finitely many, well-separated threshold energies."""
    counts, ok = [], True
    for rep in reports:
        hi = rep.sigma2 - eps
        es = rep.all_energies()
        es = es[(es >= rep.sigma1 - opts.dedup_tol) & (es <= hi)]
        counts.append(int(es.size))
        if es.size > count_cap:
            ok = False
        if es.size >= 2 and np.min(np.diff(es)) <= 0.0:
            ok = False
    return {"pass": ok, "counts": counts, "eps": eps}
