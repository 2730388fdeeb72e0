"""Batch front end: load a config, run pipeline stages, emit artifacts.

Every stage writes CSV/JSON artifacts plus a manifest; identical configs
(including seeds) produce byte-identical data artifacts.  Exit codes:
0 ok, 2 config error, 3 precondition error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import __version__
from .config import (
    apply_override,
    build_grid,
    build_model,
    config_hash,
    load_config,
)
from .errors import (
    ConfigError,
    NelsonKitError,
    PreconditionError,
    ResolutionError,
    SizingError,
    SolverError,
    SupportError,
)
from .fock import enumerate_basis
from .model import check_minimal_conditions
from .spectra import FreeGroundOracle, MassShellAtlas, ShellBranch, trace_shells
from .thresholds import ThresholdOptions, full_report
from .conjugate import build_vector_field, calibrate
from .mourre import MourreOptions, mourre_scan

STAGES = ("model-check", "shells", "thresholds", "vfield", "mourre-scan", "all")


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n")


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj]
    return obj


def write_json(path: Path, obj):
    path.write_text(json.dumps(_jsonify(obj), sort_keys=True, indent=1) + "\n")


class StageContext:
    def __init__(self, cfg, out_dir: Path, threads: int = 1, plots: bool = False):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.out = out_dir
        self.threads = max(1, threads)
        self.plots = plots
        self.model = build_model(cfg)
        self.grid = build_grid(cfg)
        self.t0 = time.time()
        self._basis = None
        self._atlas = None
        self._oracle = None

    @property
    def basis(self):
        if self._basis is None:
            self._basis = enumerate_basis(
                self.grid, self.cfg["grid"]["n_max"],
                dim_cap=self.cfg["grid"].get("dim_cap", 2_000_000),
            )
        return self._basis

    @property
    def oracle(self):
        if self._oracle is None:
            self._oracle = FreeGroundOracle(self.model, self.grid, self.basis)
        return self._oracle

    def topts(self) -> ThresholdOptions:
        t = self.cfg["thresholds"]
        return ThresholdOptions(newton_tol=t["newton_tol"],
                                dedup_tol=t["dedup_tol"],
                                scan_points=t["scan_points"])

    def xi_radii(self):
        g = self.cfg["xi_grid"]
        return np.linspace(g["start"], g["stop"], g["num"])

    def stage_dir(self, stage: str) -> Path:
        d = self.out / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def manifest(self, stage: str, outputs):
        return {
            "config_hash": self.hash,
            "command": stage,
            "toolkit_version": __version__,
            "outputs": sorted(str(o.name) for o in outputs),
            "wall_clock_s": round(time.time() - self.t0, 3),
            "argv": sys.argv[1:],
        }

    def finish_stage(self, stage: str, outputs):
        d = self.stage_dir(stage)
        write_json(d / "manifest.json", self.manifest(stage, outputs))
        for o in outputs:
            write_json(Path(str(o) + ".meta.json"),
                       {"config_hash": self.hash,
                        "manifest": "manifest.json"})

    # -- shared atlas with config-hash-keyed cache -------------------------

    def atlas(self) -> MassShellAtlas:
        if self._atlas is not None:
            return self._atlas
        cache_dir = self.out / ".cache" / self.hash
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache = cache_dir / "atlas.npz"
        lock = FileLock(str(cache) + ".lock")
        with lock:
            if cache.exists():
                self._atlas = _load_atlas(cache)
                return self._atlas
            sh = self.cfg["shells"]
            radii = self.xi_radii()
            self._atlas = trace_shells(
                self.model, self.grid, self.basis, radii,
                n_branches=sh["n_branches"], gap_tol=sh["gap_tol"],
                cross_tol=sh["cross_tol"],
                eig_tol=self.cfg["solver"]["eig_tol"],
                dense_cutoff=self.cfg["solver"]["dense_cutoff"],
            )
            _save_atlas(cache, self._atlas)
        return self._atlas


def _save_atlas(path: Path, atlas: MassShellAtlas):
    payload = {
        "xi_radii": atlas.xi_radii,
        "ess": atlas.ess_bottom if atlas.ess_bottom is not None else np.zeros(0),
        "n_branches": np.array([len(atlas.branches)]),
        "crossings": np.array(
            [[c.radius, c.energy, c.multiplicity] for c in atlas.crossings]
        ).reshape(-1, 3),
    }
    for b in atlas.branches:
        payload[f"branch_{b.branch_id}_radii"] = b.radii
        payload[f"branch_{b.branch_id}_energies"] = b.energies
        payload[f"branch_{b.branch_id}_mult"] = np.array([b.multiplicity])
    np.savez(path, **payload)


def _load_atlas(path: Path) -> MassShellAtlas:
    from .spectra import Crossing

    data = np.load(path)
    branches = []
    bid = 0
    while f"branch_{bid}_radii" in data:
        branches.append(ShellBranch(
            radii=data[f"branch_{bid}_radii"],
            energies=data[f"branch_{bid}_energies"],
            multiplicity=int(data[f"branch_{bid}_mult"][0]),
            branch_id=bid,
        ))
        bid += 1
    crossings = [Crossing(r, e, int(m)) for r, e, m in data["crossings"]]
    ess = data["ess"] if data["ess"].size else None
    return MassShellAtlas(branches=branches, crossings=crossings,
                          source="eigensolver", xi_radii=data["xi_radii"],
                          ess_bottom=ess)


# ---------------------------------------------------------------------------
# stages


def ensure_model_ok(ctx: StageContext):
    mc = ctx.cfg["model_check"]
    report = check_minimal_conditions(
        ctx.model, sample_budget=mc["sample_budget"], box=mc["box"],
        seed=ctx.cfg["solver"]["seed"],
    )
    if not report.ok and not mc["allow_failed"]:
        raise PreconditionError(
            "model fails standing hypotheses: "
            + ", ".join(report.failed_conditions())
            + " (set model_check.allow_failed to override)"
        )
    return report


def stage_model_check(ctx: StageContext):
    mc = ctx.cfg["model_check"]
    report = check_minimal_conditions(
        ctx.model, sample_budget=mc["sample_budget"], box=mc["box"],
        seed=ctx.cfg["solver"]["seed"],
    )
    d = ctx.stage_dir("model-check")
    out = d / "conditions.json"
    write_json(out, {"passed": report.passed,
                     "details": {k: (v if not isinstance(v, float) else v)
                                 for k, v in report.details.items()},
                     "subadditivity_margin": report.subadditivity_margin})
    ctx.finish_stage("model-check", [out])
    if not report.ok and not mc["allow_failed"]:
        raise PreconditionError(
            "model-check failed: " + ", ".join(report.failed_conditions())
        )
    return [out]


def stage_shells(ctx: StageContext):
    ensure_model_ok(ctx)
    atlas = ctx.atlas()
    d = ctx.stage_dir("shells")
    rows = []
    for b in atlas.branches:
        for r, e in zip(b.radii, b.energies):
            rows.append((b.branch_id, r, e, b.multiplicity))
    out1 = d / "shells.csv"
    write_csv(out1, ["branch_id", "xi_radius", "energy", "multiplicity"], rows)
    out2 = d / "crossings.csv"
    write_csv(out2, ["radius", "energy", "multiplicity"],
              [(c.radius, c.energy, c.multiplicity) for c in atlas.crossings])
    outputs = [out1, out2]
    if ctx.plots:
        out3 = d / "shells.svg"
        _shells_svg(out3, atlas)
        outputs.append(out3)
    ctx.finish_stage("shells", outputs)
    return outputs


def stage_thresholds(ctx: StageContext):
    ensure_model_ok(ctx)
    atlas = ctx.atlas()
    topts = ctx.topts()
    radii = ctx.xi_radii()

    def one(s):
        xi = np.zeros(ctx.grid.nu)
        xi[0] = s
        return full_report(ctx.model, atlas, xi, oracle=ctx.oracle, opts=topts)

    if ctx.threads > 1:
        with ThreadPoolExecutor(max_workers=ctx.threads) as ex:
            reports = list(ex.map(one, radii))
    else:
        reports = [one(s) for s in radii]

    d = ctx.stage_dir("thresholds")
    rows = []
    js = []
    for s, rep in zip(radii, reports):
        entry = {"xi_radius": s, "sigma1": rep.sigma1, "sigma2": rep.sigma2,
                 "families": {}}
        for family, hits in (("shell", rep.t_shell),
                             ("parallel", rep.t_parallel),
                             ("hash", rep.t_hash)):
            entry["families"][family] = [
                {"energy": h.energy,
                 "witness": [float(x) for x in np.atleast_1d(h.witness)]}
                for h in hits
            ]
            for h in hits:
                w = ";".join(_fmt(x) for x in np.atleast_1d(h.witness))
                rows.append((s, family, h.energy, w))
        entry["families"]["exc"] = list(rep.exc)
        for e in rep.exc:
            rows.append((s, "exc", e, ""))
        rows.append((s, "sigma1", rep.sigma1, ""))
        rows.append((s, "sigma2", rep.sigma2, ""))
        js.append(entry)
    out1 = d / "thresholds.csv"
    write_csv(out1, ["xi_radius", "family", "energy", "witness"], rows)
    out2 = d / "thresholds.json"
    write_json(out2, js)
    ctx.finish_stage("thresholds", [out1, out2])
    return [out1, out2], reports


def _pick_vfield_energy(ctx, rep):
    e = ctx.cfg["vfield"]["energy"]
    if e == "mid-window":
        return 0.5 * (rep.sigma1 + rep.sigma2)
    return float(e)


def stage_vfield(ctx: StageContext):
    ensure_model_ok(ctx)
    atlas = ctx.atlas()
    topts = ctx.topts()
    s = ctx.cfg["vfield"]["xi_radius"]
    xi = np.zeros(ctx.grid.nu)
    xi[0] = s
    rep = full_report(ctx.model, atlas, xi, oracle=ctx.oracle, opts=topts)
    E = _pick_vfield_energy(ctx, rep)
    calib = calibrate(ctx.model, atlas, xi, E, report=rep, oracle=ctx.oracle,
                      topts=topts)
    bundle = build_vector_field(ctx.model, atlas, xi, E, calib=calib)
    d = ctx.stage_dir("vfield")
    nodes, vals, ids = bundle.sample_on_grid(ctx.grid)
    rows = []
    for p in range(len(nodes)):
        row = list(nodes[p]) + list(vals[p]) + [ids[p]]
        rows.append(row)
    kcols = [f"k{i}" for i in range(ctx.grid.nu)]
    vcols = [f"v{i}" for i in range(ctx.grid.nu)]
    out1 = d / "vfield.csv"
    write_csv(out1, kcols + vcols + ["piece"], rows)
    out2 = d / "calibration.json"
    write_json(out2, {"xi_radius": s, "energy": E,
                      **calib.record.as_dict()})
    ctx.finish_stage("vfield", [out1, out2])
    return [out1, out2]


def stage_mourre(ctx: StageContext):
    ensure_model_ok(ctx)
    atlas = ctx.atlas()
    topts = ctx.topts()
    mc = ctx.cfg["mourre"]
    s = mc["xi_radius"]
    xi = np.zeros(ctx.grid.nu)
    xi[0] = s
    rep = full_report(ctx.model, atlas, xi, oracle=ctx.oracle, opts=topts)
    lg = mc["lambda_grid"]
    if lg == "auto":
        width = rep.sigma2 - rep.sigma1
        lambdas = [rep.sigma1 + f * width for f in (0.3, 0.45, 0.6, 0.75)]
    else:
        lambdas = list(np.linspace(lg["start"], lg["stop"], lg["num"]))
    opts = MourreOptions(dense_cap=mc["dense_cap"],
                         eig_tol=ctx.cfg["solver"]["eig_tol"])
    reports = mourre_scan(ctx.model, ctx.grid, ctx.basis, atlas, xi, lambdas,
                          kappa_ladder=mc["kappa_ladder"], report=rep,
                          oracle=ctx.oracle, opts=opts, topts=topts)
    d = ctx.stage_dir("mourre-scan")
    rows = []
    for r in reports:
        if r.kappas:
            for kappa, c, nw, ncmp in zip(r.kappas, r.c_values, r.n_window,
                                          r.n_compact):
                rows.append((s, r.lam, kappa, c, r.c_fiber, ncmp, r.verdict))
        else:
            rows.append((s, r.lam, "", "", r.c_fiber, "", r.verdict))
    out = d / "mourre.csv"
    write_csv(out, ["xi_radius", "lambda", "kappa", "c_value", "c_fiber",
                    "n_compact", "verdict"], rows)
    ctx.finish_stage("mourre-scan", [out])
    return [out]


def _shells_svg(path: Path, atlas: MassShellAtlas, width=640, height=420):
    """Minimal self-contained SVG of the traced branches and crossings."""
    rs = np.concatenate([b.radii for b in atlas.branches])
    es = np.concatenate([b.energies for b in atlas.branches])
    r0, r1 = float(rs.min()), float(rs.max())
    e0, e1 = float(es.min()), float(es.max())
    if r1 == r0:
        r1 = r0 + 1.0
    if e1 == e0:
        e1 = e0 + 1.0
    pad = 40

    def X(r):
        return pad + (r - r0) / (r1 - r0) * (width - 2 * pad)

    def Y(e):
        return height - pad - (e - e0) / (e1 - e0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" '
             f'y2="{height-pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" '
             f'stroke="black"/>']
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]
    for b in atlas.branches:
        pts = " ".join(f"{X(r):.2f},{Y(e):.2f}"
                       for r, e in zip(b.radii, b.energies))
        c = colors[b.branch_id % len(colors)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{c}" '
                     f'stroke-width="1.5"/>')
    if atlas.ess_bottom is not None:
        pts = " ".join(f"{X(r):.2f},{Y(e):.2f}"
                       for r, e in zip(atlas.xi_radii, atlas.ess_bottom))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#777" '
                     f'stroke-dasharray="4 3"/>')
    for c in atlas.crossings:
        parts.append(f'<circle cx="{X(c.radius):.2f}" cy="{Y(c.energy):.2f}" '
                     f'r="4" fill="none" stroke="black"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def run_stage(ctx: StageContext, stage: str):
    if stage == "model-check":
        stage_model_check(ctx)
    elif stage == "shells":
        stage_shells(ctx)
    elif stage == "thresholds":
        stage_thresholds(ctx)
    elif stage == "vfield":
        stage_vfield(ctx)
    elif stage == "mourre-scan":
        stage_mourre(ctx)
    elif stage == "all":
        stage_model_check(ctx)
        stage_shells(ctx)
        stage_thresholds(ctx)
        stage_vfield(ctx)
        stage_mourre(ctx)
    else:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")


def _parse_grid_flag(text: str) -> dict:
    try:
        a, b, n = text.split(":")
        return {"start": float(a), "stop": float(b), "num": int(n)}
    except ValueError:
        raise ConfigError(f"grid flag must look like a:b:n, got {text!r}") \
            from None


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="nelsonkit",
        description="Spectral toolkit pipeline for polaron-type fiber "
                    "Hamiltonians: shells, thresholds, vector fields, and "
                    "commutator positivity scans.",
    )
    ap.add_argument("--config", required=True, help="JSON config path")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--stage", default="all", choices=STAGES)
    ap.add_argument("--xi-grid", help="a:b:n override for the xi radius grid")
    ap.add_argument("--lambda-grid", help="a:b:n override for the scan energies")
    ap.add_argument("--seed", type=int, help="override solver.seed")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--override", action="append", default=[],
                    metavar="KEY=VALUE", help="dotted-path config override")
    ap.add_argument("--plots", action="store_true",
                    help="emit SVG diagrams alongside the CSVs")
    args = ap.parse_args(argv)

    try:
        cfg = load_config(args.config)
        for ov in args.override:
            if "=" not in ov:
                raise ConfigError(f"override must be KEY=VALUE, got {ov!r}")
            key, val = ov.split("=", 1)
            cfg = apply_override(cfg, key, val)
        if args.xi_grid:
            cfg["xi_grid"] = _parse_grid_flag(args.xi_grid)
        if args.lambda_grid:
            g = _parse_grid_flag(args.lambda_grid)
            cfg.setdefault("mourre", {})
            cfg["mourre"]["lambda_grid"] = g
        if args.seed is not None:
            cfg["solver"]["seed"] = args.seed
        ctx = StageContext(cfg, Path(args.out), threads=args.threads,
                           plots=args.plots)
        run_stage(ctx, args.stage)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (PreconditionError,) as e:
        print(f"precondition violated: {e}", file=sys.stderr)
        return 3
    except (SolverError, ResolutionError, SizingError, SupportError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except NelsonKitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
