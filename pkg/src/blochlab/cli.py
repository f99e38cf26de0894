"""Command line front end.

Subcommands map one-to-one onto the library layers: band tables, critical
set search, single evolution runs, phase-space transforms, and the named
convergence experiments.  Every run writes its artifacts under --out; the
exit code is 0 exactly when every tolerance the subcommand declares holds.
"""

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .bandstructure import (
    BlochBandOracle,
    band_hessian,
    compute_band_grid,
    find_critical_points,
    write_bands_csv,
    write_critical_json,
)
from .blochdata import build_band_data, make_envelope, read_snapshot, write_snapshot
from .dynamics import evolve_effective_mass, evolve_full, evolve_multiplier
from .harness import (
    EXPERIMENTS,
    MASS_TOL,
    band_multiplier_symbol,
    build_potential,
    build_vext,
    default_config,
    run_experiment,
)
from .planewave import PlaneWaveBasis, default_cutoff
from .wigner import wigner_transform


def _load_config(path, fallback: dict | None = None) -> dict:
    if path is None:
        if fallback is None:
            raise SystemExit("this subcommand requires --config")
        return dict(fallback)
    with open(path) as fh:
        return json.load(fh)


def _out_dir(args) -> Path:
    out = Path(args.out if args.out else ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _basis_for(cfg: dict, potential) -> PlaneWaveBasis:
    cut = cfg.get("cutoff")
    return PlaneWaveBasis(cfg.get("dim", 1),
                          int(cut) if cut else default_cutoff(potential))


def _cmd_bands(args) -> int:
    cfg = _load_config(args.config, {
        "potential": {"family": "cosine", "amplitude": 1.0},
        "dim": 1, "bands": [0, 1, 2], "n_grid": 64,
    })
    out = _out_dir(args)
    V = build_potential(cfg["potential"], cfg.get("dim", 1))
    basis = _basis_for(cfg, V)
    grid = compute_band_grid(V, basis, list(cfg.get("bands", [0, 1, 2])),
                             n_grid=int(cfg.get("n_grid", 64)))
    write_bands_csv(out / "bands.csv", grid)
    _write_json(out / "bands_manifest.json", {
        "bands": grid.bands,
        "dim": grid.dim,
        "n_grid": len(grid.axes[0]),
        "files": ["bands.csv"],
    })
    print(f"bands: {len(grid.bands)} bands on a {len(grid.axes[0])}^"
          f"{grid.dim} grid -> {out / 'bands.csv'}")
    return 0


def _cmd_critical(args) -> int:
    cfg = _load_config(args.config, {
        "potential": {"family": "cosine", "amplitude": 1.0},
        "dim": 1, "band": 0, "n_grid": 32,
    })
    out = _out_dir(args)
    V = build_potential(cfg["potential"], cfg.get("dim", 1))
    basis = _basis_for(cfg, V)
    oracle = BlochBandOracle(V, basis, int(cfg.get("band", 0)))
    result = find_critical_points(oracle, n_grid=int(cfg.get("n_grid", 32)))
    write_critical_json(out / "critical.json", result)
    n_pts = len(result.points)
    n_man = len(result.manifolds)
    n_bad = len(result.unconverged)
    print(f"critical: {n_pts} points, {n_man} manifold candidates, "
          f"{n_bad} unconverged seeds -> {out / 'critical.json'}")
    return 0 if n_bad == 0 else 1


def _evolve_trajectory(cfg: dict):
    eq = cfg.get("equation", "full")
    dim = cfg.get("dim", 1)
    L = int(cfg.get("L", 16))
    eps = float(cfg["eps"])
    m = round(math.log2(1.0 / eps))
    if 2.0 ** -m != eps:
        raise SystemExit(f"eps={eps!r} is not an exact power of two")
    T = float(cfg.get("T", 1.0))
    n_snap = int(cfg.get("snapshots", 8))
    times = [k * T / n_snap for k in range(n_snap + 1)]
    N = L << (m + int(cfg.get("resolution", 3)))
    env_spec = cfg.get("envelope", {"family": "gaussian", "width": 1.0})
    env = make_envelope(env_spec.get("family", "gaussian"), L, N, eps,
                        width=env_spec.get("width", 1.0))
    vext = build_vext(cfg.get("vext"), L, dim)
    band = int(cfg.get("band", 0))
    V = build_potential(cfg.get("potential", {"family": "cosine",
                                              "amplitude": 1.0}), dim)
    basis = _basis_for(cfg, V)
    xi0 = np.atleast_1d(np.asarray(cfg.get("xi0", [0.0]), dtype=float))
    dt = cfg.get("dt")
    if eq == "full":
        psi0, _ = build_band_data(env, xi0, band, eps, V, basis)
        traj = evolve_full(psi0, V, vext, eps, times=times, dt=dt)
    elif eq == "multiplier":
        psi0, _ = build_band_data(env, xi0, band, eps, V, basis)
        sym = band_multiplier_symbol(V, basis, band)
        traj = evolve_multiplier(psi0, sym, vext, eps, times=times, dt=dt)
    elif eq == "effective_mass":
        B = band_hessian(V, basis, band, xi0)
        traj = evolve_effective_mass(env, B, vext, times=times,
                                     dt=dt if dt else 1e-3)
    else:
        raise SystemExit(f"unknown equation {eq!r}; pick full, multiplier, "
                         f"or effective_mass")
    return eq, eps, traj


def _cmd_evolve(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args)
    eq, eps, traj = _evolve_trajectory(cfg)
    files = []
    for i, (t, f) in enumerate(zip(traj.times, traj.fields)):
        name = f"evolve_{i:03d}.bin"
        write_snapshot(out / name, f, time=float(t),
                       description=f"{eq} evolution snapshot {i}")
        files.append(name)
    norms = [f.norm() for f in traj.fields]
    _write_json(out / "evolve_manifest.json", {
        "equation": eq,
        "eps": eps,
        "dt": traj.dt,
        "times": [float(t) for t in traj.times],
        "norms": norms,
        "files": files,
    })
    drift = max(abs(n * n - norms[0] * norms[0]) for n in norms)
    ok = drift <= MASS_TOL * max(1.0, norms[0] * norms[0])
    print(f"evolve[{eq}]: {len(files)} snapshots, dt={traj.dt:.3e}, "
          f"mass drift {drift:.3e} -> {out / 'evolve_manifest.json'}")
    return 0 if ok else 1


def _cmd_wigner(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args)
    snap = cfg.get("snapshot")
    if not snap:
        raise SystemExit("wigner config needs a 'snapshot' path")
    f, meta = read_snapshot(snap)
    grid = wigner_transform(f, nx=cfg.get("nx"))
    grid.to_csv(out / "wigner.csv")
    _write_json(out / "wigner_manifest.json", {
        "source": str(snap),
        "eps": f.eps,
        "L": f.L,
        "nx": len(grid.x),
        "nxi": len(grid.xi),
        "mass": grid.mass(),
        "norm_sq": grid.norm_sq,
        "time": meta.get("time", 0.0),
        "files": ["wigner.csv"],
    })
    # the transform conserves mass exactly up to roundoff
    ok = abs(grid.mass() - grid.norm_sq) <= 1e-8 * max(1.0, grid.norm_sq)
    print(f"wigner: {len(grid.x)}x{len(grid.xi)} grid, mass {grid.mass():.6f} "
          f"-> {out / 'wigner.csv'}")
    return 0 if ok else 1


def _cmd_experiment(args) -> int:
    cfg = _load_config(args.config, default_config(args.name))
    cfg.setdefault("experiment", args.name)
    if cfg["experiment"] != args.name:
        raise SystemExit(f"config is for {cfg['experiment']}, "
                         f"not {args.name}")
    report = run_experiment(cfg, out_dir=args.out, threads=args.threads)
    for c in report.checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name}: value={c.value:.6g} "
              f"(want {c.op} {c.threshold:.6g})")
    for msg in report.failures:
        print(f"FAIL member {msg}")
    print(f"{args.name}: {'all checks passed' if report.passed else 'FAILED'}")
    return 0 if report.passed else 1


def _cmd_report(args) -> int:
    out = Path(args.out if args.out else ".")
    paths = sorted(out.glob("E*_report.json"))
    if not paths:
        print(f"report: no experiment reports under {out}", file=sys.stderr)
        return 1
    all_ok = True
    for p in paths:
        with open(p) as fh:
            doc = json.load(fh)
        ok = bool(doc.get("passed"))
        n_checks = len(doc.get("checks", []))
        n_fail = sum(1 for c in doc.get("checks", []) if not c.get("passed"))
        n_fail += len(doc.get("failures", []))
        all_ok = all_ok and ok
        print(f"{'PASS' if ok else 'FAIL'} {doc.get('experiment', p.stem)}: "
              f"{n_checks - n_fail}/{n_checks} checks ({p.name})")
    print(f"report: {'all experiments passed' if all_ok else 'failures present'}")
    return 0 if all_ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="blochlab",
        description="Bloch band structure, semiclassical evolution, and "
                    "effective mass convergence experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("bands", _cmd_bands), ("critical", _cmd_critical),
                     ("evolve", _cmd_evolve), ("wigner", _cmd_wigner)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--threads", type=int, default=1)
        p.set_defaults(fn=fn)
    p = sub.add_parser("experiment")
    p.add_argument("name", choices=list(EXPERIMENTS))
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=_cmd_experiment)
    p = sub.add_parser("report")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=_cmd_report)
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
