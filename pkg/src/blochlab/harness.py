"""Convergence experiments: configs, sweeps, rate fits, reports.

Six named experiments (E1..E6) each run a small-parameter sweep through the
same stages: build concentrated data, evolve, diagnose, compare against the
limiting model.  Every stage is deterministic, so identical configs produce
bit-identical reports; wall-clock timing is kept out of the report document
and written to a separate runtime sidecar.
"""

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bandstructure import band_hessian
from .blochdata import (
    BandFiberTable,
    WaveField,
    band_residual,
    build_band_data,
    make_envelope,
    project_band,
    unfold_first_zone,
    write_snapshot,
)
from .dynamics import (
    DensityOperator,
    ExtPotential,
    MultiplierSymbol,
    evolve_effective_mass,
    evolve_full,
    evolve_heisenberg,
    evolve_multiplier,
)
from .planewave import (
    PeriodicPotential,
    PlaneWaveBasis,
    default_cutoff,
    solve_fiber,
)
from .wigner import (
    CriticalLine,
    CriticalPoints,
    invariance_defect,
    localization_defect,
    smooth_cutoff,
    time_averaged_local_density,
)

TWO_PI = 2.0 * math.pi

EXPERIMENTS = ("E1", "E2", "E3", "E4", "E5", "E6")

BORDER_FRACTION = 0.05  # banned band is 10% of the box, 5% per side
BORDER_TOL = 1e-4
MASS_TOL = 1e-9


# -- time window ---------------------------------------------------------------


def triangle_weights(times) -> np.ndarray:
    """Triangular window over the snapshot span, trapezoid cells, unit sum.

    Vanishes at both endpoints, peaks at the midpoint; this is the fixed
    averaging profile for all experiment time averages.
    """
    t = np.asarray(times, dtype=float)
    if t.size < 3:
        raise ValueError("need at least three snapshot times")
    if np.any(np.diff(t) <= 0):
        raise ValueError("snapshot times must be strictly increasing")
    span = t[-1] - t[0]
    prof = 1.0 - np.abs(2.0 * (t - t[0]) / span - 1.0)
    cell = np.empty_like(t)
    cell[0] = 0.5 * (t[1] - t[0])
    cell[-1] = 0.5 * (t[-1] - t[-2])
    cell[1:-1] = 0.5 * (t[2:] - t[:-2])
    w = prof * cell
    return w / np.sum(w)


# -- weak density comparison ---------------------------------------------------


def default_test_functions(L: float, shape) -> list:
    """Fixed probe set: periodized Gaussians, three widths by four centers.

    d=2 probes are the product of the same profile on each axis.  Peak
    values are 1 up to wrap-around images, so the weak distance divides by
    max(1, sup|phi|) without rescaling surprises.
    """
    shape = tuple(shape)
    axes = [np.arange(n) * (L / n) for n in shape]
    widths = (L / 16.0, L / 8.0, L / 4.0)
    centers = (L / 8.0, 3.0 * L / 8.0, 5.0 * L / 8.0, 7.0 * L / 8.0)
    probes = []
    for w in widths:
        for c in centers:
            prof = [
                sum(
                    np.exp(-0.5 * ((ax - c + s * L) / w) ** 2)
                    for s in range(-2, 3)
                )
                for ax in axes
            ]
            if len(shape) == 1:
                probes.append(prof[0])
            else:
                probes.append(prof[0][:, None] * prof[1][None, :])
    return probes


def weak_density_distance(rho_a, rho_b, L: float, testset=None) -> float:
    """max over probes of |integral phi (rho_a - rho_b)| / max(1, sup|phi|)."""
    a = np.asarray(rho_a, dtype=float)
    b = np.asarray(rho_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"density grids disagree: {a.shape} vs {b.shape}")
    if a.ndim not in (1, 2):
        raise ValueError("densities must be one- or two-dimensional")
    if testset is None:
        testset = default_test_functions(L, a.shape)
    dx = (L / a.shape[0]) ** a.ndim
    diff = a - b
    best = 0.0
    for phi in testset:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != a.shape:
            raise ValueError("test function grid mismatch")
        val = abs(float(np.sum(phi * diff)) * dx)
        val /= max(1.0, float(np.max(np.abs(phi))))
        best = max(best, val)
    return best


# -- rate fits -------------------------------------------------------------------


@dataclass
class RateFit:
    """Least-squares slope of log(value) against log(eps)."""

    slope: float
    intercept: float
    residual: float
    n: int

    def as_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "residual": self.residual,
            "n": self.n,
        }


def fit_rate(pairs) -> RateFit:
    """Fit value ~ C eps^slope from (eps, value) pairs.

    Requires at least three pairs with strictly positive finite values; a
    nonpositive value makes the log-log rate undefined, so the fit refuses
    and the caller should report the absolute defect instead.
    """
    pts = [(float(e), float(v)) for e, v in pairs]
    if len(pts) < 3:
        raise ValueError("rate fit needs at least three (eps, value) pairs")
    for e, v in pts:
        if not (math.isfinite(v) and v > 0.0):
            raise ValueError(
                f"metric value {v:.6g} at eps={e:.6g} is not positive; "
                "a log-log rate is undefined - report the absolute defect "
                "instead"
            )
    x = np.log([e for e, _ in pts])
    y = np.log([v for _, v in pts])
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return RateFit(float(slope), float(intercept), resid, len(pts))


# -- configuration ---------------------------------------------------------------


_COMMON = {
    "potential": {"family": "cosine", "amplitude": 1.0},
    "band": 0,
    "envelope": {"family": "gaussian", "width": 1.0},
    "vext": {"family": "cosine", "amplitude": 1.0, "axis": 0},
    "T": 1.0,
    "dt": None,
    "dt_factor": None,
    "test_functions": "default",
}

_SWEEP_1D = [0.125, 0.0625, 0.03125, 0.015625]
_SWEEP_2D = [0.125, 0.0625, 0.03125]


def default_config(experiment: str) -> dict:
    """Reference configuration for a named experiment.

    Geometry is picked so the wave packet stays away from the box border
    over the whole time window.  A zone-edge carrier rides a band whose
    curvature is large (about -8.9 for the cosine cell potential at unit
    amplitude), so those experiments get a wide box and a wide envelope;
    dt_factor throttles the splitting error of the stiff full evolution,
    which scatters O((dt/eps^2)^2) mass across the zone.
    """
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}")
    cfg = dict(_COMMON)
    cfg["experiment"] = experiment
    cfg["dim"] = 1
    cfg["L"] = 16
    cfg["resolution"] = 3
    cfg["eps"] = list(_SWEEP_1D)
    cfg["xi0"] = [math.pi]
    if experiment == "E1":
        cfg["L"] = 32
        cfg["envelope"] = {"family": "gaussian", "width": 4.0}
        cfg["xi0"] = [0.0, math.pi]
        cfg["dt_factor"] = 0.05
    elif experiment == "E2":
        cfg["L"] = 32
        cfg["envelope"] = {"family": "gaussian", "width": 4.0}
        cfg["resolution"] = 2
        cfg["dt_factor"] = 0.01
    elif experiment == "E3":
        cfg["xi0"] = [0.0]
        cfg["dt_factor"] = 0.05
    elif experiment == "E4":
        cfg["resolution"] = 2
        cfg["vext"] = None
        cfg["shift"] = 0.4
        cfg["margin"] = 0.5
    elif experiment == "E5":
        cfg["L"] = 32
        cfg["envelope"] = {"family": "gaussian", "width": 4.0}
        cfg["band2"] = 1
        cfg["dt_factor"] = 0.05
    elif experiment == "E6":
        cfg["dim"] = 2
        cfg["L"] = 8
        cfg["resolution"] = 1
        cfg["eps"] = list(_SWEEP_2D)
        cfg["xi0"] = [[0.0, 0.5 * math.pi]]
    return cfg


@dataclass
class ExperimentConfig:
    experiment: str
    potential: dict
    band: int
    xi0: list
    envelope: dict
    vext: dict | None
    eps: list
    T: float
    dt: float | None
    L: int
    resolution: int
    dim: int = 1
    dt_factor: float | None = None
    test_functions: str = "default"
    shift: float = 0.4
    margin: float = 0.5
    band2: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """Merge user keys over the experiment's defaults."""
        if "experiment" not in data:
            raise ValueError("config needs an 'experiment' key (E1..E6)")
        base = default_config(data["experiment"])
        unknown = set(data) - set(base) - {"shift", "margin", "band2"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base.update(data)
        base.setdefault("shift", 0.4)
        base.setdefault("margin", 0.5)
        base.setdefault("band2", 1)
        cfg = cls(**base)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "potential": self.potential,
            "band": self.band,
            "band2": self.band2,
            "xi0": self.xi0,
            "envelope": self.envelope,
            "vext": self.vext,
            "eps": list(self.eps),
            "T": self.T,
            "dt": self.dt,
            "dt_factor": self.dt_factor,
            "L": self.L,
            "resolution": self.resolution,
            "dim": self.dim,
            "test_functions": self.test_functions,
            "shift": self.shift,
            "margin": self.margin,
        }

    def eps_exponent(self, eps: float) -> int:
        m = round(math.log2(1.0 / eps))
        if m < 1 or 2.0**-m != eps:
            raise ValueError(f"eps={eps!r} is not an exact power of two")
        return m

    def grid_size(self, eps: float) -> int:
        """Points per axis: one lattice cell gets 2^resolution points."""
        return self.L << (self.eps_exponent(eps) + self.resolution)

    def member_dt(self, eps: float) -> float | None:
        """Time step for a sweep member; None defers to the evolver default."""
        if self.dt is not None:
            return self.dt
        if self.dt_factor is not None:
            return self.dt_factor * eps * eps
        return None

    def carriers(self) -> list:
        """xi0 entries as d-vectors."""
        out = []
        for xi in self.xi0:
            v = np.atleast_1d(np.asarray(xi, dtype=float))
            if v.shape != (self.dim,):
                raise ValueError(f"xi0 entry {xi!r} is not a {self.dim}-vector")
            out.append(v)
        return out

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        L = self.L
        if not (isinstance(L, int) and L > 0 and (L & (L - 1)) == 0):
            raise ValueError("box size L must be a positive power of two")
        if not (isinstance(self.resolution, int) and 0 <= self.resolution <= 6):
            raise ValueError("resolution must be an integer in 0..6")
        if not self.eps:
            raise ValueError("eps sweep is empty")
        if self.T <= 0:
            raise ValueError("time horizon T must be positive")
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be positive when given")
        if self.dt_factor is not None and self.dt_factor <= 0:
            raise ValueError("dt_factor must be positive when given")
        if self.band < 0 or self.band2 < 0:
            raise ValueError("band indices are nonnegative")
        carriers = self.carriers()
        for eps in self.eps:
            self.eps_exponent(eps)
            for v in carriers:
                j = v * L / (TWO_PI * eps)
                off = np.max(np.abs(j - np.round(j)))
                if off > 1e-9 * max(1.0, float(np.max(np.abs(j)))):
                    raise ValueError(
                        f"xi0={v.tolist()} sits off the frequency lattice at "
                        f"eps={eps:.6g}; admissible values are multiples of "
                        f"2 pi eps / L"
                    )


# -- model builders --------------------------------------------------------------


def build_potential(spec: dict, dim: int) -> PeriodicPotential:
    fam = spec.get("family")
    if fam == "cosine":
        v = PeriodicPotential.cosine(spec.get("amplitude", 1.0))
        if dim == 2:
            v = PeriodicPotential.separable(v, PeriodicPotential.cosine(
                spec.get("amplitude", 1.0)))
        return v
    if fam == "zero":
        return PeriodicPotential.zero(dim)
    raise ValueError(f"unknown potential family {fam!r}")


def build_vext(spec: dict | None, L: int, dim: int) -> ExtPotential | None:
    if spec is None or spec.get("family") == "zero":
        return None
    fam = spec.get("family")
    if fam == "cosine":
        return ExtPotential.cosine(L, spec.get("amplitude", 1.0),
                                   axis=spec.get("axis", 0), dim=dim)
    if fam == "constant":
        return ExtPotential.constant(spec.get("value", 0.0), dim=dim)
    raise ValueError(f"unknown external potential family {fam!r}")


def _vext_values(spec: dict | None, L: int, N: int, dim: int):
    """Static grid samples of the external potential (for residual stages)."""
    if spec is None or spec.get("family") == "zero":
        return np.zeros((N,) * dim)
    x = np.arange(N) * (L / N)
    fam = spec.get("family")
    if fam == "constant":
        return np.full((N,) * dim, float(spec.get("value", 0.0)))
    if fam == "cosine":
        a = float(spec.get("amplitude", 1.0))
        axis = int(spec.get("axis", 0))
        prof = a * np.cos(TWO_PI * x / L)
        if dim == 1:
            return prof
        return prof[:, None] * np.ones(N) if axis == 0 else (
            np.ones(N)[:, None] * prof[None, :])
    raise ValueError(f"unknown external potential family {fam!r}")


def _snapshot_times(T: float) -> list:
    return [k * T / 8.0 for k in range(9)]


def _avg_density(traj, weights) -> np.ndarray:
    out = None
    for w, f in zip(weights, traj.fields):
        d = np.abs(f.values) ** 2
        out = w * d if out is None else out + w * d
    return out


# -- invariant guards -----------------------------------------------------------


def border_mass_fraction(f: WaveField) -> float:
    """Mass fraction inside the banned 10% band around the box seam."""
    x = f.x_axis()
    near = np.minimum(x, f.L - x) < BORDER_FRACTION * f.L
    w = np.abs(f.values) ** 2
    total = float(np.sum(w))
    if total == 0.0:
        return 0.0
    if f.dim == 1:
        return float(np.sum(w[near])) / total
    mask = near[:, None] | near[None, :]
    return float(np.sum(w[mask])) / total


def _guard_borders(traj) -> float:
    worst = 0.0
    for t, f in zip(traj.times, traj.fields):
        frac = border_mass_fraction(f)
        worst = max(worst, frac)
        if frac > BORDER_TOL:
            raise RuntimeError(
                f"{frac:.3e} of the mass entered the 10% border band at "
                f"t={t:.4g} (tolerance {BORDER_TOL:g}); increase the box L"
            )
    return worst


def _guard_mass(traj) -> float:
    sq = np.asarray(traj.norms, dtype=float) ** 2
    drift = float(np.max(np.abs(sq - sq[0])))
    if drift > MASS_TOL * max(1.0, sq[0]):
        raise RuntimeError(
            f"mass drifted by {drift:.3e} along the trajectory "
            f"(tolerance {MASS_TOL:g})"
        )
    return drift


# -- report ----------------------------------------------------------------------


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    op: str  # "<=" or ">="
    passed: bool

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "threshold": self.threshold,
            "op": self.op,
            "passed": self.passed,
        }


def _check(name: str, value: float, op: str, threshold: float) -> Check:
    value = float(value)
    ok = value <= threshold if op == "<=" else value >= threshold
    return Check(name, value, float(threshold), op, bool(ok))


def _check_bool(name: str, ok: bool) -> Check:
    return Check(name, 1.0 if ok else 0.0, 1.0, ">=", bool(ok))


def monotone_decreasing(values, tol: float = 0.10) -> bool:
    """Each step may exceed its predecessor by at most the tolerance."""
    v = list(values)
    return all(v[i + 1] <= (1.0 + tol) * v[i] for i in range(len(v) - 1))


@dataclass
class ConvergenceReport:
    experiment: str
    config: dict
    sweep: list
    fits: dict
    checks: list
    failures: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    partial: bool = False
    passed: bool = False

    def finalize(self) -> None:
        self.partial = bool(self.failures)
        self.passed = (not self.partial) and all(c.passed for c in self.checks)

    def as_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config,
            "sweep": self.sweep,
            "fits": self.fits,
            "checks": [c.as_dict() for c in self.checks],
            "failures": self.failures,
            "extras": self.extras,
            "artifacts": self.artifacts,
            "partial": self.partial,
            "passed": self.passed,
        }

    def to_json(self, path=None) -> dict:
        doc = self.as_dict()
        if path is not None:
            with open(path, "w") as fh:
                json.dump(doc, fh, indent=1, sort_keys=True)
                fh.write("\n")
        return doc


# -- sweep driver ----------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _run_sweep(cfg: ExperimentConfig, member, threads: int):
    """Run one member per eps in a work pool; reduce in sweep order.

    A member that raises aborts only its own sweep entry; the failure is
    recorded and the report is marked partial.
    """
    eps_list = list(cfg.eps)

    def call(eps):
        t0 = time.monotonic()
        try:
            row = member(eps)
            return eps, row, None, time.monotonic() - t0
        except Exception as exc:  # recorded, not fatal to the sweep
            msg = f"eps={_fmt(eps)}: {type(exc).__name__}: {exc}"
            return eps, None, msg, time.monotonic() - t0

    n = max(1, min(int(threads), len(eps_list)))
    if n == 1:
        results = [call(e) for e in eps_list]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(call, eps_list))
    rows, failures, walls = [], [], {}
    for eps, row, err, wall in results:
        walls[_fmt(eps)] = wall
        if err is None:
            rows.append(row)
        else:
            failures.append(err)
    return rows, failures, walls


# -- E1: limiting profile comparison ----------------------------------------------


def _run_e1(cfg: ExperimentConfig, threads: int):
    V = build_potential(cfg.potential, cfg.dim)
    basis = PlaneWaveBasis(cfg.dim, default_cutoff(V))
    carriers = cfg.carriers()
    times = _snapshot_times(cfg.T)
    eps_min = min(cfg.eps)
    labels = [f"xi0={_fmt(float(v[0]))}" for v in carriers]
    payload = {"density": {}, "snapshots": {}}

    def member(eps):
        N = cfg.grid_size(eps)
        env = make_envelope(cfg.envelope["family"], cfg.L, N, eps,
                            width=cfg.envelope.get("width", 1.0))
        vext = build_vext(cfg.vext, cfg.L, cfg.dim)
        w = triangle_weights(times)
        row = {"eps": eps, "N": N, "weak_distance": {}}
        for label, xi in zip(labels, carriers):
            psi0, _ = build_band_data(env, xi, cfg.band, eps, V, basis)
            traj = evolve_full(psi0, V, vext, eps, times=times,
                               dt=cfg.member_dt(eps))
            _guard_mass(traj)
            _guard_borders(traj)
            avg = _avg_density(traj, w)
            B = band_hessian(V, basis, cfg.band, xi)
            ptraj = evolve_effective_mass(env, B, vext, times=times)
            _guard_mass(ptraj)
            pred = _avg_density(ptraj, w)
            row["weak_distance"][label] = weak_density_distance(
                avg, pred, cfg.L)
            row["dt"] = traj.dt
            row["dt_profile"] = ptraj.dt
            if eps == eps_min:
                payload["density"][label] = (env.x_axis(), avg, pred)
                payload["snapshots"][label] = (traj.fields[-1], times[-1])
        return row

    rows, failures, walls = _run_sweep(cfg, member, threads)
    payload["walls"] = walls
    report = ConvergenceReport("E1", cfg.to_dict(), rows, {}, [], failures)
    for label in labels:
        vals = [r["weak_distance"][label] for r in rows]
        eps_seq = [r["eps"] for r in rows]
        if len(vals) >= 1:
            report.checks.append(_check_bool(
                f"E1 weak distance decreasing ({label})",
                monotone_decreasing(vals)))
            report.checks.append(_check(
                f"E1 final weak distance ({label})", vals[-1], "<=", 0.05))
        try:
            report.fits[label] = fit_rate(zip(eps_seq, vals)).as_dict()
        except ValueError as exc:
            report.fits[label] = {"error": str(exc)}
    report.finalize()
    return report, payload


# -- E2: adiabatic decoupling ------------------------------------------------------


def band_multiplier_symbol(potential: PeriodicPotential,
                           basis: PlaneWaveBasis, n: int) -> MultiplierSymbol:
    """Fourier multiplier given by the periodic extension of one band function.

    Feeding this to evolve_multiplier integrates the decoupled band dynamics:
    the band energy replaces the cell Hamiltonian and the external potential
    acts on the slow scale only.  Eigenvalues are cached per quasi-momentum;
    a sweep grid revisits the same residues at every time step.
    """
    if basis.dim != 1:
        raise ValueError("band multiplier symbol is one dimensional")
    cache: dict = {}

    def fn(z):
        zf = np.mod(np.asarray(z, dtype=float), TWO_PI)
        uq, inv = np.unique(zf, return_inverse=True)
        vals = np.empty(uq.size)
        for i, zeta in enumerate(uq):
            key = round(float(zeta), 12)
            if key not in cache:
                cache[key] = float(
                    solve_fiber(potential, basis, zeta, n + 1).energies[n])
            vals[i] = cache[key]
        return vals[inv].reshape(np.shape(z))

    return MultiplierSymbol(fn, dim=1, growth=0, name=f"bloch-band-{n}")


def phase_aligned_distance(a: WaveField, b: WaveField) -> float:
    """L2 distance between two fields minimized over a global phase.

    Both split-step flows are unitary but accumulate O(dt^2/eps^6) phase
    error on a stiff problem; comparing modulo one overall phase keeps the
    band-leakage content and drops that integrator artifact.
    """
    na2, nb2 = a.norm() ** 2, b.norm() ** 2
    return math.sqrt(max(na2 + nb2 - 2.0 * abs(a.inner(b)), 0.0))


def _run_e2(cfg: ExperimentConfig, threads: int):
    V = build_potential(cfg.potential, cfg.dim)
    basis = PlaneWaveBasis(cfg.dim, default_cutoff(V))
    xi = cfg.carriers()[0]
    times = _snapshot_times(cfg.T)
    eps_min = min(cfg.eps)
    payload = {"density": {}, "snapshots": {}}
    sym = band_multiplier_symbol(V, basis, cfg.band)

    def member(eps):
        N = cfg.grid_size(eps)
        env = make_envelope(cfg.envelope["family"], cfg.L, N, eps,
                            width=cfg.envelope.get("width", 1.0))
        vext = build_vext(cfg.vext, cfg.L, cfg.dim)
        psi0, _ = build_band_data(env, xi, cfg.band, eps, V, basis)
        dt = cfg.member_dt(eps)
        traj = evolve_full(psi0, V, vext, eps, times=times, dt=dt)
        _guard_mass(traj)
        _guard_borders(traj)
        band = evolve_multiplier(psi0, sym, vext, eps, times=times, dt=dt)
        _guard_mass(band)
        dist = max(phase_aligned_distance(a, b)
                   for a, b in zip(traj.fields, band.fields))
        if eps == eps_min:
            payload["snapshots"]["final"] = (traj.fields[-1], times[-1])
        return {"eps": eps, "N": N, "dt": traj.dt, "band_flow_distance": dist}

    rows, failures, walls = _run_sweep(cfg, member, threads)
    payload["walls"] = walls
    report = ConvergenceReport("E2", cfg.to_dict(), rows, {}, [], failures)
    pairs = [(r["eps"], r["band_flow_distance"]) for r in rows]
    try:
        fitres = fit_rate(pairs)
        report.fits["band_flow_distance"] = fitres.as_dict()
        report.checks.append(_check(
            "E2 adiabatic decoupling rate", fitres.slope, ">=", 0.8))
    except ValueError as exc:
        report.fits["band_flow_distance"] = {"error": str(exc)}
        report.checks.append(_check_bool("E2 adiabatic decoupling rate", False))
    report.finalize()
    return report, payload


# -- E3: commutator residual -------------------------------------------------------


def _run_e3(cfg: ExperimentConfig, threads: int):
    V = build_potential(cfg.potential, cfg.dim)
    basis = PlaneWaveBasis(cfg.dim, default_cutoff(V))
    xi = cfg.carriers()[0]
    times = _snapshot_times(cfg.T)
    eps_min = min(cfg.eps)
    payload = {"density": {}, "snapshots": {}}

    def member(eps):
        N = cfg.grid_size(eps)
        env = make_envelope(cfg.envelope["family"], cfg.L, N, eps,
                            width=cfg.envelope.get("width", 1.0))
        vext = build_vext(cfg.vext, cfg.L, cfg.dim)
        wvals = _vext_values(cfg.vext, cfg.L, N, cfg.dim)
        psi0, _ = build_band_data(env, xi, cfg.band, eps, V, basis)
        traj = evolve_full(psi0, V, vext, eps, times=times,
                           dt=cfg.member_dt(eps))
        _guard_mass(traj)
        _guard_borders(traj)
        table = BandFiberTable(V, basis, cfg.band, cfg.L, N, eps)
        worst = 0.0
        for f in traj.fields:
            U = unfold_first_zone(f)
            res = band_residual(U, wvals, cfg.band, eps, V, basis, table=table)
            worst = max(worst, res.norm())
        if eps == eps_min:
            payload["snapshots"]["final"] = (traj.fields[-1], times[-1])
        return {"eps": eps, "N": N, "dt": traj.dt, "residual_sup": worst}

    rows, failures, walls = _run_sweep(cfg, member, threads)
    payload["walls"] = walls
    report = ConvergenceReport("E3", cfg.to_dict(), rows, {}, [], failures)
    pairs = [(r["eps"], r["residual_sup"]) for r in rows]
    try:
        fitres = fit_rate(pairs)
        report.fits["residual_sup"] = fitres.as_dict()
        report.checks.append(_check(
            "E3 commutator residual rate", fitres.slope, ">=", 0.8))
    except ValueError as exc:
        report.fits["residual_sup"] = {"error": str(exc)}
        report.checks.append(_check_bool("E3 commutator residual rate", False))
    report.finalize()
    return report, payload


# -- E4: concentration and invariance of the dispersive model ----------------------


def _kink_symbol() -> MultiplierSymbol:
    return MultiplierSymbol(
        lambda z: 1.0 - np.cos(z), dim=1, growth=2,
        critical=CriticalPoints([0.0, math.pi]), grad=np.sin,
        name="one-minus-cos",
    )


def _transport_symbol() -> MultiplierSymbol:
    return MultiplierSymbol(
        lambda z: np.asarray(z, dtype=float), dim=1, growth=1,
        critical=CriticalPoints([]), grad=lambda z: np.ones_like(z),
        name="transport",
    )


def _carrier_field(env: WaveField, xi0: float) -> WaveField:
    """Envelope times a lattice plane wave at the nearest carrier frequency."""
    j0 = round(xi0 * env.L / (TWO_PI * env.eps))
    x = env.x_axis()
    vals = env.values * np.exp(2j * np.pi * j0 * x / env.L)
    return env.with_values(vals / math.sqrt(float(np.sum(np.abs(vals) ** 2))
                                            * (env.L / env.N) ** env.dim))


_TRANSPORT_EPS = [0.125, 0.0625, 0.03125]


def _run_e4(cfg: ExperimentConfig, threads: int):
    xi0 = float(cfg.carriers()[0][0])
    times = _snapshot_times(cfg.T)
    eps_min = min(cfg.eps)
    L = cfg.L
    payload = {"density": {}, "snapshots": {}}

    def observable(xx, zz):
        return (smooth_cutoff(np.abs(xx - 0.5 * L) / (L / 8.0))
                * smooth_cutoff(np.abs(zz - xi0) / 0.6))

    def member(eps):
        N = cfg.grid_size(eps)
        env = make_envelope(cfg.envelope["family"], L, N, eps,
                            width=cfg.envelope.get("width", 1.0))
        u0 = _carrier_field(env, xi0)
        sym = _kink_symbol()
        vext = build_vext(cfg.vext, L, cfg.dim)
        traj = evolve_multiplier(u0, sym, vext, eps, times=times,
                                 dt=cfg.member_dt(eps))
        _guard_mass(traj)
        _guard_borders(traj)
        loc = localization_defect(traj, sym, margin=cfg.margin)
        inv = invariance_defect(traj, observable, cfg.shift, sym)
        if eps == eps_min:
            payload["snapshots"]["final"] = (traj.fields[-1], times[-1])
        return {"eps": eps, "N": N, "dt": traj.dt,
                "off_critical_mass": loc, "invariance_defect": inv}

    rows, failures, walls = _run_sweep(cfg, member, threads)

    # dispersion-only contrast: no critical set, local mass must drain
    transport = {"eps": [], "time_averaged_local_density": []}
    t_times = [k * 0.25 / 8.0 for k in range(9)]
    for eps in _TRANSPORT_EPS:
        N = cfg.grid_size(eps)
        env = make_envelope(cfg.envelope["family"], L, N, eps,
                            width=cfg.envelope.get("width", 1.0))
        u0 = _carrier_field(env, 1.0)
        traj = evolve_multiplier(u0, _transport_symbol(), None, eps,
                                 times=t_times)
        _guard_mass(traj)  # transport wraps the box; no border guard here
        transport["eps"].append(eps)
        transport["time_averaged_local_density"].append(
            time_averaged_local_density(traj, 0.5 * L - 2.0, 0.5 * L + 2.0))

    payload["walls"] = walls
    report = ConvergenceReport("E4", cfg.to_dict(), rows, {}, [], failures)
    report.extras["transport"] = transport
    if rows:
        small = min(rows, key=lambda r: r["eps"])
        report.checks.append(_check(
            "E4 off-critical mass at smallest eps",
            small["off_critical_mass"], "<=", 0.05))
    else:
        report.checks.append(_check_bool(
            "E4 off-critical mass at smallest eps", False))
    pairs = [(r["eps"], r["invariance_defect"]) for r in rows]
    try:
        fitres = fit_rate(pairs)
        report.fits["invariance_defect"] = fitres.as_dict()
        report.checks.append(_check(
            "E4 invariance defect rate", fitres.slope, ">=", 0.8))
    except ValueError as exc:
        report.fits["invariance_defect"] = {"error": str(exc)}
        report.checks.append(_check_bool("E4 invariance defect rate", False))
    tvals = transport["time_averaged_local_density"]
    report.checks.append(_check_bool(
        "E4 transport local density decreasing",
        all(b < a for a, b in zip(tvals, tvals[1:]))))
    report.checks.append(_check(
        "E4 transport final/initial local density",
        tvals[-1] / tvals[0], "<=", 0.5))
    report.finalize()
    return report, payload


# -- E5: two-band additivity --------------------------------------------------------


def _run_e5(cfg: ExperimentConfig, threads: int):
    V = build_potential(cfg.potential, cfg.dim)
    basis = PlaneWaveBasis(cfg.dim, default_cutoff(V))
    xi = cfg.carriers()[0]
    times = _snapshot_times(cfg.T)
    eps_min = min(cfg.eps)
    payload = {"density": {}, "snapshots": {}}

    def member(eps):
        N = cfg.grid_size(eps)
        env = make_envelope(cfg.envelope["family"], cfg.L, N, eps,
                            width=cfg.envelope.get("width", 1.0))
        vext = build_vext(cfg.vext, cfg.L, cfg.dim)
        psi_a, _ = build_band_data(env, xi, cfg.band, eps, V, basis)
        psi_b, _ = build_band_data(env, xi, cfg.band2, eps, V, basis)
        psi_s = psi_a.with_values(psi_a.values + psi_b.values)
        trajs = [evolve_full(p, V, vext, eps, times=times,
                             dt=cfg.member_dt(eps))
                 for p in (psi_a, psi_b, psi_s)]
        for t in trajs:
            _guard_mass(t)
            _guard_borders(t)
        # theta-average of the per-snapshot weak norms; averaging the signed
        # cross-term itself would alias its 1/eps^2-fast two-band beat phase
        # against the snapshot comb and come out non-monotone in eps
        w = triangle_weights(times)
        val = 0.0
        for wk, fa, fb, fs in zip(w, *(t.fields for t in trajs)):
            cross = (np.abs(fs.values) ** 2 - np.abs(fa.values) ** 2
                     - np.abs(fb.values) ** 2)
            val += wk * weak_density_distance(
                cross, np.zeros_like(cross), cfg.L)
        if eps == eps_min:
            payload["snapshots"]["final"] = (trajs[2].fields[-1], times[-1])
        return {"eps": eps, "N": N, "dt": trajs[0].dt, "cross_term": val}

    rows, failures, walls = _run_sweep(cfg, member, threads)
    payload["walls"] = walls
    report = ConvergenceReport("E5", cfg.to_dict(), rows, {}, [], failures)
    vals = [r["cross_term"] for r in rows]
    if vals:
        report.checks.append(_check_bool(
            "E5 cross term decreasing", monotone_decreasing(vals)))
        report.checks.append(_check(
            "E5 final cross term", vals[-1], "<=", 0.05))
    else:
        report.checks.append(_check_bool("E5 cross term decreasing", False))
    try:
        report.fits["cross_term"] = fit_rate(
            [(r["eps"], r["cross_term"]) for r in rows]).as_dict()
    except ValueError as exc:
        report.fits["cross_term"] = {"error": str(exc)}
    report.finalize()
    return report, payload


# -- E6: degenerate line, fiberwise profile ------------------------------------------


def _free_profile_defect(L: int, N: int, width: float, times) -> float:
    """Free fiber evolution against the closed-form spreading Gaussian."""
    x = np.arange(N) * (L / N)
    c = 0.5 * L
    w2 = width * width

    def closed(t):
        var = w2 + 1j * t
        amp = (math.pi * w2) ** -0.25 / np.sqrt(1.0 + 1j * t / w2)
        out = np.zeros(N, dtype=np.complex128)
        for s in range(-3, 4):
            out += np.exp(-((x - c + s * L) ** 2) / (2.0 * var))
        return amp * out

    u0 = closed(0.0)
    nrm = math.sqrt(float(np.sum(np.abs(u0) ** 2)) * L / N)
    M0 = DensityOperator.rank_one(u0, L)
    traj = evolve_heisenberg(M0, 1.0, None, times=times)
    worst = 0.0
    for t, M in zip(traj.times, traj.fields):
        ref = closed(t) / nrm
        worst = max(worst, float(np.max(np.abs(M.orbitals[0] - ref))))
    return worst


def _run_e6(cfg: ExperimentConfig, threads: int):
    if cfg.dim != 2:
        raise ValueError("E6 is a two-dimensional experiment")
    xi = cfg.carriers()[0]
    times = _snapshot_times(cfg.T)
    eps_min = min(cfg.eps)
    L = cfg.L
    width = cfg.envelope.get("width", 1.0)
    if cfg.vext is not None and cfg.vext.get("axis", 0) != 0:
        raise ValueError("E6 requires the external potential on axis 0")
    payload = {"density": {}, "snapshots": {}}

    def member(eps):
        N = cfg.grid_size(eps)
        a = make_envelope(cfg.envelope["family"], L, N, eps, width=width)
        x = a.x_axis()
        j2 = round(float(xi[1]) * L / (TWO_PI * eps))
        bvals = a.values * np.exp(2j * np.pi * j2 * x / L)
        vals = a.values[:, None] * bvals[None, :]
        vals /= math.sqrt(float(np.sum(np.abs(vals) ** 2)) * (L / N) ** 2)
        u0 = WaveField(L, eps, values=vals)
        sym = MultiplierSymbol(lambda z1, z2: 1.0 - np.cos(z1), dim=2,
                               growth=2, critical=CriticalLine(0, 0.0),
                               name="one-minus-cos-axis0")
        vext = build_vext(cfg.vext, L, 2)
        traj = evolve_multiplier(u0, sym, vext, eps, times=times,
                                 dt=cfg.member_dt(eps))
        _guard_mass(traj)
        _guard_borders(traj)
        w = triangle_weights(times)
        avg = _avg_density(traj, w)

        # limiting model: profile transported along the normal fiber only
        a1 = a.values / math.sqrt(float(np.sum(np.abs(a.values) ** 2))
                                  * (L / N))
        M0 = DensityOperator.rank_one(a1, L)
        if cfg.vext is None:
            hvext = None
        else:
            amp = float(cfg.vext.get("amplitude", 1.0))
            hvext = lambda t, z: amp * np.cos(TWO_PI * z / L)
        htraj = evolve_heisenberg(M0, 1.0, hvext, times=times)
        bsq = np.abs(a1) ** 2
        pred = None
        for wt, M in zip(w, htraj.fields):
            term = wt * M.density()[:, None] * bsq[None, :]
            pred = term if pred is None else pred + term
        val = weak_density_distance(avg, pred, L)
        if eps == eps_min:
            dx = L / N
            payload["density"]["marginal"] = (
                x, avg.sum(axis=1) * dx, pred.sum(axis=1) * dx)
            payload["snapshots"]["final"] = (traj.fields[-1], times[-1])
        return {"eps": eps, "N": N, "dt": traj.dt, "weak_distance": val}

    rows, failures, walls = _run_sweep(cfg, member, threads)
    payload["walls"] = walls
    report = ConvergenceReport("E6", cfg.to_dict(), rows, {}, [], failures)
    target = min(cfg.eps)
    hit = [r for r in rows if r["eps"] == target]
    if hit:
        report.checks.append(_check(
            f"E6 weak distance at eps={_fmt(target)}",
            hit[0]["weak_distance"], "<=", 0.07))
    else:
        report.checks.append(_check_bool(
            f"E6 weak distance at eps={_fmt(target)}", False))
    free_defect = _free_profile_defect(
        L, cfg.grid_size(target), width, times)
    report.extras["free_profile_defect"] = free_defect
    report.checks.append(_check(
        "E6 free fiber profile vs closed form", free_defect, "<=", 1e-6))
    report.finalize()
    return report, payload


# -- orchestration -------------------------------------------------------------------


_RUNNERS = {
    "E1": _run_e1,
    "E2": _run_e2,
    "E3": _run_e3,
    "E4": _run_e4,
    "E5": _run_e5,
    "E6": _run_e6,
}


def _write_artifacts(report: ConvergenceReport, payload: dict, out: Path,
                     wall_total: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    exp = report.experiment
    names = [f"{exp}_report.json", f"{exp}_metrics.csv"]

    density_files = {}
    for i, (label, (x, meas, pred)) in enumerate(
            sorted(payload.get("density", {}).items())):
        name = f"{exp}_density_{i}.csv"
        names.append(name)
        density_files[name] = label
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "measured", "predicted"])
            for xv, mv, pv in zip(x, meas, pred):
                w.writerow([f"{xv:.17g}", f"{mv:.17g}", f"{pv:.17g}"])
    if density_files:
        report.extras["density_files"] = density_files

    for label, (fld, t) in sorted(payload.get("snapshots", {}).items()):
        name = f"{exp}_{label}.bin"
        names.append(name)
        write_snapshot(out / name, fld, time=t,
                       description=f"{exp} snapshot ({label})")

    with open(out / f"{exp}_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "metric", "value"])
        for row in report.sweep:
            for key, val in sorted(row.items()):
                if key in ("eps", "N"):
                    continue
                if isinstance(val, dict):
                    for sub, v in sorted(val.items()):
                        w.writerow([f"{row['eps']:.17g}", f"{key} {sub}",
                                    f"{v:.17g}"])
                elif isinstance(val, float):
                    w.writerow([f"{row['eps']:.17g}", key, f"{val:.17g}"])
        tr = report.extras.get("transport")
        if tr:
            for e, v in zip(tr["eps"], tr["time_averaged_local_density"]):
                w.writerow([f"{e:.17g}", "transport_local_density",
                            f"{v:.17g}"])

    report.artifacts = sorted(names)
    report.to_json(out / f"{exp}_report.json")
    with open(out / f"{exp}_runtime.json", "w") as fh:
        json.dump({
            "experiment": exp,
            "wall_seconds_total": wall_total,
            "wall_seconds_members": payload.get("walls", {}),
        }, fh, indent=1, sort_keys=True)
        fh.write("\n")


def run_experiment(config, out_dir=None, threads: int = 1) -> ConvergenceReport:
    """Run a named experiment sweep and optionally write its artifacts."""
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    config.validate()
    runner = _RUNNERS[config.experiment]
    t0 = time.monotonic()
    report, payload = runner(config, threads)
    wall = time.monotonic() - t0
    if out_dir is not None:
        _write_artifacts(report, payload, Path(out_dir), wall)
    return report
