"""Phase-space diagnostics at fixed scale.

Wigner transforms on the half-frequency lattice, midpoint (Weyl)
quantization, oscillation tails, two-microlocal brackets relative to a
critical set of the dispersion symbol, extraction of the concentration
data (weights and finite-rank normal profiles), and the localization
and flow-invariance defects used by the convergence studies.

Everything here is a fixed-eps functional: limits exist only as sweep
trends, which the harness fits.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np
import scipy.fft as sfft

from . import blochdata
from .blochdata import (
    WaveField,
    _fftn,
    _ifftn,
    shifted_weak_limit,
    spectral_tail_fraction,
)
from .dynamics import DensityOperator, MultiplierSymbol, Trajectory

__all__ = [
    "CriticalPoints",
    "CriticalLine",
    "WignerGrid",
    "TwoMicroObservable",
    "TwoMicroReport",
    "wigner_transform",
    "wigner_pair",
    "weyl_apply",
    "oscillation_tail",
    "smooth_cutoff",
    "two_micro_bracket",
    "extract_two_micro_data",
    "localization_defect",
    "invariance_defect",
    "theta_weights",
    "local_mass_curve",
    "time_averaged_local_density",
]

TWO_PI = 2.0 * math.pi


def _fft_rows(a: np.ndarray, axis: int) -> np.ndarray:
    return sfft.fft(a, axis=axis, workers=blochdata._FFT_WORKERS)


def _ifft_rows(a: np.ndarray, axis: int) -> np.ndarray:
    return sfft.ifft(a, axis=axis, workers=blochdata._FFT_WORKERS)


# -- critical-set descriptors ------------------------------------------------------


@dataclass(frozen=True)
class CriticalPoints:
    """Finite critical set; periodic=True folds distances into one cell."""

    points: tuple
    periodic: bool = True

    def __init__(self, points, periodic: bool = True):
        pts = tuple(tuple(float(c) for c in np.atleast_1d(p)) for p in points)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "periodic", bool(periodic))

    @property
    def empty(self) -> bool:
        return len(self.points) == 0

    def distance(self, xi: np.ndarray) -> np.ndarray:
        """Distance from points xi (P, d) to the set."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if self.empty:
            return np.full(xi.shape[0], np.inf)
        best = None
        for p in self.points:
            diff = xi - np.asarray(p)
            if self.periodic:
                diff = diff - TWO_PI * np.round(diff / TWO_PI)
            d = np.sqrt(np.sum(diff**2, axis=1))
            best = d if best is None else np.minimum(best, d)
        return best

    def project(self, xi: np.ndarray) -> np.ndarray:
        """Nearest point of the set, in the translate closest to xi."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if self.empty:
            raise ValueError("empty critical set has no projection")
        out = None
        best = None
        for p in self.points:
            diff = xi - np.asarray(p)
            if self.periodic:
                diff = diff - TWO_PI * np.round(diff / TWO_PI)
            d = np.sum(diff**2, axis=1)
            proj = xi - diff
            if best is None:
                best, out = d, proj
            else:
                take = d < best
                best = np.where(take, d, best)
                out = np.where(take[:, None], proj, out)
        return out


@dataclass(frozen=True)
class CriticalLine:
    """Affine critical manifold {xi_axis = value} in two dimensions."""

    axis: int
    value: float
    periodic: bool = True

    def distance(self, xi: np.ndarray) -> np.ndarray:
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        diff = xi[:, self.axis] - self.value
        if self.periodic:
            diff = diff - TWO_PI * np.round(diff / TWO_PI)
        return np.abs(diff)

    def project(self, xi: np.ndarray) -> np.ndarray:
        xi = np.atleast_2d(np.asarray(xi, dtype=float)).copy()
        diff = xi[:, self.axis] - self.value
        if self.periodic:
            diff = diff - TWO_PI * np.round(diff / TWO_PI)
        xi[:, self.axis] -= diff
        return xi


def _project_scalar(critical, xi_flat: np.ndarray) -> np.ndarray:
    """sigma(xi) for one-dimensional xi values, any array shape."""
    shape = xi_flat.shape
    pts = xi_flat.reshape(-1, 1)
    return critical.project(pts)[:, 0].reshape(shape)


# -- cutoff ------------------------------------------------------------------------


def smooth_cutoff(r):
    """Radial bump: 1 on r<=1, 0 on r>=2, quintic C^2 transition between."""
    r = np.asarray(r, dtype=float)
    t = np.clip(r - 1.0, 0.0, 1.0)
    return 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


# -- Wigner transform --------------------------------------------------------------


@dataclass
class WignerGrid:
    """Discrete phase-space density on coarse x times the half-lattice xi."""

    L: int
    eps: float
    x: np.ndarray
    xi: np.ndarray
    values: np.ndarray
    norm_sq: float

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dxi(self) -> float:
        return float(self.xi[1] - self.xi[0])

    def mass(self) -> float:
        return float(np.sum(self.values) * self.dx * self.dxi)

    def marginal_position(self) -> np.ndarray:
        """xi-integral, the position density on the coarse grid."""
        return np.sum(self.values, axis=1) * self.dxi

    def marginal_momentum(self) -> np.ndarray:
        """x-integral, the scaled momentum density on the half-lattice."""
        return np.sum(self.values, axis=0) * self.dx

    def pair(self, a_fn, shift=None) -> float:
        """<W, a>, with an optional per-column position offset shift(xi)."""
        xi_row = self.xi[None, :]
        x_col = self.x[:, None]
        if shift is None:
            sample = a_fn(x_col + 0.0 * xi_row, xi_row + 0.0 * x_col)
        else:
            off = np.asarray(shift(self.xi))[None, :]
            sample = a_fn(x_col + off, xi_row + 0.0 * x_col)
        return float(np.sum(sample * self.values) * self.dx * self.dxi)

    def to_csv(self, path) -> None:
        nx, nxi = self.values.shape
        table = np.column_stack([
            np.repeat(self.x, nxi),
            np.tile(self.xi, nx),
            self.values.ravel(),
        ])
        np.savetxt(path, table, fmt="%.17g", delimiter=",",
                   header="x,xi,W", comments="")


def _occupied_bandwidth(f: WaveField, tail_tol: float = 1e-10) -> float:
    """Smallest |Xi| radius outside which the spectral mass fraction is
    below tail_tol.  Mass-based, so harmless amplitude dust (periodization
    seams around 1e-11 relative) does not inflate the bandwidth."""
    spec_sq = np.abs(f.spectrum.ravel()) ** 2
    total = float(np.sum(spec_sq))
    if total == 0.0:
        return 0.0
    xi = f.xi_axis()
    if f.dim == 1:
        r = np.abs(xi)
    else:
        r = np.hypot(xi[:, None], xi[None, :]).ravel()
    order = np.argsort(r)
    tail = np.cumsum(spec_sq[order][::-1])[::-1]
    material = tail > tail_tol * total
    if not np.any(material):
        return 0.0
    return float(r[order][material][-1])


def _coarse_count(f: WaveField, nx) -> int:
    if nx is not None:
        nx = int(nx)
        if nx < 2 or f.N % nx:
            raise ValueError("coarse grid size must divide N")
        return nx
    # the correlation rows carry twice the field's index bandwidth; the
    # coarse grid must resolve that for the subsampled x-sums to be exact
    need = int(math.ceil(2.0 * _occupied_bandwidth(f) * f.L / TWO_PI)) + 8
    nx = f.N
    while nx % 2 == 0 and nx // 2 >= need and nx // 2 >= 64:
        nx //= 2
    return nx


def wigner_transform(f: WaveField, eps: float | None = None, nx=None) -> WignerGrid:
    """Scaled Wigner transform on the half-frequency lattice xi_j = pi eps j / L.

    Correlation rows f(x - u) conj(f(x + u)) over the full u grid, one FFT
    per coarse x row.  The xi grid spans half the scaled Nyquist range, so
    the occupied spectrum must fit inside that or the midpoint frequencies
    alias; this is checked and rejected with the grid size that would work.

    Periodization caveat: a state localized at x = c interferes with its
    own periodic image, leaving a ghost that oscillates at the top of the
    xi grid with local weight |f(x + L/2)|^2 (the antipodal density).  The
    ghost carries no mass and cancels in both marginals, but pointwise
    comparisons against real-line formulas are only meaningful where the
    antipodal density is negligible.
    """
    if eps is None:
        eps = f.eps
    elif abs(eps - f.eps) > 1e-15:
        raise ValueError("eps argument disagrees with the field")
    if f.dim != 1:
        raise ValueError("full phase-space grids are one-dimensional only")
    N, L = f.N, f.L
    occ = _occupied_bandwidth(f)
    half = math.pi * N / (2.0 * L)
    if occ > half:
        need = 1 << int(math.ceil(2.0 * occ * L / math.pi)).bit_length()
        raise ValueError(
            f"occupied bandwidth {occ:.3g} exceeds half the Nyquist range "
            f"{half:.3g}; the half-lattice would alias, need N >= {need}"
        )
    nx = _coarse_count(f, nx)
    vals = f.values
    p = (np.arange(nx) * (N // nx))[:, None]
    m = np.arange(N)[None, :]
    corr = vals[(p - m) % N] * np.conj(vals[(p + m) % N])
    w = _ifft_rows(corr, axis=1) * (L / (math.pi * eps))
    im = float(np.max(np.abs(w.imag)))
    scale = max(float(np.max(np.abs(w.real))), 1e-300)
    if im > 1e-12 * scale:
        raise RuntimeError(f"Wigner values not real: residue {im:.3e}")
    w = np.fft.fftshift(w.real, axes=1)
    xi = math.pi * eps / L * (np.arange(N) - N // 2)
    grid = WignerGrid(L, eps, np.arange(nx) * (L / nx), xi, w, f.norm() ** 2)
    gap = abs(grid.mass() - grid.norm_sq)
    if gap > 1e-8 * max(1.0, grid.norm_sq):
        raise RuntimeError(f"Wigner mass defect {gap:.3e}")
    return grid


def wigner_pair(f: WaveField, a_fn, eps: float | None = None, nx=None,
                shift=None) -> float:
    """<W_f, a> = sum a(x_i, xi_j) W[i, j] dx dxi.

    a_fn takes broadcast arrays (x, xi).  shift, if given, maps the xi
    column values to per-column position offsets (flow transport), so a
    pairing against a composed with the flow reuses one code path.
    """
    return wigner_transform(f, eps, nx=nx).pair(a_fn, shift=shift)


# -- Weyl quantization -------------------------------------------------------------


def weyl_apply(a_fn, eps: float, f: WaveField, row_tol: float = 1e-13,
               check_support: bool = True, chunk: int = 512) -> WaveField:
    """Midpoint quantization: g_hat(K) = (1/L) sum_Q a_hat(K-Q, eps(K+Q)/2) f_hat(Q).

    The symbol is split over its x-frequencies kappa; each row acts as the
    exact multiplier a_hat_kappa(eps (Xi + kappa/2)) followed by
    multiplication with e^{i kappa x}, which reproduces the spectral
    formula above term by term.  Rows below row_tol (relative) are
    dropped, lossless for smooth symbols.  Real symbols give a
    self-adjoint operator through the kappa <-> -kappa pairing.

    The symbol is sampled on x times the extended half-lattice
    eps pi h / L, |h| <= 3N/2, in column chunks to bound memory.
    """
    if f.dim != 1:
        raise ValueError("Weyl quantization implemented in one dimension only")
    N, L = f.N, f.L
    x = f.x_axis()
    hh = np.arange(-3 * N // 2, 3 * N // 2)
    zeta = eps * math.pi / L * hh
    ncols = zeta.size
    n_guard = max(2, N // 64)

    def sample(lo: int, hi: int) -> np.ndarray:
        block = np.asarray(a_fn(x[:, None], zeta[None, lo:hi]),
                           dtype=np.complex128)
        if block.shape != (N, hi - lo):
            block = np.broadcast_to(block, (N, hi - lo))
        return block

    # pass one: per-kappa row amplitudes and the support certificates
    row_amp = np.zeros(N)
    col_amp = np.zeros(ncols)
    seam_amp = 0.0
    x_var = 0.0
    xi_var = 0.0
    amax = 0.0
    for lo in range(0, ncols, chunk):
        block = sample(lo, min(lo + chunk, ncols))
        babs = np.abs(block)
        amax = max(amax, float(np.max(babs)))
        col_amp[lo:lo + block.shape[1]] = np.max(babs, axis=0)
        seam_amp = max(seam_amp, float(np.max(babs[:n_guard])),
                       float(np.max(babs[-n_guard:])))
        x_var = max(x_var, float(np.max(np.abs(block - block[:1, :]))))
        xi_var = max(xi_var, float(np.max(np.abs(block - block[:, :1]))))
        rows = _fft_rows(block, axis=0) / N
        np.maximum(row_amp, np.max(np.abs(rows), axis=1), out=row_amp)
    if amax == 0.0:
        return f.with_values(np.zeros(N, dtype=np.complex128))
    if check_support:
        # 1e-6 relative: catches genuinely seam-crossing supports while
        # letting far Gaussian tails through
        if x_var > 1e-6 * amax and seam_amp > 1e-6 * amax:
            raise ValueError(
                "symbol support reaches the box seam; wrap-around would "
                "corrupt the midpoint rule"
            )
        # symbols built from periodic projections recur near the extended
        # edge, which is harmless; reject only supports the primal grid
        # frequencies never see at all
        primal = np.abs(hh) <= N
        if xi_var > 1e-6 * amax and float(np.max(col_amp[primal])) < 1e-6 * amax:
            raise ValueError(
                "symbol support lies beyond the grid's frequency range; "
                "enlarge the grid or move the observable"
            )

    # pass two: keep only the material kappa rows
    keep = np.nonzero(row_amp > row_tol * float(np.max(row_amp)))[0]
    kept = np.zeros((keep.size, ncols), dtype=np.complex128)
    for lo in range(0, ncols, chunk):
        hi = min(lo + chunk, ncols)
        kept[:, lo:hi] = (_fft_rows(sample(lo, hi), axis=0) / N)[keep]

    jj = np.fft.fftfreq(N, 1.0 / N).astype(np.int64)
    F = _fft_rows(f.values, axis=0)
    out = np.zeros(N, dtype=np.complex128)
    base = 3 * N // 2
    for k, idx in enumerate(keep):
        m = int(jj[idx])
        mult = kept[k, base + 2 * jj + m]
        out += np.exp((1j * TWO_PI * m / L) * x) * _ifft_rows(mult * F, axis=0)
    return f.with_values(out)


# -- oscillation scale -------------------------------------------------------------


def oscillation_tail(f: WaveField, eps: float | None = None, radii=None) -> np.ndarray:
    """Spectral mass above |Xi| = R / eps for each requested radius R."""
    if eps is None:
        eps = f.eps
    if radii is None:
        radii = [0.5, 1.0, 2.0, 4.0, 8.0]
    nsq = f.norm() ** 2
    return np.array(
        [spectral_tail_fraction(f, float(R) / eps) * nsq for R in radii]
    )


# -- two-microlocal observables and brackets ---------------------------------------


class TwoMicroObservable:
    """Symbol a(x, xi, eta), homogeneous of degree zero in eta beyond R0.

    core(x, xi, eta) evaluates inside |eta| <= R0; tail(x, xi, omega) is the
    profile at infinity, used with omega = eta/|eta| beyond R0.  The handoff
    is checked: at |eta| in {2 R0, 4 R0} the core rule must already equal
    the tail value to 1e-12 on a deterministic sample.
    """

    def __init__(self, core, tail, R0: float = 1.0, support=None,
                 check: bool = True):
        self.core = core
        self.tail = tail
        self.R0 = float(R0)
        self.support = support
        if check:
            defect = self.homogeneity_defect()
            if defect > 1e-12:
                raise ValueError(f"eta-homogeneity defect {defect:.3e} beyond R0")

    def homogeneity_defect(self) -> float:
        xs = np.array([0.0, 0.7, -1.3])
        xis = np.array([0.0, 0.4, -0.9])
        worst = 0.0
        for r in (2.0 * self.R0, 4.0 * self.R0):
            for om in (1.0, -1.0):
                a = np.asarray(self.core(xs, xis, r * om * np.ones_like(xs)),
                               dtype=float)
                b = np.asarray(self.tail(xs, xis, om * np.ones_like(xs)),
                               dtype=float)
                worst = max(worst, float(np.max(np.abs(a - b))))
        return worst

    def eval(self, x, xi, eta) -> np.ndarray:
        x, xi, eta = np.broadcast_arrays(
            np.asarray(x, dtype=float),
            np.asarray(xi, dtype=float),
            np.asarray(eta, dtype=float),
        )
        out = np.empty(x.shape, dtype=float)
        inner = np.abs(eta) <= self.R0
        if np.any(inner):
            out[inner] = np.asarray(
                self.core(x[inner], xi[inner], eta[inner]), dtype=float
            )
        rest = ~inner
        if np.any(rest):
            out[rest] = np.asarray(
                self.tail(x[rest], xi[rest], np.sign(eta[rest])), dtype=float
            )
        return out


def two_micro_bracket(f: WaveField, a: TwoMicroObservable, critical,
                      eps: float | None = None, R: float = 8.0,
                      delta: float = 0.5):
    """Split (op(a_eps) f, f) into the compact-eta and infinity parts.

    compact: a(x, xi, eta) chi(|eta| / R) at eta = (xi - sigma(xi)) / eps.
    infinity: a (1 - chi(|eta| / R)) chi(|xi - sigma(xi)| / delta).
    The scales must separate, R eps < delta, or the split is meaningless
    and the call is rejected.
    """
    if eps is None:
        eps = f.eps
    if f.dim != 1:
        raise ValueError("brackets implemented in one dimension only")
    if R * eps >= delta:
        raise ValueError(
            f"scale separation lost: R*eps = {R * eps:.3g} >= delta = {delta:.3g}"
        )

    def compact_symbol(x, xi):
        xb, xib = np.broadcast_arrays(np.asarray(x, float), np.asarray(xi, float))
        eta = (xib - _project_scalar(critical, xib)) / eps
        return a.eval(xb, xib, eta) * smooth_cutoff(np.abs(eta) / R)

    def infinity_symbol(x, xi):
        xb, xib = np.broadcast_arrays(np.asarray(x, float), np.asarray(xi, float))
        off = xib - _project_scalar(critical, xib)
        eta = off / eps
        far = 1.0 - smooth_cutoff(np.abs(eta) / R)
        near = smooth_cutoff(np.abs(off) / delta)
        return a.eval(xb, xib, eta) * far * near

    cv = f.inner(weyl_apply(compact_symbol, eps, f))
    iv = f.inner(weyl_apply(infinity_symbol, eps, f))
    return float(cv.real), float(iv.real)


# -- concentration data extraction ---------------------------------------------------


@dataclass
class TwoMicroReport:
    """Per-eps estimate of the concentration data over a critical set."""

    eps: float
    norm_sq: float
    compact_mass: float
    infinity_mass: float
    offband_mass: float
    nu_samples: list
    operators: list
    warnings: list = dataclass_field(default_factory=list)

    def to_json(self, path=None, include_orbitals: bool = False):
        ops = []
        for M in self.operators:
            entry = {
                "trace": M.trace(),
                "rank": M.rank,
                "weights": [float(w) for w in M.weights],
                "nz": M.nz,
                "L": M.L,
            }
            if include_orbitals:
                entry["orbitals_re"] = M.orbitals.real.tolist()
                entry["orbitals_im"] = M.orbitals.imag.tolist()
            ops.append(entry)
        doc = {
            "eps": self.eps,
            "norm_sq": self.norm_sq,
            "compact_mass": self.compact_mass,
            "infinity_mass": self.infinity_mass,
            "offband_mass": self.offband_mass,
            "nu_samples": self.nu_samples,
            "operators": ops,
            "warnings": list(self.warnings),
        }
        if path is not None:
            with open(path, "w") as fh:
                json.dump(doc, fh, indent=1, sort_keys=True)
                fh.write("\n")
        return doc


def _tube_mask(f: WaveField, critical, delta: float) -> np.ndarray:
    xi_ax = f.xi_axis()
    if f.dim == 1:
        pts = (f.eps * xi_ax).reshape(-1, 1)
        return critical.distance(pts) <= delta
    g1, g2 = np.meshgrid(f.eps * xi_ax, f.eps * xi_ax, indexing="ij")
    pts = np.stack([g1.ravel(), g2.ravel()], axis=-1)
    return (critical.distance(pts) <= delta).reshape(g1.shape)


def _point_report(f: WaveField, critical: CriticalPoints, eps, delta,
                  weight_floor) -> TwoMicroReport:
    if f.dim != 1:
        raise ValueError("point extraction implemented in one dimension only")
    nsq = f.norm() ** 2
    spec_sq = np.abs(f.spectrum) ** 2 / f.L
    infinity = float(np.sum(spec_sq[~_tube_mask(f, critical, delta)]))
    occ = _occupied_bandwidth(f)
    warnings = []
    samples, operators = [], []
    seen = set()
    for p in critical.points:
        kmax = int(math.ceil((eps * occ + delta) / TWO_PI)) + 1
        for k in range(-kmax, kmax + 1):
            carrier = p[0] + TWO_PI * k
            key = round(carrier * f.L / (TWO_PI * eps))
            if key in seen or abs(carrier) > eps * occ + delta:
                continue
            seen.add(key)
            prof = shifted_weak_limit(f, [carrier], eps=eps)
            w = prof.norm() ** 2
            if w <= weight_floor * nsq:
                continue
            near_cut = spectral_tail_fraction(prof, 0.5 * eps**-0.5)
            if near_cut > 1e-3:
                warnings.append(
                    f"profile at xi={carrier:.4g} carries mass near the "
                    f"weak-limit cutoff (fraction {near_cut:.2e}); the data "
                    "does not oscillate at scale eps"
                )
            samples.append({"cell": [float(carrier)], "weight": float(w)})
            operators.append(
                DensityOperator.rank_one(prof.values, f.L, weight=float(w))
            )
    compact = float(sum(s["weight"] for s in samples))
    return TwoMicroReport(
        eps=eps,
        norm_sq=float(nsq),
        compact_mass=compact,
        infinity_mass=infinity,
        offband_mass=float(nsq - compact - infinity),
        nu_samples=samples,
        operators=operators,
        warnings=warnings,
    )


def _cell_windows(L: int, n: int, ncells: int):
    """Smooth partition of unity along the line, cos^2 overlap, exact sum."""
    v = np.arange(n) * (L / n)
    spacing = L / ncells
    out = []
    for c in range(ncells):
        center = (c + 0.5) * spacing
        d = np.abs(v - center)
        d = np.minimum(d, L - d)
        p = np.where(d < spacing, np.cos(math.pi * d / (2 * spacing)) ** 2, 0.0)
        out.append(p)
    total = np.sum(out, axis=0)
    return [p / total for p in out], v


def _line_report(f: WaveField, critical: CriticalLine, eps, delta,
                 weight_floor, ncells) -> TwoMicroReport:
    if f.dim != 2:
        raise ValueError("line extraction needs a two-dimensional field")
    nsq = f.norm() ** 2
    n_ax = critical.axis
    t_ax = 1 - n_ax
    spec_sq = np.abs(f.spectrum) ** 2 / f.L**2
    mask = _tube_mask(f, critical, delta)
    infinity = float(np.sum(spec_sq[~mask]))
    tube_mass = float(np.sum(spec_sq[mask]))

    # dominant tangential carrier of the in-tube content
    tang_mass = np.sum(np.where(mask, spec_sq, 0.0), axis=n_ax)
    xi_ax = f.xi_axis()
    sigma_t = float(eps * xi_ax[int(np.argmax(tang_mass))])

    # shift both carriers off, then keep only the delta-tube content
    x = f.x_axis()
    grids = np.meshgrid(x, x, indexing="ij")
    phase = np.exp(-1j * (sigma_t / eps) * grids[t_ax])
    if critical.value != 0.0:
        phase = phase * np.exp(-1j * (critical.value / eps) * grids[n_ax])
    g_spec = _fftn(f.values * phase) * (f.L / f.N) ** 2
    keep_shape = [1, 1]
    keep_shape[n_ax] = f.N
    g_spec = g_spec * (np.abs(eps * xi_ax) <= delta).reshape(keep_shape)

    # after the shift the tangential spectrum must be slow, or the single
    # dominant carrier missed part of the tube content
    t_profile = np.sum(np.abs(g_spec) ** 2, axis=n_ax) / f.L**2
    captured = float(np.sum(t_profile[np.abs(eps * xi_ax) <= delta]))
    warnings = []
    if tube_mass > weight_floor and captured < 0.5 * tube_mass:
        warnings.append(
            "tangential carrier captured under half the tube mass; the "
            "concentration is not carried by a single modulation"
        )
    g = _ifftn(g_spec) * (f.N / f.L) ** 2

    windows, _ = _cell_windows(f.L, f.N, ncells)
    dxt = f.L / f.N
    dxn = f.L / f.N
    samples, operators = [], []
    g_norm = g if n_ax == 0 else g.T  # rows indexed by the normal coordinate
    for c, p in enumerate(windows):
        kern = (g_norm * p[None, :]) @ g_norm.conj().T * dxt
        w = float(np.trace(kern).real * dxn)
        if w <= weight_floor * nsq:
            continue
        evals, evecs = np.linalg.eigh(kern * dxn)
        order = np.argsort(evals)[::-1]
        top = float(evals[order[0]])
        keep = [i for i in order if evals[i] > 1e-6 * top]
        weights = evals[keep]
        orbs = evecs[:, keep].T / math.sqrt(dxn)
        sigma = [0.0, 0.0]
        sigma[n_ax] = critical.value
        sigma[t_ax] = sigma_t
        samples.append({
            "cell": {"v": float((c + 0.5) * f.L / ncells), "sigma": sigma},
            "weight": w,
        })
        operators.append(DensityOperator(f.L, weights, orbs))
    compact = float(sum(s["weight"] for s in samples))
    return TwoMicroReport(
        eps=eps,
        norm_sq=float(nsq),
        compact_mass=compact,
        infinity_mass=infinity,
        offband_mass=float(nsq - compact - infinity),
        nu_samples=samples,
        operators=operators,
        warnings=warnings,
    )


def extract_two_micro_data(f: WaveField, critical, eps: float | None = None,
                           delta: float = 0.5, weight_floor: float = 1e-8,
                           ncells: int = 8) -> TwoMicroReport:
    """Estimate the concentration measure samples and normal profiles.

    Point set: one weight per 2 pi translate of each point, the weight the
    squared norm of the shifted low-frequency profile, the operator the
    rank-one projector onto it.  Line: the dominant tangential carrier is
    shifted off, the delta-tube content is split over smooth position
    cells along the line, and each cell gets the finite-rank operator of
    its windowed normal correlation kernel.
    """
    if eps is None:
        eps = f.eps
    if isinstance(critical, CriticalPoints):
        if critical.empty:
            raise ValueError("empty critical set: nothing to extract")
        report = _point_report(f, critical, eps, delta, weight_floor)
    elif isinstance(critical, CriticalLine):
        report = _line_report(f, critical, eps, delta, weight_floor, ncells)
    else:
        raise TypeError("critical must be CriticalPoints or CriticalLine")
    under = spectral_tail_fraction(f, 0.9 * math.pi * f.N / f.L)
    if under > 1e-3:
        report.warnings.append(
            f"grid under-resolves the data: spectral fraction {under:.3e} "
            "near Nyquist"
        )
    return report


# -- time-averaged defects -----------------------------------------------------------


def theta_weights(times) -> np.ndarray:
    """Fixed smooth time window, sin^2 profile, unit mass under trapezoid."""
    t = np.asarray([float(v) for v in times])
    if len(t) < 3:
        raise ValueError("need at least three snapshot times to average")
    span = t[-1] - t[0]
    if span == 0:
        raise ValueError("degenerate time window")
    theta = np.sin(math.pi * (t - t[0]) / span) ** 2
    w = np.zeros_like(theta)
    dt = np.diff(t)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    w = theta * w
    return w / np.sum(w)


def localization_defect(traj: Trajectory, symbol: MultiplierSymbol,
                        margin: float = 0.5) -> float:
    """Time-averaged spectral mass fraction at distance > margin from the
    critical set of the dispersion symbol."""
    critical = symbol.critical
    if critical is None:
        raise ValueError("symbol carries no critical set descriptor")
    w = theta_weights(traj.times)
    total = 0.0
    for wt, f in zip(w, traj.fields):
        if wt == 0.0:
            continue
        spec_sq = np.abs(f.spectrum) ** 2
        far = ~_tube_mask(f, critical, margin)
        mass = float(np.sum(spec_sq))
        if mass == 0.0:
            continue
        total += wt * float(np.sum(spec_sq[far])) / mass
    return total


def invariance_defect(traj: Trajectory, a_fn, s: float,
                      symbol: MultiplierSymbol, nx=None) -> float:
    """|integral theta(t) [<W_t, a o flow_s> - <W_t, a>] dt|.

    flow_s(x, xi) = (x + s grad lambda(xi), xi); the pairing evaluates the
    observable on the Wigner grid with per-column offsets, so s = 0 or a
    flow supported where grad lambda vanishes gives exactly zero.
    """
    w = theta_weights(traj.times)

    def shift(xi_vals):
        g = symbol.gradient(np.asarray(xi_vals).reshape(-1, 1))
        return s * g[:, 0]

    total = 0.0
    for wt, f in zip(w, traj.fields):
        if wt == 0.0:
            continue
        grid = wigner_transform(f, nx=nx)
        total += wt * (grid.pair(a_fn, shift=shift) - grid.pair(a_fn))
    return abs(total)


def local_mass_curve(traj: Trajectory, lo: float, hi: float) -> np.ndarray:
    """Mass fraction in the slab lo <= x_1 <= hi, one value per snapshot."""
    out = []
    for f in traj.fields:
        x = f.x_axis()
        sel = (x >= lo) & (x <= hi)
        dens = np.abs(f.values) ** 2
        frac = np.sum(dens[sel]) / np.sum(dens)
        out.append(float(frac))
    return np.array(out)


def time_averaged_local_density(traj: Trajectory, lo: float, hi: float) -> float:
    """theta-averaged mass fraction in the slab; decays under dispersion."""
    curve = local_mass_curve(traj, lo, hi)
    return float(np.sum(theta_weights(traj.times) * curve))
