"""Band calculus: gradients, Hessians, and critical-set detection.

For a simple band rho_n(xi) the derivative of the fiber matrix is diagonal,
d H / d xi_a = diag(xi_a + 2 pi k_a), which gives the gradient directly from
the eigenvector (Hellmann-Feynman) and the Hessian from second-order
perturbation theory over the remaining eigenpairs.  Critical points are found
by a damped Newton iteration seeded from coarse-grid minima of |grad rho|;
points whose Hessian is rank deficient are grouped into critical-manifold
candidates instead of being reported as isolated.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .planewave import (
    BlochFiber,
    PeriodicPotential,
    PlaneWaveBasis,
    fold,
    solve_fiber,
)

__all__ = [
    "band_gradient",
    "band_hessian",
    "BandOracle",
    "BlochBandOracle",
    "CallableBandOracle",
    "CriticalPoint",
    "ManifoldCandidate",
    "CriticalSearchResult",
    "find_critical_points",
    "CriticalPoints",
    "CriticalLine",
    "fold",
    "compute_band_grid",
    "BandGrid",
    "write_bands_csv",
    "write_critical_json",
]

TWO_PI = 2.0 * math.pi


def band_gradient(fiber: BlochFiber, n: int) -> np.ndarray:
    """grad rho_n(xi) = sum_k (xi + 2 pi k) |c_{k,n}|^2 for a simple band."""
    fiber.require_simple(n)
    w = np.abs(fiber.coefficient(n)) ** 2
    freq = fiber.xi[None, :] + TWO_PI * fiber.basis.lattice
    return freq.T @ w


def band_hessian(
    potential: PeriodicPotential,
    basis: PlaneWaveBasis,
    n: int,
    xi,
    fiber: BlochFiber | None = None,
) -> np.ndarray:
    """Second-derivative matrix of rho_n via second-order perturbation theory.

    d2 rho_n = I + 2 Re sum_{m != n} g_m* (x) g_m / (rho_n - rho_m), where
    g_m[a] = <phi_m, (xi_a + 2 pi k_a) phi_n>.  Needs the full truncated
    spectrum; the band must be simple.
    """
    if fiber is None or fiber.n_bands < basis.size:
        fiber = solve_fiber(potential, basis, xi, n_bands=basis.size)
    fiber.require_simple(n)
    d = basis.dim
    c = fiber.coefficient(n)
    freq = fiber.xi[None, :] + TWO_PI * basis.lattice  # (size, d)
    ac = freq * c[:, None]  # columns (xi_a + 2 pi k_a) c_k
    g = fiber.vectors.conj().T @ ac  # g[m, a]
    wgt = np.zeros(fiber.n_bands)
    denom = fiber.energies[n] - fiber.energies
    mask = np.arange(fiber.n_bands) != n
    wgt[mask] = 1.0 / denom[mask]
    pert = np.einsum("m,ma,mb->ab", wgt, g.conj(), g)
    H = np.eye(d) + 2.0 * pert.real
    return 0.5 * (H + H.T)


# -- band oracles -------------------------------------------------------------


class BandOracle:
    """Scalar band lambda(xi) with derivatives; base for the Newton search."""

    dim: int

    def value(self, xi) -> float:
        raise NotImplementedError

    def gradient(self, xi) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, xi) -> np.ndarray:
        raise NotImplementedError

    def is_simple(self, xi) -> bool:
        return True


class BlochBandOracle(BandOracle):
    """Band n of a periodic potential through the plane-wave fiber solver."""

    def __init__(self, potential: PeriodicPotential, basis: PlaneWaveBasis, n: int):
        self.potential = potential
        self.basis = basis
        self.n = n
        self.dim = basis.dim

    def _fiber(self, xi, full: bool = False) -> BlochFiber:
        m = self.basis.size if full else min(self.n + 2, self.basis.size)
        return solve_fiber(self.potential, self.basis, xi, n_bands=m)

    def value(self, xi) -> float:
        return float(self._fiber(xi).energies[self.n])

    def gradient(self, xi) -> np.ndarray:
        return band_gradient(self._fiber(xi), self.n)

    def hessian(self, xi) -> np.ndarray:
        return band_hessian(self.potential, self.basis, self.n, xi)

    def is_simple(self, xi) -> bool:
        return self._fiber(xi).is_simple(self.n)


class CallableBandOracle(BandOracle):
    """Closed-form band; missing derivatives fall back to finite differences.

    Central differences use h=1e-4 for the gradient and a five-point stencil
    with h=1e-3 for second derivatives.
    """

    def __init__(self, fn, dim: int, grad=None, hess=None):
        self.fn = fn
        self.dim = dim
        self._grad = grad
        self._hess = hess

    def value(self, xi) -> float:
        return float(self.fn(np.atleast_1d(np.asarray(xi, dtype=float))))

    def gradient(self, xi) -> np.ndarray:
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        if self._grad is not None:
            return np.asarray(self._grad(xi), dtype=float)
        h = 1e-4
        g = np.zeros(self.dim)
        for a in range(self.dim):
            e = np.zeros(self.dim)
            e[a] = h
            g[a] = (self.value(xi + e) - self.value(xi - e)) / (2 * h)
        return g

    def hessian(self, xi) -> np.ndarray:
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        if self._hess is not None:
            return np.asarray(self._hess(xi), dtype=float)
        h = 1e-3
        H = np.zeros((self.dim, self.dim))
        for a in range(self.dim):
            ea = np.zeros(self.dim)
            ea[a] = h
            H[a, a] = (
                -self.value(xi + 2 * ea)
                + 16 * self.value(xi + ea)
                - 30 * self.value(xi)
                + 16 * self.value(xi - ea)
                - self.value(xi - 2 * ea)
            ) / (12 * h * h)
            for b in range(a + 1, self.dim):
                eb = np.zeros(self.dim)
                eb[b] = h
                H[a, b] = H[b, a] = (
                    self.value(xi + ea + eb)
                    - self.value(xi + ea - eb)
                    - self.value(xi - ea + eb)
                    + self.value(xi - ea - eb)
                ) / (4 * h * h)
        return H


# -- critical-set descriptors --------------------------------------------------


@dataclass
class CriticalPoints:
    """Finite set of critical quasimomenta, optionally with 2 pi Z^d translates."""

    points: np.ndarray
    periodic: bool = True

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def displacement(self, xi: np.ndarray) -> np.ndarray:
        """xi - sigma(xi): offset to the nearest set member, shape like xi."""
        xi = np.asarray(xi, dtype=float)
        best = None
        best_norm = None
        for p in self.points:
            diff = xi - p
            if self.periodic:
                diff = fold(diff)
            norm = np.sum(diff**2, axis=-1)
            if best is None:
                best, best_norm = diff, norm
            else:
                take = norm < best_norm
                best = np.where(take[..., None], diff, best)
                best_norm = np.where(take, norm, best_norm)
        return best

    def distance(self, xi: np.ndarray) -> np.ndarray:
        return np.sqrt(np.sum(self.displacement(xi) ** 2, axis=-1))


@dataclass
class CriticalLine:
    """Axis-aligned critical line {xi_axis = value} in d >= 2."""

    axis: int
    value: float
    dim: int = 2
    periodic: bool = True

    def displacement(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        out = np.zeros_like(xi)
        diff = xi[..., self.axis] - self.value
        if self.periodic:
            diff = fold(diff)
        out[..., self.axis] = diff
        return out

    def distance(self, xi: np.ndarray) -> np.ndarray:
        return np.abs(self.displacement(xi)[..., self.axis])


# -- Newton search -------------------------------------------------------------


@dataclass
class CriticalPoint:
    xi_star: np.ndarray
    energy: float
    grad_residual: float
    hessian: np.ndarray
    rank: int
    degenerate: bool
    iterations: int


@dataclass
class ManifoldCandidate:
    points: np.ndarray
    codimension: int


@dataclass
class CriticalSearchResult:
    points: list
    manifolds: list
    unconverged: list
    skipped_degenerate: int = 0

    def isolated(self) -> list:
        return self.points


def _hessian_rank(H: np.ndarray, rel_tol: float = 1e-5) -> int:
    ev = np.linalg.eigvalsh(H)
    scale = max(1.0, float(np.max(np.abs(ev))))
    return int(np.sum(np.abs(ev) > rel_tol * scale))


def _torus_dist(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(fold(a - b))))


def find_critical_points(
    oracle: BandOracle,
    n_grid: int = 32,
    grad_tol: float = 1e-10,
    max_iter: int = 50,
    dedup_tol: float = 1e-6,
    rank_tol: float = 1e-5,
) -> CriticalSearchResult:
    """Locate critical points of a band over the torus [0, 2 pi)^d.

    Seeds are local minima of |grad| on a uniform n_grid^d scan (nodes where
    the band is not simple are skipped).  Each seed runs a damped Newton
    iteration on the gradient; converged points with full-rank Hessian are
    isolated critical points, rank-deficient ones are clustered into manifold
    candidates with codimension equal to the Hessian rank, and seeds that do
    not converge are reported, not dropped.
    """
    d = oracle.dim
    axes = [np.arange(n_grid) * (TWO_PI / n_grid) for _ in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    gnorm = np.full(nodes.shape[0], np.inf)
    skipped = 0
    for i, xi in enumerate(nodes):
        if not oracle.is_simple(xi):
            skipped += 1
            continue
        gnorm[i] = np.linalg.norm(oracle.gradient(xi))
    gfield = gnorm.reshape([n_grid] * d)

    seeds = []
    it = np.nditer(gfield, flags=["multi_index"])
    for val in it:
        if not np.isfinite(val):
            continue
        idx = it.multi_index
        is_min = True
        for off in np.ndindex(*([3] * d)):
            if all(o == 1 for o in off):
                continue
            nb = tuple((idx[a] + off[a] - 1) % n_grid for a in range(d))
            if gfield[nb] < val:
                is_min = False
                break
        if is_min:
            seeds.append(np.array([axes[a][idx[a]] for a in range(d)]))

    converged = []
    unconverged = []
    for seed in seeds:
        xi = seed.copy()
        ok = False
        iters = 0
        g = oracle.gradient(xi)
        for iters in range(1, max_iter + 1):
            if np.linalg.norm(g) <= grad_tol:
                ok = True
                break
            H = oracle.hessian(xi)
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H, g, rcond=None)[0]
            # damp until the gradient norm does not increase
            lam = 1.0
            for _ in range(12):
                trial = xi - lam * step
                if not oracle.is_simple(trial):
                    lam *= 0.5
                    continue
                gt = oracle.gradient(trial)
                if np.linalg.norm(gt) <= np.linalg.norm(g) or lam < 1e-6:
                    xi, g = trial, gt
                    break
                lam *= 0.5
            else:
                break
        if not ok and np.linalg.norm(g) <= grad_tol:
            ok = True
        if ok:
            H = oracle.hessian(xi)
            rank = _hessian_rank(H, rank_tol)
            converged.append(
                CriticalPoint(
                    xi_star=fold(xi),
                    energy=oracle.value(xi),
                    grad_residual=float(np.linalg.norm(g)),
                    hessian=0.5 * (H + H.T),
                    rank=rank,
                    degenerate=rank < d,
                    iterations=iters,
                )
            )
        else:
            unconverged.append(
                {
                    "seed": seed.tolist(),
                    "last_xi": xi.tolist(),
                    "grad_norm": float(np.linalg.norm(g)),
                    "iterations": iters,
                }
            )

    # deduplicate modulo 2 pi
    unique: list[CriticalPoint] = []
    for pt in converged:
        if all(_torus_dist(pt.xi_star, q.xi_star) > dedup_tol for q in unique):
            unique.append(pt)

    isolated = [p for p in unique if not p.degenerate]
    degenerate = [p for p in unique if p.degenerate]

    manifolds = []
    link = 2.5 * TWO_PI / n_grid
    remaining = list(degenerate)
    while remaining:
        group = [remaining.pop(0)]
        grew = True
        while grew:
            grew = False
            for q in list(remaining):
                if any(_torus_dist(q.xi_star, m.xi_star) < link for m in group):
                    group.append(q)
                    remaining.remove(q)
                    grew = True
        pts = np.array([m.xi_star for m in group])
        order = np.lexsort(pts.T[::-1])
        manifolds.append(
            ManifoldCandidate(points=pts[order], codimension=group[0].rank)
        )

    return CriticalSearchResult(
        points=isolated,
        manifolds=manifolds,
        unconverged=unconverged,
        skipped_degenerate=skipped,
    )


# -- grids and exports ----------------------------------------------------------


@dataclass
class BandGrid:
    """Band energies sampled on a uniform quasimomentum grid over [0, 2 pi)^d."""

    axes: list
    bands: list
    values: np.ndarray  # shape (n_bands, *grid)

    @property
    def dim(self) -> int:
        return len(self.axes)


def compute_band_grid(
    potential: PeriodicPotential,
    basis: PlaneWaveBasis,
    bands: list,
    n_grid: int = 64,
) -> BandGrid:
    axes = [np.arange(n_grid) * (TWO_PI / n_grid) for _ in range(basis.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    nmax = max(bands)
    vals = np.empty((len(bands), nodes.shape[0]))
    for i, xi in enumerate(nodes):
        f = solve_fiber(potential, basis, xi, n_bands=nmax + 1)
        for j, b in enumerate(bands):
            vals[j, i] = f.energies[b]
    return BandGrid(
        axes=axes, bands=list(bands), values=vals.reshape((len(bands),) + mesh[0].shape)
    )


def write_bands_csv(path, grid: BandGrid) -> None:
    """Long-format export: xi_1[, xi_2], band, energy."""
    d = grid.dim
    header = [f"xi_{a + 1}" for a in range(d)] + ["band", "energy"]
    mesh = np.meshgrid(*grid.axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j, b in enumerate(grid.bands):
            flat = grid.values[j].ravel()
            for i in range(nodes.shape[0]):
                w.writerow(
                    [f"{x:.17g}" for x in nodes[i]] + [str(b), f"{flat[i]:.17g}"]
                )


def write_critical_json(path, result: CriticalSearchResult) -> None:
    data = {
        "points": [
            {
                "xi_star": p.xi_star.tolist(),
                "energy": p.energy,
                "grad_residual": p.grad_residual,
                "hessian": p.hessian.ravel().tolist(),
                "rank": p.rank,
                "degenerate": p.degenerate,
            }
            for p in result.points
        ],
        "manifolds": [
            {"points": m.points.tolist(), "codimension": m.codimension}
            for m in result.manifolds
        ],
        "unconverged": result.unconverged,
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")
