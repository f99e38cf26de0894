"""Plane-wave discretization of periodic Schrodinger fiber operators.

The fiber operator on the unit torus T^d = R^d / Z^d is

    H(xi) = 1/2 |xi - i grad_y|^2 + V(y),        xi in R^d,

acting on periodic functions of y.  In the Fourier basis e^{2 pi i k.y},
|k|_inf <= K, the kinetic part is diagonal with entries |xi + 2 pi k|^2 / 2
and the potential couples modes through its Fourier coefficients V_hat(k-k').
Eigenvalues of the truncated matrix are the band energies rho_n(xi); they are
2 pi Z^d periodic in xi, and eigenvectors give the Bloch wave coefficients.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "PlaneWaveBasis",
    "PeriodicPotential",
    "BlochFiber",
    "DegenerateBandError",
    "assemble_fiber_hamiltonian",
    "solve_fiber",
    "bloch_wave_eval",
    "default_cutoff",
    "gap_threshold",
    "fold",
]

TWO_PI = 2.0 * math.pi


def fold(eta):
    """Fold to the fundamental quasimomentum window [-pi, pi), ties to -pi."""
    eta = np.asarray(eta, dtype=float)
    return eta - TWO_PI * np.floor(eta / TWO_PI + 0.5)


class DegenerateBandError(ValueError):
    """Raised when an operation requires a spectrally isolated band."""


def gap_threshold(energy: float) -> float:
    """Degeneracy threshold below which neighboring bands count as a cluster."""
    return 1e-8 * (1.0 + abs(energy))


def default_cutoff(potential: "PeriodicPotential") -> int:
    """Default plane-wave cutoff for a given potential support radius."""
    return max(8, 2 * potential.support_radius + 6)


class PlaneWaveBasis:
    """Truncated Fourier basis {e^{2 pi i k.y} : |k|_inf <= K}, fixed order.

    Enumeration is lexicographic with the first component slowest, each
    component running -K..K, so d=1 with K=1 enumerates (-1, 0, 1).
    """

    def __init__(self, dim: int, cutoff: int):
        if dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {dim}")
        if cutoff < 1:
            raise ValueError(f"cutoff must be >= 1, got {cutoff}")
        self.dim = dim
        self.cutoff = cutoff
        rng = np.arange(-cutoff, cutoff + 1)
        if dim == 1:
            lattice = rng.reshape(-1, 1)
        else:
            k1, k2 = np.meshgrid(rng, rng, indexing="ij")
            lattice = np.stack([k1.ravel(), k2.ravel()], axis=1)
        self.lattice = lattice
        self.size = lattice.shape[0]
        self._index = {tuple(int(c) for c in row): i for i, row in enumerate(lattice)}

    def __len__(self) -> int:
        return self.size

    def index_of(self, k) -> int:
        """Position of lattice vector k in the enumeration (KeyError if outside)."""
        return self._index[tuple(int(c) for c in np.atleast_1d(k))]

    def contains(self, k) -> bool:
        return tuple(int(c) for c in np.atleast_1d(k)) in self._index

    def __repr__(self) -> str:
        return f"PlaneWaveBasis(dim={self.dim}, cutoff={self.cutoff})"


class PeriodicPotential:
    """Real periodic potential with finitely many Fourier coefficients.

    V(y) = sum_k V_hat(k) e^{2 pi i k.y}.  The coefficient table is
    Hermitian-completed on construction: a missing V_hat(-k) is filled with
    conj(V_hat(k)); if both are supplied they must agree (the potential must
    be real-valued).
    """

    def __init__(self, dim: int, coeffs: dict, tol: float = 1e-12):
        if dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {dim}")
        self.dim = dim
        table: dict = {}
        for key, val in coeffs.items():
            k = tuple(int(c) for c in np.atleast_1d(key))
            if len(k) != dim:
                raise ValueError(f"coefficient index {k} has wrong dimension")
            table[k] = complex(val)
        scale = max((abs(v) for v in table.values()), default=1.0)
        for k, v in list(table.items()):
            mk = tuple(-c for c in k)
            if mk in table:
                if abs(table[mk] - np.conj(v)) > tol * max(1.0, scale):
                    raise ValueError(
                        f"coefficients at {k} and {mk} violate the Hermitian "
                        f"symmetry V_hat(-k) = conj(V_hat(k))"
                    )
            else:
                table[mk] = complex(np.conj(v))
        zero = (0,) * dim
        if zero in table and abs(table[zero].imag) > tol * max(1.0, scale):
            raise ValueError("mean coefficient V_hat(0) must be real")
        self.coeffs = table
        self.support_radius = max(
            (max(abs(c) for c in k) for k in table if any(k)), default=0
        )

    def fourier(self, k) -> complex:
        """V_hat(k), zero outside the support."""
        return self.coeffs.get(tuple(int(c) for c in np.atleast_1d(k)), 0.0 + 0.0j)

    def eval(self, y: np.ndarray) -> np.ndarray:
        """Evaluate V at points y of shape (..., dim); returns real values."""
        y = np.asarray(y, dtype=float)
        if self.dim == 1 and y.ndim == 0:
            y = y.reshape(1)
        if y.shape[-1] != self.dim and self.dim == 1:
            y = y[..., None]
        out = np.zeros(y.shape[:-1], dtype=complex)
        for k, v in self.coeffs.items():
            phase = TWO_PI * np.tensordot(y, np.asarray(k, dtype=float), axes=([-1], [0]))
            out += v * np.exp(1j * phase)
        if np.max(np.abs(out.imag)) > 1e-10 * max(1.0, np.max(np.abs(out.real))):
            raise RuntimeError("potential evaluation produced non-real values")
        return out.real

    # -- serialization (coeffs as [k..., re, im] rows) ------------------------

    def to_dict(self) -> dict:
        rows = []
        for k in sorted(self.coeffs):
            v = self.coeffs[k]
            rows.append(list(k) + [float(v.real), float(v.imag)])
        return {"dim": self.dim, "coeffs": rows}

    @classmethod
    def from_dict(cls, data: dict) -> "PeriodicPotential":
        if "dim" not in data or "coeffs" not in data:
            raise ValueError("potential spec needs 'dim' and 'coeffs' keys")
        dim = int(data["dim"])
        table = {}
        for row in data["coeffs"]:
            if len(row) != dim + 2:
                raise ValueError(
                    f"potential coefficient row {row} should have {dim} integer "
                    f"indices followed by re, im"
                )
            k = tuple(int(c) for c in row[:dim])
            table[k] = complex(float(row[dim]), float(row[dim + 1]))
        return cls(dim, table)

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_json(cls, path) -> "PeriodicPotential":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    # -- common constructions --------------------------------------------------

    @classmethod
    def cosine(cls, amplitude: float = 1.0) -> "PeriodicPotential":
        """d=1 potential 2 A cos(2 pi y): V_hat(+-1) = A."""
        return cls(1, {(1,): amplitude, (-1,): amplitude})

    @classmethod
    def zero(cls, dim: int) -> "PeriodicPotential":
        return cls(dim, {(0,) * dim: 0.0})

    @classmethod
    def separable(cls, vx: "PeriodicPotential", vy: "PeriodicPotential") -> "PeriodicPotential":
        """d=2 potential V(y1, y2) = vx(y1) + vy(y2) from two d=1 potentials."""
        if vx.dim != 1 or vy.dim != 1:
            raise ValueError("separable expects two d=1 potentials")
        table: dict = {}
        for (k,), v in vx.coeffs.items():
            table[(k, 0)] = table.get((k, 0), 0.0) + v
        for (k,), v in vy.coeffs.items():
            table[(0, k)] = table.get((0, k), 0.0) + v
        return cls(2, table)


@dataclass
class BlochFiber:
    """Solved fiber eigenproblem at one quasimomentum.

    energies are ascending; vectors holds one phase-fixed eigenvector per
    column, orthonormal in the plane-wave basis.  gap_below/gap_above give the
    distance to the neighboring eigenvalue (inf at the spectral ends), and
    clusters lists half-open index ranges of quasi-degenerate groups.
    """

    xi: np.ndarray
    energies: np.ndarray
    vectors: np.ndarray
    gap_below: np.ndarray
    gap_above: np.ndarray
    clusters: list
    basis: PlaneWaveBasis

    @property
    def n_bands(self) -> int:
        return self.energies.shape[0]

    def is_simple(self, n: int) -> bool:
        """True when band n is separated from both neighbors by the gap threshold."""
        thr = gap_threshold(float(self.energies[n]))
        return self.gap_below[n] > thr and self.gap_above[n] > thr

    def require_simple(self, n: int) -> None:
        if not self.is_simple(n):
            raise DegenerateBandError(
                f"band {n} at xi={np.array2string(self.xi, precision=6)} is not "
                f"simple: gaps ({self.gap_below[n]:.3e}, {self.gap_above[n]:.3e})"
            )

    def coefficient(self, n: int) -> np.ndarray:
        """Plane-wave coefficient vector c_{k,n} of band n."""
        return self.vectors[:, n]


def assemble_fiber_hamiltonian(
    potential: PeriodicPotential, basis: PlaneWaveBasis, xi
) -> np.ndarray:
    """Dense Hermitian fiber matrix H(xi) in the plane-wave basis.

    H[k,k'] = 1/2 |xi + 2 pi k|^2 delta_{kk'} + V_hat(k - k').  The basis
    cutoff must cover the potential support, otherwise the matrix would
    silently drop coupling coefficients.
    """
    if potential.dim != basis.dim:
        raise ValueError("potential and basis dimensions differ")
    if basis.cutoff < potential.support_radius:
        raise ValueError(
            f"basis cutoff K={basis.cutoff} is smaller than the potential "
            f"support radius K_V={potential.support_radius}"
        )
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (basis.dim,):
        raise ValueError(f"xi must have shape ({basis.dim},)")
    freq = xi[None, :] + TWO_PI * basis.lattice
    H = np.zeros((basis.size, basis.size), dtype=complex)
    np.fill_diagonal(H, 0.5 * np.sum(freq**2, axis=1))
    for k, v in potential.coeffs.items():
        if v == 0:
            continue
        if not any(k):
            H[np.diag_indices(basis.size)] += v
            continue
        karr = np.asarray(k, dtype=int)
        # row i couples to column j with lattice[i] - lattice[j] = k
        for i in range(basis.size):
            target = basis.lattice[i] - karr
            if basis.contains(target):
                H[i, basis.index_of(target)] += v
    return H


def _fix_phase(vec: np.ndarray) -> np.ndarray:
    """Rotate so the largest-modulus entry is real positive (ties: lowest index)."""
    i = int(np.argmax(np.abs(vec)))
    a = vec[i]
    mag = abs(a)
    if mag == 0.0:
        return vec
    return vec * (np.conj(a) / mag)


def solve_fiber(
    potential: PeriodicPotential,
    basis: PlaneWaveBasis,
    xi,
    n_bands: int | None = None,
) -> BlochFiber:
    """Diagonalize H(xi) and return the lowest n_bands Bloch bands.

    Eigenvalues come back ascending from the dense Hermitian solver; gap
    metadata is computed from the full truncated spectrum so the retained
    bands know their distance to the first discarded one.
    """
    H = assemble_fiber_hamiltonian(potential, basis, xi)
    energies, vectors = scipy.linalg.eigh(H)
    size = basis.size
    m = size if n_bands is None else int(n_bands)
    if not 1 <= m <= size:
        raise ValueError(f"n_bands must be in [1, {size}]")
    diffs = np.diff(energies)
    gap_below = np.concatenate(([np.inf], diffs))[:m]
    gap_above = np.concatenate((diffs, [np.inf]))[:m]
    vec = vectors[:, :m].copy()
    for j in range(m):
        vec[:, j] = _fix_phase(vec[:, j])
    retained = energies[:m].copy()
    # residual sanity on the retained part; failure means the solver broke
    res = H @ vec - vec * retained[None, :]
    res_norm = np.linalg.norm(res, axis=0)
    bound = 1e-9 * (1.0 + np.abs(retained)) * math.sqrt(size)
    if np.any(res_norm > bound):
        worst = int(np.argmax(res_norm - bound))
        raise RuntimeError(
            f"eigensolver residual {res_norm[worst]:.3e} for band {worst} "
            f"exceeds tolerance"
        )
    clusters = []
    start = 0
    for j in range(1, m):
        if energies[j] - energies[j - 1] > gap_threshold(float(energies[j])):
            clusters.append((start, j))
            start = j
    clusters.append((start, m))
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    return BlochFiber(
        xi=xi,
        energies=retained,
        vectors=vec,
        gap_below=gap_below,
        gap_above=gap_above,
        clusters=clusters,
        basis=basis,
    )


def bloch_wave_eval(fiber: BlochFiber, n: int, y: np.ndarray) -> np.ndarray:
    """Bloch wave phi_n(y, xi) = sum_k c_{k,n} e^{2 pi i k.y} at points y."""
    y = np.asarray(y, dtype=float)
    if fiber.basis.dim == 1:
        if y.ndim == 0 or y.shape[-1] != 1:
            y = y[..., None]
    c = fiber.coefficient(n)
    phases = TWO_PI * np.tensordot(y, fiber.basis.lattice.T.astype(float), axes=([-1], [0]))
    return np.tensordot(np.exp(1j * phases), c, axes=([-1], [0]))
