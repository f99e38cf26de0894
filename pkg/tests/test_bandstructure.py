"""Band calculus tests against finite-difference and closed-form oracles."""
import math

import numpy as np
import pytest

from blochlab.bandstructure import (
    BlochBandOracle,
    CallableBandOracle,
    CriticalLine,
    CriticalPoints,
    band_gradient,
    band_hessian,
    compute_band_grid,
    find_critical_points,
    fold,
    write_bands_csv,
    write_critical_json,
)
from blochlab.planewave import (
    DegenerateBandError,
    PeriodicPotential,
    PlaneWaveBasis,
    solve_fiber,
)

TWO_PI = 2.0 * math.pi


def fd_gradient(value, xi, h=1e-5):
    xi = np.asarray(xi, dtype=float)
    g = np.zeros(xi.size)
    for a in range(xi.size):
        e = np.zeros(xi.size)
        e[a] = h
        g[a] = (value(xi + e) - value(xi - e)) / (2 * h)
    return g


def fd_hessian(value, xi, h=1e-3):
    """Five-point diagonal, four-point cross stencil."""
    xi = np.asarray(xi, dtype=float)
    d = xi.size
    H = np.zeros((d, d))
    for a in range(d):
        ea = np.zeros(d)
        ea[a] = h
        H[a, a] = (
            -value(xi + 2 * ea)
            + 16 * value(xi + ea)
            - 30 * value(xi)
            + 16 * value(xi - ea)
            - value(xi - 2 * ea)
        ) / (12 * h * h)
        for b in range(a + 1, d):
            eb = np.zeros(d)
            eb[b] = h
            H[a, b] = H[b, a] = (
                value(xi + ea + eb)
                - value(xi + ea - eb)
                - value(xi - ea + eb)
                + value(xi - ea - eb)
            ) / (4 * h * h)
    return H


@pytest.fixture(scope="module")
def mathieu():
    pot = PeriodicPotential.cosine(1.0)
    basis = PlaneWaveBasis(1, 10)
    return pot, basis


@pytest.fixture(scope="module")
def sep2d():
    pot = PeriodicPotential.separable(
        PeriodicPotential.cosine(1.0), PeriodicPotential.cosine(0.5)
    )
    basis = PlaneWaveBasis(2, 6)
    return pot, basis


class TestGradient:
    def test_free_band_gradient_is_identity(self):
        pot = PeriodicPotential.zero(1)
        basis = PlaneWaveBasis(1, 8)
        for x in (0.0, 0.4, -1.2, 2.0):
            f = solve_fiber(pot, basis, [x], n_bands=3)
            g = band_gradient(f, 0)
            assert abs(g[0] - x) < 1e-12

    def test_matches_finite_differences(self, mathieu):
        pot, basis = mathieu
        value = lambda xi: solve_fiber(pot, basis, xi, n_bands=4).energies
        for n in (0, 1, 2):
            for x in (0.3, 1.1, -0.7):
                f = solve_fiber(pot, basis, [x], n_bands=4)
                g = band_gradient(f, n)
                gfd = fd_gradient(lambda q: value(q)[n], np.array([x]))
                assert abs(g[0] - gfd[0]) < 1e-7

    def test_matches_finite_differences_2d(self, sep2d):
        pot, basis = sep2d
        value = lambda xi, n: solve_fiber(pot, basis, xi, n_bands=5).energies[n]
        xi = np.array([0.5, -0.9])
        for n in (0, 1):
            f = solve_fiber(pot, basis, xi, n_bands=5)
            g = band_gradient(f, n)
            gfd = fd_gradient(lambda q: value(q, n), xi)
            assert np.max(np.abs(g - gfd)) < 1e-6

    def test_refuses_degenerate_band(self):
        pot = PeriodicPotential.zero(1)
        basis = PlaneWaveBasis(1, 8)
        f = solve_fiber(pot, basis, [math.pi], n_bands=3)
        with pytest.raises(DegenerateBandError):
            band_gradient(f, 0)

    def test_periodic_in_quasimomentum(self, mathieu):
        pot, basis = mathieu
        f1 = solve_fiber(pot, basis, [0.3], n_bands=2)
        f2 = solve_fiber(pot, basis, [0.3 + TWO_PI], n_bands=2)
        g1 = band_gradient(f1, 1)
        g2 = band_gradient(f2, 1)
        assert abs(g1[0] - g2[0]) < 1e-9


class TestHessian:
    def test_free_band_hessian_is_identity(self):
        pot = PeriodicPotential.zero(1)
        basis = PlaneWaveBasis(1, 8)
        H = band_hessian(pot, basis, 0, [0.4])
        assert abs(H[0, 0] - 1.0) < 1e-12

    def test_matches_finite_differences_1d(self, mathieu):
        # pairs kept away from avoided crossings, where the fourth and sixth
        # derivatives blow up and the h=1e-3 stencil loses the 1e-5 target
        pot, basis = mathieu
        value = lambda xi, n: solve_fiber(pot, basis, xi, n_bands=5).energies[n]
        pairs = [
            (0, 0.0),
            (0, 0.3),
            (0, 1.5),
            (0, math.pi),
            (1, 0.3),
            (1, 1.5),
            (1, math.pi),
            (2, 0.3),
            (2, 1.5),
        ]
        for n, x in pairs:
            H = band_hessian(pot, basis, n, [x])
            Hfd = fd_hessian(lambda q: value(q, n), np.array([x]))
            assert abs(H[0, 0] - Hfd[0, 0]) < 1e-5, (n, x)

    def test_matches_finite_differences_2d(self, sep2d):
        pot, basis = sep2d
        value = lambda xi, n: solve_fiber(pot, basis, xi, n_bands=6).energies[n]
        for n, xi in [(0, [0.5, -0.9]), (0, [0.2, 0.1]), (1, [0.5, 1.3])]:
            xi = np.array(xi)
            H = band_hessian(pot, basis, n, xi)
            Hfd = fd_hessian(lambda q: value(q, n), xi)
            assert np.max(np.abs(H - Hfd)) < 1e-5
            assert np.max(np.abs(H - H.T)) == 0.0

    def test_separable_hessian_is_diagonal(self, sep2d):
        pot, basis = sep2d
        H = band_hessian(pot, basis, 0, np.array([0.4, 0.7]))
        assert abs(H[0, 1]) < 1e-10


class TestCallableOracle:
    def test_fd_fallbacks_on_quadratic(self):
        orc = CallableBandOracle(lambda xi: float(xi[0] ** 2 - 0.5 * xi[0]), dim=1)
        assert abs(orc.value([2.0]) - 3.0) < 1e-12
        assert abs(orc.gradient([2.0])[0] - 3.5) < 1e-8
        assert abs(orc.hessian([2.0])[0, 0] - 2.0) < 1e-7

    def test_analytic_derivatives_preferred(self):
        orc = CallableBandOracle(
            lambda xi: 1.0 - math.cos(xi[0]),
            dim=1,
            grad=lambda xi: np.array([math.sin(xi[0])]),
            hess=lambda xi: np.array([[math.cos(xi[0])]]),
        )
        assert orc.gradient([0.3])[0] == math.sin(0.3)
        assert orc.hessian([0.3])[0, 0] == math.cos(0.3)


class TestCriticalSearch:
    def test_free_band_single_minimum(self):
        pot = PeriodicPotential.zero(1)
        basis = PlaneWaveBasis(1, 8)
        res = find_critical_points(BlochBandOracle(pot, basis, 0), n_grid=16)
        assert len(res.points) == 1
        assert not res.manifolds
        pt = res.points[0]
        assert abs(pt.xi_star[0]) < 1e-9
        assert pt.grad_residual <= 1e-10
        assert abs(pt.hessian[0, 0] - 1.0) < 1e-9
        assert res.skipped_degenerate > 0  # zone edge is a band crossing

    def test_lowest_band_extrema_and_signs(self, mathieu):
        pot, basis = mathieu
        res = find_critical_points(BlochBandOracle(pot, basis, 0), n_grid=16)
        assert not res.unconverged and not res.manifolds
        pts = sorted(res.points, key=lambda p: abs(p.xi_star[0]))
        assert len(pts) == 2
        # minimum at the zone center, maximum at the folded edge
        assert abs(pts[0].xi_star[0]) < 1e-8
        assert abs(abs(pts[1].xi_star[0]) - math.pi) < 1e-8
        assert pts[0].hessian[0, 0] > 0
        assert pts[1].hessian[0, 0] < 0
        for p in pts:
            assert p.grad_residual <= 1e-10
            assert p.rank == 1 and not p.degenerate

    def test_lowest_band_signs_against_dense_scan(self, mathieu):
        # independent check: dense scan of the band, discrete curvature signs
        pot, basis = mathieu
        nq = 4096
        xs = np.arange(nq) * (TWO_PI / nq)
        vals = np.array(
            [solve_fiber(pot, basis, [x], n_bands=1).energies[0] for x in xs]
        )
        imin, imax = int(np.argmin(vals)), int(np.argmax(vals))
        assert xs[imin] == 0.0
        assert abs(xs[imax] - math.pi) < TWO_PI / nq + 1e-12
        curv = np.roll(vals, -1) - 2 * vals + np.roll(vals, 1)
        assert curv[imin] > 0 and curv[imax] < 0

    def test_second_band_extrema(self, mathieu):
        # the next band flips orientation: max at the center, min at the edge
        pot, basis = mathieu
        res = find_critical_points(BlochBandOracle(pot, basis, 1), n_grid=16)
        assert not res.unconverged
        pts = sorted(res.points, key=lambda p: abs(p.xi_star[0]))
        assert len(pts) == 2
        assert abs(pts[0].xi_star[0]) < 1e-8
        assert abs(abs(pts[1].xi_star[0]) - math.pi) < 1e-8
        assert pts[0].hessian[0, 0] < 0
        assert pts[1].hessian[0, 0] > 0

    def test_hessian_at_roots_matches_fd(self, mathieu):
        pot, basis = mathieu
        res = find_critical_points(BlochBandOracle(pot, basis, 0), n_grid=16)
        value = lambda xi: solve_fiber(pot, basis, xi, n_bands=2).energies[0]
        assert len(res.points) == 2
        for p in res.points:
            Hfd = fd_hessian(value, p.xi_star)
            assert abs(p.hessian[0, 0] - Hfd[0, 0]) < 1e-5

    def test_flat_direction_grouped_into_manifold(self):
        orc = CallableBandOracle(
            lambda xi: 1.0 - math.cos(xi[0]),
            dim=2,
            grad=lambda xi: np.array([math.sin(xi[0]), 0.0]),
            hess=lambda xi: np.diag([math.cos(xi[0]), 0.0]),
        )
        res = find_critical_points(orc, n_grid=16)
        assert not res.points  # nothing isolated
        assert len(res.manifolds) == 2
        for m in res.manifolds:
            assert m.codimension == 1
            x1 = fold(m.points[:, 0])
            spread = np.max(np.abs(x1 - x1[0]))
            assert spread < 1e-8
            assert len(m.points) >= 8  # the line is sampled, not a single hit
        levels = sorted(abs(fold(m.points[0, 0])) for m in res.manifolds)
        assert levels[0] < 1e-8
        assert abs(levels[1] - math.pi) < 1e-8

    def test_isolated_2d_extrema(self):
        orc = CallableBandOracle(
            lambda xi: 2.0 - math.cos(xi[0]) - math.cos(xi[1]),
            dim=2,
            grad=lambda xi: np.array([math.sin(xi[0]), math.sin(xi[1])]),
            hess=lambda xi: np.diag([math.cos(xi[0]), math.cos(xi[1])]),
        )
        res = find_critical_points(orc, n_grid=12)
        assert len(res.points) == 4  # (0,0), (0,pi), (pi,0), (pi,pi)
        assert not res.manifolds
        ranks = {p.rank for p in res.points}
        assert ranks == {2}


class TestDescriptors:
    def test_points_displacement_folds(self):
        cs = CriticalPoints(np.array([[0.0]]))
        xi = np.array([[0.1], [TWO_PI - 0.1], [math.pi]])
        disp = cs.displacement(xi)
        assert np.allclose(disp[:, 0], [0.1, -0.1, -math.pi])
        assert np.allclose(cs.distance(xi), [0.1, 0.1, math.pi])

    def test_points_pick_nearest(self):
        cs = CriticalPoints(np.array([[0.0], [math.pi]]))
        xi = np.array([[1.0], [2.5], [-2.5]])
        assert np.allclose(cs.distance(xi), [1.0, math.pi - 2.5, math.pi - 2.5])

    def test_nonperiodic_points(self):
        cs = CriticalPoints(np.array([[0.0]]), periodic=False)
        assert abs(cs.distance(np.array([TWO_PI])) - TWO_PI) < 1e-14

    def test_line_distance_only_along_axis(self):
        line = CriticalLine(axis=0, value=0.0, dim=2)
        xi = np.array([[0.3, 5.0], [TWO_PI - 0.3, -7.0]])
        disp = line.displacement(xi)
        assert np.allclose(disp[:, 0], [0.3, -0.3])
        assert np.all(disp[:, 1] == 0.0)
        assert np.allclose(line.distance(xi), [0.3, 0.3])


class TestExports:
    def test_bands_csv_roundtrip(self, tmp_path, mathieu):
        pot, basis = mathieu
        grid = compute_band_grid(pot, basis, bands=[0, 1], n_grid=8)
        path = tmp_path / "bands.csv"
        write_bands_csv(path, grid)
        rows = path.read_text().strip().splitlines()
        assert rows[0] == "xi_1,band,energy"
        assert len(rows) == 1 + 2 * 8
        first = rows[1].split(",")
        assert float(first[0]) == 0.0 and first[1] == "0"
        assert abs(float(first[2]) - grid.values[0].ravel()[0]) == 0.0

    def test_bands_csv_2d_header(self, tmp_path, sep2d):
        pot, basis = sep2d
        grid = compute_band_grid(pot, basis, bands=[0], n_grid=4)
        path = tmp_path / "bands2.csv"
        write_bands_csv(path, grid)
        assert path.read_text().splitlines()[0] == "xi_1,xi_2,band,energy"

    def test_critical_json_schema(self, tmp_path, mathieu):
        import json

        pot, basis = mathieu
        res = find_critical_points(BlochBandOracle(pot, basis, 1), n_grid=16)
        path = tmp_path / "crit.json"
        write_critical_json(path, res)
        data = json.loads(path.read_text())
        assert set(data) == {"points", "manifolds", "unconverged"}
        for p in data["points"]:
            assert set(p) == {
                "xi_star",
                "energy",
                "grad_residual",
                "hessian",
                "rank",
                "degenerate",
            }
            assert len(p["hessian"]) == 1  # row-major d*d

    def test_deterministic_export(self, tmp_path, mathieu):
        pot, basis = mathieu
        grid = compute_band_grid(pot, basis, bands=[0], n_grid=6)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_bands_csv(p1, grid)
        write_bands_csv(p2, grid)
        assert p1.read_bytes() == p2.read_bytes()
