"""Experiment harness tests: fits, configs, guards, reduced sweeps, CLI."""
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from blochlab import cli
from blochlab.blochdata import WaveField, read_snapshot
from blochlab.harness import (
    ExperimentConfig,
    band_multiplier_symbol,
    border_mass_fraction,
    default_config,
    fit_rate,
    monotone_decreasing,
    phase_aligned_distance,
    run_experiment,
    triangle_weights,
    weak_density_distance,
)
from blochlab.planewave import PeriodicPotential, PlaneWaveBasis, solve_fiber

MATHIEU = PeriodicPotential.cosine(1.0)
BASIS = PlaneWaveBasis(1, 8)


# -- rate fits -------------------------------------------------------------------


class TestFitRate:
    def test_exact_linear(self):
        eps = [0.125, 0.0625, 0.03125, 0.015625]
        fit = fit_rate([(e, e) for e in eps])
        assert abs(fit.slope - 1.0) <= 1e-12
        assert fit.n == 4

    def test_exact_quadratic(self):
        eps = [0.125, 0.0625, 0.03125]
        fit = fit_rate([(e, e * e) for e in eps])
        assert abs(fit.slope - 2.0) <= 1e-12

    def test_multiplicative_noise_stays_near_one(self):
        rng = np.random.default_rng(7)
        eps = [0.125, 0.0625, 0.03125, 0.015625]
        for _ in range(50):
            noise = 1.0 + 0.05 * rng.standard_normal(len(eps))
            fit = fit_rate([(e, e * f) for e, f in zip(eps, noise)])
            assert 0.8 <= fit.slope <= 1.2

    def test_refuses_short_input(self):
        with pytest.raises(ValueError, match="at least three"):
            fit_rate([(0.125, 1.0), (0.0625, 0.5)])

    def test_refuses_nonpositive_and_names_the_alternative(self):
        pairs = [(0.125, 1.0), (0.0625, 0.5), (0.03125, 0.0)]
        with pytest.raises(ValueError, match="absolute defect"):
            fit_rate(pairs)

    def test_residual_zero_on_exact_data(self):
        fit = fit_rate([(e, 3.0 * e) for e in (0.5, 0.25, 0.125)])
        assert fit.residual <= 1e-12


# -- time window and weak distance --------------------------------------------------


class TestTriangleWeights:
    def test_unit_sum_and_symmetry(self):
        times = [k / 8 for k in range(9)]
        w = triangle_weights(times)
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.allclose(w, w[::-1])
        assert w[0] < w[len(w) // 2]

    def test_needs_three_times(self):
        with pytest.raises(ValueError):
            triangle_weights([0.0, 1.0])

    def test_increasing_required(self):
        with pytest.raises(ValueError):
            triangle_weights([0.0, 0.5, 0.25])


class TestWeakDensityDistance:
    def test_equal_densities(self):
        rho = np.exp(-np.linspace(-3, 3, 256) ** 2)
        assert weak_density_distance(rho, rho, 16.0) == 0.0

    def test_translation_linear_in_shift(self):
        L, N = 16.0, 1024
        x = np.arange(N) * (L / N)
        rho = np.exp(-((x - L / 2) ** 2))
        vals = []
        for shift in (8, 4, 2, 1):
            rho_s = np.roll(rho, shift)
            vals.append(weak_density_distance(rho, rho_s, L))
        for a, b in zip(vals, vals[1:]):
            assert abs(a / b - 2.0) < 0.2

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            weak_density_distance(np.ones(8), np.ones(16), 4.0)

    def test_bounded_by_test_function_norm(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.random(128)
            b = rng.random(128)
            d = weak_density_distance(a, b, 8.0)
            assert d <= np.sum(np.abs(a - b)) * (8.0 / 128)


class TestMonotone:
    def test_tolerates_small_bumps(self):
        assert monotone_decreasing([1.0, 0.55, 0.57, 0.3])

    def test_rejects_large_bumps(self):
        assert not monotone_decreasing([1.0, 0.5, 0.6])


# -- configs ----------------------------------------------------------------------


class TestExperimentConfig:
    def test_defaults_validate(self):
        for name in ("E1", "E2", "E3", "E4", "E5", "E6"):
            cfg = ExperimentConfig.from_dict(default_config(name))
            assert cfg.experiment == name

    def test_off_lattice_carrier_rejected(self):
        cfg = default_config("E3")
        cfg["xi0"] = [0.1]
        with pytest.raises(ValueError, match="multiples of 2 pi eps / L"):
            ExperimentConfig.from_dict(cfg)

    def test_eps_must_be_power_of_two(self):
        cfg = default_config("E3")
        cfg["eps"] = [0.1]
        with pytest.raises(ValueError, match="power of two"):
            ExperimentConfig.from_dict(cfg)

    def test_box_must_be_power_of_two(self):
        cfg = default_config("E3")
        cfg["L"] = 12
        with pytest.raises(ValueError, match="power of two"):
            ExperimentConfig.from_dict(cfg)

    def test_unknown_keys_rejected(self):
        cfg = default_config("E3")
        cfg["wavelength"] = 2.0
        with pytest.raises(ValueError, match="unknown config keys"):
            ExperimentConfig.from_dict(cfg)

    def test_grid_size(self):
        cfg = ExperimentConfig.from_dict(default_config("E3"))
        assert cfg.grid_size(0.125) == 16 * 2 ** (3 + 3)

    def test_member_dt_priority(self):
        cfg = default_config("E3")
        cfg["dt"] = 1e-4
        c = ExperimentConfig.from_dict(cfg)
        assert c.member_dt(0.125) == 1e-4
        cfg["dt"] = None
        c = ExperimentConfig.from_dict(cfg)
        assert c.member_dt(0.125) == pytest.approx(0.05 * 0.125**2)

    def test_roundtrip_through_dict(self):
        cfg = ExperimentConfig.from_dict(default_config("E5"))
        again = ExperimentConfig.from_dict(cfg.to_dict())
        assert again == cfg


# -- harness building blocks --------------------------------------------------------


class TestBandSymbol:
    def test_matches_fiber_solver(self):
        sym = band_multiplier_symbol(MATHIEU, BASIS, 0)
        for zeta in (0.0, 0.5, math.pi):
            want = solve_fiber(MATHIEU, BASIS, zeta, 1).energies[0]
            got = float(np.asarray(sym.fn(np.array([zeta])))[0])
            assert abs(got - want) <= 1e-12

    def test_periodic_extension(self):
        sym = band_multiplier_symbol(MATHIEU, BASIS, 0)
        z = np.array([0.25, 1.5])
        a = np.asarray(sym.fn(z))
        b = np.asarray(sym.fn(z + 2.0 * math.pi))
        assert np.allclose(a, b, atol=1e-12)


class TestPhaseAlignedDistance:
    def test_global_phase_invariant(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            v = rng.standard_normal(64) + 1j * rng.standard_normal(64)
            f = WaveField(8, 0.125, values=v)
            g = f.with_values(np.exp(0.73j) * v)
            assert phase_aligned_distance(f, g) <= 1e-7

    def test_orthogonal_fields(self):
        v = np.zeros(64, dtype=complex)
        w = np.zeros(64, dtype=complex)
        v[3] = 1.0
        w[5] = 1.0
        f = WaveField(8, 0.125, spectrum=v)
        g = WaveField(8, 0.125, spectrum=w)
        want = math.sqrt(f.norm() ** 2 + g.norm() ** 2)
        assert abs(phase_aligned_distance(f, g) - want) <= 1e-12


class TestBorderMass:
    def test_centered_packet_clears_guard(self):
        N = 512
        x = np.arange(N) * (16.0 / N)
        f = WaveField(16, 0.125, values=np.exp(-((x - 8.0) ** 2)))
        assert border_mass_fraction(f) <= 1e-10

    def test_border_packet_trips_guard(self):
        N = 512
        x = np.arange(N) * (16.0 / N)
        f = WaveField(16, 0.125, values=np.exp(-(x ** 2)))
        assert border_mass_fraction(f) >= 0.4


# -- reduced sweeps ------------------------------------------------------------------


REDUCED = [0.125, 0.0625, 0.03125]


class TestReducedSweeps:
    def test_e3_values_and_rate(self):
        cfg = default_config("E3")
        cfg["eps"] = list(REDUCED)
        rep = run_experiment(cfg)
        assert rep.passed
        vals = [r["residual_sup"] for r in rep.sweep]
        # frozen from two independent runs of the same configuration
        assert vals[0] == pytest.approx(3.8584e-04, rel=1e-3)
        assert vals[1] == pytest.approx(1.9194e-04, rel=1e-3)
        assert 0.9 <= rep.fits["residual_sup"]["slope"] <= 1.1

    def test_e4_off_critical_and_transport(self):
        cfg = default_config("E4")
        cfg["eps"] = list(REDUCED)
        rep = run_experiment(cfg)
        assert rep.passed
        small = min(rep.sweep, key=lambda r: r["eps"])
        assert small["off_critical_mass"] <= 1e-6
        tvals = rep.extras["transport"]["time_averaged_local_density"]
        assert all(b < a for a, b in zip(tvals, tvals[1:]))

    def test_e2_distance_scale(self):
        cfg = default_config("E2")
        cfg["eps"] = [0.125, 0.0625]
        rep = run_experiment(cfg)
        vals = [r["band_flow_distance"] for r in rep.sweep]
        assert vals[0] == pytest.approx(1.937e-02, rel=5e-3)
        assert vals[0] / vals[1] == pytest.approx(2.0, rel=0.05)

    def test_e6_reduced(self):
        cfg = default_config("E6")
        cfg["eps"] = [0.125, 0.0625]
        rep = run_experiment(cfg)
        vals = [r["weak_distance"] for r in rep.sweep]
        assert vals[1] < vals[0] <= 1e-3

    def test_member_failure_reported_not_raised(self):
        cfg = default_config("E3")
        cfg["eps"] = list(REDUCED)
        cfg["L"] = 4  # too small a box; the wrap guard must trip
        cfg["envelope"] = {"family": "gaussian", "width": 1.0}
        rep = run_experiment(cfg)
        assert rep.partial
        assert not rep.passed
        assert any("border" in msg for msg in rep.failures)


class TestDeterminism:
    def test_byte_identical_artifacts(self, tmp_path):
        cfg = default_config("E3")
        cfg["eps"] = list(REDUCED)
        a = tmp_path / "a"
        b = tmp_path / "b"
        run_experiment(cfg, out_dir=a, threads=2)
        run_experiment(cfg, out_dir=b, threads=2)
        for name in ("E3_report.json", "E3_metrics.csv", "E3_final.bin"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_runtime_sidecar_not_in_report(self, tmp_path):
        cfg = default_config("E3")
        cfg["eps"] = list(REDUCED)
        run_experiment(cfg, out_dir=tmp_path)
        doc = json.loads((tmp_path / "E3_report.json").read_text())
        assert "wall" not in json.dumps(doc)
        side = json.loads((tmp_path / "E3_runtime.json").read_text())
        assert side["wall_seconds_total"] > 0


# -- command line --------------------------------------------------------------------


class TestCli:
    def test_bands_writes_table(self, tmp_path):
        cfgp = tmp_path / "c.json"
        cfgp.write_text(json.dumps({
            "potential": {"family": "cosine", "amplitude": 1.0},
            "dim": 1, "bands": [0, 1], "n_grid": 16,
        }))
        rc = cli.main(["bands", "--config", str(cfgp), "--out", str(tmp_path)])
        assert rc == 0
        header = (tmp_path / "bands.csv").read_text().splitlines()[0]
        assert header == "xi_1,band,energy"

    def test_critical_finds_both_extrema(self, tmp_path):
        cfgp = tmp_path / "c.json"
        cfgp.write_text(json.dumps({
            "potential": {"family": "cosine", "amplitude": 1.0},
            "dim": 1, "band": 0, "n_grid": 16,
        }))
        rc = cli.main(["critical", "--config", str(cfgp),
                       "--out", str(tmp_path)])
        assert rc == 0
        doc = json.loads((tmp_path / "critical.json").read_text())
        assert len(doc["points"]) == 2

    def test_evolve_then_wigner(self, tmp_path):
        cfgp = tmp_path / "evo.json"
        cfgp.write_text(json.dumps({
            "equation": "multiplier", "eps": 0.125, "L": 16,
            "resolution": 4, "band": 0, "xi0": [0.0],
            "T": 0.25, "snapshots": 2, "vext": None,
        }))
        rc = cli.main(["evolve", "--config", str(cfgp),
                       "--out", str(tmp_path)])
        assert rc == 0
        manifest = json.loads((tmp_path / "evolve_manifest.json").read_text())
        assert manifest["equation"] == "multiplier"
        assert len(manifest["files"]) == 3
        wigp = tmp_path / "wig.json"
        wigp.write_text(json.dumps({
            "snapshot": str(tmp_path / "evolve_002.bin")}))
        rc = cli.main(["wigner", "--config", str(wigp),
                       "--out", str(tmp_path)])
        assert rc == 0
        header = (tmp_path / "wigner.csv").read_text().splitlines()[0]
        assert header == "x,xi,W"

    def test_report_aggregates_and_flags_failure(self, tmp_path):
        (tmp_path / "E1_report.json").write_text(json.dumps(
            {"experiment": "E1", "passed": True, "checks": [], "failures": []}))
        assert cli.main(["report", "--out", str(tmp_path)]) == 0
        (tmp_path / "E2_report.json").write_text(json.dumps(
            {"experiment": "E2", "passed": False,
             "checks": [{"passed": False}], "failures": []}))
        assert cli.main(["report", "--out", str(tmp_path)]) == 1

    def test_report_empty_dir_fails(self, tmp_path):
        assert cli.main(["report", "--out", str(tmp_path)]) == 1

    def test_experiment_name_mismatch(self, tmp_path):
        cfgp = tmp_path / "c.json"
        cfgp.write_text(json.dumps({"experiment": "E3"}))
        with pytest.raises(SystemExit):
            cli.main(["experiment", "E4", "--config", str(cfgp)])

    def test_entry_point_runs(self):
        out = subprocess.run(
            [sys.executable, "-m", "blochlab.cli", "--help"],
            capture_output=True, text=True)
        assert out.returncode == 0
        assert "experiment" in out.stdout
