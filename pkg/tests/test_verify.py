import math

import numpy as np
import pytest

from nsv import coupling, fluid, kinetic, verify
from nsv.core import (Grid, ParticleEnsemble, PhaseGridDensity, SimConfig, VelocityField, maxwellian_phase_grid,
                      sample_maxwellian)


def synthetic_ledger(energies, dt=0.1, D=0.0):
    led = coupling.EnergyLedger(initial=coupling.EnergyRow(energies[0], 0.0, 0.0, 0.0, 1.0), dt=dt)
    for n, E in enumerate(energies[1:], start=1):
        led.append({"step": n, "time": n * dt, "E_fluid": E, "E_kin": 0.0, "D_visc": D, "D_drag": 0.0,
                    "residual": 0.0, "mass": 1.0, "max_u": 0.0, "cfl": 0.0})
    return led


class TestReport:
    def test_pass_rule_uses_declared_slack(self):
        assert verify.EstimateReport("a", 1.1, 1.0, slack=0.1).passed
        assert not verify.EstimateReport("a", 1.11, 1.0, slack=0.1).passed
        assert verify.EstimateReport("a", 0.0, 0.0).passed

    def test_table_and_aggregate(self):
        reps = [verify.EstimateReport("ok", 1.0, 2.0), verify.EstimateReport("diag", 5.0, 1.0, mandatory=False)]
        table = verify.format_table(reps)
        assert "PASS" in table and "info" in table and "FAIL" not in table
        assert verify.all_passed(reps)
        assert not verify.all_passed(reps + [verify.EstimateReport("bad", 2.0, 1.0)])

    def test_as_dict(self):
        d = verify.EstimateReport("x", 1.0, 2.0, meta={"C": 3}).as_dict()
        assert d["passed"] is True and d["meta"] == {"C": 3}


class TestMaximumPrinciple:
    def test_zero_density_passes(self):
        g = Grid(1.0, 1.0, 4, 4, False)
        snaps = [PhaseGridDensity(np.zeros((4, 4, 6, 6)), g, 1.0, time=t) for t in (0.0, 0.5)]
        assert verify.check_maximum_principle(snaps)[0].passed

    def test_constant_density_at_rest_hits_the_cap_exactly(self):
        # interior velocity nodes of a velocity-uniform f grow by exactly e^{2t};
        # a wide velocity box keeps the edge erosion away from the centre node
        g = Grid(1.0, 1.0, 4, 4, False)
        fg = PhaseGridDensity.from_values(np.full((4, 4, 33, 33), 0.25), g, 1.0)
        snaps = [fg]
        for _ in range(5):
            snaps.append(kinetic.sl_step(snaps[-1], VelocityField.zeros(g), math.inf, 0.1))
        assert verify.check_maximum_principle(snaps)[0].passed
        for s in snaps[1:]:
            assert kinetic.lp_norm(s, math.inf) == pytest.approx(0.25 * math.exp(2 * s.time), rel=1e-14)
        assert verify.check_maximum_principle(snaps)[0].meta["cap_factor_t1"] == pytest.approx(7.389056, rel=1e-7)

    def test_violation_detected(self):
        g = Grid(1.0, 1.0, 4, 4, False)
        f0 = PhaseGridDensity.from_values(np.ones((4, 4, 4, 4)), g, 1.0)
        bad = PhaseGridDensity.from_values(np.full((4, 4, 4, 4), math.exp(0.2) * 1.0001), g, 1.0, time=0.1)
        assert not verify.check_maximum_principle([f0, bad])[0].passed


class TestMoments:
    def test_maxwellian_constant_matches_gaussian_moments(self):
        g = Grid(1.0, 1.0, 2, 2, False)
        rho, theta = 1.0, 0.1
        fg = maxwellian_phase_grid(g, rho, (0.0, 0.0), theta, 2.5, 97)  # odd: v=0 is a node
        m6 = 48 * theta ** 3 * rho
        finf = rho / (2 * math.pi * theta)
        C = rho / ((finf + 1) * m6 ** 0.25)
        assert verify._moment_constant(fg) == pytest.approx(C, rel=2e-3)

    def test_reports_on_phase_grid_run(self):
        p = dict(N=8, nv=12, vmax=1.6, temperature=0.1, amplitude=1.0, dt=0.02, T=0.2)
        snaps, _ = verify.phase_grid_run(p)
        reps = verify.check_moment_interpolation([k for _, _, k in snaps])
        assert all(r.passed for r in reps if r.mandatory)
        assert reps[2].mandatory is False and reps[2].lhs > 0


class TestMass:
    def test_particles_exact(self):
        rep = verify.check_mass_conservation([2.0, 2.0, 2.0], "particles")
        assert rep.passed and rep.lhs == 0.0
        assert not verify.check_mass_conservation([2.0, 2.0 + 1e-15], "particles").passed

    def test_phase_grid_relative(self):
        assert verify.check_mass_conservation([1.0, 1.005], "phase-grid", 1e-2).passed
        assert not verify.check_mass_conservation([1.0, 0.98], "phase-grid", 1e-2).passed


class TestEnergyChecks:
    def test_decreasing_energy_passes(self):
        reps = verify.check_energy_inequality(synthetic_ledger([1.0, 0.9, 0.8], D=0.5), C=0.0)
        assert all(r.passed for r in reps)

    def test_growth_beyond_tolerance_fails(self):
        reps = verify.check_energy_inequality(synthetic_ledger([1.0, 1.1, 1.2]), C=0.0)
        assert not reps[0].passed
        # the same growth is inside C dt t for large enough C
        assert verify.check_energy_inequality(synthetic_ledger([1.0, 1.1, 1.2]), C=20.0)[0].passed

    def test_refinement_report(self):
        led = synthetic_ledger([1.0, 0.9])
        res = verify.RefinementResult(0.1, -0.2, -0.1, 1.0, led, led)
        assert res.ratio == pytest.approx(2.0) and res.constant == pytest.approx(2.0)
        assert all(r.passed for r in verify.check_refinement(res))
        res = verify.RefinementResult(0.1, -0.4, -0.1, 1.0, led, led)
        assert not verify.check_refinement(res)[0].passed


class TestStability:
    def test_slope_fit(self):
        eps = [1e-2, 5e-3, 2.5e-3]
        assert verify._slope(eps, [3 * e for e in eps]) == pytest.approx(1.0)
        assert verify._slope(eps, [e * e for e in eps]) == pytest.approx(2.0)
        assert math.isnan(verify._slope(eps, [0.0, 1.0, 2.0]))

    @pytest.mark.parametrize("target", ["u", "f"])
    def test_small_experiment_is_linear(self, target):
        g = Grid(1.0, 1.0, 8, 8, False)
        ens = sample_maxwellian(1.0, (0.0, 0.0), 0.1, 300, 0, g)
        res = verify.stability_experiment(fluid.box_vortex(g), ens, SimConfig(dt=2e-3, t_end=0.02),
                                          [1e-2, 5e-3, 2.5e-3], target=target)
        assert res.zero_identical
        assert abs(res.slope - 1.0) < 0.1
        assert all(r.passed for r in res.reports() if r.mandatory)

    def test_unknown_target(self):
        g = Grid(1.0, 1.0, 4, 4, False)
        with pytest.raises(ValueError):
            verify.stability_experiment(fluid.box_vortex(g), ParticleEnsemble.empty(), SimConfig(dt=1e-3, t_end=1e-3),
                                        [1e-2], target="p")

    def test_perturbation_is_unit_and_divergence_free(self):
        for periodic in (False, True):
            g = Grid(1.0, 1.0, 16, 16, periodic)
            du = verify.smooth_perturbation(g)
            assert du.l2() == pytest.approx(1.0)
            assert np.max(np.abs(fluid.divergence(du))) < 1e-12


class TestSuites:
    def test_unknown_suite(self):
        with pytest.raises(KeyError):
            verify.run_suite("bogus")

    def test_maxprinciple_suite(self):
        reps = verify.run_suite("maxprinciple")
        assert verify.all_passed(reps)
        assert reps[0].lhs <= 1.0
