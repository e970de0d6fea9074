import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsv import fluid, galerkin
from nsv.core import Grid, ParticleEnsemble, SimConfig, VelocityField, sample_maxwellian


@pytest.fixture(scope="module")
def box_modes():
    g = Grid(1.0, 1.0, 12, 12, False)
    md = galerkin.build_stokes_modes(g, 10)
    return md, galerkin.advection_tensor(md)


@pytest.fixture(scope="module")
def small_coupling():
    g = Grid(1.0, 1.0, 16, 16, False)
    u0 = fluid.box_vortex(g, 1.0)
    kin = sample_maxwellian(0.05, (0.2, 0.0), 0.05, 2000, 0, g)
    return g, u0, kin


class TestStokesModes:
    def test_orthonormal_and_divergence_free(self, box_modes):
        md, _ = box_modes
        assert np.allclose(md.gram(), np.eye(md.m), atol=1e-10)
        for i in range(md.m):
            phi = md.mode(i)
            assert np.max(np.abs(fluid.divergence(phi))) < 1e-10
            assert np.all(phi.ux[[0, -1]] == 0) and np.all(phi.uy[:, [0, -1]] == 0)

    def test_sorted_positive_with_small_residuals(self, box_modes):
        md, _ = box_modes
        assert md.eigenvalues[0] > 0
        assert np.all(np.diff(md.eigenvalues) >= 0)
        assert np.all(md.residuals <= 1e-8 * np.maximum(1.0, md.eigenvalues))

    def test_first_eigenvalue_near_continuum(self):
        # first Stokes eigenvalue of the unit square is about 52.34
        md = galerkin.build_stokes_modes(Grid(1.0, 1.0, 24, 24, False), 1)
        assert md.eigenvalues[0] == pytest.approx(52.34, rel=0.03)

    def test_periodic_eigenvalues_match_discrete_symbol(self):
        g = Grid(1.0, 1.0, 8, 8, True)
        m = 16
        md = galerkin.build_stokes_modes(g, m)
        sym = [0.0, 0.0]  # two constant modes
        for k in range(g.Nx):
            for l in range(g.Ny):
                if k or l:
                    sym.append(4 / g.hx ** 2 * math.sin(math.pi * k / g.Nx) ** 2
                               + 4 / g.hy ** 2 * math.sin(math.pi * l / g.Ny) ** 2)
        sym = np.sort(sym)[:m]
        assert np.allclose(md.eigenvalues, sym, atol=1e-8 * sym.max())
        # the first nonzero one sits near (2 pi)^2, up to the O(h^2) symbol error
        assert md.eigenvalues[2] == pytest.approx(4 * math.pi ** 2, rel=(math.pi / g.Nx) ** 2 / 3 + 1e-3)

    def test_sign_convention(self, box_modes):
        md, _ = box_modes
        for row in md.basis:
            nz = np.flatnonzero(np.abs(row) > 1e-12 * np.max(np.abs(row)))
            assert row[nz[0]] > 0

    def test_deterministic(self, box_modes):
        md, _ = box_modes
        again = galerkin.build_stokes_modes(md.grid, md.m)
        assert np.array_equal(again.basis, md.basis)

    @pytest.mark.parametrize("m", [0, 37])
    def test_mode_cap(self, m):
        with pytest.raises(ValueError):
            galerkin.build_stokes_modes(Grid(1.0, 1.0, 12, 12, False), m)

    def test_projection_is_idempotent(self, box_modes):
        md, _ = box_modes
        u = fluid.box_vortex(md.grid, 1.0)
        once = md.project(u)
        twice = md.project(once)
        assert (twice - once).l2() < 1e-12 * max(1.0, once.l2())


class TestAdvectionTensor:
    def test_skew_symmetry(self, box_modes):
        _, A = box_modes
        assert np.max(np.abs(A + A.transpose(2, 1, 0))) < 1e-10

    def test_matches_direct_inner_products(self, box_modes):
        md, A = box_modes
        i, j, k = 3, 1, 4
        c = fluid.convection(md.mode(j), md.mode(k), upwind=0.0)
        assert A[i, j, k] == pytest.approx(-c.dot(md.mode(i)), abs=1e-12)

    @settings(max_examples=30)
    @given(seed=st.integers(0, 2 ** 31))
    def test_energy_neutral(self, box_modes, seed):
        md, A = box_modes
        g = np.random.default_rng(seed).standard_normal(md.m)
        st_ = galerkin.GalerkinState(g, 0.0, md, A, mu=0.0)
        assert abs(g @ galerkin.galerkin_rhs(st_)) < 1e-10 * max(1.0, g @ g)


class TestCoefficientODE:
    def test_zero_state(self, box_modes):
        md, A = box_modes
        st_ = galerkin.GalerkinState(np.zeros(md.m), 0.0, md, A)
        assert np.all(galerkin.galerkin_rhs(st_, np.zeros(md.m)) == 0)
        assert np.all(galerkin.galerkin_rhs(st_, VelocityField.zeros(md.grid)) == 0)

    def test_single_mode_exponential_decay(self):
        md = galerkin.build_stokes_modes(Grid(1.0, 1.0, 8, 8, False), 1)
        A = galerkin.advection_tensor(md)
        dt = 1e-3
        tr = galerkin.integrate_coefficients(md, A, [0.7], np.zeros((1000, 1)), dt, mu=1.0)
        exact = 0.7 * np.exp(-md.eigenvalues[0] * tr.times)
        assert np.max(np.abs(tr.g[:, 0] - exact)) < 1e-8

    def test_inviscid_unforced_energy_drift(self, box_modes):
        md, A = box_modes
        g0 = np.random.default_rng(0).standard_normal(md.m)
        tr = galerkin.integrate_coefficients(md, A, g0, np.zeros((200, md.m)), 5e-3, mu=0.0)
        E = tr.energy()
        assert np.max(np.abs(E - E[0])) <= 1e-8

    def test_forced_energy_balance_fourth_order(self, box_modes):
        md, A = box_modes
        rng = np.random.default_rng(1)
        forces = rng.standard_normal((100, md.m))
        g0 = rng.standard_normal(md.m)

        def imbalance(substeps):
            tr = galerkin.integrate_coefficients(md, A, g0, forces, 1e-3, mu=1.0, substeps=substeps)
            E = tr.energy()
            return abs(E[-1] + tr.dissipation[-1] - E[0] - tr.work[-1]) / E[0]

        e4, e8 = imbalance(4), imbalance(8)
        assert e4 < 1e-6
        assert 10 < e4 / e8 < 24

    def test_config_rejects_few_substeps(self):
        with pytest.raises(ValueError):
            galerkin.GalerkinConfig(substeps=2)


class TestPicard:
    def test_decoupled_converges_in_one_iteration(self, small_coupling):
        g, u0, _ = small_coupling
        cfg = galerkin.GalerkinConfig(m=4, dt=1e-3, t_end=0.02)
        solver = galerkin.ParticleKineticSolver(ParticleEnsemble.empty(), g)
        sol = galerkin.fixed_point_solve(u0, cfg, 2.0, solver)
        assert sol.iterations == 1 and sol.log[0].delta_L2 == 0.0
        lhs, rhs = sol.energy_balance()
        assert lhs <= rhs * (1 + 1e-8)

    def test_tiny_coupling_contracts_fast(self, small_coupling):
        g, u0, kin = small_coupling
        tiny = ParticleEnsemble(kin.positions, kin.velocities, np.full(kin.count, 1e-6 / kin.count))
        cfg = galerkin.GalerkinConfig(m=4, dt=1e-3, t_end=0.02)
        sol = galerkin.fixed_point_solve(u0, cfg, 4.0, galerkin.ParticleKineticSolver(tiny, g))
        assert sol.iterations <= 3
        ratios = [h.contraction_ratio for h in sol.log[1:]]
        assert all(r < 1e-2 for r in ratios)

    def test_solution_is_a_fixed_point(self, small_coupling):
        g, u0, kin = small_coupling
        cfg = galerkin.GalerkinConfig(m=6, dt=1e-3, t_end=0.02)
        solver = galerkin.ParticleKineticSolver(kin, g)
        sol = galerkin.fixed_point_solve(u0, cfg, 2.0, solver)
        again, _ = galerkin.apply_map(sol.modes, galerkin.advection_tensor(sol.modes), sol.trajectory.g[0],
                                      sol.fields(), solver, 2.0, cfg)
        assert galerkin.trajectory_distance(again.g, sol.trajectory.g, cfg.dt) < 2 * cfg.tol
        lhs, rhs = sol.energy_balance()
        assert lhs <= rhs * (1 + 1e-8)

    def test_non_convergence_carries_history(self, small_coupling):
        g, u0, kin = small_coupling
        cfg = galerkin.GalerkinConfig(m=4, dt=1e-3, t_end=0.02, max_iter=1)
        with pytest.raises(galerkin.PicardDivergence) as exc:
            galerkin.fixed_point_solve(u0, cfg, 2.0, galerkin.ParticleKineticSolver(kin, g))
        assert len(exc.value.history) == 1 and exc.value.history[0].delta_L2 > cfg.tol

    def test_rejects_nonpositive_lambda(self, small_coupling):
        g, u0, kin = small_coupling
        with pytest.raises(ValueError):
            galerkin.fixed_point_solve(u0, galerkin.GalerkinConfig(m=2), 0.0, galerkin.ParticleKineticSolver(kin, g))


class TestSweeps:
    def test_m_sweep_error_decreases(self, small_coupling):
        g, u0, kin = small_coupling
        rows = galerkin.m_sweep(u0, kin, galerkin.GalerkinConfig(dt=1e-3, t_end=0.05), [4, 8, 16])
        err = [r["error_L2"] for r in rows]
        assert err[0] > err[1] > err[2]
        for r in rows:
            lhs, rhs = r["solution"].energy_balance()
            assert lhs <= rhs * (1 + 1e-8)

    def test_lambda_sweep(self, small_coupling):
        g, _, kin = small_coupling
        u0 = fluid.box_vortex(g, 4.0)
        rows = galerkin.lambda_sweep(u0, kin, SimConfig(dt=1e-3, t_end=0.03), [0.5, 2.0, 8.0, 100.0])
        diff = [r["diff_L2"] for r in rows]
        meas = [r["mask_measure"] for r in rows]
        assert all(a >= b for a, b in zip(diff, diff[1:]))
        assert all(a >= b for a, b in zip(meas, meas[1:]))
        assert diff[0] > 0
        assert rows[-1]["lam"] > rows[-1]["max_u"] and diff[-1] == 0.0 and meas[-1] == 0.0
        for r in rows:
            assert r["mask_measure"] <= 3 * r["chebyshev_bound"]

    def test_lambda_sweep_requires_increasing(self, small_coupling):
        g, u0, kin = small_coupling
        with pytest.raises(ValueError):
            galerkin.lambda_sweep(u0, kin, SimConfig(dt=1e-3, t_end=0.002), [2.0, 1.0])

    def test_mask_measure_examples(self):
        g = Grid(1.0, 1.0, 4, 4, True)
        u = VelocityField(np.zeros(g.ux_shape), np.zeros(g.uy_shape), g)
        assert galerkin.mask_measure(u, 1.0) == 0.0 and galerkin.mask_measure(u, math.inf) == 0.0
        fast = VelocityField(np.full(g.ux_shape, 3.0), np.zeros(g.uy_shape), g)
        assert galerkin.mask_measure(fast, 1.0) == pytest.approx(1.0)
