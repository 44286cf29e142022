import numpy as np
import pytest

from co2surro.solver import (
    CFLError,
    PercolationError,
    SolverConfig,
    SolverState,
    boundary_fluxes,
    divergence,
    generate_dataset,
    init_porosity,
    initial_state,
    simulate,
    solve_flow,
    solve_steady_concentration,
    step_dissolution,
    step_transport,
)

# inlet pressure scaled with the smaller grid to keep the same velocity scale
FAST = dict(nx=32, ny=32, dt=0.1, snapshot_interval=2, n_snapshots=5, inlet_pressure=60.0)


def small_config(**overrides):
    kwargs = {**FAST, **overrides}
    return SolverConfig(**kwargs)


class TestInitPorosity:
    def test_same_seed_identical(self):
        cfg = small_config(seed=7)
        assert np.array_equal(init_porosity(cfg), init_porosity(cfg))

    def test_threshold_minus_inf_gives_uniform_max(self):
        cfg = small_config(porosity_threshold=-1e9)
        eps = init_porosity(cfg)
        assert np.all(eps == cfg.porosity_max0)

    def test_zero_correlation_length_is_white_noise(self):
        # threshold low enough that uncorrelated pores still percolate
        cfg = small_config(porosity_corr_len=0.0, porosity_threshold=-0.5, seed=3)
        eps = init_porosity(cfg)
        assert set(np.unique(eps)) == {cfg.porosity_min, cfg.porosity_max0}
        # white-noise thresholding flips between neighbours at pixel scale
        flips = (eps[:, 1:] != eps[:, :-1]).mean()
        assert 0.25 < flips < 0.75

    def test_values_within_bounds(self):
        eps = init_porosity(small_config(seed=1))
        assert eps.min() >= 0.2 and eps.max() <= 0.85

    def test_no_percolation_raises_after_retries(self):
        cfg = small_config(porosity_threshold=1e9, max_percolation_retries=2)
        with pytest.raises(PercolationError):
            init_porosity(cfg)


class TestFlow:
    def test_uniform_porosity_gives_linear_profile(self):
        cfg = small_config()
        eps = np.full((32, 32), 0.5)
        p, ux, uy = solve_flow(eps, cfg)
        # pressure varies linearly across columns, constant along rows
        col_profile = p.mean(axis=0)
        diffs = np.diff(col_profile)
        assert np.allclose(diffs, diffs[0], atol=1e-8)
        assert np.allclose(p, col_profile[None, :], atol=1e-8)
        assert np.allclose(ux, ux[0, 0], atol=1e-8)
        assert np.abs(uy).max() < 1e-8

    def test_symmetric_porosity_antisymmetric_uy(self):
        cfg = small_config(seed=5)
        half = init_porosity(cfg)[:16]
        eps = np.vstack([half, half[::-1]])
        _, _, uy = solve_flow(eps, cfg)
        assert np.abs(uy + uy[::-1]).max() < 1e-8

    def test_single_channel_concentrates_flux(self):
        cfg = small_config()
        eps = np.full((32, 32), 0.2)
        eps[14:18, :] = 0.85
        _, ux, uy = solve_flow(eps, cfg)
        inlet, outlet = boundary_fluxes(ux, cfg.dx)
        assert inlet == pytest.approx(outlet, abs=1e-8 * max(1.0, abs(inlet)))
        channel_flux = ux[14:18, 16].sum()
        assert channel_flux / ux[:, 16].sum() > 0.9

    def test_divergence_free_on_random_field(self):
        cfg = small_config(seed=2)
        eps = init_porosity(cfg)
        _, ux, uy = solve_flow(eps, cfg)
        umax = max(np.abs(ux).max(), np.abs(uy).max())
        assert np.abs(divergence(ux, uy, cfg.dx)).max() <= 1e-8 * max(1.0, umax)


class TestTransport:
    def test_closed_domain_conserves_mass(self):
        cfg = small_config(D=0.1, k_r=0.0)
        rng = np.random.default_rng(0)
        c = rng.random((32, 32))
        state = SolverState(
            c=c,
            eps=np.full((32, 32), 0.5),
            u_x=np.zeros((32, 33)),
            u_y=np.zeros((33, 32)),
            p=np.zeros((32, 32)),
        )
        mass = state.c.sum() * cfg.dx ** 2
        for _ in range(25):
            state.c = step_transport(state, cfg)
            new_mass = state.c.sum() * cfg.dx ** 2
            assert abs(new_mass - mass) <= 1e-10 * max(1.0, mass)
            mass = new_mass

    def test_advected_blob_matches_fine_grid_reference(self):
        # oracle: the same scheme at dx/4, dt/4 over the same physical time
        def run(nx, dx, dt, steps, u):
            cfg = SolverConfig(nx=nx, ny=16, dx=dx, dt=dt, D=0.0, k_r=0.0,
                               inlet_concentration=0.0, snapshot_interval=1, n_snapshots=4)
            x = (np.arange(nx) + 0.5) * dx
            c = np.exp(-0.5 * ((x - 16.0) / 3.0) ** 2)[None, :].repeat(16, axis=0)
            state = SolverState(
                c=c,
                eps=np.full((16, nx), 0.5),
                u_x=np.full((16, nx + 1), u),
                u_y=np.zeros((17, nx)),
                p=np.zeros((16, nx)),
            )
            for _ in range(steps):
                state.c = step_transport(state, cfg)
            centroid = (state.c[0] * x).sum() / state.c[0].sum()
            return centroid

        coarse = run(nx=64, dx=1.0, dt=0.4, steps=50, u=1.0)
        fine = run(nx=256, dx=0.25, dt=0.1, steps=200, u=1.0)
        assert abs(coarse - fine) < 1.0  # within one coarse cell
        assert abs(coarse - (16.0 + 1.0 * 0.4 * 50)) < 1.0  # and matches analytic advection

    def test_zero_everywhere_stays_zero(self):
        cfg = small_config(inlet_concentration=0.0)
        state = initial_state(cfg, seed=1)
        state.c = np.zeros_like(state.c)
        c = step_transport(state, cfg)
        assert np.all(c == 0.0)

    def test_concentration_stays_nonnegative(self):
        cfg = small_config(seed=3)
        state = initial_state(cfg, seed=3)
        for _ in range(10):
            state.c = step_transport(state, cfg)
            assert state.c.min() >= 0.0

    def test_cfl_violation_raises_before_stepping(self):
        cfg = small_config(dt=10.0)
        state = initial_state(small_config(), seed=1)
        c_before = state.c.copy()
        with pytest.raises(CFLError):
            step_transport(state, cfg)
        assert np.array_equal(state.c, c_before)


class TestDissolution:
    def make_state(self, c, eps):
        shape = np.shape(c)
        return SolverState(
            c=np.asarray(c, dtype=float),
            eps=np.asarray(eps, dtype=float),
            u_x=np.zeros((shape[0], shape[1] + 1)),
            u_y=np.zeros((shape[0] + 1, shape[1])),
            p=np.zeros(shape),
        )

    def test_zero_concentration_leaves_porosity(self):
        cfg = small_config()
        state = self.make_state(np.zeros((16, 16)), np.full((16, 16), 0.4))
        _, eps_new, _ = step_dissolution(state, cfg)
        assert np.array_equal(eps_new, state.eps)

    def test_fully_dissolved_cell_unchanged(self):
        cfg = small_config()
        state = self.make_state(np.full((16, 16), 2.0), np.ones((16, 16)))
        _, eps_new, _ = step_dissolution(state, cfg)
        assert np.array_equal(eps_new, np.ones((16, 16)))

    def test_single_cell_update_formula(self):
        cfg = small_config(k_r=0.3, dt=0.1)
        c0, eps0 = 0.7, 0.4
        state = self.make_state(np.full((16, 16), c0), np.full((16, 16), eps0))
        c_new, eps_new, clamped = step_dissolution(state, cfg)
        assert eps_new[0, 0] == pytest.approx(eps0 + cfg.dt * cfg.k_r * c0 * (1 - eps0), rel=1e-12)
        assert c_new[0, 0] == pytest.approx(c0 - cfg.alpha * cfg.dt * cfg.k_r * c0 * (1 - eps0), rel=1e-12)
        assert clamped == 0

    def test_sink_clamped_and_counted(self):
        cfg = small_config(k_r=100.0, alpha=100.0, dt=1.0)
        state = self.make_state(np.full((4, 4), 0.5), np.full((4, 4), 0.2))
        c_new, _, clamped = step_dissolution(state, cfg)
        assert np.all(c_new >= 0.0)
        assert clamped == 16


class TestSteadyConcentration:
    def test_steady_field_is_near_stationary(self):
        cfg = small_config(seed=4)
        state = initial_state(cfg, seed=4)
        c0 = state.c.copy()
        c1 = step_transport(state, cfg)
        sink = cfg.alpha * cfg.dt * cfg.k_r * c1 * (1 - state.eps)
        drift = np.abs(c1 - sink - c0).max()
        assert drift < 5e-3  # splitting error only, no injection transient
        assert c0.max() <= 1.0 + 1e-9

    def test_steady_solve_bounded(self):
        cfg = small_config(seed=6)
        eps = init_porosity(cfg, seed=6)
        _, ux, uy = solve_flow(eps, cfg)
        c = solve_steady_concentration(eps, ux, uy, cfg)
        assert c.min() >= 0.0 and c.max() <= cfg.inlet_concentration + 1e-9


class TestSimulate:
    def test_shape_contract(self):
        cfg = small_config()
        data = generate_dataset(2, cfg, seeds=[0, 1])
        arr = np.stack([s.to_array() for s in data])
        assert arr.shape == (2, 5, 4, 32, 32)

    def test_zero_rate_keeps_porosity_constant(self):
        series = simulate(small_config(k_r=0.0), seed=2)
        arr = series.to_array()
        assert np.array_equal(arr[0, 1], arr[-1, 1])

    def test_same_seed_bit_identical(self):
        cfg = small_config()
        a = simulate(cfg, seed=5).to_array()
        b = simulate(cfg, seed=5).to_array()
        assert np.array_equal(a, b)

    def test_porosity_monotone_and_divergence_free(self):
        series = simulate(small_config(), seed=1)
        arr = series.to_array()
        poro = arr[:, 1].astype(np.float64)
        assert (np.diff(poro, axis=0) >= -1e-7).all()

    def test_distinct_seeds_enforced(self):
        with pytest.raises(ValueError, match="distinct"):
            generate_dataset(2, small_config(), seeds=[3, 3])

    def test_error_carries_sim_id(self):
        cfg = small_config(porosity_threshold=1e9, max_percolation_retries=1)
        with pytest.raises(PercolationError, match=r"sim000"):
            generate_dataset(1, cfg, seeds=[4])
