"""Desk-scale synthetic data generator: Darcy-proxy flow with reactive transport.

Produces simulations with the same four fields and qualitative behaviour
(channeling flow, dissolving porosity) as pore-scale CO2-injection data.
This is a deliberate fidelity trade: quasi-static incompressible Darcy flow
with a Kozeny-like permeability K(eps) = eps^3 stands in for pore-scale
Navier-Stokes, and a volumetric first-order dissolution law stands in for
interface reaction tracking. Good enough to train and rank surrogates on,
not a physical reservoir model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .data import FieldSnapshot, SimulationSeries

DIVERGENCE_TOL = 1e-8


class SolverError(Exception):
    """Flow solve failed or produced an unusable field."""


class CFLError(Exception):
    """Transport step requested with a timestep above the CFL bound."""


class PercolationError(Exception):
    """No connected pore path from inlet to outlet after bounded retries."""


@dataclass
class SolverConfig:
    nx: int = 128
    ny: int = 128
    dx: float = 1.0
    dt: float = 0.1
    snapshot_interval: int = 12
    n_snapshots: int = 60
    D: float = 0.1                  # diffusion coefficient
    k_r: float = 0.3                # dissolution rate constant (per unit c)
    alpha: float = 0.6              # stoichiometric consumption of c per unit dissolved
    inlet_pressure: float = 250.0   # kinematic pressure at the left boundary
    outlet_pressure: float = 0.0
    inlet_concentration: float = 1.0
    porosity_corr_len: float = 6.0  # Gaussian smoothing length of the initial noise field
    porosity_threshold: float = -0.15  # pore where smoothed unit-variance noise exceeds this
    porosity_min: float = 0.2
    porosity_max0: float = 0.85
    initial_concentration: str = "steady"  # "steady": established plume; "zero": injection start
    seed: int = 0
    max_percolation_retries: int = 20

    def __post_init__(self) -> None:
        if self.nx < 16 or self.ny < 16:
            raise ValueError("grid must be at least 16x16")
        if self.dt <= 0 or self.dx <= 0:
            raise ValueError("dt and dx must be positive")
        if not (0.0 < self.porosity_min <= self.porosity_max0 <= 1.0):
            raise ValueError("need 0 < porosity_min <= porosity_max0 <= 1")


@dataclass
class SolverState:
    """Fields of one simulation step. Velocities live on cell faces (MAC layout):
    u_x has shape (ny, nx+1), u_y has shape (ny+1, nx); the discrete divergence
    below is exactly the operator the pressure solve annihilates."""

    c: np.ndarray
    eps: np.ndarray
    u_x: np.ndarray
    u_y: np.ndarray
    p: np.ndarray
    clamp_events: int = 0

    def cell_velocities(self) -> tuple[np.ndarray, np.ndarray]:
        ux = 0.5 * (self.u_x[:, :-1] + self.u_x[:, 1:])
        uy = 0.5 * (self.u_y[:-1, :] + self.u_y[1:, :])
        return ux, uy

    def snapshot(self) -> FieldSnapshot:
        ux, uy = self.cell_velocities()
        return FieldSnapshot(
            concentration=self.c.astype(np.float32),
            porosity=self.eps.astype(np.float32),
            velocity_x=ux.astype(np.float32),
            velocity_y=uy.astype(np.float32),
        )


def permeability(eps: np.ndarray) -> np.ndarray:
    """Kozeny-like proxy K(eps) = eps^3."""
    return eps ** 3


def init_porosity(config: SolverConfig, seed: int | None = None) -> np.ndarray:
    """Smoothed thresholded noise giving connected high-porosity channels.

    Regenerates with an incremented seed when the pore phase does not
    percolate from the inlet column to the outlet column.
    """
    base_seed = config.seed if seed is None else seed
    for attempt in range(config.max_percolation_retries + 1):
        rng = np.random.default_rng(base_seed + attempt)
        noise = rng.standard_normal((config.ny, config.nx))
        if config.porosity_corr_len > 0:
            smooth = ndi.gaussian_filter(noise, sigma=config.porosity_corr_len, mode="reflect")
        else:
            smooth = noise
        std = smooth.std()
        if std > 0:
            smooth = (smooth - smooth.mean()) / std
        pore = smooth > config.porosity_threshold
        eps = np.where(pore, config.porosity_max0, config.porosity_min)
        if _percolates(pore):
            return eps
    raise PercolationError(
        f"no inlet-to-outlet pore path after {config.max_percolation_retries + 1} attempts "
        f"(base seed {base_seed})"
    )


def _percolates(pore: np.ndarray) -> bool:
    if not pore[:, 0].any() or not pore[:, -1].any():
        return False
    labels, _ = ndi.label(pore)
    left = set(np.unique(labels[:, 0])) - {0}
    right = set(np.unique(labels[:, -1])) - {0}
    return bool(left & right)


def _face_transmissibilities(K: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Harmonic-mean transmissibility on interior faces (dx-scaled units)."""
    tx = 2.0 * K[:, :-1] * K[:, 1:] / (K[:, :-1] + K[:, 1:])
    ty = 2.0 * K[:-1, :] * K[1:, :] / (K[:-1, :] + K[1:, :])
    return tx, ty


def solve_flow(eps: np.ndarray, config: SolverConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quasi-static incompressible Darcy proxy: u = -K(eps) grad p, div u = 0.

    Fixed-pressure inlet on the left column and outlet on the right column,
    no-flux on top and bottom. Returns (p, u_x faces, u_y faces).
    """
    ny, nx = eps.shape
    K = permeability(eps.astype(np.float64))
    tx, ty = _face_transmissibilities(K)
    t_in = 2.0 * K[:, 0]    # half-cell Dirichlet coupling at the inlet faces
    t_out = 2.0 * K[:, -1]

    n = ny * nx
    idx = np.arange(n).reshape(ny, nx)
    diag = np.zeros(n)
    rows, cols, vals = [], [], []

    def couple(a, b, t):
        rows.append(a)
        cols.append(b)
        vals.append(-t)
        rows.append(b)
        cols.append(a)
        vals.append(-t)
        diag[a] += t
        diag[b] += t

    couple(idx[:, :-1].ravel(), idx[:, 1:].ravel(), tx.ravel())
    couple(idx[:-1, :].ravel(), idx[1:, :].ravel(), ty.ravel())

    rhs = np.zeros(n)
    diag[idx[:, 0]] += t_in
    rhs[idx[:, 0]] += t_in * config.inlet_pressure
    diag[idx[:, -1]] += t_out
    rhs[idx[:, -1]] += t_out * config.outlet_pressure

    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag)
    A = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    p = spla.spsolve(A, rhs)
    if not np.all(np.isfinite(p)):
        raise SolverError("pressure solve returned non-finite values")
    residual = np.abs(A @ p - rhs).max()
    p = p.reshape(ny, nx)

    dx = config.dx
    u_x = np.zeros((ny, nx + 1))
    u_x[:, 1:-1] = -tx * (p[:, 1:] - p[:, :-1]) / dx
    u_x[:, 0] = -t_in * (p[:, 0] - config.inlet_pressure) / dx
    u_x[:, -1] = -t_out * (config.outlet_pressure - p[:, -1]) / dx
    u_y = np.zeros((ny + 1, nx))
    u_y[1:-1, :] = -ty * (p[1:, :] - p[:-1, :]) / dx

    div = divergence(u_x, u_y, dx)
    div_max = np.abs(div).max()
    if div_max > DIVERGENCE_TOL * max(1.0, np.abs(u_x).max()):
        raise SolverError(
            f"flow solve did not converge: max |div u| = {div_max:.3e}, residual = {residual:.3e}"
        )
    return p, u_x, u_y


def divergence(u_x: np.ndarray, u_y: np.ndarray, dx: float) -> np.ndarray:
    """Discrete divergence of face velocities on cell centres."""
    return (u_x[:, 1:] - u_x[:, :-1]) / dx + (u_y[1:, :] - u_y[:-1, :]) / dx


def boundary_fluxes(u_x: np.ndarray, dx: float) -> tuple[float, float]:
    """Total volumetric flux through the inlet and outlet columns."""
    inlet = float(u_x[:, 0].sum() * dx)
    outlet = float(u_x[:, -1].sum() * dx)
    return inlet, outlet


def cfl_limit(state: SolverState, config: SolverConfig) -> float:
    u_max = max(np.abs(state.u_x).max(), np.abs(state.u_y).max())
    adv = config.dx / u_max if u_max > 0 else np.inf
    diff = config.dx ** 2 / (4.0 * config.D) if config.D > 0 else np.inf
    return min(adv, diff)


def check_cfl(state: SolverState, config: SolverConfig) -> None:
    limit = cfl_limit(state, config)
    if config.dt > limit:
        raise CFLError(f"dt = {config.dt:.4g} exceeds CFL bound {limit:.4g}")


def step_transport(state: SolverState, config: SolverConfig) -> np.ndarray:
    """Explicit flux-form update: upwind advection + central diffusion.

    Advective inflow at the inlet carries `inlet_concentration`; diffusive
    fluxes are zero across every boundary, so a zero-velocity domain is
    exactly closed and conserves total solute mass.
    """
    check_cfl(state, config)
    c = state.c.astype(np.float64)
    dx, dt = config.dx, config.dt
    ny, nx = c.shape

    # upwind concentrations on x-faces, with inlet/outlet ghost values
    cx = np.empty((ny, nx + 1))
    interior_u = state.u_x[:, 1:-1]
    cx[:, 1:-1] = np.where(interior_u > 0, c[:, :-1], c[:, 1:])
    cx[:, 0] = np.where(state.u_x[:, 0] > 0, config.inlet_concentration, c[:, 0])
    cx[:, -1] = np.where(state.u_x[:, -1] > 0, c[:, -1], 0.0)
    fx = state.u_x * cx

    cy = np.empty((ny + 1, nx))
    interior_v = state.u_y[1:-1, :]
    cy[1:-1, :] = np.where(interior_v > 0, c[:-1, :], c[1:, :])
    cy[0, :] = 0.0   # no-flux walls: u_y is zero there anyway
    cy[-1, :] = 0.0
    fy = state.u_y * cy

    # diffusive face fluxes, zero across all boundaries
    gx = np.zeros((ny, nx + 1))
    gx[:, 1:-1] = config.D * (c[:, 1:] - c[:, :-1]) / dx
    gy = np.zeros((ny + 1, nx))
    gy[1:-1, :] = config.D * (c[1:, :] - c[:-1, :]) / dx

    c_new = c - dt / dx * ((fx[:, 1:] - fx[:, :-1]) + (fy[1:, :] - fy[:-1, :])) \
              + dt / dx * ((gx[:, 1:] - gx[:, :-1]) + (gy[1:, :] - gy[:-1, :]))
    np.maximum(c_new, 0.0, out=c_new)
    return c_new


def step_dissolution(state: SolverState, config: SolverConfig) -> tuple[np.ndarray, np.ndarray, int]:
    """Volumetric first-order dissolution: d(eps)/dt = k_r * c * (1 - eps),
    with a matched solute sink -alpha * k_r * c * (1 - eps). The sink is
    clamped so concentration cannot go negative; clamp events are counted."""
    c = state.c.astype(np.float64)
    eps = state.eps.astype(np.float64)
    rate = config.k_r * c * (1.0 - eps)
    eps_new = np.minimum(eps + config.dt * rate, 1.0)
    sink = config.alpha * config.dt * rate
    clamped = int(np.count_nonzero(sink > c))
    c_new = np.maximum(c - sink, 0.0)
    return c_new, eps_new, clamped


def solve_steady_concentration(
    eps: np.ndarray, u_x: np.ndarray, u_y: np.ndarray, config: SolverConfig
) -> np.ndarray:
    """Steady state of the discrete transport + dissolution-sink operator.

    Solves the linear balance (upwind advection) - (central diffusion)
    + alpha*k_r*(1-eps)*c = 0 with the same face fluxes and boundary
    handling as `step_transport`, so time stepping from this field starts
    without an injection transient.
    """
    ny, nx = eps.shape
    n = ny * nx
    idx = np.arange(n).reshape(ny, nx)
    dx = config.dx
    diag = (config.alpha * config.k_r * (1.0 - eps.astype(np.float64)) * dx).ravel()
    rows, cols, vals = [idx.ravel()], [idx.ravel()], [diag.copy()]
    rhs = np.zeros(n)

    def add(r, c_, v):
        rows.append(np.atleast_1d(r))
        cols.append(np.atleast_1d(c_))
        vals.append(np.atleast_1d(v))

    # interior x-faces: flux u*c_up - D*(c_r - c_l)/dx between (i,j-1) and (i,j)
    u = u_x[:, 1:-1]
    left, right = idx[:, :-1].ravel(), idx[:, 1:].ravel()
    up_is_left = (u > 0).ravel()
    uf = u.ravel()
    # advective part: +flux out of left cell, -flux into right cell (sign per divergence)
    add(left, np.where(up_is_left, left, right), uf)
    add(right, np.where(up_is_left, left, right), -uf)
    # diffusive part
    for a, b in ((left, right), (right, left)):
        add(a, a, np.full(a.shape, config.D / dx))
        add(a, b, np.full(a.shape, -config.D / dx))

    v = u_y[1:-1, :]
    top, bot = idx[:-1, :].ravel(), idx[1:, :].ravel()
    up_is_top = (v > 0).ravel()
    vf = v.ravel()
    add(top, np.where(up_is_top, top, bot), vf)
    add(bot, np.where(up_is_top, top, bot), -vf)
    for a, b in ((top, bot), (bot, top)):
        add(a, a, np.full(a.shape, config.D / dx))
        add(a, b, np.full(a.shape, -config.D / dx))

    # inlet faces: inflow carries inlet_concentration, backflow carries the cell value
    u_in = u_x[:, 0]
    cells = idx[:, 0]
    rhs[cells] += np.where(u_in > 0, u_in * config.inlet_concentration, 0.0)
    add(cells, cells, np.where(u_in > 0, 0.0, -u_in))
    # outlet faces: outflow carries the cell value, backflow carries zero
    u_out = u_x[:, -1]
    cells = idx[:, -1]
    add(cells, cells, np.where(u_out > 0, u_out, 0.0))

    A = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    c = spla.spsolve(A, rhs)
    if not np.all(np.isfinite(c)):
        raise SolverError("steady concentration solve returned non-finite values")
    return np.maximum(c.reshape(ny, nx), 0.0)


def initial_state(config: SolverConfig, seed: int | None = None) -> SolverState:
    eps = init_porosity(config, seed=seed)
    p, u_x, u_y = solve_flow(eps, config)
    if config.initial_concentration == "steady":
        c = solve_steady_concentration(eps, u_x, u_y, config)
    elif config.initial_concentration == "zero":
        c = np.zeros_like(eps, dtype=np.float64)
    else:
        raise ValueError(f"unknown initial_concentration {config.initial_concentration!r}")
    return SolverState(c=c, eps=eps.astype(np.float64), u_x=u_x, u_y=u_y, p=p)


def simulate(config: SolverConfig, sim_id: str | None = None, seed: int | None = None) -> SimulationSeries:
    """Run one simulation: quasi-static coupling with a flow re-solve after
    every dissolution step, emitting a snapshot every `snapshot_interval`
    solver steps (snapshot 0 is the initial state)."""
    seed = config.seed if seed is None else seed
    sim_id = sim_id or f"sim{seed:04d}"
    state = initial_state(config, seed=seed)
    snapshots = [state.snapshot()]
    steps_needed = (config.n_snapshots - 1) * config.snapshot_interval
    for step in range(steps_needed):
        state.c = step_transport(state, config)
        state.c, state.eps, clamped = step_dissolution(state, config)
        state.clamp_events += clamped
        if config.k_r != 0.0:
            state.p, state.u_x, state.u_y = solve_flow(state.eps, config)
        if (step + 1) % config.snapshot_interval == 0:
            snapshots.append(state.snapshot())
    series = SimulationSeries(
        snapshots=snapshots,
        dx=config.dx,
        dt_snapshot=config.dt * config.snapshot_interval,
        sim_id=sim_id,
        seed=seed,
    )
    series.validate()
    return series


def generate_dataset(n_sims: int, config: SolverConfig, seeds: list[int] | None = None) -> list[SimulationSeries]:
    """Independent simulations from a config template and distinct seeds."""
    if seeds is None:
        seeds = [config.seed + i for i in range(n_sims)]
    if len(seeds) != n_sims:
        raise ValueError(f"need {n_sims} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    series_list = []
    for i, seed in enumerate(seeds):
        sim_id = f"sim{seed:04d}"
        try:
            series_list.append(simulate(replace(config, seed=seed), sim_id=sim_id, seed=seed))
        except (SolverError, CFLError, PercolationError) as exc:
            raise type(exc)(f"[{sim_id}] {exc}") from exc
    return series_list
