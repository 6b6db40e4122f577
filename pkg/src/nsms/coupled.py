"""Outer time loop and long-time diagnostics.

Each level advances the flow first (convection frozen at the previous
velocity) and then the species with the new velocity, so the discrete
energy and entropy estimates of the two sub-steps compose.  The module
also owns everything that talks about trajectories rather than single
steps: the homogeneous steady state, the relative entropy and its decay
fit, the Csiszar-Kullback bound on L1 distances, the species-mass drift
audit, the gamma-parameterized step/regularization schedule, and the
diagnostics CSV produced by `run_simulation`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import xlogy

from .config import RunConfig, initial_density, render_config
from .errors import (
    ConfigError,
    InvalidStateError,
    NonConvergenceError,
    SimulationAbort,
    SolverError,
)
from .grid import Grid
from .mixture import MixtureParams, molar_concentration, rho_to_x
from .msfield import (
    SpeciesFieldState,
    StepStats,
    dissipation_terms,
    entropy_functional,
    laplacian_neumann,
    ms_step,
    write_species_snapshot,
)
from .nsfield import (
    NsStepStats,
    PressureField,
    VelocityField,
    ns_step,
    smooth_initial_velocity,
    write_velocity_snapshot,
)

logger = logging.getLogger(__name__)

# Pinsker constant for the L1-versus-relative-entropy bound.
CSISZAR_KULLBACK_CONSTANT = 2.0
# Fit-window policy for decay_fit.
TRANSIENT_FRACTION = 0.1
DECAY_FLOOR = 1e-12
CONVERGED_FLOOR = 1e-14


@dataclass(frozen=True)
class SteadyState:
    """Homogeneous state sharing the species masses of a reference field."""

    rho_bar: np.ndarray
    c_bar: float
    x_bar: np.ndarray

    @classmethod
    def from_field(cls, rho_field, params: MixtureParams, grid: Grid) -> "SteadyState":
        rho = np.asarray(rho_field, dtype=float)
        if rho.shape != grid.shape + (params.n_species,):
            raise InvalidStateError(
                f"rho_field must have shape {grid.shape + (params.n_species,)}")
        rho_bar = grid.integrate(rho) / grid.measure
        if np.any(rho_bar <= 0.0):
            raise InvalidStateError("every species needs positive total mass")
        c_bar = float((rho_bar / params.molar_masses).sum())
        x_bar = rho_bar / (c_bar * params.molar_masses)
        rho_bar.setflags(write=False)
        x_bar.setflags(write=False)
        return cls(rho_bar=rho_bar, c_bar=c_bar, x_bar=x_bar)

@dataclass(frozen=True)
class DiagnosticsRecord:
    """One per-step row of the run log; mirrors the CSV column order."""

    step: int
    time: float
    H: float
    H_star: float
    dissipation_Bww: float
    dissipation_sqrtx: float
    eps_norm: float
    masses: tuple
    c_mass: float
    kinetic_energy: float
    max_div: float
    min_rho: float
    max_rho: float
    advection_defect: float

    def __post_init__(self):
        if min(self.masses) <= 0.0 or self.min_rho <= 0.0 or self.max_rho >= 1.0:
            raise InvalidStateError(
                f"step {self.step}: densities left the open simplex")


@dataclass(frozen=True)
class CoupledState:
    """Species and flow fields at one level of the outer iteration."""

    species: SpeciesFieldState
    velocity: VelocityField
    pressure: PressureField
    step: int
    time: float


def mollify_initial_density(rho0, eta0: float) -> np.ndarray:
    """Convex blend with the uniform mixture: (rho + 2 eta0) / (1 + 2 eta0 n).

    Admissible nonnegative data is pushed into the interior, componentwise
    >= eta0, with the unit sum preserved exactly.
    """
    rho = np.asarray(rho0, dtype=float)
    n = rho.shape[-1]
    if not 0.0 < eta0 <= 1.0 / (2.0 * n):
        raise InvalidStateError(
            f"eta0 must lie in (0, 1/{2 * n}] for {n} species, got {eta0}")
    if np.any(rho < 0.0):
        raise InvalidStateError("initial densities must be nonnegative")
    if np.abs(rho.sum(axis=-1) - 1.0).max() > 1e-8:
        raise InvalidStateError("initial densities must sum to one")
    out = (rho + 2.0 * eta0) / (1.0 + 2.0 * eta0 * n)
    return out / out.sum(axis=-1, keepdims=True)


def relative_entropy(rho_field, steady: SteadyState, params: MixtureParams,
                     grid: Grid) -> float:
    """Entropy relative to a homogeneous state: sum_i int c x_i ln(x_i/x_bar_i).

    Nonnegative whenever `steady` carries the field's own species masses;
    zero exactly at the steady state.
    """
    rho = np.asarray(rho_field, dtype=float)
    if np.any(steady.x_bar <= 0.0):
        raise InvalidStateError("steady state must be interior")
    c = molar_concentration(rho, params)
    x = rho_to_x(rho, params)
    dens = (xlogy(x, x) - x * np.log(steady.x_bar)).sum(axis=-1)
    return float(grid.integrate(c * dens))


@dataclass(frozen=True)
class DecayFit:
    """Least-squares exponential rate of a relative-entropy history."""

    lambda_hat: float
    r2: float
    converged: bool
    n_points: int
    window: tuple


def decay_fit(times, hstar) -> DecayFit:
    """Fit ln H* versus t on the configured window; rate is -slope.

    The first TRANSIENT_FRACTION of the samples is discarded, then the fit
    keeps values in [DECAY_FLOOR, H*(0)/2].  Histories that sit entirely
    below CONVERGED_FLOOR are reported as converged without a fit.
    """
    t = np.asarray(times, dtype=float)
    h = np.asarray(hstar, dtype=float)
    if t.shape != h.shape or t.ndim != 1 or t.size == 0:
        raise InvalidStateError("times and hstar must be aligned 1D histories")
    if np.all(h < CONVERGED_FLOOR):
        return DecayFit(lambda_hat=float("nan"), r2=float("nan"),
                        converged=True, n_points=0, window=(float("nan"),) * 2)
    keep = np.zeros(t.size, dtype=bool)
    keep[int(math.floor(TRANSIENT_FRACTION * t.size)):] = True
    keep &= (h >= DECAY_FLOOR) & (h <= 0.5 * h[0])
    if keep.sum() < 10:
        raise InvalidStateError(
            f"decay window holds {int(keep.sum())} samples, need at least 10")
    tt = t[keep]
    y = np.log(h[keep])
    slope, intercept = np.polyfit(tt, y, 1)
    resid = y - (slope * tt + intercept)
    spread = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / spread if spread > 0.0 else 1.0
    return DecayFit(lambda_hat=float(-slope), r2=r2, converged=False,
                    n_points=int(keep.sum()), window=(float(tt[0]), float(tt[-1])))


@dataclass(frozen=True)
class CkReport:
    """Per-species audit of the L1-versus-relative-entropy bound."""

    lhs: np.ndarray
    rhs: np.ndarray
    margins: np.ndarray
    satisfied: bool


def ck_bound_check(rho_field, steady: SteadyState, hstar: float,
                   params: MixtureParams, grid: Grid) -> CkReport:
    """Check ||c x_i - c x_bar_i||_1^2 <= (C_K/M_i) ||rho_i^0||_1 H* per species.

    `hstar` must be the relative entropy of `rho_field` against the same
    steady state for the inequality to be guaranteed.
    """
    rho = np.asarray(rho_field, dtype=float)
    c = molar_concentration(rho, params)
    x = rho_to_x(rho, params)
    lhs = grid.integrate(np.abs(c[..., None] * (x - steady.x_bar))) ** 2
    masses0 = steady.rho_bar * grid.measure
    rhs = CSISZAR_KULLBACK_CONSTANT / params.molar_masses * masses0 * hstar
    margins = rhs - lhs
    return CkReport(lhs=lhs, rhs=rhs, margins=margins,
                    satisfied=bool(np.all(margins >= -1e-12)))


@dataclass(frozen=True)
class DriftReport:
    """Audit of the species-mass recursion and its a-priori bound."""

    identity_residual: float
    max_drift: np.ndarray
    drift_bound: float
    realized_gamma: float
    c_drift: float
    c_drift_bound: float
    satisfied: bool


def l1_drift_check(mass_history, w_integral_history, params: MixtureParams,
                   grid: Grid, entropy0: float) -> DriftReport:
    """Verify the exact mass recursion and the square-root drift bound.

    `mass_history` holds the species masses at levels 0..K (rows); the rows
    of `w_integral_history` are int w_i dz at levels 1..K.  Testing the
    first N species only: the recursion says mass_i^k - mass_i^0 =
    -eps*tau*sum_j int w_i^j, and the bound caps the drift by
    sqrt(eps*T*meas*(H0 + C1)).  The last species and the molar mass of the
    mixture inherit their bounds through the realized gamma.
    """
    masses = np.asarray(mass_history, dtype=float)
    w_ints = np.asarray(w_integral_history, dtype=float)
    n = params.n_species
    if masses.ndim != 2 or masses.shape[1] != n:
        raise InvalidStateError(f"mass_history must have {n} columns")
    if w_ints.shape != (masses.shape[0] - 1, n - 1):
        raise InvalidStateError("w history must align with mass history")
    m = params.molar_masses
    meas = grid.measure
    drift = masses - masses[0]
    predicted = -params.epsilon * params.tau * np.cumsum(w_ints, axis=0)
    identity_residual = float(np.abs(drift[1:, :-1] - predicted).max()) \
        if w_ints.size else 0.0
    max_drift = np.abs(drift).max(axis=0)
    t_final = params.tau * (masses.shape[0] - 1)
    c1 = (n - 1) * meas / m.min()
    drift_bound = math.sqrt(params.epsilon * t_final * meas * (entropy0 + c1))
    realized_gamma = float((max_drift[:-1] / masses[0, :-1]).max())
    c_mass = masses / m
    c_drift = float(np.abs(c_mass.sum(axis=1) - c_mass[0].sum()).max())
    m0 = float(np.abs(1.0 - m[:-1] / m[-1]).max())
    c_drift_bound = m0 * realized_gamma * float(c_mass[0].sum())
    # 1e-12 slack absorbs roundoff when eps = 0 makes both sides tiny.
    satisfied = (identity_residual <= 1e-10
                 and bool(np.all(max_drift[:-1] <= drift_bound + 1e-12))
                 and c_drift <= c_drift_bound + 1e-12)
    return DriftReport(identity_residual=identity_residual, max_drift=max_drift,
                       drift_bound=drift_bound, realized_gamma=realized_gamma,
                       c_drift=c_drift, c_drift_bound=c_drift_bound,
                       satisfied=satisfied)

@dataclass(frozen=True)
class ScheduleConstants:
    """Derived step size and regularization of the gamma schedule.

    All entries follow from the initial species masses, the molar masses,
    the domain, and the horizon; tau = sqrt(c_gamma) and epsilon saturates
    the square-root drift condition.  c2/c3/c_gamma have no observable of
    their own, they only set the schedule.
    """

    gamma: float
    gamma0: float
    m0: float
    c1: float
    c2: float
    c3: float
    c_gamma: float
    log_sobolev: float
    tau: float
    epsilon: float


def paper_schedule(rho0_field, gamma: float, t_end: float,
                   params: MixtureParams, grid: Grid) -> ScheduleConstants:
    """Resolve tau and epsilon from gamma for a given initial composition."""
    rho0 = np.asarray(rho0_field, dtype=float)
    masses = grid.integrate(rho0)
    m = params.molar_masses
    m_star = float(m.min())
    m_up = float(m.max())
    meas = grid.measure
    gamma0 = float(masses[-1] / (2.0 * masses[:-1].sum()))
    m0 = float(np.abs(1.0 - m[:-1] / m[-1]).max())
    # The upper limit keeps every log argument below positive: the published
    # constraint gamma < min(1, gamma0) implicitly assumes m0 <= 1.
    gamma_max = min(1.0, gamma0, 1.0 / m0 if m0 > 0.0 else math.inf)
    if not 0.0 < gamma < gamma_max:
        raise ConfigError(
            f"gamma must lie in (0, {gamma_max:.6g}) for this configuration")
    half = gamma / (2.0 * gamma0)
    c1 = params.n_reduced * meas / m_star
    entropy0 = entropy_functional(rho0, params, grid)
    epsilon = (gamma * float(masses[:-1].min())) ** 2 \
        / (t_end * meas * (entropy0 + c1))
    c2 = meas / m_star * math.log(
        (1.0 + m0 * gamma) * (1.0 + gamma) * (1.0 + half)
        / ((1.0 - m0 * gamma) * (1.0 - gamma) * (1.0 - half)))
    c3 = meas / m_star * math.log(
        (1.0 + gamma) * (1.0 + half) / (1.0 - m0 * gamma))
    diam_sq = float(sum(e**2 for e in grid.extents))
    log_sobolev = 2.0 * diam_sq / math.pi**2
    c_gamma = c2 + 0.5 * c3 / log_sobolev * m_star / (m_up**2 / m_star**2 + 1.0)
    return ScheduleConstants(gamma=gamma, gamma0=gamma0, m0=m0, c1=c1, c2=c2,
                             c3=c3, c_gamma=c_gamma, log_sobolev=log_sobolev,
                             tau=math.sqrt(c_gamma), epsilon=epsilon)


def initial_velocity(config: RunConfig, grid: Grid) -> VelocityField:
    """Divergence-free start-up vortex, or rest when no amplitude is set."""
    if grid.dim != 2 or config.u_amplitude == 0.0:
        return VelocityField.zero(grid)
    lx, ly = grid.extents

    def psi(x, y):
        return (config.u_amplitude * np.sin(np.pi * x / lx) ** 2
                * np.sin(np.pi * y / ly) ** 2)

    return VelocityField.from_stream_function(grid, psi)


def _state_record(state: CoupledState, params: MixtureParams, grid: Grid,
                  steady: SteadyState, ms_stats: StepStats | None = None,
                  ns_stats: NsStepStats | None = None) -> DiagnosticsRecord:
    rho = state.species.rho_field
    w = state.species.w_field
    if ms_stats is None:
        diss_b, diss_s = dissipation_terms(w, rho, params, grid)
        lap = laplacian_neumann(w, grid)
        eps_norm = float(grid.integrate((lap**2 + w**2).sum(axis=-1)))
        defect = 0.0
    else:
        diss_b = ms_stats.dissipation
        diss_s = ms_stats.dissipation_sqrtx
        eps_norm = ms_stats.eps_norm
        defect = ms_stats.advection_defect
    masses = grid.integrate(rho)
    c_mass = float(grid.integrate(molar_concentration(rho, params)))
    if ns_stats is None:
        kinetic = state.velocity.kinetic_energy()
        max_div = state.velocity.max_divergence()
    else:
        kinetic = ns_stats.kinetic_energy
        max_div = ns_stats.max_divergence
    return DiagnosticsRecord(
        step=state.step, time=state.time,
        H=entropy_functional(rho, params, grid),
        H_star=relative_entropy(rho, steady, params, grid),
        dissipation_Bww=diss_b, dissipation_sqrtx=diss_s, eps_norm=eps_norm,
        masses=tuple(float(v) for v in masses), c_mass=c_mass,
        kinetic_energy=kinetic, max_div=max_div,
        min_rho=float(rho.min()), max_rho=float(rho.max()),
        advection_defect=defect)


def coupled_step(state: CoupledState, params: MixtureParams, grid: Grid,
                 forcing=None, steady: SteadyState | None = None, *,
                 newton_tol: float = 1e-10, newton_max_iter: int = 50,
                 fixedpoint_tol: float = 1e-14, div_tol: float = 1e-10):
    """One outer level: flow step, then species step with the new velocity.

    Returns (CoupledState, DiagnosticsRecord).  Sub-step failures surface
    as SimulationAbort carrying the last good state and the failing step
    index.  `steady` defaults to the state's own mass-compatible steady
    state (equivalent for conservative runs).
    """
    k = state.step + 1
    if steady is None:
        steady = SteadyState.from_field(state.species.rho_field, params, grid)
    try:
        velocity, pressure, ns_stats = ns_step(
            state.velocity, forcing, params, grid, div_tol=div_tol)
        species, ms_stats = ms_step(
            state.species.rho_field, velocity, params, grid,
            newton_tol=newton_tol, newton_max_iter=newton_max_iter,
            fixedpoint_tol=fixedpoint_tol, t_prev=state.time)
    except (NonConvergenceError, SolverError) as exc:
        raise SimulationAbort(f"step {k} failed: {exc}", state=state, step=k,
                              cause=exc) from exc
    new_state = CoupledState(species=species, velocity=velocity,
                             pressure=pressure, step=k, time=species.time)
    record = _state_record(new_state, params, grid, steady,
                           ms_stats=ms_stats, ns_stats=ns_stats)
    return new_state, record

def _csv_header(n_species: int) -> str:
    names = (["step", "time", "H", "H_star", "diss_Bww", "diss_sqrtx",
              "eps_norm"]
             + [f"mass_{i + 1}" for i in range(n_species)]
             + ["c_mass", "kinetic_energy", "max_div", "min_rho", "max_rho",
                "advection_defect"])
    return ",".join(names)


def _csv_row(rec: DiagnosticsRecord) -> str:
    values = ([rec.time, rec.H, rec.H_star, rec.dissipation_Bww,
               rec.dissipation_sqrtx, rec.eps_norm]
              + list(rec.masses)
              + [rec.c_mass, rec.kinetic_energy, rec.max_div, rec.min_rho,
                 rec.max_rho, rec.advection_defect])
    return ",".join([str(rec.step)] + [repr(float(v)) for v in values])


def _write_snapshots(out_dir: Path, state: CoupledState,
                     params: MixtureParams, grid: Grid) -> Path:
    path = out_dir / f"snap_{state.step:08d}.csv"
    write_species_snapshot(path, state.species, params, grid)
    if grid.dim == 2:
        write_velocity_snapshot(out_dir / f"snap_{state.step:08d}_uvp.csv",
                                state.velocity, state.pressure, grid)
    return path


@dataclass(frozen=True)
class SimulationResult:
    """In-memory outcome of a run; file paths are None for dry runs."""

    final_state: CoupledState
    records: tuple
    steady: SteadyState
    params: MixtureParams
    grid: Grid
    schedule: ScheduleConstants | None
    w_integral_history: np.ndarray
    diagnostics_path: Path | None
    output_dir: Path | None

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])

    @property
    def hstar_history(self) -> np.ndarray:
        return np.array([r.H_star for r in self.records])

    @property
    def mass_history(self) -> np.ndarray:
        return np.array([r.masses for r in self.records])


def _step_count(t_end: float, tau: float) -> int:
    ratio = t_end / tau
    n = round(ratio) if abs(ratio - round(ratio)) < 1e-9 else math.ceil(ratio)
    return max(int(n), 1)


def run_simulation(config: RunConfig, write_files: bool = True) -> SimulationResult:
    """Drive the coupled iteration over [0, t_end] as configured.

    The step count M = ceil(t_end / tau) redefines tau = t_end / M so the
    horizon is hit exactly.  With `write_files`, the output directory gets
    the streamed diagnostics CSV, snapshots on the configured schedule plus
    the initial and final levels, and a copy of the resolved configuration.
    Output is a pure function of the configuration text.
    """
    grid = config.make_grid()
    base = config.make_params()
    rho0 = initial_density(config, grid)
    if config.eta0 > 0.0:
        rho0 = mollify_initial_density(rho0, config.eta0)
    schedule = None
    if config.schedule == "paper":
        schedule = paper_schedule(rho0, config.gamma, config.t_end, base, grid)
        tau, epsilon = schedule.tau, schedule.epsilon
    else:
        tau, epsilon = config.tau, config.epsilon
    n_steps = _step_count(config.t_end, tau)
    params = replace(base, tau=config.t_end / n_steps, epsilon=epsilon)
    logger.info("run: %d cells, %d species, %d steps of tau=%.6g",
                grid.n_cells, params.n_species, n_steps, params.tau)

    velocity = smooth_initial_velocity(initial_velocity(config, grid),
                                       params.tau, grid)
    state = CoupledState(species=SpeciesFieldState.from_rho(rho0, params),
                         velocity=velocity, pressure=PressureField.zero(grid),
                         step=0, time=0.0)
    steady = SteadyState.from_field(rho0, params, grid)
    records = [_state_record(state, params, grid, steady)]
    w_ints = []

    out_dir = None
    diag_path = None
    diag = None
    if write_files:
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(render_config(config))
        diag_path = out_dir / "diagnostics.csv"
        diag = open(diag_path, "w")
        diag.write(_csv_header(params.n_species) + "\n")
        diag.write(_csv_row(records[0]) + "\n")
        _write_snapshots(out_dir, state, params, grid)
    try:
        for k in range(1, n_steps + 1):
            try:
                state, record = coupled_step(
                    state, params, grid, steady=steady,
                    newton_tol=config.newton_tol,
                    newton_max_iter=config.newton_max_iter,
                    fixedpoint_tol=config.fixedpoint_tol,
                    div_tol=config.div_tol)
            except SimulationAbort as exc:
                if write_files:
                    last_good = _write_snapshots(out_dir, exc.state, params, grid)
                    logger.error("aborted at step %d; last good state in %s",
                                 exc.step, last_good)
                raise
            records.append(record)
            w_ints.append(grid.integrate(state.species.w_field))
            if write_files:
                diag.write(_csv_row(record) + "\n")
                due = (config.snapshot_interval > 0
                       and k % config.snapshot_interval == 0)
                if due or k == n_steps:
                    _write_snapshots(out_dir, state, params, grid)
    finally:
        if diag is not None:
            diag.close()
    w_history = (np.array(w_ints) if w_ints
                 else np.empty((0, params.n_reduced)))
    return SimulationResult(final_state=state, records=tuple(records),
                            steady=steady, params=params, grid=grid,
                            schedule=schedule, w_integral_history=w_history,
                            diagnostics_path=diag_path, output_dir=out_dir)
