"""Driver-level behavior: steady states, decay diagnostics, run artifacts."""

import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import nsms.coupled as cp
import nsms.msfield as mf
from nsms.config import PRESETS, parse_config
from nsms.coupled import (
    CkReport,
    CoupledState,
    DecayFit,
    SteadyState,
    ck_bound_check,
    coupled_step,
    decay_fit,
    initial_velocity,
    l1_drift_check,
    mollify_initial_density,
    paper_schedule,
    relative_entropy,
    run_simulation,
)
from nsms.errors import ConfigError, InvalidStateError, SimulationAbort
from nsms.grid import Grid
from nsms.mixture import MixtureParams, molar_concentration, rho_to_x
from nsms.msfield import SpeciesFieldState, entropy_functional
from nsms.nsfield import PressureField, VelocityField


def three_species(tau=0.01, epsilon=0.0):
    d = np.array([[0.0, 0.10, 0.12], [0.10, 0.0, 0.14], [0.12, 0.14, 0.0]])
    return MixtureParams(molar_masses=np.array([1.0, 2.0, 3.0]),
                         diffusivities=d, epsilon=epsilon, tau=tau)


def cosine_field(grid, base, amps, freqs):
    z = grid.axis_centers(0) / grid.extents[0]
    rho = np.empty(grid.shape + (len(base),))
    for i, b in enumerate(base[:-1]):
        rho[..., i] = b + amps[i] * np.cos(freqs[i] * np.pi * z)
    rho[..., -1] = 1.0 - rho[..., :-1].sum(axis=-1)
    return rho


def rest_state(rho, params, grid):
    return CoupledState(species=SpeciesFieldState.from_rho(rho, params),
                        velocity=VelocityField.zero(grid),
                        pressure=PressureField.zero(grid), step=0, time=0.0)


# ---------------------------------------------------------------- mollifier

def test_mollify_uniform_data_is_unchanged():
    rho = np.full((5, 3), 1.0 / 3.0)
    out = mollify_initial_density(rho, 0.1)
    # (1/n + 2 eta) / (1 + 2 eta n) = 1/n exactly
    assert np.abs(out - 1.0 / 3.0).max() < 1e-15


def test_mollify_boundary_data_two_species():
    rho = np.array([[1.0, 0.0]])
    out = mollify_initial_density(rho, 0.25)
    assert out[0] == pytest.approx([0.75, 0.25])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.floats(1e-3, 1.0), st.integers(0, 2**31 - 1))
def test_mollify_floor_and_sum(n, frac, seed):
    eta = frac / (2.0 * n)
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0.0, 1.0, size=(4, n))
    rho = raw / raw.sum(axis=-1, keepdims=True)
    out = mollify_initial_density(rho, eta)
    assert out.min() >= eta * (1.0 - 1e-12)
    assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12


def test_mollify_rejects_bad_inputs():
    rho = np.array([[0.5, 0.5]])
    with pytest.raises(InvalidStateError):
        mollify_initial_density(rho, 0.0)
    with pytest.raises(InvalidStateError):
        mollify_initial_density(rho, 0.26)
    with pytest.raises(InvalidStateError):
        mollify_initial_density(np.array([[1.2, -0.2]]), 0.1)
    with pytest.raises(InvalidStateError):
        mollify_initial_density(np.array([[0.5, 0.4]]), 0.1)


# ------------------------------------------------------------ steady states

def test_steady_state_partitions_of_unity():
    grid = Grid.line(1.0, 32)
    params = three_species()
    rho = cosine_field(grid, (0.3, 0.3, 0.4), (0.05, -0.04), (1, 2))
    steady = SteadyState.from_field(rho, params, grid)
    assert steady.rho_bar.sum() == pytest.approx(1.0, abs=1e-13)
    assert steady.x_bar.sum() == pytest.approx(1.0, abs=1e-13)
    assert steady.c_bar == pytest.approx((steady.rho_bar / params.molar_masses).sum())
    assert steady.rho_bar.min() > 0.0 and steady.x_bar.min() > 0.0


# --------------------------------------------------------- relative entropy

def test_relative_entropy_vanishes_at_steady_state():
    grid = Grid.line(1.0, 16)
    params = three_species()
    rho = np.broadcast_to(np.array([0.3, 0.3, 0.4]), grid.shape + (3,)).copy()
    steady = SteadyState.from_field(rho, params, grid)
    assert abs(relative_entropy(rho, steady, params, grid)) < 1e-14


def test_relative_entropy_nonnegative_for_mass_compatible_reference():
    grid = Grid.line(2.0, 24)
    params = three_species()
    rng = np.random.default_rng(7)
    for _ in range(20):
        raw = rng.uniform(0.05, 1.0, size=grid.shape + (3,))
        rho = raw / raw.sum(axis=-1, keepdims=True)
        steady = SteadyState.from_field(rho, params, grid)
        assert relative_entropy(rho, steady, params, grid) >= -1e-14


def test_relative_entropy_matches_entropy_minus_linear_part():
    # H* = H - sum_i ln(xbar_i) * mass_i / M_i, by independent quadrature
    grid = Grid.line(1.5, 40)
    params = three_species()
    rho = cosine_field(grid, (0.25, 0.35, 0.4), (0.08, 0.05), (1, 3))
    steady = SteadyState.from_field(rho, params, grid)
    hstar = relative_entropy(rho, steady, params, grid)
    h = entropy_functional(rho, params, grid)
    masses = grid.integrate(rho)
    linear = float((np.log(steady.x_bar) * masses / params.molar_masses).sum())
    assert hstar == pytest.approx(h - linear, rel=1e-12, abs=1e-13)


# ---------------------------------------------------------------- decay fit

def test_decay_fit_recovers_exact_exponential():
    t = np.linspace(0.0, 5.0, 101)
    fit = decay_fit(t, np.exp(-2.0 * t))
    assert isinstance(fit, DecayFit) and not fit.converged
    assert fit.lambda_hat == pytest.approx(2.0, abs=1e-10)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


def test_decay_fit_flags_converged_history():
    t = np.linspace(0.0, 1.0, 50)
    fit = decay_fit(t, np.full(50, 1e-16))
    assert fit.converged and fit.n_points == 0
    assert math.isnan(fit.lambda_hat)


def test_decay_fit_requires_enough_samples():
    t = np.linspace(0.0, 1.0, 5)
    with pytest.raises(InvalidStateError):
        decay_fit(t, np.exp(-t))


def test_decay_fit_window_skips_transient_and_floor():
    # corrupt the head and the sub-floor tail; the window must ignore both
    t = np.linspace(0.0, 30.0, 301)
    h = np.exp(-2.0 * t)
    h[:5] = 10.0
    fit = decay_fit(t, h)
    assert fit.lambda_hat == pytest.approx(2.0, rel=1e-9)
    assert fit.window[0] >= 3.0 and fit.window[1] <= 30.0 * 0.5


# ----------------------------------------------------------------- CK bound

def test_ck_bound_zero_at_steady_state():
    grid = Grid.line(1.0, 16)
    params = three_species()
    rho = np.broadcast_to(np.array([0.3, 0.3, 0.4]), grid.shape + (3,)).copy()
    steady = SteadyState.from_field(rho, params, grid)
    report = ck_bound_check(rho, steady, 0.0, params, grid)
    assert np.abs(report.lhs).max() < 1e-26 and np.abs(report.rhs).max() == 0.0
    assert report.satisfied


def test_ck_bound_holds_with_margin_for_perturbed_fields():
    grid = Grid.line(1.0, 48)
    params = three_species()
    rng = np.random.default_rng(3)
    for _ in range(10):
        amps = rng.uniform(-0.1, 0.1, size=2)
        rho = cosine_field(grid, (0.3, 0.3, 0.4), amps, (1, 2))
        steady = SteadyState.from_field(rho, params, grid)
        hstar = relative_entropy(rho, steady, params, grid)
        report = ck_bound_check(rho, steady, hstar, params, grid)
        assert isinstance(report, CkReport) and report.satisfied
        assert np.all(report.margins >= 0.0)


# -------------------------------------------------------------- fixed point

def test_uniform_rest_state_is_a_fixed_point():
    grid = Grid.line(1.0, 24)
    params = three_species(tau=0.05)
    rho = np.broadcast_to(np.array([0.3, 0.3, 0.4]), grid.shape + (3,)).copy()
    state = rest_state(rho, params, grid)
    for _ in range(3):
        state, record = coupled_step(state, params, grid)
        assert np.abs(state.species.rho_field - rho).max() < 1e-12
        assert record.kinetic_energy == 0.0
        assert np.abs(state.species.rho_field.sum(axis=-1) - 1.0).max() < 1e-12
    assert state.step == 3 and state.time == pytest.approx(0.15)


def test_perturbed_run_decreases_relative_entropy():
    grid = Grid.line(1.0, 32)
    params = three_species(tau=0.02)
    rho = cosine_field(grid, (0.3, 0.3, 0.4), (0.06, 0.0), (1, 1))
    steady = SteadyState.from_field(rho, params, grid)
    state = rest_state(rho, params, grid)
    prev = relative_entropy(rho, steady, params, grid)
    for _ in range(5):
        state, record = coupled_step(state, params, grid, steady=steady)
        assert record.H_star < prev
        prev = record.H_star


def test_coupled_step_wraps_failures_with_step_index():
    grid = Grid.line(1.0, 16)
    params = three_species(tau=0.02)
    rho = cosine_field(grid, (0.3, 0.3, 0.4), (0.05, 0.0), (1, 1))
    state = rest_state(rho, params, grid)
    state = replace(state, step=6)
    with pytest.raises(SimulationAbort) as info:
        coupled_step(state, params, grid, newton_tol=1e-30, newton_max_iter=1)
    assert info.value.step == 7
    assert info.value.state is state


# -------------------------------------------------------------- mass drifts

def run_short(epsilon, n_steps=8):
    grid = Grid.line(1.0, 24)
    params = three_species(tau=0.05, epsilon=epsilon)
    rho = cosine_field(grid, (0.3, 0.3, 0.4), (0.06, -0.04), (1, 2))
    state = rest_state(rho, params, grid)
    masses = [grid.integrate(rho)]
    w_ints = []
    entropy0 = entropy_functional(rho, params, grid)
    for _ in range(n_steps):
        state, _ = coupled_step(state, params, grid)
        masses.append(grid.integrate(state.species.rho_field))
        w_ints.append(grid.integrate(state.species.w_field))
    return np.array(masses), np.array(w_ints), params, grid, entropy0


def test_drift_check_conservative_run():
    masses, w_ints, params, grid, h0 = run_short(epsilon=0.0)
    report = l1_drift_check(masses, w_ints, params, grid, h0)
    assert report.identity_residual <= 1e-10
    assert report.max_drift.max() <= 1e-10
    assert report.drift_bound == 0.0
    assert report.satisfied


def test_drift_check_regularized_run_meets_bound():
    masses, w_ints, params, grid, h0 = run_short(epsilon=1e-3)
    report = l1_drift_check(masses, w_ints, params, grid, h0)
    assert report.identity_residual <= 1e-12
    assert report.max_drift[:-1].max() <= report.drift_bound
    assert report.c_drift <= report.c_drift_bound + 1e-12
    assert report.max_drift.max() > 1e-9  # the regularization really drifts
    assert report.satisfied


# ----------------------------------------------------------------- schedule

def test_paper_schedule_constants_and_identities():
    grid = Grid.line(1.0, 32)
    params = three_species()
    rho = cosine_field(grid, (1 / 3, 1 / 3, 1 / 3), (0.05, 0.025), (1, 2))
    sched = paper_schedule(rho, 0.001, 1.0, params, grid)
    masses = grid.integrate(rho)
    assert sched.gamma0 == pytest.approx(masses[-1] / (2 * masses[:-1].sum()))
    assert sched.m0 == pytest.approx(2.0 / 3.0)
    assert sched.tau == pytest.approx(math.sqrt(sched.c_gamma))
    assert sched.c_gamma > 0.0 and sched.epsilon > 0.0
    # the drift condition is saturated with equality
    h0 = entropy_functional(rho, params, grid)
    lhs = math.sqrt(sched.epsilon) * math.sqrt(
        1.0 * grid.measure * (h0 + sched.c1))
    assert lhs == pytest.approx(0.001 * masses[:-1].min(), rel=1e-12)


def test_paper_schedule_rejects_out_of_range_gamma():
    grid = Grid.line(1.0, 16)
    params = three_species()
    rho = np.broadcast_to(np.array([0.3, 0.3, 0.4]), grid.shape + (3,)).copy()
    with pytest.raises(ConfigError):
        paper_schedule(rho, 0.9, 1.0, params, grid)  # above gamma0
    with pytest.raises(ConfigError):
        paper_schedule(rho, 0.0, 1.0, params, grid)


def test_paper_schedule_gamma_cap_includes_mass_ratio():
    # m0 = |1 - 10/1| = 9 caps gamma below 1/9 regardless of gamma0
    grid = Grid.line(1.0, 16)
    d = np.array([[0.0, 0.1], [0.1, 0.0]])
    params = MixtureParams(molar_masses=np.array([10.0, 1.0]), diffusivities=d)
    rho = np.broadcast_to(np.array([0.2, 0.8]), grid.shape + (2,)).copy()
    with pytest.raises(ConfigError):
        paper_schedule(rho, 0.12, 1.0, params, grid)
    assert paper_schedule(rho, 0.1, 1.0, params, grid).tau > 0.0


# ------------------------------------------------------------------- driver

def test_run_zero_perturbation_has_constant_diagnostics():
    cfg = parse_config(PRESETS["three-species-1d"])
    cfg = replace(cfg, scenario="uniform", amplitude=0.0, t_end=0.05,
                  cells_x=16, snapshot_interval=0)
    res = run_simulation(cfg, write_files=False)
    h0 = res.records[0].H
    for rec in res.records:
        assert rec.H == pytest.approx(h0, abs=1e-12)
        assert rec.H_star <= 1e-13
        assert rec.masses == pytest.approx(res.records[0].masses, abs=1e-13)
        assert rec.kinetic_energy == 0.0


def test_run_writes_deterministic_artifacts(tmp_path):
    cfg = parse_config(PRESETS["three-species-1d"])
    outputs = []
    for sub in ("a", "b"):
        run_dir = tmp_path / sub
        run = replace(cfg, cells_x=16, t_end=0.05, snapshot_interval=2,
                      output_dir=str(run_dir))
        res = run_simulation(run)
        assert res.diagnostics_path == run_dir / "diagnostics.csv"
        assert (run_dir / "config.txt").exists()
        assert (run_dir / "snap_00000000.csv").exists()
        assert (run_dir / "snap_00000002.csv").exists()
        assert (run_dir / "snap_00000005.csv").exists()  # final level
        outputs.append((run_dir / "diagnostics.csv").read_bytes())
    assert outputs[0] == outputs[1]


def test_run_diagnostics_header_and_row_shape(tmp_path):
    cfg = parse_config(PRESETS["three-species-1d"])
    cfg = replace(cfg, cells_x=12, t_end=0.03, output_dir=str(tmp_path / "r"),
                  snapshot_interval=0)
    res = run_simulation(cfg)
    lines = res.diagnostics_path.read_text().splitlines()
    assert lines[0] == ("step,time,H,H_star,diss_Bww,diss_sqrtx,eps_norm,"
                        "mass_1,mass_2,mass_3,c_mass,kinetic_energy,max_div,"
                        "min_rho,max_rho,advection_defect")
    assert len(lines) == 1 + len(res.records)
    first = lines[1].split(",")
    assert first[0] == "0" and float(first[1]) == 0.0
    # every value round-trips through repr
    assert float(first[2]) == res.records[0].H


def test_run_schedule_resolves_tau_and_epsilon():
    cfg = parse_config(PRESETS["paper-schedule"])
    res = run_simulation(cfg, write_files=False)
    assert res.schedule is not None
    assert res.params.epsilon == res.schedule.epsilon
    n = len(res.records) - 1
    assert res.params.tau == pytest.approx(cfg.t_end / n)
    assert n == math.ceil(cfg.t_end / res.schedule.tau)


def test_run_abort_writes_last_good_snapshot(tmp_path, monkeypatch):
    cfg = parse_config(PRESETS["three-species-1d"])
    cfg = replace(cfg, cells_x=12, t_end=0.1, output_dir=str(tmp_path / "r"))
    calls = {"n": 0}
    real = mf.ms_step

    def failing(rho_prev, u, params, grid, **kw):
        calls["n"] += 1
        if calls["n"] >= 3:
            raise mf.NonConvergenceError("forced", iterations=1, residual=1.0)
        return real(rho_prev, u, params, grid, **kw)

    monkeypatch.setattr(cp, "ms_step", failing)
    with pytest.raises(SimulationAbort) as info:
        run_simulation(cfg)
    assert info.value.step == 3
    assert info.value.state.step == 2
    # last good level was written next to the partial diagnostics
    assert (tmp_path / "r" / "snap_00000002.csv").exists()
    diag = (tmp_path / "r" / "diagnostics.csv").read_text().splitlines()
    assert len(diag) == 1 + 3  # header, initial row, two completed steps


def test_initial_velocity_vortex_is_divergence_free():
    cfg = parse_config(PRESETS["two-species-2d-vortex"])
    cfg = replace(cfg, cells_x=20, cells_y=20)
    grid = cfg.make_grid()
    u = initial_velocity(cfg, grid)
    assert u.max_divergence() < 1e-13
    assert u.kinetic_energy() > 0.0
    line = parse_config(PRESETS["three-species-1d"])
    assert initial_velocity(line, line.make_grid()).l2_norm_sq() == 0.0
