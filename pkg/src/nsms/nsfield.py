"""Incompressible flow stepping on a staggered (MAC) grid.

Velocity components live on face normals, pressure at cell centers.  One
implicit step solves the linearized momentum equation and the divergence
constraint together,

    [ I/tau + C(u_prev) - L     G   0 ] [u]   [u_prev/tau + f]
    [ D                         0   e ] [p] = [0             ]
    [ 0                         e^T 0 ] [l]   [0             ],

where C is the skew-symmetric part of centered advection by u_prev, L the
Dirichlet vector Laplacian, G = -D^T the adjoint pressure gradient and the
bordering enforces mean-zero pressure.  Because C is exactly skew and G is
the exact negative adjoint of D, the discrete energy identity

    |u^k|^2 + |u^k - u^{k-1}|^2 + 2 tau |grad u^k|^2
        = |u^{k-1}|^2 + 2 tau <f, u^k>

holds to solver roundoff; this is the one-step linearized implicit scheme
with the pressure acting as the Lagrange multiplier of the constraint.

In one dimension incompressibility plus no-slip force u = 0 identically and
every operation degenerates to the zero field.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import InvalidStateError, SolverError
from .grid import Grid

WALL_TOL = 1e-12


def _mac_shapes(grid: Grid):
    if grid.dim == 1:
        return ((grid.cells[0] + 1,),)
    nx, ny = grid.cells
    return ((ny, nx + 1), (ny + 1, nx))


def _check_components(components, grid: Grid, what: str):
    comps = tuple(np.asarray(a, dtype=float) for a in components)
    expect = _mac_shapes(grid)
    if len(comps) != grid.dim or tuple(a.shape for a in comps) != expect:
        raise InvalidStateError(f"{what} components must have shapes {expect}")
    if not all(np.all(np.isfinite(a)) for a in comps):
        raise InvalidStateError(f"{what} components must be finite")
    return comps


def _zero_walls(comps, grid: Grid, enforce: bool):
    """Wall-normal entries must vanish; snap values below tolerance to zero."""
    out = []
    for axis, a in enumerate(comps):
        a = a.copy()
        walls = (a[..., 0], a[..., -1]) if axis == 0 else (a[0], a[-1])
        if enforce and max(float(np.abs(wv).max()) for wv in walls) > WALL_TOL:
            raise InvalidStateError("wall-normal velocities must vanish")
        if axis == 0:
            a[..., 0] = 0.0
            a[..., -1] = 0.0
        else:
            a[0] = 0.0
            a[-1] = 0.0
        out.append(a)
    return tuple(out)


@dataclass(frozen=True)
class VelocityField:
    """Face-normal velocity components on a MAC grid; no-slip walls."""

    grid: Grid
    components: tuple

    def __post_init__(self):
        comps = _check_components(self.components, self.grid, "velocity")
        comps = _zero_walls(comps, self.grid, enforce=True)
        object.__setattr__(self, "components", comps)

    @classmethod
    def zero(cls, grid: Grid) -> "VelocityField":
        return cls(grid=grid, components=tuple(np.zeros(s) for s in _mac_shapes(grid)))

    @classmethod
    def from_stream_function(cls, grid: Grid, psi) -> "VelocityField":
        """Discrete curl of a nodal stream function (2D only).

        psi is either a (ny+1, nx+1) nodal array or a callable psi(x, y);
        the resulting field is divergence-free to machine precision, and has
        zero wall-normal components whenever psi is constant along the walls.
        """
        if grid.dim != 2:
            raise InvalidStateError("stream functions require a 2D grid")
        nx, ny = grid.cells
        dx, dy = grid.spacing
        if callable(psi):
            xn = np.linspace(0.0, grid.extents[0], nx + 1)
            yn = np.linspace(0.0, grid.extents[1], ny + 1)
            xg, yg = np.meshgrid(xn, yn)
            psi = psi(xg, yg)
        psi = np.asarray(psi, dtype=float)
        if psi.shape != (ny + 1, nx + 1):
            raise InvalidStateError(f"psi must have nodal shape {(ny + 1, nx + 1)}")
        ux = (psi[1:, :] - psi[:-1, :]) / dy
        uy = -(psi[:, 1:] - psi[:, :-1]) / dx
        return cls(grid=grid, components=(ux, uy))

    def l2_norm_sq(self) -> float:
        """Squared volume-weighted norm, sum u^2 * cell_volume over faces."""
        return float(sum((a**2).sum() for a in self.components) * self.grid.cell_volume)

    def kinetic_energy(self) -> float:
        return 0.5 * self.l2_norm_sq()

    def max_divergence(self) -> float:
        return float(np.abs(divergence(self, self.grid)).max())


@dataclass(frozen=True)
class PressureField:
    """Cell-centered pressure, normalized to zero mean."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise InvalidStateError(f"pressure must have shape {self.grid.shape}")
        object.__setattr__(self, "values", v - v.mean())

    @classmethod
    def zero(cls, grid: Grid) -> "PressureField":
        return cls(grid=grid, values=np.zeros(grid.shape))


@dataclass(frozen=True)
class ForcingField:
    """Face-centered force density, piecewise constant over a step."""

    grid: Grid
    components: tuple

    def __post_init__(self):
        comps = _check_components(self.components, self.grid, "forcing")
        object.__setattr__(self, "components", comps)

    @classmethod
    def zero(cls, grid: Grid) -> "ForcingField":
        return cls(grid=grid, components=tuple(np.zeros(s) for s in _mac_shapes(grid)))


@dataclass(frozen=True)
class NsStepStats:
    """Per-step energy bookkeeping; the identity residual is lhs - rhs."""

    kinetic_energy: float
    max_divergence: float
    grad_norm_sq: float
    energy_lhs: float
    energy_rhs: float
    energy_residual: float


def divergence(u: VelocityField, grid: Grid):
    """MAC-native divergence at cell centers."""
    if grid.dim == 1:
        (ux,) = u.components
        return (ux[1:] - ux[:-1]) / grid.spacing[0]
    ux, uy = u.components
    dx, dy = grid.spacing
    return (ux[:, 1:] - ux[:, :-1]) / dx + (uy[1:, :] - uy[:-1, :]) / dy


def _pack(u: VelocityField) -> np.ndarray:
    ux, uy = u.components
    return np.concatenate([ux[:, 1:-1].ravel(), uy[1:-1, :].ravel()])


def _unpack(vec: np.ndarray, grid: Grid) -> VelocityField:
    nx, ny = grid.cells
    n_u = ny * (nx - 1)
    ux = np.zeros((ny, nx + 1))
    uy = np.zeros((ny + 1, nx))
    ux[:, 1:-1] = vec[:n_u].reshape(ny, nx - 1)
    uy[1:-1, :] = vec[n_u:].reshape(ny - 1, nx)
    return VelocityField(grid=grid, components=(ux, uy))


def _tridiag(n: int, h: float, ghost_ends: bool) -> sp.csr_matrix:
    """1D Dirichlet Laplacian: exact zero nodes beyond the ends, or no-slip
    ghosts half a spacing outside (reflected, u_ghost = -u_edge)."""
    main = np.full(n, -2.0)
    if ghost_ends:
        main[0] = main[-1] = -3.0
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


@lru_cache(maxsize=None)
def _component_laplacians(grid: Grid):
    """Dirichlet Laplacians for each velocity component on interior faces."""
    nx, ny = grid.cells
    dx, dy = grid.spacing
    lap_x = (sp.kron(sp.identity(ny), _tridiag(nx - 1, dx, ghost_ends=False))
             + sp.kron(_tridiag(ny, dy, ghost_ends=True), sp.identity(nx - 1))).tocsr()
    lap_y = (sp.kron(sp.identity(ny - 1), _tridiag(nx, dx, ghost_ends=True))
             + sp.kron(_tridiag(ny - 1, dy, ghost_ends=False), sp.identity(nx))).tocsr()
    return lap_x, lap_y


@lru_cache(maxsize=None)
def _constraint_matrices(grid: Grid):
    """Divergence matrix D on packed interior velocities; gradient is -D^T."""
    nx, ny = grid.cells
    dx, dy = grid.spacing
    n_u = ny * (nx - 1)
    n_v = (ny - 1) * nx
    cells = np.arange(ny * nx).reshape(ny, nx)
    xcol = np.arange(n_u).reshape(ny, nx - 1)
    ycol = np.arange(n_v).reshape(ny - 1, nx) + n_u
    rows, cols, vals = [], [], []
    # east/west faces
    rows += [cells[:, :-1].ravel(), cells[:, 1:].ravel()]
    cols += [xcol.ravel(), xcol.ravel()]
    vals += [np.full(n_u, 1.0 / dx), np.full(n_u, -1.0 / dx)]
    # north/south faces
    rows += [cells[:-1, :].ravel(), cells[1:, :].ravel()]
    cols += [ycol.ravel(), ycol.ravel()]
    vals += [np.full(n_v, 1.0 / dy), np.full(n_v, -1.0 / dy)]
    div = sp.coo_matrix((np.concatenate(vals),
                         (np.concatenate(rows), np.concatenate(cols))),
                        shape=(ny * nx, n_u + n_v)).tocsr()
    return div


def _interpolated_transverse(u: VelocityField, grid: Grid):
    """Previous-step transverse velocities averaged to each face family."""
    ux, uy = u.components
    # v averaged to interior x-faces (ny, nx-1)
    v_at_x = 0.25 * (uy[:-1, :-1] + uy[:-1, 1:] + uy[1:, :-1] + uy[1:, 1:])
    # u averaged to interior y-faces (ny-1, nx)
    u_at_y = 0.25 * (ux[:-1, :-1] + ux[:-1, 1:] + ux[1:, :-1] + ux[1:, 1:])
    return v_at_x, u_at_y


def _advection_matrix(u_prev: VelocityField, grid: Grid) -> sp.csr_matrix:
    """Centered advection by u_prev on packed unknowns (before skewing).

    Per component: a_x d/dx + a_y d/dy with the transverse coefficient
    averaged from the four surrounding faces; no-slip ghosts for tangential
    neighbors, exact zero nodes for wall-normal neighbors.
    """
    nx, ny = grid.cells
    dx, dy = grid.spacing
    n_u = ny * (nx - 1)
    n_v = (ny - 1) * nx
    ux, uy = u_prev.components
    v_at_x, u_at_y = _interpolated_transverse(u_prev, grid)

    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(np.asarray(r).ravel())
        cols.append(np.asarray(c).ravel())
        vals.append(np.asarray(v).ravel())

    # x-momentum rows, unknowns ux[:, 1:-1] with (iy, j), face ix = j+1
    rid = np.arange(n_u).reshape(ny, nx - 1)
    ax = ux[:, 1:-1] / (2.0 * dx)
    add(rid[:, :-1], rid[:, 1:], ax[:, :-1])        # east neighbor
    add(rid[:, 1:], rid[:, :-1], -ax[:, 1:])        # west neighbor
    ay = v_at_x / (2.0 * dy)
    add(rid[:-1, :], rid[1:, :], ay[:-1, :])        # up neighbor
    add(rid[1:, :], rid[:-1, :], -ay[1:, :])        # down neighbor
    add(rid[0, :], rid[0, :], ay[0, :])             # ghost below: u_g = -u
    add(rid[-1, :], rid[-1, :], -ay[-1, :])         # ghost above

    # y-momentum rows, unknowns uy[1:-1, :] with (i, ix), face iy = i+1
    rid = np.arange(n_v).reshape(ny - 1, nx) + n_u
    by = uy[1:-1, :] / (2.0 * dy)
    add(rid[:-1, :], rid[1:, :], by[:-1, :])
    add(rid[1:, :], rid[:-1, :], -by[1:, :])
    bx = u_at_y / (2.0 * dx)
    add(rid[:, :-1], rid[:, 1:], bx[:, :-1])
    add(rid[:, 1:], rid[:, :-1], -bx[:, 1:])
    add(rid[:, 0], rid[:, 0], bx[:, 0])
    add(rid[:, -1], rid[:, -1], -bx[:, -1])

    size = n_u + n_v
    return sp.coo_matrix((np.concatenate(vals),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(size, size)).tocsr()


def grad_norm_sq(u: VelocityField, grid: Grid) -> float:
    """Discrete |grad u|^2 induced by the Dirichlet Laplacian: -<Lu, u>."""
    if grid.dim == 1:
        return 0.0
    lap_x, lap_y = _component_laplacians(grid)
    vec = _pack(u)
    n_u = lap_x.shape[0]
    quad = vec[:n_u] @ (lap_x @ vec[:n_u]) + vec[n_u:] @ (lap_y @ vec[n_u:])
    return float(-quad * grid.cell_volume)


def smooth_initial_velocity(u0: VelocityField, tau: float, grid: Grid) -> VelocityField:
    """Viscous regularization: solve (I - tau L) u = u0 componentwise.

    The output never gains energy: |u|^2 + tau |grad u|^2 <= |u0| |u|.
    """
    if tau < 0.0 or not np.isfinite(tau):
        raise InvalidStateError("tau must be nonnegative and finite")
    if grid.dim == 1:
        return VelocityField.zero(grid)
    if tau == 0.0:
        return u0
    lap_x, lap_y = _component_laplacians(grid)
    vec = _pack(u0)
    n_u = lap_x.shape[0]
    out = np.empty_like(vec)
    for lap, sl in ((lap_x, slice(None, n_u)), (lap_y, slice(n_u, None))):
        system = (sp.identity(lap.shape[0]) - tau * lap).tocsc()
        out[sl] = splu(system).solve(vec[sl])
    return _unpack(out, grid)


def ns_step(u_prev: VelocityField, f_k, params, grid: Grid, *,
            div_tol: float = 1e-10):
    """One linearized implicit step; returns (velocity, pressure, stats).

    `f_k` is a ForcingField or None; `params` provides the step size tau.
    The divergence constraint is enforced in the solve itself; its residual
    is still measured and must stay below div_tol.
    """
    tau = float(params.tau)
    if grid.dim == 1:
        zero = VelocityField.zero(grid)
        stats = NsStepStats(kinetic_energy=0.0, max_divergence=0.0,
                            grad_norm_sq=0.0, energy_lhs=0.0, energy_rhs=0.0,
                            energy_residual=0.0)
        return zero, PressureField.zero(grid), stats

    lap_x, lap_y = _component_laplacians(grid)
    div = _constraint_matrices(grid)
    n_vel = div.shape[1]
    n_cells = grid.n_cells
    lap = sp.block_diag((lap_x, lap_y), format="csr")
    adv = _advection_matrix(u_prev, grid)
    conv = 0.5 * (adv - adv.T)
    a_mom = sp.identity(n_vel) / tau + conv - lap
    grad = -div.T.tocsr()
    ones_col = sp.coo_matrix(np.ones((n_cells, 1)))
    saddle = sp.bmat([[a_mom, grad, None],
                      [div, None, ones_col],
                      [None, ones_col.T, None]], format="csc")

    u_vec = _pack(u_prev)
    f_vec = _pack(f_k) if f_k is not None else np.zeros(n_vel)
    rhs = np.concatenate([u_vec / tau + f_vec, np.zeros(n_cells), [0.0]])
    try:
        sol = splu(saddle).solve(rhs)
    except RuntimeError as exc:
        raise SolverError(f"saddle-point factorization failed: {exc}") from exc

    u_new = _unpack(sol[:n_vel], grid)
    pressure = PressureField(grid=grid, values=sol[n_vel:n_vel + n_cells].reshape(grid.shape))

    max_div = u_new.max_divergence()
    if max_div > div_tol:
        raise SolverError(f"divergence {max_div:.3e} exceeds tolerance {div_tol:.1e}")

    gsq = grad_norm_sq(u_new, grid)
    vol = grid.cell_volume
    nrm = lambda v: float(v @ v) * vol
    lhs = nrm(sol[:n_vel]) + nrm(sol[:n_vel] - u_vec) + 2.0 * tau * gsq
    rhs_val = nrm(u_vec) + 2.0 * tau * vol * float(f_vec @ sol[:n_vel])
    stats = NsStepStats(kinetic_energy=u_new.kinetic_energy(),
                        max_divergence=max_div, grad_norm_sq=gsq,
                        energy_lhs=lhs, energy_rhs=rhs_val,
                        energy_residual=lhs - rhs_val)
    return u_new, pressure, stats


@dataclass(frozen=True)
class EnergyReport:
    """Cumulative energy-estimate audit over a velocity history."""

    cumulative_lhs: np.ndarray
    bounds: np.ndarray
    per_step_ok: np.ndarray
    all_ok: bool


def energy_diagnostics(u_seq, f_seq, params) -> EnergyReport:
    """Audit the summed energy estimate over a trajectory.

    `u_seq` holds the fields u^0 .. u^K; `f_seq` the forcings of steps
    1 .. K (entries may be None).  Per step the identity
    |u^k|^2 + |u^k - u^{k-1}|^2 + 2 tau |grad u^k|^2 <= |u^{k-1}|^2
    + 2 tau <f^k, u^k> is checked at 1e-8 relative tolerance; cumulative
    sums are compared against |u^0|^2 plus the forcing work.
    """
    u_seq = list(u_seq)
    f_seq = list(f_seq) if f_seq is not None else [None] * (len(u_seq) - 1)
    if len(f_seq) != len(u_seq) - 1:
        raise InvalidStateError("need one forcing entry per step")
    tau = float(params.tau)
    if not u_seq:
        raise InvalidStateError("need at least the initial velocity")
    grid = u_seq[0].grid
    vol = grid.cell_volume
    base = u_seq[0].l2_norm_sq()
    running = base
    accum = 0.0
    cumulative, bounds, flags = [], [], []
    for k in range(1, len(u_seq)):
        uk = u_seq[k]
        prev = u_seq[k - 1]
        diff = sum(float(((a - b) ** 2).sum())
                   for a, b in zip(uk.components, prev.components)) * vol
        gsq = grad_norm_sq(uk, grid)
        work = 0.0
        if f_seq[k - 1] is not None:
            work = 2.0 * tau * vol * float(sum((fa * ua).sum() for fa, ua in
                                               zip(f_seq[k - 1].components, uk.components)))
        lhs = uk.l2_norm_sq() + diff + 2.0 * tau * gsq
        rhs = prev.l2_norm_sq() + work
        scale = max(1.0, abs(rhs))
        flags.append(lhs <= rhs + 1e-8 * scale)
        accum += diff + 2.0 * tau * gsq - work
        cumulative.append(uk.l2_norm_sq() + accum)
        bounds.append(base)
    cumulative = np.asarray(cumulative)
    bounds = np.asarray(bounds)
    flags = np.asarray(flags, dtype=bool)
    all_ok = bool(flags.all() and np.all(cumulative <= bounds + 1e-8 * np.maximum(1.0, bounds)))
    return EnergyReport(cumulative_lhs=cumulative, bounds=bounds,
                        per_step_ok=flags, all_ok=all_ok)


def write_velocity_snapshot(path, u: VelocityField, p: PressureField,
                            grid: Grid) -> None:
    """CSV with cell-centered interpolated velocity components and pressure."""
    if grid.dim == 1:
        (ux,) = u.components
        centered = (0.5 * (ux[:-1] + ux[1:]),)
        header = ["z", "u", "p"]
        coords = [grid.axis_centers(0)]
    else:
        ux, uy = u.components
        centered = (0.5 * (ux[:, :-1] + ux[:, 1:]), 0.5 * (uy[:-1, :] + uy[1:, :]))
        header = ["z", "y", "u", "v", "p"]
        xx, yy = grid.center_mesh()
        coords = [xx.ravel(), yy.ravel()]
    cols = [c.ravel() for c in centered] + [p.values.ravel()]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(grid.n_cells):
            writer.writerow([repr(float(c[k])) for c in coords]
                            + [repr(float(c[k])) for c in cols])
