"""Finite-volume operators and implicit time stepping for the species subsystem.

The multicomponent diffusion system is advanced in entropy variables: the
unknown per cell is the reduced vector w, states are recovered through
``w_to_rho`` and therefore stay interior by construction.  One implicit Euler
step solves, cell by cell,

    (rho'(w) - rho'_prev) / tau + (u . grad) rho'(w)
        - div(B(w) grad w) + eps (Lap^2 w + w) = 0,

with no-flux boundaries (mirrored ghosts), mobility B evaluated at
arithmetically averaged face values of w, and conservative advection fluxes
on the staggered velocity grid.  A damped Newton iteration solves the
nonlinear system; on non-convergence the step is retried on two half steps,
recursively, up to ten levels.

Velocity input: ``None`` (pure diffusion), a tuple of per-axis face-normal
arrays ((nx+1,) in 1D; (ny, nx+1) and (ny+1, nx) in 2D), or any object with
a ``components`` attribute holding that tuple.  Wall-normal entries must
vanish (no penetration).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, bicgstab, splu

from .errors import InvalidStateError, NonConvergenceError
from .grid import Grid
from .mixture import (
    MixtureParams,
    entropy_density,
    entropy_hessian,
    mobility_matrix,
    rho_to_w,
    rho_to_x,
    sqrt_fraction_gradient,
    w_to_rho,
)

logger = logging.getLogger(__name__)

WALL_TOL = 1e-12


def laplacian_neumann(field, grid: Grid):
    """Second-order Laplacian with zero-normal-flux (mirrored ghost) walls.

    `field` has the grid shape on its leading axes; trailing axes (e.g. a
    species component) are carried through unchanged.
    """
    f = np.asarray(field, dtype=float)
    if f.shape[: grid.dim] != grid.shape:
        raise InvalidStateError(f"field leading shape must be {grid.shape}")
    if grid.dim == 1:
        dx = grid.spacing[0]
        p = np.pad(f, ((1, 1),) + ((0, 0),) * (f.ndim - 1), mode="edge")
        return (p[:-2] - 2.0 * f + p[2:]) / dx**2
    dx, dy = grid.spacing
    pad = ((1, 1), (1, 1)) + ((0, 0),) * (f.ndim - 2)
    p = np.pad(f, pad, mode="edge")
    lap_x = (p[1:-1, :-2] - 2.0 * f + p[1:-1, 2:]) / dx**2
    lap_y = (p[:-2, 1:-1] - 2.0 * f + p[2:, 1:-1]) / dy**2
    return lap_x + lap_y


def bilaplacian(field, grid: Grid):
    """Composition L(L f): natural boundary conditions of the regularization."""
    return laplacian_neumann(laplacian_neumann(field, grid), grid)


def _neumann_1d(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    main[0] = main[-1] = -1.0
    off = np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


@lru_cache(maxsize=None)
def neumann_matrix(grid: Grid) -> sp.csr_matrix:
    """Sparse scalar Neumann Laplacian on row-major flattened cells."""
    if grid.dim == 1:
        return _neumann_1d(grid.cells[0], grid.spacing[0])
    nx, ny = grid.cells
    dx, dy = grid.spacing
    lx = _neumann_1d(nx, dx)
    ly = _neumann_1d(ny, dy)
    return (sp.kron(sp.identity(ny), lx) + sp.kron(ly, sp.identity(nx))).tocsr()


@lru_cache(maxsize=None)
def _regularization_matrix(grid: Grid) -> sp.csr_matrix:
    lap = neumann_matrix(grid)
    return (lap @ lap + sp.identity(grid.n_cells)).tocsr()


@lru_cache(maxsize=None)
def _face_pairs(grid: Grid):
    """Per axis: flat indices of the minus/plus cells of interior faces."""
    if grid.dim == 1:
        left = np.arange(grid.cells[0] - 1)
        return ((left, left + 1),)
    nx, ny = grid.cells
    flat = np.arange(ny * nx).reshape(ny, nx)
    x_pairs = (flat[:, :-1].ravel(), flat[:, 1:].ravel())
    y_pairs = (flat[:-1, :].ravel(), flat[1:, :].ravel())
    return (x_pairs, y_pairs)


def _face_velocities(u, grid: Grid):
    """Normalize the velocity argument to a tuple of face-normal arrays."""
    if u is None:
        return None
    comps = getattr(u, "components", u)
    comps = tuple(np.asarray(a, dtype=float) for a in comps)
    if grid.dim == 1:
        (nx,) = grid.cells
        expect = ((nx + 1,),)
    else:
        nx, ny = grid.cells
        expect = ((ny, nx + 1), (ny + 1, nx))
    if len(comps) != grid.dim or tuple(a.shape for a in comps) != expect:
        raise InvalidStateError(f"velocity face arrays must have shapes {expect}")
    walls = [comps[0][..., 0], comps[0][..., -1]]
    if grid.dim == 2:
        walls += [comps[1][0], comps[1][-1]]
    if max(float(np.abs(wv).max()) for wv in walls) > WALL_TOL:
        raise InvalidStateError("wall-normal velocities must vanish")
    return comps


@dataclass(frozen=True)
class SpeciesFieldState:
    """Species field at one time level; rho is always w_to_rho(w)."""

    w_field: np.ndarray
    rho_field: np.ndarray
    time: float

    @classmethod
    def from_w(cls, w_field, params: MixtureParams, time: float = 0.0,
               fixedpoint_tol: float = 1e-14) -> "SpeciesFieldState":
        w = np.asarray(w_field, dtype=float)
        return cls(w_field=w, rho_field=w_to_rho(w, params, tol=fixedpoint_tol), time=time)

    @classmethod
    def from_rho(cls, rho_field, params: MixtureParams, time: float = 0.0) -> "SpeciesFieldState":
        rho = np.asarray(rho_field, dtype=float)
        return cls(w_field=rho_to_w(rho, params), rho_field=rho, time=time)


@dataclass(frozen=True)
class StepStats:
    """Diagnostics of one implicit step (or a merged rescue cascade)."""

    newton_iters: int
    final_residual: float
    entropy_before: float
    entropy_after: float
    dissipation: float
    dissipation_sqrtx: float
    # Squared regularization norm int (|L w|^2 + |w|^2) dz at the new level,
    # reported without the epsilon factor.
    eps_norm: float
    advection_defect: float
    substeps: int = 1


def _advection(rho_red: np.ndarray, u_faces, grid: Grid):
    """Conservative transport term div(u rho_face) - rho div(u), per species.

    Face densities are arithmetic averages (second order); wall fluxes are
    zero, so the cell sum telescopes to nothing and mass is conserved
    exactly.  The -rho div(u) correction keeps uniform states stationary
    even under a small discrete divergence defect.
    """
    adv = np.zeros_like(rho_red)
    divu = np.zeros(grid.shape)
    if u_faces is None:
        return adv, divu
    if grid.dim == 1:
        (ux,) = u_faces
        dx = grid.spacing[0]
        rbar = 0.5 * (rho_red[:-1] + rho_red[1:])
        flux = np.zeros((grid.cells[0] + 1, rho_red.shape[-1]))
        flux[1:-1] = ux[1:-1, None] * rbar
        adv = (flux[1:] - flux[:-1]) / dx
        divu = (ux[1:] - ux[:-1]) / dx
    else:
        ux, uy = u_faces
        dx, dy = grid.spacing
        ny, nx = grid.shape
        fx = np.zeros((ny, nx + 1, rho_red.shape[-1]))
        fx[:, 1:-1] = ux[:, 1:-1, None] * 0.5 * (rho_red[:, :-1] + rho_red[:, 1:])
        fy = np.zeros((ny + 1, nx, rho_red.shape[-1]))
        fy[1:-1, :] = uy[1:-1, :, None] * 0.5 * (rho_red[:-1, :] + rho_red[1:, :])
        adv = (fx[:, 1:] - fx[:, :-1]) / dx + (fy[1:, :] - fy[:-1, :]) / dy
        divu = (ux[:, 1:] - ux[:, :-1]) / dx + (uy[1:, :] - uy[:-1, :]) / dy
    return adv - rho_red * divu[..., None], divu


@dataclass(frozen=True)
class _FaceData:
    """Mobility, gradient and state at the interior faces of one axis."""

    b_face: np.ndarray
    grad: np.ndarray
    rho_face: np.ndarray
    arr_axis: int
    h: float


def _face_diffusion(w: np.ndarray, params: MixtureParams, grid: Grid,
                    fixedpoint_tol: float):
    """Per axis: B at arithmetically averaged faces plus face gradients."""
    out = []
    for axis in range(grid.dim):
        # spatial axes are reversed in array order: x is the last of them
        arr_axis = grid.dim - 1 - axis
        h = grid.spacing[axis]
        lo = [slice(None)] * w.ndim
        hi = [slice(None)] * w.ndim
        lo[arr_axis] = slice(None, -1)
        hi[arr_axis] = slice(1, None)
        w_lo, w_hi = w[tuple(lo)], w[tuple(hi)]
        w_face = 0.5 * (w_lo + w_hi)
        rho_face = w_to_rho(w_face, params, tol=fixedpoint_tol)
        b_face = mobility_matrix(rho_face, params)
        grad = (w_hi - w_lo) / h
        out.append(_FaceData(b_face, grad, rho_face, arr_axis, h))
    return out


def _diffusion_term(w: np.ndarray, faces, grid: Grid) -> np.ndarray:
    """div(B grad w) from precomputed face data; zero wall fluxes."""
    div = np.zeros_like(w)
    for fd in faces:
        b_face, grad, arr_axis, h = fd.b_face, fd.grad, fd.arr_axis, fd.h
        flux = np.einsum("...ij,...j->...i", b_face, grad)
        shape = list(w.shape)
        shape[arr_axis] += 1
        padded = np.zeros(shape)
        interior = [slice(None)] * w.ndim
        interior[arr_axis] = slice(1, -1)
        padded[tuple(interior)] = flux
        lo = [slice(None)] * w.ndim
        hi = [slice(None)] * w.ndim
        lo[arr_axis] = slice(None, -1)
        hi[arr_axis] = slice(1, None)
        div += (padded[tuple(hi)] - padded[tuple(lo)]) / h
    return div


def _residual(w, rho_prev_red, u_faces, params: MixtureParams, grid: Grid,
              fixedpoint_tol: float):
    """Strong-form residual plus the pieces reused by the Jacobian."""
    nr = params.n_reduced
    rho_full = w_to_rho(w, params, tol=fixedpoint_tol)
    rho_red = rho_full[..., :nr]
    faces = _face_diffusion(w, params, grid, fixedpoint_tol)
    adv, divu = _advection(rho_red, u_faces, grid)
    r = (rho_red - rho_prev_red) / params.tau + adv - _diffusion_term(w, faces, grid)
    if params.epsilon > 0.0:
        r = r + params.epsilon * (bilaplacian(w, grid) + w)
    return r, rho_full, faces, divu


def ms_residual(w_next, rho_prev, u, params: MixtureParams, grid: Grid,
                fixedpoint_tol: float = 1e-14) -> np.ndarray:
    """Residual of the implicit step at a trial w, one reduced vector per cell.

    `rho_prev` is the full previous composition field; `u` the new-level
    velocity (see module docstring for accepted forms).
    """
    w = np.asarray(w_next, dtype=float)
    rho_prev = np.asarray(rho_prev, dtype=float)
    if w.shape != grid.shape + (params.n_reduced,):
        raise InvalidStateError(f"w_next must have shape {grid.shape + (params.n_reduced,)}")
    if rho_prev.shape != grid.shape + (params.n_species,):
        raise InvalidStateError(f"rho_prev must have shape {grid.shape + (params.n_species,)}")
    u_faces = _face_velocities(u, grid)
    r, _, _, _ = _residual(w, rho_prev[..., :params.n_reduced], u_faces, params,
                           grid, fixedpoint_tol)
    return r


def _block_coo(rows, cols, blocks, n_comp: int, size: int) -> sp.coo_matrix:
    comp = np.arange(n_comp)
    ri = (rows[:, None, None] * n_comp + comp[None, :, None])
    ci = (cols[:, None, None] * n_comp + comp[None, None, :])
    ri, ci = np.broadcast_arrays(ri, ci)
    return sp.coo_matrix((np.asarray(blocks).ravel(), (ri.ravel(), ci.ravel())),
                         shape=(size, size))


def _assemble_jacobian(rho_full, faces, divu, u_faces, params: MixtureParams,
                       grid: Grid) -> sp.csr_matrix:
    """Quasi-Newton matrix: exact time/advection terms, frozen-B diffusion."""
    nr = params.n_reduced
    nc = grid.n_cells
    size = nc * nr
    hinv = np.linalg.inv(entropy_hessian(rho_full, params)).reshape(nc, nr, nr)

    cells = np.arange(nc)
    rows = [cells]
    cols = [cells]
    blocks = [hinv / params.tau - divu.reshape(nc)[:, None, None] * hinv]

    pairs = _face_pairs(grid)
    for axis, fd in enumerate(faces):
        left, right = pairs[axis]
        h = fd.h
        b = fd.b_face.reshape(len(left), nr, nr) / h**2
        rows += [left, left, right, right]
        cols += [left, right, right, left]
        blocks += [b, -b, b, -b]
        if u_faces is not None:
            uf = (u_faces[0][1:-1] if grid.dim == 1
                  else (u_faces[0][:, 1:-1].ravel() if axis == 0
                        else u_faces[1][1:-1, :].ravel()))
            a = (uf / (2.0 * h))[:, None, None]
            rows += [left, left, right, right]
            cols += [left, right, left, right]
            blocks += [a * hinv[left], a * hinv[right],
                       -a * hinv[left], -a * hinv[right]]

    jac = _block_coo(np.concatenate(rows), np.concatenate(cols),
                     np.concatenate(blocks), nr, size)
    if params.epsilon > 0.0:
        jac = jac + params.epsilon * sp.kron(_regularization_matrix(grid),
                                             sp.identity(nr))
    return jac.tocsr()


def _solve_linear(jac: sp.csr_matrix, rhs: np.ndarray, grid: Grid) -> np.ndarray:
    if grid.dim == 1:
        return splu(jac.tocsc()).solve(rhs)
    diag = jac.diagonal()
    precond = LinearOperator(jac.shape, matvec=lambda v: v / diag)
    x, info = bicgstab(jac, rhs, rtol=1e-12, atol=0.0, M=precond)
    if info != 0:
        x = splu(jac.tocsc()).solve(rhs)
    return x


def _newton_step(rho_prev, u_faces, params: MixtureParams, grid: Grid,
                 newton_tol: float, newton_max_iter: int, max_halvings: int,
                 fixedpoint_tol: float, t_prev: float):
    nr = params.n_reduced
    rho_prev_red = rho_prev[..., :nr]
    w = rho_to_w(rho_prev, params)
    entropy_before = entropy_functional(rho_prev, params, grid)

    r, rho_full, faces, divu = _residual(w, rho_prev_red, u_faces, params, grid,
                                         fixedpoint_tol)
    res_norm = float(np.abs(r).max())
    iters = 1
    while res_norm > newton_tol:
        if iters >= newton_max_iter:
            raise NonConvergenceError(
                f"Newton stalled at residual {res_norm:.3e} after {iters} iterations",
                iterations=iters, residual=res_norm)
        jac = _assemble_jacobian(rho_full, faces, divu, u_faces, params, grid)
        delta = _solve_linear(jac, -r.reshape(-1), grid).reshape(w.shape)
        scale = 1.0
        for _ in range(max_halvings + 1):
            trial = w + scale * delta
            r_t, rho_t, faces_t, divu_t = _residual(trial, rho_prev_red, u_faces,
                                                    params, grid, fixedpoint_tol)
            norm_t = float(np.abs(r_t).max())
            if norm_t < res_norm:
                break
            scale *= 0.5
        else:
            raise NonConvergenceError(
                f"Newton line search failed at residual {res_norm:.3e}",
                iterations=iters, residual=res_norm)
        w, r, rho_full, faces, divu = trial, r_t, rho_t, faces_t, divu_t
        res_norm = norm_t
        iters += 1

    state = SpeciesFieldState(w_field=w, rho_field=rho_full,
                              time=t_prev + params.tau)
    diss, diss_sx = dissipation_terms(w, rho_full, params, grid)
    lap_w = laplacian_neumann(w, grid)
    eps_norm = float(grid.integrate((lap_w**2 + w**2).sum(axis=-1)))
    adv, _ = _advection(rho_full[..., :nr], u_faces, grid)
    defect = float(grid.integrate((w * adv).sum(axis=-1)))
    entropy_after = entropy_functional(rho_full, params, grid)
    logger.debug("entropy step: before=%.12e after+tau*(diss+eps*reg)=%.12e defect=%.3e",
                 entropy_before,
                 entropy_after + params.tau * (diss + params.epsilon * eps_norm), defect)
    stats = StepStats(newton_iters=iters, final_residual=res_norm,
                      entropy_before=entropy_before, entropy_after=entropy_after,
                      dissipation=diss, dissipation_sqrtx=diss_sx,
                      eps_norm=eps_norm, advection_defect=defect)
    return state, stats


def ms_step(rho_prev, u, params: MixtureParams, grid: Grid, *,
            newton_tol: float = 1e-10, newton_max_iter: int = 50,
            max_halvings: int = 30, fixedpoint_tol: float = 1e-14,
            t_prev: float = 0.0, _depth: int = 0):
    """Advance the species field by one implicit step of params.tau.

    Returns (SpeciesFieldState, StepStats).  On Newton failure the step is
    retried as two half steps (recursively, at most ten levels) before a
    NonConvergenceError propagates.  Merged stats weight the per-substep
    dissipation rates by their time fraction, so the logged entropy balance
    refers to the full step.
    """
    rho_prev = np.asarray(rho_prev, dtype=float)
    if rho_prev.shape != grid.shape + (params.n_species,):
        raise InvalidStateError(f"rho_prev must have shape {grid.shape + (params.n_species,)}")
    u_faces = _face_velocities(u, grid)
    try:
        return _newton_step(rho_prev, u_faces, params, grid, newton_tol,
                            newton_max_iter, max_halvings, fixedpoint_tol, t_prev)
    except NonConvergenceError:
        if _depth >= 10:
            raise
    half = replace(params, tau=params.tau / 2.0)
    logger.info("rescue: retrying step at tau=%.3e (depth %d)", half.tau, _depth + 1)
    kw = dict(newton_tol=newton_tol, newton_max_iter=newton_max_iter,
              max_halvings=max_halvings, fixedpoint_tol=fixedpoint_tol,
              _depth=_depth + 1)
    s1, st1 = ms_step(rho_prev, u, half, grid, t_prev=t_prev, **kw)
    s2, st2 = ms_step(s1.rho_field, u, half, grid, t_prev=s1.time, **kw)
    merged = StepStats(
        newton_iters=st1.newton_iters + st2.newton_iters,
        final_residual=max(st1.final_residual, st2.final_residual),
        entropy_before=st1.entropy_before,
        entropy_after=st2.entropy_after,
        dissipation=0.5 * (st1.dissipation + st2.dissipation),
        dissipation_sqrtx=0.5 * (st1.dissipation_sqrtx + st2.dissipation_sqrtx),
        eps_norm=0.5 * (st1.eps_norm + st2.eps_norm),
        advection_defect=0.5 * (st1.advection_defect + st2.advection_defect),
        substeps=st1.substeps + st2.substeps)
    return s2, merged


def entropy_functional(rho_field, params: MixtureParams, grid: Grid) -> float:
    """Midpoint quadrature of the mixing entropy density over the domain."""
    rho = np.asarray(rho_field, dtype=float)
    if rho.shape != grid.shape + (params.n_species,):
        raise InvalidStateError(f"rho_field must have shape {grid.shape + (params.n_species,)}")
    return float(grid.integrate(entropy_density(rho, params)))


def dissipation_terms(w_field, rho_field, params: MixtureParams, grid: Grid,
                      fixedpoint_tol: float = 1e-14):
    """Entropy dissipation (int grad w : B grad w, int |grad sqrt(x)|^2).

    Face quadrature with weight cell_volume per interior face; both factors
    of each face term come from the same averaged-w face state, so the
    pointwise lower bound of the mixture suite transfers to the quadrature.
    `rho_field` must be the composition matching `w_field`.
    """
    w = np.asarray(w_field, dtype=float)
    rho = np.asarray(rho_field, dtype=float)
    if rho.shape != grid.shape + (params.n_species,):
        raise InvalidStateError(f"rho_field must have shape {grid.shape + (params.n_species,)}")
    if w.shape != grid.shape + (params.n_reduced,):
        raise InvalidStateError(f"w_field must have shape {grid.shape + (params.n_reduced,)}")
    first = 0.0
    second = 0.0
    for fd in _face_diffusion(w, params, grid, fixedpoint_tol):
        quad = np.einsum("...i,...ij,...j->...", fd.grad, fd.b_face, fd.grad)
        first += float(quad.sum()) * grid.cell_volume
        gsx = sqrt_fraction_gradient(fd.rho_face, fd.grad[..., None], params)
        second += float((gsx**2).sum()) * grid.cell_volume
    return first, second


def write_species_snapshot(path, state: SpeciesFieldState, params: MixtureParams,
                           grid: Grid) -> None:
    """CSV snapshot: one row per cell, coordinates then rho, x, w columns."""
    n = params.n_species
    header = (["z"] if grid.dim == 1 else ["z", "y"])
    header += [f"rho_{i+1}" for i in range(n)]
    header += [f"x_{i+1}" for i in range(n)]
    header += [f"w_{i+1}" for i in range(n - 1)]
    x_frac = rho_to_x(state.rho_field, params)
    mesh = grid.center_mesh()
    if grid.dim == 1:
        coords = [mesh[0]]
    else:
        coords = [mesh[0].ravel(), mesh[1].ravel()]
    rho = state.rho_field.reshape(-1, n)
    x_frac = x_frac.reshape(-1, n)
    w = state.w_field.reshape(-1, n - 1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(rho.shape[0]):
            row = [repr(float(cv[k])) for cv in coords]
            row += [repr(float(v)) for v in rho[k]]
            row += [repr(float(v)) for v in x_frac[k]]
            row += [repr(float(v)) for v in w[k]]
            writer.writerow(row)
