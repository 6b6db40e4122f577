"""Pointwise algebra of an isothermal multicomponent mixture.

The mixture has n_species components with molar masses M_i and symmetric
binary diffusivities D_ij.  Total mass density is normalized to one, so a
state is a vector of partial densities rho on the open unit simplex.  The
module provides the closed algebra between three coordinate systems:

* partial mass densities rho_1..rho_n (sum = 1),
* mole fractions x_1..x_n (sum = 1) with molar concentration c,
* entropy variables w_1..w_{n-1}, the gradient of the molar entropy
  density with respect to the first n-1 densities.

The last species is eliminated; w has one component fewer than rho.  States
expressed in w are unconstrained, which is what makes the variables useful:
any finite w maps back to an interior simplex point.  The map w -> x reduces
to a scalar fixed point s = f(s) on (0, 1) with f strictly decreasing
(s is the total mole fraction of the first n-1 species).

All functions broadcast over leading axes: a single state has shape (n,),
a grid of states shape (..., n).  Matrices come back as (..., k, k) stacks
so that numpy's batched linear algebra applies directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, xlogy

from .errors import FixedPointError, InvalidStateError

__all__ = [
    "MixtureParams",
    "Composition",
    "EntropyVars",
    "SpeciesFlux",
    "molar_concentration",
    "rho_to_x",
    "x_to_rho",
    "rho_to_w",
    "w_to_x",
    "w_to_rho",
    "entropy_density",
    "entropy_density_rho_form",
    "entropy_hessian",
    "hessian_minor_lower_bound",
    "ms_resistance_matrix",
    "dw_dx",
    "drho_dx",
    "mobility_matrix",
    "ms_flux",
    "sqrt_fraction_gradient",
    "sample_interior_densities",
    "empirical_dissipation_ratio",
]

# Tolerance on |sum(rho) - 1| accepted by the density-based transforms.
RHO_SUM_TOL = 1e-8
# Tolerance on |sum(x) - 1| accepted by x_to_rho.
X_SUM_TOL = 1e-12


@dataclass(frozen=True)
class MixtureParams:
    """Immutable physical and numerical parameters of one mixture.

    molar_masses: shape (n_species,), strictly positive.
    diffusivities: shape (n_species, n_species), symmetric with strictly
        positive off-diagonal entries; the diagonal is never read.
    epsilon: strength of the w-space regularization (>= 0).
    tau: time-step size (> 0).
    """

    molar_masses: np.ndarray
    diffusivities: np.ndarray
    epsilon: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.molar_masses, dtype=float)
        d = np.asarray(self.diffusivities, dtype=float)
        if m.ndim != 1 or m.size < 2:
            raise InvalidStateError("need at least two species' molar masses")
        if not np.all(np.isfinite(m)) or np.any(m <= 0.0):
            raise InvalidStateError("molar masses must be finite and positive")
        n = m.size
        if d.shape != (n, n):
            raise InvalidStateError(
                f"diffusivities must have shape ({n}, {n}), got {d.shape}"
            )
        if not np.allclose(d, d.T, rtol=0.0, atol=1e-14):
            raise InvalidStateError("diffusivity matrix must be symmetric")
        off = d[~np.eye(n, dtype=bool)]
        if not np.all(np.isfinite(off)) or np.any(off <= 0.0):
            raise InvalidStateError("off-diagonal diffusivities must be positive")
        if not self.epsilon >= 0.0:
            raise InvalidStateError("epsilon must be >= 0")
        if not self.tau > 0.0:
            raise InvalidStateError("tau must be > 0")
        m.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "molar_masses", m)
        object.__setattr__(self, "diffusivities", d)

    @property
    def n_species(self) -> int:
        return self.molar_masses.size

    @property
    def n_reduced(self) -> int:
        """Number of independent species (one is eliminated)."""
        return self.n_species - 1


@dataclass(frozen=True)
class Composition:
    """A validated pointwise state: densities with derived c and x."""

    rho: np.ndarray
    c: float
    x: np.ndarray

    @classmethod
    def from_rho(cls, rho, params: MixtureParams) -> "Composition":
        rho = _as_state(rho, params.n_species)
        c = molar_concentration(rho, params)
        x = rho_to_x(rho, params)
        return cls(rho=rho, c=float(c), x=x)


@dataclass(frozen=True)
class EntropyVars:
    """Entropy variables for the first n-1 species; any finite value is valid."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if not np.all(np.isfinite(w)):
            raise InvalidStateError("entropy variables must be finite")
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class SpeciesFlux:
    """Diffusive mass fluxes of the first n-1 species, shape (..., n-1, dim)."""

    j_prime: np.ndarray

    def __post_init__(self):
        j = np.asarray(self.j_prime, dtype=float)
        if not np.all(np.isfinite(j)):
            raise InvalidStateError("fluxes must be finite")
        object.__setattr__(self, "j_prime", j)


def _as_state(arr, n: int, name: str = "rho") -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.shape[-1:] != (n,):
        raise InvalidStateError(f"{name} must have {n} components on the last axis")
    if not np.all(np.isfinite(arr)):
        raise InvalidStateError(f"{name} must be finite")
    return arr


def molar_concentration(rho, params: MixtureParams):
    """Total molar concentration c = sum_i rho_i / M_i.

    Requires nonnegative components and sum(rho) = 1 up to 1e-8.  The result
    always lies in [1/max(M), 1/min(M)].
    """
    rho = _as_state(rho, params.n_species)
    if np.any(rho < 0.0):
        raise InvalidStateError("negative partial density")
    total = rho.sum(axis=-1)
    if np.any(np.abs(total - 1.0) > RHO_SUM_TOL):
        raise InvalidStateError("partial densities must sum to 1 (within 1e-8)")
    return rho @ (1.0 / params.molar_masses)


def rho_to_x(rho, params: MixtureParams):
    """Mole fractions x_i = rho_i / (c M_i)."""
    c = np.asarray(molar_concentration(rho, params))
    rho = np.asarray(rho, dtype=float)
    return rho / (c[..., None] * params.molar_masses)


def x_to_rho(x, params: MixtureParams):
    """Partial densities from mole fractions: c = 1/sum(M x), rho_i = c M_i x_i."""
    x = _as_state(x, params.n_species, "x")
    if np.any(x <= 0.0):
        raise InvalidStateError("mole fractions must be strictly positive")
    total = x.sum(axis=-1)
    if np.any(np.abs(total - 1.0) > X_SUM_TOL):
        raise InvalidStateError("mole fractions must sum to 1 (within 1e-12)")
    return _x_to_rho_unchecked(x, params)


def _x_to_rho_unchecked(x, params: MixtureParams):
    m = params.molar_masses
    c = np.asarray(1.0 / (x @ m))
    return c[..., None] * m * x


def rho_to_w(rho, params: MixtureParams):
    """Entropy variables w_i = ln(x_i)/M_i - ln(x_n)/M_n, i = 1..n-1.

    Defined only for interior states: every rho_i must lie in (0, 1).
    """
    rho = _as_state(rho, params.n_species)
    if np.any(rho <= 0.0) or np.any(rho >= 1.0):
        raise InvalidStateError("entropy variables need 0 < rho_i < 1")
    x = rho_to_x(rho, params)
    m = params.molar_masses
    logx = np.log(x)
    return logx[..., :-1] / m[:-1] - logx[..., -1:] / m[-1]


# Positivity floor: true mole fractions can fall below the double-precision
# range for extreme w; they are clamped here so states stay interior.
X_FLOOR = 1e-300


def w_to_x(w, params: MixtureParams, tol: float = 1e-14, max_iter: int = 200):
    """Invert the entropy variables: full mole-fraction vector from w.

    Solves the scalar fixed point
        f(s) = sum_i (1-s)^(M_i/M_n) exp(M_i w_i) = s,   s in (0, 1),
    where f is strictly decreasing, so the root is unique.  The search runs
    in l = ln(1-s), which resolves both extremes (s near 0 and 1-s below one
    ulp) and never overflows: bisection on the predicate
    logsumexp(a_i + b_i l) > log1p(-e^l) brackets the root, safeguarded
    Newton polishes it.  Convergence: |f(s) - s| <= tol, or the bracket has
    collapsed to machine resolution (near the simplex boundary |f'| is huge
    and the absolute tolerance is unreachable by any representable s).
    Fractions that underflow double precision are clamped to 1e-300 so the
    output stays strictly interior.

    Equal molar masses short-circuit to the closed form
    x_i = exp(M w_i) / (1 + sum_j exp(M w_j)).
    """
    nr = params.n_reduced
    w = np.asarray(w, dtype=float)
    if w.shape[-1:] != (nr,):
        raise InvalidStateError(f"w must have {nr} components on the last axis")
    if not np.all(np.isfinite(w)):
        raise InvalidStateError("w must be finite")
    m = params.molar_masses

    if np.ptp(m) == 0.0:
        # softmax over (0, M w_1, ..., M w_{n-1}) is exactly (x_n, x_1, ...)
        z = np.concatenate([np.zeros(w.shape[:-1] + (1,)), m[0] * w], axis=-1)
        z = z - z.max(axis=-1, keepdims=True)
        ez = np.exp(z)
        x_all = ez / ez.sum(axis=-1, keepdims=True)
        return np.maximum(np.concatenate([x_all[..., 1:], x_all[..., :1]], axis=-1), X_FLOOR)

    a = m[:-1] * w                       # log of the exp factors
    b = m[:-1] / m[-1]                   # exponents of (1-s)

    def gap(ell):
        # g(l) = log f - log s, strictly increasing in l = ln(1-s);
        # s = -expm1(l) stays accurate when e^l rounds to 1
        return logsumexp(a + b * ell[..., None], axis=-1) - np.log(-np.expm1(ell))

    # lower end chosen so every exp factor is below e^{-50}: predicate false
    lo = np.min((-np.abs(a) - 50.0) / b, axis=-1) - 50.0
    hi = np.full(w.shape[:-1], -1e-250)
    n_bisect = 70
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        pos = gap(mid) > 0.0             # g > 0 means l past the root
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)

    def fixed_point_gap(ell):
        # f(s) - s = e^{log f} + expm1(l), safe once log f is moderate
        logf = logsumexp(a + b * ell[..., None], axis=-1)
        return np.where(logf < 1.0, np.exp(np.minimum(logf, 1.0)) + np.expm1(ell), np.inf)

    ell = 0.5 * (lo + hi)
    width_tol = 4e-16 * np.maximum(1.0, np.abs(ell))
    for _ in range(max_iter - n_bisect):
        d = fixed_point_gap(ell)
        done = (np.abs(d) <= tol) | (hi - lo <= width_tol)
        if np.all(done):
            break
        g = gap(ell)
        hi = np.where(g > 0.0, ell, hi)
        lo = np.where(g > 0.0, lo, ell)
        t = np.exp(a + b * ell[..., None] - logsumexp(a + b * ell[..., None], axis=-1)[..., None])
        s = -np.expm1(ell)
        gp = (b * t).sum(axis=-1) + (1.0 - s) / s     # g' >= min(b) > 0
        step = np.where(done, 0.0, -g / gp)
        ell_new = ell + step
        inside = (ell_new > lo) & (ell_new < hi)
        ell = np.where(inside, ell_new, 0.5 * (lo + hi))
        width_tol = 4e-16 * np.maximum(1.0, np.abs(ell))
    d = fixed_point_gap(ell)
    bad = ~((np.abs(d) <= tol) | (hi - lo <= width_tol))
    if np.any(bad):
        raise FixedPointError(
            f"w -> x fixed point failed at {int(bad.sum())} state(s); "
            f"worst |f(s)-s| = {float(np.abs(d[bad]).max()):.3e}"
        )
    x_red = np.exp(a + b * ell[..., None])
    x_last = np.exp(ell)[..., None]
    return np.maximum(np.concatenate([x_red, x_last], axis=-1), X_FLOOR)


def w_to_rho(w, params: MixtureParams, tol: float = 1e-14, max_iter: int = 200):
    """Partial densities from entropy variables; always interior.

    The result is renormalized onto the unit simplex, which the construction
    guarantees up to roundoff anyway.
    """
    x = w_to_x(w, params, tol=tol, max_iter=max_iter)
    rho = _x_to_rho_unchecked(x, params)
    return rho / rho.sum(axis=-1, keepdims=True)


def entropy_density(rho, params: MixtureParams):
    """Molar mixing entropy h = c [sum_i x_i (ln x_i - 1)] + c.

    Zero components contribute zero (x ln x -> 0); negative ones are
    rejected.  Since sum(x) = 1 this equals c sum_i x_i ln x_i.
    """
    c = molar_concentration(rho, params)
    x = rho_to_x(rho, params)
    return c * (xlogy(x, x) - x).sum(axis=-1) + c


def entropy_density_rho_form(rho, params: MixtureParams):
    """Same entropy written in densities:
    sum_i (rho_i/M_i)(ln(rho_i/M_i) - 1) - c (ln c - 1)."""
    c = molar_concentration(rho, params)
    r = np.asarray(rho, dtype=float) / params.molar_masses
    return (xlogy(r, r) - r).sum(axis=-1) - c * np.log(c) + c


def _interior_state(rho, params: MixtureParams) -> np.ndarray:
    rho = _as_state(rho, params.n_species)
    if np.any(rho <= 0.0) or np.any(rho >= 1.0):
        raise InvalidStateError("state must be interior: 0 < rho_i < 1")
    return rho


def entropy_hessian(rho, params: MixtureParams):
    """Hessian of the entropy in the first n-1 densities, shape (..., n-1, n-1).

        H_ij = delta_ij/(M_i rho_i) + 1/(M_n rho_n)
               - (1/c)(1/M_i - 1/M_n)(1/M_j - 1/M_n)

    Symmetric positive definite on the interior simplex.
    """
    rho = _interior_state(rho, params)
    m = params.molar_masses
    nr = params.n_reduced
    c = rho @ (1.0 / m)
    inv_mr = 1.0 / (m * rho)                       # (..., n)
    mt = 1.0 / m[:-1] - 1.0 / m[-1]                # (n-1,)
    h = np.zeros(rho.shape[:-1] + (nr, nr))
    idx = np.arange(nr)
    h[..., idx, idx] = inv_mr[..., :-1]
    h += inv_mr[..., -1:, None]
    h -= np.multiply.outer(1.0 / c, np.outer(mt, mt))
    return h


def hessian_minor_lower_bound(rho, params: MixtureParams):
    """Explicit positive lower bounds for the leading principal minors of H.

    Returns shape (..., n-1); entry k-1 bounds det H_k from below:

        det H_k > 2 / (c M_n prod_{l<=k} M_l)
                  * ( sum_{i<j<=k} 1/(rho_n prod_{l<=k, l!=i,j} rho_l)
                    + sum_{j<=k}   1/ prod_{l<=k, l!=j} rho_l )
    """
    rho = _interior_state(rho, params)
    m = params.molar_masses
    nr = params.n_reduced
    c = rho @ (1.0 / m)
    out = np.empty(rho.shape[:-1] + (nr,))
    for k in range(1, nr + 1):
        rk = rho[..., :k]
        pk = rk.prod(axis=-1)
        s1_pairs = 0.5 * (rk.sum(axis=-1) ** 2 - (rk**2).sum(axis=-1))
        s1 = s1_pairs / (rho[..., -1] * pk)
        s2 = rk.sum(axis=-1) / pk
        out[..., k - 1] = 2.0 / (c * m[-1] * m[:k].prod()) * (s1 + s2)
    return out


def _pair_coefficients(rho, params: MixtureParams):
    """d_ij = 1/(c^2 M_i M_j D_ij) with the unused diagonal zeroed."""
    m = params.molar_masses
    n = params.n_species
    c = np.asarray(rho, dtype=float) @ (1.0 / m)
    dmat = params.diffusivities.copy()
    np.fill_diagonal(dmat, 1.0)  # never read; avoids divide-by-zero
    d = 1.0 / (np.multiply.outer(c**2, np.outer(m, m) * dmat))
    d[..., np.arange(n), np.arange(n)] = 0.0
    return d


def ms_resistance_matrix(rho, params: MixtureParams):
    """Reduced Maxwell-Stefan resistance matrix A0, shape (..., n-1, n-1).

    A0 maps diffusive fluxes to fraction gradients, grad x' = A0 J'.
    Off-diagonal A0_ij = -(d_ij - d_in) rho_i; diagonal
    A0_ii = sum_{k<=n-1, k!=i} (d_ik - d_in) rho_k + d_in.
    Invertible with uniformly bounded inverse on the whole simplex.
    """
    rho = _as_state(rho, params.n_species)
    nr = params.n_reduced
    d = _pair_coefficients(rho, params)
    e = d[..., :nr, :nr] - d[..., :nr, -1:]        # d_ij - d_in, diag = -d_in
    idx = np.arange(nr)
    e[..., idx, idx] = 0.0
    a0 = -e * rho[..., :nr, None]
    a0[..., idx, idx] = np.einsum("...ij,...j->...i", e, rho[..., :nr]) + d[..., :nr, -1]
    return a0


def dw_dx(rho, params: MixtureParams):
    """Jacobian G = dw/dx' of entropy variables in the reduced fractions.

    G_ij = c (1/rho_n + delta_ij / rho_i); symmetric positive definite.
    """
    rho = _interior_state(rho, params)
    m = params.molar_masses
    nr = params.n_reduced
    c = np.asarray(rho @ (1.0 / m))
    g = np.zeros(rho.shape[:-1] + (nr, nr))
    g += np.asarray(c / rho[..., -1])[..., None, None]
    idx = np.arange(nr)
    g[..., idx, idx] += c[..., None] / rho[..., :nr]
    return g


def drho_dx(x, params: MixtureParams):
    """Jacobian of rho' in the reduced fractions (x_n = 1 - sum x_i eliminated):

        d rho_i / d x_k = c M_i delta_ik - c^2 M_i x_i (M_k - M_n)
    """
    x = _as_state(x, params.n_species, "x")
    if np.any(x <= 0.0):
        raise InvalidStateError("mole fractions must be strictly positive")
    m = params.molar_masses
    nr = params.n_reduced
    c = np.asarray(1.0 / (x @ m))
    j = np.zeros(x.shape[:-1] + (nr, nr))
    idx = np.arange(nr)
    j[..., idx, idx] = c[..., None] * m[:nr]
    # second term: c^2 M_i x_i (M_k - M_n), rows i, columns k
    j -= (c**2)[..., None, None] * (m[:nr] * x[..., :nr])[..., :, None] * (m[None, :nr] - m[-1])
    return j


def mobility_matrix(rho, params: MixtureParams):
    """Onsager mobility B = A0^{-1} G^{-1}, shape (..., n-1, n-1).

    Symmetric positive definite; the diffusion operator in entropy variables
    is div(B grad w), and B grad w = A0^{-1} grad x'.
    """
    g = dw_dx(rho, params)
    a0 = ms_resistance_matrix(rho, params)
    return np.linalg.inv(g @ a0)


def ms_flux(rho, grad_x, params: MixtureParams) -> SpeciesFlux:
    """Diffusive fluxes J' = -A0^{-1} grad x' from reduced fraction gradients.

    grad_x has shape (..., n-1, dim).  For two equal-mass species this is
    Fick's law J = -D12 grad rho1.
    """
    grad_x = np.asarray(grad_x, dtype=float)
    nr = params.n_reduced
    if grad_x.ndim < 2 or grad_x.shape[-2] != nr:
        raise InvalidStateError(f"grad_x must have shape (..., {nr}, dim)")
    a0 = ms_resistance_matrix(rho, params)
    return SpeciesFlux(j_prime=-np.linalg.solve(a0, grad_x))


def sqrt_fraction_gradient(rho, grad_w, params: MixtureParams):
    """grad sqrt(x_i) for all n species, from entropy-variable gradients.

    Chain rule: grad x' = G^{-1} grad w, grad x_n = -sum_i grad x_i,
    grad sqrt(x_i) = grad x_i / (2 sqrt(x_i)).  Shape (..., n, dim).
    """
    grad_w = np.asarray(grad_w, dtype=float)
    x = rho_to_x(rho, params)
    g = dw_dx(rho, params)
    gx = np.linalg.solve(g, grad_w)
    gx_last = -gx.sum(axis=-2, keepdims=True)
    gx_all = np.concatenate([gx, gx_last], axis=-2)
    return gx_all / (2.0 * np.sqrt(x)[..., None])


def sample_interior_densities(rng: np.random.Generator, count: int, n_species: int,
                              floor: float = 0.01) -> np.ndarray:
    """Random interior simplex points with min component about `floor`."""
    raw = rng.dirichlet(np.ones(n_species), size=count)
    return (raw + floor) / (1.0 + n_species * floor)


@dataclass(frozen=True)
class DissipationSuite:
    """Result of the empirical dissipation-ratio sampling."""

    min_ratio: float
    ratios: np.ndarray


def empirical_dissipation_ratio(params: MixtureParams, n_samples: int = 512,
                                seed: int = 0, dim: int = 2,
                                floor: float = 0.01) -> DissipationSuite:
    """Sample the pointwise ratio (grad w : B grad w) / |grad sqrt(x)|^2.

    The minimum over the suite is the empirical dissipation constant used by
    the field-level checks; structurally it is strictly positive.
    """
    rng = np.random.default_rng(seed)
    rho = sample_interior_densities(rng, n_samples, params.n_species, floor)
    grad_w = rng.standard_normal((n_samples, params.n_reduced, dim))
    b = mobility_matrix(rho, params)
    numer = np.einsum("sid,sij,sjd->s", grad_w, b, grad_w)
    gs = sqrt_fraction_gradient(rho, grad_w, params)
    denom = np.einsum("sid,sid->s", gs, gs)
    ratios = numer / denom
    return DissipationSuite(min_ratio=float(ratios.min()), ratios=ratios)
