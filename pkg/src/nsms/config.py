"""Flat key=value run configuration, scenario catalog, and presets.

One key per line, '#' starts a comment, unknown keys are rejected.  The
format is deliberately line-oriented so configs diff cleanly and any
parse failure can name its line.  Semantic validation happens in
RunConfig.__post_init__ and reports every violated rule at once, which
keeps `replace`-based programmatic edits honest too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, InvalidStateError
from .grid import Grid
from .mixture import MixtureParams

SCENARIOS = ("cosine", "random-fourier", "uniform")
SCHEDULES = ("fixed", "paper")


@dataclass(frozen=True)
class RunConfig:
    """Validated run description; fields mirror the config keys."""

    dimension: int
    cells_x: int
    length_x: float
    n_species: int
    molar_masses: tuple
    diffusivities: tuple
    t_end: float
    cells_y: int | None = None
    length_y: float | None = None
    tau: float | None = None
    epsilon: float = 0.0
    eta0: float = 0.0
    scenario: str = "cosine"
    amplitude: float = 0.0
    modes: tuple | None = None
    seed: int = 0
    u_amplitude: float = 0.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    fixedpoint_tol: float = 1e-14
    div_tol: float = 1e-10
    snapshot_interval: int = 0
    output_dir: str = "out"
    schedule: str = "fixed"
    gamma: float | None = None

    def __post_init__(self):
        problems = _semantic_problems(self)
        if problems:
            raise ConfigError("\n".join(problems))

    def resolved_modes(self) -> tuple:
        if self.modes is not None:
            return self.modes
        return tuple(range(1, self.n_species))

    def make_grid(self) -> Grid:
        if self.dimension == 1:
            return Grid.line(self.length_x, self.cells_x)
        return Grid.rectangle(self.length_x, self.length_y,
                              self.cells_x, self.cells_y)

    def make_params(self) -> MixtureParams:
        n = self.n_species
        diff = np.zeros((n, n))
        it = iter(self.diffusivities)
        for i in range(n):
            for j in range(i + 1, n):
                diff[i, j] = diff[j, i] = next(it)
        # tau is resolved by the driver when the schedule derives it.
        return MixtureParams(molar_masses=np.array(self.molar_masses),
                             diffusivities=diff, epsilon=self.epsilon,
                             tau=self.tau if self.tau is not None else 1.0)


def initial_density(config: RunConfig, grid: Grid) -> np.ndarray:
    """Build the configured initial composition on the grid.

    Every scenario perturbs the first N species around equal shares and
    assigns the remainder to the last species:

    * cosine:         share + (amplitude/i) * prod_ax cos(m_i pi z/L)
    * random-fourier: share + amplitude * seeded 3-mode cosine series
    * uniform:        equal shares everywhere
    """
    n = config.n_species
    rho = np.full(grid.shape + (n,), 1.0 / n)
    modes = config.resolved_modes()
    mesh = grid.center_mesh()
    hats = [mesh[ax] / grid.extents[ax] for ax in range(grid.dim)]

    def cosine_basis(mode: int) -> np.ndarray:
        basis = np.ones(grid.shape)
        for hat in hats:
            basis = basis * np.cos(mode * np.pi * hat)
        return basis

    if config.scenario == "cosine" and config.amplitude != 0.0:
        for i in range(n - 1):
            rho[..., i] += config.amplitude / (i + 1) * cosine_basis(modes[i])
    elif config.scenario == "random-fourier" and config.amplitude != 0.0:
        rng = np.random.default_rng(config.seed)
        coeff = rng.uniform(-1.0, 1.0, size=(n - 1, 3))
        for i in range(n - 1):
            series = sum(coeff[i, m - 1] / m * cosine_basis(m)
                         for m in range(1, 4))
            rho[..., i] += config.amplitude * series
    rho[..., -1] = 1.0 - rho[..., :-1].sum(axis=-1)
    return rho


def _semantic_problems(cfg: RunConfig) -> list:
    errs = []

    def check(ok: bool, message: str) -> bool:
        if not ok:
            errs.append(message)
        return ok

    geometry_ok = check(cfg.dimension in (1, 2), "dimension must be 1 or 2")
    geometry_ok &= check(isinstance(cfg.cells_x, int) and cfg.cells_x >= 2,
                         "cells_x must be an integer >= 2")
    geometry_ok &= check(cfg.length_x > 0.0, "length_x must be positive")
    if cfg.dimension == 2:
        geometry_ok &= check(cfg.cells_y is not None and cfg.cells_y >= 2,
                             "cells_y must be an integer >= 2 when dimension = 2")
        geometry_ok &= check(cfg.length_y is not None and cfg.length_y > 0.0,
                             "length_y must be positive when dimension = 2")
    else:
        geometry_ok &= check(cfg.cells_y is None and cfg.length_y is None,
                             "cells_y/length_y are only valid when dimension = 2")
        check(cfg.u_amplitude == 0.0, "u_amplitude requires dimension = 2")

    n = cfg.n_species
    mixture_ok = check(isinstance(n, int) and n >= 2,
                       "n_species must be an integer >= 2")
    if mixture_ok:
        mixture_ok &= check(
            len(cfg.molar_masses) == n,
            f"molar_masses needs {n} entries, got {len(cfg.molar_masses)}")
        pairs = n * (n - 1) // 2
        mixture_ok &= check(
            len(cfg.diffusivities) == pairs,
            f"diffusivities needs {pairs} entries for {n} species "
            f"(upper triangle), got {len(cfg.diffusivities)}")
        check(cfg.modes is None or (len(cfg.modes) == n - 1
                                    and all(m >= 1 for m in cfg.modes)),
              f"modes needs {n - 1} integers >= 1")
        check(0.0 <= cfg.eta0 <= 1.0 / (2.0 * n),
              f"eta0 must lie in [0, 1/{2 * n}]")

    check(cfg.schedule in SCHEDULES, f"schedule must be one of {SCHEDULES}")
    if cfg.schedule == "paper":
        check(cfg.tau is None, "tau is derived when schedule = paper")
        check(cfg.gamma is not None and 0.0 < cfg.gamma < 1.0,
              "gamma in (0, 1) is required when schedule = paper")
    else:
        check(cfg.tau is not None and cfg.tau > 0.0,
              "tau must be positive (or use schedule = paper)")
        check(cfg.gamma is None, "gamma is only used when schedule = paper")

    check(cfg.t_end > 0.0, "t_end must be positive")
    check(cfg.epsilon >= 0.0, "epsilon must be >= 0")
    check(cfg.scenario in SCENARIOS, f"scenario must be one of {SCENARIOS}")
    check(cfg.amplitude >= 0.0, "amplitude must be >= 0")
    check(cfg.seed >= 0, "seed must be >= 0")
    check(cfg.newton_tol > 0.0, "newton_tol must be positive")
    check(cfg.newton_max_iter >= 1, "newton_max_iter must be >= 1")
    check(cfg.fixedpoint_tol > 0.0, "fixedpoint_tol must be positive")
    check(cfg.div_tol > 0.0, "div_tol must be positive")
    check(cfg.snapshot_interval >= 0, "snapshot_interval must be >= 0")
    check(bool(cfg.output_dir), "output_dir must not be empty")

    if geometry_ok and mixture_ok:
        try:
            grid = cfg.make_grid()
            cfg.make_params()
        except (InvalidStateError, ValueError) as exc:
            errs.append(str(exc))
        else:
            rho = initial_density(cfg, grid)
            floor = float(rho.min())
            # eta0 > 0 re-interiorizes the data, so zeros are acceptable.
            interior = floor >= 0.0 if cfg.eta0 > 0.0 else floor > 0.0
            check(interior, "initial density leaves the open simplex "
                  f"(min rho = {floor:.3e}); reduce amplitude")
    return errs


_STR_KEYS = ("scenario", "output_dir", "schedule")
_LIST_FLOAT_KEYS = ("molar_masses", "diffusivities")
_LIST_INT_KEYS = ("modes",)
_INT_KEYS = ("dimension", "cells_x", "cells_y", "n_species", "seed",
             "newton_max_iter", "snapshot_interval")


def _convert(key: str, value: str):
    if key in _STR_KEYS:
        return value
    if key in _LIST_FLOAT_KEYS:
        return tuple(float(p) for p in value.split(","))
    if key in _LIST_INT_KEYS:
        return tuple(int(p) for p in value.split(","))
    if key in _INT_KEYS:
        return int(value)
    return float(value)


_KNOWN_KEYS = tuple(f.name for f in fields(RunConfig))


def parse_config(text: str) -> RunConfig:
    """Parse and validate config text; collects all problems before raising."""
    entries = {}
    problems = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep or not key:
            problems.append(f"line {line_no}: expected key = value, got {line!r}")
            continue
        if key not in _KNOWN_KEYS:
            problems.append(f"line {line_no}: unknown key {key!r}")
            continue
        if key in entries:
            problems.append(f"duplicate key {key!r} on lines "
                            f"{entries[key][1]} and {line_no}")
            continue
        if not value:
            problems.append(f"line {line_no}: empty value for {key!r}")
            continue
        entries[key] = (value, line_no)
    values = {}
    for key, (value, line_no) in entries.items():
        try:
            values[key] = _convert(key, value)
        except ValueError:
            problems.append(f"line {line_no}: cannot parse {key} value {value!r}")
    if problems:
        raise ConfigError("\n".join(problems))
    missing = [key for key in ("dimension", "cells_x", "length_x", "n_species",
                               "molar_masses", "diffusivities", "t_end")
               if key not in values]
    if missing:
        raise ConfigError("\n".join(f"missing required key {key!r}"
                                    for key in missing))
    return RunConfig(**values)


def render_config(config: RunConfig) -> str:
    """Canonical text form; parse_config(render_config(c)) == c."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


PRESETS = {
    "fick-limit-1d": """\
# Two equal-mass species in 1D; the mixture obeys a single heat equation.
# With equal molar masses cross-diffusion degenerates to Fickian diffusion,
# so the run has an exact analytic solution to compare against.
dimension = 1
cells_x = 256
length_x = 1.0
n_species = 2
molar_masses = 1.0,1.0
diffusivities = 0.1
tau = 0.0001
t_end = 1.0
scenario = cosine
amplitude = 0.1
output_dir = out-fick-limit-1d
""",
    "three-species-1d": """\
# Three unequal-mass species relax to the homogeneous steady state in 1D.
# The log of the relative entropy should fall on a straight line whose
# slope is the exponential decay rate.
dimension = 1
cells_x = 64
length_x = 1.0
n_species = 3
molar_masses = 1.0,2.0,3.0
diffusivities = 0.10,0.12,0.14
tau = 0.01
t_end = 10.0
scenario = cosine
amplitude = 0.06
snapshot_interval = 100
output_dir = out-three-species-1d
""",
    "two-species-2d-vortex": """\
# A start-up vortex stirs a two-species mixture in the unit square.
# Exercises the velocity coupling: the discrete energy estimate and
# entropy decay must both survive advection.
dimension = 2
cells_x = 64
cells_y = 64
length_x = 1.0
length_y = 1.0
n_species = 2
molar_masses = 1.0,2.0
diffusivities = 0.1
tau = 0.005
t_end = 0.25
scenario = cosine
amplitude = 0.05
u_amplitude = 0.1
snapshot_interval = 25
output_dir = out-two-species-2d-vortex
""",
    "paper-schedule": """\
# Derived schedule: step size and regularization come from gamma.
# Instead of fixing tau and epsilon by hand, both are computed from the
# initial masses so the mass drift stays below a provable bound.
dimension = 1
cells_x = 64
length_x = 1.0
n_species = 3
molar_masses = 1.0,2.0,3.0
diffusivities = 0.10,0.12,0.14
schedule = paper
gamma = 0.001
t_end = 1.0
scenario = cosine
amplitude = 0.05
output_dir = out-paper-schedule
""",
}


def preset_summary(name: str) -> str:
    """First comment line of a preset, as a one-line description."""
    for raw in PRESETS[name].splitlines():
        line = raw.strip()
        if line.startswith("#"):
            return line.lstrip("# ").strip()
    return ""
