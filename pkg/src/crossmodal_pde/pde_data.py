"""Generators for the four 1-D PDE task datasets, with solver-verified ground
truth and a portable container file format.

All solvers run in float64 internally; instance frames are stored float32.
Advection targets are evaluated analytically (no solver), so they are exact up
to storage precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .container import DataFileError, read_container, write_container
from .tensor import Tensor
from .transformer import ConfigError

ADVECTION = "advection"
DIFFUSION_REACTION = "diffusion_reaction"
DIFFUSION_SORPTION = "diffusion_sorption"
BURGERS_NS = "burgers_ns"  # 1-D viscous Burgers stand-in for compressible Navier-Stokes
FAMILIES = (ADVECTION, DIFFUSION_REACTION, DIFFUSION_SORPTION, BURGERS_NS)

N_FOURIER_MODES = 5


@dataclass(frozen=True)
class GridSpec:
    n_x: int = 128
    t_in: float = 0.0
    t_out: float = 0.5
    dt_solver: float | None = None  # None: generator picks a stable default

    def __post_init__(self):
        if self.n_x <= 0 or self.n_x % 2 != 0:
            raise ConfigError("n_x must be positive and even")
        if self.t_out <= self.t_in:
            raise ConfigError("t_out must exceed t_in")

    @property
    def dx(self) -> float:
        return 1.0 / self.n_x

    def to_dict(self) -> dict:
        return {"n_x": self.n_x, "t_in": self.t_in, "t_out": self.t_out,
                "dt_solver": self.dt_solver}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(n_x=d["n_x"], t_in=d["t_in"], t_out=d["t_out"], dt_solver=d.get("dt_solver"))


@dataclass(frozen=True)
class SorptionParams:
    diffusivity: float = 5e-4
    c: float = 1.0
    n: float = 0.874

    def __post_init__(self):
        if self.diffusivity <= 0:
            raise ConfigError("diffusivity must be positive")
        if self.c < 0 or not (0.0 < self.n < 1.0):
            raise ConfigError("retardation needs c >= 0 and 0 < n < 1")


@dataclass(frozen=True)
class PdeParams:
    family: str
    beta: float = 0.4
    nu: float = 0.5
    rho: float = 1.0
    eta: float = 0.1
    zeta: float = 0.1
    sorption: SorptionParams = field(default_factory=SorptionParams)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown PDE family {self.family!r}")

    def to_dict(self) -> dict:
        return {"family": self.family, "beta": self.beta, "nu": self.nu, "rho": self.rho,
                "eta": self.eta, "zeta": self.zeta,
                "sorption": {"diffusivity": self.sorption.diffusivity,
                             "c": self.sorption.c, "n": self.sorption.n}}

    @classmethod
    def from_dict(cls, d: dict) -> "PdeParams":
        s = d.get("sorption", {})
        return cls(family=d["family"], beta=d["beta"], nu=d["nu"], rho=d["rho"],
                   eta=d["eta"], zeta=d["zeta"],
                   sorption=SorptionParams(diffusivity=s.get("diffusivity", 5e-4),
                                           c=s.get("c", 1.0), n=s.get("n", 0.874)))


def default_params(family: str, **overrides) -> PdeParams:
    if family == BURGERS_NS:
        overrides.setdefault("nu", 0.1)  # matched to eta = zeta = 0.1
    return PdeParams(family=family, **overrides)


def default_grid(family: str, n_x: int = 128) -> GridSpec:
    horizons = {ADVECTION: 0.5, DIFFUSION_REACTION: 0.05,
                DIFFUSION_SORPTION: 20.0, BURGERS_NS: 0.5}
    return GridSpec(n_x=n_x, t_in=0.0, t_out=horizons[family])


@dataclass
class PdeInstance:
    input: Tensor
    target: Tensor
    params: PdeParams
    grid: GridSpec
    seed: int

    def __post_init__(self):
        self.input.validate_finite()
        self.target.validate_finite()


def _fourier_coefficients(rng: np.random.Generator, n_modes: int = N_FOURIER_MODES):
    """Coefficients for a smooth random series: amplitude decays as 1/k."""
    ks = np.arange(1, n_modes + 1)
    a = rng.normal(0.0, 1.0, size=n_modes) / ks
    b = rng.normal(0.0, 1.0, size=n_modes) / ks
    return a, b


def _fourier_eval(a: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    ks = np.arange(1, len(a) + 1)
    phase = 2.0 * np.pi * np.outer(x, ks)
    return np.cos(phase) @ a + np.sin(phase) @ b


def periodic_x(n_x: int) -> np.ndarray:
    return np.arange(n_x, dtype=np.float64) / n_x


def _instance(u0: np.ndarray, ut: np.ndarray, params: PdeParams, grid: GridSpec,
              seed: int) -> PdeInstance:
    return PdeInstance(input=Tensor(u0.astype(np.float32)),
                       target=Tensor(ut.astype(np.float32)),
                       params=params, grid=grid, seed=seed)


# -- advection (analytic translation) ------------------------------------


def advection_frames_f64(grid: GridSpec, beta: float, seed: int):
    """Float64 (input, target) frames; the target is the exact translated series."""
    rng = np.random.default_rng(seed)
    a, b = _fourier_coefficients(rng)
    x = periodic_x(grid.n_x)
    shift = beta * (grid.t_out - grid.t_in)
    return _fourier_eval(a, b, x), _fourier_eval(a, b, x - shift)


def gen_advection(grid: GridSpec, beta: float = 0.4, seed: int = 0,
                  params: PdeParams | None = None) -> PdeInstance:
    if params is None:
        params = default_params(ADVECTION, beta=beta)
    u0, ut = advection_frames_f64(grid, params.beta, seed)
    return _instance(u0, ut, params, grid, seed)


# -- diffusion-reaction (explicit FD) -------------------------------------

DIFFUSION_STABILITY_LIMIT = 0.4


def _periodic_laplacian(u: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(u, -1) - 2.0 * u + np.roll(u, 1)) / (dx * dx)


def _resolve_dt(grid: GridSpec, dt_max: float, safety: float = 0.625) -> tuple[float, int]:
    """Pick (dt, steps) covering the horizon exactly; error if grid's dt is unstable."""
    horizon = grid.t_out - grid.t_in
    if grid.dt_solver is not None:
        if grid.dt_solver > dt_max:
            raise ConfigError(
                f"dt_solver={grid.dt_solver:g} violates stability bound {dt_max:g}")
        dt = grid.dt_solver
    else:
        dt = safety * dt_max
    steps = max(1, int(np.ceil(horizon / dt)))
    return horizon / steps, steps


def diffusion_reaction_solve(u0: np.ndarray, grid: GridSpec, nu: float, rho: float) -> np.ndarray:
    dt_max = DIFFUSION_STABILITY_LIMIT * grid.dx**2 / nu
    dt, steps = _resolve_dt(grid, dt_max)
    u = u0.astype(np.float64).copy()
    for _ in range(steps):
        u = u + dt * (nu * _periodic_laplacian(u, grid.dx) + rho * u * (1.0 - u))
    return u


def gen_diffusion_reaction(grid: GridSpec, nu: float = 0.5, rho: float = 1.0,
                           seed: int = 0, params: PdeParams | None = None) -> PdeInstance:
    if params is None:
        params = default_params(DIFFUSION_REACTION, nu=nu, rho=rho)
    rng = np.random.default_rng(seed)
    a, b = _fourier_coefficients(rng)
    x = periodic_x(grid.n_x)
    u0 = np.clip(0.5 + 0.5 * _fourier_eval(a, b, x), 0.0, 1.0)
    ut = diffusion_reaction_solve(u0, grid, params.nu, params.rho)
    return _instance(u0, ut, params, grid, seed)


# -- diffusion-sorption (Dirichlet, implicit-explicit) ---------------------

SORPTION_U_FLOOR = 1e-8


def sorption_x(n_x: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_x)


def _retardation(u: np.ndarray, c: float, n: float) -> np.ndarray:
    return 1.0 + c * np.maximum(u, SORPTION_U_FLOOR) ** (n - 1.0)


def diffusion_sorption_solve(u0: np.ndarray, grid: GridSpec, sp: SorptionParams) -> np.ndarray:
    """Implicit diffusion with the retardation coefficient frozen per step.

    Dirichlet boundaries u(0)=1, u(1)=0 are enforced every step; the frozen
    coefficient makes each step an M-matrix solve, preserving [0, 1] bounds.
    """
    n_x = grid.n_x
    dx = 1.0 / (n_x - 1)
    dt = grid.dt_solver if grid.dt_solver is not None else (grid.t_out - grid.t_in) / 400.0
    steps = max(1, int(np.ceil((grid.t_out - grid.t_in) / dt)))
    dt = (grid.t_out - grid.t_in) / steps
    u = u0.astype(np.float64).copy()
    u[0], u[-1] = 1.0, 0.0
    for _ in range(steps):
        coef = dt * sp.diffusivity / (_retardation(u, sp.c, sp.n) * dx * dx)
        # banded system rows: upper, main, lower diagonals; boundary rows pinned
        ab = np.zeros((3, n_x))
        ab[1, :] = 1.0 + 2.0 * coef
        ab[0, 1:] = -coef[:-1]
        ab[2, :-1] = -coef[1:]
        ab[1, 0] = ab[1, -1] = 1.0
        ab[0, 1] = ab[2, -2] = 0.0
        rhs = u.copy()
        rhs[0], rhs[-1] = 1.0, 0.0
        u = solve_banded((1, 1), ab, rhs)
    return u


def gen_diffusion_sorption(grid: GridSpec, sorption: SorptionParams | None = None,
                           seed: int = 0, params: PdeParams | None = None) -> PdeInstance:
    if params is None:
        params = default_params(DIFFUSION_SORPTION,
                                sorption=sorption or SorptionParams())
    rng = np.random.default_rng(seed)
    a, b = _fourier_coefficients(rng)
    x = sorption_x(grid.n_x)
    u0 = np.clip((1.0 - x) + 0.4 * np.sin(np.pi * x) * _fourier_eval(a, b, x), 0.0, 1.0)
    u0[0], u0[-1] = 1.0, 0.0
    ut = diffusion_sorption_solve(u0, grid, params.sorption)
    return _instance(u0, ut, params, grid, seed)


# -- viscous Burgers stand-in for compressible Navier-Stokes ---------------


def burgers_step(u: np.ndarray, dx: float, dt: float, nu: float) -> np.ndarray:
    """One conservative step: Rusanov flux for u^2/2 plus central diffusion."""
    f = 0.5 * u * u
    u_r = np.roll(u, -1)
    a = np.maximum(np.abs(u), np.abs(u_r))
    flux = 0.5 * (f + np.roll(f, -1)) - 0.5 * a * (u_r - u)  # at i + 1/2
    div = (flux - np.roll(flux, 1)) / dx
    return u + dt * (-div + nu * _periodic_laplacian(u, dx))


def burgers_solve(u0: np.ndarray, grid: GridSpec, nu: float) -> np.ndarray:
    umax = max(1e-12, float(np.abs(u0).max()))
    dt_max = min(DIFFUSION_STABILITY_LIMIT * grid.dx**2 / nu,
                 DIFFUSION_STABILITY_LIMIT * grid.dx / umax)
    dt, steps = _resolve_dt(grid, dt_max)
    u = u0.astype(np.float64).copy()
    for _ in range(steps):
        u = burgers_step(u, grid.dx, dt, nu)
    return u


def gen_burgers_ns_standin(grid: GridSpec, nu: float = 0.1, seed: int = 0,
                           params: PdeParams | None = None) -> PdeInstance:
    if params is None:
        params = default_params(BURGERS_NS, nu=nu)
    rng = np.random.default_rng(seed)
    a, b = _fourier_coefficients(rng)
    u0 = _fourier_eval(a, b, periodic_x(grid.n_x))
    ut = burgers_solve(u0, grid, params.nu)
    return _instance(u0, ut, params, grid, seed)


# -- dataset assembly ------------------------------------------------------

_GENERATORS = {
    ADVECTION: lambda grid, params, seed: gen_advection(grid, seed=seed, params=params),
    DIFFUSION_REACTION: lambda grid, params, seed: gen_diffusion_reaction(grid, seed=seed, params=params),
    DIFFUSION_SORPTION: lambda grid, params, seed: gen_diffusion_sorption(grid, seed=seed, params=params),
    BURGERS_NS: lambda grid, params, seed: gen_burgers_ns_standin(grid, seed=seed, params=params),
}

_TRAIN_STREAM, _TEST_STREAM = 0, 1


def _instance_seed(base_seed: int, stream: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=(base_seed, stream, index)).generate_state(1)[0])


def generate_instance(family: str, grid: GridSpec, params: PdeParams, seed: int) -> PdeInstance:
    return _GENERATORS[family](grid, params, seed)


@dataclass
class PdeDataset:
    family: str
    params: PdeParams
    grid: GridSpec
    seed: int
    train: list[PdeInstance]
    test: list[PdeInstance]


def build_dataset(family: str, n_train: int, n_test: int, grid: GridSpec,
                  params: PdeParams | None = None, seed: int = 0,
                  out_path=None) -> PdeDataset:
    """Generate train/test splits from disjoint seed streams; optionally persist."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown PDE family {family!r}")
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train and n_test must be >= 1")
    if params is None:
        params = default_params(family)
    train = [generate_instance(family, grid, params, _instance_seed(seed, _TRAIN_STREAM, i))
             for i in range(n_train)]
    test = [generate_instance(family, grid, params, _instance_seed(seed, _TEST_STREAM, i))
            for i in range(n_test)]
    ds = PdeDataset(family=family, params=params, grid=grid, seed=seed, train=train, test=test)
    if out_path is not None:
        save_dataset(ds, out_path)
    return ds


def save_dataset(ds: PdeDataset, path) -> None:
    """Write the container: frames payload is ordered [instance][input|target][x]."""
    instances = ds.train + ds.test
    frames = np.stack([np.stack([inst.input.data, inst.target.data]) for inst in instances])
    header = {
        "kind": "pde_dataset",
        "family": ds.family,
        "params": ds.params.to_dict(),
        "grid": ds.grid.to_dict(),
        "n_train": len(ds.train),
        "n_test": len(ds.test),
        "seed": ds.seed,
        "instance_seeds": [inst.seed for inst in instances],
    }
    write_container(path, header, [("frames", frames)])


def load_dataset(path) -> PdeDataset:
    header, blocks = read_container(path)
    if header.get("kind") != "pde_dataset":
        raise DataFileError(f"{path} is not a pde dataset container")
    params = PdeParams.from_dict(header["params"])
    grid = GridSpec.from_dict(header["grid"])
    frames = blocks["frames"]
    seeds = header["instance_seeds"]
    instances = [PdeInstance(input=Tensor(frames[i, 0]), target=Tensor(frames[i, 1]),
                             params=params, grid=grid, seed=seeds[i])
                 for i in range(frames.shape[0])]
    n_train = header["n_train"]
    return PdeDataset(family=header["family"], params=params, grid=grid, seed=header["seed"],
                      train=instances[:n_train], test=instances[n_train:])
