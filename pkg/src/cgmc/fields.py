"""Sampling of cutoff Gaussian field hierarchies by circulant embedding.

Each level ``X_{eps_j}`` is the sum of independent stationary shells
``C_j(x) = int_{1/eps_{j-1}}^{1/eps_j} k(x u) / u du`` (with ``eps_{-1} = 1``).
Every shell is sampled on its own padded periodic box, then restricted to the
grid window, so that covariances at lags inside the window are exact.

Random streams are counter based (Philox) and keyed by
``(seed, field tag, replica, shell)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import fft as sfft

from .kernels import CutoffSchedule, Kernel, cutoff_covariance_radial, shell_covariance

CLAMP_ABORT = 1e-6
RANGE_TOLERANCE = 1e-12

TAG_X = 0
TAG_Y = 1


class SpectralMassError(RuntimeError):
    """Circulant embedding produced too much negative spectral mass."""


@dataclass(frozen=True)
class Grid:
    """Regular grid of ``n_points`` cells per axis on ``[0, extent)^d``.

    Field values live at cell midpoints ``(i + 1/2) h``.
    """

    dimension: int
    extent: float
    n_points: int

    def __post_init__(self) -> None:
        if self.dimension not in (1, 2):
            raise ValueError("only d = 1 and d = 2 are supported")
        n = self.n_points
        if n < 2 or n & (n - 1):
            raise ValueError("n_points must be a power of two")
        if not self.extent > 0:
            raise ValueError("extent must be positive")

    @property
    def spacing(self) -> float:
        return self.extent / self.n_points

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_points,) * self.dimension

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dimension

    def axis(self) -> np.ndarray:
        return (np.arange(self.n_points) + 0.5) * self.spacing

    def points(self) -> np.ndarray:
        """Midpoints; shape ``(n,)`` in d = 1 and ``(n, n, 2)`` in d = 2."""
        ax = self.axis()
        if self.dimension == 1:
            return ax
        return np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1)

    def check_resolution(self, schedule: CutoffSchedule) -> None:
        if self.spacing > schedule.eps_min / 4 * (1 + 1e-12):
            raise ValueError(
                f"grid spacing {self.spacing:g} exceeds eps_min/4 = {schedule.eps_min / 4:g}"
            )


@dataclass(frozen=True)
class ShellSpec:
    """One independent stationary increment of the hierarchy."""

    level: int
    eps_hi: float
    eps_lo: float
    variance: float
    padded: int
    sqrt_spectrum: np.ndarray = field(repr=False)
    clamped_mass: float = 0.0


@dataclass(frozen=True)
class FieldHierarchy:
    """Sampled levels of one or more replicas.

    ``values`` has shape ``(n_replicas, n_levels, *grid.shape)``; level ``j``
    holds ``X_{eps_j}`` at the grid midpoints.  ``variances[j]`` is the exact
    pointwise variance ``E[X_{eps_j}^2]``.
    """

    grid: Grid
    schedule: CutoffSchedule
    values: np.ndarray = field(repr=False)
    seed: int
    replicas: tuple[int, ...]
    kernel: Kernel | None
    kernel_name: str
    variances: tuple[float, ...]
    covariance: Callable[[np.ndarray, int], np.ndarray] = field(repr=False, compare=False)
    clamped_mass: float = 0.0
    warnings: tuple[str, ...] = ()

    @property
    def n_replicas(self) -> int:
        return self.values.shape[0]

    def level(self, j: int) -> np.ndarray:
        """Values at level ``j`` for all replicas."""
        return self.values[:, j]

    def epsilon(self, j: int) -> float:
        return self.schedule.levels[j]

    def cutoff_covariance(self, r: np.ndarray, j: int) -> np.ndarray:
        """Target covariance at radius ``r`` between two points of level ``j``."""
        return self.covariance(np.asarray(r, dtype=float), j)


def rng_stream(seed: int, tag: int, replica: int, shell: int) -> np.random.Generator:
    """Counter-based generator for the stream ``(seed, tag, replica, shell)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(tag), int(replica), int(shell)))
    return np.random.Generator(np.random.Philox(ss))


def effective_range(cov: Callable[[np.ndarray], np.ndarray], scale: float) -> float:
    """Smallest radius beyond which ``|cov| < RANGE_TOLERANCE * cov(0)``."""
    c0 = float(cov(np.array([0.0]))[0])
    r = np.geomspace(scale * 1e-3, scale * 1e6, 1200)
    vals = np.abs(cov(r))
    small = vals < RANGE_TOLERANCE * c0
    bad = np.nonzero(~small)[0]
    if bad.size == 0:
        return float(r[0])
    if bad[-1] == r.size - 1:
        raise ValueError("covariance does not decay within the search window")
    return float(r[bad[-1] + 1])


def _lag_radius(padded: int, h: float, dimension: int) -> np.ndarray:
    idx = np.arange(padded)
    lag = h * np.minimum(idx, padded - idx)
    if dimension == 1:
        return lag
    return np.hypot(lag[:, None], lag[None, :])


def build_shell(
    cov: Callable[[np.ndarray], np.ndarray],
    grid: Grid,
    level: int,
    eps_hi: float,
    eps_lo: float,
    corr_range: float,
) -> ShellSpec:
    """Circulant-embedding spectrum for a stationary radial covariance."""
    h = grid.spacing
    target = (2.0 * grid.extent + corr_range) / h
    padded = sfft.next_fast_len(int(math.ceil(target)), real=True)
    r = _lag_radius(padded, h, grid.dimension)
    c = cov(r)
    if grid.dimension == 1:
        lam = sfft.rfft(c).real
    else:
        lam = sfft.rfft2(c).real
    neg = float(np.sum(np.clip(-lam, 0.0, None)))
    total = float(np.sum(np.abs(lam)))
    clamped = neg / total if total > 0 else 0.0
    if clamped > CLAMP_ABORT:
        raise SpectralMassError(
            f"shell {level}: clamped spectral mass {clamped:.3e} exceeds {CLAMP_ABORT:g}"
        )
    sqrt_lam = np.sqrt(np.clip(lam, 0.0, None))
    return ShellSpec(level, eps_hi, eps_lo, float(c.flat[0]), padded, sqrt_lam, clamped)


def _sample_shell(shell: ShellSpec, grid: Grid, gen: np.random.Generator) -> np.ndarray:
    shape = (shell.padded,) * grid.dimension
    w = gen.standard_normal(shape)
    n = grid.n_points
    if grid.dimension == 1:
        x = sfft.irfft(shell.sqrt_spectrum * sfft.rfft(w), n=shell.padded)
        return x[:n]
    x = sfft.irfft2(shell.sqrt_spectrum * sfft.rfft2(w), s=shape)
    return x[:n, :n]


class HierarchySampler:
    """Reusable shell plan for one (covariance family, grid, schedule)."""

    def __init__(
        self,
        grid: Grid,
        schedule: CutoffSchedule,
        shells: Sequence[ShellSpec],
        variances: Sequence[float],
        covariance: Callable[[np.ndarray, int], np.ndarray],
        kernel: Kernel | None,
        kernel_name: str,
    ):
        self.grid = grid
        self.schedule = schedule
        self.shells = tuple(shells)
        self.variances = tuple(float(v) for v in variances)
        self.covariance = covariance
        self.kernel = kernel
        self.kernel_name = kernel_name

    @property
    def clamped_mass(self) -> float:
        return max((s.clamped_mass for s in self.shells), default=0.0)

    def sample_shells(self, seed: int, replica: int, tag: int = TAG_X) -> np.ndarray:
        """Independent shell increments of one replica, shape ``(J, *grid)``."""
        return np.stack([
            _sample_shell(s, self.grid, rng_stream(seed, tag, replica, s.level))
            for s in self.shells
        ])

    def sample(self, seed: int, replicas: Iterable[int] | int = 1, tag: int = TAG_X) -> FieldHierarchy:
        """Sample the listed replicas (``int`` means ``range(n)``)."""
        if isinstance(replicas, (int, np.integer)):
            replicas = range(int(replicas))
        replicas = tuple(int(r) for r in replicas)
        out = np.empty((len(replicas), len(self.shells)) + self.grid.shape)
        for i, rep in enumerate(replicas):
            np.cumsum(self.sample_shells(seed, rep, tag), axis=0, out=out[i])
        warnings = ()
        if self.clamped_mass > 0:
            warnings = (f"clamped spectral mass {self.clamped_mass:.3e}",)
        return FieldHierarchy(
            self.grid, self.schedule, out, int(seed), replicas, self.kernel,
            self.kernel_name, self.variances, self.covariance, self.clamped_mass, warnings,
        )


def star_sampler(kernel: Kernel, grid: Grid, schedule: CutoffSchedule) -> HierarchySampler:
    """Shell plan for the star-scale-invariant field built on ``kernel``."""
    if kernel.dimension != grid.dimension:
        raise ValueError("kernel and grid dimensions differ")
    grid.check_resolution(schedule)
    shells = []
    hi = 1.0
    for j, lo in enumerate(schedule):
        cov = (lambda r, a=hi, b=lo: shell_covariance(kernel, r, a, b))
        if math.isfinite(kernel.support_radius):
            rng = kernel.support_radius * hi
        else:
            rng = effective_range(cov, hi)
        shells.append(build_shell(cov, grid, j, hi, lo, rng))
        hi = lo
    variances = [math.log(1.0 / e) for e in schedule]

    def covariance(r: np.ndarray, j: int) -> np.ndarray:
        return cutoff_covariance_radial(kernel, r, schedule.levels[j])

    return HierarchySampler(grid, schedule, shells, variances, covariance, kernel, kernel.name)


def sample_star_field(
    kernel: Kernel, grid: Grid, schedule: CutoffSchedule, seed: int, replicas: Iterable[int] | int = 1
) -> FieldHierarchy:
    """Star-scale-invariant hierarchy ``(X_{eps_j})_j`` with covariance ``K_{eps v eps'}``."""
    return star_sampler(kernel, grid, schedule).sample(seed, replicas, TAG_X)


def sample_independent_pair(
    kernel: Kernel, grid: Grid, schedule: CutoffSchedule, seed: int, replicas: Iterable[int] | int = 1
) -> tuple[FieldHierarchy, FieldHierarchy]:
    """Independent hierarchies ``X`` and ``Y`` drawn from disjoint streams."""
    sampler = star_sampler(kernel, grid, schedule)
    return sampler.sample(seed, replicas, TAG_X), sampler.sample(seed, replicas, TAG_Y)


def exact_si_covariance(r, eps: float, T: float) -> np.ndarray:
    """``log(T/eps) + 1 - |x|/eps`` for ``|x| <= eps``, ``log_+(T/|x|)`` beyond."""
    r = np.abs(np.asarray(r, dtype=float))
    with np.errstate(divide="ignore"):
        far = np.log(np.maximum(T / np.where(r > 0, r, 1.0), 1.0))
    near = math.log(T / eps) + 1.0 - r / eps
    return np.where(r <= eps, near, far)


def _cone_shell(r, hi: float, lo: float) -> np.ndarray:
    # int_lo^hi (1 - |x|/t)_+ dt / t
    r = np.abs(np.asarray(r, dtype=float))
    inner = math.log(hi / lo) - r * (1.0 / lo - 1.0 / hi)
    with np.errstate(divide="ignore"):
        mid = np.log(hi / np.where(r > 0, r, 1.0)) - 1.0 + r / hi
    return np.where(r <= lo, inner, np.where(r < hi, mid, 0.0))


def exact_si_sampler(T: float, grid: Grid, schedule: CutoffSchedule) -> HierarchySampler:
    """Shell plan for the exactly scale invariant one-dimensional field."""
    if grid.dimension != 1:
        raise ValueError("the exact scale invariant field is one-dimensional")
    if T < grid.extent:
        raise ValueError("T must be at least the grid extent")
    grid.check_resolution(schedule)
    levels = schedule.levels
    shells = [build_shell(lambda r: exact_si_covariance(r, levels[0], T), grid, 0, T, levels[0], T)]
    for j in range(1, len(levels)):
        hi, lo = levels[j - 1], levels[j]
        shells.append(build_shell(lambda r, a=hi, b=lo: _cone_shell(r, a, b), grid, j, hi, lo, hi))
    variances = [math.log(T / e) + 1.0 for e in levels]

    def covariance(r: np.ndarray, j: int) -> np.ndarray:
        return exact_si_covariance(r, levels[j], T)

    return HierarchySampler(grid, schedule, shells, variances, covariance, None, "exact_scale_invariant")


def sample_exact_scale_invariant(
    T: float, grid: Grid, schedule: CutoffSchedule, seed: int, replicas: Iterable[int] | int = 1
) -> FieldHierarchy:
    """Hierarchy whose level ``eps`` has covariance :func:`exact_si_covariance`."""
    return exact_si_sampler(T, grid, schedule).sample(seed, replicas, TAG_X)


def lognormal_gap_constant(x: np.ndarray, y: np.ndarray) -> float:
    """Ratio ``E|e^{X-EX^2/2} - e^{Y-EY^2/2}| / sqrt(E(X-Y)^2)`` from joint samples.

    ``x`` and ``y`` are replica samples of a centered Gaussian pair.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    vx, vy = np.mean(x * x), np.mean(y * y)
    lhs = np.mean(np.abs(np.exp(x - vx / 2) - np.exp(y - vy / 2)))
    rhs = math.sqrt(np.mean((x - y) ** 2))
    return float(lhs / rhs)


def dump_hierarchy(field_: FieldHierarchy, path: str | Path, replica: int = 0) -> None:
    """Write one replica: text header then little-endian float64 level blocks."""
    g = field_.grid
    header = (
        f"dimension {g.dimension}\nn {g.n_points}\nL {g.extent!r}\n"
        f"schedule {' '.join(repr(e) for e in field_.schedule)}\n"
        f"kernel {field_.kernel_name}\nseed {field_.seed}\nreplica {field_.replicas[replica]}\n"
        "end\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for j in range(len(field_.schedule)):
            block = np.ascontiguousarray(field_.values[replica, j], dtype="<f8")
            fh.write(block.tobytes(order="C"))


def load_dump(path: str | Path) -> tuple[dict[str, str], np.ndarray]:
    """Inverse of :func:`dump_hierarchy`: ``(header, values[level, ...])``."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end\n") + 4
    header = {}
    for line in raw[:end].decode("ascii").splitlines()[:-1]:
        key, _, val = line.partition(" ")
        header[key] = val
    d, n = int(header["dimension"]), int(header["n"])
    levels = len(header["schedule"].split())
    data = np.frombuffer(raw[end:], dtype="<f8").reshape((levels,) + (n,) * d)
    return header, data


def export_csv(field_: FieldHierarchy, path: str | Path, replica: int = 0) -> None:
    """CSV with one row per grid point: coordinates then one column per level."""
    g = field_.grid
    if g.n_points**g.dimension > 1 << 16:
        raise ValueError("CSV export is limited to small grids")
    pts = g.points().reshape(-1, g.dimension)
    vals = field_.values[replica].reshape(len(field_.schedule), -1).T
    cols = [f"x{i}" for i in range(g.dimension)] + [f"eps_{e!r}" for e in field_.schedule]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for p, v in zip(pts, vals):
            fh.write(",".join(repr(float(a)) for a in (*p, *v)) + "\n")
