"""Covariance seed kernels and the cutoff covariance built from them.

A seed kernel ``k`` is a radial, positive definite function with ``k(0) = 1``,
polynomial decay of order ``nu > d`` and a Lipschitz modulus at the origin.
The cutoff covariance is

    K_eps(x) = int_1^{1/eps} k(x u) / u du,

so that ``K_eps(0) = log(1/eps)``.  ``G_eps = exp(-K_eps)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate, special

QUAD_EPSABS = 1e-10
QUAD_EPSREL = 1e-8
# below this radius the integrand (1 - k(v)) / v is replaced by its local expansion
SERIES_CUTOFF = 1e-6
TAIL_TOLERANCE = 1e-13

BUILTIN_KERNELS = ("triangle", "gaussian", "mff")


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message: str, value: float, abserr: float):
        super().__init__(f"{message} (value={value!r}, achieved error={abserr:.3e})")
        self.value = value
        self.abserr = abserr


class KernelValidationError(ValueError):
    """A tabulated kernel violates normalization, decay or regularity."""


def adaptive_quad(
    func: Callable[[float], float],
    a: float,
    b: float,
    points: Sequence[float] | None = None,
    epsabs: float = QUAD_EPSABS,
    epsrel: float = QUAD_EPSREL,
    limit: int = 400,
) -> tuple[float, float]:
    """Gauss-Kronrod adaptive quadrature returning ``(value, abserr)``.

    Raises :class:`QuadratureError` if QUADPACK gives up with an error estimate
    above the requested tolerance.
    """
    if a == b:
        return 0.0, 0.0
    kwargs = dict(epsabs=epsabs, epsrel=epsrel, limit=limit, full_output=1)
    if points is not None and np.isfinite(a) and np.isfinite(b):
        inner = sorted(p for p in points if min(a, b) < p < max(a, b))
        if inner:
            kwargs["points"] = inner
    res = integrate.quad(func, a, b, **kwargs)
    value, abserr = float(res[0]), float(res[1])
    if len(res) > 3 and abserr > max(epsabs, epsrel * abs(value)) * 10:
        raise QuadratureError(str(res[3]).splitlines()[0], value, abserr)
    return value, abserr


@dataclass(frozen=True)
class Kernel:
    """A radial covariance seed ``k`` on R^d.

    ``decay_exponent`` and ``lipschitz_bound`` are the constants of the
    decay bound ``|k(x)| <= C (1 + |x|)^(-nu)`` and of ``|k(x) - 1| <= C |x|``.
    """

    name: str
    dimension: int
    params: Mapping[str, float] = field(default_factory=dict, hash=False)
    decay_exponent: float = 2.0
    lipschitz_bound: float = 1.0
    knots: tuple[float, ...] = ()
    support_radius: float = math.inf
    table: tuple[tuple[float, ...], tuple[float, ...]] | None = field(
        default=None, repr=False
    )

    def __post_init__(self) -> None:
        if self.dimension not in (1, 2):
            raise ValueError("only d = 1 and d = 2 are supported")
        if not self.decay_exponent > self.dimension:
            raise ValueError("decay exponent must exceed the dimension")

    def radial(self, r: np.ndarray | float) -> np.ndarray:
        """Evaluate ``k`` at radius ``r >= 0`` (vectorized)."""
        r = np.abs(np.asarray(r, dtype=float))
        if self.name == "triangle":
            return np.maximum(1.0 - r, 0.0)
        if self.name == "gaussian":
            return np.exp(-0.5 * r * r)
        if self.name == "mff":
            mr = self.params["m"] * r
            small = mr < 1e-6
            safe = np.where(small, 1.0, mr)
            # x K_1(x) = 1 + (x^2/2)(log(x/2) + euler_gamma - 1/2) + O(x^4 log x)
            x = np.where(small & (mr > 0), mr, 1e-300)
            series = 1.0 + 0.5 * x * x * (np.log(x) - math.log(2.0) + np.euler_gamma - 0.5)
            return np.where(small, series, safe * special.k1(safe))
        if self.table is not None:
            xs, vs = self.table
            return np.interp(r, xs, vs, right=0.0)
        raise ValueError(f"unknown kernel {self.name!r}")


def _radius(kernel: Kernel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("kernel argument must be finite")
    if kernel.dimension == 1 or x.ndim == 0:
        return np.abs(x)
    if x.shape[-1] != kernel.dimension:
        raise ValueError(f"expected points with last axis of size {kernel.dimension}")
    return np.sqrt(np.sum(x * x, axis=-1))


def _fit_constants(
    k: Callable[[np.ndarray], np.ndarray], dimension: int, nu: float
) -> float:
    r = np.concatenate([np.geomspace(1e-8, 1e4, 4000), np.linspace(0, 50, 5001)[1:]])
    vals = k(r)
    decay = np.max(np.abs(vals) * (1.0 + r) ** nu)
    lip = np.max(np.abs(vals - 1.0) / r)
    return float(max(decay, lip)) * 1.01


def triangle() -> Kernel:
    """The compactly supported kernel ``(1 - |u|)_+`` in dimension one."""
    return Kernel(
        "triangle", 1, {}, decay_exponent=2.0, lipschitz_bound=1.2,
        knots=(1.0,), support_radius=1.0,
    )


def gaussian(dimension: int = 2) -> Kernel:
    """``exp(-|x|^2 / 2)``."""
    nu = dimension + 1.0
    c = _fit_constants(lambda r: np.exp(-0.5 * r * r), dimension, nu)
    return Kernel("gaussian", dimension, {}, decay_exponent=nu, lipschitz_bound=c)


def mff(m: float = 1.0, dimension: int = 2) -> Kernel:
    """Massive free field seed ``1/2 int_0^inf exp(-m^2 |z|^2 / (2v) - v/2) dv``.

    The integral has the closed form ``m|z| K_1(m|z|)``.
    """
    if not m > 0:
        raise ValueError("mass must be positive")
    nu = dimension + 1.0
    probe = Kernel("mff", dimension, {"m": float(m)}, decay_exponent=nu)
    c = _fit_constants(probe.radial, dimension, nu)
    return Kernel("mff", dimension, {"m": float(m)}, decay_exponent=nu, lipschitz_bound=c)


def tabulated_kernel(
    abscissa: Sequence[float],
    values: Sequence[float],
    dimension: int = 1,
    name: str = "tabulated",
) -> Kernel:
    """Piecewise linear radial kernel, zero beyond the last abscissa.

    Assumption A is checked numerically: the table must start at ``(0, 1)``,
    have strictly increasing finite abscissae, and define a positive definite
    function (non-negative spectral density up to rounding).
    """
    xs = np.asarray(abscissa, dtype=float)
    vs = np.asarray(values, dtype=float)
    if xs.ndim != 1 or xs.shape != vs.shape or xs.size < 2:
        raise KernelValidationError("need two columns of equal length >= 2")
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(vs))):
        raise KernelValidationError("table entries must be finite")
    if np.any(np.diff(xs) <= 0):
        raise KernelValidationError("abscissae must be strictly increasing")
    if xs[0] != 0.0 or abs(vs[0] - 1.0) > 1e-12:
        raise KernelValidationError("normalization k(0) = 1 is violated")
    support = float(xs[-1])
    kernel = Kernel(
        name, dimension, {}, decay_exponent=dimension + 1.0,
        knots=tuple(float(v) for v in xs[1:]), support_radius=support,
        table=(tuple(float(v) for v in xs), tuple(float(v) for v in vs)),
    )
    lip = float(np.max(np.abs(np.diff(vs) / np.diff(xs))))
    decay = float(np.max(np.abs(vs) * (1.0 + xs) ** kernel.decay_exponent))
    kernel = Kernel(
        name, dimension, {}, decay_exponent=dimension + 1.0,
        lipschitz_bound=max(lip, decay) * 1.01, knots=kernel.knots,
        support_radius=support, table=kernel.table,
    )
    _check_positive_definite(kernel)
    return kernel


def _check_positive_definite(kernel: Kernel, n: int = 1 << 14) -> None:
    # spectral density of the radial profile sampled on a large periodic box
    length = 8.0 * kernel.support_radius
    h = length / n
    lags = h * np.minimum(np.arange(n), n - np.arange(n))
    if kernel.dimension == 1:
        spec = np.fft.rfft(kernel.radial(lags)).real
    else:
        m = 512
        h = length / m
        lag = h * np.minimum(np.arange(m), m - np.arange(m))
        spec = np.fft.rfft2(kernel.radial(np.hypot(lag[:, None], lag[None, :]))).real
    total = np.sum(np.abs(spec))
    if np.sum(np.clip(-spec, 0, None)) > 1e-6 * total:
        raise KernelValidationError("tabulated kernel is not positive definite")


def load_tabulated_kernel(path: str | Path, dimension: int = 1) -> Kernel:
    """Read a two-column CSV (abscissa, value) into a tabulated kernel."""
    xs: list[float] = []
    vs: list[float] = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                x, v = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if xs:
                    raise KernelValidationError(f"malformed row {row!r}")
                continue  # header
            xs.append(x)
            vs.append(v)
    return tabulated_kernel(xs, vs, dimension, name=Path(path).stem)


def make_kernel(name: str, dimension: int | None = None, **params: float) -> Kernel:
    """Registry lookup for the built-in kernels."""
    if name == "triangle":
        if dimension not in (None, 1):
            raise ValueError("the triangle kernel is one-dimensional")
        return triangle()
    if name == "gaussian":
        return gaussian(dimension or 2)
    if name == "mff":
        return mff(params.get("m", 1.0), dimension or 2)
    raise ValueError(f"unknown kernel {name!r}; choose from {BUILTIN_KERNELS}")


@dataclass(frozen=True)
class CutoffSchedule:
    """Strictly decreasing cutoffs ``eps_0 > eps_1 > ...`` in (0, 1]."""

    levels: tuple[float, ...]

    def __post_init__(self) -> None:
        lv = tuple(float(e) for e in self.levels)
        object.__setattr__(self, "levels", lv)
        if not lv:
            raise ValueError("schedule needs at least one level")
        if any(not (0.0 < e <= 1.0) for e in lv):
            raise ValueError("cutoffs must lie in (0, 1]")
        if any(b >= a for a, b in zip(lv, lv[1:])):
            raise ValueError("cutoffs must be strictly decreasing")

    @classmethod
    def geometric(cls, n_levels: int, ratio: float = 0.5, first: float | None = None):
        """``first * ratio^j`` for j < n_levels; ``first`` defaults to ``ratio``."""
        if not 0.0 < ratio < 1.0:
            raise ValueError("ratio must lie in (0, 1)")
        first = ratio if first is None else first
        return cls(tuple(first * ratio**j for j in range(n_levels)))

    @property
    def ratio(self) -> float:
        if len(self.levels) < 2:
            return float("nan")
        return self.levels[1] / self.levels[0]

    @property
    def eps_min(self) -> float:
        return self.levels[-1]

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)


def eval_kernel(kernel: Kernel, x) -> np.ndarray | float:
    """``k(x)``; for d = 2 the last axis of ``x`` holds coordinates."""
    out = kernel.radial(_radius(kernel, x))
    return float(out) if out.ndim == 0 else out


def _check_eps(eps: float) -> None:
    if not (0.0 < eps <= 1.0):
        raise ValueError(f"cutoff must lie in (0, 1], got {eps!r}")


def _ein(x: np.ndarray) -> np.ndarray:
    """Entire exponential integral ``int_0^x (1 - e^{-t}) / t dt``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < 1.0
    xs = x[small]
    term = xs.copy()
    acc = xs.copy()
    for k in range(2, 30):
        term = -term * xs * (k - 1) / (k * k)
        acc += term
    out[small] = acc
    xl = x[~small]
    out[~small] = special.exp1(xl) + np.log(xl) + np.euler_gamma
    return out


def shell_covariance_closed(kernel: Kernel, r, eps_hi: float, eps_lo: float) -> np.ndarray:
    """``int_{1/eps_hi}^{1/eps_lo} k(r u) / u du`` for the built-in kernels."""
    r = np.abs(np.asarray(r, dtype=float))
    a, b = 1.0 / eps_hi, 1.0 / eps_lo
    log_ratio = math.log(eps_hi) - math.log(eps_lo)
    if kernel.name == "triangle":
        with np.errstate(divide="ignore", over="ignore"):
            cap = np.minimum(b, np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), np.inf))
        val = np.log(np.maximum(cap, a) / a) - r * np.maximum(cap - a, 0.0)
        val = np.where(cap > a, val, 0.0)
        return np.where(r == 0, log_ratio, val)
    if kernel.name == "gaussian":
        xa = 0.5 * (r * a) ** 2
        xb = 0.5 * (r * b) ** 2
        return log_ratio - 0.5 * (_ein(xb) - _ein(xa))
    if kernel.name == "mff":
        m = kernel.params["m"]
        pos = r > 0
        rr = np.where(pos, r, 1.0)
        with np.errstate(invalid="ignore", over="ignore"):
            val = special.k0(m * rr * a) - special.k0(m * rr * b)
        # K_0(z) = -(log(z/2) + euler_gamma)(1 + z^2/4) + z^2/4 + O(z^4 log z)
        small = pos & (m * rr * b < 1e-6)
        lr = np.log(np.where(small, rr, 1.0)) + math.log(m) - math.log(2.0) + np.euler_gamma
        za2, zb2 = (m * rr * a) ** 2 / 4, (m * rr * b) ** 2 / 4
        series = -(lr - math.log(eps_hi)) * (1 + za2) + za2 + (lr - math.log(eps_lo)) * (1 + zb2) - zb2
        return np.where(pos, np.where(small, series, val), log_ratio)
    raise ValueError(f"no closed form for kernel {kernel.name!r}")


def shell_covariance_quad(kernel: Kernel, r: float, eps_hi: float, eps_lo: float) -> tuple[float, float]:
    """Adaptive quadrature of the shell integral; returns ``(value, abserr)``."""
    r = abs(float(r))
    a, b = 1.0 / eps_hi, 1.0 / eps_lo
    if r == 0.0:
        return math.log(eps_hi) - math.log(eps_lo), 0.0
    # integrate in v = r u so that kernel knots stay fixed
    hi = min(r * b, kernel.support_radius)
    lo = r * a
    if hi <= lo:
        return 0.0, 0.0
    return adaptive_quad(
        lambda v: float(kernel.radial(v)) / v, lo, hi, points=kernel.knots
    )


def shell_covariance(kernel: Kernel, r, eps_hi: float, eps_lo: float) -> np.ndarray:
    """Covariance of the field increment between cutoffs ``eps_hi > eps_lo``."""
    if kernel.name in BUILTIN_KERNELS:
        return shell_covariance_closed(kernel, r, eps_hi, eps_lo)
    r = np.abs(np.asarray(r, dtype=float))
    flat = np.array([shell_covariance_quad(kernel, v, eps_hi, eps_lo)[0] for v in r.ravel()])
    return flat.reshape(r.shape)


def cutoff_covariance(kernel: Kernel, x, eps: float) -> np.ndarray | float:
    """``K_eps(x)``, closed form for built-ins, quadrature otherwise."""
    _check_eps(eps)
    out = shell_covariance(kernel, _radius(kernel, x), 1.0, eps)
    out = np.asarray(out)
    return float(out) if out.ndim == 0 else out


def cutoff_covariance_radial(kernel: Kernel, r, eps: float) -> np.ndarray:
    """Vectorized ``K_eps`` as a function of the radius."""
    _check_eps(eps)
    return np.asarray(shell_covariance(kernel, r, 1.0, eps))


def g_eps(kernel: Kernel, x, eps: float) -> np.ndarray | float:
    """``G_eps(x) = exp(-K_eps(x))``."""
    out = np.exp(-np.asarray(cutoff_covariance(kernel, x, eps)))
    return float(out) if out.ndim == 0 else out


def defect_integral(kernel: Kernel, z: float) -> tuple[float, float]:
    """``int_0^z (1 - k(v)) / v dv`` with a local expansion near the origin.

    Returns ``(value, abserr)``.
    """
    z = abs(float(z))
    if z == 0.0:
        return 0.0, 0.0
    delta = min(z, SERIES_CUTOFF)
    # 1 - k(v) ~ c v^p near 0; p estimated from two probes
    d1 = 1.0 - float(kernel.radial(delta))
    d2 = 1.0 - float(kernel.radial(0.5 * delta))
    if d1 <= 0.0 or d2 <= 0.0:
        head = 0.0
    else:
        p = max(math.log2(d1 / d2), 0.5)
        head = d1 / p
    if z <= delta:
        return head, 0.0
    body, err = adaptive_quad(
        lambda v: (1.0 - float(kernel.radial(v))) / v, delta, z, points=kernel.knots
    )
    return head + body, err


def kernel_tail(kernel: Kernel, z: float) -> float:
    """``int_z^inf |k(v)| / v dv``."""
    if z >= kernel.support_radius:
        return 0.0
    if kernel.name == "gaussian":
        return float(0.5 * special.exp1(0.5 * z * z))
    if kernel.name == "mff":
        return float(special.k0(kernel.params["m"] * z))
    hi = kernel.support_radius
    if math.isinf(hi):
        val, _ = adaptive_quad(lambda v: abs(float(kernel.radial(v))) / v, z, math.inf)
        return val
    return adaptive_quad(lambda v: abs(float(kernel.radial(v))) / v, z, hi, points=kernel.knots)[0]


def greenk_decomposition(kernel: Kernel, t: float, eps: float) -> tuple[float, float]:
    """``(f(t), g_eps(t))`` with ``G_eps(eps t) = eps f(t) g_eps(t)``.

    ``f(t) = exp(int_0^|t| (1-k)/u du)`` and
    ``g_eps(t) = exp(-int_0^|eps t| (1-k)/u du)``.
    """
    if kernel.dimension != 1:
        raise ValueError("the f/g decomposition is implemented for d = 1")
    _check_eps(eps)
    if eps * abs(t) > 1.0:
        raise ValueError("requires eps |t| <= 1")
    f_log, _ = defect_integral(kernel, t)
    g_log, _ = defect_integral(kernel, eps * t)
    return math.exp(f_log), math.exp(-g_log)


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere in R^d (2 for d = 1)."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def _tail_radius(kernel: Kernel) -> float:
    if math.isfinite(kernel.support_radius):
        return kernel.support_radius
    z = 1.0
    while kernel_tail(kernel, z) > TAIL_TOLERANCE:
        z *= 2.0
        if z > 1e6:
            raise QuadratureError("kernel tail does not decay", z, math.nan)
    return z


def sigma2_with_error(kernel: Kernel, s: float, d: int | None = None) -> tuple[float, float]:
    """The constant sigma^2(s) together with a quadrature error bound.

    For ``s > d``: ``int_{R^d} exp(-s int_0^1 (1 - k(u z)) / u du) dz``.
    For ``s = d``: ``|S^{d-1}| exp(int_0^inf (k(u) - 1_{[0,1]}(u)) / u du)``.
    """
    d = kernel.dimension if d is None else int(d)
    if d != kernel.dimension:
        raise ValueError("dimension does not match the kernel")
    if s < d and not math.isclose(s, d, rel_tol=1e-12):
        raise ValueError(f"sigma^2 requires s >= d, got s={s!r}")
    area = sphere_area(d)
    z0 = _tail_radius(kernel)
    if math.isclose(s, d, rel_tol=1e-12, abs_tol=0.0):
        head, e1 = defect_integral(kernel, 1.0)
        tail, e2 = 0.0, 0.0
        if z0 > 1.0:
            tail, e2 = adaptive_quad(
                lambda v: float(kernel.radial(v)) / v, 1.0, z0, points=kernel.knots
            )
            e2 += kernel_tail(kernel, z0)
        val = area * math.exp(tail - head)
        return val, val * (e1 + e2)

    def integrand(r: float) -> float:
        if r == 0.0:
            return 0.0 if d > 1 else 1.0
        return r ** (d - 1) * math.exp(-s * defect_integral(kernel, r)[0])

    pts = tuple(p for p in kernel.knots if p < z0) + ((1.0,) if z0 > 1.0 else ())
    body, err = adaptive_quad(integrand, 0.0, z0, points=pts)
    # beyond z0 the defect integral grows like log exactly up to the tail of k
    i0 = defect_integral(kernel, z0)[0]
    tail = math.exp(-s * i0) * z0**d / (s - d)
    tail_err = tail * s * kernel_tail(kernel, z0)
    return area * (body + tail), area * (err + tail_err)


def sigma2(kernel: Kernel, s: float, d: int | None = None) -> float:
    """sigma^2(s) for ``s >= d`` (see :func:`sigma2_with_error`)."""
    return sigma2_with_error(kernel, s, d)[0]


def log_approximation_defect_levels(
    kernel: Kernel, R: float, schedule: CutoffSchedule, x_grid=None
) -> np.ndarray:
    """Per level ``sup_{|x| <= R} | K_eps(x) - |log(|x| v eps)| |``."""
    if not R > 0:
        raise ValueError("R must be positive")
    if x_grid is None:
        x_grid = np.unique(np.concatenate([
            np.linspace(0.0, R, 2001),
            np.geomspace(min(schedule.eps_min, R) * 1e-3, R, 2001),
        ]))
    r = _radius(kernel, x_grid)
    r = r[r <= R]
    out = []
    for eps in schedule:
        k = cutoff_covariance_radial(kernel, r, eps)
        ref = np.abs(np.log(np.maximum(r, eps)))
        out.append(float(np.max(np.abs(k - ref))))
    return np.array(out)


def log_approximation_defect(kernel: Kernel, R: float, schedule: CutoffSchedule, x_grid=None) -> float:
    """Supremum of the log-approximation defect over the schedule and grid."""
    return float(np.max(log_approximation_defect_levels(kernel, R, schedule, x_grid)))


def doubling_constant(kernel: Kernel, eps: float, per_octave: int = 64) -> float:
    """``C_1 = sup_{s in [0,1], t <= 2s} G_eps(t) / G_eps(s)`` on a log grid."""
    if kernel.dimension != 1:
        raise ValueError("the doubling constant is defined for d = 1")
    _check_eps(eps)
    octaves = int(math.ceil(math.log2(1.0 / eps))) + 16
    t = 2.0 * 2.0 ** (-np.arange(octaves * per_octave, -1, -1) / per_octave)
    g = np.exp(-cutoff_covariance_radial(kernel, t, eps))
    g0 = math.exp(-math.log(1.0 / eps))
    running = np.maximum.accumulate(np.maximum(g, g0))
    # s = t[i], 2s = t[i + per_octave]; keep s <= 1
    s_idx = np.arange(0, t.size - per_octave)
    ratios = running[s_idx + per_octave] / g[s_idx]
    return float(max(np.max(ratios), 1.0))
