"""Second-moment quadratures, Monte Carlo moment estimation and Gaussianity ratios."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .chaos import (
    ChaosParams,
    PhaseLabel,
    PhaseError,
    TestFunction,
    classify_phase,
    complex_chaos,
    derivative_martingale,
    renormalization_factor,
    wick_chaos_gamma,
)
from .fields import FieldHierarchy, HierarchySampler, TAG_X, TAG_Y
from .kernels import Kernel, QUAD_EPSABS, QUAD_EPSREL, adaptive_quad, cutoff_covariance_radial, sigma2

N_BATCHES = 32
MIN_REPLICAS = 16
MAX_SUBGRID = 64
QUADRATURE_BUDGET = 1 << 28  # bytes for the largest intermediate


@dataclass(frozen=True)
class MomentEstimate:
    value: complex
    stderr: float
    n_samples: int
    method: str
    epsilon: float = math.nan
    label: str = ""

    def __post_init__(self) -> None:
        if self.method not in ("mc", "quadrature"):
            raise ValueError("method must be 'mc' or 'quadrature'")
        if not self.stderr >= 0:
            raise ValueError("stderr must be non-negative")


@dataclass(frozen=True)
class ScalingFit:
    q: float
    radii: tuple[float, ...]
    log_moments: tuple[float, ...]
    slope: float
    intercept: float
    r2: float
    slope_stderr: float
    warnings: tuple[str, ...] = ()


def batch_means(samples: np.ndarray, n_batches: int = N_BATCHES) -> tuple[complex | float, float]:
    """Mean and batch-means standard error along axis 0.

    Complex samples get ``sqrt(se_re^2 + se_im^2)``.  Trailing axes are kept.
    """
    x = np.asarray(samples)
    n = x.shape[0]
    if n < MIN_REPLICAS:
        raise ValueError(f"need at least {MIN_REPLICAS} samples, got {n}")
    b = min(n_batches, n)
    means = np.stack([c.mean(axis=0) for c in np.array_split(x, b)])
    sizes = np.array([len(c) for c in np.array_split(x, b)], dtype=float)
    sizes = sizes.reshape((-1,) + (1,) * (x.ndim - 1))
    mean = x.mean(axis=0)
    dev = means - mean
    # size weighted so uneven batches stay unbiased
    var = (sizes * np.abs(dev) ** 2).sum(axis=0) / ((b - 1) * n)
    return mean, np.sqrt(var)


def stabilization(values: Sequence[float | complex], last: int = 3) -> float:
    """Spread of the last ``last`` entries relative to the final modulus."""
    v = np.asarray(values)[-last:]
    if v.size < 2:
        raise ValueError("need at least two values")
    spread = max(abs(a - b) for a in v for b in v)
    return float(spread / abs(v[-1]))


# ---------------------------------------------------------------------------
# deterministic quadrature

def _box_lengths(region, dimension: int) -> tuple[float, ...]:
    if isinstance(region, TestFunction):
        if region.kind != "indicator" or region.shape != "box":
            raise ValueError("quadrature regions must be indicator boxes")
        return (2 * region.radius,) * region.dimension
    lengths = tuple(float(b - a) for a, b in np.reshape(region, (-1, 2)))
    if len(lengths) != dimension:
        raise ValueError("region dimension does not match the kernel")
    if min(lengths) <= 0:
        raise ValueError("empty region")
    return lengths


def lag_integral(kernel: Kernel, s: float, eps: float, region) -> tuple[float, float]:
    """``int int_{A^2} exp(s K_eps(x - y)) dx dy`` for a box ``A``."""
    lengths = _box_lengths(region, kernel.dimension)
    knots = sorted({eps, *(eps * kk for kk in kernel.knots), *(kk for kk in kernel.knots)})
    if kernel.dimension == 1:
        ell = lengths[0]
        pts = [p for p in knots if 0 < p < ell]
        val, err = adaptive_quad(
            lambda u: (ell - u) * math.exp(s * float(cutoff_covariance_radial(kernel, u, eps))),
            0.0, ell, points=pts or None,
        )
        return 2 * val, 2 * err
    a, b = lengths

    def inner(v: float, u: float) -> float:
        r = math.hypot(u, v)
        return (a - u) * (b - v) * math.exp(s * float(cutoff_covariance_radial(kernel, r, eps)))

    # split at the cutoff radius where the integrand bends
    cuts = [0.0] + [c for c in (eps, 2 * eps) if c < a] + [a]
    val, err = 0.0, 0.0
    for lo, hi in zip(cuts, cuts[1:]):
        v, e = integrate.dblquad(inner, lo, hi, 0.0, b, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL)
        val, err = val + v, err + e
    return 4 * val, 4 * err


def unconditional_second_moment(kernel: Kernel, params: ChaosParams, eps: float, region) -> MomentEstimate:
    """``E|M_eps(A)|^2 = e^{(gamma^2-beta^2) K_eps(0)} int int_{A^2} e^{(gamma^2+beta^2) K_eps(x-y)}``."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if kernel.dimension != params.d:
        raise ValueError("kernel and parameter dimensions differ")
    k0 = float(cutoff_covariance_radial(kernel, 0.0, eps))
    val, err = lag_integral(kernel, params.s, eps, region)
    pre = math.exp((params.gamma**2 - params.beta**2) * k0)
    return MomentEstimate(pre * val, pre * err, 0, "quadrature", eps, "E|M|^2")


def renormalized_second_moment(
    kernel: Kernel, params: ChaosParams, eps: float, region, exploratory: bool = False
) -> MomentEstimate:
    """``renormalization_factor(eps)^2 * E|M_eps(A)|^2``."""
    raw = unconditional_second_moment(kernel, params, eps, region)
    f2 = renormalization_factor(params, eps, exploratory) ** 2
    return MomentEstimate(raw.value * f2, raw.stderr * f2, 0, "quadrature", eps, "renormalized E|M|^2")


def _weights(fieldX: FieldHierarchy, region) -> np.ndarray:
    if isinstance(region, TestFunction):
        phi = region
    else:
        bounds = np.reshape(region, (-1, 2))
        c = tuple((a + b) / 2 for a, b in bounds)
        widths = {round(float(b - a), 12) for a, b in bounds}
        if len(widths) != 1:
            raise ValueError("tuple regions must be cubes; pass a TestFunction otherwise")
        phi = TestFunction(c, widths.pop() / 2, "indicator", "box")
    return phi.weights(fieldX.grid) * fieldX.grid.cell_volume


def _lag_covariance(fieldX: FieldHierarchy, level: int, shape: tuple[int, ...]) -> np.ndarray:
    # covariance at signed lag indices laid out in FFT order
    h = fieldX.grid.spacing
    axes = [np.fft.fftfreq(n, 1.0 / n) * h for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt(sum(m * m for m in mesh))
    return fieldX.cutoff_covariance(r, level)


def conditional_second_moment(
    fieldX: FieldHierarchy, params: ChaosParams, level: int, region, method: str = "fft"
) -> np.ndarray:
    """``E[|M_eps(A)|^2 | X]`` per replica.

    ``int int a(x) a(y) exp(beta^2 (K(x-y) - K(0)))`` with ``a = phi e^{gamma X}``.
    ``method="fft"`` uses a zero-padded correlation; ``"direct"`` is the
    quadratic double sum.
    """
    w = _weights(fieldX, region)
    d = fieldX.grid.dimension
    a = w * np.exp(params.gamma * fieldX.level(level))
    b2 = params.beta**2
    k0 = float(fieldX.cutoff_covariance(np.zeros(1), level)[0])
    if b2 == 0.0:
        tot = a.reshape(a.shape[0], -1).sum(axis=1)
        return tot * tot
    if method == "direct":
        pts = fieldX.grid.points().reshape(-1, d)
        mask = w.reshape(-1) != 0
        pts = pts[mask]
        diff = pts[:, None, :] - pts[None, :, :]
        pair = np.exp(b2 * (fieldX.cutoff_covariance(np.sqrt((diff**2).sum(-1)), level) - k0))
        av = a.reshape(a.shape[0], -1)[:, mask]
        return np.einsum("ri,ij,rj->r", av, pair, av)
    if method != "fft":
        raise ValueError("method must be 'fft' or 'direct'")
    shape = tuple(2 * n for n in fieldX.grid.shape)
    axes = tuple(range(1, d + 1))
    fa = np.fft.rfftn(a, s=shape, axes=axes)
    corr = np.fft.irfftn(fa * fa.conj(), s=shape, axes=axes)
    pair = np.exp(b2 * (_lag_covariance(fieldX, level, shape) - k0))
    out = (corr * pair).reshape(a.shape[0], -1).sum(axis=1)
    return np.maximum(out, 0.0)


def renormalized_conditional_moment(
    fieldX: FieldHierarchy, params: ChaosParams, level: int, region, exploratory: bool = False
) -> np.ndarray:
    """``renormalization_factor^2 * E[|M_eps(A)|^2 | X]`` per replica."""
    f2 = renormalization_factor(params, fieldX.epsilon(level), exploratory) ** 2
    return f2 * conditional_second_moment(fieldX, params, level, region)


def conditional_moment_frontier23(
    fieldX: FieldHierarchy, params: ChaosParams, level: int, region, tol: float = 1e-9
) -> np.ndarray:
    """``|log eps|^{1/2} E[|M_eps(A)|^2 | X]`` on the frontier ``gamma = sqrt(d/2)``."""
    if abs(abs(params.gamma) - math.sqrt(params.d / 2)) > tol:
        raise PhaseError("frontier II/III needs gamma = sqrt(d/2)")
    if params.s <= params.d * (1 + tol):
        raise PhaseError("frontier II/III needs gamma^2 + beta^2 > d")
    eps = fieldX.epsilon(level)
    return math.sqrt(abs(math.log(eps))) * conditional_second_moment(fieldX, params, level, region)


def frontier23_ratio(
    fieldX: FieldHierarchy, kernel: Kernel, params: ChaosParams, level: int, region
) -> np.ndarray:
    """Per-replica ``output / (sigma^2 sqrt(2/pi) M'(A))`` at one level."""
    cm = conditional_moment_frontier23(fieldX, params, level, region)
    phi = region if isinstance(region, TestFunction) else None
    if phi is None:
        bounds = np.reshape(region, (-1, 2))
        phi = TestFunction(tuple((a + b) / 2 for a, b in bounds), (bounds[0, 1] - bounds[0, 0]) / 2, "indicator", "box")
    dm = derivative_martingale(fieldX, params.d, level, phi)
    return cm / (sigma2(kernel, params.s, params.d) * math.sqrt(2 / math.pi) * dm)


# ---------------------------------------------------------------------------
# Monte Carlo

@dataclass(frozen=True)
class ChaosSamples:
    """Renormalized chaos values, shape ``(replicas, levels, test functions)``."""

    values: np.ndarray
    epsilons: tuple[float, ...]
    params: ChaosParams
    phis: tuple[TestFunction, ...]
    warnings: tuple[str, ...] = ()


def _chunks(n: int, size: int) -> list[range]:
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def sample_chaos_values(
    sampler: HierarchySampler,
    params: ChaosParams,
    phis: Sequence[TestFunction],
    n_replicas: int,
    seed: int,
    chunk: int = 128,
    map_fn: Callable = map,
    exploratory: bool = False,
    extra: Callable[[FieldHierarchy, FieldHierarchy], np.ndarray] | None = None,
) -> ChaosSamples | tuple[ChaosSamples, np.ndarray]:
    """Renormalized ``M_eps(phi)`` for every level and test function.

    Replicas are processed in chunks so memory stays bounded; ``map_fn`` may
    be a thread-pool map.  Results are ordered by replica index, so they do
    not depend on the executor.  ``extra(X, Y)`` may compute further
    per-replica statistics from each chunk; its outputs are concatenated.
    """
    if n_replicas < MIN_REPLICAS:
        raise ValueError(f"need at least {MIN_REPLICAS} replicas")
    J = len(sampler.schedule)
    factors = np.array([renormalization_factor(params, e, exploratory) for e in sampler.schedule])
    need_y = params.beta != 0

    def run(reps: range):
        fx = sampler.sample(seed, reps, TAG_X)
        # with beta = 0 the Y field drops out, so X stands in for it
        fy = sampler.sample(seed, reps, TAG_Y) if need_y else fx
        out = np.empty((len(reps), J, len(phis)), dtype=complex)
        for j in range(J):
            for p, phi in enumerate(phis):
                out[:, j, p] = factors[j] * complex_chaos(fx, fy, params, j, phi)
        more = extra(fx, fy) if extra is not None else None
        return out, more

    parts = list(map_fn(run, _chunks(n_replicas, chunk)))
    values = np.concatenate([p[0] for p in parts])
    warn = tuple(w for phi in phis if (w := phi.warning)) + (
        (f"clamped spectral mass {sampler.clamped_mass:.3e}",) if sampler.clamped_mass > 0 else ()
    )
    result = ChaosSamples(values, tuple(sampler.schedule), params, tuple(phis), tuple(dict.fromkeys(warn)))
    if extra is None:
        return result
    return result, np.concatenate([p[1] for p in parts])


def mc_absolute_moment(samples: ChaosSamples, q: float, phi_index: int = 0) -> list[MomentEstimate]:
    """Batch-means estimate of ``E|factor * M_eps(phi)|^q`` at every level."""
    if q < 0:
        raise ValueError("q must be non-negative")
    v = np.abs(samples.values[:, :, phi_index]) ** q
    mean, se = batch_means(v)
    n = v.shape[0]
    return [
        MomentEstimate(complex(mean[j]), float(se[j]), n, "mc", samples.epsilons[j], f"E|M|^{q:g}")
        for j in range(v.shape[1])
    ]


def mc_mean(samples: ChaosSamples, phi_index: int = 0) -> list[MomentEstimate]:
    """Batch-means estimate of ``E[factor * M_eps(phi)]`` at every level."""
    v = samples.values[:, :, phi_index]
    mean, se = batch_means(v)
    return [
        MomentEstimate(complex(mean[j]), float(se[j]), v.shape[0], "mc", samples.epsilons[j], "E M")
        for j in range(v.shape[1])
    ]


def martingale_increments(samples: ChaosSamples, phi_index: int = 0) -> list[MomentEstimate]:
    """Paired mean of ``M_{eps_{j+1}} - M_{eps_j}``; zero for a martingale."""
    v = samples.values[:, :, phi_index]
    inc = np.diff(v, axis=1)
    mean, se = batch_means(inc)
    return [
        MomentEstimate(complex(mean[j]), float(se[j]), v.shape[0], "mc", samples.epsilons[j + 1], "increment")
        for j in range(inc.shape[1])
    ]


def multifractal_fit(estimates: Sequence[tuple[float, MomentEstimate]], q: float) -> ScalingFit:
    """Weighted least squares of ``log E|M(B_r)|^q`` against ``log r``."""
    notes = []
    kept = []
    for r, est in estimates:
        v = est.value.real if isinstance(est.value, complex) else est.value
        if not v > 0:
            notes.append(f"radius {r:g} dropped: non-positive estimate")
            warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
            continue
        kept.append((float(r), float(v), est.stderr))
    if len(kept) < 4:
        raise ValueError("need at least four radii with positive estimates")
    radii = np.array([k[0] for k in kept])
    if np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be strictly decreasing")
    y = np.log([k[1] for k in kept])
    sy = np.array([k[2] / k[1] for k in kept])
    x = np.log(radii)
    if np.any(sy <= 0):
        w = np.ones_like(y)
    else:
        w = 1.0 / sy**2
    A = np.stack([x, np.ones_like(x)], axis=1)
    Aw = A * w[:, None]
    cov = np.linalg.inv(A.T @ Aw)
    slope, intercept = cov @ (Aw.T @ y)
    resid = y - (slope * x + intercept)
    ybar = np.sum(w * y) / np.sum(w)
    sst = float(np.sum(w * (y - ybar) ** 2))
    r2 = 1.0 - float(np.sum(w * resid**2)) / sst if sst > 0 else 1.0
    if np.any(sy <= 0):
        dof = max(len(y) - 2, 1)
        se = math.sqrt(cov[0, 0] * float(np.sum(resid**2)) / dof)
    else:
        se = math.sqrt(cov[0, 0])
    return ScalingFit(q, tuple(radii), tuple(y), float(slope), float(intercept), r2, se, tuple(notes))


# ---------------------------------------------------------------------------
# Gaussianity ratios

@dataclass(frozen=True)
class _Slot:
    points: np.ndarray  # subgrid coordinates
    amp: np.ndarray  # (replicas, m): weight * e^{gamma X}
    sign: int


def _subgrid(lo: float, hi: float, spacing: float) -> np.ndarray:
    m = int(round((hi - lo) / spacing))
    if m < 1 or m > MAX_SUBGRID:
        raise ValueError(f"sub-grid of {m} points outside 1..{MAX_SUBGRID}")
    return lo + (np.arange(m) + 0.5) * (hi - lo) / m


def _amplitudes(fieldX: FieldHierarchy, level: int, gamma: float, pts: np.ndarray, lo: float, hi: float) -> np.ndarray:
    axis = fieldX.grid.axis()
    x = fieldX.level(level)
    vals = np.stack([np.interp(pts, axis, row) for row in x])
    return (hi - lo) / len(pts) * np.exp(gamma * vals)


def _contract(amps: Sequence[np.ndarray], pair: dict[tuple[int, int], np.ndarray]) -> complex:
    """``sum a_1(x_1)...a_n(x_n) prod_{p<q} P_pq(x_p, x_q)`` for ``n <= 4`` via matrix products."""
    n = len(amps)
    if n == 0:
        return 1.0
    if n == 1:
        return np.sum(amps[0])
    if n == 2:
        return amps[0] @ pair[0, 1] @ amps[1]
    a0, a1, a2 = amps[:3]
    base = np.outer(a0, a1) * pair[0, 1]
    if n == 3:
        inner = (pair[0, 2] * a2) @ pair[1, 2].T
        return np.sum(base * inner)
    a3 = amps[3]
    m0, m1 = len(a0), len(a1)
    # U[ab, c] = a2_c P02(a,c) P12(b,c); V likewise for the fourth slot
    U = (pair[0, 2][:, None, :] * pair[1, 2][None, :, :] * a2).reshape(m0 * m1, -1)
    V = (pair[0, 3][:, None, :] * pair[1, 3][None, :, :] * a3).reshape(m0 * m1, -1)
    inner = np.sum((U @ pair[2, 3]) * V, axis=1).reshape(m0, m1)
    return np.sum(base * inner)


def _slot_moment(slots: Sequence[_Slot], beta: float, cov: Callable[[np.ndarray], np.ndarray], k0: float) -> np.ndarray:
    """``E[prod_p M^{s_p}(A_p) | X]`` per replica, with ``M^{-1}`` the conjugate.

    The ``Y`` average of ``exp(i beta sum_p s_p Y(x_p))`` factorizes into
    ``exp(-beta^2 n K(0) / 2)`` times pair factors ``exp(-beta^2 s_p s_q K(x_p - x_q))``.
    """
    n = len(slots)
    if n > 4:
        raise ValueError("total quadrature dimension is capped at 4")
    b2 = beta * beta
    m = max((len(s.points) for s in slots), default=0)
    if 8 * m**3 > QUADRATURE_BUDGET:
        raise MemoryError("quadrature exceeds the memory budget")
    pair = {}
    for p in range(n):
        for q in range(p + 1, n):
            r = np.abs(slots[p].points[:, None] - slots[q].points[None, :])
            pair[p, q] = np.exp(-b2 * slots[p].sign * slots[q].sign * cov(r))
    n_rep = slots[0].amp.shape[0]
    out = np.array([_contract([s.amp[i] for s in slots], pair) for i in range(n_rep)], dtype=float)
    return out * math.exp(-b2 * n * k0 / 2.0)


def _check_d1(fieldX: FieldHierarchy) -> None:
    if fieldX.grid.dimension != 1:
        raise ValueError("moment ratios are implemented on one-dimensional grids")


def _interval_slots(fieldX, params, level, interval, k, kc, spacing):
    lo, hi = interval
    pts = _subgrid(lo, hi, spacing)
    amp = _amplitudes(fieldX, level, params.gamma, pts, lo, hi)
    return [_Slot(pts, amp, +1)] * k + [_Slot(pts, amp, -1)] * kc


def multi_interval_ratio(
    fieldX: FieldHierarchy,
    params: ChaosParams,
    level: int,
    intervals: Sequence[tuple[float, float]],
    exponents: Sequence[int],
    spacing: float | None = None,
) -> np.ndarray:
    """``E[prod_i M(A_i)^{k_i} conj(M(A_i))^{k'_i} | X] / prod_i E[|M(A_i)|^2 | X]^{(k_i+k'_i)/2}``.

    ``exponents`` lists ``(k_1, k'_1, k_2, k'_2, ...)``.  Integrals run on a
    sub-grid of the given spacing (default: the field grid spacing) with the
    field linearly interpolated.
    """
    _check_d1(fieldX)
    if len(exponents) != 2 * len(intervals):
        raise ValueError("need two exponents per interval")
    if sum(exponents) > 4:
        raise ValueError("total quadrature dimension is capped at 4")
    if any(k < 0 for k in exponents):
        raise ValueError("exponents must be non-negative")
    iv = sorted((float(a), float(b)) for a, b in intervals)
    for (a0, b0), (a1, b1) in zip(iv, iv[1:]):
        if a1 <= b0:
            raise ValueError("intervals must be disjoint with positive gaps")
    spacing = fieldX.grid.spacing if spacing is None else spacing
    k0 = float(fieldX.cutoff_covariance(np.zeros(1), level)[0])

    def cov(r):
        return fieldX.cutoff_covariance(r, level)

    slots, denom = [], np.ones(fieldX.n_replicas)
    for (a, b), k, kc in zip(intervals, exponents[::2], exponents[1::2]):
        pair = _interval_slots(fieldX, params, level, (a, b), 1, 1, spacing)
        if k + kc:
            denom = denom * _slot_moment(pair, params.beta, cov, k0) ** ((k + kc) / 2)
        slots += _interval_slots(fieldX, params, level, (a, b), k, kc, spacing)
    if not slots:
        return np.ones(fieldX.n_replicas, dtype=complex)
    num = _slot_moment(slots, params.beta, cov, k0)
    return num / denom


def gaussianity_ratio(
    fieldX: FieldHierarchy,
    params: ChaosParams,
    level: int,
    k: int,
    kc: int,
    region: tuple[float, float],
    spacing: float | None = None,
) -> np.ndarray:
    """``E[M^k conj(M)^{k'} | X] / E[|M|^2 | X]^{(k+k')/2}`` on one interval."""
    return multi_interval_ratio(fieldX, params, level, [region], (k, kc), spacing)


def sigma2_target(kernel: Kernel, params: ChaosParams) -> float:
    """``sigma^2(gamma^2 + beta^2)`` for the phase III limit."""
    label = classify_phase(params)
    if label not in (PhaseLabel.PhaseIII_inner, PhaseLabel.Frontier_II_III, PhaseLabel.Frontier_I_III):
        raise PhaseError("sigma^2 limits apply in phase III and its frontiers")
    return sigma2(kernel, params.s, params.d)


def wick_mass(fieldX: FieldHierarchy, gamma: float, level: int, phi: TestFunction) -> np.ndarray:
    """Per-replica Wick chaos mass at coupling ``gamma`` (used with ``2 gamma`` for phase III)."""
    return wick_chaos_gamma(fieldX, gamma, level, phi)
