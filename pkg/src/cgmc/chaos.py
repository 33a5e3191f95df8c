"""Phase diagram, moment exponents, renormalization and chaos evaluation.

The regularized measure carries no compensator:
``M_eps(phi) = int phi(x) exp(gamma X_eps(x) + i beta Y_eps(x)) dx``;
all compensation is applied by :func:`renormalization_factor`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .fields import FieldHierarchy, Grid

DEFAULT_TOL = 1e-12


class ConjecturalPhaseError(RuntimeError):
    """A conjectural renormalization was requested without the exploratory flag."""


class PhaseError(ValueError):
    """Parameters lie outside the phase an operation is defined for."""


@dataclass(frozen=True)
class ChaosParams:
    """Dimension ``d`` and the couplings ``gamma``, ``beta``.

    The phase diagram is symmetric in the signs of the couplings, so phase
    queries use ``|gamma|`` and ``|beta|``; the measure itself uses the signed
    values (``beta -> -beta`` conjugates it).
    """

    d: int
    gamma: float
    beta: float

    def __post_init__(self) -> None:
        if self.d not in (1, 2):
            raise ValueError("only d = 1 and d = 2 are supported")
        if not (math.isfinite(self.gamma) and math.isfinite(self.beta)):
            raise ValueError("couplings must be finite")

    @property
    def gamma_c(self) -> float:
        return math.sqrt(2.0 * self.d)

    @property
    def s(self) -> float:
        """``gamma^2 + beta^2``."""
        return self.gamma**2 + self.beta**2

    def conjugate(self) -> "ChaosParams":
        return ChaosParams(self.d, self.gamma, -self.beta)


class PhaseLabel(enum.Enum):
    PhaseI_inner = "PhaseI_inner"
    Frontier_I_II = "Frontier_I_II"
    PhaseII_inner = "PhaseII_inner"
    PhaseIII_inner = "PhaseIII_inner"
    Frontier_I_III = "Frontier_I_III"
    Frontier_II_III = "Frontier_II_III"
    TriplePoint = "TriplePoint"

    @property
    def rigorous_renormalization(self) -> bool:
        return self not in (PhaseLabel.PhaseII_inner, PhaseLabel.TriplePoint)


def _on(value: float, scale: float, tol: float) -> bool:
    return abs(value) <= tol * scale


def classify_phase(params: ChaosParams, tol: float = DEFAULT_TOL) -> PhaseLabel:
    """Locate ``(gamma, beta)`` in the phase diagram.

    Boundaries are ``gamma + beta = sqrt(2d)``, ``gamma^2 + beta^2 = d`` and
    ``gamma = sqrt(d/2)``; membership is decided within relative ``tol``.
    """
    if tol < 0:
        raise ValueError("tolerance must be non-negative")
    d = params.d
    g, b = abs(params.gamma), abs(params.beta)
    g_mid = math.sqrt(d / 2.0)
    g_c = math.sqrt(2.0 * d)
    circle = g * g + b * b - d
    line = g + b - g_c
    if _on(g - g_mid, g_mid, tol):
        if _on(circle, d, tol):
            return PhaseLabel.TriplePoint
        return PhaseLabel.PhaseI_inner if circle < 0 else PhaseLabel.Frontier_II_III
    if g < g_mid:
        if _on(circle, d, tol):
            return PhaseLabel.Frontier_I_III
        return PhaseLabel.PhaseI_inner if circle < 0 else PhaseLabel.PhaseIII_inner
    if _on(line, g_c, tol):
        return PhaseLabel.Frontier_I_II
    return PhaseLabel.PhaseI_inner if line < 0 else PhaseLabel.PhaseII_inner


def is_real_critical(params: ChaosParams, tol: float = DEFAULT_TOL) -> bool:
    """``beta = 0`` and ``gamma = sqrt(2d)``: the derivative martingale point."""
    return _on(params.beta, 1.0, tol) and _on(abs(params.gamma) - params.gamma_c, params.gamma_c, tol)


def zeta(params: ChaosParams, p: float) -> float:
    """``(d + gamma^2/2 - beta^2/2) p - gamma^2 p^2 / 2``."""
    g2, b2 = params.gamma**2, params.beta**2
    return (params.d + g2 / 2.0 - b2 / 2.0) * p - g2 * p * p / 2.0


@dataclass(frozen=True)
class CriticalP:
    """Moment threshold ``p_c = sup{p > 1 : zeta(p) > d}``.

    ``finite`` is false when the threshold is infinite (``gamma = 0``) or when
    no moment window exists; ``message`` says which.
    """

    value: float
    finite: bool
    message: str = ""


def critical_p(params: ChaosParams) -> CriticalP:
    """Larger root of ``gamma^2 p^2 / 2 - (d + gamma^2/2 - beta^2/2) p + d = 0``.

    Only ``zeta(p) >= d`` with ``p >= 2`` is known to be necessary for
    ``L^p`` boundedness; divergence rates beyond ``p_c`` are not estimated.
    """
    d = params.d
    g2, b2 = params.gamma**2, params.beta**2
    B = d + g2 / 2.0 - b2 / 2.0
    if g2 == 0.0:
        if B > d:
            return CriticalP(math.inf, False, "gamma = 0: zeta is linear, no upper threshold")
        return CriticalP(math.inf, False, "no L_p window")
    disc = B * B - 2.0 * g2 * d
    if disc < 0.0:
        if disc < -64 * np.finfo(float).eps * B * B:
            return CriticalP(math.nan, False, "no L_p window (negative discriminant)")
        disc = 0.0
    root = (B + math.sqrt(disc)) / g2
    if root <= 1.0:
        return CriticalP(math.nan, False, "no L_p window (root below 1)")
    return CriticalP(root, True)


def renormalization_factor(params: ChaosParams, eps: float, exploratory: bool = False) -> float:
    """Deterministic factor making ``factor * M_eps`` converge in its phase.

    ``exploratory`` must be set for phase II interior and the triple point,
    whose factors are conjectural.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("renormalization needs eps in (0, 1)")
    d = params.d
    g2, b2 = params.gamma**2, params.beta**2
    L = abs(math.log(eps))
    if is_real_critical(params):
        return eps**d * math.sqrt(L)
    label = classify_phase(params)
    if not label.rigorous_renormalization and not exploratory:
        raise ConjecturalPhaseError(f"{label.value} renormalization is conjectural")
    if label in (PhaseLabel.PhaseI_inner, PhaseLabel.Frontier_I_II):
        return eps ** ((g2 - b2) / 2.0)
    if label is PhaseLabel.PhaseIII_inner:
        return eps ** (g2 - d / 2.0)
    if label is PhaseLabel.Frontier_I_III:
        return eps ** (g2 - d / 2.0) / math.sqrt(L)
    if label is PhaseLabel.Frontier_II_III:
        return L**0.25
    if label is PhaseLabel.PhaseII_inner:
        g = abs(params.gamma)
        root = math.sqrt(2.0 * d)
        return L ** (3.0 * g / (2.0 * root)) * eps ** (g * root - d)
    return L**-0.25


@dataclass(frozen=True)
class TestFunction:
    """Bump (default) or indicator supported in a ball or box.

    ``kind``: ``"bump"`` for ``exp(1 - 1/(1 - rho^2))`` or ``"indicator"``;
    ``shape``: ``"ball"`` or ``"box"``; ``radius`` is the half-width.
    """

    __test__ = False  # not a pytest class

    center: tuple[float, ...]
    radius: float
    kind: str = "bump"
    shape: str = "ball"

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        if self.kind not in ("bump", "indicator"):
            raise ValueError("kind must be 'bump' or 'indicator'")
        if self.shape not in ("ball", "box"):
            raise ValueError("shape must be 'ball' or 'box'")
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def dimension(self) -> int:
        return len(self.center)

    @property
    def warning(self) -> str | None:
        if self.kind == "indicator":
            return "indicator test function: limits are only distributions of order d"
        return None

    @classmethod
    def interval(cls, lo: float, hi: float, kind: str = "indicator") -> "TestFunction":
        return cls(((lo + hi) / 2.0,), (hi - lo) / 2.0, kind, "box")

    @property
    def bounds(self) -> tuple[tuple[float, float], ...]:
        return tuple((c - self.radius, c + self.radius) for c in self.center)

    def _rho(self, pts: np.ndarray) -> np.ndarray:
        diff = pts - np.asarray(self.center)
        if self.shape == "ball":
            return np.sqrt(np.sum(diff * diff, axis=-1))
        return np.max(np.abs(diff), axis=-1)

    def evaluate(self, pts: np.ndarray) -> np.ndarray:
        """Values at points; ``pts`` has a trailing coordinate axis."""
        rho = self._rho(pts) / self.radius
        if self.kind == "indicator":
            if self.shape == "box":
                diff = pts - np.asarray(self.center)
                inside = np.all((diff >= -self.radius) & (diff < self.radius), axis=-1)
                return inside.astype(float)
            return (rho < 1.0).astype(float)
        out = np.zeros_like(rho)
        m = rho < 1.0
        out[m] = np.exp(1.0 - 1.0 / (1.0 - rho[m] ** 2))
        return out

    def weights(self, grid: Grid) -> np.ndarray:
        """``phi`` at the grid midpoints; checks the support lies in the domain."""
        if self.dimension != grid.dimension:
            raise ValueError("test function and grid dimensions differ")
        for lo, hi in self.bounds:
            if lo < -1e-12 or hi > grid.extent + 1e-12:
                raise ValueError("test function support exceeds the grid domain")
        pts = grid.points().reshape(grid.shape + (grid.dimension,))
        return self.evaluate(pts)

    def mass(self, grid: Grid) -> float:
        """Midpoint Riemann sum of ``phi``."""
        return float(np.sum(self.weights(grid)) * grid.cell_volume)


def _check_pair(fx: FieldHierarchy, fy: FieldHierarchy) -> None:
    if fx.grid != fy.grid or fx.schedule != fy.schedule:
        raise ValueError("hierarchies do not share grid and schedule")
    if fx.values.shape != fy.values.shape:
        raise ValueError("hierarchies hold different replica counts")


def _sum_axes(a: np.ndarray, d: int) -> np.ndarray:
    return a.reshape(a.shape[: a.ndim - d] + (-1,)).sum(axis=-1)


def complex_chaos(
    fieldX: FieldHierarchy, fieldY: FieldHierarchy, params: ChaosParams, level: int, phi: TestFunction
) -> np.ndarray:
    """``M_eps(phi)`` per replica by midpoint Riemann sum (complex array)."""
    _check_pair(fieldX, fieldY)
    grid = fieldX.grid
    w = phi.weights(grid) * grid.cell_volume
    ex = w * np.exp(params.gamma * fieldX.level(level))
    b = abs(params.beta)
    by = b * fieldY.level(level)
    re = _sum_axes(ex * np.cos(by), grid.dimension)
    im = _sum_axes(ex * np.sin(by), grid.dimension)
    if params.beta < 0:
        im = -im
    return re + 1j * im


def renormalized_chaos(
    fieldX: FieldHierarchy,
    fieldY: FieldHierarchy,
    params: ChaosParams,
    level: int,
    phi: TestFunction,
    exploratory: bool = False,
) -> np.ndarray:
    """``renormalization_factor * M_eps(phi)`` per replica."""
    eps = fieldX.epsilon(level)
    return renormalization_factor(params, eps, exploratory) * complex_chaos(
        fieldX, fieldY, params, level, phi
    )


def real_chaos(fieldX: FieldHierarchy, params: ChaosParams, level: int, phi: TestFunction, wick: bool) -> np.ndarray:
    """``int phi e^{gamma X}`` (raw) or with the factor ``e^{-gamma^2 E[X^2]/2}``."""
    if params.beta != 0:
        raise ValueError("real chaos requires beta = 0")
    grid = fieldX.grid
    w = phi.weights(grid) * grid.cell_volume
    g = params.gamma
    shift = g * g * fieldX.variances[level] / 2.0 if wick else 0.0
    return _sum_axes(w * np.exp(g * fieldX.level(level) - shift), grid.dimension)


def wick_chaos_gamma(fieldX: FieldHierarchy, gamma: float, level: int, phi: TestFunction) -> np.ndarray:
    """Wick-normalized real chaos at an arbitrary coupling (no phase checks)."""
    grid = fieldX.grid
    w = phi.weights(grid) * grid.cell_volume
    v = fieldX.variances[level]
    return _sum_axes(w * np.exp(gamma * fieldX.level(level) - gamma * gamma * v / 2.0), grid.dimension)


def derivative_martingale(fieldX: FieldHierarchy, d: int, level: int, phi: TestFunction) -> np.ndarray:
    """``int phi (gamma_c E[X^2] - X) e^{gamma_c X - gamma_c^2 E[X^2]/2}``, ``gamma_c = sqrt(2d)``."""
    grid = fieldX.grid
    if d != grid.dimension:
        raise ValueError("dimension does not match the grid")
    gc = math.sqrt(2.0 * d)
    v = fieldX.variances[level]
    x = fieldX.level(level)
    w = phi.weights(grid) * grid.cell_volume
    return _sum_axes(w * (gc * v - x) * np.exp(gc * x - gc * gc * v / 2.0), grid.dimension)


@dataclass(frozen=True)
class StarScaleResult:
    ratio: float
    stderr: float
    ci_low: float
    ci_high: float
    n_replicas: int
    fine_level: int
    coarse_level: int

    @property
    def contains_one(self) -> bool:
        return self.ci_low <= 1.0 <= self.ci_high


def star_scale_ratio(
    fieldX: FieldHierarchy, params: ChaosParams, lam: float, q: float, coarse_level: int | None = None
) -> StarScaleResult:
    """``E[M_{lam eps}(lam I)^q] / (lam^zeta(q) E[M_eps(I)^q])`` with ``I = [0, 1)``.

    ``fieldX`` must be an exactly scale invariant hierarchy on a dyadic
    schedule of ratio 1/2 covering ``[0, 1)``, and ``lam = 2^-m``.  The coarse
    measure is summed on every ``2^m``-th grid point so that both Riemann sums
    are images of each other under the scaling.
    """
    if params.beta != 0 or params.d != 1:
        raise ValueError("star scale test needs d = 1 and beta = 0")
    pc = critical_p(params)
    if q < 0 or (pc.finite and q >= pc.value):
        raise ValueError("q outside the moment window")
    m = -math.log2(lam)
    if lam <= 0 or lam > 1 or abs(m - round(m)) > 1e-12:
        raise ValueError("lam must be a power 2^-m")
    m = int(round(m))
    sched = fieldX.schedule.levels
    if m and any(not math.isclose(b / a, 0.5) for a, b in zip(sched, sched[1:])):
        raise ValueError("schedule must be dyadic")
    grid = fieldX.grid
    n_unit = int(round(1.0 / grid.spacing))
    if n_unit > grid.n_points:
        raise ValueError("grid must cover [0, 1)")
    J = len(sched)
    j = J - 1 - m if coarse_level is None else coarse_level
    if j < 0 or j + m >= J:
        raise ValueError("not enough levels for this lambda")
    g = params.gamma
    h = grid.spacing
    stride = 1 << m
    n_fine = n_unit >> m
    xc = fieldX.level(j)[:, : n_unit : stride]
    xf = fieldX.level(j + m)[:, :n_fine]
    coarse = np.exp(g * xc - g * g * fieldX.variances[j] / 2).sum(axis=1) * (stride * h)
    fine = np.exp(g * xf - g * g * fieldX.variances[j + m] / 2).sum(axis=1) * h
    a = fine**q
    b = (lam ** zeta(params, q)) * coarse**q
    n = a.size
    ma, mb = float(np.mean(a)), float(np.mean(b))
    ratio = ma / mb
    if n > 1 and m:
        cov = np.cov(a, b)
        var = (cov[0, 0] - 2 * ratio * cov[0, 1] + ratio * ratio * cov[1, 1]) / (mb * mb * n)
        se = math.sqrt(max(var, 0.0))
    else:
        se = 0.0
    return StarScaleResult(ratio, se, ratio - 3 * se, ratio + 3 * se, n, j + m, j)


def star_scale_test(
    params: ChaosParams,
    lam: float,
    q: float,
    n_replicas: int,
    seed: int,
    n_points: int = 1024,
    n_levels: int = 8,
    T: float = 1.0,
) -> StarScaleResult:
    """Sample the exact scale invariant field on ``[0, 1)`` and run :func:`star_scale_ratio`."""
    from .fields import sample_exact_scale_invariant
    from .kernels import CutoffSchedule

    grid = Grid(1, 1.0, n_points)
    field_ = sample_exact_scale_invariant(T, grid, CutoffSchedule.geometric(n_levels), seed, n_replicas)
    return star_scale_ratio(field_, params, lam, q)
