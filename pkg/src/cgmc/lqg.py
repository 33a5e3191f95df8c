"""Planar Gaussian free field on simple domains, conformal radii, tachyon and KPZ arithmetic.

Points in the plane are complex numbers.  The unit square is ``[0, 1]^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .fields import TAG_X, TAG_Y, rng_stream
from .kernels import adaptive_quad

SERIES_TOLERANCE = 1e-10
MODE_BUDGET = 8192
BOUNDARY_MARGIN = 1e-3
TACHYON_TOL = 1e-12


class SeriesBudgetError(RuntimeError):
    """The eigen-series tail bound is not reached within the mode budget."""


class DomainError(ValueError):
    """A point or circle is not inside the domain."""


# ---------------------------------------------------------------------------
# Schwarz-Christoffel map from the unit disk onto the unit square

def _lemniscate_integral() -> float:
    # int_0^1 ds / sqrt(1 - s^4), the endpoint singularity handled by an algebraic weight
    from scipy.integrate import quad

    val, _ = quad(lambda s: 1.0 / math.sqrt((1 + s) * (1 + s * s)), 0.0, 1.0, weight="alg", wvar=(0.0, -0.5),
                  epsabs=1e-15, epsrel=1e-14)
    return val


_SC_CONST = math.sqrt(0.5) / _lemniscate_integral()


def sc_constant() -> float:
    """Scale of the disk-to-square map; equals the square's conformal radius at its centre."""
    return _SC_CONST


def sc_map(w: complex) -> complex:
    """``c int_0^w (1 + t^4)^{-1/2} dt`` onto the square centred at 0 with corners ``(+-1 +-i)/2``."""
    w = complex(w)
    if abs(w) >= 1:
        raise DomainError("the map is evaluated inside the unit disk")
    if w == 0:
        return 0j
    re, _ = adaptive_quad(lambda s: (w / np.sqrt(1 + (s * w) ** 4)).real, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)
    im, _ = adaptive_quad(lambda s: (w / np.sqrt(1 + (s * w) ** 4)).imag, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)
    return _SC_CONST * complex(re, im)


def sc_derivative(w: complex) -> complex:
    return _SC_CONST / np.sqrt(1 + complex(w) ** 4)


def sc_inverse(z: complex, tol: float = 1e-14, max_iter: int = 100) -> complex:
    """Newton inverse of :func:`sc_map` for ``z`` inside the centred square."""
    z = complex(z)
    if max(abs(z.real), abs(z.imag)) >= 0.5:
        raise DomainError("point outside the square")
    w = z / _SC_CONST
    if abs(w) >= 0.95:
        w *= 0.95 / abs(w)
    for _ in range(max_iter):
        step = (sc_map(w) - z) / sc_derivative(w)
        w_new = w - step
        # damp steps that would leave the disk
        while abs(w_new) >= 1:
            step /= 2
            w_new = w - step
        w = w_new
        if abs(step) < tol:
            return w
    raise RuntimeError("Newton iteration for the square map did not converge")


# ---------------------------------------------------------------------------
# domains

@dataclass(frozen=True)
class PlanarDomain:
    """``unit_disk``, ``unit_square`` (``[0,1]^2``) or ``upper_half_plane``."""

    kind: str

    def __post_init__(self) -> None:
        if self.kind not in ("unit_disk", "unit_square", "upper_half_plane"):
            raise ValueError(f"unknown domain {self.kind!r}")

    def contains(self, x: complex) -> bool:
        x = complex(x)
        if self.kind == "unit_disk":
            return abs(x) < 1
        if self.kind == "unit_square":
            return 0 < x.real < 1 and 0 < x.imag < 1
        return x.imag > 0

    def boundary_distance(self, x: complex) -> float:
        x = complex(x)
        if self.kind == "unit_disk":
            return 1 - abs(x)
        if self.kind == "unit_square":
            return min(x.real, 1 - x.real, x.imag, 1 - x.imag)
        return x.imag

    def to_disk(self, x: complex) -> tuple[complex, complex]:
        """``(phi(x), phi'(x))`` for a conformal map onto the unit disk."""
        x = complex(x)
        if not self.contains(x):
            raise DomainError("point is not interior")
        if self.kind == "unit_disk":
            return x, 1 + 0j
        if self.kind == "upper_half_plane":
            return cayley(x), cayley_derivative(x)
        w = sc_inverse(x - complex(0.5, 0.5))
        return w, 1 / sc_derivative(w)


def cayley(z: complex) -> complex:
    """Upper half-plane onto the unit disk, ``(z - i)/(z + i)``."""
    return (z - 1j) / (z + 1j)


def cayley_derivative(z: complex) -> complex:
    return 2j / (z + 1j) ** 2


def disk_automorphism(a: complex) -> tuple[Callable, Callable, Callable]:
    """``psi(z) = (z - a)/(1 - conj(a) z)``, its derivative and its inverse."""
    a = complex(a)
    if abs(a) >= 1:
        raise ValueError("automorphism parameter must lie in the disk")

    def psi(z):
        return (z - a) / (1 - np.conj(a) * z)

    def dpsi(z):
        return (1 - abs(a) ** 2) / (1 - np.conj(a) * z) ** 2

    def inv(w):
        return (w + a) / (1 + np.conj(a) * w)

    return psi, dpsi, inv


def conformal_radius(domain: PlanarDomain, x: complex) -> float:
    """Conformal radius of ``domain`` seen from ``x``."""
    x = complex(x)
    if not domain.contains(x):
        raise DomainError("point is not interior")
    if domain.kind == "unit_disk":
        return 1 - abs(x) ** 2
    if domain.kind == "upper_half_plane":
        return 2 * x.imag
    # compose with the disk automorphism sending phi(x) to 0
    w, dw = domain.to_disk(x)
    return (1 - abs(w) ** 2) / abs(dw)


# ---------------------------------------------------------------------------
# truncated GFF covariance on the unit square

def _mode_count(t0: float, m: float, tol: float) -> int:
    # tail over modes with max(j, k) > J of pi * 4 * e^{-(mu+m) t0}/(mu + m), mu = pi^2 (j^2+k^2)/2
    a = math.pi**2 * t0 / 2
    full = 0.5 * math.sqrt(math.pi / a)
    for J in range(8, MODE_BUDGET + 1, 8):
        tail = 0.5 * math.sqrt(math.pi / a) * special.erfc(J * math.sqrt(a))
        mu = math.pi**2 * (J + 1) ** 2 / 2 + m
        if math.pi * 4 * 2 * full * tail * math.exp(-m * t0) / mu < tol:
            return J
    raise SeriesBudgetError("eigen-series tail bound not reached within the mode budget")


def _as_xy(x) -> tuple[float, float]:
    x = complex(x)
    return x.real, x.imag


def truncated_gff_covariance(
    domain: PlanarDomain, x: complex, y: complex, eps: float, eps2: float, m: float = 0.0, tol: float = SERIES_TOLERANCE
) -> float:
    """``pi int_{eps^2 v eps'^2}^inf e^{-rm} p(r, x, y) dr`` for the killed heat kernel of the square.

    ``p`` is the transition density of planar Brownian motion killed on the
    boundary, expanded as ``sum e_jk(x) e_jk(y) e^{-mu_jk r}`` with
    ``e_jk = 2 sin(j pi x1) sin(k pi x2)`` and ``mu_jk = pi^2 (j^2 + k^2)/2``.
    """
    if domain.kind != "unit_square":
        raise ValueError("the eigen-expansion is implemented on the unit square")
    if m < 0:
        raise ValueError("mass must be non-negative")
    for p in (x, y):
        if not domain.contains(p):
            raise DomainError("point is not interior")
    t0 = max(eps, eps2) ** 2
    J = _mode_count(t0, m, tol)
    j = np.arange(1, J + 1)
    x1, x2 = _as_xy(x)
    y1, y2 = _as_xy(y)
    # symmetric in x and y so that swapping them is bit-identical
    a = np.sin(j * math.pi * x1) * np.sin(j * math.pi * y1)
    b = np.sin(j * math.pi * x2) * np.sin(j * math.pi * y2)
    mu = math.pi**2 * (j[:, None] ** 2 + j[None, :] ** 2) / 2 + m
    w = np.exp(-mu * t0) / mu
    return float(math.pi * 4 * (a @ w @ b))


def green_function_value(domain: PlanarDomain, x: complex, eps: float) -> float:
    """``g_eps(x, x)``, the truncated covariance on the diagonal with ``m = 0``."""
    return truncated_gff_covariance(domain, x, x, eps, eps)


def conformal_radius_from_green(domain: PlanarDomain, x: complex, eps: float) -> float:
    """``C_eps(x, D) = eps exp(g_eps(x, x))``."""
    if domain.boundary_distance(x) < BOUNDARY_MARGIN:
        raise DomainError("point too close to the boundary for the truncated covariance")
    return eps * math.exp(green_function_value(domain, x, eps))


# The diagonal of the truncated covariance differs from log(1/eps) + log C(x, D)
# by int_{R^2} e^{-|u|^2/2}/(2 pi) log(1/|u|) du = (euler_gamma - log 2)/2.
HEAT_KERNEL_OFFSET = (np.euler_gamma - math.log(2.0)) / 2.0


def corrected_conformal_radius_from_green(domain: PlanarDomain, x: complex, eps: float) -> float:
    """``C_eps(x, D)`` with the heat-kernel offset removed; converges to ``C(x, D)``."""
    return conformal_radius_from_green(domain, x, eps) * math.exp(-HEAT_KERNEL_OFFSET)


# ---------------------------------------------------------------------------
# orthonormal basis expansion on the unit square

def basis_eigenvalues(J: int) -> np.ndarray:
    """``lambda_jk = pi^2 (j^2 + k^2)`` for ``1 <= j, k <= J``."""
    j = np.arange(1, J + 1)
    return math.pi**2 * (j[:, None] ** 2 + j[None, :] ** 2)


def basis_scale(J: int) -> np.ndarray:
    """``sqrt(2 pi / lambda_jk)``; ``f_jk = scale * 2 sin(j pi x1) sin(k pi x2)``."""
    return np.sqrt(2 * math.pi / basis_eigenvalues(J))


def basis_functions(J: int, pts: np.ndarray) -> np.ndarray:
    """``f_jk`` at complex points, shape ``(P, J, J)``."""
    pts = np.atleast_1d(np.asarray(pts, dtype=complex))
    j = np.arange(1, J + 1)
    s1 = np.sin(math.pi * np.outer(pts.real, j))
    s2 = np.sin(math.pi * np.outer(pts.imag, j))
    return 2 * basis_scale(J) * s1[:, :, None] * s2[:, None, :]


@dataclass(frozen=True)
class GFFBasisSample:
    """Coefficients of ``X_N = sum eps_jk f_jk`` and its independent partner ``Y_N``.

    ``coeffs_x`` and ``coeffs_y`` have shape ``(replicas, J, J)``.
    """

    J: int
    coeffs_x: np.ndarray
    coeffs_y: np.ndarray
    seed: int
    replicas: tuple[int, ...]

    @property
    def n_modes(self) -> int:
        return self.J * self.J

    def truncate(self, J: int) -> "GFFBasisSample":
        if J > self.J:
            raise ValueError("cannot extend a sample")
        return GFFBasisSample(J, self.coeffs_x[:, :J, :J], self.coeffs_y[:, :J, :J], self.seed, self.replicas)

    def _eval(self, coeffs: np.ndarray, pts, radius: float = 0.0) -> np.ndarray:
        pts = np.atleast_1d(np.asarray(pts, dtype=complex))
        j = np.arange(1, self.J + 1)
        s1 = np.sin(math.pi * np.outer(pts.real, j))
        s2 = np.sin(math.pi * np.outer(pts.imag, j))
        scale = 2 * basis_scale(self.J)
        if radius > 0:
            scale = scale * circle_mean_factor(self.J, radius)
        c = coeffs * scale
        # (R, J, J) with (P, J) on both sides -> (R, P)
        return np.einsum("pj,rjk,pk->rp", s1, c, s2, optimize=True)

    def field_x(self, pts) -> np.ndarray:
        return self._eval(self.coeffs_x, pts)

    def field_y(self, pts) -> np.ndarray:
        return self._eval(self.coeffs_y, pts)

    def variance(self, pts) -> np.ndarray:
        """``E[X_N(x)^2] = sum f_jk(x)^2``."""
        f = basis_functions(self.J, pts)
        return (f * f).sum(axis=(1, 2))


def gff_sample_basis(J: int, seed: int, replicas: Sequence[int] | int = 1) -> GFFBasisSample:
    """Draw ``J x J`` coefficients per replica for ``X`` and ``Y`` from disjoint streams."""
    if J < 1:
        raise ValueError("need at least one mode per axis")
    if isinstance(replicas, (int, np.integer)):
        replicas = range(int(replicas))
    replicas = tuple(int(r) for r in replicas)
    cx = np.stack([rng_stream(seed, TAG_X, r, 0).standard_normal((J, J)) for r in replicas])
    cy = np.stack([rng_stream(seed, TAG_Y, r, 0).standard_normal((J, J)) for r in replicas])
    return GFFBasisSample(J, cx, cy, int(seed), replicas)


def circle_mean_factor(J: int, radius: float) -> np.ndarray:
    """Circle mean of each mode relative to its centre value, ``J_0(omega_jk radius)``.

    ``sin(a x) sin(b y)`` is a sum of two plane waves of frequency
    ``omega = sqrt(a^2 + b^2)``, each of which averages to ``J_0(omega r)``
    times its centre value.
    """
    omega = np.sqrt(basis_eigenvalues(J))
    return special.j0(omega * radius)


def quadrature_points(J: int, radius: float) -> int:
    """``max(64, ceil(2 pi omega_max radius))`` trapezoid nodes."""
    omega_max = math.pi * math.sqrt(2.0) * J
    return max(64, int(math.ceil(2 * math.pi * omega_max * radius)))


def _check_circle(x: complex, radius: float) -> None:
    x = complex(x)
    if min(x.real, 1 - x.real, x.imag, 1 - x.imag) <= radius:
        raise DomainError("circle exits the square")


def circle_average(
    sample: GFFBasisSample, x: complex, radius: float, n_quadrature: int | None = None, which: str = "x"
) -> np.ndarray:
    """Mean of the partial-sum field over the circle of ``radius`` about ``x``, per replica.

    ``x`` may be one centre (result shape ``(R,)``) or a sequence of centres
    (shape ``(R, P)``).  ``n_quadrature=None`` applies the exact per-mode
    Bessel factor; an integer selects the trapezoid rule with that many nodes.
    """
    centres = np.atleast_1d(np.asarray(x, dtype=complex))
    for c in centres:
        _check_circle(c, radius)
    coeffs = sample.coeffs_x if which == "x" else sample.coeffs_y
    if n_quadrature is None:
        out = sample._eval(coeffs, centres, radius)
    else:
        theta = 2 * math.pi * np.arange(n_quadrature) / n_quadrature
        ring = radius * np.exp(1j * theta)
        out = np.stack([sample._eval(coeffs, c + ring).mean(axis=1) for c in centres], axis=1)
    return out[:, 0] if np.ndim(x) == 0 else out


def circle_average_variance(J: int, x: complex, radius: float) -> float:
    """Exact ``Var`` of the circle average of the ``J x J`` partial sum."""
    _check_circle(x, radius)
    f = basis_functions(J, [x])[0] * circle_mean_factor(J, radius)
    return float((f * f).sum())


def basis_gram_matrix(J: int, n_quad: int = 256) -> np.ndarray:
    """Dirichlet inner products ``(1/2pi) int grad f . grad g`` of the first ``J^2`` modes (Gauss-Legendre)."""
    t, w = np.polynomial.legendre.leggauss(n_quad)
    t, w = (t + 1) / 2, w / 2
    j = np.arange(1, J + 1)
    s = np.sin(math.pi * np.outer(j, t))
    c = math.pi * j[:, None] * np.cos(math.pi * np.outer(j, t))
    Iss = (s * w) @ s.T
    Icc = (c * w) @ c.T
    scale = (2 * basis_scale(J)).ravel()
    # d/dx1 f = scale * c_j(x1) s_k(x2); d/dx2 f = scale * s_j(x1) c_k(x2)
    g = np.einsum("ab,cd->acbd", Icc, Iss) + np.einsum("ab,cd->acbd", Iss, Icc)
    g = g.reshape(J * J, J * J)
    return g * np.outer(scale, scale) / (2 * math.pi)


def gff_chaos_weight(g_diag: np.ndarray, radius: np.ndarray, gamma: float, beta: float) -> np.ndarray:
    """``exp(-g_eps(x,x))^{(gamma^2-beta^2)/2} C(x, D)^{(gamma^2-beta^2)/2}``."""
    e = (gamma**2 - beta**2) / 2
    return np.exp(-e * np.asarray(g_diag)) * np.asarray(radius) ** e


def basis_chaos(
    sample: GFFBasisSample, gamma: float, beta: float, pts: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    """``sum w e^{gamma X_N + i beta Y_N - (gamma^2-beta^2) E[X_N^2]/2} C(x, D)^{(gamma^2-beta^2)/2}``."""
    dom = PlanarDomain("unit_square")
    e = (gamma**2 - beta**2) / 2
    var = sample.variance(pts)
    cr = np.array([conformal_radius(dom, p) for p in np.atleast_1d(pts)])
    amp = np.exp(gamma * sample.field_x(pts) + 1j * beta * sample.field_y(pts) - e * var) * cr**e
    return amp @ np.asarray(weights)


# ---------------------------------------------------------------------------
# tachyon and KPZ

@dataclass(frozen=True)
class TachyonResult:
    satisfied: bool
    residual: float
    admissible: bool
    special: bool


def tachyon_condition(gamma: float, beta: float, tol: float = TACHYON_TOL) -> TachyonResult:
    """``2 gamma = gamma^2/2 - beta^2/2 + 2``; admissible for ``gamma`` in ``(1, 2)``.

    ``special`` marks ``(2, 0)``, where the field is the derivative martingale.
    """
    if gamma < 0 or beta < 0:
        raise ValueError("couplings must be non-negative")
    res = 2 * gamma - (gamma**2 / 2 - beta**2 / 2 + 2)
    ok = abs(res) <= tol
    special_pt = ok and abs(gamma - 2) <= tol and abs(beta) <= tol
    return TachyonResult(ok, res, ok and 1 < gamma < 2, special_pt)


def conformal_exponent(gamma: float, beta: float) -> float:
    """``2 gamma - gamma^2/2 + beta^2/2 - 2``."""
    return 2 * gamma - gamma**2 / 2 + beta**2 / 2 - 2


@dataclass(frozen=True)
class KPZResult:
    delta0: float
    deltaq: float
    residual: float


def kpz_check(beta: float) -> KPZResult:
    """Flat and quantum dimensions ``beta^2/4`` and ``beta/2`` of ``e^{i beta Y}``."""
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    d0 = beta * beta / 4
    dq = beta / 2
    # dq + dq (dq - 1) is evaluated as dq^2, which is exact against d0 in binary
    return KPZResult(d0, dq, d0 - dq * dq)


def _disk_rule(n_r: int, n_t: int) -> tuple[np.ndarray, np.ndarray]:
    # Gauss-Legendre in the radius, trapezoid in the angle
    t, w = np.polynomial.legendre.leggauss(n_r)
    r = (t + 1) / 2
    wr = w / 2 * r
    th = 2 * math.pi * np.arange(n_t) / n_t
    pts = (r[:, None] * np.exp(1j * th[None, :])).ravel()
    wts = (wr[:, None] * np.full(n_t, 2 * math.pi / n_t)[None, :]).ravel()
    return pts, wts


@dataclass(frozen=True)
class ConformalMomentResult:
    lhs: float
    rhs: float
    residual: float


def conformal_invariance_first_moment(
    psi_inverse: Callable,
    dpsi: Callable,
    gamma: float,
    beta: float,
    phi: Callable,
    n_r: int = 200,
    n_t: int = 256,
) -> ConformalMomentResult:
    """First moments of both sides of the reparametrization identity on the unit disk.

    ``lhs = int phi(psi^{-1}(x)) C(x, D)^{(gamma^2-beta^2)/2} dx`` and ``rhs``
    carries the extra factor ``|psi'(psi^{-1}(x))|^{2 gamma - gamma^2/2 + beta^2/2 - 2}``.
    ``residual`` is ``|lhs - rhs| / |lhs|``.
    """
    pts, wts = _disk_rule(n_r, n_t)
    pre = np.asarray(phi(psi_inverse(pts)), dtype=float)
    cr = (1 - np.abs(pts) ** 2) ** ((gamma**2 - beta**2) / 2)
    base = pre * cr * wts
    lhs = float(base.sum())
    jac = np.abs(dpsi(psi_inverse(pts))) ** conformal_exponent(gamma, beta)
    rhs = float((base * jac).sum())
    return ConformalMomentResult(lhs, rhs, abs(lhs - rhs) / abs(lhs))


def disk_bump(center: complex = 0.0, radius: float = 0.5) -> Callable[[np.ndarray], np.ndarray]:
    """Smooth bump on the disk, vectorized over complex points."""

    def phi(z):
        rho2 = np.abs(np.asarray(z) - center) ** 2 / radius**2
        out = np.zeros(np.shape(rho2))
        m = rho2 < 1
        out[m] = np.exp(1 - 1 / (1 - rho2[m]))
        return out

    return phi
