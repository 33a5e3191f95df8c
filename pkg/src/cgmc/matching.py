"""Mutually-closest matching of two point sets and the product bounds it supports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernels import Kernel, cutoff_covariance_radial, doubling_constant


class NotIdentityMatchedError(ValueError):
    """The configuration's optimal matching is not the identity."""


@dataclass(frozen=True)
class PointMatching:
    """``assignment[i]`` is the index of the ``y`` matched to ``x_i``."""

    xs: tuple
    ys: tuple
    assignment: tuple[int, ...]
    tie_broken: bool = False

    def __post_init__(self) -> None:
        if len(set(self.assignment)) != len(self.assignment):
            raise ValueError("assignment must be injective")
        if len(self.assignment) != len(self.xs):
            raise ValueError("assignment must cover every x")

    def as_dict(self, one_based: bool = True) -> dict[int, int]:
        o = 1 if one_based else 0
        return {i + o: j + o for i, j in enumerate(self.assignment)}

    @property
    def is_identity(self) -> bool:
        return all(i == j for i, j in enumerate(self.assignment))


def _as_points(pts) -> np.ndarray:
    a = np.asarray(pts, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.size == 0:
        return a.reshape(0, 1)
    return a


def distance_matrix(xs, ys) -> np.ndarray:
    x, y = _as_points(xs), _as_points(ys)
    if x.shape[0] and y.shape[0] and x.shape[1] != y.shape[1]:
        raise ValueError("point dimensions differ")
    if x.shape[0] == 0 or y.shape[0] == 0:
        return np.zeros((x.shape[0], y.shape[0]))
    # hypot keeps tiny separations from underflowing to zero
    return np.hypot.reduce(np.abs(x[:, None, :] - y[None, :, :]), axis=-1)


def optimal_matching(xs: Sequence, ys: Sequence) -> PointMatching:
    """Match every ``x`` by repeatedly removing a mutually closest pair.

    With distinct distances the globally closest surviving pair is mutually
    closest, and removing pairs one at a time in increasing distance gives
    the same map as removing all mutually closest pairs at once.  Ties are
    broken on ``(distance, x index, y index)`` and reported in ``tie_broken``.
    """
    D = distance_matrix(xs, ys)
    k, kp = D.shape
    if k > kp:
        raise ValueError("need |xs| <= |ys|")
    assignment = [-1] * k
    free_x, free_y = list(range(k)), list(range(kp))
    tie = False
    for _ in range(k):
        sub = D[np.ix_(free_x, free_y)]
        best = sub.min()
        hits = np.argwhere(sub == best)
        tie = tie or len(hits) > 1
        a, b = hits[0]  # argwhere is row-major, so this is the lexicographic minimum
        i, j = free_x[a], free_y[b]
        assignment[i] = j
        free_x.remove(i)
        free_y.remove(j)
    return PointMatching(tuple(map(tuple, _as_points(xs))), tuple(map(tuple, _as_points(ys))), tuple(assignment), tie)


def _log_g(kernel: Kernel, r: np.ndarray, eps: float) -> np.ndarray:
    return -cutoff_covariance_radial(kernel, np.abs(r), eps)


def _log_sides(kernel: Kernel, eps: float, beta: float, xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    # log of the pair-product ratio and of prod_i G(x_i - y_i)^{-beta^2}
    k = len(xs)
    iu = np.triu_indices(k, 1)
    lxx = _log_g(kernel, (xs[:, None] - xs[None, :])[iu], eps).sum()
    lyy = _log_g(kernel, (ys[:, None] - ys[None, :])[iu], eps).sum()
    lxy = _log_g(kernel, (xs[:, None] - ys[None, :]).ravel(), eps).sum()
    diag = _log_g(kernel, xs - ys, eps).sum()
    b2 = beta * beta
    return b2 * (lxx + lyy - lxy), -b2 * diag


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    ok: bool


def matched_product_bound_check(
    kernel: Kernel, eps: float, beta: float, xs: Sequence[float], ys: Sequence[float], c1: float | None = None
) -> BoundCheck:
    """Pair-product ratio against ``C_1^{beta^2 k(k-1)} prod_i G_eps(x_i - y_i)^{-beta^2}``.

    ``G_eps = exp(-K_eps)``.  The configuration must be matched by the
    identity; ``c1`` defaults to :func:`doubling_constant`.
    """
    if kernel.dimension != 1:
        raise ValueError("the bound is checked in d = 1")
    x, y = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("need two equally long point lists")
    if not optimal_matching(x, y).is_identity:
        raise NotIdentityMatchedError("configuration is not identity matched")
    if c1 is None:
        c1 = doubling_constant(kernel, eps)
    k = len(x)
    llhs, ldiag = _log_sides(kernel, eps, beta, x, y)
    lrhs = beta * beta * k * (k - 1) * math.log(c1) + ldiag
    return BoundCheck(math.exp(llhs), math.exp(lrhs), bool(llhs <= lrhs + 1e-12 * max(1.0, abs(lrhs))))


def in_near_diagonal_set(xs, ys, a: float, b: float) -> bool:
    """``|x_i - y_i| <= a`` and all same-type gaps ``>= b``."""
    x, y = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if np.any(np.abs(x - y) > a):
        return False
    k = len(x)
    iu = np.triu_indices(k, 1)
    gx = np.abs(x[:, None] - x[None, :])[iu]
    gy = np.abs(y[:, None] - y[None, :])[iu]
    return bool(np.all(gx >= b) and np.all(gy >= b))


def near_diagonal_ratio(kernel: Kernel, eps: float, beta: float, xs, ys, a: float, b: float) -> float:
    """Pair-product ratio divided by ``prod_i G_eps(x_i - y_i)^{-beta^2}`` on the near-diagonal set."""
    if not in_near_diagonal_set(xs, ys, a, b):
        raise ValueError("configuration is outside the near-diagonal set")
    llhs, ldiag = _log_sides(kernel, eps, beta, np.asarray(xs, float), np.asarray(ys, float))
    return math.exp(llhs - ldiag)


def sample_identity_matched(rng: np.random.Generator, k: int, lo: float = 0.0, hi: float = 1.0):
    """Uniform points with ``ys`` reordered so that the identity is the optimal matching."""
    xs = rng.uniform(lo, hi, k)
    ys = rng.uniform(lo, hi, k)
    m = optimal_matching(xs, ys)
    return xs, ys[list(m.assignment)]


def sample_near_diagonal(
    rng: np.random.Generator, k: int, a: float, b: float, max_tries: int = 10_000
):
    """Rejection sample from the near-diagonal set inside ``[0, 1]``."""
    for _ in range(max_tries):
        xs = rng.uniform(0.0, 1.0, k)
        ys = np.clip(xs + rng.uniform(-a, a, k), 0.0, 1.0)
        if in_near_diagonal_set(xs, ys, a, b):
            return xs, ys
    raise RuntimeError("could not sample the near-diagonal set; b is too large")
