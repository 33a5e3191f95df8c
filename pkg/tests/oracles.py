"""Independent reference implementations used by the test suite."""

import itertools
import math


def mutual_closest_rounds(xs, ys):
    """Literal simultaneous rule: in each round match every mutually closest pair.

    Written with plain Python loops and no shared code with the package.
    Returns a dict ``{x index: y index}`` (0-based).
    """
    free_x = list(range(len(xs)))
    free_y = list(range(len(ys)))
    out = {}
    rounds = 0
    while free_x:
        rounds += 1
        if rounds > len(xs) + 1:
            raise RuntimeError("no progress")
        matched = []
        for i in free_x:
            for j in free_y:
                dij = abs(xs[i] - ys[j])
                closest_for_y = all(dij < abs(xs[i2] - ys[j]) for i2 in free_x if i2 != i)
                closest_for_x = all(dij < abs(xs[i] - ys[j2]) for j2 in free_y if j2 != j)
                if closest_for_x and closest_for_y:
                    matched.append((i, j))
        for i, j in matched:
            out[i] = j
            free_x.remove(i)
            free_y.remove(j)
    return out


def pair_product_ratio(cov, eps, beta, xs, ys):
    """Direct evaluation of both sides of the matched-pair product bound in linear scale."""
    k = len(xs)

    def G(t):
        return math.exp(-cov(abs(t), eps))

    num = 1.0
    for i, j in itertools.combinations(range(k), 2):
        num *= G(xs[i] - xs[j]) ** (beta * beta) * G(ys[i] - ys[j]) ** (beta * beta)
    den = 1.0
    for i in range(k):
        for j in range(k):
            den *= G(xs[i] - ys[j]) ** (beta * beta)
    diag = 1.0
    for i in range(k):
        diag *= G(xs[i] - ys[i]) ** (-beta * beta)
    return num / den, diag
