"""Closed-form reference values the simulations are compared against."""

from __future__ import annotations

import math
import statistics
from fractions import Fraction


def expected_min_tour(mean: int, drawers: int) -> Fraction:
    """E[min] of ``drawers`` independent uniform draws on ``[1, 2*mean - 1]``."""
    top = 2 * mean - 1
    return sum(Fraction(top - k + 1, top) ** drawers for k in range(1, top + 1))


def continuous_min_tour_estimate(mean: int, drawers: int) -> float:
    """Continuous approximation ``2*mean / (drawers + 1)``."""
    return 2 * mean / (drawers + 1)


def mean_for_interval(blocks_per_com: int, n: int) -> int:
    """Difficulty mean making the shortest of ``n`` tours about ``blocks_per_com`` hops.

    Lengths uniform on ``[1, K(n+1) - 1]`` have mean ``K(n+1)/2``.
    """
    return max(1, math.ceil(blocks_per_com * (n + 1) / 2))


def all_alive_probability(n: int, crashed: int, set_size: int) -> float:
    """Exact chance that a uniformly drawn ``set_size``-subset avoids every crashed node."""
    return math.comb(n - crashed, set_size) / math.comb(n, set_size)


def independent_all_alive(set_size: int, crash_fraction: float = 0.5) -> float:
    """Same chance under the coin-flip approximation ``(1 - f)^n_S``."""
    return (1 - crash_fraction) ** set_size


def any_set_unstuck_probability(n: int, set_size: int) -> float:
    """``1 - (1 - (1/2)^n_S)^n``: at least one of ``n`` sets is free of crashes."""
    return 1 - (1 - 0.5**set_size) ** n


def all_colluder_tour_probability(colluders_in_set: int, set_size: int, length: int) -> float:
    return (colluders_in_set / set_size) ** length


def linear_fit_r2(xs: list[float], ys: list[float]) -> tuple[float, float, float]:
    """Least-squares line through the points; returns (slope, intercept, R^2)."""
    slope, intercept = statistics.linear_regression(xs, ys)
    r = statistics.correlation(xs, ys) if len(set(ys)) > 1 else 1.0
    return slope, intercept, r * r
