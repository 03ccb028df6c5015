"""Closed-form delay model for end-to-end and GoS local retransmission.

A path segment LSP(i, n) runs from node x_i to node x_n over links
l = i .. n-1 with delays d_l. The end-to-end baseline needs one traversal to
notice a loss and a round trip to repair it; a GoS recovery of diameter d
pays the GoS overhead factor ``d_gos`` on detection and on a round trip over
only the last d links. Everything is exact: delays are integers (us) and
``d_gos`` is a Fraction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Union

from .topology import RoutePath

Number = Union[int, float, str, Fraction]
PathLike = Union[RoutePath, Sequence[int]]

# smallest GoS overhead factor (5 significant digits) whose diameter curve
# tops out at 250 hops on a 251-node LSP; see crossover_interval()
CROSSOVER_D_GOS = Fraction("1.00267")


class AnalyticsError(ValueError):
    pass


class DegenerateHalfPlane(UserWarning):
    """The half-plane form divides by 3 - d_gos and says nothing when d_gos >= 3."""


def as_fraction(x: Number) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        if not math.isfinite(x):
            raise AnalyticsError(f"{x} is not finite")
        return Fraction(str(x))     # 1.0027 means 10027/10000, not the nearest double
    return Fraction(x)


def _delays(path: PathLike) -> tuple[int, ...]:
    delays = tuple(path.link_delays) if isinstance(path, RoutePath) else tuple(path)
    if not delays:
        raise AnalyticsError("path needs at least one link")
    return delays


@dataclass(frozen=True)
class AnalyticsParams:
    d_gos: Fraction = Fraction(1)
    i: int = 0
    n: int | None = None        # None: the last node of the path

    def __post_init__(self):
        object.__setattr__(self, "d_gos", as_fraction(self.d_gos))
        if self.d_gos <= 0:
            raise AnalyticsError(f"d_gos must be positive, got {self.d_gos}")
        if self.i < 0 or (self.n is not None and self.n <= self.i):
            raise AnalyticsError(f"need 0 <= i < n, got i={self.i} n={self.n}")

    def span(self, path: PathLike) -> tuple[int, int]:
        delays = _delays(path)
        n = len(delays) if self.n is None else self.n
        if n > len(delays):
            raise AnalyticsError(f"n={n} beyond the path's {len(delays)} links")
        return self.i, n


@dataclass(frozen=True)
class DelayReport:
    ddt: Fraction
    retx: Fraction

    @property
    def total(self) -> Fraction:
        return self.ddt + self.retx

    def as_row(self) -> tuple[Fraction, Fraction, Fraction]:
        return self.ddt, self.retx, self.total


def ddt_e2e(path: PathLike, i: int = 0, n: int | None = None) -> Fraction:
    """Time for a loss at x_n to become detectable: one traversal from x_i."""
    i, n = AnalyticsParams(1, i, n).span(path)
    return Fraction(sum(_delays(path)[i:n]))


def total_e2e(path: PathLike, i: int = 0, n: int | None = None) -> DelayReport:
    s = ddt_e2e(path, i, n)
    return DelayReport(s, 2 * s)


def _check_diameter(d: int, i: int, n: int) -> None:
    if not 0 < d < n - i:
        raise AnalyticsError(f"diameter {d} outside 0 < d < {n - i}")


def retx_gos(path: PathLike, d: int, p: AnalyticsParams = AnalyticsParams(), checked: bool = True) -> Fraction:
    """Round trip over the last ``d`` links, scaled by d_gos.

    ``checked=False`` skips the diameter range check so that d = n - i can
    be evaluated; that case degenerates into an end-to-end repair.
    """
    i, n = p.span(path)
    if checked:
        _check_diameter(d, i, n)
    elif not 0 < d <= n - i:
        raise AnalyticsError(f"diameter {d} outside 0 < d <= {n - i}")
    return 2 * p.d_gos * sum(_delays(path)[n - d:n])


def total_gos(path: PathLike, d: int, p: AnalyticsParams = AnalyticsParams()) -> DelayReport:
    i, n = p.span(path)
    _check_diameter(d, i, n)
    ddt = p.d_gos * sum(_delays(path)[i:n])
    return DelayReport(ddt, retx_gos(path, d, p))


@dataclass(frozen=True)
class Comparison:
    gos_wins: bool
    half_plane: bool | None      # None when d_gos >= 3
    degenerate: bool


def compare(path: PathLike, d: int, p: AnalyticsParams = AnalyticsParams()) -> Comparison:
    """Direct comparison of the two totals, cross-checked against the half-plane form."""
    i, n = p.span(path)
    direct = total_gos(path, d, p).total < total_e2e(path, i, n).total
    g = p.d_gos
    if g >= 3:
        return Comparison(direct, None, True)
    delays = _delays(path)
    lhs = Fraction(sum(delays[i:n]))
    rhs = 2 * g * sum(delays[n - d:n]) / (3 - g)
    half = lhs > rhs
    if half != direct:
        raise AssertionError(f"half-plane form disagrees with direct totals (d={d}, d_gos={g})")
    return Comparison(direct, half, False)


def gos_beats_e2e(path: PathLike, d: int, p: AnalyticsParams = AnalyticsParams()) -> bool:
    c = compare(path, d, p)
    if c.degenerate:
        warnings.warn(f"d_gos={p.d_gos} >= 3: half-plane form is undefined, using direct totals",
                      DegenerateHalfPlane, stacklevel=2)
    return c.gos_wins


# -- diameter scalability ---------------------------------------------------------

def _check_gos_factor(g: Fraction) -> None:
    if not 0 < g < 3:
        raise AnalyticsError(f"d_gos must lie in (0, 3), got {g}")


def max_diameter_bound(n: int, i: int = 0, d_gos: Number = 1) -> tuple[Fraction, int]:
    """Upper bound on d for uniform link delays and the largest feasible integer d.

    The bound is d < (n-1-i)(3-d_gos)/(2 d_gos) + 1; the feasible value is
    also capped by the diameter range d <= n-i-1.
    """
    g = as_fraction(d_gos)
    _check_gos_factor(g)
    if not 0 <= i < n - 1:
        raise AnalyticsError(f"need an LSP of at least two nodes, got i={i} n={n}")
    bound = Fraction(n - 1 - i) * (3 - g) / (2 * g) + 1
    return bound, min(math.ceil(bound) - 1, n - i - 1)


@dataclass(frozen=True)
class CurvePoint:
    n: int
    bound: Fraction
    max_d: int


def scalability_curve(n_range: Iterable[int], i: int = 0, d_gos: Number = 1) -> list[CurvePoint]:
    out = []
    for n in n_range:
        bound, max_d = max_diameter_bound(n, i, d_gos)
        out.append(CurvePoint(n, bound, max_d))
    return out


def crossover_interval(n_peak: int, i: int = 0) -> tuple[Fraction, Fraction]:
    """The d_gos values for which the curve reaches d = n_peak - i - 1 at n_peak and stays there.

    Returns the half-open interval [lo, hi): below hi the bound at n_peak
    exceeds n_peak - i - 1 so the range cap binds; from lo on the bound at
    n_peak + 1 no longer exceeds n_peak - i, so the curve stops rising.
    """
    def threshold(n: int, target: int) -> Fraction:
        # bound(n) > target  <=>  d_gos < 3(n-1-i) / (2(target-1) + (n-1-i))
        m = n - 1 - i
        return Fraction(3 * m, 2 * (target - 1) + m)

    peak = n_peak - i - 1
    return threshold(n_peak + 1, peak + 1), threshold(n_peak, peak)
