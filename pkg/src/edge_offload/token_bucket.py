"""Scaled-integer token bucket.

A bucket with rate ``r = N/P`` tokens per slot and depth ``b = M/P`` is
tracked through the integer count ``n_bar = n * P``; offloading costs ``P``
and every slot adds ``N``, saturating at ``M``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction


class BucketViolation(RuntimeError):
    """An offload was requested without enough tokens."""


@dataclass(frozen=True)
class BucketParams:
    N: int
    P: int
    M: int

    def __post_init__(self):
        if not (1 <= self.N <= self.P <= self.M):
            raise ValueError(f"need 1 <= N <= P <= M, got N={self.N} P={self.P} M={self.M}")

    @property
    def rate(self) -> Fraction:
        return Fraction(self.N, self.P)

    @property
    def depth(self) -> Fraction:
        return Fraction(self.M, self.P)

    def full(self) -> "BucketState":
        return BucketState(self.M)


@dataclass(frozen=True)
class BucketState:
    n_bar: int


def from_rational(r_num: int, r_den: int, b_num: int, b_den: int) -> BucketParams:
    """Smallest integer scaling (N, P, M) with N/P = r and M/P = b."""
    if r_den == 0 or b_den == 0:
        raise ValueError("zero denominator")
    r = Fraction(r_num, r_den)
    b = Fraction(b_num, b_den)
    if not 0 < r <= 1:
        raise ValueError(f"token rate must lie in (0, 1], got {r}")
    if b < 1:
        raise ValueError(f"bucket depth must be >= 1, got {b}")
    P = math.lcm(r.denominator, b.denominator)
    return BucketParams(N=int(r * P), P=P, M=int(b * P))


def can_offload(state: BucketState, params: BucketParams) -> bool:
    return state.n_bar >= params.P


def advance_count(n_bar: int, params: BucketParams, offload: bool, gap: int) -> int:
    """Integer form of :func:`advance`; the simulator's hot loop uses this."""
    if gap < 1:
        raise ValueError(f"gap must be >= 1, got {gap}")
    if offload:
        if n_bar < params.P:
            raise BucketViolation(f"offload with n_bar={n_bar} < P={params.P}")
        n_bar -= params.P
    return min(params.M, n_bar + params.N * gap)


def step(state: BucketState, params: BucketParams, offload: bool) -> BucketState:
    """One slot: ``min(M, n_bar - P*a + N)``."""
    return BucketState(advance_count(state.n_bar, params, offload, 1))


def advance(state: BucketState, params: BucketParams, offload: bool, gap: int) -> BucketState:
    """Act once, then let ``gap`` slots of replenishment elapse.

    Equivalent to one :func:`step` with the action followed by ``gap - 1``
    idle steps, because the clamp at ``M`` is idempotent.
    """
    return BucketState(advance_count(state.n_bar, params, offload, gap))


def conformance_bound(params: BucketParams, window: int) -> int:
    """Most offloads any conforming sender can make within ``window`` slots."""
    return (params.N * window + params.M) // params.P
