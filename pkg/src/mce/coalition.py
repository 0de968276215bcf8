"""Shapley values for cooperative games over bitmask-encoded coalitions.

Player ``i`` is bit ``i`` of a coalition mask. The empty mask is a valid
coalition and the oracle must accept it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from typing import Callable

import numpy as np

from .errors import ContractError, OracleError


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def members(mask: int) -> list[int]:
    """Player indices set in ``mask``, ascending."""
    out = []
    i = 0
    while mask >> i:
        if mask >> i & 1:
            out.append(i)
        i += 1
    return out


def mask_of(players) -> int:
    m = 0
    for p in players:
        m |= 1 << p
    return m


def enumerate_subsets(mask: int) -> list[int]:
    """All non-empty sub-masks of ``mask`` in ascending numeric order."""
    subs = []
    s = mask
    while s:
        subs.append(s)
        s = (s - 1) & mask
    subs.reverse()
    return subs


class CoalitionGame:
    """A player count plus a memoized characteristic function."""

    def __init__(self, player_count: int, value_oracle: Callable[[int], float],
                 empty_value: float | None = None):
        if player_count < 1:
            raise ValueError("player_count must be positive")
        self.player_count = player_count
        self._oracle = value_oracle
        self._cache: dict[int, float] = {}
        if empty_value is not None:
            # A fixed v(empty) convention; the oracle is never asked for it.
            self._cache[0] = float(empty_value)
        self.oracle_calls = 0

    @property
    def full_mask(self) -> int:
        return (1 << self.player_count) - 1

    def value(self, mask: int) -> float:
        try:
            return self._cache[mask]
        except KeyError:
            pass
        try:
            v = float(self._oracle(mask))
        except OracleError:
            raise
        except Exception as exc:
            raise OracleError(mask, exc) from exc
        self.oracle_calls += 1
        self._cache[mask] = v
        return v

    @classmethod
    def from_table(cls, values) -> "CoalitionGame":
        """Game whose value for mask ``s`` is ``values[s]``; needs 2**M entries."""
        values = list(values)
        M = len(values).bit_length() - 1
        if len(values) != 1 << M or M < 1:
            raise ValueError(f"value table needs 2**M entries, got {len(values)}")
        return cls(M, values.__getitem__)


@dataclass
class ShapleyResult:
    phi: np.ndarray
    oracle_calls: int
    method: str
    K: int | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)


def _check_restrict(game: CoalitionGame, restrict: int | None) -> int:
    if restrict is None:
        return game.full_mask
    if restrict & ~game.full_mask:
        raise ContractError(f"restrict mask {restrict:#b} names players outside 0..{game.player_count - 1}")
    return restrict


def shapley_weights(n: int) -> list[float]:
    """``w[s] = s! (n - s - 1)! / n!`` for coalition sizes s in 0..n-1."""
    nf = factorial(n)
    return [factorial(s) * factorial(n - s - 1) / nf for s in range(n)]


def exact_shapley(game: CoalitionGame, restrict: int | None = None) -> ShapleyResult:
    """Exact Shapley values over the players in ``restrict``.

    Players outside ``restrict`` get 0. Every subset of ``restrict`` is
    evaluated once.
    """
    restrict = _check_restrict(game, restrict)
    before = game.oracle_calls
    players = members(restrict)
    n = len(players)
    phi = np.zeros(game.player_count)
    if n == 0:
        return ShapleyResult(phi, 0, "exact")
    w = shapley_weights(n)
    subsets = [0] + enumerate_subsets(restrict)
    values = {s: game.value(s) for s in subsets}
    sizes = {s: popcount(s) for s in subsets}
    for i in players:
        bit = 1 << i
        total = 0.0
        for s in subsets:
            if s & bit:
                continue
            total += w[sizes[s]] * (values[s | bit] - values[s])
        phi[i] = total
    return ShapleyResult(phi, game.oracle_calls - before, "exact")


def mc_shapley(game: CoalitionGame, restrict: int | None = None, K: int = 100,
               seed: int | None = 0, rng: np.random.Generator | None = None) -> ShapleyResult:
    """Permutation-sampling estimate of the Shapley values.

    Draws ``K`` orderings of the restricted players (numpy PCG64, Fisher-Yates
    via ``Generator.permutation``). Identical orderings are counted once and
    their marginal contributions summed with the multiplicity as weight; every
    coalition value is fetched through the game's memo, so the oracle is hit at
    most ``2**|restrict|`` times whatever ``K`` is.
    """
    if K < 1:
        raise ContractError("K must be at least 1")
    restrict = _check_restrict(game, restrict)
    before = game.oracle_calls
    players = np.array(members(restrict), dtype=np.intp)
    phi = np.zeros(game.player_count)
    if players.size == 0:
        return ShapleyResult(phi, 0, "monte_carlo", K=K, seed=seed)
    if rng is None:
        rng = np.random.default_rng(seed)
    counts: dict[tuple[int, ...], int] = {}
    for _ in range(K):
        order = tuple(int(p) for p in rng.permutation(players))
        counts[order] = counts.get(order, 0) + 1
    for order, c in counts.items():
        s = 0
        prev = game.value(0)
        for p in order:
            s |= 1 << p
            cur = game.value(s)
            phi[p] += c * (cur - prev)
            prev = cur
    phi /= K
    return ShapleyResult(phi, game.oracle_calls - before, "monte_carlo", K=K, seed=seed,
                         extra={"distinct_orderings": len(counts)})


def brute_force_shapley(game: CoalitionGame, restrict: int | None = None) -> np.ndarray:
    """Average marginal contribution over every ordering of ``restrict``.

    Independent of :func:`exact_shapley`; used as a cross-check.
    """
    from itertools import permutations

    restrict = _check_restrict(game, restrict)
    players = members(restrict)
    phi = np.zeros(game.player_count)
    count = 0
    for order in permutations(players):
        s = 0
        for p in order:
            phi[p] += game.value(s | 1 << p) - game.value(s)
            s |= 1 << p
        count += 1
    return phi / max(count, 1)


def read_game_file(path) -> CoalitionGame:
    """Parse a ``players = M`` header followed by ``bitmask value`` lines.

    Blank lines and ``#`` comments are ignored. Every one of the 2**M masks
    must be listed.
    """
    M = None
    table: dict[int, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if M is None:
                key, sep, val = line.partition("=")
                if not sep or key.strip() != "players":
                    raise ValueError(f"{path}:{lineno}: expected 'players = M' header")
                M = int(val)
                if M < 1:
                    raise ValueError(f"{path}:{lineno}: players must be positive")
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'bitmask value'")
            mask, value = int(parts[0]), float(parts[1])
            if mask < 0 or mask >= 1 << M:
                raise ValueError(f"{path}:{lineno}: mask {mask} out of range for {M} players")
            if mask in table:
                raise ValueError(f"{path}:{lineno}: duplicate mask {mask}")
            table[mask] = value
    if M is None:
        raise ValueError(f"{path}: empty game file")
    missing = [s for s in range(1 << M) if s not in table]
    if missing:
        raise ValueError(f"{path}: missing values for masks {missing}")
    return CoalitionGame.from_table([table[s] for s in range(1 << M)])
