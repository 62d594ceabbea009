"""Q-Wiener paths on a dyadic grid and the adapted piecewise-constant driver.

A path stores fine increments of the scalar Brownian motions β_j on the grid
t_i = i T 2^{-L}.  The level-n driver on cell [t_k, t_{k+1}) of the level-n grid
is T^{-1} 2^n (β_j(t_k) - β_j(t_{k-1})), i.e. the previous cell's increment
divided by the cell width, and is zero on the first cell.

Increments for mode j are drawn from a Philox stream keyed by (seed, j), so
entry (j, i) is a pure function of (seed, j, i) and modes can be generated in
any order or in parallel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .spaces import StructuralError


class DomainError(ValueError):
    """Argument outside the region where a formula is valid."""


@dataclass(frozen=True, eq=False)
class NoiseBasis:
    """Eigenvalues q_j of the covariance Q for the active modes."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 1 or q.size == 0 or np.any(q <= 0) or not np.all(np.isfinite(q)):
            raise StructuralError("q must be a non-empty sequence of positive reals")
        object.__setattr__(self, "q", q)

    @property
    def modes(self) -> int:
        return self.q.size


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """Fine increments of shape (*batch, J, 2^L)."""

    T: float
    level: int
    increments: np.ndarray
    seed: object = None

    @property
    def modes(self) -> int:
        return self.increments.shape[-2]

    @property
    def batch_shape(self) -> tuple:
        return self.increments.shape[:-2]

    def coarse_increments(self, n: int) -> np.ndarray:
        """Increments over the level-n grid, summed from the fine ones."""
        if not 0 <= n <= self.level:
            raise StructuralError(f"level {n} is not within 0..{self.level}")
        shape = self.increments.shape[:-1] + (2 ** n, 2 ** (self.level - n))
        return self.increments.reshape(shape).sum(axis=-1)

    def values(self, n: int | None = None) -> np.ndarray:
        """β_j on the level-n grid, shape (*batch, J, 2^n + 1), starting at 0."""
        inc = self.coarse_increments(self.level if n is None else n)
        zero = np.zeros(inc.shape[:-1] + (1,))
        return np.concatenate([zero, np.cumsum(inc, axis=-1)], axis=-1)

    def path(self, i) -> "BrownianPath":
        return BrownianPath(self.T, self.level, self.increments[i],
                            None if self.seed is None else self.seed[i])


def path_seed(master_seed: int, index: int) -> int:
    """Per-path seed derived purely from (master seed, path index)."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0])


def _mode_stream(seed: int, j: int) -> np.random.Generator:
    key = np.random.SeedSequence([seed, j]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_brownian(modes: int | NoiseBasis, T: float, L: int, seed: int) -> BrownianPath:
    if L < 1:
        raise StructuralError("fine level must be at least 1")
    J = modes.modes if isinstance(modes, NoiseBasis) else int(modes)
    scale = math.sqrt(T * 2.0 ** -L)
    inc = np.empty((J, 2 ** L))
    for j in range(J):
        inc[j] = _mode_stream(seed, j).standard_normal(2 ** L) * scale
    return BrownianPath(float(T), L, inc, seed)


def sample_ensemble(modes, T: float, L: int, seeds) -> BrownianPath:
    """Stack independently seeded paths along a leading batch axis."""
    paths = [sample_brownian(modes, T, L, s) for s in seeds]
    inc = np.stack([p.increments for p in paths]) if paths else np.empty((0, 0, 2 ** L))
    return BrownianPath(float(T), L, inc, list(seeds))


def step_maps(s: float, n: int, T: float):
    """(s_n, s̲_n, s̄_n) = (t_{k-1} ∨ 0, t_k, t_{k+1}) for s ∈ [t_k, t_{k+1})."""
    if not 0.0 <= s <= T:
        raise DomainError(f"time {s} outside [0, {T}]")
    k = cell_index(s, n, T)
    h = T * 2.0 ** -n
    return (max(k - 1, 0) * h, k * h, (k + 1) * h)


def cell_index(s, n: int, T: float):
    """Index k of the level-n cell containing s; s = T belongs to the last cell."""
    k = np.floor(np.asarray(s, dtype=float) * 2 ** n / T).astype(int)
    k = np.minimum(k, 2 ** n - 1)
    return int(k) if np.ndim(k) == 0 else k


def active_modes(n: int, J: int) -> int:
    return min(n, J)


def driver_table(path: BrownianPath, n: int) -> np.ndarray:
    """Cell values of the adapted driver, shape (*batch, 2^n, J).

    Modes beyond n ∧ J are zero.  Row k is T^{-1} 2^n times the level-n
    increment over cell k-1; row 0 is zero.
    """
    inc = path.coarse_increments(n)
    J = path.modes
    table = np.zeros(inc.shape[:-2] + (2 ** n, J))
    m = active_modes(n, J)
    if m:
        lagged = np.swapaxes(inc[..., :m, :-1], -1, -2)
        table[..., 1:, :m] = lagged * (2 ** n / path.T)
    return table


def adapted_derivative(path: BrownianPath, n: int, t: float):
    """(per-mode values for j ≤ n ∧ J, H₀-coordinates of the driver)."""
    if not 1 <= n <= path.level:
        raise DomainError(f"level {n} must lie in 1..{path.level}")
    if not 0.0 <= t <= path.T:
        raise DomainError(f"time {t} outside [0, {path.T}]")
    k = cell_index(t, n, path.T)
    h0 = driver_table(path, n)[..., k, :]
    return h0[..., :active_modes(n, path.modes)], h0


def localization_indicator(path: BrownianPath, n: int, alpha: float, t: float | None = None):
    """Membership in Ω_n(t): both driver thresholds respected on cells up to t."""
    t = path.T if t is None else t
    table = driver_table(path, n)
    k = cell_index(t, n, path.T)
    seen = table[..., : k + 1, :]
    per_mode = np.max(np.abs(seen), axis=(-2, -1))
    total = np.max(np.sqrt(np.sum(seen ** 2, axis=-1)), axis=-1)
    ok = (per_mode <= alpha * n ** 0.5 * 2 ** (n / 2)) & (total <= alpha * n * 2 ** (n / 2))
    return bool(ok) if np.ndim(ok) == 0 else ok


def alpha_threshold(T: float) -> float:
    return math.sqrt(2 * math.log(2) / T)


def default_alpha(T: float) -> float:
    return 2 * alpha_threshold(T)


def tail_probability_bound(n: int, alpha: float, T: float) -> float:
    """min(1, 2 n^{1/2} / (α √(2πT)) · exp(n(ln 2 - α² T / 2)))."""
    if alpha * alpha * T / 2 <= math.log(2):
        raise DomainError("alpha must exceed sqrt(2 ln 2 / T)")
    val = 2 * math.sqrt(n) / (alpha * math.sqrt(2 * math.pi * T)) \
        * math.exp(n * (math.log(2) - alpha * alpha * T / 2))
    return min(1.0, val)


def project_pi_n(f, n: int) -> np.ndarray:
    out = np.array(f, dtype=float, copy=True)
    out[..., max(n, 0):] = 0.0
    return out


_MAGIC = b"BWZ1"


def dump_increments(path: BrownianPath, fname) -> None:
    """Raw dump: 16-byte header {magic, J:u32, L:u32, T:f32}, then float64 rows."""
    if path.batch_shape:
        raise StructuralError("dump one path at a time")
    header = _MAGIC + struct.pack("<IIf", path.modes, path.level, path.T)
    with open(fname, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(path.increments, dtype="<f8").tobytes())


def load_increments(fname) -> BrownianPath:
    with open(fname, "rb") as fh:
        header = fh.read(16)
        if header[:4] != _MAGIC:
            raise StructuralError("not an increment dump")
        J, L, T = struct.unpack("<IIf", header[4:])
        inc = np.frombuffer(fh.read(), dtype="<f8").reshape(J, 2 ** L)
    return BrownianPath(float(T), L, inc.copy())
