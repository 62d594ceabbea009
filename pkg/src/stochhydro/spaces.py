"""Spectral representation of the triple V ⊂ H ⊂ V' and the norms built on it.

Everything is diagonal in the eigenbasis of A, so a state is just its vector of
coefficients and every fractional power of A is an elementwise scaling.  Arrays
may carry leading batch axes; the coefficient axis is always the last one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class StructuralError(ValueError):
    """Shapes, grids or dimensions that do not fit together."""


@dataclass(frozen=True, eq=False)
class SpectralSpace:
    """Eigen-description of the positive self-adjoint operator A.

    ``interp_exponent`` is the power s with ℋ = Dom(A^s).
    """

    eigenvalues: np.ndarray
    interp_exponent: float = 0.0

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise StructuralError("eigenvalues must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise StructuralError("eigenvalues must be finite and strictly positive")
        if np.any(np.diff(lam) < 0):
            raise StructuralError("eigenvalues must be nondecreasing")
        if not 0.0 <= self.interp_exponent <= 0.5:
            raise StructuralError("interp_exponent must lie in [0, 1/2]")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    @property
    def embedding_constant(self) -> float:
        """C̄ = λ₁^{-1/2}, the best constant in |v| ≤ C̄‖v‖."""
        return float(self.eigenvalues[0] ** -0.5)

    def check(self, v) -> np.ndarray:
        return as_state(v, self.dim)

    def norm(self, v, r: float = 0.0) -> np.ndarray:
        return norm_a_power(self, v, r)

    def h_norm(self, v):
        return norm_a_power(self, v, 0.0)

    def v_norm(self, v):
        return norm_a_power(self, v, 0.5)

    def interp_norm(self, v):
        return norm_a_power(self, v, self.interp_exponent)


def as_state(v, dim: int | None = None) -> np.ndarray:
    """Validate a (possibly batched) coefficient array."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        raise StructuralError("a state needs at least one axis")
    if dim is not None and arr.shape[-1] != dim:
        raise StructuralError(f"state has dimension {arr.shape[-1]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise StructuralError("state contains NaN or infinite entries")
    return arr


def norm_a_power(space: SpectralSpace, v, r: float = 0.0):
    """|A^r v| = (Σ λ_k^{2r} v_k²)^{1/2}, reduced over the last axis."""
    if not np.isfinite(r):
        raise StructuralError("power must be finite")
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != space.dim:
        raise StructuralError(f"state has dimension {v.shape[-1]}, expected {space.dim}")
    if r == 0:
        return np.sqrt(np.sum(v * v, axis=-1))
    return np.sqrt(np.sum(space.eigenvalues ** (2 * r) * v * v, axis=-1))


def lq_norm(columns):
    """Hilbert–Schmidt norm of S Q^{1/2} given its columns S q_j^{1/2} e_j.

    ``columns`` has shape (..., J, d): one row per noise mode.
    """
    c = np.asarray(columns, dtype=float)
    if c.ndim < 2:
        raise StructuralError("columns must have shape (..., J, d)")
    return np.sqrt(np.sum(c * c, axis=(-2, -1)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States on a time grid; ``states`` has shape (*batch, K+1, d).

    ``diverged`` is a boolean array over the batch axes when the producer
    tolerated blow-up; diverged rows are NaN from the blow-up step on.
    """

    times: np.ndarray
    states: np.ndarray
    space: SpectralSpace
    diverged: np.ndarray | None = field(default=None)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.states, dtype=float)
        if t.ndim != 1 or t.size < 1:
            raise StructuralError("times must be a 1-d grid")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise StructuralError("times must be strictly increasing")
        if s.ndim < 2 or s.shape[-2] != t.size:
            raise StructuralError("states must have shape (*batch, K+1, d)")
        if s.shape[-1] != self.space.dim:
            raise StructuralError("state dimension does not match the space")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    @property
    def batch_shape(self) -> tuple:
        return self.states.shape[:-2]

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    def path(self, i) -> "Trajectory":
        """Select batch entry ``i``."""
        div = None if self.diverged is None else np.asarray(self.diverged[i])
        return Trajectory(self.times, self.states[i], self.space, div)

    def restrict(self, times) -> "Trajectory":
        """Sub-sample onto a coarser grid whose nodes are all present here."""
        times = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.times, times)
        idx = np.clip(idx, 0, self.times.size - 1)
        if not np.allclose(self.times[idx], times, rtol=0, atol=1e-12 * max(1.0, self.horizon)):
            raise StructuralError("requested grid is not a subset of the trajectory grid")
        return Trajectory(self.times[idx], self.states[..., idx, :], self.space, self.diverged)

    def sup_h_sq(self):
        return np.max(np.sum(self.states ** 2, axis=-1), axis=-1)

    def integral_v_sq(self):
        """Left-endpoint rule for ∫‖u‖² dt."""
        dt = np.diff(self.times)
        vsq = np.sum(self.space.eigenvalues * self.states[..., :-1, :] ** 2, axis=-1)
        return vsq @ dt


def _check_same_grid(a: Trajectory, b: Trajectory):
    if a.space is not b.space and not np.array_equal(a.space.eigenvalues, b.space.eigenvalues):
        raise StructuralError("trajectories live in different spaces")
    if a.times.shape != b.times.shape or not np.array_equal(a.times, b.times):
        raise StructuralError("trajectories are on different time grids")


def x_distance_sq(a: Trajectory, b: Trajectory):
    """max_i |a−b|² + Σ_i Δt_i ‖a−b‖²(t_i), broadcast over batch axes."""
    _check_same_grid(a, b)
    diff = Trajectory(a.times, a.states - b.states, a.space)
    return diff.sup_h_sq() + diff.integral_v_sq()


def x_distance(a: Trajectory, b: Trajectory):
    """Discrete X-norm of a − b: sup over grid nodes, left-endpoint quadrature."""
    return np.sqrt(x_distance_sq(a, b))


@dataclass(frozen=True)
class InterpolationReport:
    max_ratio: float
    n_samples: int
    interp_exponent: float


def check_interpolation(space: SpectralSpace, n_samples: int, seed: int) -> InterpolationReport:
    """Largest sampled ‖v‖_ℋ² / (|v|‖v‖), an empirical lower bound for a₀."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n_samples, space.dim))
    # heavy-tailed per-sample spectral weights reach both ends of the spectrum
    v *= np.exp(rng.standard_normal((n_samples, 1)) * rng.uniform(-2, 2, (1, space.dim)))
    ratio = space.interp_norm(v) ** 2 / (space.h_norm(v) * space.v_norm(v))
    return InterpolationReport(float(np.max(ratio, initial=0.0)), n_samples, space.interp_exponent)
