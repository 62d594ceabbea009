"""Diffusion, control and drift coefficients.

A diffusion family is described through its columns σ_j(u) = q_j^{1/2} σ(u) e_j,
so σ(u) dW = Σ_j σ_j(u) dβ_j and σ̃(u) Ẇ̃ⁿ = Σ_j σ̃_j(u) β̇̃_jⁿ.  Columns are
returned as arrays of shape (..., J, d).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spaces import SpectralSpace, StructuralError, lq_norm


def _softclamp(x):
    return x / np.sqrt(1.0 + x * x)


def _softclamp_d1(x):
    return (1.0 + x * x) ** -1.5


def _softclamp_d2(x):
    return -3.0 * x * (1.0 + x * x) ** -2.5


# name -> (s, s', s'', sup|s'|, sup|s''|)
POINTWISE_FUNCTIONS = {
    "tanh": (np.tanh,
             lambda x: 1.0 / np.cosh(x) ** 2,
             lambda x: -2.0 * np.tanh(x) / np.cosh(x) ** 2,
             1.0, 4.0 / (3.0 * np.sqrt(3.0))),
    "sin": (np.sin, np.cos, lambda x: -np.sin(x), 1.0, 1.0),
    "softclamp": (_softclamp, _softclamp_d1, _softclamp_d2, 1.0, 3.0 * 4.0 ** 2 / 5.0 ** 2.5 * 1.0),
}


class DiffusionFamily:
    """Interface shared by the three variants."""

    modes: int
    dim: int

    def columns(self, u):
        raise NotImplementedError

    def jacobian(self, u):
        """Dσ_j(u) as matrices, shape (..., J, d, d)."""
        raise NotImplementedError

    def jvp(self, u, w):
        """Per-mode directional derivative Dσ_j(u) w_j for w of shape (..., J, d)."""
        return np.einsum("...jab,...jb->...ja", self.jacobian(u), w)

    def hessian_apply(self, u, w1, w2):
        """D²σ_j(u)[w1, w2] for w1, w2 of shape (..., d) shared by all modes."""
        raise NotImplementedError

    @property
    def is_zero(self) -> bool:
        return False


@dataclass(eq=False)
class AffineFamily(DiffusionFamily):
    """σ_j(u) = g_j + S_j u; ``g`` is (J, d), ``S`` is (J, d, d)."""

    g: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        self.S = np.asarray(self.S, dtype=float)
        J, d = self.g.shape
        if self.S.shape != (J, d, d):
            raise StructuralError(f"S must have shape {(J, d, d)}, got {self.S.shape}")
        if not (np.all(np.isfinite(self.g)) and np.all(np.isfinite(self.S))):
            raise StructuralError("affine coefficients must be finite")
        self.modes, self.dim = J, d
        self._flat = np.ascontiguousarray(self.S.reshape(J * d, d).T)

    @classmethod
    def zeros(cls, modes: int, dim: int) -> "AffineFamily":
        return cls(np.zeros((modes, dim)), np.zeros((modes, dim, dim)))

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.g) or np.any(self.S))

    @property
    def is_constant(self) -> bool:
        return not np.any(self.S)

    def columns(self, u):
        u = np.asarray(u, dtype=float)
        return self.g + (u @ self._flat).reshape(u.shape[:-1] + self.g.shape)

    def jacobian(self, u):
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(self.S, u.shape[:-1] + self.S.shape)

    def jvp(self, u, w):
        w = np.asarray(w, dtype=float)
        return np.stack([w[..., j, :] @ self.S[j].T for j in range(self.modes)], axis=-2)

    def hessian_apply(self, u, w1, w2):
        shape = np.broadcast_shapes(np.shape(u), np.shape(w1), np.shape(w2))
        return np.zeros(shape[:-1] + (self.modes, self.dim))


@dataclass(eq=False)
class PointwiseFamily(DiffusionFamily):
    """σ_j(u) = s_j(R_j u) entrywise; ``R`` is (J, d, d)."""

    funcs: tuple
    R: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        if self.R.ndim != 3 or self.R.shape[1] != self.R.shape[2]:
            raise StructuralError("R must have shape (J, d, d)")
        J, d, _ = self.R.shape
        if isinstance(self.funcs, str):
            self.funcs = (self.funcs,) * J
        self.funcs = tuple(self.funcs)
        if len(self.funcs) != J:
            raise StructuralError("one scalar function per mode is required")
        for name in self.funcs:
            if name not in POINTWISE_FUNCTIONS:
                raise StructuralError(f"unknown pointwise function {name!r}")
        self.modes, self.dim = J, d
        self._flat = np.ascontiguousarray(self.R.reshape(J * d, d).T)

    def _apply(self, which, x):
        out = np.empty_like(x)
        for j, name in enumerate(self.funcs):
            out[..., j, :] = POINTWISE_FUNCTIONS[name][which](x[..., j, :])
        return out

    def derivative_bounds(self):
        """Declared sup|s_j'| and sup|s_j''| per mode."""
        return (np.array([POINTWISE_FUNCTIONS[f][3] for f in self.funcs]),
                np.array([POINTWISE_FUNCTIONS[f][4] for f in self.funcs]))

    def _Ru(self, u):
        u = np.asarray(u, dtype=float)
        return (u @ self._flat).reshape(u.shape[:-1] + (self.modes, self.dim))

    def columns(self, u):
        return self._apply(0, self._Ru(u))

    def jacobian(self, u):
        d1 = self._apply(1, self._Ru(u))
        return d1[..., :, :, None] * self.R

    def jvp(self, u, w):
        d1 = self._apply(1, self._Ru(u))
        w = np.asarray(w, dtype=float)
        return d1 * np.stack([w[..., j, :] @ self.R[j].T for j in range(self.modes)], axis=-2)

    def hessian_apply(self, u, w1, w2):
        d2 = self._apply(2, self._Ru(u))
        return d2 * self._Ru(w1) * self._Ru(w2)


@dataclass(eq=False)
class ScaledFamily(DiffusionFamily):
    """σ̃ = c₀ · reference."""

    reference: DiffusionFamily
    c0: float

    def __post_init__(self):
        self.modes, self.dim = self.reference.modes, self.reference.dim

    @property
    def is_zero(self) -> bool:
        return self.c0 == 0 or self.reference.is_zero

    def columns(self, u):
        return self.c0 * self.reference.columns(u)

    def jacobian(self, u):
        return self.c0 * self.reference.jacobian(u)

    def jvp(self, u, w):
        return self.c0 * self.reference.jvp(u, w)

    def hessian_apply(self, u, w1, w2):
        return self.c0 * self.reference.hessian_apply(u, w1, w2)


def sigma_columns(family: DiffusionFamily, u):
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != family.dim:
        raise StructuralError(f"state has dimension {u.shape[-1]}, expected {family.dim}")
    return family.columns(u)


def frechet_apply(family: DiffusionFamily, j: int, u, w):
    """Dσ_j(u) w for a single mode j."""
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    return np.einsum("...ab,...b->...a", family.jacobian(u)[..., j, :, :], w)


def correction_rho(sigma: DiffusionFamily, sigma_tilde: DiffusionFamily, u, n: int):
    """(ρ_n(u), ρ̃_n(u)) = (Σ_{j≤n∧J} Dσ̃_j σ_j, Σ_{j≤n∧J} Dσ̃_j σ̃_j)."""
    u = np.asarray(u, dtype=float)
    m = min(max(n, 0), sigma_tilde.modes)
    if m == 0 or sigma_tilde.is_zero:
        z = np.zeros(u.shape)
        return z, z.copy()
    rho = np.sum(sigma_tilde.jvp(u, sigma.columns(u))[..., :m, :], axis=-2)
    rho_t = np.sum(sigma_tilde.jvp(u, sigma_tilde.columns(u))[..., :m, :], axis=-2)
    return rho, rho_t


def wz_correction(sigma, sigma_tilde, u, n: int):
    """ρ_n + ½ρ̃_n in one pass."""
    u = np.asarray(u, dtype=float)
    m = min(max(n, 0), sigma_tilde.modes)
    if m == 0 or sigma_tilde.is_zero:
        return np.zeros(u.shape)
    cols = sigma.columns(u) + 0.5 * sigma_tilde.columns(u)
    return np.sum(sigma_tilde.jvp(u, cols)[..., :m, :], axis=-2)


@dataclass(eq=False)
class AffineOperator:
    """Affine map used for R (const (d,), linear (d, d)) or G (const (J, d), linear (J, d, d)).

    For G, column j of G(u) is const_j + linear_j u, and G(u)h = Σ_j h_j column_j.
    """

    const: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        self.const = np.asarray(self.const, dtype=float)
        self.linear = np.asarray(self.linear, dtype=float)
        if self.const.ndim == 1:
            d = self.const.size
            if self.linear.shape != (d, d):
                raise StructuralError("linear part of R must be (d, d)")
        elif self.const.ndim == 2:
            J, d = self.const.shape
            if self.linear.shape != (J, d, d):
                raise StructuralError("linear part of G must be (J, d, d)")
        else:
            raise StructuralError("const must be (d,) or (J, d)")
        if not (np.all(np.isfinite(self.const)) and np.all(np.isfinite(self.linear))):
            raise StructuralError("affine coefficients must be finite")
        d = self.const.shape[-1]
        self._flat = np.ascontiguousarray(self.linear.reshape(-1, d).T)

    @classmethod
    def zero_drift(cls, dim: int) -> "AffineOperator":
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    @classmethod
    def zero_control(cls, modes: int, dim: int) -> "AffineOperator":
        return cls(np.zeros((modes, dim)), np.zeros((modes, dim, dim)))

    @classmethod
    def from_family(cls, family: AffineFamily) -> "AffineOperator":
        return cls(family.g.copy(), family.S.copy())

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.const) or np.any(self.linear))

    @property
    def dim(self) -> int:
        return self.const.shape[-1]

    @property
    def modes(self) -> int:
        return self.const.shape[0] if self.const.ndim == 2 else 0

    def columns(self, u):
        u = np.asarray(u, dtype=float)
        return self.const + (u @ self._flat).reshape(u.shape[:-1] + self.const.shape)

    def jacobian(self, u):
        return np.broadcast_to(self.linear, np.shape(u)[:-1] + self.linear.shape)

    def growth_constants(self):
        """(R0, R1) with |R(u)| ≤ R0(1 + |u|) and |R(u) - R(v)| ≤ R1|u - v|."""
        r1 = float(np.linalg.norm(self.linear, 2))
        return max(float(np.linalg.norm(self.const)), r1), r1


def apply_R(r: AffineOperator, u):
    u = np.asarray(u, dtype=float)
    if r.const.ndim != 1:
        raise StructuralError("R must have a (d,) constant part")
    if u.shape[-1] != r.dim:
        raise StructuralError("dimension mismatch in R")
    return r.const + u @ r._flat


def apply_G(g, u, hval):
    """Σ_j hval_j · G-column_j(u); ``g`` is anything exposing ``columns``."""
    u = np.asarray(u, dtype=float)
    hval = np.asarray(hval, dtype=float)
    cols = g.columns(u)
    if hval.shape[-1] != cols.shape[-2] or cols.shape[-1] != u.shape[-1]:
        raise StructuralError("dimension mismatch in G")
    return np.matmul(hval[..., None, :], cols)[..., 0, :]


@dataclass(frozen=True, eq=False)
class ControlShift:
    """Piecewise-constant h: ``values[i]`` holds on [times[i], times[i+1])."""

    times: np.ndarray
    values: np.ndarray
    budget: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
            raise StructuralError("control grid must be strictly increasing")
        if v.ndim != 2 or v.shape[0] != t.size - 1:
            raise StructuralError("control values must have shape (cells, J)")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        if self.energy() > self.budget * (1 + 1e-12):
            raise StructuralError(
                f"control energy {self.energy():.6g} exceeds budget M = {self.budget:.6g}")

    @classmethod
    def zero(cls, modes: int, T: float, budget: float = 0.0) -> "ControlShift":
        return cls(np.array([0.0, T]), np.zeros((1, modes)), budget)

    @property
    def modes(self) -> int:
        return self.values.shape[1]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    def energy(self) -> float:
        """∫|h|₀² dt."""
        return float(np.diff(self.times) @ np.sum(self.values ** 2, axis=1))

    def at(self, t):
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        idx = np.clip(idx, 0, self.values.shape[0] - 1)
        return self.values[idx]

    def integral_on(self, grid):
        """∫ h over each interval of ``grid`` (exact for piecewise-constant h)."""
        grid = np.asarray(grid, dtype=float)
        knots = np.union1d(self.times, grid)
        cum = np.concatenate([np.zeros((1, self.modes)),
                              np.cumsum(self.at(knots[:-1]) * np.diff(knots)[:, None], axis=0)])
        pos = np.searchsorted(knots, grid)
        return np.diff(cum[pos], axis=0)


def smooth_control(modes: int, T: float, cells: int, amplitude: float, budget: float | None = None):
    """h_j(t) = amplitude · sin(2π t / T + j) sampled at cell midpoints."""
    t = np.linspace(0.0, T, cells + 1)
    mid = 0.5 * (t[1:] + t[:-1])
    vals = amplitude * np.sin(2 * np.pi * mid[:, None] / T + np.arange(modes)[None, :])
    energy = float(np.diff(t) @ np.sum(vals ** 2, axis=1))
    return ControlShift(t, vals, energy if budget is None else budget)


# ------------------------------------------------------------------ checker

@dataclass
class ConditionReport:
    radii: list
    K0: float = 0.0
    K1: float = 0.0
    L: float = 0.0
    C1: dict = field(default_factory=dict)
    C2: dict = field(default_factory=dict)
    C3: dict = field(default_factory=dict)
    Kbar: dict = field(default_factory=dict)
    Cbar: dict = field(default_factory=dict)
    sn_defect: list = field(default_factory=list)
    rho_defect: list = field(default_factory=list)
    G_K0: float = 0.0
    G_K1: float = 0.0
    G_L: float = 0.0
    R0: float = 0.0
    R1: float = 0.0
    BS_K: float | None = None
    GR1_K0: float | None = None
    GR1_R0: float | None = None
    flags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)


def _ball(rng, n, d, radius):
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x * (radius * rng.uniform(0.0, 1.0, (n, 1)))


def _safe_max(x):
    x = np.asarray(x, dtype=float)
    return float(np.max(x)) if x.size else 0.0


def _ratio(num, den):
    num, den = np.asarray(num, dtype=float), np.asarray(den, dtype=float)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def check_coefficient_conditions(sigma: DiffusionFamily, sigma_tilde: DiffusionFamily,
                                 G, R: AffineOperator, space: SpectralSpace,
                                 samples: int = 500, seed: int = 0,
                                 radii=(1.0, 2.0, 4.0)) -> ConditionReport:
    """Sample estimates of the growth, Lipschitz and derivative constants.

    Every number is a maximum over the drawn samples and therefore a lower
    bound for the corresponding supremum.
    """
    rng = np.random.default_rng(seed)
    d, J = space.dim, sigma_tilde.modes
    rep = ConditionReport(radii=list(radii))
    lam = space.eigenvalues
    zero = np.zeros(d)

    def both_sq(u):
        return lq_norm(sigma.columns(u)) ** 2 + lq_norm(sigma_tilde.columns(u)) ** 2

    big = max(radii)
    u = _ball(rng, samples, d, big)
    v = _ball(rng, samples, d, big)
    f0 = float(both_sq(zero))
    rep.K0 = f0
    rep.K1 = _safe_max(_ratio(np.maximum(both_sq(u) - f0, 0.0), np.sum(u * u, axis=1)))
    diff_sq = (lq_norm(sigma.columns(u) - sigma.columns(v)) ** 2
               + lq_norm(sigma_tilde.columns(u) - sigma_tilde.columns(v)) ** 2)
    rep.L = _safe_max(_ratio(diff_sq, np.sum((u - v) ** 2, axis=1)))

    if G is not None and not getattr(G, "is_zero", False):
        gop = lambda x: np.linalg.norm(G.columns(x).swapaxes(-1, -2), ord=2, axis=(-2, -1))
        g0 = float(gop(zero) ** 2)
        rep.G_K0 = g0
        rep.G_K1 = _safe_max(_ratio(np.maximum(gop(u) ** 2 - g0, 0.0), np.sum(u * u, axis=1)))
        gd = np.linalg.norm((G.columns(u) - G.columns(v)).swapaxes(-1, -2), ord=2, axis=(-2, -1))
        rep.G_L = _safe_max(_ratio(gd ** 2, np.sum((u - v) ** 2, axis=1)))
    if R is not None:
        Ru, Rv = apply_R(R, u), apply_R(R, v)
        rep.R0 = max(float(np.linalg.norm(apply_R(R, zero))),
                     _safe_max(np.linalg.norm(Ru, axis=1) / (1 + np.linalg.norm(u, axis=1))))
        rep.R1 = _safe_max(_ratio(np.linalg.norm(Ru - Rv, axis=1), np.linalg.norm(u - v, axis=1)))

    sqrt_lam, inv_sqrt_lam = np.sqrt(lam), 1.0 / np.sqrt(lam)
    for N in radii:
        uN = _ball(rng, samples, d, N)
        vN = _ball(rng, samples, d, N)
        jac = sigma_tilde.jacobian(uN)                                   # (S, J, d, d)
        rep.C1[N] = _safe_max(np.linalg.norm(jac, ord=2, axis=(-2, -1)))
        adj = sqrt_lam[:, None] * np.swapaxes(jac, -1, -2) * inv_sqrt_lam[None, :]
        rep.C3[N] = _safe_max(np.linalg.norm(adj, ord=2, axis=(-2, -1)))
        w1 = rng.standard_normal((samples, d))
        w1 /= np.linalg.norm(w1, axis=1, keepdims=True)
        w2 = rng.standard_normal((samples, d))
        w2 /= np.linalg.norm(w2, axis=1, keepdims=True)
        rep.C2[N] = _safe_max(np.linalg.norm(sigma_tilde.hessian_apply(uN, w1, w2), axis=-1))
        kbar, cbar = 0.0, 0.0
        for n in range(1, J + 1):
            ru, rtu = correction_rho(sigma, sigma_tilde, uN, n)
            rv, rtv = correction_rho(sigma, sigma_tilde, vN, n)
            kbar = max(kbar, _safe_max(np.linalg.norm(ru, axis=1) + np.linalg.norm(rtu, axis=1)))
            num = np.linalg.norm(ru - rv, axis=1) + np.linalg.norm(rtu - rtv, axis=1)
            cbar = max(cbar, _safe_max(_ratio(num, np.linalg.norm(uN - vN, axis=1))))
        rep.Kbar[N], rep.Cbar[N] = kbar, cbar

    cols_t = sigma_tilde.columns(u)
    rho_full, rhot_full = correction_rho(sigma, sigma_tilde, u, J)
    for n in range(0, J + 1):
        tail = cols_t[..., n:, :]
        rep.sn_defect.append(_safe_max(lq_norm(tail)) if tail.shape[-2] else 0.0)
        r, rt = correction_rho(sigma, sigma_tilde, u, n)
        rep.rho_defect.append(_safe_max(np.linalg.norm(r - rho_full, axis=1)
                                        + np.linalg.norm(rt - rhot_full, axis=1)))

    if space.interp_exponent == 0.25:
        quarter = lam ** 0.25
        hn = space.interp_norm(u) ** 2
        both = (np.sum((quarter * sigma.columns(u)) ** 2, axis=(-2, -1))
                + np.sum((quarter * sigma_tilde.columns(u)) ** 2, axis=(-2, -1)))
        rep.BS_K = _safe_max(both / (1 + hn))
        if G is not None and not getattr(G, "is_zero", False):
            gq = np.linalg.norm((quarter * G.columns(u)).swapaxes(-1, -2), ord=2, axis=(-2, -1))
            rep.GR1_K0 = _safe_max(gq ** 2 / (1 + hn))
        else:
            rep.GR1_K0 = 0.0
        rep.GR1_R0 = _safe_max(np.linalg.norm(quarter * apply_R(R, u), axis=1)
                               / (1 + np.sqrt(hn))) if R is not None else 0.0

    _flag(rep)
    return rep


def _flag(rep: ConditionReport):
    scalars = dict(K0=rep.K0, K1=rep.K1, L=rep.L, G_K0=rep.G_K0, G_K1=rep.G_K1,
                   G_L=rep.G_L, R0=rep.R0, R1=rep.R1)
    for name, val in scalars.items():
        if not np.isfinite(val):
            rep.flags.append(f"{name} not finite")
    radii = sorted(rep.radii)
    for name, table in (("C1", rep.C1), ("C2", rep.C2), ("C3", rep.C3)):
        vals = [table[N] for N in radii]
        if not all(np.isfinite(vals)):
            rep.flags.append(f"{name}(N) not finite")
        elif len(vals) > 1 and vals[0] > 0 and vals[-1] > 2.0 * vals[0]:
            rep.flags.append(f"{name}(N) grows with N")
    if rep.sn_defect and rep.sn_defect[-1] != 0.0:
        rep.flags.append("projection defect nonzero with all modes kept")
