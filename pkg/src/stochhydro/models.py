"""Concrete hydrodynamical models: the operators A and B and property checks.

Shell models
    GOY and Sabra use complex shell amplitudes u_n, n = 0..N-1, stored in a real
    chart with coordinates (Re u_0, Im u_0, Re u_1, ...).  Shell wavenumbers are
    k_n = k0 μ^n and both chart coordinates of a shell carry λ = ν k_n².
    With ⟨z, w⟩ = Re Σ z_n w̄_n the couplings are::

        GOY    B(u,v)_n = -i( a k_{n+1} ū_{n+1} v̄_{n+2} + b k_n ū_{n-1} v̄_{n+1}
                              - a k_{n-1} ū_{n-1} v̄_{n-2} - b k_{n-1} ū_{n-2} v̄_{n-1} )
        Sabra  B(u,v)_n = -i( a k_{n+1} ū_{n+1} v_{n+2} + b k_n ū_{n-1} v_{n+1}
                              + a k_{n-1} u_{n-1} v_{n-2} + b k_{n-1} u_{n-2} v_{n-1} )

    The dyadic model is real: B(u,v)_n = k_n u_n v_{n+1} - k_{n-1} u_{n-1} v_{n-1}.
    Shells outside 0..N-1 are zero, which keeps ⟨B(u,v),w⟩ = -⟨B(u,w),v⟩ exact.

Linear
    B ≡ 0 with user-supplied eigenvalues; d = 1 gives the scalar OU setting.

2D Navier–Stokes
    Divergence-free velocity on the torus [0, 2π]² with Fourier modes
    0 < |k|_∞ ≤ K.  For each k in the upper half plane two orthonormal real
    fields √2 k^⊥/|k| cos(k·x) and √2 k^⊥/|k| sin(k·x) (average over the torus
    as inner product), sorted by λ = ν|k|².  B(u,v) = P[(u·∇)v] is evaluated by
    an exact convolution over the retained modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .spaces import SpectralSpace, StructuralError

SHELL_KINDS = ("goy", "sabra", "dyadic")
KINDS = SHELL_KINDS + ("ns2d", "linear")


@dataclass(frozen=True, eq=False)
class HydroModel:
    kind: str
    space: SpectralSpace
    params: dict
    _bilinear: object = field(repr=False, default=None)

    @property
    def dim(self) -> int:
        return self.space.dim

    def apply_A(self, v):
        return apply_A(self, v)

    def B(self, u, v=None):
        """B(u, v); with one argument returns B(u) = B(u, u)."""
        return apply_B(self, u, u if v is None else v)


def _check(model: HydroModel, *arrays):
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=float)
        if a.shape[-1] != model.dim:
            raise StructuralError(f"state has dimension {a.shape[-1]}, expected {model.dim}")
        out.append(a)
    return out


def apply_A(model: HydroModel, v):
    (v,) = _check(model, v)
    return model.space.eigenvalues * v


def apply_B(model: HydroModel, u, v):
    u, v = _check(model, u, v)
    return model._bilinear(u, v)


def pair_B(model: HydroModel, u, v, w):
    """⟨B(u,v), w⟩, reduced over the coefficient axis."""
    (w,) = _check(model, w)
    return np.sum(apply_B(model, u, v) * w, axis=-1)


# ---------------------------------------------------------------- shell models

def _to_complex(x):
    return x[..., 0::2] + 1j * x[..., 1::2]


def _to_real(z):
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def _pad2(z):
    out = np.zeros(z.shape[:-1] + (z.shape[-1] + 4,), dtype=z.dtype)
    out[..., 2:-2] = z
    return out


def _shell_k(k0, mu, n_shells):
    return k0 * mu ** np.arange(n_shells, dtype=float)


class _GOY:
    def __init__(self, k, a, b, sabra=False):
        self.n = k.size
        # padded wavenumbers: kp[i + 2] = k_i; values off the ends only ever multiply zeros
        self.kp = np.concatenate([[k[0] / 4, k[0] / 2], k, [k[-1] * 2, k[-1] * 4]])
        self.a, self.b, self.sabra = a, b, sabra

    def __call__(self, u, v):
        U, V = _pad2(_to_complex(u)), _pad2(_to_complex(v))
        n, kp, a, b = self.n, self.kp, self.a, self.b
        c = slice(2, n + 2)
        p1, p2 = slice(3, n + 3), slice(4, n + 4)
        m1, m2 = slice(1, n + 1), slice(0, n)
        Uc = U.conj()
        if self.sabra:
            out = (a * kp[p1] * Uc[..., p1] * V[..., p2]
                   + b * kp[c] * Uc[..., m1] * V[..., p1]
                   + a * kp[m1] * U[..., m1] * V[..., m2]
                   + b * kp[m1] * U[..., m2] * V[..., m1])
        else:
            Vc = V.conj()
            out = (a * kp[p1] * Uc[..., p1] * Vc[..., p2]
                   + b * kp[c] * Uc[..., m1] * Vc[..., p1]
                   - a * kp[m1] * Uc[..., m1] * Vc[..., m2]
                   - b * kp[m1] * Uc[..., m2] * Vc[..., m1])
        return _to_real(-1j * out)


class _Dyadic:
    def __init__(self, k):
        self.n = k.size
        self.kp = np.concatenate([[k[0] / 4, k[0] / 2], k, [k[-1] * 2, k[-1] * 4]])

    def __call__(self, u, v):
        U, V = _pad2(u), _pad2(v)
        n, kp = self.n, self.kp
        c, p1, m1 = slice(2, n + 2), slice(3, n + 3), slice(1, n + 1)
        return kp[c] * U[..., c] * V[..., p1] - kp[m1] * U[..., m1] * V[..., m1]


def goy(shells: int, *, mu: float = 2.0, k0: float = 1.0, nu: float = 1.0,
        a: float = 1.0, b: float = -0.5, interp_exponent: float = 0.0) -> HydroModel:
    k = _shell_k(k0, mu, shells)
    space = SpectralSpace(np.repeat(nu * k ** 2, 2), interp_exponent)
    params = dict(shells=shells, mu=mu, k0=k0, nu=nu, a=a, b=b)
    return HydroModel("goy", space, params, _GOY(k, a, b))


def sabra(shells: int, *, mu: float = 2.0, k0: float = 1.0, nu: float = 1.0,
          a: float = 1.0, b: float = -0.5, interp_exponent: float = 0.0) -> HydroModel:
    k = _shell_k(k0, mu, shells)
    space = SpectralSpace(np.repeat(nu * k ** 2, 2), interp_exponent)
    params = dict(shells=shells, mu=mu, k0=k0, nu=nu, a=a, b=b)
    return HydroModel("sabra", space, params, _GOY(k, a, b, sabra=True))


def dyadic(shells: int, *, mu: float = 2.0, k0: float = 1.0, nu: float = 1.0,
           interp_exponent: float = 0.0) -> HydroModel:
    k = _shell_k(k0, mu, shells)
    space = SpectralSpace(nu * k ** 2, interp_exponent)
    params = dict(shells=shells, mu=mu, k0=k0, nu=nu)
    return HydroModel("dyadic", space, params, _Dyadic(k))


def _no_coupling(u, v):
    return np.zeros(np.broadcast_shapes(np.shape(u), np.shape(v)))


def linear(eigenvalues=(1.0,), *, interp_exponent: float = 0.0) -> HydroModel:
    space = SpectralSpace(np.atleast_1d(np.asarray(eigenvalues, dtype=float)), interp_exponent)
    return HydroModel("linear", space, dict(eigenvalues=space.eigenvalues.tolist()), _no_coupling)


# ------------------------------------------------------------------------ NS2D

def ns2d_modes(K: int):
    """Upper-half-plane wavevectors with 0 < |k|_∞ ≤ K, ordered by |k|² then k."""
    ks = [(k1, k2) for k1 in range(0, K + 1) for k2 in range(-K, K + 1)
          if (k1 > 0 or k2 > 0)]
    ks.sort(key=lambda k: (k[0] ** 2 + k[1] ** 2, k))
    return np.array(ks, dtype=int)


class _NS2D:
    """Exact convolution form of P[(u·∇)v] on the retained modes.

    Each real basis field is τ_k χ(k) e^{ik·x} + c.c. with τ_k = k^⊥/|k|; the
    complex scalar χ at +k is (c - i s)/√2, at -k its conjugate (same τ_k).
    """

    def __init__(self, K: int):
        half = ns2d_modes(K)
        self.half = half
        nh = len(half)
        full = np.concatenate([half, -half])          # index i < nh: +k, i ≥ nh: -k
        tau = np.stack([-half[:, 1], half[:, 0]], axis=1) / np.linalg.norm(half, axis=1)[:, None]
        tau_full = np.concatenate([tau, tau])
        lookup = {tuple(k): i for i, k in enumerate(full)}

        pi, qi, mi, coef = [], [], [], []
        for p_idx, p in enumerate(full):
            for q_idx, q in enumerate(full):
                m = (p[0] + q[0], p[1] + q[1])
                j = lookup.get(m)
                if j is None or j >= nh:
                    continue
                # (û_p · i q)(τ_m · v̂_q), with û_p = τ_p χ_u(p), v̂_q = τ_q χ_v(q)
                c = (tau_full[p_idx] @ q) * (tau[j] @ tau_full[q_idx])
                if c != 0.0:
                    pi.append(p_idx)
                    qi.append(q_idx)
                    mi.append(j)
                    coef.append(c)
        self.nh = nh
        self.p = np.array(pi)
        self.q = np.array(qi)
        self.coef = 1j * np.array(coef)
        self.scatter = sp.csr_matrix(
            (np.ones(len(mi)), (np.array(mi), np.arange(len(mi)))), shape=(nh, len(mi)))

    def _chi(self, x):
        c, s = x[..., 0::2], x[..., 1::2]
        chi = (c - 1j * s) / np.sqrt(2.0)
        return np.concatenate([chi, chi.conj()], axis=-1)

    def __call__(self, u, v):
        cu, cv = self._chi(u), self._chi(v)
        batch = np.broadcast_shapes(cu.shape[:-1], cv.shape[:-1])
        vals = self.coef * cu[..., self.p] * cv[..., self.q]
        vals = np.broadcast_to(vals, batch + vals.shape[-1:]).reshape(-1, vals.shape[-1])
        F = (self.scatter @ vals.T).T.reshape(batch + (self.nh,))
        out = np.empty(batch + (2 * self.nh,))
        out[..., 0::2] = np.sqrt(2.0) * F.real
        out[..., 1::2] = -np.sqrt(2.0) * F.imag
        return out


def ns2d(K: int, *, nu: float = 1.0, interp_exponent: float = 0.25) -> HydroModel:
    half = ns2d_modes(K)
    lam = nu * np.sum(half ** 2, axis=1).astype(float)
    space = SpectralSpace(np.repeat(lam, 2), interp_exponent)
    return HydroModel("ns2d", space, dict(K=K, nu=nu), _NS2D(K))


def ns2d_basis_fields(K: int, x, y):
    """Basis fields on a physical grid: array (d, 2, *x.shape), chart order."""
    half = ns2d_modes(K)
    fields = []
    for k in half:
        tau = np.array([-k[1], k[0]]) / np.hypot(*k)
        phase = k[0] * x + k[1] * y
        for f in (np.cos(phase), np.sin(phase)):
            fields.append(np.sqrt(2.0) * tau[:, None, None] * f[None])
    return np.array(fields)


def make_model(kind: str, **params) -> HydroModel:
    kind = kind.lower()
    if kind == "goy":
        return goy(**params)
    if kind == "sabra":
        return sabra(**params)
    if kind == "dyadic":
        return dyadic(**params)
    if kind == "ns2d":
        return ns2d(**params)
    if kind == "linear":
        return linear(**params)
    raise StructuralError(f"unknown model kind {kind!r}; expected one of {KINDS}")


# ------------------------------------------------------------------ checkers

@dataclass(frozen=True)
class BilinearReport:
    """Sample estimates; every constant is a lower bound for the true one.

    ``boundB_C1`` is pinned to 1: the bound C1‖w‖² + C2‖u‖ℋ²‖v‖ℋ² only
    constrains the product C1·C2 once w is rescaled, so C2 carries it all.
    """

    n_samples: int
    antisymmetry_defect: float
    energy_defect: float
    preB_C: float
    boundB_C1: float
    boundB_C2: float
    shell_C: float


def _random_triples(rng, n, d, eig):
    # random spectral slopes so samples probe both low and high modes
    slope = rng.uniform(-1.0, 0.5, (3, n, 1))
    base = rng.standard_normal((3, n, d))
    return base * (eig / eig[0]) ** (slope / 2)


def check_condition_B(model: HydroModel, n_samples: int, seed: int) -> BilinearReport:
    if n_samples <= 0:
        return BilinearReport(0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
    rng = np.random.default_rng(seed)
    sp_ = model.space
    u, v, w = _random_triples(rng, n_samples, model.dim, sp_.eigenvalues)
    b_uvw = pair_B(model, u, v, w)
    b_uwv = pair_B(model, u, w, v)
    hu, hw = sp_.h_norm(u), sp_.h_norm(w)
    Vu, Vv, Vw = sp_.v_norm(u), sp_.v_norm(v), sp_.v_norm(w)
    Iu, Iv, Iw = sp_.interp_norm(u), sp_.interp_norm(v), sp_.interp_norm(w)
    scale = hu * Iv * Iw + hu * Vv * hw
    anti = np.max(np.abs(b_uvw + b_uwv) / scale)
    energy = np.max(np.abs(pair_B(model, u, u, u)) / (hu * Iu * Iu + hu * Vu * hu))
    preB = np.max(np.abs(b_uvw) / (Iu * Vv * Iw))
    c2 = np.max(b_uvw ** 2 / (4 * Vw ** 2 * Iu ** 2 * Iv ** 2))
    shell = np.max(np.abs(b_uvw) / (hu * Vv * hw))
    return BilinearReport(n_samples, float(anti), float(energy), float(preB), 1.0,
                          float(c2), float(shell))
