"""Semi-implicit Euler–Maruyama integrators and trajectory diagnostics.

Each step solves (I + dt A) u_{i+1} = u_i + (explicit increment at u_i), so the
stiff linear part is handled by a diagonal division and everything else
(B, R, G h, noise, driver, corrections) is explicit.  All integrators accept a
batch of paths along leading axes and march them together; each row evolves
independently of the others.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .coefficients import AffineOperator, ControlShift, DiffusionFamily, apply_G, apply_R
from .models import HydroModel
from .noise import BrownianPath, DomainError, driver_table, localization_indicator
from .spaces import StructuralError, Trajectory

log = logging.getLogger(__name__)


class DivergedError(RuntimeError):
    """Raised when |u| crosses the guard; carries the partial trajectory."""

    def __init__(self, message, trajectory: Trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class IntegratorConfig:
    """dt = T 2^{-step_level}; the WZ level n, when set, needs step_level ≥ n + 2."""

    T: float = 1.0
    step_level: int = 8
    wz_level: int | None = None
    record_stride: int = 1
    guard: float = 1e6
    on_diverge: str = "raise"

    def __post_init__(self):
        if self.T <= 0:
            raise StructuralError("horizon must be positive")
        if self.step_level < 0:
            raise StructuralError("step level must be nonnegative")
        if self.wz_level is not None and self.step_level < self.wz_level + 2:
            raise StructuralError("dt must split every WZ cell into at least 4 steps")
        if self.record_stride < 1 or (2 ** self.step_level) % self.record_stride:
            raise StructuralError("record stride must divide the step count")
        if self.on_diverge not in ("raise", "mark"):
            raise StructuralError("on_diverge must be 'raise' or 'mark'")

    @classmethod
    def for_level(cls, n: int, kappa: int = 4, T: float = 1.0, **kw) -> "IntegratorConfig":
        return cls(T=T, step_level=n + kappa, wz_level=n, **kw)

    @property
    def steps(self) -> int:
        return 2 ** self.step_level

    @property
    def dt(self) -> float:
        return self.T * 2.0 ** -self.step_level

    def grid(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt


def _per_step(h, cfg: IntegratorConfig, modes: int):
    """Step-averaged control values, shape (*batch, steps, modes), or None."""
    if h is None:
        return None
    if isinstance(h, ControlShift):
        if h.is_zero:
            return None
        if h.modes != modes:
            raise StructuralError("control has the wrong number of modes")
        return h.integral_on(cfg.grid()) / cfg.dt
    arr = np.asarray(h, dtype=float)
    if arr.shape[-2:] != (cfg.steps, modes):
        raise StructuralError(f"per-step control must end in shape {(cfg.steps, modes)}")
    return arr


def _step_noise(path: BrownianPath, cfg: IntegratorConfig) -> np.ndarray:
    if abs(path.T - cfg.T) > 1e-12 * cfg.T:
        raise StructuralError("path horizon differs from integrator horizon")
    if cfg.step_level > path.level:
        raise StructuralError(f"step level {cfg.step_level} finer than path level {path.level}")
    return np.swapaxes(path.coarse_increments(cfg.step_level), -1, -2)   # (*batch, steps, J)


def _march(model: HydroModel, xi, cfg: IntegratorConfig, batch: tuple, increment):
    """Shared time loop; ``increment(i, u)`` returns the explicit update."""
    d = model.dim
    lam_dt = 1.0 + cfg.dt * model.space.eigenvalues
    u = np.broadcast_to(np.asarray(xi, dtype=float), batch + (d,)).copy()
    if u.shape[-1] != d:
        raise StructuralError("initial condition has the wrong dimension")
    stride = cfg.record_stride
    n_rec = cfg.steps // stride + 1
    states = np.empty(batch + (n_rec, d))
    states[..., 0, :] = u
    diverged = np.zeros(batch, dtype=bool)
    first_bad = np.full(batch, n_rec, dtype=int)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(cfg.steps):
            u = (u + increment(i, u)) / lam_dt
            if (i + 1) % stride == 0:
                states[..., (i + 1) // stride, :] = u
            norm = np.sqrt(np.sum(u * u, axis=-1))
            bad = ~(norm <= cfg.guard) & ~diverged
            if np.any(bad):
                diverged |= bad
                first_bad = np.where(bad, (i + 1) // stride, first_bad)
                u = np.where(bad[..., None], 0.0, u)
                if cfg.on_diverge == "raise":
                    break
    times = np.arange(n_rec) * cfg.dt * stride
    if np.any(diverged):
        mask = np.arange(n_rec) >= first_bad[..., None]
        states[mask] = np.nan
        traj = Trajectory(times, states, model.space, diverged)
        if cfg.on_diverge == "raise":
            raise DivergedError(f"|u| exceeded guard {cfg.guard:g}", traj)
        log.warning("%d trajectories diverged", int(np.sum(diverged)))
        return traj
    return Trajectory(times, states, model.space, diverged if batch else None)


def _combine(cols, weights):
    """Σ_j weights_j cols_j for cols (..., J, d) and weights (..., J)."""
    return np.matmul(weights[..., None, :], cols)[..., 0, :]


def _zero_if_none(x):
    return x is None or getattr(x, "is_zero", False)


def integrate_sde(model: HydroModel, sigma: DiffusionFamily | None, sigma_tilde: DiffusionFamily | None,
                  G=None, R: AffineOperator | None = None, h=None, path: BrownianPath = None,
                  cfg: IntegratorConfig = None, xi=None) -> Trajectory:
    """Itô equation du + [Au + B(u) + R(u)]dt = (σ+σ̃)(u)dW + G(u)h dt."""
    cfg = cfg or IntegratorConfig()
    dW = _step_noise(path, cfg)
    batch = dW.shape[:-2]
    hs = None if _zero_if_none(G) else _per_step(h, cfg, G.modes)
    noisy = [f for f in (sigma, sigma_tilde) if not _zero_if_none(f)]
    dt = cfg.dt

    def increment(i, u):
        inc = -dt * model.B(u)
        if R is not None:
            inc -= dt * apply_R(R, u)
        if hs is not None:
            inc += dt * apply_G(G, u, hs[..., i, :])
        for fam in noisy:
            inc += _combine(fam.columns(u), dW[..., i, :])
        return inc

    return _march(model, _initial(xi, model), cfg, batch, increment)


def integrate_wz(model: HydroModel, sigma: DiffusionFamily | None, sigma_tilde: DiffusionFamily | None,
                 G=None, R: AffineOperator | None = None, h=None, path: BrownianPath = None,
                 n: int | None = None, cfg: IntegratorConfig = None, xi=None,
                 correct: bool = True) -> Trajectory:
    """Approximate equation: σ̃ is driven by the adapted level-n driver.

    The drift gains σ̃(u)Ẇ̃ⁿ - (ρ_n + ½ρ̃_n)(u) (the correction can be switched
    off with ``correct=False``); only σ(u) multiplies the Brownian increments.
    """
    cfg = cfg or IntegratorConfig()
    n = cfg.wz_level if n is None else n
    if n is None or n < 1:
        raise DomainError("a WZ level n ≥ 1 is required")
    if cfg.step_level < n + 2:
        raise StructuralError("dt must split every WZ cell into at least 4 steps")
    dW = _step_noise(path, cfg)
    batch = dW.shape[:-2]
    table = driver_table(path, n)                  # (*batch, 2^n, J)
    shift = cfg.step_level - n
    hs = None if _zero_if_none(G) else _per_step(h, cfg, G.modes)
    has_sigma = not _zero_if_none(sigma)
    has_tilde = not _zero_if_none(sigma_tilde)
    m = min(n, sigma_tilde.modes) if has_tilde else 0
    dt = cfg.dt

    def increment(i, u):
        inc = -dt * model.B(u)
        if R is not None:
            inc -= dt * apply_R(R, u)
        if hs is not None:
            inc += dt * apply_G(G, u, hs[..., i, :])
        if has_sigma:
            cs = sigma.columns(u)
            inc += _combine(cs, dW[..., i, :])
        if has_tilde:
            ct = sigma_tilde.columns(u)
            inc += dt * _combine(ct, table[..., i >> shift, :])
            if correct:
                comb = cs + 0.5 * ct if has_sigma else 0.5 * ct
                inc -= dt * np.sum(sigma_tilde.jvp(u, comb)[..., :m, :], axis=-2)
        return inc

    return _march(model, _initial(xi, model), cfg, batch, increment)


def _initial(xi, model):
    return np.zeros(model.dim) if xi is None else np.asarray(xi, dtype=float)


def solve_skeleton(model: HydroModel, Xi: DiffusionFamily | None, R: AffineOperator | None,
                   phi, xi, cfg: IntegratorConfig = None, batch: tuple = ()) -> Trajectory:
    """∂v + Av + B(v) + R(v) + ½ρ_Ξ(v) = Ξ(v)φ with ρ_Ξ = Σ_j DΞ_j Ξ_j.

    ``phi`` is a ControlShift, an array of per-step values (*batch, steps, J),
    or None for φ = 0.
    """
    cfg = cfg or IntegratorConfig()
    has_xi = not _zero_if_none(Xi)
    ph = _per_step(phi, cfg, Xi.modes) if has_xi else None
    if ph is not None and ph.ndim > 2:
        batch = np.broadcast_shapes(batch, ph.shape[:-2])
    dt = cfg.dt

    def increment(i, v):
        inc = -dt * model.B(v)
        if R is not None:
            inc -= dt * apply_R(R, v)
        if has_xi:
            cols = Xi.columns(v)
            inc -= 0.5 * dt * np.sum(Xi.jvp(v, cols), axis=-2)
            if ph is not None:
                inc += dt * _combine(cols, ph[..., i, :])
        return inc

    return _march(model, np.asarray(xi, dtype=float), cfg, tuple(batch), increment)


def driver_per_step(path: BrownianPath, n: int, cfg: IntegratorConfig) -> np.ndarray:
    """Level-n driver repeated onto the integrator grid: (*batch, steps, J)."""
    table = driver_table(path, n)
    return np.repeat(table, 2 ** (cfg.step_level - n), axis=-2)


def energy_identity_check(model: HydroModel, cfg: IntegratorConfig, xi) -> dict:
    """Relative defect of |v(T)|² + 2∫‖v‖² = |ξ|² for the unforced skeleton."""
    xi = np.asarray(xi, dtype=float)
    e0 = float(np.sum(xi * xi))
    if e0 == 0.0:
        raise DomainError("relative energy defect undefined for ξ = 0")
    traj = solve_skeleton(model, None, None, None, xi, cfg)
    final = float(np.sum(traj.states[-1] ** 2))
    dissipated = 2.0 * float(traj.integral_v_sq())
    return {"defect": abs(final + dissipated - e0) / e0, "final": final,
            "dissipated": dissipated, "initial": e0, "dt": cfg.dt}


# ------------------------------------------------------------------ diagnostics

@dataclass(frozen=True)
class EnsembleSummary:
    paths: int
    sup_h4: float
    sup_h4_se: float
    int_v2: float
    int_v2_se: float
    int_interp4: float
    int_interp4_se: float
    per_path: dict

    @property
    def total(self) -> float:
        return self.sup_h4 + self.int_v2 + self.int_interp4


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(np.mean(x)) if x.size else 0.0, 0.0
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(x.size))


def apriori_moment_estimate(traj: Trajectory) -> EnsembleSummary:
    """Monte Carlo E sup|u|⁴, E∫‖u‖², E∫‖u‖ℋ⁴ over the batch axis."""
    states = traj.states.reshape((-1,) + traj.states.shape[-2:])
    if states.shape[0] < 2:
        raise DomainError("need at least two paths")
    flat = Trajectory(traj.times, states, traj.space)
    dt = np.diff(traj.times)
    sup4 = flat.sup_h_sq() ** 2
    v2 = flat.integral_v_sq()
    interp4 = (traj.space.interp_norm(states[:, :-1, :]) ** 4) @ dt
    m1, s1 = _mean_se(sup4)
    m2, s2 = _mean_se(v2)
    m3, s3 = _mean_se(interp4)
    return EnsembleSummary(states.shape[0], m1, s1, m2, s2, m3, s3,
                           {"sup_h4": sup4, "int_v2": v2, "int_interp4": interp4})


def _lag_indices(times, n: int, T: float, which: str):
    k = np.minimum(np.floor(times * 2 ** n / T + 1e-9).astype(int), 2 ** n - 1)
    cell = T * 2.0 ** -n
    if which == "previous":
        target = np.maximum(k - 1, 0) * cell
    elif which == "current":
        target = k * cell
    else:
        raise DomainError(f"unknown lag {which!r}")
    idx = np.searchsorted(times, target - 1e-12 * T)
    if not np.allclose(times[idx], target, atol=1e-9 * T):
        raise StructuralError("trajectory grid does not refine the level-n grid")
    return idx


def increment_samples(traj: Trajectory, n: int, N: float, which: str = "previous",
                      path: BrownianPath | None = None, alpha: float | None = None):
    """Per-path ∫ 1_{G_N(s)} |u(s) - u(lag_n(s))|² ds on the trajectory grid.

    With ``path`` and ``alpha`` the indicator also requires ∫₀ˢ‖u‖² ≤ N and
    membership in Ω_n(s), the localization used for approximate solutions.
    """
    t = traj.times
    T = traj.horizon
    states = traj.states
    dt = np.diff(t)
    left = states[..., :-1, :]
    total = 0.0
    kinds = ("previous", "current") if which == "both" else (which,)
    running_sup = np.maximum.accumulate(np.sqrt(np.sum(left ** 2, axis=-1)), axis=-1)
    ind = running_sup <= N
    if path is not None:
        vsq = np.sum(traj.space.eigenvalues * left ** 2, axis=-1)
        cum = np.concatenate([np.zeros(vsq.shape[:-1] + (1,)), np.cumsum(vsq * dt, axis=-1)[..., :-1]], axis=-1)
        ind &= cum <= N
        cells = np.minimum(np.floor(t[:-1] * 2 ** n / T + 1e-9).astype(int), 2 ** n - 1)
        omega = np.stack([np.asarray(localization_indicator(path, n, alpha, c * T * 2.0 ** -n))
                          for c in range(2 ** n)], axis=-1)
        ind &= omega[..., cells]
    for kind in kinds:
        idx = _lag_indices(t[:-1], n, T, kind)
        diff = left - states[..., idx, :]
        total = total + (ind * np.sum(diff ** 2, axis=-1)) @ dt
    return total


def increment_statistic(traj: Trajectory, n: int, N: float, which: str = "previous", **kw) -> float:
    """Ensemble mean of :func:`increment_samples`."""
    return float(np.mean(increment_samples(traj, n, N, which, **kw)))


def first_exit_time(traj: Trajectory, C: float):
    """First grid time with sup_{s≤t}|u|² + ∫₀ᵗ‖u‖² ≥ C, else T."""
    if C <= 0:
        raise DomainError("threshold must be positive")
    t = traj.times
    hsq = np.sum(traj.states ** 2, axis=-1)
    vsq = np.sum(traj.space.eigenvalues * traj.states ** 2, axis=-1)
    cum = np.concatenate([np.zeros(vsq.shape[:-1] + (1,)),
                          np.cumsum(vsq[..., :-1] * np.diff(t), axis=-1)], axis=-1)
    psi = np.maximum.accumulate(hsq, axis=-1) + cum
    hit = psi >= C
    first = np.argmax(hit, axis=-1)
    out = np.where(np.any(hit, axis=-1), t[first], t[-1])
    return float(out) if np.ndim(out) == 0 else out


def write_trajectory_csv(traj: Trajectory, fname) -> None:
    """Columns t, coeff_1..coeff_d for a single path."""
    if traj.batch_shape:
        raise StructuralError("dump one path at a time")
    header = ",".join(["t"] + [f"coeff_{k + 1}" for k in range(traj.space.dim)])
    data = np.column_stack([traj.times, traj.states])
    np.savetxt(fname, data, delimiter=",", header=header, comments="", fmt="%.17g")
