"""Monte Carlo studies built on the integrators.

Paths are processed in fixed-size chunks.  Path ``i`` always draws its noise
from ``path_seed(master, i)`` and always shares a chunk with the same
neighbours, so every number in a report is independent of how many worker
processes handled the chunks.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from functools import partial

import numpy as np
from scipy import stats

from . import coefficients as co
from .models import HydroModel, make_model
from .noise import (BrownianPath, DomainError, driver_table, localization_indicator,
                    path_seed, sample_ensemble, tail_probability_bound)
from .schema import SECTIONS, fill_defaults
from .solvers import (IntegratorConfig, driver_per_step, increment_statistic,
                      integrate_sde, integrate_wz, solve_skeleton)
from .spaces import StructuralError, Trajectory, x_distance_sq

CSV_COLUMNS = ("n", "lambda", "p_hat", "ci_lo", "ci_hi", "median_dist", "q25", "q75",
               "mean_sup_sq", "diverged_count")


class StudyError(RuntimeError):
    """A study ran but its outcome is unusable (e.g. too many diverged paths)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# ------------------------------------------------------------------ configuration

@dataclass(frozen=True)
class ExperimentConfig:
    """Complete, validated configuration; one dict per section."""

    model: dict
    space: dict
    noise: dict
    sigma: dict
    sigma_tilde: dict
    G: dict
    R: dict
    control: dict
    experiment: dict

    @classmethod
    def create(cls, **sections) -> "ExperimentConfig":
        return cls(**fill_defaults(sections))

    def as_dict(self) -> dict:
        return {name: json.loads(json.dumps(getattr(self, name))) for name in SECTIONS}

    def replace(self, section: str, **values) -> "ExperimentConfig":
        """New config with keys of one section overridden (and re-validated)."""
        data = self.as_dict()
        data[section].update(values)
        if section == "experiment" and "levels" in values and "reference_level" not in values:
            data["experiment"]["reference_level"] = None
        return ExperimentConfig.create(**data)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; insensitive to key order."""
        text = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def T(self) -> float:
        return self.noise["T"]

    @property
    def modes(self) -> int:
        return self.noise["modes"]

    @property
    def levels(self) -> list:
        return list(self.experiment["levels"])

    @property
    def paths(self) -> int:
        return self.experiment["paths"]

    @property
    def seed(self) -> int:
        return self.experiment["seed"]


@dataclass(eq=False)
class Problem:
    """Concrete objects described by a configuration."""

    model: HydroModel
    sigma: co.DiffusionFamily
    sigma_tilde: co.DiffusionFamily
    G: object
    R: co.AffineOperator | None
    h: co.ControlShift
    xi: np.ndarray


def build_model(cfg: ExperimentConfig) -> HydroModel:
    m = cfg.model
    s = cfg.space["interp_exponent"]
    kind = m["kind"]
    if kind in ("goy", "sabra"):
        return make_model(kind, shells=m["shells"], mu=m["mu"], k0=m["k0"], nu=m["nu"],
                          a=m["a"], b=m["b"], interp_exponent=s)
    if kind == "dyadic":
        return make_model(kind, shells=m["shells"], mu=m["mu"], k0=m["k0"], nu=m["nu"], interp_exponent=s)
    if kind == "ns2d":
        return make_model(kind, K=m["K"], nu=m["nu"], interp_exponent=s)
    return make_model(kind, eigenvalues=m["eigenvalues"], interp_exponent=s)


def _random_affine(spec: dict, J: int, d: int):
    if spec.get("g") is not None or spec.get("S") is not None:
        # nested lists or flat row-major lists are both accepted
        g = np.zeros((J, d)) if spec.get("g") is None else np.asarray(spec["g"], dtype=float)
        S = np.zeros((J, d, d)) if spec.get("S") is None else np.asarray(spec["S"], dtype=float)
        if g.size != J * d or S.size != J * d * d:
            raise StructuralError(f"explicit coefficients must have shapes {(J, d)} and {(J, d, d)}")
        return g.reshape(J, d), S.reshape(J, d, d)
    rng = np.random.default_rng(spec["seed"])
    k = d if spec.get("support") is None else min(spec["support"], d)
    g = np.zeros((J, d))
    S = np.zeros((J, d, d))
    g[:, :k] = spec["g_scale"] * rng.standard_normal((J, k))
    block = rng.standard_normal((J, k, k)) / math.sqrt(k)
    if spec.get("symmetric"):
        block = 0.5 * (block + np.swapaxes(block, 1, 2))
    S[:, :k, :k] = spec["s_scale"] * block
    return g, S


def build_family(spec: dict, J: int, d: int, reference: co.DiffusionFamily | None = None):
    kind = spec["kind"]
    if kind == "zero":
        return co.AffineFamily.zeros(J, d)
    if kind == "scaled":
        if reference is None:
            raise StructuralError("a scaled family needs a reference family")
        return co.ScaledFamily(reference, spec["c0"])
    g, S = _random_affine(spec, J, d)
    if kind == "pointwise":
        return co.PointwiseFamily(spec["funcs"], S)
    return co.AffineFamily(g, S)


def build_problem(cfg: ExperimentConfig) -> Problem:
    model = build_model(cfg)
    J, d = cfg.modes, model.dim
    sigma = build_family(cfg.sigma, J, d)
    sigma_tilde = build_family(cfg.sigma_tilde, J, d, reference=sigma)
    gk = cfg.G["kind"]
    if gk == "zero":
        G = None
    elif gk == "sigma":
        G = sigma
    else:
        G = co.AffineOperator(*_random_affine(cfg.G, J, d))
    r0, r1 = cfg.R["r0"], cfg.R["r1"]
    R = None
    if r0 or r1:
        const = np.zeros(d)
        const[0] = r0
        R = co.AffineOperator(const, r1 * np.eye(d))
    return Problem(model, sigma, sigma_tilde, G, R, build_control(cfg), build_initial(cfg, model))


def build_control(cfg: ExperimentConfig) -> co.ControlShift:
    c, J, T = cfg.control, cfg.modes, cfg.T
    if c["kind"] == "zero":
        return co.ControlShift.zero(J, T, c["budget"])
    if c["kind"] == "constant":
        return co.ControlShift(np.array([0.0, T]), np.full((1, J), c["amplitude"]), c["budget"])
    return co.smooth_control(J, T, c["cells"], c["amplitude"], c["budget"])


def build_initial(cfg: ExperimentConfig, model: HydroModel) -> np.ndarray:
    exp = cfg.experiment
    if exp["xi"] is not None:
        xi = np.asarray(exp["xi"], dtype=float)
        if xi.shape != (model.dim,):
            raise StructuralError(f"xi must have {model.dim} entries")
        return xi
    lam = model.space.eigenvalues
    z = np.random.default_rng(exp["xi_seed"]).standard_normal(model.dim)
    return exp["xi_scale"] * z * (lam / lam[0]) ** (-exp["xi_decay"])


def precondition_flags(cfg: ExperimentConfig, prob: Problem | None = None) -> list:
    """Flags raised by the coefficient checker for this configuration."""
    samples = cfg.experiment["check_samples"]
    if samples == 0:
        return []
    prob = prob or build_problem(cfg)
    rep = co.check_coefficient_conditions(prob.sigma, prob.sigma_tilde, prob.G, prob.R,
                                          prob.model.space, samples=samples, seed=cfg.seed)
    return list(rep.flags)


# ------------------------------------------------------------------ reports

@dataclass
class ConvergenceReport:
    """Per-level distance statistics; ``rows`` is the CSV table.

    ``distances[n]`` holds one entry per path (NaN where the path diverged).
    """

    study: str
    levels: list
    paths: int
    rows: list = field(default_factory=list)
    distances: dict = field(default_factory=dict)
    sup_distances: dict = field(default_factory=dict)
    diverged: dict = field(default_factory=dict)
    slope: float | None = None
    failed: bool = False
    messages: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def median(self, n: int) -> float:
        return float(np.nanmedian(self.distances[n])) if np.any(np.isfinite(self.distances[n])) else math.nan

    def row(self, n: int, lam: float) -> dict:
        for r in self.rows:
            if r["n"] == n and r["lambda"] == lam:
                return r
        raise KeyError((n, lam))

    def to_json(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, dict):
                val = {str(k): v for k, v in val.items()}
            out[f.name] = val
        return _jsonable(out)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


def wilson_interval(k: int, n: int, confidence: float = 0.95):
    """(p̂, lo, hi); NaNs when n = 0."""
    if n == 0:
        return math.nan, math.nan, math.nan
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return k / n, float(ci.low), float(ci.high)


def log2_slope(levels, values):
    """Least-squares slope of log₂(values) against the levels."""
    x = np.asarray(levels, dtype=float)
    y = np.asarray(values, dtype=float)
    ok = np.isfinite(y) & (y > 0)
    if ok.sum() < 2:
        return None
    return float(np.polyfit(x[ok], np.log2(y[ok]), 1)[0])


def _level_rows(n, dist, sq, div, thresholds, exceed=True):
    good = dist[~div & np.isfinite(dist)]
    if good.size:
        med, q25, q75 = (float(v) for v in np.percentile(good, [50, 25, 75]))
        msq = float(np.mean(sq[~div & np.isfinite(sq)]))
    else:
        med = q25 = q75 = msq = math.nan
    rows = []
    for lam in thresholds or [math.nan]:
        if math.isnan(lam):
            p = lo = hi = math.nan
        else:
            k = int(np.sum(good >= lam)) if exceed else int(np.sum(good < lam))
            p, lo, hi = wilson_interval(k, good.size)
        rows.append(dict(n=int(n), **{"lambda": float(lam)}, p_hat=p, ci_lo=lo, ci_hi=hi,
                         median_dist=med, q25=q25, q75=q75, mean_sup_sq=msq,
                         diverged_count=int(np.sum(div))))
    return rows


# ------------------------------------------------------------------ chunked execution

def _chunks(total: int, size: int):
    return [(a, min(a + size, total)) for a in range(0, total, size)]


def _run_chunks(func, cfg: ExperimentConfig, workers: int | None = None, **extra):
    """Apply ``func(cfg, start, stop, **extra)`` to every chunk; results in chunk order."""
    if extra:
        func = partial(func, **extra)
    jobs = _chunks(cfg.paths, cfg.experiment["chunk"])
    workers = cfg.experiment["workers"] if workers is None else workers
    if workers <= 1 or len(jobs) == 1:
        parts = [func(cfg, a, b) for a, b in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            parts = list(pool.map(func, [cfg] * len(jobs), *zip(*jobs)))
    return {key: np.concatenate([p[key] for p in parts], axis=-1) for key in parts[0]}


def _ensemble(cfg: ExperimentConfig, start: int, stop: int, level: int) -> BrownianPath:
    seeds = [path_seed(cfg.seed, i) for i in range(start, stop)]
    return sample_ensemble(cfg.modes, cfg.T, level, seeds)


def _int_cfg(cfg: ExperimentConfig, n: int | None = None) -> IntegratorConfig:
    exp = cfg.experiment
    kw = dict(T=cfg.T, guard=exp["guard"], on_diverge="mark")
    if n is None:
        return IntegratorConfig(step_level=exp["reference_level"], **kw)
    step = exp["reference_level"] if exp["wz_step"] == "reference" else n + exp["kappa"]
    return IntegratorConfig(step_level=step, wz_level=n, **kw)


def _div(traj: Trajectory, size: int) -> np.ndarray:
    return np.zeros(size, bool) if traj.diverged is None else np.asarray(traj.diverged, bool).reshape(size)


def _distances(ref: Trajectory, approx: Trajectory):
    ref = ref.restrict(approx.times)
    diff = ref.states - approx.states
    sup = np.sqrt(np.max(np.sum(diff ** 2, axis=-1), axis=-1))
    return np.sqrt(x_distance_sq(ref, approx)), sup


def _finish(report: ConvergenceReport, raw: dict, thresholds, exceed=True, max_frac=0.01):
    any_div = np.zeros(report.paths, bool)
    for i, n in enumerate(report.levels):
        dist, sup, div = raw["dist"][i], raw["sup"][i], raw["div"][i].astype(bool)
        dist = np.where(div, np.nan, dist)
        sup = np.where(div, np.nan, sup)
        report.distances[n] = dist
        report.sup_distances[n] = sup
        report.diverged[n] = int(np.sum(div))
        any_div |= div
        report.rows.extend(_level_rows(n, dist, dist ** 2, div, thresholds, exceed))
        mean_sup = float(np.nanmean(sup)) if np.any(np.isfinite(sup)) else math.nan
        report.extras.setdefault("mean_sup_distance", {})[n] = mean_sup
    report.slope = log2_slope(report.levels, [report.median(n) for n in report.levels])
    frac = float(np.mean(any_div)) if report.paths else 0.0
    report.extras["diverged_fraction"] = frac
    if frac > max_frac:
        report.failed = True
        report.messages.append(f"{frac:.1%} of paths diverged (limit {max_frac:.1%})")
    return report


# ------------------------------------------------------------------ Wong–Zakai study

def _wz_chunk(cfg: ExperimentConfig, start: int, stop: int, correct: bool = True) -> dict:
    prob = build_problem(cfg)
    size = stop - start
    paths = _ensemble(cfg, start, stop, cfg.experiment["reference_level"])
    ref = integrate_sde(prob.model, prob.sigma, prob.sigma_tilde, prob.G, prob.R, prob.h,
                        path=paths, cfg=_int_cfg(cfg), xi=prob.xi)
    ref_div = _div(ref, size)
    dist, sup, div = [], [], []
    for n in cfg.levels:
        un = integrate_wz(prob.model, prob.sigma, prob.sigma_tilde, prob.G, prob.R, prob.h,
                          path=paths, n=n, cfg=_int_cfg(cfg, n), xi=prob.xi, correct=correct)
        d, s = _distances(ref, un)
        dist.append(d)
        sup.append(s)
        div.append(ref_div | _div(un, size))
    return {"dist": np.array(dist), "sup": np.array(sup), "div": np.array(div)}


def wz_convergence_study(cfg: ExperimentConfig, workers: int | None = None,
                         check: bool = True, correct: bool = True) -> ConvergenceReport:
    """Distance between the Itô solution and its WZ approximations, path by path.

    ``correct=False`` drops the −(ρ_n + ½ρ̃_n) drift, which shows why it is needed.
    """
    if check:
        flags = precondition_flags(cfg)
        if flags:
            raise StudyError("coefficients fail the precondition check: " + "; ".join(flags))
    raw = _run_chunks(_wz_chunk, cfg, workers, correct=correct)
    rep = ConvergenceReport("wz-study", cfg.levels, cfg.paths)
    return _finish(rep, raw, cfg.experiment["lambdas"],
                   max_frac=cfg.experiment["max_diverged_fraction"])


# ------------------------------------------------------------------ support studies

def girsanov_shift_path(path: BrownianPath, n: int, h: co.ControlShift | None = None) -> BrownianPath:
    """Path of W − W̃ⁿ + ∫h ds in β-coordinates, on the same fine grid."""
    L, T = path.level, path.T
    if not 1 <= n <= L:
        raise StructuralError(f"level {n} is not within 1..{L}")
    dtf = T * 2.0 ** -L
    table = driver_table(path, n)                                  # (*batch, 2^n, J)
    drift = np.repeat(np.swapaxes(table, -1, -2), 2 ** (L - n), axis=-1) * dtf
    inc = path.increments - drift
    if h is not None and not h.is_zero:
        if h.modes != path.modes:
            raise StructuralError("control and path have different mode counts")
        pos = h.times * 2 ** L / T
        if np.any(np.abs(pos - np.round(pos)) > 1e-9) or h.times[0] != 0 or abs(h.times[-1] - T) > 1e-12 * T:
            raise StructuralError("control knots are not nodes of the fine grid")
        grid = np.arange(2 ** L + 1) * dtf
        inc = inc + h.integral_on(grid).T
    return BrownianPath(T, L, inc, path.seed)


def _forward_chunk(cfg: ExperimentConfig, start: int, stop: int) -> dict:
    prob = build_problem(cfg)
    Xi = prob.sigma
    size = stop - start
    paths = _ensemble(cfg, start, stop, cfg.experiment["reference_level"])
    U = integrate_sde(prob.model, Xi, None, None, prob.R, None, path=paths, cfg=_int_cfg(cfg), xi=prob.xi)
    U_div = _div(U, size)
    dist, sup, div = [], [], []
    for n in cfg.levels:
        icfg = _int_cfg(cfg, n)
        phi = driver_per_step(paths, n, icfg)
        v = solve_skeleton(prob.model, Xi, prob.R, phi, prob.xi, icfg, batch=(size,))
        d, s = _distances(U, v)
        dist.append(d)
        sup.append(s)
        div.append(U_div | _div(v, size))
    return {"dist": np.array(dist), "sup": np.array(sup), "div": np.array(div)}


def support_forward_study(cfg: ExperimentConfig, workers: int | None = None) -> ConvergenceReport:
    """Distance from U (Itô, diffusion Ξ = σ) to the skeleton driven by Ẇ̃ⁿ.

    The σ̃, G and control sections are ignored here.
    """
    raw = _run_chunks(_forward_chunk, cfg, workers)
    rep = ConvergenceReport("support-forward", cfg.levels, cfg.paths)
    return _finish(rep, raw, cfg.experiment["lambdas"],
                   max_frac=cfg.experiment["max_diverged_fraction"])


def _reverse_chunk(cfg: ExperimentConfig, start: int, stop: int, h=None) -> dict:
    prob = build_problem(cfg)
    Xi = prob.sigma
    h = prob.h if h is None else h
    size = stop - start
    paths = _ensemble(cfg, start, stop, cfg.experiment["reference_level"])
    dist, sup, div = [], [], []
    for n in cfg.levels:
        icfg = _int_cfg(cfg, n)
        shifted = girsanov_shift_path(paths, n, h)
        U = integrate_sde(prob.model, Xi, None, None, prob.R, None, path=shifted, cfg=icfg, xi=prob.xi)
        v = solve_skeleton(prob.model, Xi, prob.R, h, prob.xi, icfg)
        vb = Trajectory(v.times, np.broadcast_to(v.states, U.states.shape), v.space)
        d, s = _distances(U, vb)
        dist.append(d)
        sup.append(s)
        div.append(_div(U, size))
    return {"dist": np.array(dist), "sup": np.array(sup), "div": np.array(div)}


def support_reverse_study(cfg: ExperimentConfig, h: co.ControlShift | None = None,
                          workers: int | None = None) -> ConvergenceReport:
    """Distance from v_h to U evaluated on the Girsanov-shifted paths.

    With Ξ = σ, U on the path W − W̃ⁿ + ∫h equals the approximation with
    σ̃ = −Ξ, G = Ξ and control h, taken without the drift correction.  Rows give
    the fraction of paths closer than each radius of ``experiment.eps``.
    ``h`` defaults to the configured control.
    """
    raw = _run_chunks(_reverse_chunk, cfg, workers, h=h)
    rep = ConvergenceReport("support-reverse", cfg.levels, cfg.paths)
    rep = _finish(rep, raw, cfg.experiment["eps"], exceed=False,
                  max_frac=cfg.experiment["max_diverged_fraction"])
    rep.extras["min_distance"] = {n: float(np.nanmin(rep.distances[n])) for n in cfg.levels
                                  if np.any(np.isfinite(rep.distances[n]))}
    return rep


# ------------------------------------------------------------------ noise tails

def _tail_chunk(cfg: ExperimentConfig, start: int, stop: int) -> dict:
    levels = cfg.experiment["tail_levels"]
    paths = _ensemble(cfg, start, stop, max(levels))
    alpha = cfg.experiment["alpha"]
    return {"outside": np.array([~np.asarray(localization_indicator(paths, n, alpha)) for n in levels])}


def noise_tail_study(cfg: ExperimentConfig, workers: int | None = None) -> ConvergenceReport:
    """Empirical P(Ω_n(T)ᶜ) per level next to the analytic tail bound.

    Rows carry the frequency in ``p_hat`` and α in the ``lambda`` column.
    """
    levels = list(cfg.experiment["tail_levels"])
    alpha, T, P = cfg.experiment["alpha"], cfg.T, cfg.paths
    outside = _run_chunks(_tail_chunk, cfg, workers)["outside"]
    rep = ConvergenceReport("noise-study", levels, P)
    bound, se, margin = {}, {}, {}
    for i, n in enumerate(levels):
        k = int(np.sum(outside[i]))
        p, lo, hi = wilson_interval(k, P)
        rep.rows.append(dict(n=n, **{"lambda": alpha}, p_hat=p, ci_lo=lo, ci_hi=hi,
                             median_dist=math.nan, q25=math.nan, q75=math.nan,
                             mean_sup_sq=math.nan, diverged_count=0))
        try:
            bound[n] = tail_probability_bound(n, alpha, T)
        except DomainError as exc:
            bound[n] = math.nan
            rep.messages.append(f"n={n}: {exc}")
        se[n] = math.sqrt(p * (1 - p) / P)
        margin[n] = n * bound[n] + 3 * se[n] - p
    rep.extras.update(bound=bound, scaled_bound={n: n * bound[n] for n in levels},
                      standard_error=se, margin=margin, alpha=alpha)
    return rep


# ------------------------------------------------------------------ moments

def _moment_chunk(cfg: ExperimentConfig, start: int, stop: int) -> dict:
    prob = build_problem(cfg)
    size = stop - start
    paths = _ensemble(cfg, start, stop, cfg.experiment["reference_level"])
    traj = integrate_sde(prob.model, prob.sigma, prob.sigma_tilde, prob.G, prob.R, prob.h,
                         path=paths, cfg=_int_cfg(cfg), xi=prob.xi)
    states = traj.states
    dt = np.diff(traj.times)
    space = traj.space
    return {
        "sup_h4": traj.sup_h_sq() ** 2,
        "int_v2": traj.integral_v_sq(),
        "int_interp4": (space.interp_norm(states[:, :-1, :]) ** 4) @ dt,
        "final_h2": np.sum(states[:, -1, :] ** 2, axis=-1),
        "div": _div(traj, size),
    }


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return (float(np.mean(x)) if x.size else math.nan), math.nan
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size))


def _exp_moment(log_vals):
    """Mean and standard error of exp(log_vals); (inf, nan, True) on overflow."""
    if log_vals.size and np.max(log_vals) > 700.0:
        return math.inf, math.nan, True
    m, s = _mean_se(np.exp(log_vals))
    return m, s, False


def _grows(estimates, errors) -> bool:
    """True when every path-count doubling raises the estimate clearly."""
    if len(estimates) < 3 or not all(np.isfinite(estimates)):
        return False
    steps = zip(estimates, estimates[1:], errors[1:])
    return all(b > 1.2 * a and b - a > 2 * (e if np.isfinite(e) else 0.0) for a, b, e in steps)


def moment_diagnostics(cfg: ExperimentConfig, workers: int | None = None) -> ConvergenceReport:
    """A priori moments and E exp(a|u(T)|² + b∫‖u‖²) with standard errors.

    Estimates are repeated on the first P/4, P/2 and P paths; a flag is raised
    when they keep growing with the path count.
    """
    raw = _run_chunks(_moment_chunk, cfg, workers)
    P = cfg.paths
    a, b = cfg.experiment["exp_alpha"], cfg.experiment["exp_beta"]
    rep = ConvergenceReport("moments", [], P)
    ok = ~raw["div"].astype(bool)
    rep.diverged = {"reference": int(np.sum(~ok))}
    flags = []
    log_vals = a * raw["final_h2"] + b * raw["int_v2"]
    if a == 0 and b == 0:
        log_vals = np.zeros(P)
    prefixes = sorted({max(P // 4, 1), max(P // 2, 1), P})
    table = {}
    for name in ("sup_h4", "int_v2", "int_interp4"):
        table[name] = [_mean_se(raw[name][:k][ok[:k]]) for k in prefixes]
    table["total"] = [_mean_se((raw["sup_h4"] + raw["int_v2"] + raw["int_interp4"])[:k][ok[:k]])
                      for k in prefixes]
    exp_rows = [_exp_moment(log_vals[:k][ok[:k]]) for k in prefixes]
    if any(r[2] for r in exp_rows):
        flags.append("exponential moment overflow")
    table["exp_moment"] = [(r[0], r[1]) for r in exp_rows]
    for name, vals in table.items():
        if _grows([v[0] for v in vals], [v[1] for v in vals]):
            flags.append(f"{name} grows with the path count")
    rep.extras.update(
        path_counts=prefixes,
        estimates={k: v[-1][0] for k, v in table.items()},
        standard_errors={k: v[-1][1] for k, v in table.items()},
        by_path_count={k: [v[0] for v in vals] for k, vals in table.items()},
        exp_alpha=a, exp_beta=b, flags=flags,
    )
    rep.messages.extend(flags)
    frac = float(np.mean(~ok))
    if frac > cfg.experiment["max_diverged_fraction"]:
        rep.failed = True
        rep.messages.append(f"{frac:.1%} of paths diverged")
    return rep


# ------------------------------------------------------------------ increments

def increment_rate_study(cfg: ExperimentConfig, N: float | None = None) -> dict:
    """E∫ 1_{sup|u|≤N} |u(s) − u(s_n)|² ds across the configured levels, with its log₂ slope."""
    prob = build_problem(cfg)
    N = cfg.experiment["N"] if N is None else N
    paths = _ensemble(cfg, 0, cfg.paths, cfg.experiment["reference_level"])
    traj = integrate_sde(prob.model, prob.sigma, prob.sigma_tilde, prob.G, prob.R, prob.h,
                         path=paths, cfg=_int_cfg(cfg), xi=prob.xi)
    values = {n: increment_statistic(traj, n, N) for n in cfg.levels}
    return {"levels": cfg.levels, "values": values,
            "slope": log2_slope(cfg.levels, [values[n] for n in cfg.levels])}
