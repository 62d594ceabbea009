"""Command line front end: config parsing, dispatch and report files.

Config files are INI-style: one ``[section]`` per group of keys and
``key = value`` lines whose values are JSON (bare words are read as strings)::

    [model]
    kind = goy
    shells = 12

    [experiment]
    levels = [4, 6, 8, 10]
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import experiments as ex
from .coefficients import check_coefficient_conditions
from .models import check_condition_B
from .schema import SECTIONS, ConfigError, describe, fill_defaults
from .solvers import DivergedError, integrate_sde, write_trajectory_csv
from .spaces import StructuralError, check_interpolation

SUBCOMMANDS = ("check-conditions", "simulate", "wz-study", "support-forward",
               "support-reverse", "noise-study", "moments")

EXIT_OK, EXIT_USAGE, EXIT_STUDY = 0, 1, 2


# ------------------------------------------------------------------ config text

def _key_lines(text: str) -> dict:
    """Map "section" and "section.key" to 1-based source lines."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            lines.setdefault(section, no)
        elif section is not None:
            sep = min((line.find(c) for c in "=:" if c in line), default=-1)
            if sep > 0:
                lines.setdefault(f"{section}.{line[:sep].strip()}", no)
    return lines


def _value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def parse_config(text: str) -> ex.ExperimentConfig:
    """Parse config text into a validated :class:`ExperimentConfig`.

    Raises :class:`ConfigError` naming the key (and line) at fault.
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{exc.section}.{exc.option}", "duplicate key", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(exc.section, "duplicate section", exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("<file>", "key outside any section", exc.lineno) from None
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    lines = _key_lines(text)
    sections = {sec: {k: _value(v) for k, v in parser[sec].items()} for sec in parser.sections()}
    return ex.ExperimentConfig(**fill_defaults(sections, lines))


def serialize_config(cfg: ex.ExperimentConfig) -> str:
    """Config text listing every effective value; parses back to an equal config."""
    out = []
    data = cfg.as_dict()
    for sec in SECTIONS:
        out.append(f"[{sec}]")
        for key, val in data[sec].items():
            out.append(f"{key} = {json.dumps(val)}")
        out.append("")
    return "\n".join(out)


# ------------------------------------------------------------------ reports

@dataclass
class RunManifest:
    config_hash: str
    version: str
    seed: int
    start_time: float
    end_time: float
    files: list = field(default_factory=list)
    subcommand: str = ""
    exit_status: int = 0


def artifact_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__
        return __version__


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def _atomic_write(path: Path, data: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def report_csv(report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ex.CSV_COLUMNS)
    for row in (report.rows if report is not None else []):
        writer.writerow([_fmt(row[c]) for c in ex.CSV_COLUMNS])
    return buf.getvalue()


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _json_float(x):
    # JSON has no NaN/inf; strings keep the value readable and lossless
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    if isinstance(x, float):
        return float("%.17g" % x)
    if isinstance(x, dict):
        return {k: _json_float(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_float(v) for v in x]
    return x


def write_report(report, paths: dict, extra: dict | None = None) -> list:
    """Write ``paths['csv']`` and ``paths['json']``; returns the files written.

    Each file is written to a temporary name first and renamed into place.
    """
    payload = report.to_json() if report is not None else {"rows": []}
    if extra:
        payload = {**payload, **extra}
    written = []
    if "csv" in paths:
        _atomic_write(Path(paths["csv"]), report_csv(report))
        written.append(str(paths["csv"]))
    if "json" in paths:
        text = json.dumps(_json_float(json.loads(json.dumps(payload, default=_json_default))),
                          indent=2, sort_keys=True)
        _atomic_write(Path(paths["json"]), text + "\n")
        written.append(str(paths["json"]))
    return written


def csv_body(path) -> str:
    """CSV text without the header line."""
    return "".join(Path(path).read_text().splitlines(keepends=True)[1:])


# ------------------------------------------------------------------ subcommands

def _check_conditions(cfg: ex.ExperimentConfig):
    prob = ex.build_problem(cfg)
    samples = max(cfg.experiment["check_samples"], 1)
    brep = check_condition_B(prob.model, samples, cfg.seed)
    irep = check_interpolation(prob.model.space, samples, cfg.seed)
    crep = check_coefficient_conditions(prob.sigma, prob.sigma_tilde, prob.G, prob.R,
                                        prob.model.space, samples=samples, seed=cfg.seed)
    rep = ex.ConvergenceReport("check-conditions", [], 0)
    rep.extras.update(bilinear=asdict(brep), interpolation=asdict(irep), coefficients=crep.as_dict())
    if crep.flags:
        rep.failed = True
        rep.messages.extend(crep.flags)
    return rep


def _simulate(cfg: ex.ExperimentConfig, out: Path):
    prob = ex.build_problem(cfg)
    paths = ex._ensemble(cfg, 0, cfg.paths, cfg.experiment["reference_level"])
    icfg = ex._int_cfg(cfg)
    traj = integrate_sde(prob.model, prob.sigma, prob.sigma_tilde, prob.G, prob.R, prob.h,
                         path=paths, cfg=icfg, xi=prob.xi)
    rep = ex.ConvergenceReport("simulate", [], cfg.paths)
    div = np.zeros(cfg.paths, bool) if traj.diverged is None else np.asarray(traj.diverged)
    rep.diverged = {"reference": int(div.sum())}
    ok = ~div
    rep.extras.update(final_energy=np.sum(traj.states[:, -1, :] ** 2, axis=-1),
                      sup_h_sq=traj.sup_h_sq(), int_v_sq=traj.integral_v_sq(),
                      mean_final_energy=float(np.mean(np.sum(traj.states[ok, -1, :] ** 2, axis=-1)))
                      if ok.any() else math.nan)
    if div.mean() > cfg.experiment["max_diverged_fraction"]:
        rep.failed = True
        rep.messages.append("too many diverged paths")
    first = int(np.argmax(ok)) if ok.any() else None
    files = []
    if first is not None:
        fname = out / "trajectory.csv"
        tmp = out / ".trajectory.csv.tmp"
        out.mkdir(parents=True, exist_ok=True)
        write_trajectory_csv(traj.path(first), tmp)
        os.replace(tmp, fname)
        files.append(str(fname))
    return rep, files


def run(subcommand: str, cfg: ex.ExperimentConfig, out: str | os.PathLike = "results",
        workers: int | None = None) -> tuple[int, list]:
    """Run one subcommand; returns (exit status, files written)."""
    if subcommand not in SUBCOMMANDS:
        return EXIT_USAGE, []
    out = Path(out)
    start = time.time()
    files = []
    try:
        if subcommand == "check-conditions":
            rep = _check_conditions(cfg)
        elif subcommand == "simulate":
            rep, files = _simulate(cfg, out)
        elif subcommand == "wz-study":
            rep = ex.wz_convergence_study(cfg, workers)
        elif subcommand == "support-forward":
            rep = ex.support_forward_study(cfg, workers)
        elif subcommand == "support-reverse":
            rep = ex.support_reverse_study(cfg, workers=workers)
        elif subcommand == "noise-study":
            rep = ex.noise_tail_study(cfg, workers)
        else:
            rep = ex.moment_diagnostics(cfg, workers)
    except ex.StudyError as exc:
        print(f"study failed: {exc}", file=sys.stderr)
        rep = ex.ConvergenceReport(subcommand, [], cfg.paths, failed=True, messages=[str(exc)])
    except (StructuralError, DivergedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE, []
    status = EXIT_STUDY if rep.failed else EXIT_OK
    stem = subcommand.replace("-", "_")
    files += write_report(rep, {"csv": out / f"{stem}.csv", "json": out / f"{stem}.json"},
                          extra={"config": cfg.as_dict()})
    _atomic_write(out / "config.ini", serialize_config(cfg))
    files.append(str(out / "config.ini"))
    manifest = RunManifest(cfg.digest(), artifact_version(), cfg.seed, start, time.time(),
                           files, subcommand, status)
    mpath = out / "manifest.json"
    _atomic_write(mpath, json.dumps(asdict(manifest), indent=2) + "\n")
    for msg in rep.messages:
        print(msg, file=sys.stderr)
    return status, files + [str(mpath)]


# ------------------------------------------------------------------ entry point

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hydro", description="Wong–Zakai and support studies for stochastic hydrodynamical models.",
                                epilog="Config keys:\n" + describe(),
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="config file")
    p.add_argument("--seed", type=int, help="override experiment.seed")
    p.add_argument("--paths", type=int, help="override experiment.paths")
    p.add_argument("--out", default="results", help="output directory")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = parse_config(Path(args.config).read_text(encoding="utf-8"))
        overrides = {k: v for k, v in (("seed", args.seed), ("paths", args.paths)) if v is not None}
        if overrides:
            cfg = cfg.replace("experiment", **overrides)
    except (OSError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    status, files = run(args.subcommand, cfg, args.out)
    for f in files:
        print(f)
    return status


if __name__ == "__main__":
    sys.exit(main())
