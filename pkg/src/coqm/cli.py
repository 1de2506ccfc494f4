"""Command-line front end: ``coqm landscape | estimate | calibrate``.

Every option can also come from ``--config FILE``, a flat ``key = value``
text file using the long flag names (or a JSON run record written by a
previous run, whose embedded config is reused). Flags override the file.

Exit codes: 0 success, 2 configuration error, 3 positivity error,
4 calibration did not converge.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import re
import sys
import time
from pathlib import Path

import numpy as np

from coqm import __version__
from coqm.calibration import (
    DEFAULT_FIXED,
    PARAM_NAMES,
    PRESETS,
    DatasetFormatError,
    ErrorModelParams,
    FrequencyDataset,
    build_lattice_prior,
    fit_parameters,
    synthetic_dataset,
)
from coqm.exceptions import PositivityError
from coqm.simulator import ConfigError, ExperimentConfig, landscape_grid, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_POSITIVITY, EXIT_NONCONVERGED = 0, 2, 3, 4
RECORD_SCHEMA_VERSION = 1
CSV_VERSION = 1

ESTIMATE_KINDS = ("theta_sweep", "phi_sweep", "sample_size", "concentration", "depolarization")

_ANGLE = re.compile(
    r"^\s*(?P<sign>[-+])?(?P<num>(\d+(\.\d*)?|\.\d+)([eE][-+]?\d+)?)?\s*"
    r"(?P<unit>pi|π|deg)?\s*(/\s*(?P<den>\d+(\.\d*)?))?\s*$"
)


def parse_angle(text: str) -> float:
    """Radians from ``0.5pi``, ``pi/5``, ``30deg`` or a bare number (radians)."""
    m = _ANGLE.match(str(text))
    if not m or (m.group("num") is None and m.group("unit") is None):
        raise ConfigError(f"cannot parse angle {text!r}")
    value = float(m.group("num")) if m.group("num") is not None else 1.0
    if m.group("sign") == "-":
        value = -value
    unit = m.group("unit")
    if unit in ("pi", "π"):
        value *= math.pi
    elif unit == "deg":
        value = math.radians(value)
    if m.group("den") is not None:
        den = float(m.group("den"))
        if den == 0:
            raise ConfigError(f"zero denominator in angle {text!r}")
        value /= den
    return value


def parse_list(text: str, item=float) -> list:
    """Comma-separated values; ``start:stop:count`` expands to an inclusive linspace."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            pieces = part.split(":")
            if len(pieces) != 3:
                raise ConfigError(f"range {part!r} must be start:stop:count")
            count = int(float(pieces[2]))
            if count < 1:
                raise ConfigError(f"range {part!r} needs a positive count")
            out.extend(float(v) for v in np.linspace(item(pieces[0]), item(pieces[1]), count))
        else:
            out.append(item(part))
    if not out:
        raise ConfigError(f"empty list {text!r}")
    return out


def _float(text) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"not a number: {text!r}") from None


def _int(text) -> int:
    value = _float(text)
    if not value.is_integer():
        raise ConfigError(f"not an integer: {text!r}")
    return int(value)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _grid(text) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", str(text))
    if not m:
        raise ConfigError(f"grid must look like 50x50, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _angles(text) -> list:
    return parse_list(text, parse_angle)


def _floats(text) -> list:
    return parse_list(text, _float)


# option name -> converter; shared by flags and config files
CONVERTERS = {
    "seed": _int,
    "trials": _int,
    "samples": _int,
    "out_dir": str,
    "clip": _bool,
    "workers": _int,
    "grid": _grid,
    "theta": _angles,
    "phi": _angles,
    "monte_carlo": _bool,
    "kind": str,
    "sizes": _floats,
    "c": _floats,
    "lambdas": _floats,
    "theta0": parse_angle,
    "alpha": _float,
    "path_l": _float,
    "systematic": str,
    "data": str,
    "synthetic": str,
    "lattice": _grid,
    "counts": _float,
    "init": str,
    "starts": _int,
    "fix": lambda t: [s.strip() for s in str(t).split(",") if s.strip()],
    "max_iter": _int,
    "fit_seed": _int,
}

GLOBAL_DEFAULTS = {"seed": 0, "out_dir": ".", "clip": False, "workers": 1}

KIND_DEFAULTS = {
    "theta_sweep": {"theta": "0.46pi:0.55pi:149", "phi": "0.15pi", "trials": 100, "samples": 100000},
    "phi_sweep": {"theta": "pi/5", "phi": "0.4pi:0.6pi:21", "trials": 100, "samples": 100000},
    "sample_size": {"theta": "0.5pi", "phi": "0.1pi", "sizes": "1e2,1e3,1e4,1e5", "trials": 1000},
    "concentration": {"theta0": "0.5pi", "phi": "0.15pi", "c": "0.1,0.3,0.5", "trials": 10, "samples": 100000},
    "depolarization": {
        "theta": "pi/5",
        "phi": "0.4pi:0.6pi:21",
        "lambdas": "1,0.95,0.9,0.8",
        "trials": 100,
        "samples": 100000,
    },
    "landscape": {"grid": "50x50", "monte_carlo": False, "trials": 20, "samples": 100000},
    "calibrate": {"lattice": "30x30", "counts": 100000, "init": "no_error", "starts": 8, "max_iter": 500, "fit_seed": 0},
}


def load_config_file(path) -> dict:
    """Read a flat ``key = value`` file or the config echo of a JSON run record."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    if text.lstrip().startswith("{"):
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return {k: v for k, v in record.get("config", {}).items() if k != "command"}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in CONVERTERS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _add_common(parser):
    s = argparse.SUPPRESS
    parser.add_argument("--seed", default=s, help="master seed (default 0)")
    parser.add_argument("--trials", default=s, help="Monte-Carlo trials per point")
    parser.add_argument("--samples", default=s, help="probes per ensemble N_s")
    parser.add_argument("--out-dir", dest="out_dir", default=s, help="output directory (default .)")
    parser.add_argument("--config", default=s, help="key = value file or JSON run record")
    parser.add_argument("--clip", action="store_const", const="true", default=s,
                        help="drop probe points outside the positivity region instead of failing")
    parser.add_argument("--workers", default=s, help="worker threads (results do not depend on it)")


def build_parser() -> argparse.ArgumentParser:
    s = argparse.SUPPRESS
    parser = argparse.ArgumentParser(
        prog="coqm", description="Contextual quantum metrology simulations.", allow_abbrev=False
    )
    parser.add_argument("--version", action="version", version=f"coqm {__version__}")
    _add_common(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("landscape", help="error-ratio landscape over the Bloch sphere", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--grid", default=s, help="NTHETAxNPHI, theta from 0 to pi, phi = 2 pi j / NPHI")
    p.add_argument("--theta", default=s, help="explicit theta list (overrides --grid)")
    p.add_argument("--phi", default=s, help="explicit phi list (overrides --grid)")
    p.add_argument("--monte-carlo", dest="monte_carlo", action="store_const", const="true", default=s,
                   help="attach sampled mean errors to positive cells")

    p = sub.add_parser("estimate", help="Monte-Carlo estimation sweeps", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--kind", default=s, help="|".join(ESTIMATE_KINDS))
    p.add_argument("--theta", default=s, help="theta list, e.g. 0.46pi:0.55pi:149 or 0.5pi")
    p.add_argument("--phi", default=s, help="phi list")
    p.add_argument("--sizes", default=s, help="sample sizes for sample_size")
    p.add_argument("--c", default=s, help="concentrations in g/ml")
    p.add_argument("--lambdas", default=s, help="purities for depolarization")
    p.add_argument("--theta0", default=s, help="reference angle for concentration")
    p.add_argument("--alpha", default=s, help="specific rotation, deg ml / (dm g)")
    p.add_argument("--path-l", dest="path_l", default=s, help="cell length in dm")
    p.add_argument("--systematic", default=s, help="error-model preset (no_error, experiment) or JSON file")

    p = sub.add_parser("calibrate", help="fit the systematic-error model", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--data", default=s, help="frequency CSV: theta_s,phi_s,meas,outcome,count")
    p.add_argument("--synthetic", default=s, help="generate data from a preset or JSON parameter file")
    p.add_argument("--lattice", default=s, help="lattice for --synthetic (default 30x30)")
    p.add_argument("--counts", default=s, help="counts per cell for --synthetic; 0 means exact frequencies")
    p.add_argument("--init", default=s, help="initial parameters: preset or JSON file")
    p.add_argument("--starts", default=s, help="multi-start count")
    p.add_argument("--fix", default=s, help="parameters held at their initial value (default phiB)")
    p.add_argument("--max-iter", dest="max_iter", default=s, help="iteration budget per start")
    p.add_argument("--fit-seed", dest="fit_seed", default=s, help="seed for the perturbed starts")
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags, then convert every value."""
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    command = args.command
    kind = given.get("kind", file_values.get("kind"))
    if command == "estimate":
        if kind is None:
            raise ConfigError("estimate needs --kind")
        if kind not in ESTIMATE_KINDS:
            raise ConfigError(f"unknown kind {kind!r}; choose from {', '.join(ESTIMATE_KINDS)}")
        defaults = KIND_DEFAULTS[kind]
    else:
        defaults = KIND_DEFAULTS[command]
    merged = {**GLOBAL_DEFAULTS, **defaults, **file_values, **given}
    options = {}
    for key, value in merged.items():
        if key not in CONVERTERS:
            raise ConfigError(f"unknown option {key!r}")
        conv = CONVERTERS[key]
        options[key] = value if _is_converted(value, conv) else conv(value)
    options["command"] = command
    return options


def _is_converted(value, conv) -> bool:
    # values taken from a JSON record echo are already typed
    return not isinstance(value, str) or conv is str


def _load_params(spec: str) -> ErrorModelParams:
    if spec in PRESETS:
        return PRESETS[spec]
    try:
        data = json.loads(Path(spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load parameters from {spec!r}: {exc}") from None
    data = data.get("parameters", data)
    try:
        params = ErrorModelParams.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad parameter file {spec!r}: {exc}") from None
    return params


def _echo(options: dict) -> dict:
    """JSON-friendly copy of the resolved options (round-trips through --config).

    Output location and worker count do not affect results and are left out
    so that records are byte-identical across directories and thread counts.
    """
    out = {}
    for key, value in sorted(options.items()):
        if key in ("out_dir", "workers"):
            continue
        if isinstance(value, tuple):
            value = list(value)
        out[key] = value
    return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else repr(float(value))
    return str(value)


def _write_csv(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _record(options: dict, outputs: dict, failures: dict, stem: str) -> dict:
    return {
        "tool": "coqm",
        "version": __version__,
        "schema_version": RECORD_SCHEMA_VERSION,
        "csv_version": CSV_VERSION,
        "command": options["command"],
        "config": _echo(options),
        "seed": options["seed"],
        "outputs": outputs,
        "failures": failures,
        "timing": {"sidecar": f"{stem}.timing.json"},
    }


def _out_dir(options) -> Path:
    out = Path(options["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_landscape(options: dict) -> int:
    if "theta" in options or "phi" in options:
        n_theta, n_phi = options["grid"]
        default_t, default_p = landscape_grid(n_theta, n_phi)
        thetas = options.get("theta", list(default_t))
        phis = options.get("phi", list(default_p))
    else:
        thetas, phis = landscape_grid(*options["grid"])
    config = ExperimentConfig(
        "landscape",
        thetas=thetas,
        phis=phis,
        n_s=options["samples"],
        trials=options["trials"],
        seed=options["seed"],
        monte_carlo=options["monte_carlo"],
        workers=options["workers"],
    )
    cells = run_experiment(config)
    header = ["theta", "phi", "R", "negativity"]
    rows = [[c.theta, c.phi, c.R, c.negativity] for c in cells]
    if config.monte_carlo:
        header += ["mc_error", "crb_bound"]
        for row, c in zip(rows, cells):
            row += [c.mc_error, c.crb_bound]
    out = _out_dir(options)
    _write_csv(out / "landscape.csv", header, rows)
    n_negative = sum(1 for c in cells if c.negativity > 0)
    n_undefined = sum(1 for c in cells if c.R is None)
    record = _record(
        options,
        {"csv": "landscape.csv", "columns": header, "rows": len(rows)},
        {"negative_cells": n_negative, "undefined_ratio_cells": n_undefined},
        "landscape",
    )
    return _finish(out, "landscape", record)


def _experiment_config(options: dict) -> ExperimentConfig:
    kind = options["kind"]
    systematic = _load_params(options["systematic"]) if options.get("systematic") else None
    common = dict(
        n_s=options.get("samples", 100000),
        trials=options["trials"],
        seed=options["seed"],
        clip=options["clip"],
        workers=options["workers"],
        systematic=systematic,
    )
    if kind == "concentration":
        return ExperimentConfig(
            kind,
            phis=options["phi"],
            concentrations=options["c"],
            theta0=options["theta0"],
            alpha=options.get("alpha", ExperimentConfig.alpha),
            path_l=options.get("path_l", ExperimentConfig.path_l),
            **common,
        )
    extra = {}
    if kind == "sample_size":
        sizes = options["sizes"]
        if any(not float(s).is_integer() for s in sizes):
            raise ConfigError("sizes must be whole numbers")
        extra["sizes"] = [int(s) for s in sizes]
    if kind == "depolarization":
        extra["lambdas"] = options["lambdas"]
    return ExperimentConfig(kind, thetas=options["theta"], phis=options["phi"], **extra, **common)


def cmd_estimate(options: dict) -> int:
    config = _experiment_config(options)
    kind = config.kind
    result = run_experiment(config)
    out = _out_dir(options)
    if kind == "concentration":
        header = ["c_true", "mean_estimate", "mean_error", "failure_rate", "crb_bound", "std_estimate", "theta", "trials", "n_success"]
        rows = [
            [r.c_true, r.c_hat_mean, r.dc_mean, r.point.failure_rate, r.dc_bound, r.c_hat_std, r.theta, r.point.trials, r.point.n_success]
            for r in result
        ]
        points = [r.point for r in result]
        clipped = []
    else:
        var = {"theta_sweep": "theta", "phi_sweep": "phi", "sample_size": "n_s", "depolarization": "phi"}[kind]
        header = [var, "mean_estimate", "mean_error", "failure_rate", "crb_bound",
                  "std_estimate", "ideal_error", "trials", "n_success", "n_negative", "n_other_failures"]
        if kind == "depolarization":
            header.insert(1, "lambda")
        rows = []
        for r in result:
            param = int(r.param) if kind == "sample_size" else r.param
            row = [param, r.mean_estimate, r.mean_error, r.failure_rate, r.crb_bound,
                   r.std_estimate, r.ideal_error, r.trials, r.n_success, r.n_negative, r.n_other_failures]
            if kind == "depolarization":
                row.insert(1, r.lam)
            rows.append(row)
        points = list(result)
        clipped = [float(c) for c in result.clipped]
    _write_csv(out / f"{kind}.csv", header, rows)
    failures = {
        "trials": sum(p.trials for p in points),
        "successes": sum(p.n_success for p in points),
        "negative_counts": sum(p.n_negative for p in points),
        "other_failures": sum(p.n_other_failures for p in points),
        "clipped_points": clipped,
    }
    record = _record(options, {"csv": f"{kind}.csv", "columns": header, "rows": len(rows)}, failures, kind)
    return _finish(out, kind, record)


def cmd_calibrate(options: dict) -> int:
    has_data, has_synth = "data" in options, "synthetic" in options
    if has_data == has_synth:
        raise ConfigError("calibrate needs exactly one of --data or --synthetic")
    out = _out_dir(options)
    if has_data:
        try:
            data = FrequencyDataset.from_csv(options["data"])
        except OSError as exc:
            raise ConfigError(f"cannot read {options['data']}: {exc}") from None
    else:
        truth = _load_params(options["synthetic"])
        if not truth.feasible:
            raise ConfigError("synthetic parameters violate the POVM constraints")
        lattice = build_lattice_prior(*options["lattice"])
        counts = options["counts"]
        if counts <= 0:
            data = synthetic_dataset(truth, lattice)
        else:
            if not float(counts).is_integer():
                raise ConfigError("--counts must be a whole number")
            data = synthetic_dataset(truth, lattice, counts, np.random.default_rng(options["seed"]))
        data.to_csv(out / "frequencies.csv")
    init = _load_params(options["init"])
    fixed = tuple(options.get("fix", DEFAULT_FIXED))
    unknown = set(fixed) - set(PARAM_NAMES)
    if unknown:
        raise ConfigError(f"unknown parameters in --fix: {sorted(unknown)}")
    if not init.feasible:
        raise ConfigError("initial parameters violate the POVM constraints")
    fit = fit_parameters(
        data, init, fixed=fixed, n_starts=options["starts"], seed=options["fit_seed"], max_iter=options["max_iter"]
    )
    body = {k: _jsonable(v) for k, v in fit.to_dict().items()}
    outputs = {"json": "calibration.json", "fit": body, "cells": data.n_cells}
    if has_synth:
        outputs["dataset_csv"] = "frequencies.csv"
    record = _record(options, outputs, {"converged": fit.converged}, "calibration")
    record["parameters"] = body["parameters"]
    record["objective"] = body["objective"]
    code = _finish(out, "calibration", record)
    if not fit.converged:
        print(f"calibration did not converge (projected gradient {fit.projected_gradient_norm:.3g})", file=sys.stderr)
        return EXIT_NONCONVERGED
    return code


def _finish(out: Path, stem: str, record: dict) -> int:
    _write_json(out / f"{stem}.json", record)
    return EXIT_OK


COMMANDS = {"landscape": cmd_landscape, "estimate": cmd_estimate, "calibrate": cmd_calibrate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    start = time.perf_counter()
    try:
        options = resolve_options(args)
        code = COMMANDS[args.command](options)
    except DatasetFormatError as exc:
        print(f"coqm: invalid dataset: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PositivityError as exc:
        print(f"coqm: positivity error: {exc} (use --clip to drop such points)", file=sys.stderr)
        return EXIT_POSITIVITY
    except ValueError as exc:
        print(f"coqm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    stem = {"estimate": options.get("kind"), "calibrate": "calibration"}.get(args.command, args.command)
    timing = {"seconds": round(time.perf_counter() - start, 3)}
    _write_json(Path(options["out_dir"]) / f"{stem}.timing.json", timing)
    return code


if __name__ == "__main__":
    sys.exit(main())
