"""Command-line entry point: ``qspace {design,simulate,reconstruct,bench,condition}``.

Every command accepts ``--config FILE`` with a JSON object whose keys are
the long option names (dashes or underscores); explicit flags win over the
file. Exit status is 0 on success, 1 when a computation fails and 2 for
usage or validation errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as _bench
from .noise_model import MmConfig, NoiseSpec, mm_denoise_multi, mm_denoise_single
from .phantom import (
    GmmPhantom,
    add_rician_noise,
    crossing_phantom,
    fa_phantom,
    noise_rng,
    phantom_on_grid,
)
from .sampling import (
    MultiShellGrid,
    SingleShellGrid,
    grid_to_json,
    load_grid,
    multi_shell_grid,
    single_shell_grid,
    write_fsl,
    write_mrtrix,
)
from .transforms import (
    coeffs_to_bytes,
    coeffs_to_json,
    condition_report,
    ls_spft,
    ls_sht,
    nsht,
    nspft,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


# Defaults live here rather than in argparse so that config files can tell
# "flag given" apart from "flag left at its default".
DEFAULTS = {
    "design": {"mode": "single", "L": 8, "N": 3, "bmax": 4000.0, "fa": 0.8, "b": None,
               "format": "json", "out": None},
    "simulate": {"grid": None, "phantom": None, "crossing_angle": None, "fa": None, "b": None,
                 "snr": None, "seed": 0, "experiment": "simulate", "out": None},
    "reconstruct": {"grid": None, "signal": None, "method": None, "lam": 0.0, "lambda_n": 0.0,
                    "denoise": False, "sigma2": None, "estimate_sigma": False, "coils": 1,
                    "max_iters": 200, "tol": 1e-6, "nonneg": "clamp", "out": None,
                    "diagnostics": None},
    "bench": {"spec": None, "quick": False, "threads": 1, "out": None, "format": "csv"},
    "condition": {"grid": None, "out": None},
}
REQUIRED = {
    "simulate": ("grid", "out"),
    "reconstruct": ("grid", "signal", "method", "out"),
    "bench": ("spec", "out"),
    "condition": ("grid",),
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qspace", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=None)
        sp.add_argument("--config", help="JSON file of option values")
        return sp

    d = add("design", "build a sampling scheme")
    d.add_argument("--mode", choices=("single", "multi"))
    d.add_argument("--L", type=int, dest="L", help="even band-limit (single shell)")
    d.add_argument("--N", type=int, dest="N", help="radial order (multi shell)")
    d.add_argument("--bmax", type=float)
    d.add_argument("--fa", type=float)
    d.add_argument("--b", type=float, help="b-value written for a single shell")
    d.add_argument("--format", choices=("json", "bvec", "mrtrix"))
    d.add_argument("--out", help="output path (stem for bvec)")

    s = add("simulate", "sample a phantom on a grid, optionally with Rician noise")
    s.add_argument("--grid")
    s.add_argument("--phantom", help="phantom JSON")
    s.add_argument("--crossing-angle", type=float, dest="crossing_angle")
    s.add_argument("--fa", type=float)
    s.add_argument("--b", type=float, help="b-value for a single-shell grid")
    s.add_argument("--snr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--experiment")
    s.add_argument("--out", help=".csv or flat float64 binary")

    r = add("reconstruct", "compute SH / SPF coefficients from samples")
    r.add_argument("--grid")
    r.add_argument("--signal")
    r.add_argument("--method", choices=("nsht", "ls", "nspft", "ls-spf"))
    r.add_argument("--lambda", type=float, dest="lam")
    r.add_argument("--lambda-n", type=float, dest="lambda_n")
    r.add_argument("--denoise", action="store_true", default=None)
    r.add_argument("--sigma2", type=float)
    r.add_argument("--estimate-sigma", action="store_true", default=None, dest="estimate_sigma")
    r.add_argument("--coils", type=int)
    r.add_argument("--max-iters", type=int, dest="max_iters")
    r.add_argument("--tol", type=float)
    r.add_argument("--nonneg", choices=("clamp", "qp", "none"))
    r.add_argument("--out", help=".json or binary coefficient file")
    r.add_argument("--diagnostics", help="CSV of the denoising iterations")

    b = add("bench", "run a Monte-Carlo benchmark")
    b.add_argument("--spec", help="experiment JSON")
    b.add_argument("--quick", action="store_true", default=None)
    b.add_argument("--threads", type=int)
    b.add_argument("--out", help="output path (stem for --format both)")
    b.add_argument("--format", choices=("csv", "gnuplot", "both"))

    c = add("condition", "report P_m and least-squares condition numbers")
    c.add_argument("--grid")
    c.add_argument("--out")
    return p


def resolve_options(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, the optional JSON config and explicit flags."""
    opts = dict(DEFAULTS[command])
    if ns.config:
        try:
            cfg = json.loads(Path(ns.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        aliases = {"lambda": "lam", "lambda-n": "lambda_n"}
        for key, val in cfg.items():
            k = aliases.get(key, key.replace("-", "_"))
            if k not in opts:
                raise UsageError(f"unknown config key {key!r} for {command}")
            opts[k] = val
    for key in opts:
        val = getattr(ns, key, None)
        if val is not None:
            opts[key] = val
    missing = [k for k in REQUIRED.get(command, ()) if opts.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) {', '.join(missing)}")
    return opts


# ---------------------------------------------------------------------------
# Signal I/O
# ---------------------------------------------------------------------------


def _sample_coords(grid):
    if isinstance(grid, MultiShellGrid):
        return grid.points()
    theta, phi = grid.points()
    return theta, phi, np.zeros_like(theta)


def write_signal(path, grid, values, q=None):
    """CSV (index, theta, phi, q, value) or flat little-endian float64."""
    path = Path(path)
    values = np.asarray(values, dtype=float)
    if path.suffix.lower() == ".csv":
        theta, phi, qq = _sample_coords(grid)
        if q is not None:
            qq = np.full_like(theta, q)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "theta", "phi", "q", "value"])
            for i, row in enumerate(zip(theta, phi, qq, values)):
                w.writerow([i] + [repr(float(x)) for x in row])
    else:
        values.astype("<f8").tofile(path)


def read_signal(path, n_expected=None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"signal file not found: {path}")
    if path.suffix.lower() == ".csv":
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        if rows and "value" not in rows[0]:
            raise UsageError("signal CSV needs a 'value' column")
        rows.sort(key=lambda r: int(r["index"]))
        values = np.array([float(r["value"]) for r in rows])
    else:
        values = np.fromfile(path, dtype="<f8")
    if n_expected is not None and len(values) != n_expected:
        raise UsageError(f"signal has {len(values)} samples, grid expects {n_expected}")
    return values


def _load_grid(path):
    if not Path(path).exists():
        raise UsageError(f"grid file not found: {path}")
    try:
        return load_grid(path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"malformed grid file {path}: {exc}") from exc


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_design(o) -> int:
    if o["mode"] == "single":
        if o["L"] is None or o["L"] < 0 or o["L"] % 2:
            raise UsageError(f"L must be a non-negative even integer (got {o['L']})")
        grid = single_shell_grid(int(o["L"]))
    else:
        grid = multi_shell_grid(int(o["N"]), float(o["bmax"]), float(o["fa"]))
    out = o["out"]
    if o["format"] == "json":
        text = grid_to_json(grid)
        if out:
            Path(out).write_text(text)
        else:
            sys.stdout.write(text + "\n")
    else:
        if not out:
            raise UsageError(f"--out is required for format {o['format']}")
        if o["format"] == "bvec":
            write_fsl(grid, out + ".bvec", out + ".bval", o["b"])
        else:
            write_mrtrix(grid, out, o["b"])
    print(f"{grid.n_samples} samples", file=sys.stderr)
    return EXIT_OK


def _phantom_from(o) -> GmmPhantom:
    given = [k for k in ("phantom", "crossing_angle", "fa") if o[k] is not None]
    if len(given) != 1:
        raise UsageError("give exactly one of --phantom, --crossing-angle, --fa")
    if o["phantom"] is not None:
        spec = o["phantom"]
        if isinstance(spec, str):
            if not Path(spec).exists():
                raise UsageError(f"phantom file not found: {spec}")
            spec = json.loads(Path(spec).read_text())
        return GmmPhantom.from_dict(spec)
    if o["crossing_angle"] is not None:
        return crossing_phantom(float(o["crossing_angle"]))
    return fa_phantom(float(o["fa"]))


def cmd_simulate(o) -> int:
    grid = _load_grid(o["grid"])
    phantom = _phantom_from(o)
    if isinstance(grid, SingleShellGrid):
        if o["b"] is None:
            raise UsageError("--b is required for a single-shell grid")
        values = phantom_on_grid(phantom, grid, float(o["b"]))
        q = math.sqrt(float(o["b"]))
    else:
        values = phantom_on_grid(phantom, grid)
        q = None
    if o["snr"] is not None:
        rng = noise_rng(o["experiment"], int(o["seed"]))
        values = add_rician_noise(values, phantom.d0, float(o["snr"]), rng)
    write_signal(o["out"], grid, values, q)
    return EXIT_OK


def cmd_reconstruct(o) -> int:
    grid = _load_grid(o["grid"])
    method = o["method"]
    single = isinstance(grid, SingleShellGrid)
    if single != (method in ("nsht", "ls")):
        raise UsageError(f"method {method} does not match a {'single' if single else 'multi'}-shell grid")
    d = read_signal(o["signal"], grid.n_samples)
    lam, lam_n = float(o["lam"]), float(o["lambda_n"])
    if lam < 0 or lam_n < 0:
        raise UsageError("regularization parameters must be >= 0")
    diag = None
    if o["denoise"]:
        if o["sigma2"] is None and not o["estimate_sigma"]:
            raise UsageError("--denoise needs --sigma2 or --estimate-sigma")
        coils = int(o["coils"])
        spec = NoiseSpec(float(o["sigma2"]), coils) if o["sigma2"] is not None else None
        nonneg = None if o["nonneg"] == "none" else o["nonneg"]
        cfg = MmConfig(int(o["max_iters"]), float(o["tol"]), bool(o["estimate_sigma"]), nonneg)
        if single:
            res = mm_denoise_single(d, grid, lam, spec, cfg, method=method, coils=coils)
        else:
            inner = "nspft" if method == "nspft" else "ls"
            res = mm_denoise_multi(d, grid, lam, lam_n, spec, cfg, method=inner, coils=coils)
        coeffs, diag = res.coeffs, res
        if not res.converged.all():
            print(f"warning: not converged after {cfg.max_iters} iterations", file=sys.stderr)
    elif method == "nsht":
        coeffs = nsht(d, grid, lam)
    elif method == "ls":
        coeffs = ls_sht(d, grid, lam=lam)
    elif method == "nspft":
        coeffs = nspft(d, grid, lam, lam_n)
    else:
        coeffs = ls_spft(d, grid, lam, lam_n)
    out = Path(o["out"])
    if out.suffix.lower() == ".json":
        out.write_text(coeffs_to_json(coeffs))
    else:
        out.write_bytes(coeffs_to_bytes(coeffs))
    if o["diagnostics"]:
        if diag is None:
            raise UsageError("--diagnostics requires --denoise")
        diag.write_diagnostics(o["diagnostics"])
    return EXIT_OK


def cmd_bench(o) -> int:
    path = Path(o["spec"])
    if not path.exists():
        raise UsageError(f"experiment spec not found: {path}")
    try:
        spec = _bench.ExperimentSpec.from_dict(json.loads(path.read_text()))
    except (TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad experiment spec: {exc}") from exc
    if o["quick"]:
        spec = spec.quick()
    if o["threads"]:
        spec = replace(spec, threads=int(o["threads"]))
    table = _bench.run_experiment(spec)
    for p in _bench.emit_results(table, o["out"], o["format"]):
        print(p, file=sys.stderr)
    return EXIT_OK


def cmd_condition(o) -> int:
    grid = _load_grid(o["grid"])
    text = json.dumps(_to_jsonable(condition_report(grid)), indent=2)
    if o["out"]:
        Path(o["out"]).write_text(text)
    else:
        sys.stdout.write(text + "\n")
    return EXIT_OK


COMMANDS = {
    "design": cmd_design,
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "bench": cmd_bench,
    "condition": cmd_condition,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = resolve_options(ns.command, ns)
        return COMMANDS[ns.command](opts)
    except (np.linalg.LinAlgError, _bench.BenchError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ValueError, KeyError, OSError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
