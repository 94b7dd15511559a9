"""Monte-Carlo reconstruction benchmarks over regularization sweeps.

Each configuration (sweep value x SNR) draws Rician noise realizations of a
Gaussian-mixture phantom on the grid, reconstructs them with every requested
method at every regularization value and scores the mean NRMSE of the
coefficients and of the signal at the sample locations.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .metrics import mean_and_se, nrmse
from .noise_model import MmConfig, NoiseSpec, mm_denoise
from .phantom import (
    MEAN_DIFFUSIVITY,
    add_rician_noise,
    crossing_phantom,
    fa_phantom,
    noise_rng,
    oracle_sh_coeffs,
    oracle_spf_coeffs,
    phantom_on_grid,
)
from .sampling import multi_shell_grid, single_shell_grid
from .sph_core import laplace_beltrami_diag, sh_matrix
from .transforms import (
    _multi_design,
    ls_spft_operator,
    ls_sht_operator,
    nsht_operator,
    nspft_operator,
    spf_penalties,
)

SINGLE_METHODS = ("ls-reg", "ls-reg-denoised", "nsht-reg", "nsht-reg-denoised")
MULTI_METHODS = ("ls-reg", "ls-reg-denoised", "nspft-reg", "nspft-reg-denoised")
SWEEP_KINDS = ("crossing_angle", "fa_sweep")
CSV_COLUMNS = (
    "method", "snr", "sweep_kind", "sweep_value", "lambda", "lambda_n",
    "nrmse_coeff_mean", "nrmse_coeff_se", "nrmse_spatial_mean", "nrmse_spatial_se",
    "realizations", "seed",
)


class BenchError(RuntimeError):
    pass


def default_lambda_grid(n: int = 25, lo: float = 1e-9, hi: float = 1.0) -> tuple:
    return (0.0,) + tuple(float(f"{x:.12g}") for x in np.logspace(math.log10(lo), math.log10(hi), n))


def default_sweep(kind: str) -> tuple:
    if kind == "crossing_angle":
        return tuple(float(a) for a in range(0, 91, 15))
    return tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str = "crossing_angle"
    shell_mode: str = "single"
    snrs: tuple = (10.0, 20.0, 30.0)
    realizations: int = 100
    lambda_grid: tuple = field(default_factory=default_lambda_grid)
    lambda_n_grid: tuple = field(default_factory=lambda: default_lambda_grid(10))
    methods: tuple | None = None
    sweep_values: tuple | None = None
    L: int = 8
    b: float = 4000.0
    N: int = 3
    b_max: float = 4000.0
    fa: float = 0.8
    mean_diffusivity: float = MEAN_DIFFUSIVITY
    seed: str = "0"
    estimate_sigma: bool = False
    coils: int = 1
    max_iters: int = 200
    tol: float = 1e-6
    threads: int = 1

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ValueError(f"unknown sweep kind {self.kind!r}")
        if self.shell_mode not in ("single", "multi"):
            raise ValueError(f"unknown shell mode {self.shell_mode!r}")
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")
        if len(self.lambda_grid) == 0 or min(self.lambda_grid) < 0:
            raise ValueError("lambda grid must be non-empty and non-negative")
        if self.shell_mode == "multi" and (len(self.lambda_n_grid) == 0 or min(self.lambda_n_grid) < 0):
            raise ValueError("lambda_n grid must be non-empty and non-negative")
        if not self.snrs or min(self.snrs) <= 0:
            raise ValueError("SNRs must be positive")
        allowed = SINGLE_METHODS if self.shell_mode == "single" else MULTI_METHODS
        bad = [m for m in self.resolved_methods if m not in allowed]
        if bad:
            raise ValueError(f"unknown method(s) {bad} for {self.shell_mode}-shell runs")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def resolved_methods(self) -> tuple:
        if self.methods is not None:
            return tuple(self.methods)
        return SINGLE_METHODS if self.shell_mode == "single" else MULTI_METHODS

    @property
    def resolved_sweep(self) -> tuple:
        return default_sweep(self.kind) if self.sweep_values is None else tuple(self.sweep_values)

    def quick(self) -> "ExperimentSpec":
        return replace(self, realizations=20)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.resolved_methods)
        d["sweep_values"] = list(self.resolved_sweep)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        if "seed" in kw:
            kw["seed"] = str(kw["seed"])
        return cls(**kw)


@dataclass(frozen=True)
class ResultRow:
    method: str
    snr: float
    sweep_kind: str
    sweep_value: float
    lam: float
    lam_n: float
    nrmse_coeff_mean: float
    nrmse_coeff_se: float
    nrmse_spatial_mean: float
    nrmse_spatial_se: float
    realizations: int
    seed: str

    def as_csv(self) -> list:
        return [self.method, repr(float(self.snr)), self.sweep_kind, repr(float(self.sweep_value)),
                repr(float(self.lam)), repr(float(self.lam_n)),
                repr(self.nrmse_coeff_mean), repr(self.nrmse_coeff_se),
                repr(self.nrmse_spatial_mean), repr(self.nrmse_spatial_se),
                str(self.realizations), self.seed]

    @classmethod
    def from_csv(cls, rec: dict) -> "ResultRow":
        return cls(
            rec["method"], float(rec["snr"]), rec["sweep_kind"], float(rec["sweep_value"]),
            float(rec["lambda"]), float(rec["lambda_n"]),
            float(rec["nrmse_coeff_mean"]), float(rec["nrmse_coeff_se"]),
            float(rec["nrmse_spatial_mean"]), float(rec["nrmse_spatial_se"]),
            int(rec["realizations"]), rec["seed"],
        )


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, ResultTable) and self.rows == other.rows

    def sorted(self) -> "ResultTable":
        key = lambda r: (r.method, r.snr, r.sweep_kind, r.sweep_value, r.lam, r.lam_n)
        return ResultTable(sorted(self.rows, key=key))

    def select(self, **crit) -> "ResultTable":
        def ok(r):
            return all(getattr(r, k) == v for k, v in crit.items())
        return ResultTable([r for r in self.rows if ok(r)])

    def best(self, metric: str = "coeff", **crit) -> ResultRow:
        """Row minimizing the mean NRMSE among rows matching ``crit``."""
        sub = self.select(**crit).rows
        if not sub:
            raise KeyError(f"no rows match {crit}")
        attr = f"nrmse_{metric}_mean"
        return min(sub, key=lambda r: getattr(r, attr))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(r.as_csv())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError("CSV header does not match the result schema")
        return cls([ResultRow.from_csv(rec) for rec in reader])

    def to_gnuplot(self) -> str:
        """Long format: one block per (method, snr, sweep value), two blank lines apart."""
        out = []
        groups = {}
        for r in self.sorted().rows:
            groups.setdefault((r.method, r.snr, r.sweep_kind, r.sweep_value), []).append(r)
        for (method, snr, kind, value), rows in groups.items():
            out.append(f"# method={method} snr={snr:g} {kind}={value:g}")
            out.append("# lambda lambda_n nrmse_coeff se nrmse_spatial se")
            for r in rows:
                out.append(f"{r.lam:.6e} {r.lam_n:.6e} {r.nrmse_coeff_mean:.8e} "
                           f"{r.nrmse_coeff_se:.8e} {r.nrmse_spatial_mean:.8e} "
                           f"{r.nrmse_spatial_se:.8e}")
            out.append("\n")
        return "\n".join(out)


def emit_results(table: ResultTable, path, fmt: str = "csv"):
    """Write ``table`` as ``csv``, ``gnuplot`` or ``both`` (``path`` is a stem for both)."""
    path = os.fspath(path)
    written = []
    if fmt not in ("csv", "gnuplot", "both"):
        raise ValueError(f"unknown format {fmt!r}")
    if fmt in ("csv", "both"):
        p = path if fmt == "csv" else path + ".csv"
        with open(p, "w") as fh:
            fh.write(table.to_csv())
        written.append(p)
    if fmt in ("gnuplot", "both"):
        p = path if fmt == "gnuplot" else path + ".dat"
        with open(p, "w") as fh:
            fh.write(table.to_gnuplot())
        written.append(p)
    return written


def read_results(path) -> ResultTable:
    with open(path) as fh:
        return ResultTable.from_csv(fh.read())


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _phantom_for(spec: ExperimentSpec, value: float):
    if spec.kind == "crossing_angle":
        return crossing_phantom(value)
    return fa_phantom(value, spec.mean_diffusivity)


def _noisy(clean, spec: ExperimentSpec, value: float, snr: float, d0: float = 1.0):
    """Realizations as columns; the Gaussian draws are shared across SNRs."""
    key = f"{spec.seed}/{spec.shell_mode}/{spec.kind}/{value!r}"
    cols = [add_rician_noise(clean, d0, snr, noise_rng(key, r)) for r in range(spec.realizations)]
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class _Problem:
    """Linear pieces shared by every configuration of one experiment."""

    forward: np.ndarray
    ops: dict  # (family, lam, lam_n) -> (recon operator, penalty)


def _single_ops(grid, spec: ExperimentSpec) -> _Problem:
    theta, phi = grid.points()
    A = sh_matrix(grid.L, theta, phi)
    lb = laplace_beltrami_diag(grid.L)
    families = {m.split("-")[0] for m in spec.resolved_methods}
    ops = {}
    for lam in spec.lambda_grid:
        if "nsht" in families:
            ops[("nsht", lam, 0.0)] = (nsht_operator(grid, lam), lam * lb)
        if "ls" in families:
            ops[("ls", lam, 0.0)] = (ls_sht_operator(grid, lam=lam), lam * lb)
    return _Problem(A, ops)


def _multi_ops(grid, spec: ExperimentSpec) -> _Problem:
    B = _multi_design(grid)
    families = {m.split("-")[0] for m in spec.resolved_methods}
    ops = {}
    for lam in spec.lambda_grid:
        for lam_n in spec.lambda_n_grid:
            pen = spf_penalties(grid.N, grid.L_max, lam, lam_n)
            if "nspft" in families:
                ops[("nspft", lam, lam_n)] = (nspft_operator(grid, lam, lam_n), pen)
            if "ls" in families:
                ops[("ls", lam, lam_n)] = (ls_spft_operator(grid, lam, lam_n), pen)
    return _Problem(B, ops)


def _score_config(problem: _Problem, truth, clean, spec, value, snr) -> list:
    X = _noisy(clean, spec, value, snr)
    sigma2 = (1.0 / snr) ** 2
    cfg = MmConfig(max_iters=spec.max_iters, tol=spec.tol, estimate_sigma=spec.estimate_sigma)
    wants_mm = any(m.endswith("denoised") for m in spec.resolved_methods)
    noise = None if spec.estimate_sigma or not wants_mm else NoiseSpec(sigma2, spec.coils)
    rows = []
    for method in spec.resolved_methods:
        family = method.split("-")[0]
        denoise = method.endswith("denoised")
        for (fam, lam, lam_n), (T, pen) in problem.ops.items():
            if fam != family:
                continue
            if denoise:
                c = mm_denoise(X, problem.forward, T, pen, noise, cfg, track=False).coeffs
            else:
                c = T @ X
            err_c = nrmse(c, truth)
            err_d = nrmse((problem.forward @ c).real, clean)
            mc, sc = mean_and_se(err_c)
            md, sd = mean_and_se(err_d)
            rows.append(ResultRow(method, float(snr), spec.kind, float(value), float(lam),
                                  float(lam_n), mc, sc, md, sd, spec.realizations, spec.seed))
    return rows


def _run(spec: ExperimentSpec, grid, problem, truth_fn, clean_fn) -> ResultTable:
    work = [(v, s) for v in spec.resolved_sweep for s in spec.snrs]
    cache = {}
    for v in spec.resolved_sweep:
        cache[v] = (truth_fn(v), clean_fn(v))

    def job(item):
        v, s = item
        truth, clean = cache[v]
        try:
            return _score_config(problem, truth, clean, spec, v, s)
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise BenchError(f"{spec.shell_mode}-shell {spec.kind}={v} snr={s}: {exc}") from exc

    if spec.threads > 1:
        with ThreadPoolExecutor(spec.threads) as pool:
            chunks = list(pool.map(job, work))
    else:
        chunks = [job(w) for w in work]
    return ResultTable([r for c in chunks for r in c]).sorted()


def run_single_shell_experiment(spec: ExperimentSpec) -> ResultTable:
    """Single-shell sweep at one b-value; NRMSE of SH coefficients and samples."""
    if spec.shell_mode != "single":
        spec = replace(spec, shell_mode="single")
    grid = single_shell_grid(spec.L)
    problem = _single_ops(grid, spec)
    return _run(
        spec, grid, problem,
        lambda v: oracle_sh_coeffs(_phantom_for(spec, v), spec.b, spec.L).data,
        lambda v: phantom_on_grid(_phantom_for(spec, v), grid, spec.b),
    )


def run_multi_shell_experiment(spec: ExperimentSpec) -> ResultTable:
    """Multi-shell sweep over the ``lambda x lambda_n`` grid; NRMSE of SPF coefficients."""
    if spec.shell_mode != "multi":
        spec = replace(spec, shell_mode="multi")
    grid = multi_shell_grid(spec.N, spec.b_max, spec.fa)
    problem = _multi_ops(grid, spec)
    return _run(
        spec, grid, problem,
        lambda v: oracle_spf_coeffs(_phantom_for(spec, v), grid.radial, grid.N, grid.L_max).data,
        lambda v: phantom_on_grid(_phantom_for(spec, v), grid),
    )


def run_experiment(spec: ExperimentSpec) -> ResultTable:
    if spec.shell_mode == "single":
        return run_single_shell_experiment(spec)
    return run_multi_shell_experiment(spec)
