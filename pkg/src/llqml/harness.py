"""Monte-Carlo experiment driver: config, replicate sweep, aggregation and report files."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np

from .errors import ConfigError, LLQMLError
from .models import BUILTIN_NAMES, ObservationSeries, builtin
from .moments import Adaptive
from .qml import OptimizerOptions, Variant, estimate
from .simulate import PathGrid, RngStream, simulate_paths, subsample

log = logging.getLogger(__name__)

ESTIMATE_COLUMNS = [
    "example", "variant", "beta", "h_or_tol", "delta", "T", "replicate",
    "parameter", "estimate", "error_vs_exact", "seed", "converged",
]
SUMMARY_COLUMNS = [
    "example", "variant", "beta", "h_or_tol", "delta", "T", "parameter", "n", "n_failed",
    "true", "mean", "sd", "q05", "q95", "min", "max", "bias",
    "error_mean", "error_sd", "error_q05", "error_q95",
]
STEP_COLUMNS = [
    "example", "variant", "delta", "T", "k", "t_k",
    "mean_accepted", "q05", "q95", "mean_failed",
]
HISTOGRAM_COLUMNS = ["example", "variant", "delta", "T", "parameter", "bin_lo", "bin_hi", "count"]

# substream ids inside a replicate's RngStream
PATH_SUBSTREAM = 0
INIT_SUBSTREAM = 1


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class VariantConfig:
    """One estimator in a sweep.

    The uniform sub-step is given either absolutely (``h``) or as a divisor of
    the sampling period (``h_div``, so ``h = delta / h_div``).
    """

    kind: str
    beta: int = 1
    h: Optional[float] = None
    h_div: Optional[int] = None
    tol: Optional[tuple[float, float, float, float]] = None
    name: Optional[str] = None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind in ("exact", "conventional"):
            return self.kind if self.beta == 1 else f"{self.kind}_b{self.beta}"
        if self.kind == "uniform":
            if self.h_div is not None:
                return f"order{self.beta}_uniform_d{self.h_div}"
            return f"order{self.beta}_uniform_h{self.h}"
        return f"order{self.beta}_adaptive"

    def h_or_tol(self, delta: float) -> str:
        if self.kind == "uniform":
            return "%.17g" % self.step(delta)
        if self.kind == "adaptive":
            return "/".join("%.17g" % v for v in self.tolerances())
        if self.kind == "conventional":
            return "%.17g" % delta
        return ""

    def step(self, delta: float) -> float:
        return self.h if self.h is not None else delta / self.h_div

    def tolerances(self) -> tuple[float, ...]:
        tol = Adaptive() if self.tol is None else Adaptive(*self.tol)
        return (tol.rtol_y, tol.rtol_P, tol.atol_y, tol.atol_P)

    def variant(self, delta: float) -> Variant:
        if self.kind == "uniform":
            return Variant("uniform", h=self.step(delta), beta=self.beta)
        if self.kind == "adaptive":
            return Variant("adaptive", tol=Adaptive(*self.tolerances()), beta=self.beta)
        return Variant(self.kind, beta=self.beta)


@dataclass(frozen=True)
class ExperimentConfig:
    example: str
    replicates: int = 20
    seed: int = 0
    deltas: tuple[float, ...] = (1.0, 0.1)
    Ts: tuple[float, ...] = (10.0,)
    variants: tuple[VariantConfig, ...] = (VariantConfig("conventional"),)
    dt: float = 1e-3
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    out: str = "results"
    threads: int = 1
    histogram_bins: int = 10

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("invalid experiment config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        bad = []
        if self.example not in BUILTIN_NAMES:
            bad.append(f"example: unknown model {self.example!r}")
        if not (isinstance(self.replicates, int) and self.replicates >= 1):
            bad.append("replicates: must be an integer >= 1")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2**64):
            bad.append("seed: must be an unsigned 64-bit integer")
        n_before = len(bad)
        if not (isinstance(self.dt, (int, float)) and self.dt > 0):
            bad.append("dt: must be positive")
        if not self.deltas or any(not d > 0 for d in self.deltas):
            bad.append("deltas: must be a non-empty list of positive numbers")
        if not self.Ts or any(not T > 0 for T in self.Ts):
            bad.append("Ts: must be a non-empty list of positive numbers")
        if len(bad) == n_before:
            for delta in self.deltas:
                if not _is_multiple(delta, self.dt):
                    bad.append(f"deltas: {delta} is not a multiple of dt {self.dt}")
                for T in self.Ts:
                    if not _is_multiple(T, delta) or round(T / delta) < 2:
                        bad.append(f"Ts: T={T} is not a multiple (>= 2) of delta={delta}")
        if not self.variants:
            bad.append("variants: at least one variant is required")
        labels = [v.label for v in self.variants]
        if len(set(labels)) != len(labels):
            bad.append("variants: labels must be unique")
        for i, v in enumerate(self.variants):
            bad.extend(f"variants[{i}].{msg}" for msg in _variant_problems(v))
        if not (isinstance(self.threads, int) and self.threads >= 1):
            bad.append("threads: must be an integer >= 1")
        if not (isinstance(self.histogram_bins, int) and self.histogram_bins >= 1):
            bad.append("histogram_bins: must be an integer >= 1")
        return bad

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deltas"] = list(self.deltas)
        d["Ts"] = list(self.Ts)
        d["variants"] = [
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in var.items() if v is not None}
            for var in d["variants"]
        ]
        return d


def _is_multiple(a: float, b: float) -> bool:
    n = round(a / b)
    return n >= 1 and abs(n * b - a) <= 1e-9 * a


def _variant_problems(v: VariantConfig) -> list[str]:
    bad = []
    if v.kind not in ("exact", "conventional", "uniform", "adaptive"):
        bad.append(f"kind: unknown variant {v.kind!r}")
    if v.beta not in (1, 2):
        bad.append("beta: must be 1 or 2")
    if v.kind == "uniform":
        if (v.h is None) == (v.h_div is None):
            bad.append("h/h_div: uniform needs exactly one of them")
        elif v.h is not None and not v.h > 0:
            bad.append("h: must be positive")
        elif v.h_div is not None and not (isinstance(v.h_div, int) and v.h_div >= 1):
            bad.append("h_div: must be an integer >= 1")
    elif v.h is not None or v.h_div is not None:
        bad.append("h/h_div: only valid for uniform variants")
    if v.tol is not None:
        if v.kind != "adaptive":
            bad.append("tol: only valid for adaptive variants")
        elif len(v.tol) != 4 or any(not t > 0 for t in v.tol):
            bad.append("tol: must be four positive numbers (rtol_y, rtol_P, atol_y, atol_P)")
    return bad


_TOP_KEYS = {f for f in ExperimentConfig.__dataclass_fields__}
_VARIANT_KEYS = {f for f in VariantConfig.__dataclass_fields__}
_OPTIMIZER_KEYS = {f for f in OptimizerOptions.__dataclass_fields__}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from plain data; unknown or mistyped keys raise ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    bad = [f"{k}: unknown key" for k in raw if k not in _TOP_KEYS]
    if "example" not in raw:
        bad.append("example: required")
    if not isinstance(raw.get("variants", []), list):
        bad.append("variants: must be a list")
        raw = {k: v for k, v in raw.items() if k != "variants"}
    variants = []
    for i, v in enumerate(raw.get("variants", [{"kind": "conventional"}])):
        if not isinstance(v, dict):
            bad.append(f"variants[{i}]: must be a mapping")
            continue
        bad.extend(f"variants[{i}].{k}: unknown key" for k in v if k not in _VARIANT_KEYS)
        if "kind" not in v:
            bad.append(f"variants[{i}].kind: required")
            continue
        v = {k: val for k, val in v.items() if k in _VARIANT_KEYS}
        if v.get("tol") is not None:
            v["tol"] = tuple(v["tol"])
        variants.append(VariantConfig(**v))
    opt = raw.get("optimizer", {})
    if not isinstance(opt, dict):
        bad.append("optimizer: must be a mapping")
        opt = {}
    bad.extend(f"optimizer.{k}: unknown key" for k in opt if k not in _OPTIMIZER_KEYS)
    if "example" not in raw:
        raise ConfigError("invalid experiment config: " + "; ".join(bad))
    kwargs = {k: v for k, v in raw.items() if k in _TOP_KEYS}
    kwargs["variants"] = tuple(variants)
    kwargs["optimizer"] = OptimizerOptions(**{k: v for k, v in opt.items() if k in _OPTIMIZER_KEYS})
    try:
        for key in ("deltas", "Ts"):
            if key in kwargs:
                kwargs[key] = tuple(float(x) for x in kwargs[key])
    except (TypeError, ValueError):
        bad.append(f"{key}: must be a list of numbers")
        kwargs.pop(key)
    try:
        config = ExperimentConfig(**kwargs)
    except ConfigError as exc:
        bad.extend(str(exc).split(": ", 1)[1].split("; "))
    except TypeError as exc:
        bad.append(str(exc))
    if bad:
        raise ConfigError("invalid experiment config: " + "; ".join(bad))
    return config


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# running


@dataclass
class Report:
    """Row tables mirroring the emitted files, plus run metadata."""

    meta: dict = field(default_factory=dict)
    estimates: list[dict] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    histograms: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta, "estimates": self.estimates, "summary": self.summary,
            "steps": self.steps, "histograms": self.histograms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(**{k: d[k] for k in ("meta", "estimates", "summary", "steps", "histograms")})


def initial_theta(theta0, seed: int, replicate: int) -> np.ndarray:
    """Coordinatewise uniform [0.5, 1.5] rescaling of the true parameter."""
    gen = RngStream(seed, replicate).generator(INIT_SUBSTREAM)
    return np.asarray(theta0, dtype=float) * gen.uniform(0.5, 1.5, size=len(theta0))


def _fit(task):
    example, values, times, vc, delta, theta_init, opts = task
    model = builtin(example)
    data = ObservationSeries(times, values)
    try:
        res = estimate(model, data, vc.variant(delta), theta_init, opts)
    except (LLQMLError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    return res, None


def _cells(config):
    return [(delta, T) for delta in config.deltas for T in config.Ts]


def run_experiment(config: ExperimentConfig, threads: Optional[int] = None) -> Report:
    """Simulate, fit every variant on every (delta, T) cell, and aggregate.

    A replicate that fails in a cell (path blow-up, or any variant failing to
    fit) is excluded from that cell for every variant and counted.
    """
    threads = config.threads if threads is None else threads
    model = builtin(config.example)
    R = config.replicates
    cells = _cells(config)
    length = max(T for _, T in cells)
    grid = PathGrid.spanning(model.t0, config.dt, length)
    streams = [RngStream(config.seed, r) for r in range(R)]
    log.info("simulating %d paths of %d steps", R, grid.n_steps)
    paths, alive = simulate_paths(model, model.theta0, grid, streams)
    inits = [initial_theta(model.theta0, config.seed, r) for r in range(R)]

    tasks, keys = [], []
    failures = []
    for r in range(R):
        if not alive[r]:
            failures.append({"replicate": r, "delta": None, "T": None, "variant": None,
                             "reason": "SimulationBlowup"})
            continue
        for delta, T in cells:
            obs = subsample(paths[r], grid, model.t0, delta, T)
            for vi, vc in enumerate(config.variants):
                tasks.append((config.example, obs.values, obs.times, vc, delta, inits[r],
                              config.optimizer))
                keys.append((r, delta, T, vi))

    log.info("running %d fits on %d worker(s)", len(tasks), threads)
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_fit, tasks, chunksize=1))
    else:
        outcomes = [_fit(t) for t in tasks]

    results: dict[tuple, Any] = {}
    for key, (res, err) in zip(keys, outcomes):
        results[key] = res
        if err is not None:
            r, delta, T, vi = key
            failures.append({"replicate": r, "delta": delta, "T": T,
                             "variant": config.variants[vi].label, "reason": err})
    return _aggregate(config, model, grid, alive, results, failures)


def _ok_replicates(config, alive, results, delta, T):
    nv = len(config.variants)
    return [
        r for r in range(config.replicates)
        if alive[r] and all(results.get((r, delta, T, vi)) is not None for vi in range(nv))
    ]


def _stats(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return dict(mean=None, sd=None, q05=None, q95=None, min=None, max=None)
    return dict(
        mean=float(np.mean(x)),
        sd=float(np.std(x, ddof=1)) if x.size > 1 else None,
        q05=float(np.quantile(x, 0.05)),
        q95=float(np.quantile(x, 0.95)),
        min=float(np.min(x)),
        max=float(np.max(x)),
    )


def _aggregate(config, model, grid, alive, results, failures) -> Report:
    names = list(model.param_names)
    exact_idx = next((i for i, v in enumerate(config.variants) if v.kind == "exact"), None)
    # (name, index, squared?)
    reported = [(n, i, False) for i, n in enumerate(names)]
    reported += [(f"{n}^2", names.index(n), True) for n in model.variance_params]

    estimates, summary, steps, histograms = [], [], [], []
    for delta, T in _cells(config):
        ok = _ok_replicates(config, alive, results, delta, T)
        n_failed = config.replicates - len(ok)
        for vi, vc in enumerate(config.variants):
            label = vc.label
            h_or_tol = vc.h_or_tol(delta)
            theta = np.array([results[(r, delta, T, vi)].theta for r in ok]).reshape(len(ok), -1)
            exact = None
            if exact_idx is not None and vi != exact_idx:
                exact = np.array([results[(r, delta, T, exact_idx)].theta for r in ok])
                exact = exact.reshape(len(ok), -1)
            for j, r in enumerate(ok):
                res = results[(r, delta, T, vi)]
                for i, n in enumerate(names):
                    estimates.append({
                        "example": config.example, "variant": label, "beta": vc.beta,
                        "h_or_tol": h_or_tol, "delta": delta, "T": T, "replicate": r,
                        "parameter": n, "estimate": float(theta[j, i]),
                        "error_vs_exact": (None if exact is None
                                           else float(abs(theta[j, i] - exact[j, i]))),
                        "seed": config.seed, "converged": bool(res.converged),
                    })
            for n, i, squared in reported:
                vals = theta[:, i] ** 2 if squared else theta[:, i]
                true = float(model.theta0[i] ** 2 if squared else model.theta0[i])
                st = _stats(vals)
                row = {
                    "example": config.example, "variant": label, "beta": vc.beta,
                    "h_or_tol": h_or_tol, "delta": delta, "T": T, "parameter": n,
                    "n": len(ok), "n_failed": n_failed, "true": true, **st,
                    "bias": None if st["mean"] is None else true - st["mean"],
                }
                if exact is not None:
                    ex = exact[:, i] ** 2 if squared else exact[:, i]
                    err = _stats(np.abs(vals - ex))
                    row.update({f"error_{k}": err[k] for k in ("mean", "sd", "q05", "q95")})
                else:
                    row.update({f"error_{k}": None for k in ("mean", "sd", "q05", "q95")})
                summary.append(row)
                histograms.extend(_histogram(config, label, delta, T, n, vals))
            if vc.kind == "adaptive" and ok:
                acc = np.array([results[(r, delta, T, vi)].accepted for r in ok], dtype=float)
                fail = np.array([results[(r, delta, T, vi)].failed for r in ok], dtype=float)
                times = model.t0 + delta * np.arange(1, acc.shape[1] + 1)
                for k in range(acc.shape[1]):
                    steps.append({
                        "example": config.example, "variant": label, "delta": delta, "T": T,
                        "k": k + 1, "t_k": float(times[k]),
                        "mean_accepted": float(acc[:, k].mean()),
                        "q05": float(np.quantile(acc[:, k], 0.05)),
                        "q95": float(np.quantile(acc[:, k], 0.95)),
                        "mean_failed": float(fail[:, k].mean()),
                    })

    estimates.sort(key=lambda e: (e["replicate"], e["variant"], e["parameter"], e["delta"], e["T"]))
    meta = {
        "config": config.to_dict(),
        "param_names": names,
        "theta0": [float(v) for v in model.theta0],
        "grid": {"t0": grid.t0, "dt": grid.dt, "n_steps": grid.n_steps},
        "failures": failures,
    }
    return Report(meta, estimates, summary, steps, histograms)


def _histogram(config, label, delta, T, name, vals):
    if vals.size == 0:
        return []
    counts, edges = np.histogram(vals, bins=config.histogram_bins)
    return [
        {"example": config.example, "variant": label, "delta": delta, "T": T, "parameter": name,
         "bin_lo": float(edges[b]), "bin_hi": float(edges[b + 1]), "count": int(counts[b])}
        for b in range(len(counts))
    ]


# ---------------------------------------------------------------------------
# output

_TABLES = {
    "estimates": ESTIMATE_COLUMNS,
    "summary": SUMMARY_COLUMNS,
    "steps": STEP_COLUMNS,
    "histograms": HISTOGRAM_COLUMNS,
}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def emit_report(report: Report, fmt: str = "csv", out_dir=".") -> list[str]:
    """Write the report as four CSV files or one JSON document; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    if fmt == "json":
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as fh:
            json.dump(report.to_dict(), fh, indent=1, allow_nan=False)
            fh.write("\n")
        return [path]
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    paths = []
    for table, columns in _TABLES.items():
        path = os.path.join(out_dir, f"{table}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in getattr(report, table):
                w.writerow([_cell(row[c]) for c in columns])
        paths.append(path)
    return paths


def load_report(path) -> Report:
    """Read back a JSON report written by :func:`emit_report`."""
    with open(path) as fh:
        return Report.from_dict(json.load(fh))
