"""Population-scaling and unilateral-deviation studies around the decentralized strategies."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .meanfield import Equilibrium, class_coefficients, solve_equilibrium
from .model import ScenarioConfig
from .simulate import (KINDS, STREAM_DEVIATION, Deviation, PopulationResult, _philox_normals,
                       sample_brownian, simulate_population)

METRICS = ("sup_mX_err", "sup_mx_err", "cost_gap_J0", "cost_gap_Jl", "cost_gap_Jf")
MIN_REPLICATIONS = 30


def mean_and_se(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float).ravel()
    mean = math.fsum(values) / len(values)
    if len(values) < 2:
        return mean, float("nan")
    var = math.fsum((values - mean) ** 2) / (len(values) - 1)
    return mean, math.sqrt(var / len(values))


def fit_loglog_slope(sizes, estimates, stderrs) -> tuple[float, float]:
    """OLS slope of log(estimate) on log(size); delta-method standard error.

    Returns (nan, nan) when any estimate is non-positive.
    """
    est = np.asarray(estimates, float)
    if np.any(est <= 0) or len(est) < 2:
        return float("nan"), float("nan")
    x = np.log(np.asarray(sizes, float))
    y = np.log(est)
    w = (x - x.mean()) / np.sum((x - x.mean()) ** 2)
    slope = float(w @ y)
    rel = np.asarray(stderrs, float) / est
    return slope, float(np.sqrt(np.sum((w * rel) ** 2)))


def population_metrics(res: PopulationResult) -> dict:
    """Per-replication samples of every scaling metric."""
    gaps = res.cost_gaps()
    return {"sup_mX_err": res.sup_mX_err, "sup_mx_err": res.sup_mx_err,
            "cost_gap_J0": gaps["J0"], "cost_gap_Jl": gaps["Jl"], "cost_gap_Jf": gaps["Jf"]}


def metric_size(metric: str, N_l: int, N_f: int) -> int:
    if metric == "sup_mX_err":
        return N_l
    if metric == "sup_mx_err":
        return N_f
    return min(N_l, N_f)


def _finite_or_none(x):
    return float(x) if math.isfinite(x) else None


@dataclass(frozen=True)
class ScalingStudy:
    populations: tuple
    estimates: dict  # metric -> list of (estimate, stderr) per population
    slopes: dict  # metric -> (slope, stderr)
    replications: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "populations": [list(p) for p in self.populations],
            "replications": self.replications, "seed": self.seed,
            "per_population": [
                {"N_l": nl, "N_f": nf,
                 **{m: {"estimate": self.estimates[m][i][0], "stderr": self.estimates[m][i][1]}
                    for m in METRICS}}
                for i, (nl, nf) in enumerate(self.populations)],
            # undefined slopes (e.g. a gap that is identically zero) become null
            "slopes": {m: {"slope": _finite_or_none(s), "stderr": _finite_or_none(se)}
                       for m, (s, se) in self.slopes.items()},
        }

    def write_csv(self, path, meta: dict | None = None):
        with open(path, "w", newline="") as fh:
            for key, val in (meta or {}).items():
                fh.write(f"# {key}={val}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["N_l", "N_f", "metric", "estimate", "stderr"])
            for m in METRICS:
                for (nl, nf), (est, se) in zip(self.populations, self.estimates[m]):
                    w.writerow([nl, nf, m, f"{est:.17g}", f"{se:.17g}"])

    def write_json(self, path, meta: dict | None = None):
        doc = {"meta": meta or {}, **self.to_dict()}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")


def _check_ladder(populations, replications):
    pops = [tuple(p) for p in populations]
    if len(pops) < 3:
        raise ConfigError("scaling study needs at least three population sizes")
    if any(min(b) <= min(a) for a, b in zip(pops, pops[1:])):
        raise ConfigError("population sizes must be strictly increasing")
    if math.log10(min(pops[-1]) / min(pops[0])) < 1.5 - 1e-9 and \
            math.log10(pops[-1][0] / pops[0][0]) < 1.5 - 1e-9:
        raise ConfigError("population ladder must span at least 1.5 decades")
    if replications < MIN_REPLICATIONS:
        raise ConfigError(f"scaling study needs at least {MIN_REPLICATIONS} replications")
    return pops


def run_scaling_study(config: ScenarioConfig, replications: int | None = None, threads: int = 1,
                      equilibrium: Equilibrium | None = None) -> ScalingStudy:
    """Replicated populations along ``config.populations`` with common random numbers.

    Replication r of every population size draws from the same streams, so agent
    i sees identical noise and initial state at every size containing it.
    """
    reps = config.mc_paths if replications is None else replications
    pops = _check_ladder(config.populations, reps)
    eq = equilibrium or solve_equilibrium(config)
    bundle = sample_brownian(eq.riccati.grid, reps, config.seed)

    def one(pop):
        res = simulate_population(eq.params, eq.gains, eq.mf, pop[0], pop[1], bundle, eq.initial)
        return {m: mean_and_se(v) for m, v in population_metrics(res).items()}

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(one, pops))
    estimates = {m: [r[m] for r in results] for m in METRICS}
    slopes = {}
    for m in METRICS:
        sizes = [metric_size(m, nl, nf) for nl, nf in pops]
        slopes[m] = fit_loglog_slope(sizes, [e for e, _ in estimates[m]], [s for _, s in estimates[m]])
    return ScalingStudy(tuple(pops), estimates, slopes, reps, config.seed)


def deviation_path(seed: int, cls: str, m: int, K: int, scale: float, pieces: int = 10,
                   draw: int = 0) -> np.ndarray:
    """(K+1, m) piecewise-constant Gaussian deviation of the given scale."""
    z = _philox_normals(seed, (draw, KINDS[cls], STREAM_DEVIATION), 0, pieces * m).reshape(pieces, m)
    idx = np.minimum((np.arange(K + 1) * pieces) // K, pieces - 1)
    return scale * z[idx]


def perturbation_gap(config: ScenarioConfig, cls: str, scale: float, replications: int | None = None,
                     agent: int = 0, equilibrium: Equilibrium | None = None, draw: int = 0) -> list[dict]:
    """Cost change of one agent deviating unilaterally, per population size.

    The same noise drives the equilibrium and deviated runs, so scale 0 gives
    exactly zero.
    """
    if scale < 0:
        raise ValueError("deviation scale must be non-negative")
    reps = config.mc_paths if replications is None else replications
    eq = equilibrium or solve_equilibrium(config)
    grid = eq.riccati.grid
    m = class_coefficients(eq.params, cls)[0].shape[1]
    dev = Deviation(cls, agent, deviation_path(config.seed, cls, m, grid.K, scale, draw=draw))
    bundle = sample_brownian(grid, reps, config.seed)
    key = {"major": "J0", "minor": "Jl", "follower": "Jf"}[cls]
    out = []
    for nl, nf in config.populations:
        base = simulate_population(eq.params, eq.gains, eq.mf, nl, nf, bundle, eq.initial)
        moved = simulate_population(eq.params, eq.gains, eq.mf, nl, nf, bundle, eq.initial, dev)
        if cls == "major":
            diff = moved.costs[key] - base.costs[key]
        else:
            diff = moved.costs[key][:, agent] - base.costs[key][:, agent]
        est, se = mean_and_se(diff)
        out.append({"N_l": nl, "N_f": nf, "gap": est, "stderr": se, "min": float(np.min(diff))})
    return out


def empirical_epsilon(config: ScenarioConfig, cls: str, scale: float, deviations: int = 5,
                      replications: int | None = None, equilibrium: Equilibrium | None = None) -> list[dict]:
    """Worst mean cost gain over sampled unilateral deviations, per population size.

    A negative ``worst_gap`` means some sampled deviation paid off on average;
    ``epsilon`` = max(0, -worst_gap) bounds the true epsilon from below only.
    """
    if deviations < 1:
        raise ValueError("need at least one deviation")
    eq = equilibrium or solve_equilibrium(config)
    per_draw = [perturbation_gap(config, cls, scale, replications, equilibrium=eq, draw=d)
                for d in range(deviations)]
    out = []
    for i, (nl, nf) in enumerate(config.populations):
        worst = min((g[i] for g in per_draw), key=lambda g: g["gap"])
        out.append({"N_l": nl, "N_f": nf, "worst_gap": worst["gap"], "stderr": worst["stderr"],
                    "epsilon": max(0.0, -worst["gap"])})
    return out
