"""Command-line entry point: ``snc-mfg <command> [flags]``.

Every flag can also be set through an environment variable named
``SNC_MFG_<FLAG>`` (dashes become underscores); explicit flags win.
Exit codes: 0 ok, 2 config, 3 validation, 4 solver breakdown, 5 numerical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, SolverError, ValidationError
from .model import (ScenarioConfig, assemble_cc_blocks, example51_closed_form, example51_printed_form,
                    example51_scenario, validate_scenario)

ENV_PREFIX = "SNC_MFG_"
COMMANDS = ("validate", "riccati", "meanfield", "simulate", "scaling", "example51")
CLOSED_FORM_TOL = 1e-8
CONTROL_TOL = 1e-12
CI_Z = 3.29  # two-sided 99.9% normal interval


def parse_populations(text: str) -> tuple:
    """``10x10,100x100`` or ``10,100`` (equal sizes) or a JSON list of pairs."""
    text = text.strip()
    try:
        if text.startswith("["):
            pairs = [tuple(int(v) for v in p) for p in json.loads(text)]
        else:
            pairs = []
            for item in text.split(","):
                parts = item.strip().lower().split("x")
                if len(parts) == 1:
                    parts = parts * 2
                nl, nf = (int(p) for p in parts)
                pairs.append((nl, nf))
    except (ValueError, TypeError, json.JSONDecodeError):
        raise argparse.ArgumentTypeError(f"cannot parse populations {text!r}") from None
    if not pairs or any(len(p) != 2 or min(p) < 1 for p in pairs):
        raise argparse.ArgumentTypeError(f"populations need positive (N_l, N_f) pairs: {text!r}")
    return tuple(pairs)


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", default=_env("scenario"), help="scenario JSON file")
    common.add_argument("--out", default=_env("out") or "out", help="output directory")
    common.add_argument("--grid-steps", "--grid_steps", dest="grid_steps", type=_positive_int,
                        default=_env("grid-steps"))
    common.add_argument("--seed", type=_seed, default=_env("seed"))
    common.add_argument("--populations", type=parse_populations, default=_env("populations"),
                        help="e.g. 10x10,100x100,1000x1000")
    common.add_argument("--threads", type=_positive_int, default=_env("threads") or 1)

    parser = argparse.ArgumentParser(prog="snc-mfg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "validate": "check a scenario and list violations",
        "riccati": "solve the P and Pi Riccati equations",
        "meanfield": "solve the mean-field trajectory",
        "simulate": "simulate finite populations against their limit",
        "scaling": "run the population scaling study",
        "example51": "reproduce the scalar special case against its closed form",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def load_config(args) -> ScenarioConfig:
    if args.command == "example51":
        cfg = example51_scenario()
        if args.scenario:
            cfg = _read_scenario(args.scenario)
    else:
        if not args.scenario:
            raise ConfigError(f"{args.command} needs --scenario")
        cfg = _read_scenario(args.scenario)
    changes = {}
    if args.grid_steps is not None:
        changes["grid_steps"] = args.grid_steps
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.populations is not None:
        changes["populations"] = args.populations
    return cfg.replace(**changes) if changes else cfg


def _read_scenario(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc.strerror}") from None
    return ScenarioConfig.from_json(text)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path: Path, doc: dict):
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _meta(cfg: ScenarioConfig, command: str) -> dict:
    return {"scenario_hash": cfg.scenario_hash(), "seed": cfg.seed, "command": command,
            "grid_steps": cfg.grid_steps}


def _ensure_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


# Commands --------------------------------------------------------------------------

def cmd_validate(cfg, out: Path, args) -> int:
    violations = validate_scenario(cfg)
    doc = {"meta": _meta(cfg, "validate"), "valid": not violations, "violations": violations}
    write_json(out / "validation.json", doc)
    print(json.dumps(_jsonable(violations)))
    if violations:
        raise ValidationError(violations)
    return 0


def _solve_riccati(cfg):
    from .riccati import TimeGrid, solve_cc_riccati

    violations = validate_scenario(cfg)
    if violations:
        raise ValidationError(violations)
    blocks = assemble_cc_blocks(cfg.params, mean_xi0=cfg.initial.mean_xi0)
    return blocks, solve_cc_riccati(blocks, TimeGrid(cfg.params.T, cfg.grid_steps))


def cmd_riccati(cfg, out: Path, args) -> int:
    from .figures import plot_matrix_paths
    from .riccati import cc_riccati_residual

    meta = _meta(cfg, "riccati")
    blocks, pair = _solve_riccati(cfg)
    pair.P.to_csv(out / "P.csv", meta, prefix="P")
    pair.Pi.to_csv(out / "Pi.csv", meta, prefix="Pi")
    rP, rPi = cc_riccati_residual(pair)
    write_json(out / "riccati_report.json",
               {"meta": meta, "residual_P": rP, "residual_Pi": rPi, "coefficient_scale": blocks.scale(),
                "P0": pair.P.values[0], "Pi0": pair.Pi.values[0]})
    plot_matrix_paths({"P": pair.P, "Pi": pair.Pi}, out / "riccati.png")
    return 0


def _write_mean_field_csv(path, mf, meta):
    n4 = mf.EX.values.shape[1]
    header = ["t"] + [f"{name}_{i}" for name in ("EX", "EY", "EZ") for i in range(n4)]
    with open(path, "w") as fh:
        for key, val in meta.items():
            fh.write(f"# {key}={val}\n")
        fh.write(",".join(header) + "\n")
        rows = np.hstack([mf.grid.points[:, None], mf.EX.values, mf.EY.values, mf.EZ.values])
        for row in rows:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def cmd_meanfield(cfg, out: Path, args) -> int:
    from .figures import plot_mean_field
    from .meanfield import drift_consistency_residual, solve_mean_field

    meta = _meta(cfg, "meanfield")
    blocks, pair = _solve_riccati(cfg)
    mf = solve_mean_field(blocks, pair, cfg.initial)
    _write_mean_field_csv(out / "meanfield.csv", mf, meta)
    write_json(out / "meanfield_report.json",
               {"meta": meta, "drift_consistency_residual": drift_consistency_residual(blocks, pair, mf),
                "EX_T": mf.EX.values[-1]})
    plot_mean_field(mf, out / "meanfield.png")
    return 0


def cmd_simulate(cfg, out: Path, args) -> int:
    from .meanfield import limiting_costs, solve_equilibrium
    from .simulate import sample_brownian, simulate_population

    meta = _meta(cfg, "simulate")
    eq = solve_equilibrium(cfg)
    grid = eq.riccati.grid
    bundle = sample_brownian(grid, cfg.mc_paths, cfg.seed)
    limit = limiting_costs(eq.params, eq.riccati, eq.mf, eq.gains, max(cfg.mc_paths, 2), cfg.seed, eq.initial)
    summaries = []
    for nl, nf in cfg.populations:
        res = simulate_population(eq.params, eq.gains, eq.mf, nl, nf, bundle, eq.initial)
        summary = res.summary()
        summaries.append(summary)
        stem = f"population_{nl}x{nf}"
        write_json(out / f"{stem}.json", {"meta": meta, **summary})
        with open(out / f"{stem}.csv", "w") as fh:
            for key, val in meta.items():
                fh.write(f"# {key}={val}\n")
            n = eq.mf.n
            cols = ["t"] + [f"{name}_{i}" for name in ("mX", "empirical_mX", "mx", "empirical_mx")
                            for i in range(n)]
            fh.write(",".join(cols) + "\n")
            rows = np.hstack([grid.points[:, None], eq.mf.mX.values, res.empirical_mX.mean(axis=1),
                              eq.mf.mx.values, res.empirical_mx.mean(axis=1)])
            for row in rows:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    write_json(out / "simulate_summary.json",
               {"meta": meta, "limiting_costs": limit.as_dict(), "populations": summaries})
    return 0


def cmd_scaling(cfg, out: Path, args) -> int:
    from .figures import plot_scaling
    from .nash import run_scaling_study

    meta = _meta(cfg, "scaling")
    study = run_scaling_study(cfg, threads=args.threads)
    study.write_csv(out / "scaling.csv", meta)
    study.write_json(out / "scaling.json", meta)
    write_json(out / "slopes.json",
               {"meta": meta, "slopes": study.to_dict()["slopes"]})
    plot_scaling(study, out / "scaling.png")
    return 0


def example51_report(cfg) -> dict:
    """Closed-form, zero-control and cost checks for the scalar special case."""
    from .meanfield import solve_equilibrium
    from .simulate import representative_costs, sample_brownian, simulate_stacked_cc

    p = cfg.params
    lam = p.lambda_tilde2
    eq = solve_equilibrium(cfg)
    t = eq.riccati.grid.points
    P_cf, Pi_cf = example51_closed_form(t, lam, p.T)
    P_pr, Pi_pr = example51_printed_form(t, lam, p.T)
    err_P = float(np.max(np.abs(eq.riccati.P.values - P_cf)))
    err_Pi = float(np.max(np.abs(eq.riccati.Pi.values - Pi_cf)))
    bundle = sample_brownian(eq.riccati.grid, cfg.mc_paths, cfg.seed)
    path = simulate_stacked_cc(eq.blocks, eq.riccati, eq.mf, bundle, eq.initial, eq.gains, p)
    sup_u = max(float(np.max(np.abs(u))) for u in path.controls.values())
    J = representative_costs(p, path, eq.mf)
    costs = {}
    targets = {"J0": 0.0, "Jl": 0.5 * float(np.trace(cfg.initial.cov_xi)),
               "Jf": 0.5 * float(np.trace(cfg.initial.cov_zeta))}
    for name, target in targets.items():
        vals = J[name]
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / np.sqrt(vals.size))
        z = (mean - target) / se if se > 0 else 0.0
        costs[name] = {"estimate": mean, "stderr": se, "target": target, "z": z,
                       "within_ci": bool(abs(mean - target) <= CI_Z * se + 1e-14)}
    return {
        "lambda_tilde": lam, "T": p.T,
        "max_abs_P_error": err_P, "max_abs_Pi_error": err_Pi,
        "closed_form_pass": err_P <= CLOSED_FORM_TOL and err_Pi <= CLOSED_FORM_TOL,
        "sup_control": sup_u, "controls_zero_pass": sup_u <= CONTROL_TOL,
        "costs": costs, "costs_pass": all(c["within_ci"] for c in costs.values()),
        "printed_form": {
            "max_abs_P_error": float(np.max(np.abs(eq.riccati.P.values - P_pr))),
            "max_abs_Pi_error": float(np.max(np.abs(eq.riccati.Pi.values - Pi_pr))),
            "status": "documented conflict: opposite overall sign, and the printed Pi "
                      "solves its Riccati equation only when lambda_tilde = 1",
        },
        "equilibrium": eq,
    }


def _flag(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def cmd_example51(cfg, out: Path, args) -> int:
    from .figures import plot_matrix_paths

    meta = _meta(cfg, "example51")
    rep = example51_report(cfg)
    eq = rep.pop("equilibrium")
    eq.riccati.P.to_csv(out / "P.csv", meta, prefix="P")
    eq.riccati.Pi.to_csv(out / "Pi.csv", meta, prefix="Pi")
    write_json(out / "example51.json", {"meta": meta, **rep})
    pr = rep["printed_form"]
    lines = [
        *(f"# {k}={v}" for k, v in meta.items()),
        f"max|P_num - P_closed| = {rep['max_abs_P_error']:.3e} (tol {CLOSED_FORM_TOL:g}): "
        f"{_flag(rep['max_abs_P_error'] <= CLOSED_FORM_TOL)}",
        f"max|Pi_num - Pi_closed| = {rep['max_abs_Pi_error']:.3e} (tol {CLOSED_FORM_TOL:g}): "
        f"{_flag(rep['max_abs_Pi_error'] <= CLOSED_FORM_TOL)}",
        f"controls ≡ 0: {_flag(rep['controls_zero_pass'])} (sup {rep['sup_control']:.3e})",
    ]
    for name, c in rep["costs"].items():
        lines.append(f"{name} = {c['estimate']:.6f} ± {c['stderr']:.6f} vs {c['target']:.6f} (z {c['z']:+.2f}): "
                     f"{_flag(c['within_ci'])}")
    lines.append(f"printed closed form: CONFLICT (max|P err| {pr['max_abs_P_error']:.3g}, "
                 f"max|Pi err| {pr['max_abs_Pi_error']:.3g}); {pr['status']}")
    (out / "example51_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    plot_matrix_paths({"P": eq.riccati.P, "Pi": eq.riccati.Pi}, out / "example51.png",
                      entries=[(1, 1), (2, 1), (2, 2), (3, 3)])
    print("\n".join(lines[len(meta):]))
    ok = rep["closed_form_pass"] and rep["controls_zero_pass"] and rep["costs_pass"]
    return 0 if ok else 5


HANDLERS = {"validate": cmd_validate, "riccati": cmd_riccati, "meanfield": cmd_meanfield,
            "simulate": cmd_simulate, "scaling": cmd_scaling, "example51": cmd_example51}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else ConfigError.exit_code
    try:
        cfg = load_config(args)
        out = _ensure_out(args.out)
        return HANDLERS[args.command](cfg, out, args)
    except SolverError as exc:
        print(f"snc-mfg {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
