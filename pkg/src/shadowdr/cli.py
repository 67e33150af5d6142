"""Command-line entry point: ``shadowdr {estimate,simulate,gof,generate}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver or
inference failure, 5 ground-truth oracles disagree.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import __version__
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateWeightsError,
    DomainError,
    NoDataError,
    OracleInconsistencyError,
    SampleSizeError,
    ShadowError,
    SingularDesignError,
)
from .estimators import EstimateReport
from .inference import GofTestResult, gof_phi, gof_psi, run_inference
from .io import RunConfig, _jsonable, dump_json, load_config, read_dataset, write_dataset
from .simulation import generate_dataset, run_study, scenario_from_dict

log = logging.getLogger("shadowdr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER, EXIT_ORACLE = 0, 2, 3, 4, 5
_DATA_ERRORS = (DataError, DomainError, SampleSizeError, SingularDesignError, NoDataError, DegenerateWeightsError)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, OracleInconsistencyError):
        return EXIT_ORACLE
    if isinstance(exc, _DATA_ERRORS):
        return EXIT_DATA
    return EXIT_SOLVER


def error_document(exc: ShadowError) -> dict:
    doc = {"type": type(exc).__name__, "message": str(exc), "exit_code": exit_code(exc)}
    if isinstance(exc, DataError) and exc.line is not None:
        doc["line"] = exc.line
    if isinstance(exc, ConvergenceError) and exc.result is not None:
        doc["final_norm"] = exc.final_norm
        doc["path"] = list(exc.path)
    return {"error": doc}


# ---------------------------------------------------------------------------
# formatting


def _fmt(v, width=12) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "-".rjust(width)
    return f"{v:{width}.6g}"


def estimate_table(report: EstimateReport) -> str:
    se = report.se or {}
    lines = [f"{'statistic':<10}{'estimate':>12}{'boot SE':>12}", "-" * 34]
    values = dict(zip(report.STATISTICS, report.statistic_vector()))
    for name in report.STATISTICS:
        lines.append(f"{name:<10}{_fmt(values[name])}{_fmt(se.get(name))}")
    d = report.diagnostics
    lines.append(f"n = {d.get('n')}, complete cases = {d.get('n_complete')}")
    return "\n".join(lines)


_VERDICT = {
    "phi": ("baseline propensity model", "phi"),
    "psi": ("baseline outcome model", "psi"),
}


def verdict(test: GofTestResult, level: float = 0.05) -> str:
    model, _ = _VERDICT[test.parameter]
    if test.rejects(level):
        return f"{model} looks misspecified ({test.parameter} = 0 rejected at {level:g})"
    return f"no evidence against the {model} at level {level:g}"


def gof_table(tests: list[GofTestResult]) -> str:
    lines = [f"{'param':<6}{'estimate':>12}{'SE':>12}{'z':>10}{'p-value':>10}  verdict", "-" * 78]
    for t in tests:
        lines.append(f"{t.parameter:<6}{_fmt(t.estimate)}{_fmt(t.se)}{t.statistic:10.3f}{t.p_value:10.4f}  {verdict(t)}")
    return "\n".join(lines)


def _gof_doc(t: GofTestResult) -> dict:
    return {"estimate": t.estimate, "se": t.se, "statistic": t.statistic, "p_value": t.p_value,
            "reject_05": t.rejects(), "verdict": verdict(t)}


# ---------------------------------------------------------------------------
# commands


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(cfg: RunConfig, command: str) -> dict:
    return {"command": command, "config_hash": cfg.config_hash, "seed": cfg.seed, "version": __version__}


def _fit(args, cfg: RunConfig):
    data = read_dataset(args.data)
    report = run_inference(data, cfg.pipeline, cfg.bootstrap(), n_jobs=args.threads)
    return data, report


def cmd_estimate(args, cfg: RunConfig) -> int:
    data, report = _fit(args, cfg)
    doc = {**_provenance(cfg, "estimate"), **report.to_dict()}
    tests = []
    if not report.diagnostics.get("complete_data"):
        tests = [gof_phi(report), gof_psi(report)]
        doc["gof"] = {t.parameter: _gof_doc(t) for t in tests}
    out = _out_dir(args, cfg)
    dump_json(doc, out / "estimate.json")
    table = estimate_table(report)
    (out / "estimate.txt").write_text(table + "\n")
    print(table)
    for t in tests:
        if t.rejects():
            print(f"warning: {verdict(t)} (p = {t.p_value:.4f})", file=sys.stderr)
    return EXIT_OK


def cmd_gof(args, cfg: RunConfig) -> int:
    data, report = _fit(args, cfg)
    tests = [gof_phi(report), gof_psi(report)]
    doc = {**_provenance(cfg, "gof"), "n": data.n, "n_complete": data.n_complete,
           "tests": {t.parameter: _gof_doc(t) for t in tests}}
    out = _out_dir(args, cfg)
    dump_json(doc, out / "gof.json")
    table = gof_table(tests)
    (out / "gof.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    scenarios = cfg.scenarios()
    study = cfg.study
    res = run_study(
        scenarios,
        study["replications"],
        seed=cfg.seed,
        n_jobs=args.threads,
        bootstrap=study.get("bootstrap", 0),
        check_truth=study.get("check_truth", True),
    )
    out = _out_dir(args, cfg)
    summary = res.summary.copy()
    summary.insert(0, "config_hash", cfg.config_hash)
    summary.insert(1, "seed", cfg.seed)
    summary.to_csv(out / "summary.csv", index=False)
    long = res.long_format()
    long.insert(0, "config_hash", cfg.config_hash)
    long.insert(1, "seed", cfg.seed)
    long.to_csv(out / "replications.csv", index=False)
    doc = {
        **_provenance(cfg, "simulate"),
        "replications": res.n_replications,
        "truths": res.truths,
        "failures": res.failures,
        "scenarios": [s.to_dict() for s in scenarios],
        "summary": res.summary.to_dict(orient="records"),
    }
    dump_json(doc, out / "study.json")
    cols = [c for c in ("scenario", "estimator", "replications", "bias", "mc_sd", "bias_z", "coverage95", "reject05") if c in res.summary]
    print(res.summary[cols].to_string(index=False, float_format=lambda v: f"{v:.4g}"))
    return EXIT_OK


def cmd_generate(args, cfg: RunConfig) -> int:
    """Write one synthetic dataset (first study scenario, or ``--scenario`` JSON)."""
    if args.scenario:
        scen = scenario_from_dict(json.loads(args.scenario))
    else:
        scen = cfg.scenarios()[0]
    seed = cfg.seed if args.seed is not None else scen.seed
    data = generate_dataset(scen, seed)
    out = _out_dir(args, cfg)
    path = out / (args.name or "data.csv")
    write_dataset(data, path)
    print(path)
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "gof": cmd_gof, "generate": cmd_generate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowdr", description="Doubly robust outcome means with a shadow variable.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data: bool):
        if data:
            p.add_argument("--data", required=True, help="dataset CSV (x1..xp, z, r, y)")
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out-dir", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="seed (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="parallel workers for bootstrap / replications")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("estimate", help="estimate the outcome mean with bootstrap SEs"), True)
    common(sub.add_parser("gof", help="goodness-of-fit tests of the baseline models"), True)
    common(sub.add_parser("simulate", help="run the Monte Carlo study of the config's study block"), False)
    gen = sub.add_parser("generate", help="write a synthetic dataset")
    common(gen, False)
    gen.add_argument("--scenario", help="scenario parameters as inline JSON")
    gen.add_argument("--name", help="file name inside the output directory (default data.csv)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = load_config(args.config).with_seed(args.seed)
        return COMMANDS[args.command](args, cfg)
    except ShadowError as exc:
        print(json.dumps(_jsonable(error_document(exc)), sort_keys=True), file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
