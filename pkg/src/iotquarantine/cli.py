"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error (or a failed
``validate`` check), 2 capacity error.
The default seed can be overridden with the ``IOTQ_SEED`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from . import kernels
from .analytics import (
    BRUTE_FORCE_MAX_N,
    AnalyticScenario,
    brute_force_p_detect,
    contribution_nonzero_types,
    fig3_rows,
    p_detect_general,
    p_detect_special,
    table2_rows,
)
from .catalog import Catalog, builtin_factory_catalog, load_catalog
from .errors import CapacityError, EnvelopeError, PreconditionError
from .montecarlo import (
    DEFAULT_ROUNDS,
    DEFAULT_SEED,
    SWEEPABLE,
    ExperimentSpec,
    csv_header,
    csv_row,
    run_experiment,
    sweep,
)
from .quarantine import (
    MODE_STAGES,
    SAMPLING_MODES,
    NoisyClassifier,
    PerfectClassifier,
    ReassignmentMode,
    ReassignmentTimings,
    repeat_reassignment,
    run_closed_loop,
    trace_to_jsonl,
)
from .traffic import ScenarioParams

EXIT_OK, EXIT_CONFIG, EXIT_CAPACITY = 0, 1, 2
UNDEFINED = "undefined (empty conditioning set)"
SEED_ENV = "IOTQ_SEED"

PM_ROWS = (0.005, 0.01, 0.015, 0.02, 0.025)
FIGURES = {
    "fig2": {
        "parameter": "p_m",
        "grid": [round(0.001 * i, 3) for i in range(1, 26)],
        "curves": ("n", (50, 100, 150, 200, 250)),
        "fixed": {"s_p": 1.0, "t_r": 1.01, "f_m": 100.0},
    },
    "fig4": {
        "parameter": "t_r",
        "grid": [float(f"{1 + 10 ** (k / 10):.10g}") for k in range(-30, 11)],
        "curves": ("p_m", PM_ROWS),
        "fixed": {"n": 100, "s_p": 1.0, "f_m": 100.0},
    },
    "fig5": {
        "parameter": "f_m",
        "grid": [1.0, 2.0, 3.0, 4.0] + [float(v) for v in range(5, 201, 5)],
        "curves": ("p_m", PM_ROWS),
        "fixed": {"n": 100, "s_p": 1.0, "t_r": 1.01},
    },
}


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; 2 is reserved for capacity errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _schema(name: str) -> dict:
    return json.loads(resources.files("iotquarantine").joinpath("data", name).read_text(encoding="utf-8"))


def load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        jsonschema.validate(doc, _schema("scenario.schema.json"))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config {path}: {exc.message}") from None
    if isinstance(doc.get("catalog"), str):
        doc["catalog"] = str(Path(path).parent / doc["catalog"])
    return doc


def _catalog(value: Any) -> Catalog:
    if value is None:
        return builtin_factory_catalog()
    if isinstance(value, str):
        return load_catalog(value)
    return Catalog.from_dict(value)


def _merged(args: argparse.Namespace, config: dict[str, Any]) -> dict[str, Any]:
    merged = dict(config)
    for key in ("n", "p_m", "f_m", "t_r", "s_p", "rounds", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def scenario_from(merged: dict[str, Any]) -> ScenarioParams:
    fields = {k: merged[k] for k in ("n", "p_m", "f_m", "t_r", "s_p") if k in merged}
    try:
        return ScenarioParams(catalog=_catalog(merged.get("catalog")), **fields)
    except (ValueError, KeyError, OSError) as exc:
        raise ConfigError(str(exc)) from None


def experiment_from(merged: dict[str, Any]) -> ExperimentSpec:
    params = scenario_from(merged)
    try:
        return ExperimentSpec(params, int(merged.get("rounds", DEFAULT_ROUNDS)), int(merged.get("seed", default_seed())))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def write_atomic(path: str, text: str) -> None:
    target = Path(path)
    fd, tmp = tempfile.mkstemp(dir=target.parent or ".", prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(x: float) -> str:
    return UNDEFINED if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def _rows_to_csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _scenario_dict(p: ScenarioParams) -> dict[str, Any]:
    return {"n": p.n, "p_m": p.p_m, "f_m": p.f_m, "t_r": p.t_r, "s_p": p.s_p}


# -- commands ---------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    spec = experiment_from(_merged(args, load_config(args.config)))
    metrics = run_experiment(spec, workers=args.workers)
    doc = {
        "scenario": _scenario_dict(spec.params),
        "rounds": spec.rounds,
        "seed": spec.seed,
        "kernels": kernels.BACKEND,
        "metrics": metrics.to_dict(),
    }
    lines = [f"scenario: n={spec.params.n} p_m={spec.params.p_m} f_m={spec.params.f_m} t_r={spec.params.t_r} s_p={spec.params.s_p}"]
    lines.append(f"rounds: {spec.rounds}  seed: {spec.seed}")
    for name in metrics.SCALARS:
        value = getattr(metrics, name)
        lines.append(f"{name}: {_num(value)}" + ("" if math.isnan(value) else f" +/- {metrics.se(name):.6f}"))
    for i, r in enumerate(metrics.by_type_recall):
        lines.append(f"recall type {i}: {_num(r)}")
    print("\n".join(lines))
    if args.json:
        write_atomic(args.json, json.dumps(doc, indent=2) + "\n")
    if args.csv:
        k = len(spec.params.catalog)
        write_atomic(args.csv, _rows_to_csv(csv_header("p_m", k, ("n", "f_m", "t_r", "s_p")), [
            csv_row(spec.params.p_m, metrics, (spec.params.n, spec.params.f_m, spec.params.t_r, spec.params.s_p))
        ]))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    merged = _merged(args, load_config(args.config))
    if args.figure:
        preset = FIGURES[args.figure]
        parameter, grid = preset["parameter"], preset["grid"]
        curve_name, curve_values = preset["curves"]
        base = dict(merged, **preset["fixed"])
        if args.values:
            grid = _parse_grid(args.values, parameter)
    else:
        if not args.param or not args.values:
            raise ConfigError("give --figure or both --param and --values")
        parameter, grid = args.param, _parse_grid(args.values, args.param)
        curve_name, curve_values, base = None, (None,), merged
    if args.rounds is not None:
        base["rounds"] = args.rounds
    k = len(_catalog(base.get("catalog")))
    extra = (curve_name,) if curve_name else ()
    rows = []
    for curve in curve_values:
        cfg = dict(base, **({curve_name: curve} if curve_name else {}))
        spec = experiment_from(cfg)
        for value, metrics in sweep(spec, parameter, grid, workers=args.workers):
            rows.append(csv_row(value, metrics, (curve,) if curve_name else ()))
    text = _rows_to_csv(csv_header(parameter, k, extra), rows)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_grid(raw: str, parameter: str) -> list[float]:
    if parameter not in SWEEPABLE:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; choose from {', '.join(SWEEPABLE)}")
    try:
        values = [int(v) if parameter == "n" else float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad grid {raw!r}") from None
    if not values:
        raise ConfigError("sweep grid is empty")
    return values


def _analytic_scenario(path: str) -> AnalyticScenario:
    merged = load_config(path)
    params = scenario_from(merged)
    try:
        return AnalyticScenario.from_params(params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_analytic(args: argparse.Namespace) -> int:
    if args.table2:
        header = ["malicious_devices_pct", "expected_malicious_flows_pct"]
        rows = [[f"{a:g}", f"{b:.1f}"] for a, b in table2_rows()]
        doc: Any = [dict(zip(header, (a, b))) for a, b in table2_rows()]
    elif args.fig3:
        n_values = list(range(5, 500, 5))
        data = fig3_rows(n_values)
        header = ["n", "p_detect_general", "p_detect_special", "contribution_nonzero_types"]
        rows = [[r["n"]] + [repr(r[h]) if not math.isnan(r[h]) else "" for h in header[1:]] for r in data]
        doc = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in data]
    else:
        scenario = _analytic_scenario(args.general or args.special)
        if args.general:
            value = p_detect_general(scenario)
            header = ["n", "p_m", "f_m", "t_r", "p_detect_general"]
        else:
            value = p_detect_special(scenario)
            header = ["n", "p_m", "f_m", "t_r", "p_detect_special", "contribution_nonzero_types"]
        row: list[Any] = [scenario.n, scenario.p_m, scenario.f_m, scenario.t_r, value]
        if args.special:
            row.append(contribution_nonzero_types(scenario))
        rows = [[UNDEFINED if isinstance(v, float) and math.isnan(v) else v for v in row]]
        doc = {h: (None if isinstance(v, float) and math.isnan(v) else v) for h, v in zip(header, row)}
    text = json.dumps(doc, indent=2) + "\n" if args.format == "json" else _rows_to_csv(header, rows)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_reassign(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    rng = np.random.default_rng(seed)
    mode = ReassignmentMode(args.mode)
    stats = repeat_reassignment(mode, ReassignmentTimings(sampling=args.timing), args.reps, rng)
    header = ["component", "mean_ms", "median_ms", "min_ms", "max_ms", "p95_ms"]
    order = ["total", *MODE_STAGES[mode], "release"]
    rows = [[name] + [f"{getattr(stats[name], f):.2f}" for f in ("mean", "median", "minimum", "maximum", "p95")] for name in order]
    if args.format == "json":
        text = json.dumps({"mode": mode.value, "timing": args.timing, "reps": args.reps, "seed": seed,
                           "latency": {n: vars(stats[n]) for n in order}}, indent=2) + "\n"
    else:
        text = _rows_to_csv(header, rows)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_loop(args: argparse.Namespace) -> int:
    merged = _merged(args, load_config(args.config))
    params = scenario_from(merged)
    seed = int(merged.get("seed", default_seed()))
    stage = PerfectClassifier(args.inspect_ms) if args.accuracy >= 1.0 else NoisyClassifier(args.accuracy, args.inspect_ms)
    result = run_closed_loop(
        params,
        args.mode,
        ReassignmentTimings(sampling=args.timing),
        stage,
        duration=args.duration,
        rng=np.random.default_rng(seed),
        flows=args.flows,
        capacity=args.capacity,
        check_invariants=True,
    )
    print(json.dumps(result.summary(), indent=2))
    if args.trace:
        write_atomic(args.trace, trace_to_jsonl(result.trace))
    if args.timeline:
        write_atomic(args.timeline, _rows_to_csv(["t_ms", "rules"], [[f"{t:.6f}", c] for t, c in result.occupancy]))
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    merged = _merged(args, load_config(args.config))
    spec = experiment_from(merged)
    tol = args.tolerance_se if args.tolerance_se is not None else float(merged.get("tolerance_se", 3.0))
    report = validation_report(spec, tol)
    if args.format == "json":
        sys.stdout.write(json.dumps(report, indent=2) + "\n")
    else:
        for key in ("monte_carlo", "monte_carlo_se", "p_detect_general", "brute_force"):
            value = report[key]
            if key == "brute_force" and value is None and report["monte_carlo"] is not None:
                print(f"{key}: not computed (n > {BRUTE_FORCE_MAX_N})")
            else:
                print(f"{key}: {_num(value)}")
        for check in report["checks"]:
            status = {True: "PASS", False: "FAIL", None: "INFO"}[check["pass"]]
            diff = "" if check["difference"] is None else f" diff={check['difference']:+.6f}"
            print(f"[{status}] {check['name']}:{diff} ({check['note']})")
    return EXIT_CONFIG if any(c["pass"] is False for c in report["checks"]) else EXIT_OK


def validation_report(spec: ExperimentSpec, tolerance_se: float = 3.0) -> dict[str, Any]:
    """Monte Carlo vs closed-form vs exact enumeration for one scenario."""
    metrics = run_experiment(spec)
    analytic = AnalyticScenario.from_params(spec.params) if spec.params.t_r >= 1.0 else None
    general = p_detect_general(analytic) if analytic else math.nan
    brute = brute_force_p_detect(analytic) if analytic and spec.params.n <= BRUTE_FORCE_MAX_N else None
    mc = metrics.detect_given_malicious
    trials = metrics.tally.rounds_with_malicious

    def check(name: str, reference: float | None, asserted: bool) -> dict[str, Any]:
        if math.isnan(mc):
            return {"name": name, "difference": None, "se": None, "pass": None, "note": UNDEFINED}
        if reference is None:
            return {"name": name, "difference": None, "se": None, "pass": None, "note": f"not computed (n > {BRUTE_FORCE_MAX_N})"}
        se = math.sqrt(reference * (1 - reference) / trials)
        diff = mc - reference
        within = abs(diff) <= tolerance_se * se
        if asserted:
            note = f"within {tolerance_se:g} standard errors" if within else f"outside {tolerance_se:g} standard errors"
            return {"name": name, "difference": diff, "se": se, "pass": within, "note": note}
        note = "independent-composition formula, difference reported only"
        return {"name": name, "difference": diff, "se": se, "pass": None, "note": note}

    checks = [
        check("monte_carlo_vs_brute_force", brute, True),
        check("monte_carlo_vs_general_formula", general, False),
    ]
    clean = lambda v: None if v is None or (isinstance(v, float) and math.isnan(v)) else v  # noqa: E731
    return {
        "scenario": _scenario_dict(spec.params),
        "rounds": spec.rounds,
        "seed": spec.seed,
        "monte_carlo": clean(mc),
        "monte_carlo_se": clean(metrics.detect_given_malicious_se),
        "p_detect_general": clean(general),
        "brute_force": clean(brute),
        "general_minus_brute_force": clean(general - brute) if brute is not None else None,
        "checks": [{k: clean(v) for k, v in c.items()} for c in checks],
    }


# -- parser -----------------------------------------------------------------------


def _scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="scenario JSON file")
    p.add_argument("--n", type=int, help="devices per flow")
    p.add_argument("--pm", dest="p_m", type=float, help="probability a device is malicious")
    p.add_argument("--fm", dest="f_m", type=float, help="malicious frequency multiplier")
    p.add_argument("--tr", dest="t_r", type=float, help="detection threshold ratio")
    p.add_argument("--sp", dest="s_p", type=float, help="sampling period, seconds")
    p.add_argument("--rounds", type=int, help=f"Monte Carlo rounds (default {DEFAULT_ROUNDS})")
    p.add_argument("--seed", type=int, help=f"random seed (default {DEFAULT_SEED} or ${SEED_ENV})")
    p.add_argument("--workers", type=int, default=1, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iotquarantine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run one Monte Carlo experiment")
    _scenario_flags(p)
    p.add_argument("--csv", help="also write the metrics row as CSV")
    p.add_argument("--json", help="also write the metrics as JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="parameter sweep; presets reproduce the published figures")
    _scenario_flags(p)
    p.add_argument("--figure", choices=sorted(FIGURES))
    p.add_argument("--param", help=f"parameter to sweep ({', '.join(SWEEPABLE)})")
    p.add_argument("--values", help="comma separated grid")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analytic", help="closed-form probabilities")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--table2", action="store_true", help="expected share of flows holding a malicious device")
    group.add_argument("--fig3", action="store_true", help="P(detect | malicious) over flow size")
    group.add_argument("--general", metavar="CONFIG", help="general formula for a scenario file")
    group.add_argument("--special", metavar="CONFIG", help="type-0 decomposition for a scenario file")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analytic)

    p = sub.add_parser("reassign", help="slice reassignment latency statistics")
    p.add_argument("--mode", required=True, choices=[m.value for m in ReassignmentMode])
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--timing", choices=SAMPLING_MODES, default="constant")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_reassign)

    p = sub.add_parser("loop", help="closed-loop detection, quarantine and release")
    _scenario_flags(p)
    p.add_argument("--mode", choices=[m.value for m in ReassignmentMode], default="reactive")
    p.add_argument("--timing", choices=SAMPLING_MODES, default="constant")
    p.add_argument("--duration", type=float, default=10.0, help="seconds of virtual time")
    p.add_argument("--flows", type=int, default=10)
    p.add_argument("--capacity", type=int, default=4000, help="flow table size")
    p.add_argument("--inspect-ms", type=float, default=0.0, help="second-stage inspection delay")
    p.add_argument("--accuracy", type=float, default=1.0, help="second-stage labelling accuracy")
    p.add_argument("--trace", help="event trace output (JSON lines)")
    p.add_argument("--timeline", help="rule-table occupancy output (CSV)")
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("validate", help="compare Monte Carlo with the closed forms")
    _scenario_flags(p)
    p.add_argument("--tolerance-se", type=float)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, EnvelopeError, PreconditionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
