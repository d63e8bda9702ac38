"""Command-line interface: ``platform-cate {estimate,simulate,diagnose}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import ContrastSpec, Schema, ingest_csv
from .diagnostics import pooling_test
from .estimators import fit_nuisances, resolve_estimators, run_estimators
from .exceptions import ConfigError, PlatformCateError, PoolingTestUndefinedError
from .regression import DesignSpec
from .report import to_csv, to_json, to_text
from .simulation import (
    ALL_METRICS,
    GENERATOR_NAME,
    KAPPA3_NOTE,
    PAIR_METRICS,
    ScenarioConfig,
    default_jobs,
    parse_scenario,
    run_study,
)

ENV_JOBS = "PLATFORM_CATE_JOBS"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="platform-cate", description="Concurrent treatment-effect estimation for platform trials.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value file; command-line flags override it")
        sp.add_argument("--output", "-o", help="output path (default: stdout)")
        sp.add_argument("--format", choices=("csv", "json", "text"), default=None)

    def data_args(sp):
        sp.add_argument("--input", "-i", help="CSV file, one row per participant")
        sp.add_argument("--schema", help="JSON column mapping (default: e, w*, v<k>, a, y)")
        sp.add_argument("--contrast-arm", type=int, default=None, help="treated arm k (default 1)")
        sp.add_argument("--pattern", default=None,
                        help="extra availability conditions, e.g. '2=1' or '2=0,3=1'")
        sp.add_argument("--design", default=None,
                        help="'full', 'intercept' or comma-separated regressor names (entry_time for E)")
        sp.add_argument("--normalize-entry-time", action="store_true", default=None)

    e = sub.add_parser("estimate", help="estimate cATE(k) with selected estimators")
    common(e)
    data_args(e)
    e.add_argument("--estimators", default=None, help="comma-separated list or 'all'")
    e.add_argument("--treatment-design", default=None)
    e.add_argument("--availability", choices=("deterministic", "fitted"), default=None)
    e.add_argument("--alpha", type=float, default=None, help="level for the pooling advisory")

    d = sub.add_parser("diagnose", help="test whether non-concurrent controls can be pooled")
    common(d)
    data_args(d)
    d.add_argument("--alpha", type=float, default=None)

    s = sub.add_parser("simulate", help="run a replication study from a scenario file")
    common(s)
    s.add_argument("--estimators", default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--jobs", type=int, default=None, help=f"worker processes (default ${ENV_JOBS} or 1)")
    s.add_argument("--metrics", default=None, help="comma-separated metrics to write")
    return p


# ---------------------------------------------------------------------------
# option resolution
# ---------------------------------------------------------------------------

_BOOL = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def merged(args, cfg: dict, key, default=None, cast=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    if key in cfg:
        v = cfg[key]
        if cast is bool:
            return _BOOL.get(str(v).lower(), False)
        return cast(v) if cast else v
    return default


def parse_pattern(text, treated):
    pattern = {}
    if text:
        for part in text.split(","):
            if "=" not in part:
                raise UsageError(f"pattern entries look like 'arm=bit', got {part!r}")
            k, b = part.split("=", 1)
            try:
                pattern[int(k)] = int(b)
            except ValueError:
                raise UsageError(f"bad pattern entry {part!r}") from None
    return ContrastSpec(treated, pattern)


def parse_design(text, covariate_names):
    if text is None or text == "full":
        return DesignSpec.full()
    if text in ("intercept", "intercept-only"):
        return DesignSpec.intercept_only()
    names = [s.strip() for s in text.split(",") if s.strip()]
    use_e = "entry_time" in names
    idx = []
    for nm in names:
        if nm == "entry_time":
            continue
        hits = [j for j, c in enumerate(covariate_names) if c == nm or c.startswith(nm + "=")]
        if not hits:
            raise UsageError(f"design names unknown covariate {nm!r}; available: {', '.join(covariate_names)}")
        idx.extend(hits)
    return DesignSpec(include_intercept=True, covariate_indices=tuple(idx), include_entry_time=use_e)


def load_input(args, cfg):
    path = merged(args, cfg, "input")
    if not path:
        raise UsageError("--input is required")
    if not Path(path).exists():
        raise UsageError(f"input file not found: {path}")
    schema_path = merged(args, cfg, "schema")
    schema = Schema.from_file(schema_path) if schema_path else None
    norm = merged(args, cfg, "normalize_entry_time", False, bool)
    return ingest_csv(path, schema, normalize_entry_time=norm)


def write_output(text, output):
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def write_manifest(output, payload):
    if not output:
        return
    payload = {
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        **payload,
    }
    Path(str(output) + ".manifest.json").write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    t0 = time.perf_counter()
    cfg = read_config(args.config) if args.config else {}
    ds = load_input(args, cfg)
    contrast = parse_pattern(merged(args, cfg, "pattern"), merged(args, cfg, "contrast_arm", 1, int))
    design = parse_design(merged(args, cfg, "design"), ds.covariate_names)
    tdesign = parse_design(merged(args, cfg, "treatment_design"), ds.covariate_names) \
        if merged(args, cfg, "treatment_design") else design
    tags = resolve_estimators(merged(args, cfg, "estimators", "all"))
    availability = merged(args, cfg, "availability", "deterministic")
    alpha = merged(args, cfg, "alpha", 0.05, float)
    fmt = merged(args, cfg, "format", "csv")
    output = merged(args, cfg, "output")

    nz = None
    if any(t != "naive" for t in tags):
        nz = fit_nuisances(ds, contrast, design, tdesign, availability=availability)
    reports = run_estimators(ds, contrast, tags, nuisances=nz)

    advisory = None
    if {"OR-ac", "DR-ac", "OR-ATE"} & set(tags):
        try:
            pt = pooling_test(ds, contrast, design, alpha)
            advisory = {"pooling_test": pt.to_dict(), "note": pt.summary_line()}
        except PoolingTestUndefinedError as exc:
            advisory = {"pooling_test": None, "note": f"pooling test not applicable: {exc}"}
        print(f"note: OR-ac/DR-ac pool non-concurrent controls. {advisory['note']}", file=sys.stderr)
    if any(r.extras.get("extrapolation") for r in reports.values()):
        print("note: OR-ATE extrapolates the treated model to non-concurrent entry times", file=sys.stderr)

    if fmt == "json":
        extra = {"contrast": contrast.label, "n": len(ds)}
        if advisory:
            extra["advisory"] = advisory
        text = to_json(reports, include_influence=True, **extra)
    elif fmt == "text":
        text = to_text(reports)
    else:
        text = to_csv(reports)
    write_output(text, output)
    write_manifest(output, {
        "command": "estimate",
        "config": {"input": merged(args, cfg, "input"), "schema": merged(args, cfg, "schema"),
                   "contrast": contrast.label, "design": merged(args, cfg, "design", "full"),
                   "estimators": tags, "availability": availability, "alpha": alpha, "format": fmt},
        "wall_time_s": time.perf_counter() - t0,
    })
    return 0


def cmd_diagnose(args) -> int:
    cfg = read_config(args.config) if args.config else {}
    ds = load_input(args, cfg)
    contrast = parse_pattern(merged(args, cfg, "pattern"), merged(args, cfg, "contrast_arm", 1, int))
    design = parse_design(merged(args, cfg, "design"), ds.covariate_names)
    alpha = merged(args, cfg, "alpha", 0.05, float)
    output = merged(args, cfg, "output")
    rep = pooling_test(ds, contrast, design, alpha)
    payload = rep.to_dict()
    payload["contrast"] = contrast.label
    payload["recommendation"] = rep.summary_line()
    write_output(json.dumps(payload, indent=2), output)
    print(rep.summary_line(), file=sys.stderr)
    write_manifest(output, {"command": "diagnose", "config": {"input": merged(args, cfg, "input"),
                                                              "contrast": contrast.label, "alpha": alpha}})
    return 0


def cmd_simulate(args) -> int:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"scenario file not found: {path}")
        values = parse_scenario(path.read_text(encoding="utf-8"))
    for key in ("seed", "reps", "n"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    if args.estimators is not None:
        values["estimators"] = tuple(resolve_estimators(args.estimators))
    if args.metrics is not None:
        values["metrics"] = tuple(s.strip() for s in args.metrics.split(",") if s.strip())
    config = ScenarioConfig(**values)
    if config.reps < 2:
        raise ConfigError("reps >= 2 required")
    jobs = args.jobs if args.jobs is not None else default_jobs()
    t0 = time.perf_counter()
    study = run_study(config, jobs=jobs)
    wall = time.perf_counter() - t0
    metrics = [m for m in config.metrics if m in ALL_METRICS + PAIR_METRICS]
    table = study.metrics.select(metrics)
    write_output(table.csv_text(), args.output)
    failures = {f"{k[0]}|{k[1]}|{k[2]}": v for k, v in study.failures.items() if v}
    write_manifest(args.output, {
        "command": "simulate",
        "seed": config.seed,
        "generator": GENERATOR_NAME,
        "config": config.to_dict(),
        "wall_time_s": wall,
        "jobs": jobs,
        "failures": failures,
        "notes": {"kappa3": KAPPA3_NOTE},
    })
    return 0


COMMANDS = {"estimate": cmd_estimate, "diagnose": cmd_diagnose, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except PlatformCateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
