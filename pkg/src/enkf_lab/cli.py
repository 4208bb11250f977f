"""Command line entry point.

Exit codes: 0 success, 1 a study verdict failed, 2 configuration or
hypothesis error, 3 numerical failure.
"""
import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from enkf_lab import __version__, kalman, riccati
from enkf_lab.enkf import BACKENDS, check_members, make_backend, run_filter
from enkf_lab.harness import STUDIES, HypothesisError, config_from_dict, run_study
from enkf_lab.io import enkf_table, kalman_table, path_tables, write_csv
from enkf_lab.model import ConfigError, from_dict, simulate_path, simulate_paths
from enkf_lab.rng import GENERATOR_VERSION, resolve_seed, stream

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _load_config(path):
    if path is None:
        raise ConfigError("--config is required")
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    if "model" not in doc:
        # a bare model document
        doc = {"model": doc}
    return doc


def _override(doc, key, value):
    if value is not None:
        doc[key] = value
    return doc.get(key)


def _int_field(doc, key, default):
    value = doc.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise ConfigError(f"field {key!r} must be a non-negative integer, got {value!r}")
    return value


def _write_manifest(out_dir, doc, seed, started, outputs):
    blob = json.dumps(doc, sort_keys=True).encode()
    manifest = {
        "tool_version": __version__,
        "generator": GENERATOR_VERSION,
        "seed": seed,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "started_unix": started,
        "wall_clock_seconds": time.time() - started,
        "outputs": sorted(outputs),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo_config(out_dir, doc):
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump({**doc, "generator": GENERATOR_VERSION}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare(args):
    doc = _load_config(args.config)
    seed = resolve_seed(getattr(args, "seed", None), doc.get("seed", 0))
    doc["seed"] = seed
    out = getattr(args, "out", None) or "enkf_lab_out"
    os.makedirs(out, exist_ok=True)
    return doc, seed, out


def cmd_simulate(args):
    doc, seed, out = _prepare(args)
    _override(doc, "n", args.n)
    n = _int_field(doc, "n", 10)
    params = from_dict(doc["model"])
    sample = simulate_path(params, n, seed)
    (s_head, s_rows), (o_head, o_rows) = path_tables(sample)
    write_csv(os.path.join(out, "states.csv"), s_head, s_rows)
    write_csv(os.path.join(out, "observations.csv"), o_head, o_rows)
    _echo_config(out, doc)
    return doc, seed, out, ["states.csv", "observations.csv", "config.json"]


def cmd_kalman(args):
    doc, seed, out = _prepare(args)
    _override(doc, "n", args.n)
    n = _int_field(doc, "n", 10)
    params = from_dict(doc["model"])
    sample = simulate_path(params, n, seed)
    traj = kalman.kf_run(params, sample.observations)
    write_csv(os.path.join(out, "observations.csv"), *path_tables(sample)[1])
    write_csv(os.path.join(out, "kalman.csv"), *kalman_table(params, traj))
    _echo_config(out, doc)
    return doc, seed, out, ["observations.csv", "kalman.csv", "config.json"]


def cmd_enkf(args):
    doc, seed, out = _prepare(args)
    _override(doc, "n", args.n)
    n = _int_field(doc, "n", 10)
    _override(doc, "ensemble_size", args.ensemble_size)
    n_members = _int_field(doc, "ensemble_size", 32)
    backend_name = _override(doc, "backend", args.backend) or "particle"
    doc["backend"] = backend_name
    if backend_name not in BACKENDS:
        raise ConfigError(f"unknown backend {backend_name!r}; choose from {', '.join(BACKENDS)}")
    params = from_dict(doc["model"])
    try:
        check_members(params, n_members)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _, obs = simulate_paths(params, n, stream(seed, "simulate"))
    backend = make_backend(backend_name, params, n_members)
    run = run_filter(backend, n, stream(seed, f"enkf/{backend_name}"), observations=obs)
    traj = kalman.kf_run(params, obs)
    write_csv(os.path.join(out, "enkf.csv"), *enkf_table(params, run, traj.pred_covs))
    write_csv(os.path.join(out, "kalman.csv"), *kalman_table(params, traj))
    _echo_config(out, doc)
    return doc, seed, out, ["enkf.csv", "kalman.csv", "config.json"]


def cmd_riccati(args):
    doc, seed, out = _prepare(args)
    params = from_dict(doc["model"])
    ctx = riccati.fixed_point(params)
    result = ctx.to_dict()
    result["g_limit"] = ctx.g_limit.tolist()
    result["closed_loop"] = ctx.closed_loop.tolist()
    result["gelfand"] = riccati.gelfand_sequence(ctx, 16).tolist()
    result["iota_estimate"] = riccati.iota_estimate(ctx, stream(seed, "iota"), samples=50)
    with open(os.path.join(out, "riccati.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(out, doc)
    return doc, seed, out, ["riccati.json", "config.json"]


def cmd_study(args):
    doc, seed, out = _prepare(args)
    cfg = config_from_dict(doc, study=args.study, seed=seed)
    doc["study"] = {k: v for k, v in cfg.to_dict().items() if k not in ("model", "seed")}
    doc["study"]["name"] = doc["study"].pop("study")
    report = run_study(cfg, jobs=args.jobs or 1)
    report.write(out)
    status = EXIT_OK if report.passed else EXIT_VERDICT
    for name, v in report.verdicts.items():
        print(f"{'PASS' if v['passed'] else 'FAIL'}  {name}")
    return doc, seed, out, ["report.json", "raw.csv", "config.json"], status


def build_parser():
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="master seed (default: $ENKF_LAB_SEED or 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes for replica blocks")
    common.add_argument("--config", help="JSON configuration file")

    parser = argparse.ArgumentParser(prog="enkf-lab", parents=[common],
                                     description="EnKF and Riccati laboratory")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a signal/observation path")
    p.add_argument("--n", type=int, default=None, help="number of steps")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("kalman", parents=[common], help="exact Kalman filter on a simulated path")
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(func=cmd_kalman)

    p = sub.add_parser("enkf", parents=[common], help="EnKF run beside the exact filter")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--backend", choices=BACKENDS, default=None)
    p.add_argument("--ensemble-size", "-N", type=int, default=None, dest="ensemble_size")
    p.set_defaults(func=cmd_enkf)

    p = sub.add_parser("riccati", parents=[common], help="Riccati fixed point and diagnostics")
    p.set_defaults(func=cmd_riccati)

    p = sub.add_parser("study", parents=[common], help="run a Monte Carlo study")
    p.add_argument("--study", choices=STUDIES, default=None)
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("seed", "out", "jobs", "config"):
        if not hasattr(args, name):
            setattr(args, name, None)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    started = time.time()
    try:
        result = args.func(args)
    except (ConfigError, HypothesisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    doc, seed, out, outputs = result[:4]
    status = result[4] if len(result) > 4 else EXIT_OK
    _write_manifest(out, doc, seed, started, outputs)
    return status


if __name__ == "__main__":
    sys.exit(main())
