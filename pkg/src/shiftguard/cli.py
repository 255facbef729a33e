"""Operator-facing command line: calibrate, test, benchmark, report.

Runs are driven by a sectioned key=value config file (INI grammar, see
docs/config.md); every parameter either comes from the file or from a
documented default, and a canonical serialization of the effective
config keys all caches and result files.  Machine-readable output is
line-delimited JSON on stdout; human-readable text goes to stderr.
Exit codes: 0 completed, 1 error, 2 shift detected under --strict-exit.
"""

from __future__ import annotations

import argparse
import configparser
import csv as csv_mod
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass

from .cdc import CdcTrainSpec
from .data import ShiftTaskSpec, load_csv, partition, synth_generate, uci_prepare
from .detectron import (
    BenchmarkTask,
    DatasetTask,
    PartitionedData,
    calibrate,
    disagreement_curve,
    disagreement_statistic_psi,
    evaluate_power,
    load_calibration,
    save_calibration,
    test_both,
    test_disagreement,
    test_entropy,
    DETECTOR_IDS,
)
from .learners import GbtConfig, LearnerConfig, MlpConfig, fit
from .numerics import RngStream

__all__ = ["main", "RunConfig", "load_run_config", "canonical_config_text"]

_DEFAULTS = {
    "run": {"output_dir": "results", "jobs": "1"},
    "data": {"generator": "gauss_mean_shift", "n_source": "600",
             "n_target": "400", "fractions": "0.7,0.1,0.2"},
    "learner": {"kind": "gbt", "val_metric": "accuracy"},
    "mlp": {"hidden_sizes": "16,16,16", "dropout_rate": "0.3",
            "learning_rate": "0.001", "max_epochs": "1000",
            "batch_size": "64", "l2": "0.0", "patience": "100"},
    "gbt": {"eta": "0.1", "max_depth": "6", "num_rounds": "10",
            "subsample": "0.8", "colsample": "0.8",
            "min_child_weight": "1.0", "reg_lambda": "1.0",
            "disagree_scale": "1.0"},
    # the step cap defaults ON: uncapped budgets let null-run disagreement
    # saturate and drain both tests of power (set empty to disable)
    "cdc": {"ensemble_max": "5", "val_tolerance": "0.05",
            "max_epochs_per_cdc": "10", "max_opt_steps": "5"},
    "test": {"K": "100", "alpha": "0.05", "sample_size": "20",
             "detectors": "detectron_disagreement,detectron_entropy"},
    "benchmark": {"sample_sizes": "10,20,50", "trials": "100",
                  "psi_budget": "0", "psi_runs": "20"},
}

_GENERATOR_PARAM_KEYS = ("mu", "delta", "dim", "theta", "noise")


class CliError(Exception):
    """User-facing failure: message to stderr, exit code 1."""


@dataclass
class RunConfig:
    """Effective (defaults-materialized) run configuration."""
    sections: dict
    seed: int | None
    path: str

    def get(self, section: str, key: str) -> str:
        return self.sections[section][key]

    def getint(self, section, key):
        return int(self.get(section, key))

    def getfloat(self, section, key):
        return float(self.get(section, key))


def load_run_config(path) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # option names are case-sensitive (K vs k)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except configparser.Error as exc:
        raise CliError(f"config parse error: {exc}")
    sections = {}
    for name, defaults in _DEFAULTS.items():
        merged = dict(defaults)
        if parser.has_section(name):
            merged.update({k: v.strip() for k, v in parser.items(name)})
        sections[name] = merged
    if parser.has_section("data"):
        # generator params ride along in [data]
        for k in _GENERATOR_PARAM_KEYS:
            if parser.has_option("data", k):
                sections["data"][k] = parser.get("data", k).strip()
        for k in ("source_csv", "uci_dir", "seed"):
            if parser.has_option("data", k):
                sections["data"][k] = parser.get("data", k).strip()
    seed = None
    if parser.has_option("run", "seed"):
        seed = parser.getint("run", "seed")
    return RunConfig(sections=sections, seed=seed, path=str(path))


def canonical_config_text(rc: RunConfig, seed: int) -> str:
    """Sorted section.key=value lines of the effective config; the basis
    for cache keys and result file names."""
    lines = [f"seed={seed}"]
    for section in sorted(rc.sections):
        for key in sorted(rc.sections[section]):
            lines.append(f"{section}.{key}={rc.sections[section][key]}")
    return "\n".join(lines)


def run_key(rc: RunConfig, seed: int) -> str:
    return hashlib.sha256(
        canonical_config_text(rc, seed).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------

def learner_from_config(rc: RunConfig) -> LearnerConfig:
    mlp_s, gbt_s = rc.sections["mlp"], rc.sections["gbt"]
    try:
        mlp = MlpConfig(
            hidden_sizes=tuple(int(x) for x in
                               mlp_s["hidden_sizes"].split(",") if x),
            dropout_rate=float(mlp_s["dropout_rate"]),
            learning_rate=float(mlp_s["learning_rate"]),
            max_epochs=int(mlp_s["max_epochs"]),
            batch_size=int(mlp_s["batch_size"]),
            l2=float(mlp_s["l2"]),
            patience=int(mlp_s["patience"]),
        )
        gbt = GbtConfig(
            eta=float(gbt_s["eta"]),
            max_depth=int(gbt_s["max_depth"]),
            num_rounds=int(gbt_s["num_rounds"]),
            subsample=float(gbt_s["subsample"]),
            colsample=float(gbt_s["colsample"]),
            min_child_weight=float(gbt_s["min_child_weight"]),
            reg_lambda=float(gbt_s["reg_lambda"]),
            disagree_scale=float(gbt_s["disagree_scale"]),
        )
        return LearnerConfig(kind=rc.get("learner", "kind"), mlp=mlp, gbt=gbt,
                             val_metric=rc.get("learner", "val_metric"))
    except ValueError as exc:
        raise CliError(f"invalid learner config: {exc}")


def cdc_spec_from_config(rc: RunConfig) -> CdcTrainSpec:
    s = rc.sections["cdc"]
    raw_cap = s["max_opt_steps"]
    try:
        return CdcTrainSpec(
            ensemble_max=int(s["ensemble_max"]),
            val_tolerance=float(s["val_tolerance"]),
            max_epochs_per_cdc=int(s["max_epochs_per_cdc"]),
            max_opt_steps=int(raw_cap) if raw_cap else None,
        )
    except ValueError as exc:
        raise CliError(f"invalid cdc config: {exc}")


def shift_spec_from_config(rc: RunConfig, seed: int) -> ShiftTaskSpec:
    d = rc.sections["data"]
    params = {}
    for k in _GENERATOR_PARAM_KEYS:
        if k in d:
            params[k] = float(d[k])
    return ShiftTaskSpec(
        generator=d["generator"],
        n_source=int(d["n_source"]),
        n_target=int(d["n_target"]),
        seed=int(d.get("seed", seed)),
        params=params,
    )


def build_environment(rc: RunConfig, seed: int):
    """Materialize (partitioned source, target features or None, base model)."""
    d = rc.sections["data"]
    root = RngStream(seed, 0)
    fractions = tuple(float(x) for x in d["fractions"].split(","))
    target_X = None
    if "source_csv" in d:
        source = load_csv(d["source_csv"])
        if source.labels is None:
            raise CliError("source CSV must carry a 'y' label column")
    elif "uci_dir" in d:
        try:
            source, target = uci_prepare(d["uci_dir"])
        except (FileNotFoundError, ValueError) as exc:
            raise CliError(str(exc))
        target_X = target.features
    else:
        try:
            spec = shift_spec_from_config(rc, seed)
        except ValueError as exc:
            raise CliError(f"invalid data config: {exc}")
        source, target, _ = synth_generate(spec)
        target_X = target.features
    try:
        train, val, holdout = partition(source, fractions, root.split(1))
    except ValueError as exc:
        raise CliError(f"cannot partition source data: {exc}")
    data = PartitionedData(train, val, holdout)
    config = learner_from_config(rc)
    f = fit(config, train.features, train.labels, val.features, val.labels,
            root.split(2))
    return data, target_X, f


def resolve_seed(rc: RunConfig, cli_seed) -> int:
    if cli_seed is not None:
        return int(cli_seed)
    if rc.seed is not None:
        return rc.seed
    raise CliError("no seed: pass --seed or set seed in [run] "
                   "(silent nondeterminism is not allowed)")


def cache_dir(rc: RunConfig) -> str:
    return os.environ.get("SHIFTGUARD_CACHE",
                          os.path.join(rc.get("run", "output_dir"), "cache"))


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    sys.stdout.flush()


def _log(msg: str) -> None:
    sys.stderr.write(msg + "\n")


# ---------------------------------------------------------------------------
# schema validation (minimal structural checks against shipped schemas)
# ---------------------------------------------------------------------------

def _schema_path(name: str) -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    return os.path.join(here, "schemas", f"{name}.schema.json")


def load_schema(name: str) -> dict:
    with open(_schema_path(name), encoding="utf-8") as fh:
        return json.load(fh)


_TYPES = {"object": dict, "array": list, "string": str, "boolean": bool,
          "number": (int, float), "integer": int, "null": type(None)}


def validate_against_schema(doc, schema, where="$"):
    """Small structural validator for the shipped schemas (types,
    required keys, items, enums)."""
    stype = schema.get("type")
    if stype is not None:
        expected = _TYPES[stype]
        if stype == "number" and isinstance(doc, bool):
            raise ValueError(f"{where}: boolean is not a number")
        if not isinstance(doc, expected):
            raise ValueError(f"{where}: expected {stype}, "
                             f"got {type(doc).__name__}")
    if "enum" in schema and doc not in schema["enum"]:
        raise ValueError(f"{where}: {doc!r} not in {schema['enum']}")
    if stype == "object":
        for key in schema.get("required", ()):
            if key not in doc:
                raise ValueError(f"{where}: missing required key {key!r}")
        for key, sub in schema.get("properties", {}).items():
            if key in doc:
                validate_against_schema(doc[key], sub, f"{where}.{key}")
    if stype == "array" and "items" in schema:
        for i, item in enumerate(doc):
            validate_against_schema(item, schema["items"], f"{where}[{i}]")
    return True


def _emit_validated(doc: dict, schema_name: str) -> None:
    validate_against_schema(doc, load_schema(schema_name))
    _emit(doc)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    rc = load_run_config(args.config)
    seed = resolve_seed(rc, args.seed)
    jobs = args.jobs or rc.getint("run", "jobs")
    start = time.perf_counter()
    data, _, f = build_environment(rc, seed)
    config = learner_from_config(rc)
    spec = cdc_spec_from_config(rc)
    N = rc.getint("test", "sample_size")
    K = rc.getint("test", "K")
    alpha = rc.getfloat("test", "alpha")
    try:
        record = calibrate(data, config, f, N, K, spec, alpha,
                           RngStream(seed, 0).split(3), jobs=jobs)
    except ValueError as exc:
        raise CliError(str(exc))
    out_dir = cache_dir(rc)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir,
                        f"calibration_{record.config_hash[:16]}_{seed}.json")
    save_calibration(record, path)
    elapsed = time.perf_counter() - start
    _log(f"calibrated K={K} runs at N={N}: "
         f"tau_disagreement={record.tau_disagreement:.6g} "
         f"tau_entropy={record.tau_entropy:.6g} "
         f"({elapsed:.1f}s) -> {path}")
    _emit_validated({
        "kind": "calibration_summary",
        "path": path,
        "config_hash": record.config_hash,
        "K": K,
        "sample_size": N,
        "alpha": alpha,
        "tau_disagreement": record.tau_disagreement,
        "tau_entropy": record.tau_entropy,
        "seed": seed,
    }, "calibration_summary")
    return 0


def cmd_test(args) -> int:
    rc = load_run_config(args.config)
    seed = resolve_seed(rc, args.seed)
    data, _, f = build_environment(rc, seed)
    config = learner_from_config(rc)
    spec = cdc_spec_from_config(rc)
    try:
        record = load_calibration(args.calibration)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load calibration: {exc}")
    q = load_csv(args.q, label_column=None)
    q_digest = int(hashlib.sha256(q.fingerprint.encode()).hexdigest()[:12], 16)
    rng = RngStream(seed, 0).split(4).split(q_digest)

    which = args.test
    try:
        if which == "both":
            verdicts = list(test_both(q.features, record, data, config, f,
                                      spec, rng))
        elif which == "disagreement":
            verdicts = [test_disagreement(q.features, record, data, config,
                                          f, spec, rng)]
        else:
            verdicts = [test_entropy(q.features, record, data, config, f,
                                     spec, rng)]
    except ValueError as exc:
        raise CliError(str(exc))

    out_dir = rc.get("run", "output_dir")
    os.makedirs(out_dir, exist_ok=True)
    results_path = os.path.join(
        out_dir, f"verdicts_{run_key(rc, seed)}_{seed}.jsonl")
    detected = False
    with open(results_path, "a", encoding="utf-8") as fh:
        for v in verdicts:
            doc = v.to_json_dict()
            _emit_validated(doc, "verdict")
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
            detected = detected or v.shift_detected
    _log(f"verdicts appended to {results_path}")
    if args.strict_exit and detected:
        return 2
    return 0


def cmd_benchmark(args) -> int:
    rc = load_run_config(args.config)
    seed = resolve_seed(rc, args.seed)
    jobs = args.jobs or rc.getint("run", "jobs")
    config = learner_from_config(rc)
    spec = cdc_spec_from_config(rc)
    detectors = [d.strip() for d in
                 rc.get("test", "detectors").split(",") if d.strip()]
    for d in detectors:
        if d not in DETECTOR_IDS:
            raise CliError(f"unknown detector id {d!r}")
    sizes = [int(x) for x in
             rc.get("benchmark", "sample_sizes").split(",") if x]
    trials = rc.getint("benchmark", "trials")
    alpha = rc.getfloat("test", "alpha")
    K = rc.getint("test", "K")
    d = rc.sections["data"]
    if "uci_dir" in d:
        try:
            source, target = uci_prepare(d["uci_dir"])
        except (FileNotFoundError, ValueError) as exc:
            raise CliError(str(exc))
        data_spec = DatasetTask(source=source, target=target)
    elif "source_csv" in d:
        raise CliError("benchmark needs a shifted target source: use a "
                       "generator or uci_dir")
    else:
        data_spec = shift_spec_from_config(rc, seed)
    task = BenchmarkTask(
        data_spec=data_spec,
        learner=config, cdc=spec, K=K,
        fractions=tuple(float(x)
                        for x in rc.get("data", "fractions").split(",")))

    out_dir = rc.get("run", "output_dir")
    os.makedirs(out_dir, exist_ok=True)
    key = run_key(rc, seed)
    csv_path = os.path.join(out_dir, f"benchmark_{key}_{seed}.csv")
    jsonl_path = os.path.join(out_dir, f"benchmark_{key}_{seed}.jsonl")
    new_csv = not os.path.exists(csv_path)
    rows = []
    for detector in detectors:
        for n in sizes:
            t0 = time.perf_counter()
            tpr, se = evaluate_power(
                task, detector, n, trials, alpha,
                RngStream(seed, 0).split(5).split(hash_pair(detector, n)),
                jobs=jobs)
            _log(f"{detector} N={n}: TPR@{int(alpha * 100)} = "
                 f"{tpr:.2f} +/- {se:.2f} "
                 f"({time.perf_counter() - t0:.1f}s)")
            rows.append({"kind": "benchmark_row", "detector": detector,
                         "N": n, "tpr": tpr, "std_err": se,
                         "trials": trials, "seed": seed})
    with open(csv_path, "a", newline="", encoding="utf-8") as fh:
        writer = csv_mod.writer(fh)
        if new_csv:
            writer.writerow(["detector", "N", "tpr", "std_err", "trials",
                             "seed"])
        for r in rows:
            writer.writerow([r["detector"], r["N"], f"{r['tpr']:.6f}",
                             f"{r['std_err']:.6f}", r["trials"], r["seed"]])
    with open(jsonl_path, "a", encoding="utf-8") as fh:
        for r in rows:
            _emit_validated(r, "benchmark_row")
            fh.write(json.dumps(r, sort_keys=True) + "\n")

    psi_budget = rc.getint("benchmark", "psi_budget")
    if psi_budget > 0:
        _run_psi(rc, task, seed, psi_budget,
                 rc.getint("benchmark", "psi_runs"), out_dir, key)
    _log(f"benchmark written to {csv_path}")
    return 0


def hash_pair(detector: str, n: int) -> int:
    return int(hashlib.sha256(f"{detector}:{n}".encode())
               .hexdigest()[:12], 16)


def _run_psi(rc, task, seed, budget, runs, out_dir, key):
    from .detectron import prepare_task
    data, target_X, f = prepare_task(task, RngStream(seed, 0).split(6))
    n = min(rc.getint("test", "sample_size"), target_X.shape[0],
            len(data.holdout))
    config = learner_from_config(rc)
    curves_q, curves_p = [], []
    for r in range(runs):
        rng = RngStream(seed, 0).split(7).split(r)
        qi = rng.sample_without_replacement(target_X.shape[0], n)
        pi = rng.sample_without_replacement(len(data.holdout), n)
        curves_q.append(disagreement_curve(config, data, target_X[qi], f,
                                           budget, rng.split(1)))
        curves_p.append(disagreement_curve(config, data,
                                           data.holdout.features[pi], f,
                                           budget, rng.split(2)))
    psi, se = disagreement_statistic_psi(curves_q, curves_p)
    doc = {"kind": "psi_curve", "budget_steps": budget, "runs": runs,
           "sample_size": n, "seed": seed,
           "psi": [float(v) for v in psi],
           "std_err": [float(v) for v in se]}
    path = os.path.join(out_dir, f"psi_{key}_{seed}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
    _emit_validated(doc, "psi_curve")
    _log(f"psi curve ({runs} paired runs, {budget} steps) -> {path}")


def cmd_report(args) -> int:
    results_dir = args.results
    if not os.path.isdir(results_dir):
        raise CliError(f"results directory not found: {results_dir}")
    verdicts = []
    bench_rows = []
    psi_docs = []
    for name in sorted(os.listdir(results_dir)):
        path = os.path.join(results_dir, name)
        if name.startswith("verdicts_") and name.endswith(".jsonl"):
            with open(path, encoding="utf-8") as fh:
                verdicts.extend(json.loads(line) for line in fh if line.strip())
        elif name.startswith("benchmark_") and name.endswith(".jsonl"):
            with open(path, encoding="utf-8") as fh:
                bench_rows.extend(json.loads(line) for line in fh
                                  if line.strip())
        elif name.startswith("psi_") and name.endswith(".json"):
            with open(path, encoding="utf-8") as fh:
                psi_docs.append(json.load(fh))
    if not verdicts and not bench_rows and not psi_docs:
        raise CliError(f"no results found in {results_dir}")

    by_test: dict = {}
    for v in verdicts:
        agg = by_test.setdefault(v["test"], {"runs": 0, "detections": 0})
        agg["runs"] += 1
        agg["detections"] += bool(v["shift_detected"])
    for test_name in sorted(by_test):
        agg = by_test[test_name]
        rate = agg["detections"] / agg["runs"]
        _log(f"{test_name}: {agg['detections']}/{agg['runs']} detections "
             f"(rate {rate:.3f})")
        _emit_validated({"kind": "report_rate", "test": test_name,
                         "runs": agg["runs"],
                         "detections": agg["detections"],
                         "rate": rate}, "report_rate")
    for row in bench_rows:
        _log(f"benchmark {row['detector']} N={row['N']}: "
             f"{row['tpr']:.2f} +/- {row['std_err']:.2f}")
        _emit(row)

    if psi_docs:
        psi_csv = os.path.join(results_dir, "psi_curve.csv")
        with open(psi_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv_mod.writer(fh)
            writer.writerow(["source_seed", "step", "psi", "std_err"])
            for doc in psi_docs:
                for step, (p, s) in enumerate(zip(doc["psi"],
                                                  doc["std_err"]), start=1):
                    writer.writerow([doc["seed"], step, f"{p:.6f}",
                                     f"{s:.6f}"])
        _log(f"psi table -> {psi_csv}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftguard",
        description="Detect harmful covariate shift from small unlabeled "
                    "samples with constrained-disagreement ensembles.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel calibration workers")

    p_cal = sub.add_parser("calibrate", help="estimate null distributions")
    p_cal.add_argument("config")
    add_common(p_cal)
    p_cal.set_defaults(fn=cmd_calibrate)

    p_test = sub.add_parser("test", help="test one candidate sample")
    p_test.add_argument("config")
    p_test.add_argument("q", help="unlabeled CSV of candidate samples")
    p_test.add_argument("calibration", help="calibration JSON path")
    p_test.add_argument("--test", choices=("disagreement", "entropy", "both"),
                        default="both")
    p_test.add_argument("--strict-exit", action="store_true",
                        help="exit 2 when shift is detected")
    add_common(p_test)
    p_test.set_defaults(fn=cmd_test)

    p_bench = sub.add_parser("benchmark", help="power table over detectors")
    p_bench.add_argument("config")
    add_common(p_bench)
    p_bench.set_defaults(fn=cmd_benchmark)

    p_rep = sub.add_parser("report", help="aggregate results directory")
    p_rep.add_argument("results")
    p_rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
