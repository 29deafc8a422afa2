"""Batch experiment runner: ``run``, ``validate`` and ``audit`` subcommands.

Configs are YAML trees.  Any key may be overridden per sweep point through
the top-level ``sweep`` mapping of dotted keys to value lists; points are the
cartesian product in key order.
"""

import argparse
import copy
import csv
import hashlib
import itertools
import json
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import yaml

from .events import EventActivation, FullActivation, RandomActivation
from .metrics import (
    MetricsSink,
    write_records_csv,
    write_runtime_csv,
    write_summary_csv,
    write_timing_csv,
)
from .optimizers import OPTIMIZER_KINDS, OptimizerSpec
from .protocol import NonFiniteLossError, Transport, build_simulation
from .regret_audit import GradientTrace, empirical_dlr, sublinearity_slope, write_series_csv
from .streams import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    ClassSampler,
    DataStream,
    FeaturePartition,
    GaussianClassSource,
    IdxError,
    LabeledDataset,
    load_csv,
    load_idx_pair,
    read_idx_header,
)

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_PARTIAL = 0, 1, 2, 3

DEFAULTS = {
    "dataset": {
        "kind": "mnist-idx",
        "images": None,
        "labels": None,
        "path": None,
        "label_column": 0,
        "skip_header": False,
        "max_shift": 0,
        "dim": 784,
        "num_classes": 10,
        "separation": 1.0,
        "noise": 1.0,
    },
    "clients": 4,
    "partition": "even",
    "model": {"embed_dim": 64, "client_hidden": [], "server_hidden": [256]},
    "optimizer": {
        "kind": "dlr", "window": 10, "alpha": 0.95,
        "lr_server": 0.01, "lr_client": 0.01, "decay": "constant",
    },
    "activation": {"kind": "full", "p": 0.5, "threshold": 0.0},
    "stream": {"mode": "stationary", "period": 50},
    "rounds": 200_000,
    "seeds": {"data": 0, "init": 0, "activation": 0},
    "metrics": {
        "window": 20_000, "include_query_bytes": False,
        "event_log": False, "records": False,
    },
    "audit": {"dlr": False, "l": None, "alpha": None, "checkpoints": None,
              "save_trace": False},
    "output_dir": "runs",
    "workers": 1,
    "sweep": {},
}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e9``-style floats (YAML 1.1 wants ``1.0e+9``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                    |[0-9][0-9_]*[eE][-+]?[0-9]+
                    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                    |[-+]?\.(?:inf|Inf|INF)
                    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


# Config handling

def _merge(base, override, prefix, errors):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        path = f"{prefix}{key}"
        if key not in base:
            errors.append(f"{path}: unknown key")
        elif isinstance(base[key], dict) and key != "sweep":
            if not isinstance(value, dict):
                errors.append(f"{path}: expected a mapping")
            else:
                out[key] = _merge(base[key], value, path + ".", errors)
        else:
            out[key] = value
    return out


def parse_config(text):
    """YAML text to a fully-defaulted config tree; raises :class:`ConfigError`."""
    try:
        raw = yaml.load(text, Loader=_Loader) or {}
    except yaml.YAMLError as e:
        raise ConfigError([f"config is not valid YAML: {e}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a mapping at the top level"])
    errors = []
    cfg = _merge(DEFAULTS, raw, "", errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError([f"cannot read config {path}: {e.strerror}"]) from None
    return parse_config(text)


def canonical(cfg):
    """Canonical text form: sorted-key JSON."""
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def serialize_config(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)


# keys that choose where and how fast a run executes, not what it computes
_EXECUTION_KEYS = ("output_dir", "workers")


def config_hash(cfg):
    """Short digest of everything that affects results."""
    body = {k: v for k, v in cfg.items() if k not in _EXECUTION_KEYS}
    return hashlib.sha256(canonical(body).encode()).hexdigest()[:16]


def set_dotted(cfg, key, value):
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError([f"sweep.{key}: unknown key"])
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError([f"sweep.{key}: unknown key"])
    node[parts[-1]] = value


def expand_sweep(cfg):
    """List of ``(label, point_config)``; a single unlabeled point without a sweep."""
    sweep = cfg.get("sweep") or {}
    base = copy.deepcopy(cfg)
    base["sweep"] = {}
    if not sweep:
        return [("point0", base)]
    keys = list(sweep)
    for k in keys:
        if not isinstance(sweep[k], list) or not sweep[k]:
            raise ConfigError([f"sweep.{k}: expected a non-empty list"])
    points = []
    for values in itertools.product(*(sweep[k] for k in keys)):
        point = copy.deepcopy(base)
        for k, v in zip(keys, values):
            set_dotted(point, k, v)
        label = "__".join(f"{k}={v}" for k, v in zip(keys, values))
        points.append((label.replace("/", "_").replace(" ", ""), point))
    return points


def _partition(cfg, dim):
    spec = cfg["partition"]
    if spec == "even":
        return FeaturePartition.even(dim, cfg["clients"])
    return FeaturePartition(tuple(spec))


def _dataset_dim(cfg, errors):
    """Feature dimension from headers only (None when unknown)."""
    ds = cfg["dataset"]
    kind = ds["kind"]
    if kind == "synthetic":
        return ds["dim"]
    if kind == "mnist-idx":
        dims = {}
        for key, magic in (("images", IDX_IMAGES_MAGIC), ("labels", IDX_LABELS_MAGIC)):
            path = ds[key]
            if not path:
                errors.append(f"dataset.{key}: required for mnist-idx")
            elif not os.path.exists(path):
                errors.append(f"dataset.{key}: path {path} does not exist")
            else:
                try:
                    found, shape = read_idx_header(path)
                except IdxError as e:
                    errors.append(f"dataset.{key}: {e}")
                    continue
                if found != magic:
                    errors.append(f"dataset.{key}: {path} is not an IDX {key} file")
                dims[key] = shape
        if "images" in dims and "labels" in dims and dims["images"][0] != dims["labels"][0]:
            errors.append(
                f"dataset: {dims['images'][0]} images but {dims['labels'][0]} labels"
            )
        if "images" in dims and len(dims["images"]) == 3:
            return dims["images"][1] * dims["images"][2]
        return None
    if kind == "csv":
        path = ds["path"]
        if not path:
            errors.append("dataset.path: required for csv")
        elif not os.path.exists(path):
            errors.append(f"dataset.path: path {path} does not exist")
        else:
            with open(path, newline="") as f:
                reader = csv.reader(f)
                first = next(reader, None)
                if ds["skip_header"]:
                    first = next(reader, None)
            if not first:
                errors.append(f"dataset.path: {path} has no data rows")
            else:
                return len(first) - 1
        return None
    errors.append(f"dataset.kind: must be one of mnist-idx, csv, synthetic; got {kind!r}")
    return None


def _check_range(errors, name, value, lo=None, hi=None, lo_open=False, hi_open=False,
                 integer=False, why=""):
    ok_type = isinstance(value, int) if integer else isinstance(value, (int, float))
    if isinstance(value, bool) or not ok_type:
        errors.append(f"{name}: expected {'an integer' if integer else 'a number'}, got {value!r}")
        return
    bad = ((lo is not None and (value <= lo if lo_open else value < lo))
           or (hi is not None and (value >= hi if hi_open else value > hi)))
    if bad:
        lo_s = "" if lo is None else f"{lo} {'<' if lo_open else '<='} "
        hi_s = "" if hi is None else f" {'<' if hi_open else '<='} {hi}"
        errors.append(f"{name}: {value!r} outside {lo_s}{name.split('.')[-1]}{hi_s}{why}")


def validate_point(cfg):
    """Every statically checkable invariant of one point; returns a list of messages."""
    errors = []
    M = cfg["clients"]
    _check_range(errors, "clients", M, lo=1, integer=True)
    _check_range(errors, "rounds", cfg["rounds"], lo=1, integer=True)

    opt = cfg["optimizer"]
    if opt["kind"] not in OPTIMIZER_KINDS:
        errors.append(f"optimizer.kind: must be one of {OPTIMIZER_KINDS}, got {opt['kind']!r}")
    _check_range(errors, "optimizer.window", opt["window"], lo=1, integer=True)
    _check_range(errors, "optimizer.alpha", opt["alpha"], lo=0, hi=1, lo_open=True,
                 hi_open=True, why=" (the exponential weights need 0 < alpha < 1)")
    for k in ("lr_server", "lr_client"):
        _check_range(errors, f"optimizer.{k}", opt[k], lo=0, lo_open=True)
    if opt["decay"] not in ("constant", "inv_sqrt"):
        errors.append(f"optimizer.decay: must be constant or inv_sqrt, got {opt['decay']!r}")

    act = cfg["activation"]
    if act["kind"] == "random":
        p = act["p"]
        probs = p if isinstance(p, list) else [p]
        if isinstance(p, list) and isinstance(M, int) and len(p) != M:
            errors.append(f"activation.p: {len(p)} probabilities for {M} clients")
        for i, q in enumerate(probs):
            _check_range(errors, f"activation.p[{i}]" if isinstance(p, list) else "activation.p",
                         q, lo=0, hi=1)
    elif act["kind"] == "event":
        _check_range(errors, "activation.threshold", act["threshold"])
    elif act["kind"] != "full":
        errors.append(f"activation.kind: must be full, random or event, got {act['kind']!r}")

    st = cfg["stream"]
    if st["mode"] not in ("stationary", "drift"):
        errors.append(f"stream.mode: must be stationary or drift, got {st['mode']!r}")
    if st["mode"] == "drift":
        _check_range(errors, "stream.period", st["period"], lo=1, integer=True)

    for k in ("data", "init", "activation"):
        _check_range(errors, f"seeds.{k}", cfg["seeds"][k], lo=0, integer=True)
    _check_range(errors, "metrics.window", cfg["metrics"]["window"], lo=1, integer=True)

    model = cfg["model"]
    _check_range(errors, "model.embed_dim", model["embed_dim"], lo=1, integer=True)
    for key in ("client_hidden", "server_hidden"):
        if not isinstance(model[key], list):
            errors.append(f"model.{key}: expected a list of widths")
        else:
            for i, w in enumerate(model[key]):
                _check_range(errors, f"model.{key}[{i}]", w, lo=1, integer=True)

    ds = cfg["dataset"]
    _check_range(errors, "dataset.max_shift", ds["max_shift"], lo=0, integer=True)
    if ds["kind"] == "synthetic":
        _check_range(errors, "dataset.dim", ds["dim"], lo=1, integer=True)
        _check_range(errors, "dataset.num_classes", ds["num_classes"], lo=2, integer=True)
        _check_range(errors, "dataset.noise", ds["noise"], lo=0)
    dim = _dataset_dim(cfg, errors)

    part = cfg["partition"]
    if part != "even":
        if not isinstance(part, list) or len(part) < 2:
            errors.append("partition: expected 'even' or a list of cut points [0, ..., dim]")
        else:
            cuts = part
            if cuts[0] != 0 or any(b <= a for a, b in zip(cuts, cuts[1:])):
                errors.append(f"partition: cut points must start at 0 and increase: {cuts}")
            if isinstance(M, int) and len(cuts) - 1 != M:
                errors.append(f"partition: {len(cuts) - 1} slices for {M} clients")
            if dim is not None and cuts[-1] != dim:
                errors.append(f"partition: covers {cuts[-1]} of {dim} features")
    elif dim is not None and isinstance(M, int) and M > dim:
        errors.append(f"partition: cannot split {dim} features among {M} clients")

    aud = cfg["audit"]
    if aud["l"] is not None:
        _check_range(errors, "audit.l", aud["l"], lo=1, integer=True)
    if aud["alpha"] is not None:
        _check_range(errors, "audit.alpha", aud["alpha"], lo=0, hi=1, lo_open=True, hi_open=True)
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        errors.append(f"workers: expected a positive integer, got {cfg['workers']!r}")
    return errors


def validate_config(cfg):
    """Aggregated diagnostics over every sweep point (deduplicated, in order)."""
    try:
        points = expand_sweep(cfg)
    except ConfigError as e:
        return e.errors
    seen = []
    for label, point in points:
        for msg in validate_point(point):
            msg = msg if len(points) == 1 else f"[{label}] {msg}"
            if msg not in seen:
                seen.append(msg)
    return seen


# Running

def load_dataset(cfg):
    ds = cfg["dataset"]
    if ds["kind"] == "mnist-idx":
        X, y = load_idx_pair(ds["images"], ds["labels"])
        return LabeledDataset(X, y, image_shape=(28, 28) if X.shape[1] == 784 else None,
                              max_shift=ds["max_shift"])
    if ds["kind"] == "csv":
        X, y = load_csv(ds["path"], label_column=ds["label_column"],
                        skip_header=ds["skip_header"])
        return LabeledDataset(X, y)
    rng = np.random.default_rng([cfg["seeds"]["data"], 1])
    return GaussianClassSource(ds["dim"], ds["num_classes"], rng, ds["separation"], ds["noise"])


def make_policy(cfg):
    act = cfg["activation"]
    M = cfg["clients"]
    if act["kind"] == "full":
        return FullActivation()
    if act["kind"] == "random":
        p = act["p"]
        return RandomActivation(tuple(p)) if isinstance(p, list) else RandomActivation.uniform(p, M)
    return EventActivation(float(act["threshold"]))


def run_point(cfg, out_dir, dataset=None):
    """Run one sweep point into ``out_dir``; returns a manifest row."""
    os.makedirs(out_dir, exist_ok=True)
    seeds = cfg["seeds"]
    row = {"config_hash": config_hash(cfg), "seed_data": seeds["data"],
           "seed_init": seeds["init"], "seed_activation": seeds["activation"]}
    with open(os.path.join(out_dir, "config.yaml"), "w") as f:
        f.write(serialize_config(cfg))
    artifacts = ["config.yaml"]
    dataset = dataset if dataset is not None else load_dataset(cfg)
    M = cfg["clients"]
    partition = _partition(cfg, dataset.dim)
    period = cfg["stream"]["period"] if cfg["stream"]["mode"] == "drift" else None
    num_classes = dataset.num_classes
    stream = DataStream(dataset, partition, ClassSampler(num_classes, period),
                        np.random.default_rng(seeds["data"]))
    o = cfg["optimizer"]
    opt = OptimizerSpec(o["kind"], o["window"], o["alpha"], o["lr_server"], o["lr_client"],
                        o["decay"])
    met = cfg["metrics"]
    log_path = os.path.join(out_dir, "events.csv") if met["event_log"] else None
    transport = Transport(event_log=log_path)
    aud = cfg["audit"]
    model = cfg["model"]
    sim = build_simulation(
        stream, make_policy(cfg), opt, M, embed_dim=model["embed_dim"],
        server_hidden=tuple(model["server_hidden"]), client_hidden=tuple(model["client_hidden"]),
        num_classes=num_classes, init_rng=np.random.default_rng(seeds["init"]),
        activation_rng=np.random.default_rng(seeds["activation"]),
        record_trace=bool(aud["dlr"]), transport=transport,
    )
    sink = MetricsSink(M, met["window"], keep_records=bool(met["records"]),
                       include_query_bytes=met["include_query_bytes"])
    status, message = "ok", ""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            sim.run_session(cfg["rounds"], sink)
    except NonFiniteLossError as e:
        status, message = "non-finite-loss", str(e)
    finally:
        transport.close()
    if log_path:
        artifacts.append("events.csv")
    partial = sink.window.flush() is not None if sink.rounds else False
    write_runtime_csv(os.path.join(out_dir, "runtime_error.csv"), sink.points)
    artifacts.append("runtime_error.csv")
    empty = 0
    if sink.rounds:
        summary = sink.summary()
        empty = summary.empty_activation_rounds
        write_summary_csv(os.path.join(out_dir, "summary.csv"), [summary], ["session"])
        write_timing_csv(os.path.join(out_dir, "timing.csv"), [summary], ["session"])
        artifacts += ["summary.csv", "timing.csv"]
    if met["records"]:
        write_records_csv(os.path.join(out_dir, "records.csv"), sink.records, include_timing=False)
        artifacts.append("records.csv")
    if aud["dlr"] and sim.trace:
        trace = GradientTrace.from_rows(sim.trace)
        l = aud["l"] or opt.window
        alpha = aud["alpha"] or opt.alpha
        series = empirical_dlr(trace, l, alpha, aud["checkpoints"] and
                               [c for c in aud["checkpoints"] if c <= len(trace)])
        write_series_csv(os.path.join(out_dir, "dlr_series.csv"), series, "dlr_value")
        artifacts.append("dlr_series.csv")
        if aud["save_trace"]:
            trace.save(os.path.join(out_dir, "trace.bin"))
            artifacts.append("trace.bin")
    row.update({"status": status, "message": message, "rounds_completed": sink.rounds,
                "artifacts": ";".join(artifacts), "empty_activation_rounds": empty,
                "partial_windows": int(partial)})
    return row


def _run_point_job(args):
    label, cfg, out_dir = args
    try:
        return label, run_point(cfg, out_dir)
    except (OSError, IdxError, ValueError) as e:
        return label, {"config_hash": config_hash(cfg), "status": "error", "message": str(e)}


def run(cfg, output_dir=None):
    """Run every sweep point; returns ``(exit_code, manifest_rows)``."""
    errors = validate_config(cfg)
    if errors:
        raise ConfigError(errors)
    out_root = output_dir or cfg["output_dir"]
    os.makedirs(out_root, exist_ok=True)
    points = expand_sweep(cfg)
    single = len(points) == 1
    jobs = [(label, point, out_root if single else os.path.join(out_root, label))
            for label, point in points]
    results = []
    if cfg["workers"] > 1 and not single:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            results = list(pool.map(_run_point_job, jobs))
    else:
        cache = {}
        for label, point, out_dir in jobs:
            key = canonical({"dataset": point["dataset"], "seed": point["seeds"]["data"]})
            try:
                if key not in cache:
                    cache = {key: load_dataset(point)}
                results.append((label, run_point(point, out_dir, cache[key])))
            except (OSError, IdxError, ValueError) as e:
                results.append((label, {"config_hash": config_hash(point), "status": "error",
                                        "message": str(e)}))
    rows = []
    for label, r in results:
        rows.append({"point": label, **r})
    _write_manifest(os.path.join(out_root, "manifest.csv"), rows)
    failed = sum(r["status"] != "ok" for r in rows)
    hard = sum(r["status"] == "error" for r in rows)
    if failed == 0:
        return EXIT_OK, rows
    if hard == len(rows):
        return EXIT_ABORT, rows
    return EXIT_PARTIAL, rows


_MANIFEST_FIELDS = ["point", "config_hash", "seed_data", "seed_init", "seed_activation",
                    "status", "message", "rounds_completed", "artifacts",
                    "empty_activation_rounds", "partial_windows"]


def _write_manifest(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=_MANIFEST_FIELDS, restval="")
        w.writeheader()
        w.writerows(rows)


def read_manifest(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# Entry point

def _apply_seed_overrides(cfg, args):
    for k in ("data", "init", "activation"):
        v = getattr(args, f"seed_{k}")
        if v is not None:
            cfg["seeds"][k] = v


def build_parser():
    p = argparse.ArgumentParser(prog="evfl", description="Online vertical FL simulator")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "validate"):
        s = sub.add_parser(name)
        s.add_argument("config")
        s.add_argument("--output-dir")
        s.add_argument("--seed-data", type=int)
        s.add_argument("--seed-init", type=int)
        s.add_argument("--seed-activation", type=int)
    a = sub.add_parser("audit", help="DLR of a saved gradient trace")
    a.add_argument("trace")
    a.add_argument("--l", type=int, required=True)
    a.add_argument("--alpha", type=float, required=True)
    a.add_argument("--checkpoints", type=int, nargs="*")
    a.add_argument("--output-dir", default=".")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "audit":
        try:
            trace = GradientTrace.load(args.trace)
            series = empirical_dlr(trace, args.l, args.alpha, args.checkpoints)
        except (OSError, ValueError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_ABORT
        os.makedirs(args.output_dir, exist_ok=True)
        write_series_csv(os.path.join(args.output_dir, "dlr_series.csv"), series, "dlr_value")
        print(f"DLR_{args.l}({len(trace)}) = {float(series.values[-1])!r}")
        if args.checkpoints:
            try:
                print(f"log-log slope = {sublinearity_slope(series):.4f}")
            except ValueError as e:
                print(f"slope unavailable: {e}")
        return EXIT_OK

    try:
        cfg = load_config(args.config)
        _apply_seed_overrides(cfg, args)
        if args.output_dir:
            cfg["output_dir"] = args.output_dir
        errors = validate_config(cfg)
    except ConfigError as e:
        errors = e.errors
    if errors:
        for msg in errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(f"config ok: {len(expand_sweep(cfg))} sweep point(s)")
        return EXIT_OK
    code, rows = run(cfg)
    for r in rows:
        print(f"{r['point']}: {r['status']} {r.get('message', '')}".rstrip())
    return code


if __name__ == "__main__":
    sys.exit(main())
