"""Command-line entry point: ``irxfb <command> [--config run.yaml] [overrides]``.

Configuration is a YAML document validated against :data:`SCHEMA`; keys not in
the schema are rejected. Command-line flags override file keys, and
``--set section.key=value`` overrides any single key (the value is parsed as
YAML). Relative artifact paths resolve against ``out_dir``.

Exit status: 0 success, 2 configuration or usage error, 3 I/O error (including
a missing artifact), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import xp
from .fallback import CostMatrix
from .linkchan import LinkConfig
from .mfdet import DetectorConfig, PenaltyLut, build_penalty_lut, default_grid_db
from .mlp import MlpParams, TrainConfig, fit
from .modem import ModFormat

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

FORMAT_NAMES = [f.tag for f in ModFormat]

DEFAULTS = {
    "seed": 0,
    "workers": None,  # None: all available cores
    "out_dir": "irxfb-out",
    "paths": {"lut": "penalty.lut", "weights": "mlp.bin", "costs": "costs.txt"},
    "link": {"n_rx": 2, "k1_layers": 1, "k2_layers": 1, "block_len": 24},
    "detector": {"formats": FORMAT_NAMES, "metric_variant": "log_sum_exp", "k_tilde": 24},
    "lut": {"grid_db": {"start": -10.0, "stop": 30.0, "step": 1.0}, "samples_per_cell": 10000},
    "train": {"snr_db": list(xp.MIXED_SNRS_DB), "learning_rate": 0.01, "batch_size": 16,
              "total_samples": 640000, "restarts": 3, "bayes_samples": 100000},
    "gen_data": {"snr_db": list(xp.MIXED_SNRS_DB), "count": 10000},
    "eval_loss": {"snr_db": list(xp.MIXED_SNRS_DB), "total_samples": 64000, "mixture": True},
    "sweep_error": {"snr_points_db": [0.0, 5.0, 10.0, 15.0, 20.0], "blocks_per_point": 10000,
                    "policies": ["none", "bayes", "dnn"],
                    "format_mix": [f.tag for f in xp.FORMAT_MIX], "inr_offset_db": 0.0},
    "sweep_throughput": {"snr_points_db": [float(s) for s in range(17)],
                         "blocks_per_point": 2000,
                         "policies": ["always_fallback", "genie", "none", "bayes", "dnn"],
                         "desired_format": "QPSK", "interference_format": "16QAM",
                         "inr_offset_db": xp.THROUGHPUT_INR_OFFSET_DB},
}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_FMT = {"type": "string"}
_SNR_SPEC = {"oneOf": [_NUM, {"type": "array", "items": _NUM, "minItems": 1}]}
_POLICIES = {"type": "array", "items": {"enum": list(xp.POLICIES)}, "minItems": 1}

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "workers": {"type": ["integer", "null"], "minimum": 1},
    "out_dir": {"type": "string"},
    "paths": _obj({k: {"type": "string"} for k in ("lut", "weights", "costs")}),
    "link": _obj({k: _POS_INT for k in ("n_rx", "k1_layers", "k2_layers", "block_len")}),
    "detector": _obj({"formats": {"type": "array", "items": _FMT, "minItems": 2},
                      "metric_variant": {"enum": ["literal", "log_sum_exp", "lut"]},
                      "k_tilde": _POS_INT}),
    "lut": _obj({"grid_db": _obj({"start": _NUM, "stop": _NUM,
                                  "step": {"type": "number", "exclusiveMinimum": 0}}),
                 "samples_per_cell": {"type": "integer", "minimum": 10000}}),
    "train": _obj({"snr_db": _SNR_SPEC, "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                   "batch_size": _POS_INT, "total_samples": _POS_INT, "restarts": _POS_INT,
                   "bayes_samples": _POS_INT}),
    "gen_data": _obj({"snr_db": _SNR_SPEC, "count": _POS_INT}),
    "eval_loss": _obj({"snr_db": {"type": "array", "items": _NUM, "minItems": 1},
                       "total_samples": _POS_INT, "mixture": {"type": "boolean"}}),
    "sweep_error": _obj({"snr_points_db": {"type": "array", "items": _NUM, "minItems": 1},
                         "blocks_per_point": _POS_INT, "policies": _POLICIES,
                         "format_mix": {"type": "array", "items": _FMT, "minItems": 1},
                         "inr_offset_db": _NUM}),
    "sweep_throughput": _obj({"snr_points_db": {"type": "array", "items": _NUM, "minItems": 1},
                              "blocks_per_point": _POS_INT, "policies": _POLICIES,
                              "desired_format": _FMT, "interference_format": _FMT,
                              "inr_offset_db": _NUM}),
})


class ConfigError(ValueError):
    pass


class ArtifactError(OSError):
    pass


# ---------------------------------------------------------------- configuration

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(out.get(k), dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_key(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config section in --set {dotted!r}")
        node = node[k]
    node[keys[-1]] = value


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None
    for fmt in _all_format_names(cfg):
        try:
            ModFormat.parse(fmt)
        except ValueError as e:
            raise ConfigError(str(e)) from None


def _all_format_names(cfg: dict):
    yield from cfg["detector"]["formats"]
    yield from cfg["sweep_error"]["format_mix"]
    yield cfg["sweep_throughput"]["desired_format"]
    yield cfg["sweep_throughput"]["interference_format"]


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the YAML file, then ``(dotted_key, value)`` overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ArtifactError(f"cannot read config {path}: {e.strerror}") from None
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = _merge(cfg, doc)
    for key, value in overrides:
        _set_key(cfg, key, value)
    validate(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical config, leaving out keys that cannot change results."""
    doc = {k: v for k, v in cfg.items() if k not in ("workers", "out_dir")}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def header_lines(cfg: dict, command: str) -> list[str]:
    return [f"irxfb {command}", f"config_sha256={config_hash(cfg)}", f"seed={cfg['seed']}"]


def artifact_path(cfg: dict, name: str) -> Path:
    p = Path(cfg["paths"][name])
    return p if p.is_absolute() else Path(cfg["out_dir"]) / p


def _workers(cfg: dict) -> int:
    return cfg["workers"] or os.cpu_count() or 1


def detector_config(cfg: dict) -> DetectorConfig:
    d = cfg["detector"]
    return DetectorConfig(tuple(d["formats"]), d["metric_variant"], d["k_tilde"])


def train_config(cfg: dict, total_samples: int | None = None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(t["learning_rate"], t["batch_size"],
                       total_samples or t["total_samples"], cfg["seed"])


def _link(cfg: dict, **kw) -> LinkConfig:
    return LinkConfig(**cfg["link"], **kw)


# ---------------------------------------------------------------- file output

def _write(path: Path, data) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data)
    except OSError as e:
        raise ArtifactError(f"cannot write {path}: {e.strerror}") from None
    return path


def _comment(lines) -> str:
    return "".join(f"# {line}\n" for line in lines)


def _write_binary(path: Path, data: bytes, head) -> None:
    """Binary formats are fixed, so their header comment goes to a ``.meta`` sidecar."""
    _write(path, data)
    _write(path.with_name(path.name + ".meta"), _comment(head))


def _csv(head, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(_comment(head))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def loss_csv(trace, head=()) -> str:
    rows = ((i + 1, xp._fmt(float(b)), xp._fmt(float(s)))
            for i, (b, s) in enumerate(zip(trace.batch_loss, trace.smoothed)))
    return _csv(head, ("iteration", "batch_loss", "smoothed_loss"), rows)


def _require(path: Path) -> Path:
    if not path.is_file():
        raise ArtifactError(f"missing artifact file: {path}")
    return path


def load_artifacts(cfg: dict, policies) -> xp.Artifacts:
    """Load only what the requested policies and detector variant need."""
    art = xp.Artifacts()
    try:
        if "bayes" in policies:
            art.costs = CostMatrix.load(_require(artifact_path(cfg, "costs")))
        if "dnn" in policies:
            art.mlp = MlpParams.load(_require(artifact_path(cfg, "weights")))
        if cfg["detector"]["metric_variant"] == "lut":
            path = _require(artifact_path(cfg, "lut"))
            art.lut = PenaltyLut.load(path, detector_config(cfg).formats)
    except ValueError as e:
        raise ArtifactError(f"corrupt artifact: {e}") from None
    return art


# ---------------------------------------------------------------- commands

def cmd_build_lut(cfg: dict) -> int:
    g = cfg["lut"]["grid_db"]
    grid = default_grid_db(g["start"], g["stop"], g["step"])
    lut = build_penalty_lut(detector_config(cfg).formats, grid,
                            cfg["lut"]["samples_per_cell"], cfg["seed"])
    path = artifact_path(cfg, "lut")
    _write_binary(path, lut.to_bytes(), header_lines(cfg, "build-lut"))
    print(f"wrote {path} ({lut.grid.size} grid points x {len(lut.formats)} formats)")
    print("max standard error per format:")
    for f, se in zip(lut.formats, lut.std_err):
        print(f"  {f.tag:>7s}  {se.max():.3e}")
    return EXIT_OK


def _lut_if_needed(cfg: dict):
    if cfg["detector"]["metric_variant"] != "lut":
        return None
    return load_artifacts(cfg, ()).lut


def cmd_train(cfg: dict) -> int:
    """Train the fall-back network and calibrate the Bayes cost on held-out data."""
    det = detector_config(cfg)
    t = cfg["train"]
    tc = train_config(cfg)
    lut = _lut_if_needed(cfg)
    seed = cfg["seed"]
    ts = xp.gen_training_set(det.formats, t["snr_db"], tc.total_samples, det.k_tilde,
                             (seed, 1), det.metric_variant, lut)
    params, trace = fit(tc, ts.mu, ts.labels, t["restarts"])
    costs = xp.calibrate_bayes(t["snr_db"], t["bayes_samples"], det.formats, det.k_tilde,
                               (seed, 2), lut)
    head = header_lines(cfg, "train")
    wpath, cpath = artifact_path(cfg, "weights"), artifact_path(cfg, "costs")
    lpath = Path(cfg["out_dir"]) / "train_loss.csv"
    _write_binary(wpath, params.to_bytes(), head)
    _write(cpath, _comment(head) + costs.to_text())
    _write(lpath, loss_csv(trace, head))
    print(f"wrote {wpath}, {cpath}, {lpath}")
    print(f"final smoothed loss {trace.final:.6f}; bayes fall-back cost "
          f"{costs.c[0, -1]:.6f}")
    return EXIT_OK


def cmd_gen_data(cfg: dict) -> int:
    det = detector_config(cfg)
    g = cfg["gen_data"]
    ts = xp.gen_training_set(det.formats, g["snr_db"], g["count"], det.k_tilde,
                             (cfg["seed"], 1), det.metric_variant, _lut_if_needed(cfg))
    tags = [f.tag for f in det.formats]
    cols = ("snr_db", "true_format", "detected_format", "label") + tuple(f"mu_{t}" for t in tags)
    rows = ([xp._fmt(float(s)), tags[a], tags[b], int(lab)] + [xp._fmt(float(v)) for v in mu]
            for s, a, b, lab, mu in zip(ts.snr_db, ts.true_index, ts.detected, ts.labels, ts.mu))
    path = _write(Path(cfg["out_dir"]) / "training_data.csv",
                  _csv(header_lines(cfg, "gen-data"), cols, rows))
    print(f"wrote {path} ({g['count']} samples, {ts.labels.mean():.4f} labelled wrong)")
    return EXIT_OK


def cmd_eval_loss(cfg: dict) -> int:
    det = detector_config(cfg)
    e = cfg["eval_loss"]
    tc = train_config(cfg, e["total_samples"])
    traces, summary = xp.loss_curves(tuple(e["snr_db"]), tc, det.formats, det.k_tilde,
                                     cfg["seed"], e["mixture"], cfg["train"]["restarts"])
    head = header_lines(cfg, "eval-loss")
    out = Path(cfg["out_dir"])
    for name, trace in traces.items():
        _write(out / f"loss_{name}.csv", loss_csv(trace, head))
    rows = [(k, xp._fmt(float(v))) for k, v in summary.items()]
    _write(out / "loss_summary.csv", _csv(head, ("run", "final_smoothed_loss"), rows))
    for k, v in rows:
        print(f"{k:>16s}  {v}")
    return EXIT_OK


def _sweep(cfg: dict, section: str, command: str) -> int:
    s = cfg[section]
    policies = tuple(s["policies"])
    art = load_artifacts(cfg, policies)
    if section == "sweep_error":
        link = _link(cfg)
        mix = tuple(s["format_mix"])
    else:
        link = _link(cfg, desired_format=s["desired_format"],
                     interference_format=s["interference_format"])
        mix = None
    spec = xp.SweepSpec(tuple(float(v) for v in s["snr_points_db"]), s["blocks_per_point"],
                        link, policies, cfg["seed"], detector_config(cfg), mix,
                        inr_offset_db=s["inr_offset_db"])
    run = xp.error_rate_sweep if section == "sweep_error" else xp.throughput_sweep
    reports = run(spec, art, _workers(cfg))
    path = Path(cfg["out_dir"]) / f"{command.replace('-', '_')}.csv"
    _write(path, xp.reports_to_csv(reports, header_lines(cfg, command)))
    print(f"wrote {path} ({len(reports)} rows)")
    return EXIT_OK


def cmd_sweep_error(cfg: dict) -> int:
    return _sweep(cfg, "sweep_error", "sweep-error")


def cmd_sweep_throughput(cfg: dict) -> int:
    return _sweep(cfg, "sweep_throughput", "sweep-throughput")


COMMANDS = {
    "build-lut": (cmd_build_lut, "tabulate the min-distance penalty"),
    "train": (cmd_train, "train the fall-back network and calibrate the Bayes cost"),
    "sweep-error": (cmd_sweep_error, "detection / fall-back error rates vs SNR"),
    "sweep-throughput": (cmd_sweep_throughput, "coded-block throughput vs SNR"),
    "gen-data": (cmd_gen_data, "dump a labelled metric-vector dataset"),
    "eval-loss": (cmd_eval_loss, "training-loss curves per SNR and for the mixture"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="irxfb", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--workers", type=int, help="worker processes (default: all cores)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--policies", help="comma-separated policy list (sweeps)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.total_samples=1600")
    return ap


def _overrides(args) -> list:
    out = []
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out.append((key.strip(), yaml.safe_load(raw)))
        except yaml.YAMLError:
            raise ConfigError(f"cannot parse value in --set {item!r}") from None
    if args.seed is not None:
        out.append(("seed", args.seed))
    if args.workers is not None:
        out.append(("workers", args.workers))
    if args.out is not None:
        out.append(("out_dir", args.out))
    if args.policies is not None:
        section = args.command.replace("-", "_")
        if section not in ("sweep_error", "sweep_throughput"):
            raise ConfigError("--policies only applies to sweep commands")
        out.append((f"{section}.policies", [p.strip() for p in args.policies.split(",")]))
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command][0](cfg)
    except ConfigError as e:
        print(f"irxfb: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"irxfb: {e}", file=sys.stderr)
        return EXIT_IO
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as e:
        print(f"irxfb: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"irxfb: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
