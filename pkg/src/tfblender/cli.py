"""Command-line front end.

Every subcommand resolves one configuration (defaults, then ``--config``,
then ``--set`` overrides, then explicit flags), writes its artifacts under
``--output`` and records the resolved configuration in ``run_manifest.json``.

Exit codes: 0 success, 1 configuration error, 2 runtime or numerical
failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .blender import BlenderConfig, ConfigError, RelationVariant, load_params, save_params
from .synthetic import FORMAT_VERSION, SceneSpec, generate_sequence, save_sequence
from .tensor import ShapeMismatchError

log = logging.getLogger("tfblender")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
ORACLE_TOLERANCE = 1e-10
GRADCHECK_TOLERANCE = 1e-4
DEFAULT_SWEEP = (0, 2, 4, 6, 8)
SUBCOMMANDS = ("gen", "train", "eval", "gradcheck", "oracle", "tradeoff")


class VerificationFailed(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports usage errors with exit status 2; here they are config errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class RunSettings:
    """Everything a subcommand needs, fully resolved."""

    config: BlenderConfig
    scene: SceneSpec
    train: "TrainSpec"
    neighbors: tuple
    frames: int
    sweep: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "config": self.config.to_json(),
            "scene": self.scene.to_json(),
            "train": self.train.to_json(),
            "neighbors": list(self.neighbors),
            "frames": self.frames,
            "sweep": dict(self.sweep),
        }


_SWEEP_DEFAULTS = {"repetitions": 15, "reuse_pairs": True, "eval_seeds": [1, 3]}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _neighbor_list(text):
    try:
        values = tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise ConfigError("neighbors", f"expected a comma-separated list of integers, got {text!r}")
    if not values or min(values) < 0:
        raise ConfigError("neighbors", "needs at least one non-negative count")
    return values


def build_parser():
    parser = _Parser(prog="tfblender", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file")
    common.add_argument("-o", "--output", type=Path, default=Path("tfblender_out"),
                        help="output directory (created if absent)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override a config key; dotted keys reach scene.* / train.* / sweep.*")
    common.add_argument("--seed", type=int, help="seed for parameters, scenes and training")
    common.add_argument("--delta", type=float)
    common.add_argument("--variant", choices=[v.value for v in RelationVariant])
    common.add_argument("--layers", type=int)
    common.add_argument("--kernel", type=int)
    common.add_argument("--neighbors", help="neighbour count (tradeoff: comma-separated list)")
    common.add_argument("--include-self", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--enable-tr", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--enable-fa", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--enable-fb", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--aggregate-mode", choices=["replace", "residual"])
    common.add_argument("--precision", choices=["single", "double"])
    common.add_argument("--frames", type=int, help="sequence length for gen")
    common.add_argument("--params", type=Path, help="trained parameter directory (eval, tradeoff)")
    common.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen": "generate one synthetic sequence",
        "train": "train the mini-network, then evaluate it",
        "eval": "evaluate parameters against the baselines",
        "gradcheck": "compare analytic and finite-difference gradients",
        "oracle": "compare the blend against the loop-by-loop reference",
        "tradeoff": "time inference with and without blending over neighbour counts",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return parser


def resolve_settings(args):
    """Merge defaults, config file, ``--set`` overrides and flags into :class:`RunSettings`."""
    from .harness import TrainSpec

    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{args.config} is not valid JSON ({exc})")
        if not isinstance(doc, dict):
            raise ConfigError("config", "top level must be a JSON object")

    sections = {"scene": dict(doc.pop("scene", {}) or {}),
                "train": dict(doc.pop("train", {}) or {}),
                "sweep": dict(doc.pop("sweep", {}) or {})}
    top = doc
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "overrides take the form KEY=VALUE")
        head, dot, rest = key.partition(".")
        if dot:
            if head not in sections:
                raise ConfigError(key, "unknown section (scene, train or sweep)")
            sections[head][rest] = _parse_value(value)
        else:
            top[key] = _parse_value(value)

    flag_keys = {"delta": "delta", "variant": "variant", "layers": "layers", "kernel": "kernel",
                 "include_self": "include_self", "aggregate_mode": "aggregate_mode",
                 "precision": "precision", "enable_tr": "enable_tr", "enable_fa": "enable_fa",
                 "enable_fb": "enable_fb"}
    for attr, key in flag_keys.items():
        value = getattr(args, attr)
        if value is not None:
            top[key] = value
    if args.neighbors is not None:
        top["neighbors"] = args.neighbors
    if args.frames is not None:
        top["frames"] = args.frames
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed", "must be non-negative")
        top["seed"] = args.seed
        sections["scene"]["seed"] = args.seed
        sections["train"]["seed"] = args.seed

    neighbors = top.pop("neighbors", None)
    frames = top.pop("frames", 7)
    sweep = {**_SWEEP_DEFAULTS, **sections["sweep"]}
    unknown = sorted(set(sweep) - set(_SWEEP_DEFAULTS))
    if unknown:
        raise ConfigError(f"sweep.{unknown[0]}", "unknown sweep key")

    scene_doc = sections["scene"]
    if "grid" in scene_doc:
        scene_doc["grid"] = tuple(scene_doc["grid"])
    if "degrade_frames" in scene_doc:
        scene_doc["degrade_frames"] = frozenset(scene_doc["degrade_frames"])
    try:
        config = BlenderConfig.from_json(top)
        scene = SceneSpec.from_json(scene_doc)
        if neighbors is not None:
            counts = _neighbor_list(neighbors)
            if args.command != "tradeoff":
                if len(counts) != 1:
                    raise ConfigError("neighbors", f"{args.command} takes a single neighbour count")
                if counts[0] < 1:
                    raise ConfigError("neighbors", f"{args.command} needs at least one neighbour")
                sections["train"]["neighbors"] = counts[0]
        else:
            counts = DEFAULT_SWEEP if args.command == "tradeoff" else None
        train = TrainSpec.from_json(sections["train"])
        if counts is None:
            counts = (train.neighbors,)
        if args.command == "tradeoff" and list(counts) != sorted(counts):
            raise ConfigError("neighbors", "tradeoff counts must be ascending")
        if not isinstance(frames, int) or frames < 3:
            raise ConfigError("frames", "must be an integer >= 3")
    except TypeError as exc:
        raise ConfigError("config", f"malformed value ({exc})")
    return RunSettings(config, scene, train, tuple(counts), frames, sweep)


# -- workflows -------------------------------------------------------------------------------


def _write_json(path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_or_init(args, settings):
    channels = settings.scene.grid[0]
    if args.params is None:
        return settings.config.init_params(channels)
    if not args.params.is_dir():
        raise ConfigError("params", f"parameter directory not found: {args.params}")
    params = load_params(args.params)
    try:
        params.check_compatible(channels, settings.config.variant)
    except ShapeMismatchError as exc:
        raise ConfigError("params", str(exc))
    return params


def _eval_seeds(train_spec):
    return [train_spec.eval_seed(k) for k in range(max(train_spec.eval_sequences, 1))]


def _evaluation(params, settings):
    from .harness import evaluate, suppression_stats

    seeds = _eval_seeds(settings.train)
    summary = {"seeds": seeds, "mse": evaluate(params, settings.config, settings.scene, seeds,
                                               settings.train.sequence_length,
                                               settings.train.neighbors)}
    if settings.config.enable_fb:
        with contextlib.suppress(ValueError):
            summary["suppression"] = suppression_stats(params, settings.config, settings.scene,
                                                       seeds, settings.train.sequence_length,
                                                       settings.train.neighbors)
    return summary


def cmd_gen(args, settings, out):
    pair = generate_sequence(settings.scene, settings.frames)
    save_sequence(out / "sequence", pair)
    print(f"wrote {settings.frames} frames to {out / 'sequence'}")
    return {"sequence": "sequence"}


def cmd_train(args, settings, out):
    from .harness import train
    from .plotting import plot_loss_curve

    params = _load_or_init(args, settings) if args.params else None
    result = train(settings.train, settings.scene, settings.config, params=params)
    save_params(out / "params", result.params)
    rows = result.loss_rows()
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "train_mse", "eval_mse"])
        for step, loss, ev in rows:
            writer.writerow([step, repr(loss), "" if ev is None else repr(ev)])
    plot_loss_curve(rows, out / "loss.svg")
    summary = _evaluation(result.params, settings)
    summary["final_train_mse"] = result.losses[-1]
    _write_json(out / "eval.json", summary)
    mse = summary["mse"]
    print(f"trained {settings.train.steps} steps; eval mse tfblender={mse['tfblender']:.6g} "
          f"uniform={mse['uniform']:.6g}")
    return {"params": "params", "loss_csv": "loss.csv", "loss_svg": "loss.svg",
            "eval": "eval.json"}


def cmd_eval(args, settings, out):
    params = _load_or_init(args, settings)
    summary = _evaluation(params, settings)
    _write_json(out / "eval.json", summary)
    print(json.dumps(summary["mse"], sort_keys=True))
    return {"eval": "eval.json"}


def cmd_gradcheck(args, settings, out):
    from .harness import gradient_suite

    reports = gradient_suite(settings.config, seed=settings.config.seed)
    worst = max(r.max_rel_err for r in reports)
    _write_json(out / "gradcheck.json", {
        "tolerance": GRADCHECK_TOLERANCE,
        "max_rel_err": worst,
        "reports": [r.to_json() for r in reports],
    })
    for r in reports:
        print(f"{r.op:24s} rel={r.max_rel_err:.3e} abs={r.max_abs_err:.3e}")
    if not worst < GRADCHECK_TOLERANCE:
        raise VerificationFailed(f"gradient check failed: max relative error {worst:.3e}")
    return {"gradcheck": "gradcheck.json"}


def cmd_oracle(args, settings, out):
    from .harness import ABLATIONS, oracle_check

    seed = settings.config.seed
    checks = []
    for variant in RelationVariant:
        cfg = settings.config.with_(variant=variant)
        checks.append({"variant": variant.value, "modules": "config",
                       "deviation": oracle_check(cfg, seed)})
    for name, toggles in ABLATIONS.items():
        cfg = settings.config.with_(**toggles)
        checks.append({"variant": cfg.variant.value, "modules": name,
                       "deviation": oracle_check(cfg, seed)})
    worst = max(c["deviation"] for c in checks)
    _write_json(out / "oracle.json", {"tolerance": ORACLE_TOLERANCE, "seed": seed,
                                      "max_deviation": worst, "checks": checks})
    print(f"oracle max deviation {worst:.3e} over {len(checks)} checks")
    if not worst < ORACLE_TOLERANCE:
        raise VerificationFailed(f"oracle deviation {worst:.3e} exceeds {ORACLE_TOLERANCE:g}")
    return {"oracle": "oracle.json"}


def cmd_tradeoff(args, settings, out):
    from .harness import CSV_COLUMNS, tradeoff_sweep
    from .plotting import plot_tradeoff

    params = _load_or_init(args, settings)
    sweep = settings.sweep
    result = tradeoff_sweep(settings.neighbors, settings.config, settings.scene, params,
                            repetitions=int(sweep["repetitions"]),
                            eval_seeds=tuple(sweep["eval_seeds"]),
                            reuse_pairs=bool(sweep["reuse_pairs"]))
    with open(out / "tradeoff.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for record in result.records:
            writer.writerow([v if isinstance(v, (int, str)) else repr(float(v))
                             for v in record.row()])
    plot_tradeoff(result.records, out / "tradeoff.svg")
    _write_json(out / "tradeoff_summary.json", {"components": result.components,
                                                "fits": result.fits})
    for r in result.records:
        print(f"i={r.neighbor_count}: measured_r={r.measured_r:.3f} predicted_r={r.predicted_r:.3f}")
    return {"csv": "tradeoff.csv", "svg": "tradeoff.svg", "summary": "tradeoff_summary.json"}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "oracle": cmd_oracle, "tradeoff": cmd_tradeoff}
TIMING_ARTIFACTS = {"tradeoff": ("tradeoff.csv", "tradeoff.svg", "tradeoff_summary.json")}


def _thread_limit():
    raw = os.environ.get("TFB_THREADS")
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        raise ConfigError("TFB_THREADS", f"must be a positive integer, got {raw!r}")
    return value


def run(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args)
        threads = _thread_limit()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = args.output
    try:
        out.mkdir(parents=True, exist_ok=True)
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(threads) if threads else contextlib.nullcontext()
        started = time.perf_counter()
        with limiter:
            artifacts = COMMANDS[args.command](args, settings, out)
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - started)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        status = EXIT_VERIFY
        artifacts = {}
    except (ArithmeticError, RuntimeError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    else:
        status = EXIT_OK

    manifest = {
        "tool": "tfblender",
        "version": __version__,
        "command": args.command,
        "format_versions": {"manifest": 1, "sequence": FORMAT_VERSION, "tensor": "TFB1"},
        "settings": settings.to_json(),
        "seeds": {"config": settings.config.seed, "scene": settings.scene.seed,
                  "train": settings.train.seed},
        "params": None if args.params is None else "external",
        "artifacts": artifacts,
        "timing_artifacts": list(TIMING_ARTIFACTS.get(args.command, ())),
        "status": status,
    }
    _write_json(out / "run_manifest.json", manifest)
    return status


def main(argv=None):
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
