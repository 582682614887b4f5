"""Command-line entry point.

Exit codes:

    0  success
    1  unexpected internal error
    2  usage error (unknown subcommand or flag, bad argument value)
    3  unreadable or unwritable file
    4  config validation failure
    5  invalid input data (scene, candidate, checkpoint contents)
    6  training aborted on a non-finite loss or gradient
    7  oracle cap exceeded

Errors are reported on stderr as a single JSON line
``{"error": <kind>, "code": <exit code>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .candgen import ORACLE_CAP, OracleCapError, count_candidates, enumerate_candidates, oracle_valid_set, random_baseline
from .geometry import SceneError, load_scene, save_scene
from .tracer import CandidateError, PathCandidate, trace_and_validate
from .trainpipe.canyon import CanyonParams, PlacementError, generate_canyon_scene
from .trainpipe.loop import (
    ArchitectureMismatchError,
    ConfigError,
    TrainConfig,
    TrainingAborted,
    checkpoint_params,
    format_metrics_csv,
    load_checkpoint,
    read_metrics_csv,
    train,
)
from .trainpipe.metrics import evaluate, oracle_sets, scene_metrics

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_FILE = 3
EXIT_CONFIG = 4
EXIT_DATA = 5
EXIT_ABORTED = 6
EXIT_CAP = 7


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("RAYPATH_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError("usage", EXIT_USAGE, f"RAYPATH_THREADS must be an integer, got {env!r}") from None
    return 1


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError("data", EXIT_DATA, f"{path}: malformed JSON: {exc}") from None


def cmd_gen_scene(args) -> None:
    params = CanyonParams()
    if args.params:
        params = CanyonParams.from_dict(_read_json(args.params))
    if args.r_max is not None:
        params = CanyonParams.from_dict({**params.to_dict(), "r_max": args.r_max})
    scene = generate_canyon_scene(np.random.SeedSequence(args.seed), params)
    save_scene(scene, args.out)
    _emit({"out": args.out, "facets": len(scene)})


def cmd_enumerate(args) -> None:
    count_candidates(args.n, args.k)
    for cand in enumerate_candidates(args.n, args.k):
        sys.stdout.write(json.dumps(list(cand.facet_ids)) + "\n")


def cmd_oracle(args) -> None:
    scene = load_scene(args.scene)
    valid = oracle_valid_set(scene, args.k, cap=args.cap, workers=_threads(args))
    with open(args.out, "w") as fh:
        for cand, path in valid.items():
            fh.write(json.dumps({"candidate": list(cand.facet_ids), "points": path.points.tolist()}) + "\n")
    _emit({"out": args.out, "valid": len(valid), "candidates": count_candidates(len(scene), args.k)})


def cmd_trace(args) -> None:
    scene = load_scene(args.scene)
    cand = PathCandidate.parse(args.candidate)
    if max(cand.facet_ids) >= len(scene):
        raise CandidateError(f"facet id out of range for a scene with {len(scene)} facets")
    path, report = trace_and_validate(scene, cand)
    _emit(
        {
            "candidate": list(cand.facet_ids),
            "points": None if path is None else path.points.tolist(),
            "valid": report.valid,
            "failure": report.failure.value,
        }
    )


def cmd_baseline(args) -> None:
    scene = load_scene(args.scene)
    oracle = frozenset(oracle_valid_set(scene, args.k, workers=_threads(args)))
    draws = random_baseline(len(scene), args.k, args.samples, args.seed)
    m = scene_metrics(draws, oracle)
    _emit(
        {
            "accuracy": m.accuracy,
            "expected_accuracy": len(oracle) / count_candidates(len(scene), args.k),
            "hit_rate": m.hit_rate,
            "samples": m.draws,
            "valid_draws": m.valid_draws,
            "oracle_size": len(oracle),
        }
    )


def cmd_train(args) -> None:
    cfg = TrainConfig.load(args.config)
    init = load_checkpoint(args.init) if args.init else None
    result = train(cfg, init=init, out_dir=args.out)
    last = result.metrics[-1]
    _emit({"out": args.out, "steps": cfg.steps, "loss": last.loss, "accuracy": last.accuracy, "hit_rate": last.hit_rate})


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    try:
        cfg = TrainConfig.from_dict(ckpt["config"])
        params = checkpoint_params(ckpt)
    except (KeyError, TypeError) as exc:
        raise CliError("data", EXIT_DATA, f"{args.ckpt}: not a checkpoint ({exc})") from None
    k = args.k or cfg.k
    scenes = [generate_canyon_scene(np.random.SeedSequence((args.scenes_seed, 3, i)), cfg.scene) for i in range(args.num)]
    oracles = oracle_sets(scenes, k, workers=_threads(args))
    m = evaluate(params, scenes, k, args.samples, np.random.SeedSequence(args.seed), oracles)
    _emit({"accuracy": m.accuracy, "hit_rate": m.hit_rate, "scenes": args.num, "samples": args.samples, "k": k})


def cmd_export_metrics(args) -> None:
    rows = read_metrics_csv(args.log)
    if args.format == "csv":
        sys.stdout.write(format_metrics_csv(rows))
    else:
        _emit([{"step": r.step, "loss": r.loss, "accuracy": r.accuracy, "hit_rate": r.hit_rate} for r in rows])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="raypath", description=__doc__.split("\n\n")[0])
    parser.add_argument("--threads", type=int, default=None, help="worker cap (default: $RAYPATH_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scene", help="write a random street-canyon scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--r-max", type=int, default=None)
    p.add_argument("--params", default=None, help="JSON file of canyon generator parameters")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("enumerate", help="list every candidate as JSON lines")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("oracle", help="write every valid candidate and its path as JSON lines")
    p.add_argument("--scene", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cap", type=int, default=ORACLE_CAP, help="refuse scenes with more candidates than this")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("trace", help="trace and validate one candidate")
    p.add_argument("--scene", required=True)
    p.add_argument("--candidate", required=True, help='comma-separated facet ids, e.g. "3,7"')
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("baseline", help="accuracy of uniform random candidates")
    p.add_argument("--scene", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("train", help="train a sampler from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--init", default=None, help="checkpoint to start from (curriculum)")
    p.add_argument("--out", default="run", help="directory for metrics.csv and checkpoint.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on freshly generated scenes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scenes-seed", type=int, required=True)
    p.add_argument("--num", type=int, default=100)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--k", type=int, default=None, help="override the checkpoint's K")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-metrics", help="convert a metrics log")
    p.add_argument("--log", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_export_metrics)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        args.func(args)
        return EXIT_OK
    except CliError as exc:
        err = exc
    except ConfigError as exc:
        err = CliError("config", EXIT_CONFIG, str(exc))
    except json.JSONDecodeError as exc:
        err = CliError("data", EXIT_DATA, f"malformed JSON: {exc}")
    except (OSError, UnicodeDecodeError) as exc:
        err = CliError("file", EXIT_FILE, str(exc))
    except (SceneError, CandidateError, PlacementError, ArchitectureMismatchError) as exc:
        err = CliError("data", EXIT_DATA, str(exc))
    except TrainingAborted as exc:
        err = CliError("aborted", EXIT_ABORTED, str(exc))
    except OracleCapError as exc:
        err = CliError("oracle_cap", EXIT_CAP, str(exc))
    except (ValueError, OverflowError) as exc:
        err = CliError("usage", EXIT_USAGE, str(exc))
    except Exception as exc:  # noqa: BLE001
        err = CliError("internal", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")
    sys.stderr.write(json.dumps({"error": err.kind, "code": err.code, "message": str(err)}) + "\n")
    return err.code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
