"""Command-line surface: gen-data, forward, invert-classic, train-upfwi, eval and plot.

Exit codes: 0 success, 2 invalid arguments or mismatched geometry, 3 IO failure, 4 physics failure
(CFL violation, diverged propagation or training).
"""
import sys
import logging
import argparse
from pathlib import Path

import numpy as np

from . import config
from . import fwibin
from .errors import (InvalidArgumentError, ShapeMismatchError, GeometryMismatchError, StabilityError,
                     PropagationDivergedError, TrainingDivergedError)
from .geogen import GeoParams, DESK_SIZES, SHARD_SIZE, build_corpus
from .inversion import ClassicFwiConfig, UpfwiConfig, classic_fwi, upfwi_train, evaluate
from .plotting import plot_grid
from .tools import custom_progress, write_csv
from .wavesim import SimConfig, forward_model, desk_geometry, benchmark_geometry

logger = logging.getLogger("CLI")

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_IO = 3
EXIT_PHYSICS = 4


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=120)


def build_parser() -> tuple[argparse.ArgumentParser, list[argparse.ArgumentParser]]:
    base_parser = argparse.ArgumentParser(prog="fwiAction.py", formatter_class=_formatter, add_help=False,
                                          description="▶️ Simulate, invert and evaluate 2D acoustic full-waveform inversion")
    base_parser.add_argument("--help", help="Shows this help message and exit", action="store_true")
    base_parser.add_argument("--logging", help="Enables logging", action="store_true")
    base_parser.add_argument("--hide_progress", help="Silences progress bars and messages", action="store_true")
    base_parser.add_argument("--hide_warnings", help="Silences warnings", action="store_true")
    base_parser.add_argument("--jobs", type=int, default=1, help="Number of parallel workers for simulations", metavar="<n>")
    subparsers = base_parser.add_subparsers(help="Action to perform", dest="command")

    def add(name, help_text, description):
        return subparsers.add_parser(name, help=help_text, formatter_class=_formatter, add_help=False, description=description)

    # ---------------------------------------------------------------------- gen-data
    gen = add("gen-data", "Generates a synthetic corpus", "▶️ Generates layered velocity maps with faults and their shot gathers")
    gen.add_argument("--kind", type=str, choices=["flat", "curved"], default="flat", help="Interface shape (flat or curved)", metavar="<kind>")
    gen.add_argument("--out", type=Path, required=True, help="Output folder of the corpus", metavar="<dir>")
    gen.add_argument("--labeled", type=int, default=DESK_SIZES["labeled"], help="Labeled training records", metavar="<n>")
    gen.add_argument("--unlabeled", type=int, default=DESK_SIZES["unlabeled"], help="Unlabeled training records", metavar="<n>")
    gen.add_argument("--val", type=int, default=DESK_SIZES["val"], help="Validation records", metavar="<n>")
    gen.add_argument("--test", type=int, default=DESK_SIZES["test"], help="Test records", metavar="<n>")
    gen.add_argument("--seed", type=int, default=0, help="Generation seed", metavar="<s>")
    gen.add_argument("--shard_size", type=int, default=SHARD_SIZE, help="Records per shard file", metavar="<n>")
    scale = gen.add_mutually_exclusive_group()
    scale.add_argument("--desk", help="35x35 maps, 3 sources, 400 steps (default)", action="store_true")
    scale.add_argument("--paper-geometry", "--benchmark-geometry", dest="benchmark", help="70x70 maps, 5 sources, 1000 steps", action="store_true")
    # ---------------------------------------------------------------------- forward
    fwd = add("forward", "Simulates the gather of a velocity map", "▶️ Forward modeling of one velocity map")
    fwd.add_argument("--velocity", type=Path, required=True, help="FWIBIN velocity map (or shard of maps)", metavar="<file>")
    fwd.add_argument("--index", type=int, default=0, help="Record to take when the velocity file holds several maps", metavar="<i>")
    fwd.add_argument("--config", type=Path, required=True, help="SimConfig JSON file", metavar="<file>")
    fwd.add_argument("--out", type=Path, required=True, help="FWIBIN output gather", metavar="<file>")
    # ---------------------------------------------------------------------- invert-classic
    inv = add("invert-classic", "Runs iterative FWI on one gather", "▶️ Classic full-waveform inversion by adjoint gradients")
    inv.add_argument("--observed", type=Path, required=True, help="FWIBIN observed gather", metavar="<file>")
    inv.add_argument("--config", type=Path, required=True, help="SimConfig JSON file", metavar="<file>")
    inv.add_argument("--fwi-config", dest="fwi_config", type=Path, help="ClassicFwiConfig JSON file", metavar="<file>")
    inv.add_argument("--initial", type=Path, help="FWIBIN initial velocity for the 'provided' policy", metavar="<file>")
    inv.add_argument("--out", type=Path, required=True, help="Output folder", metavar="<dir>")
    # ---------------------------------------------------------------------- train-upfwi
    train = add("train-upfwi", "Trains the inversion network without labels", "▶️ Unsupervised training with the simulator in the loop")
    train.add_argument("--config", type=Path, required=True, help="UpfwiConfig JSON file", metavar="<file>")
    train.add_argument("--out", type=Path, required=True, help="Output folder for log and checkpoints", metavar="<dir>")
    # ---------------------------------------------------------------------- eval
    ev = add("eval", "Evaluates a checkpoint on a labeled split", "▶️ Velocity metrics, optionally under corrupted inputs")
    ev.add_argument("--checkpoint", type=Path, required=True, help="Checkpoint file", metavar="<file>")
    ev.add_argument("--test", type=Path, required=True, help="Corpus folder", metavar="<dir>")
    ev.add_argument("--split", type=str, default="test", help="Labeled split to evaluate", metavar="<split>")
    ev.add_argument("--noise", type=float, action="append", default=[], help="Gaussian noise level (repeatable)", metavar="<sigma>")
    ev.add_argument("--drop", type=int, action="append", default=[], help="Number of missing traces (repeatable)", metavar="<k>")
    ev.add_argument("--seed", type=int, default=0, help="Corruption seed", metavar="<s>")
    ev.add_argument("--seismic", help="Also reports errors of the re-simulated gathers", action="store_true")
    ev.add_argument("--out", type=Path, help="Output folder of the metrics table (defaults next to the checkpoint)", metavar="<dir>")
    # ---------------------------------------------------------------------- plot
    plot = add("plot", "Renders a 2D grid as an image", "▶️ Heatmap of a velocity map or of one shot of a gather")
    plot.add_argument("--in", dest="input", type=Path, required=True, help="FWIBIN file", metavar="<file>")
    plot.add_argument("--out", type=Path, required=True, help="Image file (.png or .pgm)", metavar="<file>")
    plot.add_argument("--index", type=int, default=0, help="Slice along the first axis of 3D payloads", metavar="<i>")
    plot.add_argument("--title", type=str, default="", help="Image title", metavar="<text>")
    return base_parser, [gen, fwd, inv, train, ev, plot]


def _print_help(base_parser, subparsers) -> None:
    base_parser.print_help()
    for parser in subparsers:
        print("------------------------------------------------------------------------------------------")
        parser.print_help()


def _select(array: np.ndarray, index: int, ndim: int, what: str) -> np.ndarray:
    if array.ndim == ndim + 1:
        if not 0 <= index < array.shape[0]:
            raise InvalidArgumentError(f"🚨 Index {index} outside the {array.shape[0]} records of the {what} file")
        return array[index]
    if array.ndim != ndim:
        raise ShapeMismatchError(f"🚨 Expected a {ndim}D {what}, got shape {array.shape}")
    return array


def _gen_data(args) -> None:
    if args.benchmark:
        params, sim = GeoParams(kind=args.kind, seed=args.seed), benchmark_geometry()
    else:
        params, sim = GeoParams.desk(kind=args.kind, seed=args.seed), desk_geometry()
    sizes = {"labeled": args.labeled, "unlabeled": args.unlabeled, "val": args.val, "test": args.test}
    manifest = build_corpus(params, sizes, args.out, sim, args.shard_size)
    print(manifest)


def _forward(args) -> None:
    sim = SimConfig.load(args.config)
    values, _ = fwibin.load(args.velocity)
    gather = forward_model(_select(values, args.index, 2, "velocity"), sim)
    fwibin.save(args.out, gather.data, "gather", {"config_hash": gather.config_hash})
    custom_progress(f"Gather {gather.shape} written to '{args.out}'")


def _invert_classic(args) -> None:
    sim = SimConfig.load(args.config)
    cfg = ClassicFwiConfig.load(args.fwi_config) if args.fwi_config else ClassicFwiConfig()
    observed, header = fwibin.load(args.observed)
    produced_by = header.get("meta", {}).get("config_hash")
    if produced_by is not None and produced_by != sim.hash():
        raise GeometryMismatchError(f"🚨 Observed gather was produced by config {produced_by}, not by {sim.hash()}")
    initial = _select(fwibin.load(args.initial)[0], 0, 2, "velocity") if args.initial else None
    velocity, trace = classic_fwi(observed, sim, cfg, initial)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fwibin.save(out / "velocity.fwib", velocity, "velocity", {"config_hash": sim.hash(), "fwi_config": cfg.to_dict()})
    write_csv(out / "misfit_trace.csv", trace)
    plot_grid(out / "velocity.png", velocity, "Inverted velocity (m/s)")
    custom_progress(f"Final objective {trace['objective'].iloc[-1]:.6g} after {len(trace) - 1} iterations")


def _train(args) -> None:
    checkpoint, log = upfwi_train(UpfwiConfig.load(args.config), args.out)
    print(checkpoint)


def _eval(args) -> None:
    out = args.out if args.out is not None else Path(args.checkpoint).parent / "eval"
    table = evaluate(args.checkpoint, args.test, args.noise, args.drop, args.seed, args.split, args.seismic, out_dir=out)
    print(table.to_string(index=False))


def _plot(args) -> None:
    values, header = fwibin.load(args.input)
    grid = _select(values, args.index, 2, "grid")
    plot_grid(args.out, grid, args.title or header.get("name", ""))


COMMANDS = {"gen-data": _gen_data, "forward": _forward, "invert-classic": _invert_classic,
            "train-upfwi": _train, "eval": _eval, "plot": _plot}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    base_parser, subparsers = build_parser()
    if not argv or "--help" in argv or "-h" in argv:
        _print_help(base_parser, subparsers)
        return EXIT_OK
    try:
        args = base_parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_ARGS
    if args.command is None:
        _print_help(base_parser, subparsers)
        return EXIT_ARGS
    config.show_warnings = not args.hide_warnings
    config.show_progress = not args.hide_progress
    config.n_jobs = args.jobs
    if args.logging:
        logging.disable(logging.NOTSET)
        logging.basicConfig(level=logging.INFO)
    else:
        logging.disable()
    logger.info(f"BEGIN {args.command}")
    try:
        COMMANDS[args.command](args)
    except (StabilityError, PropagationDivergedError, TrainingDivergedError) as e:
        print(e, file=sys.stderr)
        return EXIT_PHYSICS
    except OSError as e:
        print(e, file=sys.stderr)
        return EXIT_IO
    except (InvalidArgumentError, ShapeMismatchError, GeometryMismatchError, ValueError) as e:
        print(e, file=sys.stderr)
        return EXIT_ARGS
    logger.info(f"END {args.command}")
    return EXIT_OK
