"""
Command-line entry point.

Every sub-command resolves and checks its inputs first, then writes a run
manifest into the output directory, then its outputs. Exit codes: 0 success,
1 other library error, 2 configuration error, 3 missing input, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from latentfit import __version__
from latentfit.config import RunConfig, load_config
from latentfit.encoders import EncoderPair, render_views, train_encoders
from latentfit.errors import ConfigError, IncompatibleInputError, LatentfitError, MissingInputError, NumericalError
from latentfit.fitting import (
    FittingProblem,
    FittingResult,
    fit_sequence,
    interpolate_codes,
    reconstruct_sequence,
    transfer,
)
from latentfit.mesh import TriMesh, load_obj, save_obj
from latentfit.metrics import evaluate_sequence
from latentfit.spaces import PoseSpace, ShapeSpace, flow_samples_for, shape_samples_for, train_pose_space
from latentfit.spaces import train_shape_space, write_history
from latentfit.synth import CorpusManifest, generate_corpus, load_depth
from latentfit.utils import atomic_write_text, file_checksum, write_csv

logger = logging.getLogger("latentfit")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 1, 2, 3, 4
RUN_MANIFEST = "run_manifest.yaml"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    inputs: dict[str, dict] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    wall_clock_seconds: float | None = None

    def write(self, out_dir: Path) -> Path:
        data = dataclasses.asdict(self)
        return atomic_write_text(out_dir / RUN_MANIFEST, yaml.safe_dump(data, sort_keys=False))


@dataclass
class Context:
    args: argparse.Namespace
    config: RunConfig
    out: Path
    inputs: dict[str, Path] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config.run.seed

    @property
    def threads(self) -> int:
        return 1 if self.config.run.deterministic else self.config.run.threads

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.run.precision)

    def snapshot(self) -> dict:
        return self.config.to_dict()


@dataclass
class Command:
    help: str
    arguments: Callable[[argparse.ArgumentParser], None]
    inputs: Callable[[argparse.Namespace, RunConfig], dict[str, Path]]
    run: Callable[[Context], list[Path]]


def add_common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML configuration file")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--threads", type=int, help="override run.threads")
    parser.add_argument("--deterministic", action="store_true", help="single worker, no wall-clock fields")
    parser.add_argument(
        "--paper-scale", dest="full_scale", action="store_true", help="full-size counts, widths and schedules"
    )
    parser.add_argument("--dry-run", action="store_true", help="validate configuration and inputs only")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="count", default=0)


def configure_logging(args: argparse.Namespace) -> None:
    level = logging.INFO + 10 * (args.quiet - args.verbose)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.handlers = [handler]
    logger.setLevel(min(max(level, logging.DEBUG), logging.CRITICAL))
    logger.propagate = False
    logging.captureWarnings(True)
    logging.getLogger("py.warnings").handlers = [handler]


def _existing(value: Path | str | None, fallback: str | None, name: str, flag: str, key: str) -> Path:
    chosen = value if value is not None else fallback
    if chosen is None:
        raise MissingInputError(f"No {name} given; pass {flag} or set paths.{key}.")
    path = Path(chosen)
    if not path.exists():
        raise MissingInputError(f"{name.capitalize()} {path} does not exist.")
    return path


def _corpus(args: argparse.Namespace, config: RunConfig) -> Path:
    root = _existing(args.corpus, config.paths.corpus, "corpus", "--corpus", "corpus")
    if not (root / "manifest.yaml").is_file():
        raise MissingInputError(f"Corpus {root} has no manifest.yaml.")
    return root


def _shape(args: argparse.Namespace, config: RunConfig) -> Path:
    return _existing(args.shape, config.paths.shape_checkpoint, "shape checkpoint", "--shape", "shape_checkpoint")


def _pose(args: argparse.Namespace, config: RunConfig) -> Path:
    return _existing(args.pose, config.paths.pose_checkpoint, "pose checkpoint", "--pose", "pose_checkpoint")


def _fit(args: argparse.Namespace, config: RunConfig, attr: str = "fit") -> Path:
    flag = f"--{attr.replace('_', '-')}"
    return _existing(getattr(args, attr), config.paths.fit_result, "fitting result", flag, "fit_result")


def _save_meshes(out: Path, meshes: Sequence[TriMesh], stem: str) -> list[Path]:
    return [save_obj(mesh, out / "meshes" / f"{stem}_{k:04d}.obj") for k, mesh in enumerate(meshes)]


def _load_spaces(ctx: Context, with_pose: bool = True) -> tuple[ShapeSpace, PoseSpace | None]:
    shape_space = ShapeSpace.load(ctx.inputs["shape"])
    pose_space = PoseSpace.load(ctx.inputs["pose"], shape_space) if with_pose else None
    return shape_space, pose_space


def _sequence_frames(manifest: CorpusManifest, name: str | None) -> tuple[str, list[dict]]:
    if not manifest.sequences:
        raise MissingInputError(f"Corpus {manifest.root} holds no sequences.")
    sequence = manifest.sequence(name) if name else manifest.sequences[0]
    return sequence["name"], sequence["frames"]


# generate


def _generate_args(parser: argparse.ArgumentParser) -> None:
    pass


def _generate_inputs(args: argparse.Namespace, config: RunConfig) -> dict[str, Path]:
    return {}


def _generate(ctx: Context) -> list[Path]:
    manifest = generate_corpus(ctx.config.corpus, ctx.out, ctx.seed, ctx.threads)
    return [manifest.root / "manifest.yaml"]


# train-shape


def _train_shape_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", type=Path, help="corpus directory")
    parser.add_argument("--resume", type=Path, help="shape checkpoint to continue from")


def _train_shape_inputs(args: argparse.Namespace, config: RunConfig) -> dict[str, Path]:
    inputs = {"corpus": _corpus(args, config)}
    if args.resume is not None:
        inputs["resume"] = _existing(args.resume, None, "resume checkpoint", "--resume", "shape_checkpoint")
    return inputs


def _train_shape(ctx: Context) -> list[Path]:
    manifest = CorpusManifest.load(ctx.inputs["corpus"])
    samples = shape_samples_for(manifest.canonical_meshes(), ctx.config.sampling, ctx.seed, ctx.threads)
    resume = ShapeSpace.load(ctx.inputs["resume"]) if "resume" in ctx.inputs else None
    names = [item["name"] for item in manifest.identities]
    space = train_shape_space(samples, ctx.config.shape, ctx.seed, names, resume, ctx.dtype)
    return [
        space.save(ctx.out / "shape.ckpt", ctx.snapshot()),
        write_history(ctx.out / "shape_history.csv", space.history),
    ]


# train-pose


def _train_pose_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", type=Path, help="corpus directory")
    parser.add_argument("--shape", type=Path, help="trained shape checkpoint")
    parser.add_argument("--resume", type=Path, help="pose checkpoint to continue from")


def _train_pose_inputs(args: argparse.Namespace, config: RunConfig) -> dict[str, Path]:
    inputs = {"corpus": _corpus(args, config), "shape": _shape(args, config)}
    if args.resume is not None:
        inputs["resume"] = _existing(args.resume, None, "resume checkpoint", "--resume", "pose_checkpoint")
    return inputs


def _train_pose(ctx: Context) -> list[Path]:
    manifest = CorpusManifest.load(ctx.inputs["corpus"])
    shape_space, _ = _load_spaces(ctx, with_pose=False)
    samples = flow_samples_for(
        manifest.canonical_meshes(),
        manifest.posed_meshes(),
        manifest.pose_to_identity,
        ctx.config.sampling,
        ctx.seed,
        ctx.threads,
    )
    resume = PoseSpace.load(ctx.inputs["resume"], shape_space) if "resume" in ctx.inputs else None
    space = train_pose_space(
        shape_space, samples, manifest.pose_to_identity, ctx.config.pose, ctx.seed, resume, ctx.dtype
    )
    return [
        space.save(ctx.out / "pose.ckpt", ctx.snapshot()),
        write_history(ctx.out / "pose_history.csv", space.history),
    ]


# train-encoders


def _train_encoders_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", type=Path, help="corpus directory")
    parser.add_argument("--shape", type=Path, help="trained shape checkpoint")
    parser.add_argument("--pose", type=Path, help="trained pose checkpoint")


def _train_encoders_inputs(args: argparse.Namespace, config: RunConfig) -> dict[str, Path]:
    return {"corpus": _corpus(args, config), "shape": _shape(args, config), "pose": _pose(args, config)}


def _train_encoders(ctx: Context) -> list[Path]:
    manifest = CorpusManifest.load(ctx.inputs["corpus"])
    shape_space, pose_space = _load_spaces(ctx)
    grids = render_views(manifest.posed_meshes(), manifest.camera, ctx.config.encoder.resolution, ctx.threads)
    encoders = train_encoders(shape_space, pose_space, grids, ctx.config.encoder, ctx.seed)
    return [
        encoders.save(ctx.out / "encoders.ckpt", ctx.snapshot()),
        write_csv(ctx.out / "encoder_history.csv", encoders.history, ("epoch", "shape_mse", "pose_mse")),
    ]


# fit


def _fit_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", type=Path, help="corpus directory holding the depth sequence")
    parser.add_argument("--sequence", help="sequence name (default: the first one)")
    parser.add_argument("--shape", type=Path, help="trained shape checkpoint")
    parser.add_argument("--pose", type=Path, help="trained pose checkpoint")
    parser.add_argument("--encoders", type=Path, help="trained encoder checkpoint")
    parser.add_argument("--no-encoders", action="store_true", help="start from the mean training codes")


def _fit_inputs(args: argparse.Namespace, config: RunConfig) -> dict[str, Path]:
    inputs = {"corpus": _corpus(args, config), "shape": _shape(args, config), "pose": _pose(args, config)}
    wants_encoders = config.fit.use_shape_encoder or config.fit.use_pose_encoder
    if wants_encoders and not args.no_encoders:
        inputs["encoders"] = _existing(
            args.encoders, config.paths.encoder_checkpoint, "encoder checkpoint", "--encoders", "encoder_checkpoint"
        )
    return inputs


def _fit_run(ctx: Context) -> list[Path]:
    manifest = CorpusManifest.load(ctx.inputs["corpus"])
    name, frames = _sequence_frames(manifest, ctx.args.sequence)
    depth = [load_depth(manifest.path(f["depth"])) for f in frames]
    shape_space, pose_space = _load_spaces(ctx)
    encoders = EncoderPair.load(ctx.inputs["encoders"]) if "encoders" in ctx.inputs else None
    logger.info("Fitting sequence %s (%d frames)", name, len(depth))
    problem = FittingProblem.from_frames(shape_space, pose_space, depth, ctx.config.fit)
    result = fit_sequence(problem, encoders=encoders, seed=ctx.seed)
    canonical, posed = reconstruct_sequence(result, shape_space, pose_space, ctx.config.fit.mesh_resolution)
    return [
        result.save(ctx.out / "fit.ckpt", ctx.snapshot()),
        result.write_history(ctx.out / "fit_history.csv"),
        save_obj(canonical, ctx.out / "meshes" / "canonical.obj"),
        *_save_meshes(ctx.out, posed, "frame"),
    ]


# reconstruct


def _reconstruct_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--shape", type=Path, help="trained shape checkpoint")
    parser.add_argument("--pose", type=Path, help="trained pose checkpoint")
    parser.add_argument("--fit", type=Path, help="fitting result to turn into meshes")
    parser.add_argument("--identity", type=int, help="training identity to extract instead of a fit")
    parser.add_argument("--resolution", type=int, help="marching cubes grid resolution")


def _reconstruct_inputs(args: argparse.Namespace, config: RunConfig) -> dict[str, Path]:
    inputs = {"shape": _shape(args, config)}
    if args.identity is None:
        inputs["pose"] = _pose(args, config)
        inputs["fit"] = _fit(args, config)
    return inputs


def _reconstruct(ctx: Context) -> list[Path]:
    resolution = ctx.args.resolution or ctx.config.eval.mesh_resolution
    if ctx.args.identity is not None:
        shape_space, _ = _load_spaces(ctx, with_pose=False)
        if not 0 <= ctx.args.identity < len(shape_space):
            raise ConfigError(f"Identity {ctx.args.identity} is not in the shape space.")
        mesh = shape_space.reconstruct(ctx.args.identity, resolution)
        return [save_obj(mesh, ctx.out / "meshes" / f"identity_{ctx.args.identity:03d}.obj")]
    shape_space, pose_space = _load_spaces(ctx)
    result = FittingResult.load(ctx.inputs["fit"])
    canonical, posed = reconstruct_sequence(result, shape_space, pose_space, resolution)
    return [save_obj(canonical, ctx.out / "meshes" / "canonical.obj"), *_save_meshes(ctx.out, posed, "frame")]


# interpolate


def _interpolate_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--shape", type=Path, help="trained shape checkpoint")
    parser.add_argument("--pose", type=Path, help="trained pose checkpoint (pose interpolation)")
    parser.add_argument("--kind", choices=("shape", "pose"), default="shape")
    parser.add_argument("--start", type=int, default=0, help="first code index")
    parser.add_argument("--end", type=int, default=1, help="last code index")
    parser.add_argument("--steps", type=int, default=11)
    parser.add_argument("--identity", type=int, default=0, help="identity posed by interpolated pose codes")


def _interpolate_inputs(args: argparse.Namespace, config: RunConfig) -> dict[str, Path]:
    inputs = {"shape": _shape(args, config)}
    if args.kind == "pose":
        inputs["pose"] = _pose(args, config)
    return inputs


def _interpolate(ctx: Context) -> list[Path]:
    args = ctx.args
    resolution = ctx.config.eval.mesh_resolution
    shape_space, pose_space = _load_spaces(ctx, with_pose=args.kind == "pose")
    table = shape_space if args.kind == "shape" else pose_space
    for index in (args.start, args.end):
        if not 0 <= index < len(table):
            raise ConfigError(f"Code index {index} is outside the {args.kind} table of {len(table)}.")
    codes = interpolate_codes(table.code(args.start), table.code(args.end), args.steps)
    if args.kind == "shape":
        meshes = [shape_space.reconstruct(code, resolution) for code in codes]
    else:
        _, meshes = transfer(shape_space, pose_space, shape_space.code(args.identity), codes, resolution)
    return _save_meshes(ctx.out, meshes, f"{args.kind}_interp")


# transfer


def _transfer_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--shape", type=Path, help="trained shape checkpoint")
    parser.add_argument("--pose", type=Path, help="trained pose checkpoint")
    parser.add_argument("--poses-from", type=Path, help="fitting result supplying the pose codes")
    parser.add_argument("--identity", type=int, help="training identity supplying the shape code")
    parser.add_argument("--shape-from", type=Path, help="fitting result supplying the shape code")


def _transfer_inputs(args: argparse.Namespace, config: RunConfig) -> dict[str, Path]:
    inputs = {"shape": _shape(args, config), "pose": _pose(args, config)}
    inputs["poses_from"] = _fit(args, config, "poses_from")
    if args.identity is None:
        inputs["shape_from"] = _existing(
            args.shape_from, None, "shape source", "--shape-from or --identity", "fit_result"
        )
    return inputs


def _transfer(ctx: Context) -> list[Path]:
    shape_space, pose_space = _load_spaces(ctx)
    poses = FittingResult.load(ctx.inputs["poses_from"]).pose_codes
    if ctx.args.identity is not None:
        if not 0 <= ctx.args.identity < len(shape_space):
            raise ConfigError(f"Identity {ctx.args.identity} is not in the shape space.")
        shape = shape_space.code(ctx.args.identity)
    else:
        shape = FittingResult.load(ctx.inputs["shape_from"]).shape_code
    canonical, posed = transfer(shape_space, pose_space, shape, poses, ctx.config.eval.mesh_resolution)
    return [save_obj(canonical, ctx.out / "meshes" / "canonical.obj"), *_save_meshes(ctx.out, posed, "frame")]


# evaluate


def _evaluate_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", type=Path, help="corpus directory with the ground truth")
    parser.add_argument("--sequence", help="sequence name (default: the first one)")
    parser.add_argument("--pred", type=Path, help="directory of predicted frame_XXXX.obj meshes")


def _evaluate_inputs(args: argparse.Namespace, config: RunConfig) -> dict[str, Path]:
    pred = _existing(args.pred, config.paths.predictions, "prediction directory", "--pred", "predictions")
    return {"corpus": _corpus(args, config), "pred": pred}


def _evaluate(ctx: Context) -> list[Path]:
    manifest = CorpusManifest.load(ctx.inputs["corpus"])
    _, frames = _sequence_frames(manifest, ctx.args.sequence)
    pred_paths = sorted(ctx.inputs["pred"].glob("frame_*.obj"))
    if len(pred_paths) != len(frames):
        raise MissingInputError(f"Found {len(pred_paths)} predicted frames for a {len(frames)}-frame sequence.")
    pred = [load_obj(p) for p in pred_paths]
    gt = [load_obj(manifest.path(f["mesh"])) for f in frames]
    return list(evaluate_sequence(pred, gt, ctx.config.eval, ctx.seed).write(ctx.out))


COMMANDS: dict[str, Command] = {
    "generate": Command("build the synthetic corpus", _generate_args, _generate_inputs, _generate),
    "train-shape": Command("train the shape space", _train_shape_args, _train_shape_inputs, _train_shape),
    "train-pose": Command("train the pose space", _train_pose_args, _train_pose_inputs, _train_pose),
    "train-encoders": Command(
        "train the voxel encoders", _train_encoders_args, _train_encoders_inputs, _train_encoders
    ),
    "fit": Command("fit codes to a depth sequence", _fit_args, _fit_inputs, _fit_run),
    "reconstruct": Command("extract meshes from codes", _reconstruct_args, _reconstruct_inputs, _reconstruct),
    "interpolate": Command("walk between two codes", _interpolate_args, _interpolate_inputs, _interpolate),
    "transfer": Command("combine shape and pose codes", _transfer_args, _transfer_inputs, _transfer),
    "evaluate": Command("score predicted meshes", _evaluate_args, _evaluate_inputs, _evaluate),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    add_common_args(common)
    parser = argparse.ArgumentParser(prog="latentfit", description="Shape and pose latent spaces fit to depth.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, command in COMMANDS.items():
        command.arguments(sub.add_parser(name, parents=[common], help=command.help))
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config, full_scale=args.full_scale)
    run = config.run
    if args.seed is not None:
        run = dataclasses.replace(run, seed=args.seed)
    if args.threads is not None:
        run = dataclasses.replace(run, threads=args.threads)
    if args.deterministic:
        run = dataclasses.replace(run, deterministic=True, threads=1)
    return dataclasses.replace(config, run=run).validate()


def _fingerprint(path: Path) -> dict:
    """Path and sha256 of an input; a directory input is identified by its manifest."""
    target = path / "manifest.yaml" if path.is_dir() else path
    return {"path": str(path), "sha256": file_checksum(target) if target.is_file() else None}


def _relative(path: Path, root: Path) -> str:
    try:
        return str(Path(path).relative_to(root))
    except ValueError:
        return str(path)


def run(args: argparse.Namespace) -> int:
    command = COMMANDS[args.command]
    config = _resolve_config(args)
    inputs = command.inputs(args, config)
    if args.dry_run:
        logger.info("%s: configuration and %d inputs are valid", args.command, len(inputs))
        return EXIT_OK
    if args.out is None:
        raise ConfigError("--out is required.")

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=args.command,
        config=config.to_dict(),
        seed=config.run.seed,
        inputs={name: _fingerprint(path) for name, path in sorted(inputs.items())},
    )
    manifest.write(out)
    started = time.perf_counter()
    outputs = command.run(Context(args, config, out, inputs))
    manifest.outputs = sorted(_relative(p, out) for p in outputs)
    if not config.run.deterministic:
        manifest.wall_clock_seconds = round(time.perf_counter() - started, 3)
    manifest.write(out)
    logger.info("%s finished: %d outputs in %s", args.command, len(outputs), out)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args)
    try:
        return run(args)
    except IncompatibleInputError as err:
        logger.error("incompatible input: %s", err)
        return EXIT_CONFIG
    except ConfigError as err:
        logger.error("configuration error: %s", err)
        return EXIT_CONFIG
    except MissingInputError as err:
        logger.error("missing input: %s", err)
        return EXIT_MISSING
    except NumericalError as err:
        logger.error("numerical failure: %s %s", err, err.diagnostics)
        return EXIT_NUMERICAL
    except LatentfitError as err:
        logger.error("%s: %s", type(err).__name__, err)
        return EXIT_ERROR
