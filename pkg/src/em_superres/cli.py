"""
Command-line entry point.

Every command reads an optional JSON config (``--config``), applies the command flags on top and writes its
artifacts plus a ``<command>.manifest.json`` into ``--out``. A manifest holds the full config, the hashes of every
input and output and the package version; ``em-superres rerun <manifest>`` re-executes it.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 finished with warnings (a solve hit its iteration
cap, or patches were skipped and left voxels uncovered). Outputs are written on 4.
"""

from typing import Any, Callable, ClassVar, Literal, Optional, Union
from pathlib import Path
from em_superres import __version__
from em_superres.base_models import BaseModel
from em_superres.dictionary import learn_dictionary, load_dictionary, save_dictionary
from em_superres.evaluation import (
    backproject,
    cubic_z_interpolate,
    evaluate,
    save_xz_png,
    section_replicate,
    sweep_lambda,
)
from em_superres.exceptions import ConfigurationError, ConvergenceWarning, DataError, EmSuperResError
from em_superres.helpers import hash_artifact, write_json
from em_superres.models import (
    Angle,
    FoldDetectConfig,
    LearnConfig,
    NoiseSpec,
    PatchSpec,
    PhantomSpec,
    ReconConfig,
    TiltGeometry,
)
from em_superres.phantom import generate_phantom, write_phantom
from em_superres.reconstruction import (
    detect_section_folds,
    load_fold_mask,
    mark_lost_sections,
    reconstruct,
    save_fold_mask,
)
from em_superres.settings import Settings
from em_superres.tomography import build_projection_model, load_views, save_views, simulate_views
from em_superres.volume import extract_patches, patch_origins, read_volume, write_volume
from pydantic import BaseModel as PydanticModel, Field, ValidationError, model_validator
import numpy as np
import argparse
import warnings
import logging
import shutil
import json
import sys

logger = logging.getLogger("em_superres_cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4


class RunConfig(BaseModel):
    """
    Settings shared by every command.

    Attributes:
        out: Output directory
        seed: Seed handed to the command's random draws; it is copied into the sub-configs named in ``seeded``
            unless they set their own seed
        threads: Worker threads for patch solving
        chunk_size: Patches per work item
    """

    out: str = "out"
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    chunk_size: int = Field(2048, ge=1)

    seeded: ClassVar[tuple[str, ...]] = ()

    @model_validator(mode="before")
    @classmethod
    def _share_seed(cls, data: Any) -> Any:
        if not cls.seeded or not isinstance(data, dict) or "seed" not in data:
            return data

        data = dict(data)
        for name in cls.seeded:
            sub = data.get(name)
            if sub is None:
                data[name] = {"seed": data["seed"]}
            elif isinstance(sub, dict) and "seed" not in sub:
                data[name] = {**sub, "seed": data["seed"]}
            elif isinstance(sub, PydanticModel) and "seed" not in sub.model_fields_set:
                data[name] = sub.model_copy(update={"seed": data["seed"]})
        return data


class PhantomRun(RunConfig):
    seeded: ClassVar[tuple[str, ...]] = ("spec",)
    name: str = "truth"
    spec: PhantomSpec = Field(default_factory=PhantomSpec)


class TrainRun(RunConfig):
    seeded: ClassVar[tuple[str, ...]] = ("learn",)
    volume: str
    patch: PatchSpec = Field(default_factory=PatchSpec)
    learn: LearnConfig = Field(default_factory=LearnConfig)
    max_patches: Optional[int] = Field(None, ge=1)
    name: str = "dictionary"


class SimulateRun(RunConfig):
    seeded: ClassVar[tuple[str, ...]] = ("noise",)
    volume: str
    geometry: TiltGeometry = Field(default_factory=TiltGeometry)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    name: str = "views"


class ReconstructRun(RunConfig):
    views: str
    dictionary: str
    recon: ReconConfig = Field(default_factory=ReconConfig)
    angles: Optional[list[Angle]] = None
    folds: Optional[str] = None
    name: str = "recon"


class DetectFoldsRun(RunConfig):
    views: str
    detect: FoldDetectConfig = Field(default_factory=FoldDetectConfig)
    lost_sections: list[int] = Field(default_factory=list)
    name: str = "folds"


class InpaintRun(ReconstructRun):
    folds: str
    name: str = "inpaint"


class EvaluateRun(RunConfig):
    truth: str
    candidates: dict[str, str] = Field(default_factory=dict)
    views: Optional[str] = None
    baselines: list[Literal["cubic", "backprojection", "section_replicate"]] = Field(default_factory=list)
    render: bool = True
    metadata: dict[str, Any] = Field(default_factory=dict)
    name: str = "metrics"


class SweepLambdaRun(RunConfig):
    truth: str
    views: str
    dictionary: str
    lambdas: list[float] = Field(default_factory=lambda: [0.02, 0.05, 0.1, 0.2, 0.5])
    recon: ReconConfig = Field(default_factory=ReconConfig)
    folds: Optional[str] = None
    name: str = "sweep"


class RunResult(BaseModel):
    command: str
    exit_code: int
    manifest: Optional[str] = None
    outputs: list[str] = Field(default_factory=list)
    error: Optional[dict[str, Any]] = None


class _Context:
    """
    Tracks inputs and outputs of one run so the manifest can hash them and failed runs can clean up.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.out)
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.warnings: list[str] = []

    def input(self, path: str) -> Path:
        resolved = Path(path)
        self.inputs.append(resolved)
        return resolved

    def output(self, name: str) -> Path:
        path = self.out / name
        self.outputs.append(path)
        return path

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    def remove_outputs(self) -> None:
        for path in self.outputs:
            for target in (path, path.with_name(f"{path.name}.json"), path.with_name(f"{path.name}.raw")):
                if target.is_dir():
                    shutil.rmtree(target, ignore_errors=True)
                elif target.exists():
                    target.unlink()


def _run_phantom(config: PhantomRun, context: _Context) -> None:
    volume = generate_phantom(config.spec)
    write_phantom(volume, config.spec, context.output(config.name))
    context.output(f"{config.name}.spec.json")


def _run_train(config: TrainRun, context: _Context) -> None:
    volume = read_volume(context.input(config.volume))
    origins = None
    if config.max_patches is not None:
        lattice = patch_origins(volume.dims, config.patch)
        if config.max_patches < len(lattice):
            rng = np.random.default_rng(config.seed)
            origins = lattice[np.sort(rng.choice(len(lattice), size=config.max_patches, replace=False))]

    patches = extract_patches(volume, config.patch, origins)
    dictionary = learn_dictionary(patches, config.learn, workers=config.threads)
    save_dictionary(dictionary, context.output(config.name))


def _run_simulate(config: SimulateRun, context: _Context) -> None:
    volume = read_volume(context.input(config.volume))
    views = simulate_views(volume, config.geometry, config.noise)
    save_views(views, context.output(config.name))


def _reconstruct(config: ReconstructRun, context: _Context) -> None:
    views = load_views(context.input(config.views))
    dictionary = load_dictionary(context.input(config.dictionary))
    folds = load_fold_mask(context.input(config.folds)) if config.folds else None

    angles = tuple(config.angles) if config.angles else views.angles
    geometry = TiltGeometry(
        layers_per_section=views.layers_per_section, angles=angles, h=dictionary.spec.h, v=dictionary.spec.v
    )
    result = reconstruct(
        views,
        dictionary,
        build_projection_model(geometry),
        config.recon,
        folds,
        workers=config.threads,
        chunk_size=config.chunk_size,
    )
    write_volume(result.volume, context.output(config.name))
    write_json(context.output(f"{config.name}.report.json"), result.report.model_dump(mode="json"))
    report = result.report
    if report.patches_skipped or report.uncovered_voxels:
        context.warn(
            f"{report.patches_skipped} patches skipped, {report.uncovered_voxels} voxels uncovered and filled with 0"
        )


def _run_detect_folds(config: DetectFoldsRun, context: _Context) -> None:
    views = load_views(context.input(config.views))
    folds = detect_section_folds(views, config.detect)
    if config.lost_sections:
        folds = mark_lost_sections(folds, config.lost_sections)
    save_fold_mask(folds, context.output(config.name))


def _run_evaluate(config: EvaluateRun, context: _Context) -> None:
    truth = read_volume(context.input(config.truth))
    candidates = {name: read_volume(context.input(path)) for name, path in config.candidates.items()}

    if config.baselines:
        if config.views is None:
            raise ConfigurationError("baselines need the views they are computed from")
        views = load_views(context.input(config.views))
        builders: dict[str, Callable] = {
            "cubic": cubic_z_interpolate,
            "backprojection": backproject,
            "section_replicate": section_replicate,
        }
        for baseline in config.baselines:
            candidates[baseline] = builders[baseline](views)

    if not candidates:
        raise ConfigurationError("nothing to evaluate, give candidates or baselines")

    reports = {
        name: evaluate(truth, volume, {**config.metadata, "method": name}).model_dump(mode="json")
        for name, volume in candidates.items()
    }
    write_json(context.output(f"{config.name}.json"), reports)

    if config.render:
        window = (float(truth.data.min()), float(truth.data.max()))
        save_xz_png(truth, context.output("truth_xz.png"), window=window)
        for name, volume in candidates.items():
            save_xz_png(volume, context.output(f"{name}_xz.png"), window=window)


def _run_sweep_lambda(config: SweepLambdaRun, context: _Context) -> None:
    truth = read_volume(context.input(config.truth))
    views = load_views(context.input(config.views))
    dictionary = load_dictionary(context.input(config.dictionary))
    folds = load_fold_mask(context.input(config.folds)) if config.folds else None

    geometry = TiltGeometry(
        layers_per_section=views.layers_per_section, angles=views.angles, h=dictionary.spec.h, v=dictionary.spec.v
    )
    result = sweep_lambda(
        truth,
        views,
        dictionary,
        build_projection_model(geometry),
        config.lambdas,
        config.recon,
        folds,
        workers=config.threads,
    )
    write_json(context.output(f"{config.name}.json"), result.model_dump(mode="json", by_alias=True))


COMMANDS: dict[str, tuple[type[RunConfig], Callable[[Any, _Context], None]]] = {
    "phantom": (PhantomRun, _run_phantom),
    "train": (TrainRun, _run_train),
    "simulate": (SimulateRun, _run_simulate),
    "reconstruct": (ReconstructRun, _reconstruct),
    "detect-folds": (DetectFoldsRun, _run_detect_folds),
    "inpaint": (InpaintRun, _reconstruct),
    "evaluate": (EvaluateRun, _run_evaluate),
    "sweep-lambda": (SweepLambdaRun, _run_sweep_lambda),
}


def _error(command: str, exit_code: int, exc: BaseException) -> RunResult:
    logger.error(f"{command} failed: {exc}")
    return RunResult(
        command=command,
        exit_code=exit_code,
        error={"type": type(exc).__name__, "message": str(exc), "exit_code": exit_code},
    )


def parse_config(command: str, config: Union[RunConfig, dict[str, Any]]) -> RunConfig:
    if command not in COMMANDS:
        raise ConfigurationError(f"unknown command {command!r}, expected one of {sorted(COMMANDS)}")
    model = COMMANDS[command][0]
    if isinstance(config, model):
        return config
    try:
        return model.model_validate(config)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid {command} config: {exc}") from exc


def run(command: str, config: Union[RunConfig, dict[str, Any]]) -> RunResult:
    """
    Execute one command and write its artifacts and manifest.

    Args:
        command: One of the command names
        config: Run config model or its dict form

    Returns:
        RunResult with the exit code, the manifest path and the outputs written
    """

    try:
        config = parse_config(command, config)
    except ConfigurationError as exc:
        return _error(command, EXIT_CONFIG, exc)

    context = _Context(config)
    handler = COMMANDS[command][1]
    logger.debug(f"Running {command} with {config.model_dump(mode='json', by_alias=True)}")

    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ConvergenceWarning)
            handler(config, context)
    except (ConfigurationError, ValidationError) as exc:
        context.remove_outputs()
        return _error(command, EXIT_CONFIG if isinstance(exc, ConfigurationError) else EXIT_DATA, exc)
    except (DataError, EmSuperResError, OSError) as exc:
        context.remove_outputs()
        return _error(command, EXIT_DATA, exc)

    converged = not any(issubclass(warning.category, ConvergenceWarning) for warning in caught)
    outputs = {}
    for path in context.outputs:
        if path.exists() or path.with_name(f"{path.name}.json").exists():
            base = path if path.is_dir() else path.parent
            outputs.update({str(base / name): digest for name, digest in hash_artifact(path).items()})

    manifest = write_json(
        context.out / f"{command}.manifest.json",
        {
            "command": command,
            "version": __version__,
            "config": config.model_dump(mode="json", by_alias=True),
            "inputs": {str(path): hash_artifact(path) for path in context.inputs},
            "outputs": outputs,
            "converged": converged,
            "warnings": context.warnings,
        },
    )
    logger.info(f"Wrote manifest {manifest}")

    return RunResult(
        command=command,
        exit_code=EXIT_OK if converged and not context.warnings else EXIT_CONVERGENCE,
        manifest=str(manifest),
        outputs=sorted(outputs),
    )


def rerun(manifest_path: Union[str, Path], out: Optional[str] = None) -> RunResult:
    """
    Re-execute a manifest and compare the new output hashes with the recorded ones.
    """

    try:
        manifest = json.loads(Path(manifest_path).read_text())
        command, config = manifest["command"], dict(manifest["config"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        return _error("rerun", EXIT_DATA, exc)

    if out is not None:
        config["out"] = out
    result = run(command, config)
    if result.exit_code not in (EXIT_OK, EXIT_CONVERGENCE) or out is not None:
        return result

    fresh = json.loads(Path(result.manifest).read_text())["outputs"]
    if fresh != manifest.get("outputs"):
        changed = sorted(name for name in fresh if fresh[name] != manifest.get("outputs", {}).get(name))
        return _error("rerun", EXIT_DATA, DataError(f"rerun outputs differ from the manifest: {changed}"))
    return result


def _set(config: dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    for key in keys[:-1]:
        config = config.setdefault(key, {})
    config[keys[-1]] = value


# flag -> config keys it overrides, per command
FLAG_TARGETS: dict[str, dict[str, tuple[str, ...]]] = {
    "seed": {
        "phantom": ("seed", "spec.seed"),
        "train": ("seed", "learn.seed"),
        "simulate": ("seed", "noise.seed"),
    },
    "lambda_": {
        "train": ("learn.lambda",),
        "reconstruct": ("recon.lambda_recover", "recon.lambda_smooth"),
        "inpaint": ("recon.lambda_recover", "recon.lambda_smooth"),
    },
    "snr_db": {"simulate": ("noise.snr_db",)},
    "single_view": {
        "reconstruct": ("recon.single_view",),
        "inpaint": ("recon.single_view",),
        "sweep-lambda": ("recon.single_view",),
    },
    "reversed_contrast": {"detect-folds": ("detect.reversed_contrast",)},
}

INPUT_FLAGS = ("volume", "views", "dictionary", "folds", "truth")


def build_config(command: str, args: argparse.Namespace, settings: Settings) -> dict[str, Any]:
    """
    Merge built-in defaults, environment settings, the ``--config`` file and the flags, in increasing precedence.
    """

    config: dict[str, Any] = {"threads": settings.threads, "seed": settings.seed, "chunk_size": settings.chunk_size}

    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config {args.config} is not a JSON object")
        config.update(loaded)

    if args.seed is not None:
        config["seed"] = args.seed
    for flag, targets in FLAG_TARGETS.items():
        value = getattr(args, flag, None)
        if value is None or value is False:
            continue
        for key in targets.get(command, ()):
            _set(config, key, value)

    for flag in ("threads", "out"):
        if getattr(args, flag, None) is not None:
            config[flag] = getattr(args, flag)
    for flag in INPUT_FLAGS:
        if getattr(args, flag, None) is not None:
            config[flag] = getattr(args, flag)

    if getattr(args, "candidate", None):
        candidates = config.setdefault("candidates", {})
        for item in args.candidate:
            name, _, path = item.partition("=")
            if not path:
                raise ConfigurationError(f"candidate must be NAME=PATH, got {item!r}")
            candidates[name] = path
    if getattr(args, "baseline", None):
        config["baselines"] = args.baseline
    if getattr(args, "lambdas", None):
        config["lambdas"] = args.lambdas
    if getattr(args, "lost_section", None):
        config["lost_sections"] = args.lost_section

    return config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int, help="Seed for random draws")
    common.add_argument("--threads", type=int, help="Worker threads")
    common.add_argument("--out", type=str, help="Output directory")
    common.add_argument("--log-level", type=str, help="Logging level (default from EM_SUPERRES_LOG_LEVEL)")

    parser = argparse.ArgumentParser(
        prog="em-superres",
        description="Depth super-resolution of serial-section EM volumes from tilt views",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("phantom", parents=[common], help="Generate a synthetic membrane volume")

    train = commands.add_parser("train", parents=[common], help="Learn a dictionary from a volume")
    train.add_argument("--volume", help="Training volume (VV1)")
    train.add_argument("--lambda", dest="lambda_", type=float, help="Coding lambda")

    simulate = commands.add_parser("simulate", parents=[common], help="Simulate tilt views of a volume")
    simulate.add_argument("--volume", help="Source volume (VV1)")
    simulate.add_argument("--snr-db", dest="snr_db", type=float, help="Noise level in dB, inf for none")

    for name, help_text in (("reconstruct", "Reconstruct a volume from views"), ("inpaint", "Fill in folds")):
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.add_argument("--views", help="View set directory (TV1)")
        sub.add_argument("--dictionary", help="Dictionary (VD1)")
        sub.add_argument("--folds", help="Fold mask (FM1)")
        sub.add_argument("--lambda", dest="lambda_", type=float, help="Lambda of both reconstruction steps")
        sub.add_argument("--single-view", dest="single_view", action="store_true", help="Use the normal view only")

    detect = commands.add_parser("detect-folds", parents=[common], help="Detect folds in the normal views")
    detect.add_argument("--views", help="View set directory (TV1)")
    detect.add_argument("--reversed-contrast", dest="reversed_contrast", action="store_true", help="Folds are bright")
    detect.add_argument("--lost-section", dest="lost_section", type=int, action="append", help="Mark a lost section")

    evaluate_parser = commands.add_parser("evaluate", parents=[common], help="Score volumes against ground truth")
    evaluate_parser.add_argument("--truth", help="Ground truth volume (VV1)")
    evaluate_parser.add_argument("--candidate", action="append", help="NAME=PATH of a volume to score")
    evaluate_parser.add_argument("--views", help="Views for the baselines")
    evaluate_parser.add_argument(
        "--baseline", action="append", choices=["cubic", "backprojection", "section_replicate"], help="Add a baseline"
    )

    sweep = commands.add_parser("sweep-lambda", parents=[common], help="Score reconstructions over a lambda grid")
    sweep.add_argument("--truth", help="Ground truth volume (VV1)")
    sweep.add_argument("--views", help="View set directory (TV1)")
    sweep.add_argument("--dictionary", help="Dictionary (VD1)")
    sweep.add_argument("--lambdas", type=float, nargs="+", help="Lambda grid")
    sweep.add_argument("--single-view", dest="single_view", action="store_true", help="Use the normal view only")

    rerun_parser = commands.add_parser("rerun", help="Re-execute a manifest")
    rerun_parser.add_argument("manifest", type=Path, help="Manifest written by an earlier run")
    rerun_parser.add_argument("--out", type=str, help="Write to another directory instead of comparing hashes")
    rerun_parser.add_argument("--log-level", type=str, help="Logging level")

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        settings = Settings.from_env()
    except ValidationError as exc:
        print(json.dumps(_error(args.command, EXIT_CONFIG, exc).error), file=sys.stderr)
        return EXIT_CONFIG

    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(), format="%(levelname)s:%(name)s:%(message)s"
    )

    if args.command == "rerun":
        result = rerun(args.manifest, args.out)
    else:
        try:
            config = build_config(args.command, args, settings)
        except ConfigurationError as exc:
            result = _error(args.command, EXIT_CONFIG, exc)
        else:
            result = run(args.command, config)

    if result.error is not None:
        print(json.dumps(result.error), file=sys.stderr)
    else:
        print(result.prettyprint())
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
