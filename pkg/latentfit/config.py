"""
Run configuration.

A YAML file holds one mapping per section (``corpus``, ``sampling``, ``shape``,
``pose``, ``encoder``, ``fit``, ``eval``, ``paths``, ``run``). Every section is a
dataclass with desk-scale defaults; unknown sections and keys are rejected and
values are validated when the file is loaded. Entries of ``paths`` can be
overridden by ``LATENTFIT_<NAME>`` environment variables.
"""
from __future__ import annotations

import dataclasses
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from latentfit.errors import ConfigError, MissingInputError

ENV_PREFIX = "LATENTFIT_"

ARCHITECTURES = {
    "desk": {"shape_code": 32, "shape_width": 128, "pose_code": 32, "pose_width": 128},
    "human": {"shape_code": 256, "shape_width": 512, "pose_code": 256, "pose_width": 1024},
    "hand": {"shape_code": 16, "shape_width": 64, "pose_code": 64, "pose_width": 256},
}

ENCODER_CHANNELS = (16, 32, 64, 128, 256, 256)
_TRAINING_COUNTS = ("code_dim", "width", "bands", "epochs", "batch_size", "points_per_item", "decay_every", "log_every")


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass
class CorpusConfig:
    identities: int = 4
    poses_per_identity: int = 10
    limbs_per_side: int = 2
    held_out_identities: int = 0
    sequences: int = 1
    sequence_frames: int = 30
    keyposes: int = 4
    shared_poses: bool = True
    joint_limit_deg: float = 100.0
    pose_range: float = 0.6
    ring_vertices: int = 24
    rings_per_bone: int = 8
    cap_rings: int = 6
    image_size: int = 96
    fov_deg: float = 45.0
    camera_distance: float = 1.6

    def validate(self) -> None:
        for name in ("identities", "poses_per_identity", "sequence_frames", "keyposes"):
            _check(getattr(self, name) >= 1, f"corpus.{name} must be at least 1")
        for name in ("limbs_per_side", "held_out_identities", "sequences"):
            _check(getattr(self, name) >= 0, f"corpus.{name} must be non-negative")
        _check(0 < self.joint_limit_deg <= 180, "corpus.joint_limit_deg must lie in (0, 180]")
        _check(0 <= self.pose_range <= 1, "corpus.pose_range must lie in [0, 1]")
        _check(self.ring_vertices >= 3, "corpus.ring_vertices must be at least 3")
        _check(self.rings_per_bone >= 1, "corpus.rings_per_bone must be at least 1")
        _check(self.cap_rings >= 1, "corpus.cap_rings must be at least 1")
        _check(self.image_size >= 8, "corpus.image_size must be at least 8")
        _check(0 < self.fov_deg < 180, "corpus.fov_deg must lie in (0, 180)")
        _check(self.camera_distance > 0.9, "corpus.camera_distance must keep the unit box in front of the camera")


@dataclass
class SamplingConfig:
    near_surface: int = 15000
    uniform: int = 5000
    band: float = 0.05
    flow_pairs: int = 10000
    flow_sigmas: tuple = (0.01, 0.002)

    def validate(self) -> None:
        _check(self.near_surface >= 1 and self.uniform >= 0, "sampling counts must be positive")
        _check(self.flow_pairs >= 1, "sampling.flow_pairs must be positive")
        _check(self.band > 0, "sampling.band must be positive")
        _check(
            len(self.flow_sigmas) == 2 and min(self.flow_sigmas) >= 0,
            "sampling.flow_sigmas needs two non-negative scales",
        )


@dataclass
class ShapeConfig:
    code_dim: int = 32
    width: int = 128
    bands: int = 8
    epochs: int = 1500
    batch_size: int = 4
    points_per_item: int = 2500
    near_fraction: float = 0.7
    lr_network: float = 5e-4
    lr_codes: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 500
    sigma: float = 100.0
    delta: float = 0.1
    code_init_std: float = 0.01
    plateau_patience: int = 200
    plateau_tolerance: float = 1e-3
    log_every: int = 50

    def validate(self) -> None:
        for name in _TRAINING_COUNTS:
            _check(getattr(self, name) >= 1, f"shape.{name} must be at least 1")
        for name in ("lr_network", "lr_codes", "sigma", "delta", "code_init_std"):
            _check(getattr(self, name) > 0, f"shape.{name} must be positive")
        _check(0 < self.near_fraction <= 1, "shape.near_fraction must lie in (0, 1]")
        _check(0 < self.decay_factor <= 1, "shape.decay_factor must lie in (0, 1]")
        _check(self.plateau_patience >= 0, "shape.plateau_patience must be non-negative")


@dataclass
class PoseConfig:
    code_dim: int = 32
    width: int = 128
    bands: int = 8
    epochs: int = 150
    batch_size: int = 4
    points_per_item: int = 2500
    lr_network: float = 5e-4
    lr_codes: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 500
    sigma: float = 100.0
    code_init_std: float = 0.01
    output_scale: float = 0.1
    plateau_patience: int = 50
    plateau_tolerance: float = 1e-3
    log_every: int = 10

    def validate(self) -> None:
        for name in _TRAINING_COUNTS:
            _check(getattr(self, name) >= 1, f"pose.{name} must be at least 1")
        for name in ("lr_network", "lr_codes", "sigma", "code_init_std", "output_scale"):
            _check(getattr(self, name) > 0, f"pose.{name} must be positive")
        _check(0 < self.decay_factor <= 1, "pose.decay_factor must lie in (0, 1]")
        _check(self.plateau_patience >= 0, "pose.plateau_patience must be non-negative")


@dataclass
class EncoderConfig:
    resolution: int = 32
    shape_channels: tuple = ENCODER_CHANNELS
    pose_channels: tuple = ENCODER_CHANNELS
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 50
    log_every: int = 10

    def validate(self) -> None:
        _check(self.resolution >= 4, "encoder.resolution must be at least 4")
        for name in ("shape_channels", "pose_channels"):
            channels = getattr(self, name)
            _check(len(channels) >= 1 and min(channels) >= 1, f"encoder.{name} must list positive widths")
            _check(
                self.resolution >= 2 ** (len(channels) - 1),
                f"encoder.{name} downsamples a {self.resolution}^3 grid below one voxel",
            )
        for name in ("epochs", "batch_size", "decay_every", "log_every"):
            _check(getattr(self, name) >= 1, f"encoder.{name} must be at least 1")
        _check(self.lr > 0, "encoder.lr must be positive")
        _check(0 < self.decay_factor <= 1, "encoder.decay_factor must lie in (0, 1]")


@dataclass
class FitConfig:
    resolution: int = 96
    truncation: float = 0.01
    band: float = 0.1
    delta: float = 0.1
    iterations: int = 400
    lr_shape: float = 5e-4
    lr_pose: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 0
    sigma_shape: float = 100.0
    sigma_pose: float = 100.0
    lambda_t: float = 200.0
    lambda_icp: float = 5e-4
    eps_icp: float = 1e-3
    icp_until: int = 0
    n_t: int = 50000
    n_b: int = 5000
    batch_size: int = 4
    displacement: float = 0.015
    mesh_resolution: int = 128
    use_shape_encoder: bool = True
    use_pose_encoder: bool = True
    log_every: int = 25

    @property
    def decay_interval(self) -> int:
        """Iterations between learning-rate halvings; ``decay_every = 0`` means a quarter of the run."""
        return self.decay_every or max(1, self.iterations // 4)

    @property
    def icp_iterations(self) -> int:
        """Iterations with the ICP term active; ``icp_until = 0`` means the first half of the run."""
        return self.icp_until or self.iterations // 2

    def validate(self) -> None:
        for name in ("resolution", "iterations", "n_t", "n_b", "batch_size", "mesh_resolution", "log_every"):
            _check(getattr(self, name) >= 1, f"fit.{name} must be at least 1")
        for name in (
            "truncation",
            "band",
            "delta",
            "lr_shape",
            "lr_pose",
            "sigma_shape",
            "sigma_pose",
            "eps_icp",
            "displacement",
        ):
            _check(getattr(self, name) > 0, f"fit.{name} must be positive")
        for name in ("lambda_t", "lambda_icp", "decay_every", "icp_until"):
            _check(getattr(self, name) >= 0, f"fit.{name} must be non-negative")
        _check(self.n_b <= self.n_t, "fit.n_b cannot exceed fit.n_t")
        _check(0 < self.decay_factor <= 1, "fit.decay_factor must lie in (0, 1]")
        _check(self.resolution >= 2 and self.mesh_resolution >= 2, "grid resolutions need two nodes per axis")


@dataclass
class EvalConfig:
    iou_samples: int = 1_000_000
    chamfer_samples: int = 100_000
    epe_samples: int = 100_000
    keyframe_stride: int = 50
    mesh_resolution: int = 128

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            _check(getattr(self, f.name) >= 1, f"eval.{f.name} must be at least 1")


@dataclass
class PathsConfig:
    corpus: str | None = None
    shape_checkpoint: str | None = None
    pose_checkpoint: str | None = None
    encoder_checkpoint: str | None = None
    fit_result: str | None = None
    predictions: str | None = None

    def validate(self) -> None:
        pass

    def apply_environment(self, environ: Mapping[str, str] | None = None) -> None:
        environ = os.environ if environ is None else environ
        for f in dataclasses.fields(self):
            value = environ.get(ENV_PREFIX + f.name.upper())
            if value:
                setattr(self, f.name, value)


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1
    deterministic: bool = False
    precision: str = "float64"
    architecture: str = "desk"

    def validate(self) -> None:
        _check(self.seed >= 0, "run.seed must be non-negative")
        _check(self.threads >= 1, "run.threads must be at least 1")
        _check(self.precision in ("float64", "float32"), "run.precision must be float64 or float32")
        _check(self.architecture in ARCHITECTURES, f"run.architecture must be one of {sorted(ARCHITECTURES)}")


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    shape: ShapeConfig = field(default_factory=ShapeConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> RunConfig:
        for f in dataclasses.fields(self):
            getattr(self, f.name).validate()
        return self

    def to_dict(self) -> dict[str, dict[str, Any]]:
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> RunConfig:
        config = cls()
        data = data or {}
        if not isinstance(data, Mapping):
            raise ConfigError("Configuration must be a mapping of sections.")
        sections = {f.name for f in dataclasses.fields(cls)}
        for name, values in data.items():
            if name not in sections:
                raise ConfigError(f"Unknown configuration section {name!r}.")
            if values is None:
                continue
            if not isinstance(values, Mapping):
                raise ConfigError(f"Section {name!r} must be a mapping.")
            section = getattr(config, name)
            setattr(config, name, _coerce_section(section, name, values))
        if "run" in data and data["run"] and "architecture" in data["run"]:
            config = config.with_architecture(config.run.architecture, keep=data)
        return config.validate()

    def with_architecture(self, name: str, keep: Mapping[str, Any] | None = None) -> RunConfig:
        """Apply code/width presets; keys set explicitly in ``keep`` win."""
        if name not in ARCHITECTURES:
            raise ConfigError(f"Unknown architecture {name!r}.")
        preset = ARCHITECTURES[name]
        keep = keep or {}
        shape_keys = set((keep.get("shape") or {}).keys())
        pose_keys = set((keep.get("pose") or {}).keys())
        shape = dataclasses.replace(
            self.shape,
            code_dim=self.shape.code_dim if "code_dim" in shape_keys else preset["shape_code"],
            width=self.shape.width if "width" in shape_keys else preset["shape_width"],
        )
        pose = dataclasses.replace(
            self.pose,
            code_dim=self.pose.code_dim if "code_dim" in pose_keys else preset["pose_code"],
            width=self.pose.width if "width" in pose_keys else preset["pose_width"],
        )
        run = dataclasses.replace(self.run, architecture=name)
        return dataclasses.replace(self, shape=shape, pose=pose, run=run)

    def full_scale(self, keep: Mapping[str, Any] | None = None) -> RunConfig:
        """
        Sample counts, schedules and resolutions of the full-size experiments.
        Keys set explicitly in ``keep`` win over the preset.

        Fitting and training energies are the summed energies divided by the
        points per item, so the prior scales here keep their summed-form balance
        against the data terms only at the full-size point counts.
        """
        warnings.warn(
            "Full-scale fitting priors (sigma_shape=0.1, sigma_pose=1e-4) are strong; they balance the data terms "
            "only with full-size point batches.",
            UserWarning,
        )
        keep = keep or {}
        explicit = {name: set(values) for name, values in keep.items() if isinstance(values, Mapping)}
        architecture = self.run.architecture if "architecture" in explicit.get("run", ()) else "human"
        config = self.with_architecture(architecture, keep)
        scaled = dataclasses.replace(
            config,
            sampling=dataclasses.replace(config.sampling, near_surface=300_000, uniform=100_000, flow_pairs=200_000),
            shape=dataclasses.replace(config.shape, epochs=4000, points_per_item=50_000, plateau_patience=0),
            pose=dataclasses.replace(config.pose, epochs=150, points_per_item=50_000, plateau_patience=0),
            fit=dataclasses.replace(
                config.fit,
                resolution=256,
                iterations=1000,
                n_t=500_000,
                n_b=20_000,
                mesh_resolution=256,
                sigma_shape=0.1,
                sigma_pose=1e-4,
            ),
            eval=dataclasses.replace(config.eval, mesh_resolution=256),
        )
        for name, keys in explicit.items():
            kept = {key: getattr(getattr(self, name), key) for key in keys}
            setattr(scaled, name, dataclasses.replace(getattr(scaled, name), **kept))
        return scaled.validate()


def _coerce(value: Any, default: Any, where: str) -> Any:
    if default is None:
        if value is None or isinstance(value, str):
            return value
        raise ConfigError(f"{where} must be a string.")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where} must be true or false.")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where} must be an integer.")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number.")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list.")
        return tuple(_coerce(v, default[0], where) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string.")
        return value
    raise ConfigError(f"{where} has an unsupported type.")


def _coerce_section(section: Any, name: str, values: Mapping[str, Any]) -> Any:
    known = {f.name: getattr(section, f.name) for f in dataclasses.fields(section)}
    updates = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"Unknown key {name}.{key}.")
        updates[key] = _coerce(value, known[key], f"{name}.{key}")
    return dataclasses.replace(section, **updates)


def load_config(
    path: str | os.PathLike | None = None,
    full_scale: bool = False,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    data = None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingInputError(f"Configuration file {path} does not exist.")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as err:
            raise ConfigError(f"Cannot parse {path}: {err}") from err
    config = RunConfig.from_dict(data)
    if full_scale:
        config = config.full_scale(keep=data if isinstance(data, Mapping) else None)
    config.paths.apply_environment(environ)
    return config
