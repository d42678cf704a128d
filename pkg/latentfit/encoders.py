"""
Voxel encoders that map one back-projected depth frame to an initial shape or
pose code.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from latentfit import tape as tp
from latentfit.checkpoint import load_checkpoint, prefixed, save_checkpoint, sub_arrays
from latentfit.config import EncoderConfig
from latentfit.errors import NumericalError
from latentfit.mesh import TriMesh
from latentfit.mlp import LatentCode
from latentfit.optim import AdamState, ParamGroup, adam_step
from latentfit.point_index import PointIndex
from latentfit.spaces import PoseSpace, ShapeSpace
from latentfit.synth import Camera, DepthFrame, render_depth
from latentfit.tape import GradientTape, Tensor
from latentfit.utils import derive_rng, parallel_map

logger = logging.getLogger(__name__)

ENCODER_KIND = "voxel_encoders"
KERNEL = 3

# derive_rng stage keys
_ENCODER_INIT, _ENCODER_TRAINING = 21, 22


@dataclass
class VoxelEncoder:
    """
    Stack of 3x3x3 convolutions with ReLU, the first at stride 1 and the rest at
    stride 2, followed by one fully connected layer to the code dimension.
    """

    resolution: int
    channels: tuple[int, ...]
    out_dim: int
    role: str
    conv: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    fc: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if self.role not in ("shape", "pose"):
            raise ValueError(f"Unknown encoder role {self.role!r}.")
        if self.feature_resolution < 1:
            raise ValueError(f"{len(self.channels)} blocks downsample a {self.resolution}^3 grid below one voxel.")

    @property
    def feature_resolution(self) -> int:
        r = self.resolution
        for _ in self.channels[1:]:
            r = (r - 1) // 2 + 1
        return r

    @property
    def flat_dim(self) -> int:
        return self.channels[-1] * self.feature_resolution**3

    @classmethod
    def init(
        cls, resolution: int, channels: Sequence[int], out_dim: int, role: str, rng: np.random.Generator
    ) -> VoxelEncoder:
        encoder = cls(resolution, tuple(channels), out_dim, role)
        c_in = 1
        for c_out in encoder.channels:
            std = np.sqrt(2.0 / (KERNEL**3 * c_in))
            weight = rng.normal(0.0, std, size=(KERNEL, KERNEL, KERNEL, c_in, c_out))
            encoder.conv.append((weight, np.zeros(c_out)))
            c_in = c_out
        fc_weight = rng.normal(0.0, np.sqrt(1.0 / encoder.flat_dim), size=(out_dim, encoder.flat_dim))
        encoder.fc = (fc_weight, np.zeros(out_dim))
        return encoder

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (weight, bias) in enumerate(self.conv):
            out[f"conv{k}.weight"] = weight
            out[f"conv{k}.bias"] = bias
        out["fc.weight"], out["fc.bias"] = self.fc
        return out

    def header(self) -> dict:
        return {
            "resolution": self.resolution,
            "channels": list(self.channels),
            "out_dim": self.out_dim,
            "role": self.role,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], header: dict) -> VoxelEncoder:
        encoder = cls(int(header["resolution"]), tuple(header["channels"]), int(header["out_dim"]), header["role"])
        for k in range(len(encoder.channels)):
            encoder.conv.append((np.array(arrays[f"conv{k}.weight"]), np.array(arrays[f"conv{k}.bias"])))
        encoder.fc = (np.array(arrays["fc.weight"]), np.array(arrays["fc.bias"]))
        if encoder.fc[0].shape != (encoder.out_dim, encoder.flat_dim):
            expected = (encoder.out_dim, encoder.flat_dim)
            raise ValueError(f"Encoder head has shape {encoder.fc[0].shape}, expected {expected}.")
        return encoder

    def forward(self, grids: np.ndarray, tape: GradientTape | None = None) -> Tensor:
        """Codes ``(batch, out_dim)`` for occupancy grids ``(batch, R, R, R)``."""
        grids = np.asarray(grids, dtype=np.float64)
        if grids.ndim == 3:
            grids = grids[None]
        if grids.shape[1:] != (self.resolution,) * 3:
            raise ValueError(f"Encoder expects {self.resolution}^3 grids, got {grids.shape[1:]}.")
        arrays = self.arrays()
        params = {k: tape.watch(v, k) if tape is not None else Tensor(v, name=k) for k, v in arrays.items()}

        h = Tensor(grids[..., None])
        for k in range(len(self.conv)):
            stride = 1 if k == 0 else 2
            h = tp.relu(tp.conv3d(h, params[f"conv{k}.weight"], params[f"conv{k}.bias"], stride=stride, padding=1))
        h = tp.reshape(h, (grids.shape[0], self.flat_dim))
        return tp.linear(h, params["fc.weight"], params["fc.bias"])


def occupancy_grid(points: np.ndarray, resolution: int, band: float | None = None) -> np.ndarray:
    """
    Binary ``resolution^3`` grid over the unit box marking the truncation band
    of the observed points: every cell holding a point, and every cell whose
    centre lies within ``band`` of one. ``band`` defaults to one cell width.
    """
    grid = np.zeros((resolution,) * 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return grid
    cells = np.floor((points + 0.5) * resolution).astype(np.int64)
    inside = np.all((cells >= 0) & (cells < resolution), axis=1)
    cells = cells[inside]
    grid[cells[:, 0], cells[:, 1], cells[:, 2]] = 1.0
    band = 1.0 / resolution if band is None else band
    if band > 0:
        centres = (np.indices(grid.shape).reshape(3, -1).T + 0.5) / resolution - 0.5
        distance, _ = PointIndex(points).query(centres)
        grid[(distance <= band).reshape(grid.shape)] = 1.0
    return grid


def frame_occupancy(frame: DepthFrame, resolution: int) -> np.ndarray:
    return occupancy_grid(frame.points(), resolution)


def _encode(encoder: VoxelEncoder, grid: np.ndarray, role: str) -> LatentCode:
    if encoder.role != role:
        raise ValueError(f"Expected a {role} encoder, got a {encoder.role} encoder.")
    grid = np.asarray(grid)
    if grid.shape != (encoder.resolution,) * 3:
        raise ValueError(f"Encoder expects a {encoder.resolution}^3 grid, got {grid.shape}.")
    return LatentCode(encoder.forward(grid).value[0], role)


def encode_shape(encoder: VoxelEncoder, grid: np.ndarray) -> LatentCode:
    return _encode(encoder, grid, "shape")


def encode_pose(encoder: VoxelEncoder, grid: np.ndarray) -> LatentCode:
    return _encode(encoder, grid, "pose")


def average_code(codes: Sequence[LatentCode | np.ndarray]) -> LatentCode:
    """Mean of a non-empty list of equally sized codes."""
    if len(codes) == 0:
        raise ValueError("Cannot average an empty list of codes.")
    role = codes[0].role if isinstance(codes[0], LatentCode) else "shape"
    values = [c.values if isinstance(c, LatentCode) else np.asarray(c, dtype=np.float64) for c in codes]
    if len({v.shape for v in values}) != 1:
        raise ValueError("Codes of different dimensions cannot be averaged.")
    return LatentCode(np.mean(values, axis=0), role)


def render_views(meshes: Sequence[TriMesh], camera: Camera, resolution: int, threads: int = 1) -> np.ndarray:
    """Occupancy grids of every mesh as seen from ``camera``."""
    grids = parallel_map(lambda mesh: frame_occupancy(render_depth(mesh, camera), resolution), meshes, threads)
    return np.stack(grids) if grids else np.zeros((0,) + (resolution,) * 3)


@dataclass
class EncoderPair:
    shape: VoxelEncoder
    pose: VoxelEncoder
    history: list[dict] = field(default_factory=list)

    def save(self, path: str | os.PathLike, config: dict | None = None) -> Path:
        arrays = {**prefixed(self.shape.arrays(), "shape/"), **prefixed(self.pose.arrays(), "pose/")}
        meta = {"shape": self.shape.header(), "pose": self.pose.header(), "config": config or {}}
        return save_checkpoint(path, arrays, ENCODER_KIND, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> EncoderPair:
        arrays, meta = load_checkpoint(path, ENCODER_KIND)
        return cls(
            VoxelEncoder.from_arrays(sub_arrays(arrays, "shape/"), meta["shape"]),
            VoxelEncoder.from_arrays(sub_arrays(arrays, "pose/"), meta["pose"]),
        )


def _train_one(
    encoder: VoxelEncoder,
    grids: np.ndarray,
    targets: np.ndarray,
    config: EncoderConfig,
    rng: np.random.Generator,
) -> list[float]:
    state = AdamState(groups={"network": ParamGroup(config.lr, config.decay_factor, config.decay_every)})
    losses = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(grids))
        total, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            tape = GradientTape()
            pred = encoder.forward(grids[batch], tape)
            loss = tp.mean(tp.square(pred - targets[batch]))
            value = float(loss.value)
            if not np.isfinite(value):
                raise NumericalError(
                    f"{encoder.role} encoder training diverged at epoch {epoch}.",
                    {"stage": f"{encoder.role}_encoder", "epoch": epoch, "loss": value},
                )
            grads = tape.backward(loss)
            adam_step(state, {"network": encoder.arrays()}, {"network": grads})
            total += value
            batches += 1
        state.tick()
        losses.append(total / batches)
        if epoch % config.log_every == 0:
            logger.info("%s encoder epoch %d: mse %.6g", encoder.role, epoch, losses[-1])
    return losses


def train_encoders(
    shape_space: ShapeSpace,
    pose_space: PoseSpace,
    grids: np.ndarray,
    config: EncoderConfig,
    seed: int = 0,
) -> EncoderPair:
    """
    Regress the learned codes from occupancy grids of the posed training
    instances; ``grids[j]`` shows posed instance ``j``. The shape encoder's target
    is the code of the underlying identity for every view.
    """
    config.validate()
    grids = np.asarray(grids, dtype=np.float64)
    if len(grids) != len(pose_space):
        raise ValueError(f"Got {len(grids)} views for {len(pose_space)} posed instances.")
    if len(grids) == 0:
        raise ValueError("Encoder training needs at least one view.")
    init = derive_rng(seed, _ENCODER_INIT)
    shape = VoxelEncoder.init(config.resolution, config.shape_channels, shape_space.code_dim, "shape", init)
    pose = VoxelEncoder.init(config.resolution, config.pose_channels, pose_space.code_dim, "pose", init)

    shape_targets = shape_space.codes[pose_space.pose_to_identity].astype(np.float64)
    pose_targets = pose_space.codes.astype(np.float64)
    logger.info("Training encoders on %d views at %d^3", len(grids), config.resolution)
    shape_losses = _train_one(shape, grids, shape_targets, config, derive_rng(seed, _ENCODER_TRAINING, 0))
    pose_losses = _train_one(pose, grids, pose_targets, config, derive_rng(seed, _ENCODER_TRAINING, 1))
    history = [
        {"epoch": e + 1, "shape_mse": s, "pose_mse": p} for e, (s, p) in enumerate(zip(shape_losses, pose_losses))
    ]
    return EncoderPair(shape, pose, history)
