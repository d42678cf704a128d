"""
Auto-decoded shape and pose spaces.

The shape space pairs a signed-distance decoder with one latent code per
training identity; decoder and codes are optimized together against sampled
signed distances. The pose space pairs a flow decoder with one code per posed
instance and is trained on canonical/posed correspondences while the shape
codes stay fixed.
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
from latentfit.config import PoseConfig, SamplingConfig, ShapeConfig
from latentfit.errors import IncompatibleInputError, NumericalError
from latentfit.losses import clamped_l1, code_regularizer, flow_distance
from latentfit.mesh import TriMesh
from latentfit.mlp import (
    BoundMlp,
    LatentCode,
    MlpParams,
    decode_flow,
    decode_sdf,
    init_mlp,
    pose_decoder_forward,
    shape_decoder_forward,
)
from latentfit.optim import AdamState, ParamGroup, adam_step, group_gradients
from latentfit.sampling import FlowSamples, SdfSamples, sample_flow_pairs, sample_shape_points
from latentfit.tape import GradientTape
from latentfit.utils import derive_rng, parallel_map, write_csv
from latentfit.volume import SdfGrid, marching_cubes

logger = logging.getLogger(__name__)

SHAPE_KIND = "shape_space"
POSE_KIND = "pose_space"
RECONSTRUCTION_HALF_EXTENT = 0.55
HISTORY_FIELDS = ("epoch", "loss", "data", "code", "lr_network", "lr_codes")

# derive_rng stage keys
_SHAPE_SAMPLES, _FLOW_SAMPLES, _SHAPE_TRAINING, _POSE_TRAINING = 11, 12, 13, 14


@dataclass
class ShapeSpace:
    decoder: MlpParams
    codes: np.ndarray
    names: list[str]
    delta: float = 0.1
    sigma: float = 100.0
    optimizer: AdamState | None = None
    epochs_done: int = 0
    history: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes)
        if self.codes.ndim != 2 or self.codes.shape[1] != self.decoder.code_dims[0]:
            raise ValueError(f"Shape code table {self.codes.shape} does not match decoder {self.decoder.code_dims}.")
        if len(self.names) != len(self.codes):
            raise ValueError("Every shape code needs a name.")

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def code_dim(self) -> int:
        return self.codes.shape[1]

    def code(self, i: int) -> LatentCode:
        return LatentCode(self.codes[i].copy(), "shape")

    def sdf(self, code: LatentCode | np.ndarray | int, points: np.ndarray) -> np.ndarray:
        if isinstance(code, (int, np.integer)):
            code = self.codes[code]
        return decode_sdf(self.decoder, code, points)

    def grid(self, code: LatentCode | np.ndarray | int, resolution: int) -> SdfGrid:
        return SdfGrid.from_function(lambda x: self.sdf(code, x), resolution, RECONSTRUCTION_HALF_EXTENT)

    def reconstruct(self, code: LatentCode | np.ndarray | int, resolution: int = 128) -> TriMesh:
        """Zero level set of the decoded field on a grid slightly larger than the unit box."""
        return marching_cubes(self.grid(code, resolution))

    def save(self, path: str | os.PathLike, config: dict | None = None) -> Path:
        arrays = prefixed(self.decoder.arrays(), "network/")
        arrays["codes"] = self.codes
        meta = {
            "decoder": self.decoder.header(),
            "names": list(self.names),
            "delta": float(self.delta),
            "sigma": float(self.sigma),
            "epochs_done": int(self.epochs_done),
            "config": config or {},
        }
        if self.optimizer is not None:
            arrays.update(self.optimizer.to_arrays())
            meta["optimizer"] = self.optimizer.header()
        return save_checkpoint(path, arrays, SHAPE_KIND, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> ShapeSpace:
        arrays, meta = load_checkpoint(path, SHAPE_KIND)
        optimizer = AdamState.from_arrays(arrays, meta["optimizer"]) if "optimizer" in meta else None
        return cls(
            decoder=MlpParams.from_arrays(sub_arrays(arrays, "network/"), meta["decoder"]),
            codes=np.array(arrays["codes"]),
            names=list(meta["names"]),
            delta=float(meta["delta"]),
            sigma=float(meta["sigma"]),
            optimizer=optimizer,
            epochs_done=int(meta["epochs_done"]),
        )


@dataclass
class PoseSpace:
    decoder: MlpParams
    codes: np.ndarray
    pose_to_identity: np.ndarray
    shape_space: ShapeSpace
    sigma: float = 100.0
    optimizer: AdamState | None = None
    epochs_done: int = 0
    history: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes)
        self.pose_to_identity = np.asarray(self.pose_to_identity, dtype=np.int64)
        if self.decoder.code_dims != (self.shape_space.code_dim, self.codes.shape[1]):
            raise ValueError(
                f"Pose decoder takes codes {self.decoder.code_dims}, spaces provide "
                f"{(self.shape_space.code_dim, self.codes.shape[1])}."
            )
        if self.pose_to_identity.shape != (len(self.codes),):
            raise ValueError("pose_to_identity needs one entry per pose code.")
        if np.any((self.pose_to_identity < 0) | (self.pose_to_identity >= len(self.shape_space))):
            raise ValueError("pose_to_identity refers to a missing shape code.")

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def code_dim(self) -> int:
        return self.codes.shape[1]

    def code(self, j: int) -> LatentCode:
        return LatentCode(self.codes[j].copy(), "pose")

    def flow(
        self, shape_code: LatentCode | np.ndarray, pose_code: LatentCode | np.ndarray, points: np.ndarray
    ) -> np.ndarray:
        return decode_flow(self.decoder, shape_code, pose_code, points)

    def deform(
        self, shape_code: LatentCode | np.ndarray, pose_code: LatentCode | np.ndarray, mesh: TriMesh
    ) -> TriMesh:
        """Move every canonical vertex by its decoded flow; faces are kept."""
        if mesh.is_empty:
            return mesh
        return mesh.with_vertices(mesh.vertices + self.flow(shape_code, pose_code, mesh.vertices))

    def save(self, path: str | os.PathLike, config: dict | None = None) -> Path:
        arrays = prefixed(self.decoder.arrays(), "network/")
        arrays["codes"] = self.codes
        arrays["pose_to_identity"] = self.pose_to_identity
        meta = {
            "decoder": self.decoder.header(),
            "sigma": float(self.sigma),
            "epochs_done": int(self.epochs_done),
            "shape_codes": [len(self.shape_space), self.shape_space.code_dim],
            "config": config or {},
        }
        if self.optimizer is not None:
            arrays.update(self.optimizer.to_arrays())
            meta["optimizer"] = self.optimizer.header()
        return save_checkpoint(path, arrays, POSE_KIND, meta)

    @classmethod
    def load(cls, path: str | os.PathLike, shape_space: ShapeSpace) -> PoseSpace:
        arrays, meta = load_checkpoint(path, POSE_KIND)
        if list(meta["shape_codes"]) != [len(shape_space), shape_space.code_dim]:
            raise IncompatibleInputError(f"{path} was trained against a different shape space.")
        optimizer = AdamState.from_arrays(arrays, meta["optimizer"]) if "optimizer" in meta else None
        return cls(
            decoder=MlpParams.from_arrays(sub_arrays(arrays, "network/"), meta["decoder"]),
            codes=np.array(arrays["codes"]),
            pose_to_identity=np.array(arrays["pose_to_identity"]),
            shape_space=shape_space,
            sigma=float(meta["sigma"]),
            optimizer=optimizer,
            epochs_done=int(meta["epochs_done"]),
        )


def shape_samples_for(
    meshes: Sequence[TriMesh], config: SamplingConfig, seed: int = 0, threads: int = 1
) -> list[SdfSamples]:
    def one(item: tuple[int, TriMesh]) -> SdfSamples:
        i, mesh = item
        rng = derive_rng(seed, _SHAPE_SAMPLES, i)
        return sample_shape_points(mesh, config.near_surface, config.uniform, rng, config.band)

    return parallel_map(one, list(enumerate(meshes)), threads)


def flow_samples_for(
    canonical: Sequence[TriMesh],
    posed: Sequence[TriMesh],
    pose_to_identity: Sequence[int],
    config: SamplingConfig,
    seed: int = 0,
    threads: int = 1,
) -> list[FlowSamples]:
    def one(j: int) -> FlowSamples:
        i = pose_to_identity[j]
        rng = derive_rng(seed, _FLOW_SAMPLES, j)
        return sample_flow_pairs(
            canonical[i], posed[j], config.flow_pairs, rng, tuple(config.flow_sigmas), identity=i, pose=j
        )

    return parallel_map(one, list(range(len(posed))), threads)


def _pick(rng: np.random.Generator, candidates: np.ndarray, n: int) -> np.ndarray:
    if n <= 0 or len(candidates) == 0:
        return candidates[:0]
    return rng.choice(candidates, size=n, replace=len(candidates) < n)


def _shape_batch(samples: SdfSamples, n: int, near_fraction: float, rng: np.random.Generator) -> np.ndarray:
    near, uniform = np.flatnonzero(samples.near_surface), np.flatnonzero(samples.uniform)
    n_near = n if len(uniform) == 0 else int(round(n * near_fraction))
    return np.concatenate([_pick(rng, near, n_near), _pick(rng, uniform, n - n_near)])


class _Plateau:
    def __init__(self, patience: int, tolerance: float) -> None:
        self.patience = patience
        self.tolerance = tolerance
        self.best = np.inf
        self.stale = 0

    def update(self, loss: float) -> bool:
        """Record one epoch; true once ``patience`` epochs pass without relative improvement."""
        if loss < self.best * (1.0 - self.tolerance):
            self.best, self.stale = loss, 0
        else:
            self.stale += 1
        return self.patience > 0 and self.stale >= self.patience


def write_history(path: str | os.PathLike, rows: Sequence[dict]) -> Path:
    return write_csv(path, rows, HISTORY_FIELDS)


def _new_optimizer(lr_network: float, lr_codes: float, decay_factor: float, decay_every: int) -> AdamState:
    return AdamState(
        groups={
            "network": ParamGroup(lr_network, decay_factor, decay_every),
            "codes": ParamGroup(lr_codes, decay_factor, decay_every),
        }
    )


def _check_finite(loss: float, stage: str, epoch: int, items: Sequence[int]) -> None:
    if not np.isfinite(loss):
        raise NumericalError(
            f"{stage} training diverged at epoch {epoch}.",
            {"stage": stage, "epoch": epoch, "items": [int(i) for i in items], "loss": float(loss)},
        )


def _record(space: ShapeSpace | PoseSpace, epoch: int, totals: np.ndarray, batches: int, log_every: int) -> dict:
    loss, data, code = totals / max(batches, 1)
    row = {
        "epoch": epoch,
        "loss": float(loss),
        "data": float(data),
        "code": float(code),
        "lr_network": space.optimizer.lr("network"),
        "lr_codes": space.optimizer.lr("codes"),
    }
    space.history.append(row)
    if epoch % log_every == 0:
        logger.info(
            "%s epoch %d: loss %.6g (data %.6g, code %.6g)",
            type(space).__name__,
            epoch,
            row["loss"],
            row["data"],
            row["code"],
        )
    return row


def init_shape_space(
    identities: int,
    config: ShapeConfig,
    rng: np.random.Generator,
    names: Sequence[str] | None = None,
    dtype: np.dtype = np.float64,
) -> ShapeSpace:
    decoder = init_mlp((config.code_dim,), config.width, 1, rng, config.bands, "tanh").astype(dtype)
    codes = rng.normal(0.0, config.code_init_std, size=(identities, config.code_dim)).astype(dtype)
    names = list(names) if names is not None else [f"identity_{i:03d}" for i in range(identities)]
    optimizer = _new_optimizer(config.lr_network, config.lr_codes, config.decay_factor, config.decay_every)
    return ShapeSpace(decoder, codes, names, config.delta, config.sigma, optimizer)


def shape_loss_terms(
    space: ShapeSpace, samples: SdfSamples, index: np.ndarray, code: tp.Tensor, decoder: MlpParams | BoundMlp
) -> tuple[tp.Tensor, tp.Tensor]:
    """
    Clamped distance error and code prior for one identity, both divided by
    ``len(index)`` so their balance matches the summed energy.
    """
    pred = shape_decoder_forward(decoder, code, samples.points[index])
    if not np.all(np.isfinite(pred.value)):
        raise FloatingPointError("Shape decoder produced non-finite distances.")
    data = tp.mean(clamped_l1(pred, samples.sdf[index], space.delta))
    return data, code_regularizer(code, space.sigma) / len(index)


def train_shape_space(
    samples: Sequence[SdfSamples],
    config: ShapeConfig,
    seed: int = 0,
    names: Sequence[str] | None = None,
    resume: ShapeSpace | None = None,
    dtype: np.dtype = np.float64,
) -> ShapeSpace:
    """
    Jointly fit the decoder and one code per identity.

    Each epoch visits the identities in a fresh random order, in batches of
    ``config.batch_size``; every identity contributes ``points_per_item`` samples
    split between near-surface and uniform draws. Training stops after
    ``config.epochs`` epochs in total or when the epoch loss plateaus.
    """
    config.validate()
    if len(samples) == 0:
        raise ValueError("Shape training needs at least one identity.")
    rng = derive_rng(seed, _SHAPE_TRAINING)
    if resume is None:
        space = init_shape_space(len(samples), config, rng, names, dtype)
    else:
        space = resume
        if len(space) != len(samples):
            raise IncompatibleInputError(f"Checkpoint has {len(space)} identities, corpus has {len(samples)}.")
        if space.optimizer is None:
            space.optimizer = _new_optimizer(
                config.lr_network, config.lr_codes, config.decay_factor, config.decay_every
            )
        rng = derive_rng(seed, _SHAPE_TRAINING, space.epochs_done)

    plateau = _Plateau(config.plateau_patience, config.plateau_tolerance)
    logger.info(
        "Training shape space: %d identities, code %d, width %d, epochs %d..%d",
        len(space),
        space.code_dim,
        config.width,
        space.epochs_done + 1,
        config.epochs,
    )
    while space.epochs_done < config.epochs:
        epoch = space.epochs_done + 1
        totals, batches = np.zeros(3), 0
        order = rng.permutation(len(space))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            tape = GradientTape()
            decoder = space.decoder.bind(tape, "network/")
            loss, data_sum, code_sum = 0.0, 0.0, 0.0
            for i in batch:
                code = tape.watch(space.codes[i], f"codes/{i}")
                index = _shape_batch(samples[i], config.points_per_item, config.near_fraction, rng)
                try:
                    data, reg = shape_loss_terms(space, samples[i], index, code, decoder)
                except FloatingPointError:
                    _check_finite(np.nan, "shape", epoch, batch)
                loss = loss + data + reg
                data_sum += float(data.value)
                code_sum += float(reg.value)
            loss = loss / len(batch)
            _check_finite(float(loss.value), "shape", epoch, batch)
            grads = group_gradients(tape.backward(loss))
            params = {"network": space.decoder.arrays(), "codes": {str(i): space.codes[i] for i in batch}}
            adam_step(space.optimizer, params, grads)
            totals += (float(loss.value), data_sum / len(batch), code_sum / len(batch))
            batches += 1
        space.optimizer.tick()
        space.epochs_done = epoch
        row = _record(space, epoch, totals, batches, config.log_every)
        if plateau.update(row["loss"]):
            logger.info("Shape loss plateaued at epoch %d.", epoch)
            break
    return space


def init_pose_space(
    shape_space: ShapeSpace,
    pose_to_identity: Sequence[int],
    config: PoseConfig,
    rng: np.random.Generator,
    dtype: np.dtype = np.float64,
) -> PoseSpace:
    decoder = init_mlp(
        (shape_space.code_dim, config.code_dim),
        config.width,
        3,
        rng,
        config.bands,
        "identity",
        config.output_scale,
    ).astype(dtype)
    codes = rng.normal(0.0, config.code_init_std, size=(len(pose_to_identity), config.code_dim)).astype(dtype)
    optimizer = _new_optimizer(config.lr_network, config.lr_codes, config.decay_factor, config.decay_every)
    return PoseSpace(decoder, codes, np.asarray(pose_to_identity), shape_space, config.sigma, optimizer)


def train_pose_space(
    shape_space: ShapeSpace,
    samples: Sequence[FlowSamples],
    pose_to_identity: Sequence[int],
    config: PoseConfig,
    seed: int = 0,
    resume: PoseSpace | None = None,
    dtype: np.dtype = np.float64,
) -> PoseSpace:
    """
    Fit the flow decoder and one code per posed instance; shape codes are read
    but never written.
    """
    config.validate()
    if len(samples) != len(pose_to_identity):
        raise ValueError("Every posed instance needs flow samples and an identity.")
    if len(samples) == 0:
        raise ValueError("Pose training needs at least one posed instance.")
    rng = derive_rng(seed, _POSE_TRAINING)
    if resume is None:
        space = init_pose_space(shape_space, pose_to_identity, config, rng, dtype)
    else:
        space = resume
        if len(space) != len(samples):
            raise IncompatibleInputError(f"Checkpoint has {len(space)} poses, corpus has {len(samples)}.")
        if space.optimizer is None:
            space.optimizer = _new_optimizer(
                config.lr_network, config.lr_codes, config.decay_factor, config.decay_every
            )
        rng = derive_rng(seed, _POSE_TRAINING, space.epochs_done)

    shape_codes = shape_space.codes
    plateau = _Plateau(config.plateau_patience, config.plateau_tolerance)
    logger.info(
        "Training pose space: %d posed instances, code %d, width %d, epochs %d..%d",
        len(space),
        space.code_dim,
        config.width,
        space.epochs_done + 1,
        config.epochs,
    )
    while space.epochs_done < config.epochs:
        epoch = space.epochs_done + 1
        totals, batches = np.zeros(3), 0
        order = rng.permutation(len(space))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            tape = GradientTape()
            decoder = space.decoder.bind(tape, "network/")
            loss, data_sum, code_sum = 0.0, 0.0, 0.0
            for j in batch:
                pair = samples[j]
                index = _pick(rng, np.arange(len(pair)), config.points_per_item)
                code = tape.watch(space.codes[j], f"codes/{j}")
                shape = shape_codes[space.pose_to_identity[j]]
                pred = pose_decoder_forward(decoder, shape, code, pair.canonical[index])
                data = tp.mean(flow_distance(pred, pair.flow[index]))
                reg = code_regularizer(code, space.sigma) / len(index)
                loss = loss + data + reg
                data_sum += float(data.value)
                code_sum += float(reg.value)
            loss = loss / len(batch)
            _check_finite(float(loss.value), "pose", epoch, batch)
            grads = group_gradients(tape.backward(loss))
            params = {"network": space.decoder.arrays(), "codes": {str(j): space.codes[j] for j in batch}}
            adam_step(space.optimizer, params, grads)
            totals += (float(loss.value), data_sum / len(batch), code_sum / len(batch))
            batches += 1
        space.optimizer.tick()
        space.epochs_done = epoch
        row = _record(space, epoch, totals, batches, config.log_every)
        if plateau.update(row["loss"]):
            logger.info("Pose loss plateaued at epoch %d.", epoch)
            break
    return space
