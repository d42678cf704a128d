"""
Fitting a depth sequence with one shape code and one pose code per frame.

Each frame's depth image is turned into a masked projective signed-distance
grid. Canonical query points are scattered around the surface decoded from the
initial shape code; at every iteration a sub-batch of them is deformed into a
mini-batch of frames and compared with the observations there. The energy per
frame adds code priors, a temporal smoothness term between neighbouring frames
and, for the first half of the run, a point-to-point term pulling the deformed
near-surface points onto the observed depth points.
"""
from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from latentfit import tape as tp
from latentfit.checkpoint import load_checkpoint, save_checkpoint
from latentfit.config import FitConfig
from latentfit.encoders import EncoderPair, average_code, encode_pose, encode_shape, occupancy_grid
from latentfit.errors import NumericalError
from latentfit.losses import clamped_l1, code_regularizer
from latentfit.mesh import MeshError, TriMesh, sample_surface
from latentfit.mlp import LatentCode, pose_decoder_forward, shape_decoder_forward
from latentfit.optim import AdamState, ParamGroup, adam_step, group_gradients
from latentfit.point_index import PointIndex
from latentfit.spaces import PoseSpace, ShapeSpace
from latentfit.synth import DepthFrame
from latentfit.tape import GradientTape, Tensor
from latentfit.utils import derive_rng, write_csv
from latentfit.volume import SdfGrid, sample_grid

logger = logging.getLogger(__name__)

RESULT_KIND = "fitting_result"
HISTORY_FIELDS = ("iteration", "loss", "recon", "code", "temporal", "icp", "lr_shape", "lr_pose")

# derive_rng stage keys
_FIT_POINTS, _FIT_BATCHES = 31, 32


class FittingDivergence(NumericalError):
    def __init__(
        self,
        message: str,
        shape_code: np.ndarray,
        pose_codes: np.ndarray,
        diagnostics: dict | None = None,
    ) -> None:
        super().__init__(message, diagnostics)
        self.shape_code = shape_code
        self.pose_codes = pose_codes


def depth_to_observation(
    frame: DepthFrame, resolution: int, trunc: float = 0.01, band: float = 0.1
) -> SdfGrid:
    """
    Projective signed distance of every unit-box grid node to the observed depth.

    The distance is measured along the node's camera ray, positive in front of
    the surface, and clamped to ``band``. Nodes more than ``trunc`` behind the
    surface, outside the image, behind the camera or on pixels without depth are
    masked out.
    """
    grid = SdfGrid.unit_box(resolution)
    nodes = grid.node_positions()
    rotation, eye = frame.cam_to_world[:3, :3], frame.cam_to_world[:3, 3]
    local = (nodes - eye) @ rotation
    z = local[:, 2]
    front = z > 1e-9
    safe_z = np.where(front, z, 1.0)
    rx, ry = local[:, 0] / safe_z, local[:, 1] / safe_z
    u = np.rint(frame.fx * rx + frame.cx).astype(np.int64)
    v = np.rint(frame.fy * ry + frame.cy).astype(np.int64)
    h, w = frame.depth.shape
    seen = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)

    depth = np.zeros(len(nodes))
    depth[seen] = frame.depth[v[seen], u[seen]]
    observed = seen & (depth > 0)
    sdf = np.full(len(nodes), band)
    ray_length = np.sqrt(rx * rx + ry * ry + 1.0)
    sdf[observed] = np.clip((depth[observed] - z[observed]) * ray_length[observed], -band, band)
    mask = observed & (sdf >= -trunc)

    grid.values = sdf.reshape(grid.values.shape)
    grid.mask = mask.reshape(grid.values.shape)
    return grid


@dataclass
class FittingProblem:
    shape_space: ShapeSpace
    pose_space: PoseSpace
    observations: list[SdfGrid]
    point_clouds: list[np.ndarray]
    config: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self) -> None:
        self.config.validate()
        if len(self.observations) < 1:
            raise ValueError("Fitting needs at least one frame.")
        if len(self.point_clouds) != len(self.observations):
            raise ValueError("Every frame needs an observation grid and a point cloud.")
        if len({g.resolution for g in self.observations}) != 1:
            raise ValueError("Observation grids must share one resolution.")
        if self.pose_space.shape_space is not self.shape_space:
            raise ValueError("The pose space was trained against a different shape space.")

    @classmethod
    def from_frames(
        cls, shape_space: ShapeSpace, pose_space: PoseSpace, frames: Sequence[DepthFrame], config: FitConfig
    ) -> FittingProblem:
        observations = [depth_to_observation(f, config.resolution, config.truncation, config.band) for f in frames]
        return cls(shape_space, pose_space, observations, [f.points() for f in frames], config)

    @property
    def frame_count(self) -> int:
        return len(self.observations)


@dataclass
class FittingResult:
    shape_code: LatentCode
    pose_codes: list[LatentCode]
    history: list[dict] = field(default_factory=list)
    canonical: TriMesh | None = None
    posed: list[TriMesh] = field(default_factory=list)
    used_fallback: bool = False

    def save(self, path: str | os.PathLike, config: dict | None = None) -> Path:
        arrays = {
            "shape_code": self.shape_code.values,
            "pose_codes": np.stack([p.values for p in self.pose_codes]),
        }
        meta = {
            "iterations": len(self.history),
            "used_fallback": bool(self.used_fallback),
            "final": dict(self.history[-1]) if self.history else {},
            "config": config or {},
        }
        return save_checkpoint(path, arrays, RESULT_KIND, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> FittingResult:
        arrays, meta = load_checkpoint(path, RESULT_KIND)
        return cls(
            LatentCode(arrays["shape_code"], "shape"),
            [LatentCode(p, "pose") for p in arrays["pose_codes"]],
            used_fallback=bool(meta["used_fallback"]),
        )

    def write_history(self, path: str | os.PathLike) -> Path:
        return write_csv(path, self.history, HISTORY_FIELDS)


def initialize_codes(
    problem: FittingProblem, encoders: EncoderPair | None = None
) -> tuple[LatentCode, list[LatentCode]]:
    """
    Encoder estimates where enabled (the shape code is the mean over frames),
    otherwise the mean of the training code tables.
    """
    config = problem.config
    frames = problem.frame_count
    if encoders is not None and config.use_shape_encoder:
        res = encoders.shape.resolution
        shape = average_code([encode_shape(encoders.shape, occupancy_grid(q, res)) for q in problem.point_clouds])
    else:
        shape = average_code(list(problem.shape_space.codes))
    if encoders is not None and config.use_pose_encoder:
        res = encoders.pose.resolution
        poses = [encode_pose(encoders.pose, occupancy_grid(q, res)) for q in problem.point_clouds]
    else:
        mean_pose = average_code([LatentCode(p, "pose") for p in problem.pose_space.codes])
        poses = [LatentCode(mean_pose.values.copy(), "pose") for _ in range(frames)]
    return LatentCode(shape.values, "shape"), poses


def sample_fitting_points(
    shape_space: ShapeSpace,
    shape_code: LatentCode | np.ndarray,
    n_t: int,
    rng: np.random.Generator,
    displacement: float = 0.015,
    resolution: int = 128,
) -> tuple[np.ndarray, bool]:
    """
    ``n_t`` canonical points around the decoded surface, each displaced by an
    isotropic Gaussian of scale ``displacement``. The flag is set when the code
    decodes to no surface and uniform unit-box points are used instead.
    """
    mesh = shape_space.reconstruct(shape_code, resolution)
    if mesh.is_empty or mesh.area <= 0:
        warnings.warn(
            "Initial shape code decodes to an empty surface; sampling the unit box instead.", UserWarning
        )
        return rng.uniform(-0.5, 0.5, size=(n_t, 3)), True
    points, _, _ = sample_surface(mesh, n_t, rng)
    return points + rng.normal(0.0, displacement, size=points.shape), False


def _neighbours(j: int, frames: int) -> list[int]:
    return [q for q in (j - 1, j + 1) if 0 <= q < frames]


class _FrameBatches:
    """Mini-batches of frame indices from successive seeded permutations."""

    def __init__(self, frames: int, size: int, rng: np.random.Generator) -> None:
        self.frames = frames
        self.size = min(size, frames)
        self.rng = rng
        self.queue: list[int] = []

    def next(self) -> list[int]:
        batch: list[int] = []
        while len(batch) < self.size:
            if not self.queue:
                self.queue = [int(j) for j in self.rng.permutation(self.frames)]
            j = self.queue.pop(0)
            if j not in batch:
                batch.append(j)
        return sorted(batch)


def _icp_term(deformed: Tensor, near: np.ndarray, cloud: np.ndarray) -> Tensor:
    """Sum of distances from every observed point to its nearest deformed near-surface point."""
    if not near.any() or len(cloud) == 0:
        return Tensor(np.array(0.0))
    candidates = tp.take_rows(deformed, np.flatnonzero(near))
    _, nearest = PointIndex(candidates.value).query(cloud)
    return tp.sum_(tp.row_norm(tp.take_rows(candidates, nearest) - cloud))


def frame_energy(
    problem: FittingProblem,
    j: int,
    x: np.ndarray,
    canonical_sdf: Tensor,
    shape: Tensor,
    pose: dict[int, Tensor],
    flows: dict[int, Tensor],
    icp_active: bool,
) -> dict[str, Tensor]:
    """
    Energy terms of frame ``j`` for canonical points ``x``; ``flows`` caches decoded flows per frame.

    Every term is the summed per-frame energy divided by ``len(x)``, so the
    weights and prior scales read the same as in the summed form.
    """
    config = problem.config
    n = len(x)

    def flow(q: int) -> Tensor:
        if q not in flows:
            flows[q] = pose_decoder_forward(problem.pose_space.decoder, shape, pose[q], x)
        return flows[q]

    deformed = flow(j) + x
    if not (np.all(np.isfinite(deformed.value)) and np.all(np.isfinite(canonical_sdf.value))):
        raise FloatingPointError(f"Decoder output for frame {j} is not finite.")
    observed, usable = sample_grid(problem.observations[j], deformed)
    per_point = clamped_l1(canonical_sdf, observed, config.delta)
    recon = tp.sum_(per_point * usable.astype(np.float64)) / n

    code = (code_regularizer(shape, config.sigma_shape) + code_regularizer(pose[j], config.sigma_pose)) / n

    temporal: Tensor = Tensor(np.array(0.0))
    for q in _neighbours(j, problem.frame_count):
        diff = flow(j) - flow(q)
        temporal = temporal + config.lambda_t * tp.mean(tp.sum_(tp.square(diff), axis=1))

    icp: Tensor = Tensor(np.array(0.0))
    if icp_active:
        near = np.abs(canonical_sdf.value) < config.eps_icp
        icp = config.lambda_icp * _icp_term(deformed, near, problem.point_clouds[j]) / n
    return {"recon": recon, "code": code, "temporal": temporal, "icp": icp}


def fit_sequence(
    problem: FittingProblem,
    init: tuple[LatentCode, Sequence[LatentCode]] | None = None,
    encoders: EncoderPair | None = None,
    seed: int = 0,
) -> FittingResult:
    config = problem.config
    frames = problem.frame_count
    shape_init, pose_init = init if init is not None else initialize_codes(problem, encoders)
    if len(pose_init) != frames:
        raise ValueError(f"Got {len(pose_init)} initial pose codes for {frames} frames.")
    shape_code = np.array(shape_init.values, dtype=np.float64)
    pose_codes = np.stack([np.array(p.values, dtype=np.float64) for p in pose_init])

    points, fallback = sample_fitting_points(
        problem.shape_space,
        shape_code,
        config.n_t,
        derive_rng(seed, _FIT_POINTS),
        config.displacement,
        config.mesh_resolution,
    )
    rng = derive_rng(seed, _FIT_BATCHES)
    batches = _FrameBatches(frames, config.batch_size, rng)
    state = AdamState(
        groups={
            "shape": ParamGroup(config.lr_shape, config.decay_factor, config.decay_interval),
            "pose": ParamGroup(config.lr_pose, config.decay_factor, config.decay_interval),
        }
    )
    logger.info(
        "Fitting %d frames: lambda_t=%g lambda_icp=%g iterations=%d icp_until=%d n_t=%d n_b=%d",
        frames,
        config.lambda_t,
        config.lambda_icp,
        config.iterations,
        config.icp_iterations,
        config.n_t,
        config.n_b,
    )

    history = []
    for iteration in range(config.iterations):
        batch = batches.next()
        x = points[rng.choice(len(points), size=config.n_b, replace=False)]
        icp_active = iteration < config.icp_iterations and config.lambda_icp > 0

        tape = GradientTape()
        shape = tape.watch(shape_code, "shape/s")
        involved = sorted({q for j in batch for q in [j, *_neighbours(j, frames)]})
        pose = {q: tape.watch(pose_codes[q], f"pose/{q}") for q in involved}
        canonical_sdf = shape_decoder_forward(problem.shape_space.decoder, shape, x)
        flows: dict[int, Tensor] = {}

        total: Tensor | float = 0.0
        sums = dict.fromkeys(("recon", "code", "temporal", "icp"), 0.0)
        try:
            for j in batch:
                terms = frame_energy(problem, j, x, canonical_sdf, shape, pose, flows, icp_active)
                for name, term in terms.items():
                    total = total + term
                    sums[name] += float(term.value)
            value = float((total / len(batch)).value)
        except FloatingPointError:
            value = float("nan")
        if not np.isfinite(value):
            raise FittingDivergence(
                f"Fitting diverged at iteration {iteration}.",
                shape_code.copy(),
                pose_codes.copy(),
                {"iteration": iteration, "frames": batch, **{k: v / len(batch) for k, v in sums.items()}},
            )
        loss = total / len(batch)
        grads = group_gradients(tape.backward(loss))
        params = {"shape": {"s": shape_code}, "pose": {str(q): pose_codes[q] for q in involved}}
        row = {
            "iteration": iteration,
            "loss": value,
            **{k: v / len(batch) for k, v in sums.items()},
            "lr_shape": state.lr("shape"),
            "lr_pose": state.lr("pose"),
        }
        adam_step(state, params, grads)
        state.tick()
        history.append(row)
        if iteration % config.log_every == 0 or iteration == config.iterations - 1:
            logger.info(
                "iteration %d: loss %.6g (recon %.6g, code %.6g, temporal %.6g, icp %.6g)",
                iteration,
                row["loss"],
                row["recon"],
                row["code"],
                row["temporal"],
                row["icp"],
            )

    return FittingResult(
        LatentCode(shape_code, "shape"),
        [LatentCode(p, "pose") for p in pose_codes],
        history,
        used_fallback=fallback,
    )


def repose(
    shape_space: ShapeSpace,
    pose_space: PoseSpace,
    shape_code: LatentCode | np.ndarray,
    pose_codes: Sequence[LatentCode | np.ndarray],
    resolution: int = 128,
) -> tuple[TriMesh, list[TriMesh]]:
    """Extract the canonical surface once and move its vertices into every pose."""
    canonical = shape_space.reconstruct(shape_code, resolution)
    if canonical.is_empty:
        raise MeshError("Shape code decodes to an empty surface.")
    return canonical, [pose_space.deform(shape_code, p, canonical) for p in pose_codes]


def reconstruct_sequence(
    result: FittingResult, shape_space: ShapeSpace, pose_space: PoseSpace, resolution: int = 128
) -> tuple[TriMesh, list[TriMesh]]:
    result.canonical, result.posed = repose(shape_space, pose_space, result.shape_code, result.pose_codes, resolution)
    return result.canonical, result.posed


def interpolate_codes(a: LatentCode, b: LatentCode, steps: int) -> list[LatentCode]:
    """``steps`` codes evenly spaced from ``a`` to ``b``, both included."""
    if a.dim != b.dim:
        raise ValueError(f"Cannot interpolate codes of dimensions {a.dim} and {b.dim}.")
    if steps < 2:
        raise ValueError(f"Interpolation needs at least 2 steps, got {steps}.")
    return [LatentCode((1.0 - t) * a.values + t * b.values, a.role) for t in np.linspace(0.0, 1.0, steps)]


def transfer(
    shape_space: ShapeSpace,
    pose_space: PoseSpace,
    shape_code: LatentCode | np.ndarray,
    pose_codes: Sequence[LatentCode | np.ndarray],
    resolution: int = 128,
) -> tuple[TriMesh, list[TriMesh]]:
    """
    Pose one identity with pose codes taken from another fit or sequence. With
    the shape from identity A and the poses of B this is pose transfer onto A;
    swapping the roles gives shape transfer into B's motion.
    """
    if len(pose_codes) == 0:
        raise ValueError("Transfer needs at least one pose code.")
    return repose(shape_space, pose_space, shape_code, pose_codes, resolution)
