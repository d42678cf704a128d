"""
Per-frame reconstruction and tracking metrics.

IoU compares inside tests at uniform unit-box samples. Chamfer-l2 is the
symmetric average of mean squared nearest-neighbour distances between
area-weighted surface samples. End-point error compares keyframe-to-frame
displacements of surface points carried along by each sequence's own
correspondence.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from latentfit.config import EvalConfig
from latentfit.errors import LatentfitError
from latentfit.mesh import TriMesh, barycentric_points, closest_points, contains, sample_surface
from latentfit.point_index import PointIndex
from latentfit.utils import atomic_write_text, derive_rng, write_csv

logger = logging.getLogger(__name__)

CHAMFER_CONVENTION = "symmetric average of mean squared nearest-neighbour distances"
FRAME_FIELDS = ("frame", "iou", "chamfer_l2")

# derive_rng stage keys
_IOU, _CHAMFER, _EPE = 41, 42, 43


class MetricError(LatentfitError):
    pass


def _inside(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    if mesh.is_empty:
        return np.zeros(len(points), dtype=bool)
    if not mesh.watertight:
        raise MetricError("IoU requires watertight meshes.")
    return contains(mesh, points)


def iou(pred: TriMesh, gt: TriMesh, n: int = 1_000_000, seed: int = 0, half_extent: float = 0.5) -> float:
    points = derive_rng(seed, _IOU).uniform(-half_extent, half_extent, size=(n, 3))
    a, b = _inside(pred, points), _inside(gt, points)
    union = np.count_nonzero(a | b)
    if union == 0:
        raise MetricError("IoU is undefined when neither mesh encloses a sample.")
    return np.count_nonzero(a & b) / union


def chamfer_l2(pred: TriMesh, gt: TriMesh, n: int = 100_000, seed: int = 0) -> float:
    """Each mesh is sampled from the same seeded stream, so the value is symmetric in its arguments."""
    if pred.is_empty or gt.is_empty:
        raise MetricError("Chamfer distance needs two non-empty meshes.")
    p, _, _ = sample_surface(pred, n, derive_rng(seed, _CHAMFER))
    g, _, _ = sample_surface(gt, n, derive_rng(seed, _CHAMFER))
    to_gt, _ = PointIndex(g).query(p)
    to_pred, _ = PointIndex(p).query(g)
    return 0.5 * (float(np.mean(to_gt**2)) + float(np.mean(to_pred**2)))


def keyframes(frames: int, stride: int) -> list[int]:
    if stride < 1:
        raise ValueError(f"Keyframe stride must be at least 1, got {stride}.")
    return list(range(0, frames, stride))


def _segment_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-point errors of frames ``1..`` of a segment whose first frame is the keyframe."""
    pred_motion = pred[1:] - pred[:1]
    gt_motion = gt[1:] - gt[:1]
    return np.linalg.norm(pred_motion - gt_motion, axis=-1)


def epe_from_trajectories(pred: np.ndarray, gt: np.ndarray, keyframe_stride: int = 50) -> float:
    """
    End-point error of point trajectories ``(frames, points, 3)``.

    Every frame is compared with the latest keyframe at or before it; keyframes
    themselves are left out of the mean. Returns 0 when every frame is a
    keyframe.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[2] != 3:
        raise MetricError(f"Trajectory shapes {pred.shape} and {gt.shape} do not correspond.")
    total, count = 0.0, 0
    for key in keyframes(len(pred), keyframe_stride):
        errors = _segment_errors(pred[key : key + keyframe_stride], gt[key : key + keyframe_stride])
        total += float(errors.sum())
        count += errors.size
    return total / count if count else 0.0


def epe(
    pred: Sequence[TriMesh],
    gt: Sequence[TriMesh],
    keyframe_stride: int = 50,
    n: int = 100_000,
    seed: int = 0,
) -> float:
    """
    End-point error of two mesh sequences that each keep one connectivity.

    Points are sampled on every ground-truth keyframe mesh and followed through
    the segment by their barycentric coordinates. Their counterparts on the
    predicted sequence are the closest points on the predicted keyframe mesh,
    followed the same way.
    """
    if len(pred) != len(gt) or len(pred) == 0:
        raise MetricError(f"Sequences of {len(pred)} and {len(gt)} frames cannot be compared.")
    for seq, name in ((pred, "predicted"), (gt, "ground-truth")):
        if any(m.is_empty or not m.same_topology(seq[0]) for m in seq):
            raise MetricError(f"The {name} sequence has no dense correspondence.")

    total, count = 0.0, 0
    for key in keyframes(len(pred), keyframe_stride):
        segment = range(key, min(key + keyframe_stride, len(pred)))
        if len(segment) < 2:
            continue
        points, face, bary = sample_surface(gt[key], n, derive_rng(seed, _EPE, key))
        _, _, pred_face, pred_bary = closest_points(pred[key], points)
        gt_traj = np.stack([barycentric_points(gt[f], face, bary) for f in segment])
        pred_traj = np.stack([barycentric_points(pred[f], pred_face, pred_bary) for f in segment])
        errors = _segment_errors(pred_traj, gt_traj)
        total += float(errors.sum())
        count += errors.size
    return total / count if count else 0.0


@dataclass
class SequenceEval:
    iou: list[float]
    chamfer_l2: list[float]
    epe: float
    samples: dict[str, int] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.iou) != len(self.chamfer_l2):
            raise MetricError("Every frame needs both an IoU and a Chamfer value.")

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou))

    @property
    def mean_chamfer_l2(self) -> float:
        return float(np.mean(self.chamfer_l2))

    def rows(self) -> list[dict]:
        return [{"frame": f, "iou": a, "chamfer_l2": c} for f, (a, c) in enumerate(zip(self.iou, self.chamfer_l2))]

    def summary(self) -> dict:
        return {
            "frames": len(self.iou),
            "mean_iou": self.mean_iou,
            "mean_chamfer_l2": self.mean_chamfer_l2,
            "epe": float(self.epe),
            "chamfer_convention": CHAMFER_CONVENTION,
            "samples": dict(self.samples),
            "seed": int(self.seed),
        }

    def write(self, out_dir: str | os.PathLike) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        csv_path = write_csv(out_dir / "metrics.csv", self.rows(), FRAME_FIELDS)
        summary_path = atomic_write_text(out_dir / "summary.yaml", yaml.safe_dump(self.summary(), sort_keys=False))
        return csv_path, summary_path


def evaluate_sequence(
    pred: Sequence[TriMesh], gt: Sequence[TriMesh], config: EvalConfig | None = None, seed: int = 0
) -> SequenceEval:
    config = config or EvalConfig()
    if len(pred) != len(gt):
        raise MetricError(f"Got {len(pred)} predicted and {len(gt)} ground-truth frames.")
    ious = [iou(p, g, config.iou_samples, seed) for p, g in zip(pred, gt)]
    chamfers = [chamfer_l2(p, g, config.chamfer_samples, seed) for p, g in zip(pred, gt)]
    error = epe(pred, gt, config.keyframe_stride, config.epe_samples, seed)
    result = SequenceEval(
        ious,
        chamfers,
        error,
        {"iou": config.iou_samples, "chamfer": config.chamfer_samples, "epe": config.epe_samples},
        seed,
    )
    logger.info(
        "Evaluated %d frames: IoU %.4f, Chamfer-l2 %.6g (%s), EPE %.6g",
        len(pred),
        result.mean_iou,
        result.mean_chamfer_l2,
        CHAMFER_CONVENTION,
        error,
    )
    return result
