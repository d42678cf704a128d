__version__ = "0.1.0"

from latentfit.config import RunConfig, load_config
from latentfit.encoders import EncoderPair, VoxelEncoder, encode_pose, encode_shape, train_encoders
from latentfit.errors import ConfigError, LatentfitError, MissingInputError, NumericalError
from latentfit.fitting import (
    FittingProblem,
    FittingResult,
    depth_to_observation,
    fit_sequence,
    interpolate_codes,
    reconstruct_sequence,
    transfer,
)
from latentfit.mesh import TriMesh, load_obj, save_obj
from latentfit.metrics import chamfer_l2, epe, evaluate_sequence, iou
from latentfit.mlp import LatentCode
from latentfit.spaces import PoseSpace, ShapeSpace, train_pose_space, train_shape_space
from latentfit.synth import CorpusManifest, generate_corpus, load_depth, render_depth
from latentfit.volume import SdfGrid, marching_cubes

__all__ = [
    "RunConfig",
    "load_config",
    "LatentfitError",
    "ConfigError",
    "MissingInputError",
    "NumericalError",
    "TriMesh",
    "load_obj",
    "save_obj",
    "SdfGrid",
    "marching_cubes",
    "LatentCode",
    "CorpusManifest",
    "generate_corpus",
    "render_depth",
    "load_depth",
    "ShapeSpace",
    "PoseSpace",
    "train_shape_space",
    "train_pose_space",
    "VoxelEncoder",
    "EncoderPair",
    "encode_shape",
    "encode_pose",
    "train_encoders",
    "FittingProblem",
    "FittingResult",
    "depth_to_observation",
    "fit_sequence",
    "reconstruct_sequence",
    "interpolate_codes",
    "transfer",
    "iou",
    "chamfer_l2",
    "epe",
    "evaluate_sequence",
]
