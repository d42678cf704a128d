"""
Weight-normalized coordinate MLPs conditioned on latent codes.

Both decoders share one architecture: eight hidden ReLU layers and a linear
output layer. The positionally encoded query point is concatenated to the
latent codes at the input and again at the fourth hidden layer. The shape
decoder squashes its output with ``tanh``; the pose decoder returns a raw
3-vector flow.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from latentfit import tape as tp
from latentfit.tape import GradientTape, Tensor

HIDDEN_LAYERS = 8
SKIP_LAYER = 4
ROLES = ("shape", "pose")
OUTPUT_ACTIVATIONS = ("tanh", "identity")


@dataclass
class LatentCode:
    values: np.ndarray
    role: str = "shape"

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.role not in ROLES:
            raise ValueError(f"Unknown latent code role {self.role!r}.")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Latent code entries must be finite.")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class DenseLayer:
    direction: np.ndarray
    magnitude: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.direction.shape[1]

    @property
    def out_dim(self) -> int:
        return self.direction.shape[0]

    def effective_weight(self) -> np.ndarray:
        return tp.weight_norm(self.direction, self.magnitude).value


@dataclass
class MlpParams:
    """
    Decoder parameters.

    ``code_dims`` lists the latent code widths concatenated in front of the
    encoded point: ``(D_s,)`` for the shape decoder, ``(D_s, D_p)`` for the
    pose decoder.
    """

    layers: list[DenseLayer]
    code_dims: tuple[int, ...]
    bands: int = 8
    skip_layer: int = SKIP_LAYER
    hidden_activation: str = "relu"
    output_activation: str = "tanh"
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.code_dims = tuple(int(d) for d in self.code_dims)
        self.validate()

    @property
    def input_dim(self) -> int:
        return sum(self.code_dims) + encoded_dim(self.bands)

    @property
    def widths(self) -> list[int]:
        return [layer.out_dim for layer in self.layers]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def validate(self) -> None:
        if len(self.layers) != HIDDEN_LAYERS + 1:
            raise ValueError(f"Expected {HIDDEN_LAYERS + 1} layers, got {len(self.layers)}.")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"Unknown output activation {self.output_activation!r}.")
        if self.hidden_activation != "relu":
            raise ValueError(f"Unknown hidden activation {self.hidden_activation!r}.")
        expected_in = self.input_dim
        for k, layer in enumerate(self.layers, start=1):
            if k == self.skip_layer:
                expected_in = self.layers[k - 2].out_dim + self.input_dim
            if layer.in_dim != expected_in:
                raise ValueError(f"Layer {k} expects {layer.in_dim} inputs, wiring gives {expected_in}.")
            if layer.magnitude.shape != (layer.out_dim,) or layer.bias.shape != (layer.out_dim,):
                raise ValueError(f"Layer {k} magnitude/bias shapes do not match its width.")
            for array in (layer.direction, layer.magnitude, layer.bias):
                if not np.all(np.isfinite(array)):
                    raise ValueError(f"Layer {k} holds non-finite parameters.")
            expected_in = layer.out_dim

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"layer{k}.direction"] = layer.direction
            out[f"layer{k}.magnitude"] = layer.magnitude
            out[f"layer{k}.bias"] = layer.bias
        return out

    def header(self) -> dict:
        return {
            "code_dims": list(self.code_dims),
            "bands": self.bands,
            "skip_layer": self.skip_layer,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "widths": self.widths,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], header: dict) -> MlpParams:
        layers = [
            DenseLayer(
                np.array(arrays[f"layer{k}.direction"]),
                np.array(arrays[f"layer{k}.magnitude"]),
                np.array(arrays[f"layer{k}.bias"]),
            )
            for k in range(HIDDEN_LAYERS + 1)
        ]
        return cls(
            layers,
            code_dims=tuple(header["code_dims"]),
            bands=int(header["bands"]),
            skip_layer=int(header["skip_layer"]),
            hidden_activation=header["hidden_activation"],
            output_activation=header["output_activation"],
        )

    def copy(self) -> MlpParams:
        return MlpParams.from_arrays({k: v.copy() for k, v in self.arrays().items()}, self.header())

    def astype(self, dtype: np.dtype) -> MlpParams:
        arrays = {k: v.astype(dtype) for k, v in self.arrays().items()}
        return MlpParams.from_arrays(arrays, self.header())

    def update(self, arrays: dict[str, np.ndarray]) -> None:
        for key, value in arrays.items():
            index, attr = key.split(".")
            layer = self.layers[int(index[len("layer"):])]
            current = getattr(layer, attr)
            if current.shape != value.shape:
                raise ValueError(f"Shape mismatch for {key}: {current.shape} vs {value.shape}.")
            setattr(layer, attr, value)

    def bind(self, tape: GradientTape | None = None, prefix: str = "") -> BoundMlp:
        """Expose the parameters as tensors, trainable when ``tape`` is given."""
        tensors = {}
        for key, value in self.arrays().items():
            name = prefix + key
            tensors[key] = tape.watch(value, name) if tape is not None else Tensor(value, name=name)
        return BoundMlp(self, tensors)


@dataclass
class BoundMlp:
    params: MlpParams
    tensors: dict[str, Tensor]

    def layer(self, k: int) -> tuple[Tensor, Tensor, Tensor]:
        return (
            self.tensors[f"layer{k}.direction"],
            self.tensors[f"layer{k}.magnitude"],
            self.tensors[f"layer{k}.bias"],
        )

    def gradients(self) -> dict[str, np.ndarray | None]:
        return {key: GradientTape.gradient_of(t) for key, t in self.tensors.items()}


def encoded_dim(bands: int) -> int:
    return 3 + 6 * bands


def positional_encoding(x: np.ndarray, bands: int = 8) -> np.ndarray:
    """
    Frequency encoding ``[x, sin(2^k pi x), cos(2^k pi x)]`` for ``k < bands``.

    Accepts a single point of shape ``(3,)`` or a batch ``(n, 3)``; the sin and
    cos blocks of each band hold the three coordinates in order.
    """
    if bands < 1:
        raise ValueError(f"Need at least one frequency band, got {bands}.")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    points = np.atleast_2d(x)
    if points.shape[-1] != 3:
        raise ValueError(f"Expected 3-D points, got shape {x.shape}.")
    if not np.all(np.isfinite(points)):
        raise ValueError("Positional encoding input must be finite.")

    parts = [points]
    for k in range(bands):
        angle = (2.0**k) * np.pi * points
        parts.append(np.sin(angle))
        parts.append(np.cos(angle))
    encoded = np.concatenate(parts, axis=1)
    return encoded[0] if single else encoded


def init_mlp(
    code_dims: Sequence[int],
    width: int,
    out_dim: int,
    rng: np.random.Generator,
    bands: int = 8,
    output_activation: str = "tanh",
    output_scale: float = 1.0,
) -> MlpParams:
    """
    Fan-in initialized decoder; magnitudes equal the direction row norms, so the
    effective weights start as the sampled directions.
    """
    input_dim = sum(code_dims) + encoded_dim(bands)
    fan_ins = [input_dim] + [width] * HIDDEN_LAYERS
    fan_ins[SKIP_LAYER - 1] = width + input_dim
    outs = [width] * HIDDEN_LAYERS + [out_dim]

    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(fan_ins, outs)):
        std = np.sqrt(2.0 / fan_in) if k < HIDDEN_LAYERS else np.sqrt(1.0 / fan_in)
        direction = rng.normal(0.0, std, size=(fan_out, fan_in))
        magnitude = np.linalg.norm(direction, axis=1)
        if k == HIDDEN_LAYERS:
            magnitude = magnitude * output_scale
        layers.append(DenseLayer(direction, magnitude, np.zeros(fan_out)))
    return MlpParams(
        layers,
        code_dims=tuple(code_dims),
        bands=bands,
        output_activation=output_activation,
    )


def _as_bound(params: MlpParams | BoundMlp) -> BoundMlp:
    return params if isinstance(params, BoundMlp) else params.bind(None)


def _code_rows(code: LatentCode | Tensor | np.ndarray, dim: int, n: int) -> Tensor:
    if isinstance(code, LatentCode):
        code = code.values
    code = tp.as_tensor(code)
    if code.ndim == 1:
        if code.shape[0] != dim:
            raise ValueError(f"Latent code has dimension {code.shape[0]}, decoder expects {dim}.")
        return tp.repeat_rows(code, n)
    if code.shape != (n, dim):
        raise ValueError(f"Per-point codes have shape {code.shape}, expected {(n, dim)}.")
    return code


def mlp_forward(
    params: MlpParams | BoundMlp,
    codes: Sequence[LatentCode | Tensor | np.ndarray],
    x: np.ndarray,
) -> Tensor:
    bound = _as_bound(params)
    meta = bound.params
    if len(codes) != len(meta.code_dims):
        raise ValueError(f"Decoder takes {len(meta.code_dims)} codes, got {len(codes)}.")
    points = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"Expected query points of shape (n, 3), got {np.shape(x)}.")
    n = points.shape[0]
    dtype = meta.layers[0].direction.dtype
    encoded = Tensor(positional_encoding(points, meta.bands).astype(dtype))
    inputs = tp.concat(
        [_code_rows(c, d, n) for c, d in zip(codes, meta.code_dims)] + [encoded], axis=1
    )

    h = inputs
    last = len(meta.layers) - 1
    for k in range(len(meta.layers)):
        if k + 1 == meta.skip_layer:
            h = tp.concat([h, inputs], axis=1)
        direction, magnitude, bias = bound.layer(k)
        h = tp.linear(h, tp.weight_norm(direction, magnitude), bias)
        if k < last:
            h = tp.relu(h)
    if meta.output_activation == "tanh":
        h = tp.tanh(h)
    return h


def shape_decoder_forward(
    params: MlpParams | BoundMlp, s: LatentCode | Tensor | np.ndarray, x: np.ndarray
) -> Tensor:
    """Signed distance at each query point, shape ``(n,)``."""
    out = mlp_forward(params, [s], x)
    return tp.reshape(out, (out.shape[0],))


def pose_decoder_forward(
    params: MlpParams | BoundMlp,
    s: LatentCode | Tensor | np.ndarray,
    p: LatentCode | Tensor | np.ndarray,
    x: np.ndarray,
) -> Tensor:
    """Canonical-to-posed flow at each query point, shape ``(n, 3)``."""
    return mlp_forward(params, [s, p], x)


def decode_sdf(
    params: MlpParams, s: LatentCode | np.ndarray, points: np.ndarray, chunk: int = 65536
) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(points.shape[0])
    for start in range(0, points.shape[0], chunk):
        out[start : start + chunk] = shape_decoder_forward(
            params, s, points[start : start + chunk]
        ).value
    return out


def decode_flow(
    params: MlpParams,
    s: LatentCode | np.ndarray,
    p: LatentCode | np.ndarray,
    points: np.ndarray,
    chunk: int = 65536,
) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty((points.shape[0], 3))
    for start in range(0, points.shape[0], chunk):
        out[start : start + chunk] = pose_decoder_forward(
            params, s, p, points[start : start + chunk]
        ).value
    return out
