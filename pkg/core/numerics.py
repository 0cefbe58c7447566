"""Dense numeric substrate: MLPs with exact backprop, SGD, softmax, cosine.

All arrays are float64 numpy arrays.  Parameters are immutable values: every
update returns a new ``MlpParams`` and never writes into the old one, so a
snapshot taken before a round stays valid after it.

Layer convention is row-major batches: ``out = act(x @ W + b)`` with
``W`` shaped (fan_in, fan_out).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from core.errors import DegenerateInputError, ShapeError

Activation = Literal["relu", "identity"]
_ACTIVATIONS = ("relu", "identity")


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one (seed, stream, ...) coordinate."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def as_matrix(values: object, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Layer:
    weight: np.ndarray          # (fan_in, fan_out)
    bias: np.ndarray            # (fan_out,)
    activation: Activation = "identity"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"layer weight {self.weight.shape} / bias {self.bias.shape} do not compose"
            )


@dataclass(frozen=True)
class MlpParams:
    """Ordered layers.  Zero layers is the identity map."""

    layers: tuple[Layer, ...] = ()

    def __post_init__(self) -> None:
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeError(
                    f"layer dims do not compose: {prev.weight.shape} -> {nxt.weight.shape}"
                )

    @property
    def input_dim(self) -> int | None:
        return self.layers[0].weight.shape[0] if self.layers else None

    @property
    def output_dim(self) -> int | None:
        return self.layers[-1].weight.shape[1] if self.layers else None

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list: w0, b0, w1, b1, ..."""
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out


@dataclass(frozen=True)
class GradBundle:
    weights: tuple[np.ndarray, ...] = ()
    biases: tuple[np.ndarray, ...] = ()

    def arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def __add__(self, other: "GradBundle") -> "GradBundle":
        return GradBundle(
            weights=tuple(a + b for a, b in zip(self.weights, other.weights)),
            biases=tuple(a + b for a, b in zip(self.biases, other.biases)),
        )

    def scaled(self, factor: float) -> "GradBundle":
        return GradBundle(
            weights=tuple(w * factor for w in self.weights),
            biases=tuple(b * factor for b in self.biases),
        )


@dataclass(frozen=True)
class Tape:
    """Per-layer (input, pre-activation) record from ``mlp_forward``."""

    inputs: tuple[np.ndarray, ...] = ()
    pre_activations: tuple[np.ndarray, ...] = ()
    batch_shape: tuple[int, int] = field(default=(0, 0))


def init_mlp(
    dims: Sequence[int],
    activations: Sequence[Activation],
    rng: np.random.Generator,
) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init for weights and biases."""
    if len(dims) < 2:
        return MlpParams(())
    if len(activations) != len(dims) - 1:
        raise ShapeError(f"{len(dims) - 1} layers need {len(dims) - 1} activations")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        bias = rng.uniform(-bound, bound, size=fan_out)
        layers.append(Layer(weight, bias, act))
    return MlpParams(tuple(layers))


def identity_mlp(dim: int) -> MlpParams:
    """Single affine identity layer (W = I, b = 0)."""
    return MlpParams((Layer(np.eye(dim), np.zeros(dim), "identity"),))


def zeros_like_params(params: MlpParams) -> GradBundle:
    return GradBundle(
        weights=tuple(np.zeros_like(l.weight) for l in params.layers),
        biases=tuple(np.zeros_like(l.bias) for l in params.layers),
    )


def params_sq_norm(params: MlpParams) -> float:
    """Squared Frobenius norm over every weight and bias."""
    return float(sum(np.sum(a * a) for a in params.arrays()))


def params_as_grads(params: MlpParams) -> GradBundle:
    return GradBundle(
        weights=tuple(l.weight for l in params.layers),
        biases=tuple(l.bias for l in params.layers),
    )


def with_arrays(params: MlpParams, arrays: Sequence[np.ndarray]) -> MlpParams:
    """Rebuild ``params`` with replacement flat arrays (w0, b0, w1, b1, ...)."""
    if len(arrays) != 2 * len(params.layers):
        raise ShapeError("flat array count does not match the layer count")
    layers = []
    for i, layer in enumerate(params.layers):
        w, b = arrays[2 * i], arrays[2 * i + 1]
        if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
            raise ShapeError("replacement array shape mismatch")
        layers.append(Layer(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64), layer.activation))
    return MlpParams(tuple(layers))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def mlp_forward(params: MlpParams, batch: np.ndarray) -> tuple[np.ndarray, Tape]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {x.shape}")
    if params.layers and x.shape[1] != params.input_dim:
        raise ShapeError(f"batch has {x.shape[1]} columns, first layer expects {params.input_dim}")
    shape = (x.shape[0], x.shape[1])
    inputs: list[np.ndarray] = []
    pres: list[np.ndarray] = []
    for layer in params.layers:
        inputs.append(x)
        z = x @ layer.weight + layer.bias
        pres.append(z)
        x = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return x, Tape(tuple(inputs), tuple(pres), shape)


def mlp_backward(
    params: MlpParams, tape: Tape, output_grad: np.ndarray
) -> tuple[GradBundle, np.ndarray]:
    g = np.asarray(output_grad, dtype=np.float64)
    expected_cols = params.output_dim if params.layers else tape.batch_shape[1]
    if g.shape != (tape.batch_shape[0], expected_cols):
        raise ShapeError(
            f"output_grad shape {g.shape} does not match forward output "
            f"({tape.batch_shape[0]}, {expected_cols})"
        )
    w_grads: list[np.ndarray] = []
    b_grads: list[np.ndarray] = []
    for layer, inp, pre in zip(
        reversed(params.layers), reversed(tape.inputs), reversed(tape.pre_activations)
    ):
        if layer.activation == "relu":
            g = g * (pre > 0.0)
        w_grads.append(inp.T @ g)
        b_grads.append(g.sum(axis=0))
        g = g @ layer.weight.T
    return GradBundle(tuple(reversed(w_grads)), tuple(reversed(b_grads))), g


@dataclass(frozen=True)
class AnchoredTape:
    """Tapes of the batch pass and of the single origin-row pass."""

    batch: Tape
    origin: Tape


def anchored_forward(params: MlpParams, batch: np.ndarray) -> tuple[np.ndarray, AnchoredTape]:
    """``E(x) - E(0)``: the network output measured from the image of the origin.

    Bias drift moves ``E(0)`` and every row with it, so anchored outputs keep
    their spread however the biases move.
    """
    out, tape = mlp_forward(params, batch)
    origin, origin_tape = mlp_forward(params, np.zeros((1, tape.batch_shape[1])))
    return out - origin, AnchoredTape(tape, origin_tape)


def anchored_backward(
    params: MlpParams, tape: AnchoredTape, output_grad: np.ndarray
) -> tuple[GradBundle, np.ndarray]:
    g = np.asarray(output_grad, dtype=np.float64)
    grads, input_grad = mlp_backward(params, tape.batch, g)
    origin_grads, _ = mlp_backward(params, tape.origin, -g.sum(axis=0, keepdims=True))
    return grads + origin_grads, input_grad


def sgd_step(
    params: MlpParams, grads: GradBundle, lr: float, weight_decay: float = 0.0
) -> MlpParams:
    """p' = p - lr * (g + weight_decay * p)."""
    if len(grads.weights) != len(params.layers):
        raise ShapeError("gradient bundle does not match parameter layers")
    layers = []
    for layer, gw, gb in zip(params.layers, grads.weights, grads.biases):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ShapeError("gradient shape mismatch")
        layers.append(
            Layer(
                layer.weight - lr * (gw + weight_decay * layer.weight),
                layer.bias - lr * (gb + weight_decay * layer.bias),
                layer.activation,
            )
        )
    return MlpParams(tuple(layers))


# ---------------------------------------------------------------------------
# Elementwise helpers
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax (1-D input is a single row), max-subtracted."""
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cosine_dissimilarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine dissimilarity of a zero-norm vector")
    return float(1.0 - (a @ b) / (na * nb))


def normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (rows / ||row||, norms).  Zero rows are a degenerate input."""
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot L2-normalize a zero-norm row")
    return m / norms[:, None], norms


def normalize_rows_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Gradient wrt the raw rows given the gradient wrt their unit versions."""
    dots = np.sum(unit * grad_unit, axis=1, keepdims=True)
    return (grad_unit - unit * dots) / norms[:, None]


def safe_unit_rows(m: np.ndarray) -> np.ndarray:
    """Unit rows; zero rows stay zero (similarity 0 to everything)."""
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0.0)
