"""Scalar black-box predictors with analytic or finite-difference gradients.

All models accept either a single input of shape ``(d,)`` (returning a float)
or a batch of shape ``(n, d)`` (returning an array of shape ``(n,)``).
"""
import abc
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .numerics import as_matrix, as_vector, sample_uniform_box

__all__ = [
    "ACTIVATIONS",
    "BlackBoxModel",
    "CallableModel",
    "GradientDiscontinuityWarning",
    "Layer",
    "MlpModel",
    "ModelFormatError",
    "QuadraticModel",
    "ToyFunction",
    "evaluate",
    "finite_difference_gradient",
    "gradient",
    "hessian_norm_bound",
    "linear_model",
    "load_model",
    "model_from_dict",
    "model_to_dict",
    "random_mlp",
    "randomize_layer",
    "save_model",
    "softplus_sensitivity_bound",
]

ACTIVATIONS = ("softplus", "relu", "identity")


class ModelFormatError(ValueError):
    """A model file does not match the expected schema."""


class GradientDiscontinuityWarning(RuntimeWarning):
    """The gradient was requested on a boundary where it jumps."""


def _fd_steps(X):
    return 1e-5 * np.maximum(1.0, np.abs(X))


def finite_difference_gradient(func, X):
    """Central differences with step ``1e-5 * max(1, |x_i|)`` per coordinate.

    ``func`` maps an ``(m, d)`` batch to ``(m,)``; ``X`` is ``(n, d)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    h = _fd_steps(X)
    eye = np.eye(d)
    # (n, d, d): row j of block i is X_i shifted along coordinate j
    shift = h[:, :, None] * eye[None, :, :]
    plus = (X[:, None, :] + shift).reshape(n * d, d)
    minus = (X[:, None, :] - shift).reshape(n * d, d)
    # actual step after rounding keeps the quotient consistent
    step = (plus - minus).reshape(n, d, d)[:, np.arange(d), np.arange(d)]
    diff = (func(plus) - func(minus)).reshape(n, d)
    return diff / step


class BlackBoxModel(abc.ABC):
    """A scalar predictor ``f : R^d -> R``."""

    input_dim: int
    has_analytic_gradient = False

    @abc.abstractmethod
    def _forward(self, X):
        """Batch forward pass, ``(n, d) -> (n,)``."""

    def _gradient(self, X):
        return finite_difference_gradient(self._forward, X)

    def _as_batch(self, x):
        X = np.asarray(x, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(
                f"input dimension mismatch: model expects {self.input_dim}, got shape {np.shape(x)}"
            )
        return X, single

    def evaluate(self, x):
        X, single = self._as_batch(x)
        out = self._forward(X)
        return float(out[0]) if single else out

    __call__ = evaluate

    def gradient(self, x):
        X, single = self._as_batch(x)
        g = self._gradient(X)
        return g[0] if single else g


def evaluate(model, x):
    """``f(x)`` for a single input or a batch."""
    return model.evaluate(x)


def gradient(model, x):
    """Analytic gradient where the model has one, central differences otherwise."""
    return model.gradient(x)


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "softplus"

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=float)
        b = np.asarray(self.bias, dtype=float)
        if W.ndim != 2:
            raise ValueError(f"weights must be 2-d, got shape {W.shape}")
        if b.shape != (W.shape[0],):
            raise ValueError(f"bias must have shape ({W.shape[0]},), got {b.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)


def _act(name, h):
    if name == "softplus":
        return np.logaddexp(0.0, h)
    if name == "relu":
        return np.maximum(h, 0.0)
    return h


def _act_grad(name, h):
    if name == "softplus":
        return expit(h)
    if name == "relu":
        return (h > 0).astype(float)
    return np.ones_like(h)


class MlpModel(BlackBoxModel):
    """Fully connected network; ``output_index`` selects the scalar output.

    ``layers[i].weights[o, j]`` multiplies input ``j`` into output ``o``.
    """

    has_analytic_gradient = True

    def __init__(self, layers, output_index=0):
        layers = list(layers)
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].weights.shape[1] != layers[i - 1].weights.shape[0]:
                raise ValueError(
                    f"layer {i} expects {layers[i].weights.shape[1]} inputs "
                    f"but layer {i - 1} produces {layers[i - 1].weights.shape[0]}"
                )
        n_out = layers[-1].weights.shape[0]
        if not 0 <= output_index < n_out:
            raise ValueError(f"output_index {output_index} out of range for {n_out} outputs")
        self.layers = tuple(layers)
        self.output_index = int(output_index)
        self.input_dim = layers[0].weights.shape[1]

    def __repr__(self):
        dims = [self.input_dim] + [L.weights.shape[0] for L in self.layers]
        return f"MlpModel(dims={dims}, output_index={self.output_index})"

    def _pre_activations(self, X):
        hs, a = [], X
        for layer in self.layers:
            h = a @ layer.weights.T + layer.bias
            hs.append(h)
            a = _act(layer.activation, h)
        return hs, a

    def _forward(self, X):
        _, a = self._pre_activations(X)
        return a[:, self.output_index]

    def _gradient(self, X):
        hs, _ = self._pre_activations(X)
        last = self.layers[-1]
        delta = np.zeros_like(hs[-1])
        delta[:, self.output_index] = 1.0
        delta = delta * _act_grad(last.activation, hs[-1])
        for i in range(len(self.layers) - 1, 0, -1):
            delta = (delta @ self.layers[i].weights) * _act_grad(self.layers[i - 1].activation, hs[i - 1])
        return delta @ self.layers[0].weights


class QuadraticModel(BlackBoxModel):
    """``f(x) = 0.5 x^T H x + w^T x + c`` with symmetric ``H``."""

    has_analytic_gradient = True

    def __init__(self, H, w, c=0.0):
        H = as_matrix(H, "H")
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(H))):
            raise ValueError("H must be symmetric")
        w = as_vector(w, "w")
        if w.shape[0] != H.shape[0]:
            raise ValueError("H and w dimensions differ")
        self.H, self.w, self.c = H, w, float(c)
        self.input_dim = w.shape[0]

    def __repr__(self):
        return f"QuadraticModel(d={self.input_dim})"

    def _forward(self, X):
        return 0.5 * np.einsum("ni,ij,nj->n", X, self.H, X) + X @ self.w + self.c

    def _gradient(self, X):
        return X @ self.H + self.w


def linear_model(w, c=0.0):
    """``f(x) = w^T x + c`` as a quadratic with zero Hessian."""
    w = as_vector(w, "w")
    return QuadraticModel(np.zeros((w.size, w.size)), w, c)


class ToyFunction(BlackBoxModel):
    """The piecewise-linear 2-d function with a rapidly switching gradient.

    With ``k = floor(|a - b|)``::

        f(a, b) = max(a, b) - k / 2          if k is even
        f(a, b) = min(a, b) + (k + 1) / 2    if k is odd

    The gradient is the unit vector of whichever argument is selected by the
    max/min, so it flips between ``(1, 0)`` and ``(0, 1)`` every time ``|a - b|``
    crosses an integer.
    """

    has_analytic_gradient = True
    input_dim = 2

    def __repr__(self):
        return "ToyFunction()"

    def _forward(self, X):
        a, b = X[:, 0], X[:, 1]
        k = np.floor(np.abs(a - b))
        even = np.mod(k, 2) == 0
        return np.where(even, np.maximum(a, b) - k / 2, np.minimum(a, b) + (k + 1) / 2)

    def _gradient(self, X):
        a, b = X[:, 0], X[:, 1]
        t = np.abs(a - b)
        if np.any(np.abs(t - np.round(t)) <= 1e-9):
            warnings.warn(
                "toy gradient evaluated within 1e-9 of a floor(|a-b|) boundary",
                GradientDiscontinuityWarning,
                stacklevel=3,
            )
        even = np.mod(np.floor(t), 2) == 0
        picks_a = np.where(even, a > b, a <= b)
        return np.stack([picks_a, ~picks_a], axis=1).astype(float)


class CallableModel(BlackBoxModel):
    """Wrap a Python callable as a black box.

    ``func`` receives a batch ``(n, d)`` and returns ``(n,)`` when
    ``vectorized`` is true, otherwise it is applied row by row. A ``grad``
    callable of the same shape convention may be supplied.
    """

    def __init__(self, func, input_dim, grad=None, vectorized=True):
        self.func = func
        self.grad = grad
        self.vectorized = vectorized
        self.input_dim = int(input_dim)
        self.has_analytic_gradient = grad is not None

    def _apply(self, fn, X):
        if self.vectorized:
            return np.asarray(fn(X), dtype=float)
        return np.array([fn(row) for row in X], dtype=float)

    def _forward(self, X):
        return self._apply(self.func, X)

    def _gradient(self, X):
        if self.grad is None:
            return super()._gradient(X)
        return self._apply(self.grad, X).reshape(X.shape)


def _power_iteration(H, rng, iters=50):
    v = rng.normal(size=H.shape[0])
    nv = np.linalg.norm(v)
    if nv == 0:
        return 0.0
    v /= nv
    est = 0.0
    for _ in range(iters):
        w = H @ v
        est = np.linalg.norm(w)
        if est == 0:
            return 0.0
        v = w / est
    return float(est)


def _fd_hessian(model, y):
    d = y.shape[0]
    h = _fd_steps(y)
    eye = np.eye(d)
    grads = model.gradient(np.concatenate([y + h[:, None] * eye, y - h[:, None] * eye]))
    H = (grads[:d] - grads[d:]) / (2 * h[:, None])
    return (H + H.T) / 2


def _matrix_norm(H, norm, rng):
    if norm == "spectral":
        return _power_iteration(H, rng)
    if norm == "inf_to_one":
        # sup_{|v|_inf <= 1} |v^T H v| <= sum |H_ij|
        return float(np.sum(np.abs(H)))
    raise ValueError(f"unknown Hessian norm {norm!r}")


def hessian_norm_bound(model, x, radius, n_probe, rng, norm="spectral"):
    """Bound on the Hessian norm over the L-infinity ball around ``x``.

    Exact for :class:`QuadraticModel`. For other models, the maximum over
    ``x`` and ``n_probe`` uniform points of the ball of the finite-difference
    Hessian norm (spectral norm by 50 power iterations). ``norm="inf_to_one"``
    uses the entrywise L1 norm, which bounds ``|v^T H v|`` for ``|v|_inf <= 1``.
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    if isinstance(model, QuadraticModel):
        if norm == "spectral":
            return float(np.linalg.norm(model.H, 2))
        return _matrix_norm(model.H, norm, rng)
    x = as_vector(x, "x")
    points = np.vstack([x[None, :], sample_uniform_box(rng, x, radius, size=n_probe)])
    return max(_matrix_norm(_fd_hessian(model, y), norm, rng) for y in points)


def softplus_sensitivity_bound(model, radius):
    """``prod_i (||W_i||_2^2 / 4) * radius`` for a zero-bias softplus MLP."""
    if not isinstance(model, MlpModel):
        raise TypeError("the softplus bound applies to MlpModel only")
    for i, layer in enumerate(model.layers):
        if layer.activation != "softplus":
            raise ValueError(f"layer {i} uses {layer.activation!r}; the bound needs softplus everywhere")
        if np.any(layer.bias != 0):
            raise ValueError(f"layer {i} has a nonzero bias; the bound needs zero biases")
    if radius == 0:
        return 0.0
    prod = 1.0
    for layer in model.layers:
        prod *= np.linalg.norm(layer.weights, 2) ** 2 / 4
    return float(prod * radius)


def randomize_layer(model, layer_index, rng):
    """Copy of ``model`` with one layer's weights redrawn.

    New weights are i.i.d. normal with the original layer's empirical standard
    deviation; biases and every other layer are left untouched.
    """
    n = len(model.layers)
    if not 0 <= layer_index < n:
        raise IndexError(f"layer_index {layer_index} out of range for {n} layers")
    old = model.layers[layer_index]
    std = float(np.std(old.weights))
    if std == 0:
        std = 1.0 / math.sqrt(old.weights.shape[1])
    new = Layer(std * rng.normal(size=old.weights.shape), old.bias.copy(), old.activation)
    layers = list(model.layers)
    layers[layer_index] = new
    return MlpModel(layers, model.output_index)


def random_mlp(rng, dims, activation="softplus", weight_scale=None, bias_scale=0.0,
               output_activation=None):
    """MLP with i.i.d. normal weights; ``dims`` lists layer widths.

    ``weight_scale=None`` uses the fan-in scaling ``1 / sqrt(dims[i])``.
    """
    layers = []
    for i in range(len(dims) - 1):
        scale = 1.0 / math.sqrt(dims[i]) if weight_scale is None else weight_scale
        W = scale * rng.normal(size=(dims[i + 1], dims[i]))
        b = bias_scale * rng.normal(size=dims[i + 1]) if bias_scale else np.zeros(dims[i + 1])
        act = activation
        if i == len(dims) - 2 and output_activation is not None:
            act = output_activation
        layers.append(Layer(W, b, act))
    return MlpModel(layers)


def model_to_dict(model):
    if isinstance(model, MlpModel):
        return {
            "type": "mlp",
            "input_dim": model.input_dim,
            "output_index": model.output_index,
            "layers": [
                {"weights": L.weights.tolist(), "bias": L.bias.tolist(), "activation": L.activation}
                for L in model.layers
            ],
        }
    if isinstance(model, QuadraticModel):
        return {"type": "quadratic", "input_dim": model.input_dim,
                "H": model.H.tolist(), "w": model.w.tolist(), "c": model.c}
    if isinstance(model, ToyFunction):
        return {"type": "toy", "input_dim": 2}
    raise TypeError(f"cannot serialise {type(model).__name__}")


def _require(doc, key, where):
    if key not in doc:
        raise ModelFormatError(f"{where}: missing field {key!r}")
    return doc[key]


def _parse_layer(doc, i):
    where = f"layer {i}"
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{where}: expected an object")
    weights = _require(doc, "weights", where)
    bias = _require(doc, "bias", where)
    activation = doc.get("activation", "softplus")
    try:
        W = np.asarray(weights, dtype=float)
        b = np.asarray(bias, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"{where}: non-numeric or ragged parameters ({exc})") from None
    try:
        return Layer(W, b, activation)
    except ValueError as exc:
        raise ModelFormatError(f"{where}: {exc}") from None


def model_from_dict(doc):
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be an object")
    kind = _require(doc, "type", "model")
    if kind == "toy":
        return ToyFunction()
    if kind == "mlp":
        layers = _require(doc, "layers", "model")
        if not isinstance(layers, list) or not layers:
            raise ModelFormatError("model: 'layers' must be a non-empty list")
        parsed = [_parse_layer(L, i) for i, L in enumerate(layers)]
        try:
            model = MlpModel(parsed, int(doc.get("output_index", 0)))
        except ValueError as exc:
            raise ModelFormatError(f"model: {exc}") from None
    elif kind == "quadratic":
        try:
            model = QuadraticModel(_require(doc, "H", "model"), _require(doc, "w", "model"),
                                   doc.get("c", 0.0))
        except ValueError as exc:
            raise ModelFormatError(f"model: {exc}") from None
    else:
        raise ModelFormatError(f"model: unknown type {kind!r}")
    if "input_dim" in doc and int(doc["input_dim"]) != model.input_dim:
        raise ModelFormatError(
            f"model: input_dim {doc['input_dim']} does not match parameters ({model.input_dim})"
        )
    return model


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not valid JSON ({exc})") from None
    return model_from_dict(doc)
