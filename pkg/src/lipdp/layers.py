"""Layers, losses and the feed-forward model container.

Everything is batch-first: a batch of inputs to layer ``k`` has shape
``(B, n_k)`` where ``n_k`` is the flattened feature size (convolutions keep
their ``c x h x w`` layout in row-major order inside that vector). ``vjp``
returns per-sample parameter gradients with shape ``(B, *param_shape)``.

Parameterless layers carry an empty parameter array ``np.empty(0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DEFAULT_MAX_ITER, DEFAULT_TOL, frobenius_norm, spectral_norm

NO_PARAMS = np.empty(0)


class ShapeError(ValueError):
    """Input or parameter shape does not match the layer description."""

    def __init__(self, message: str, layer_index: int | None = None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


def _check_input(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"expected input of shape (B, {dim}), got {x.shape}")
    return x


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    """Linear map ``x -> W^T x`` (``W^T x + B`` when ``with_bias``).

    With a bias the parameter tensor is the augmented matrix of shape
    ``(in_dim + 1, out_dim)`` whose last row is the bias, so the layer is
    ``theta^T (x, 1)`` and its norm bounds both weights and bias.
    """

    in_dim: int
    out_dim: int
    with_bias: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("Dense dimensions must be positive")

    @property
    def has_params(self) -> bool:
        return True

    @property
    def param_shape(self) -> tuple[int, ...]:
        return (self.in_dim + int(self.with_bias), self.out_dim)

    @property
    def fan_in(self) -> int:
        return self.in_dim + int(self.with_bias)

    def input_size(self, dim: int | None = None) -> int:
        return self.in_dim

    def output_size(self, dim: int | None = None) -> int:
        return self.out_dim

    def weight_matrix(self, params: np.ndarray) -> np.ndarray:
        return params

    def _augment(self, x: np.ndarray) -> np.ndarray:
        if not self.with_bias:
            return x
        return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)

    def forward(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        x = _check_input(x, self.in_dim)
        _check_params(self, params)
        return self._augment(x) @ params

    def vjp(self, params, x, upstream):
        x = _check_input(x, self.in_dim)
        upstream = _check_input(upstream, self.out_dim)
        grad_x = upstream @ params[: self.in_dim].T
        grad_params = np.einsum("bi,bo->bio", self._augment(x), upstream)
        return grad_x, grad_params

    def input_lipschitz_from_norm(self, weight_norm: float) -> float:
        return weight_norm

    def input_lipschitz(self, params, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> float:
        return spectral_norm(params[: self.in_dim], tol, max_iter)

    def param_lipschitz(self, x_bound: float) -> float:
        if self.with_bias:
            return math.hypot(x_bound, 1.0)
        return x_bound

    def output_bound(self, x_bound: float, weight_norm: float, dim: int) -> float:
        return weight_norm * self.param_lipschitz(x_bound)


@dataclass(frozen=True)
class Conv2D:
    """Stride-1 2-D convolution with zero padding and output size ``h x w``.

    Output ``y[c, i, j] = sum_{d, r, s} x[d, i + r - ph, j + s - pw] * theta[c, d, r, s]``
    with ``ph = (filter_h - 1) // 2`` and ``pw = (filter_w - 1) // 2``.
    """

    c_in: int
    c_out: int
    height: int
    width: int
    filter_h: int
    filter_w: int

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.height, self.width, self.filter_h, self.filter_w) < 1:
            raise ValueError("Conv2D sizes must be positive")

    @property
    def has_params(self) -> bool:
        return True

    @property
    def param_shape(self) -> tuple[int, ...]:
        return (self.c_out, self.c_in, self.filter_h, self.filter_w)

    @property
    def fan_in(self) -> int:
        return self.c_in * self.filter_h * self.filter_w

    @property
    def shift_factor(self) -> float:
        return math.sqrt(self.filter_h * self.filter_w)

    def input_size(self, dim: int | None = None) -> int:
        return self.c_in * self.height * self.width

    def output_size(self, dim: int | None = None) -> int:
        return self.c_out * self.height * self.width

    def weight_matrix(self, params: np.ndarray) -> np.ndarray:
        return params.reshape(self.c_out, -1)

    def _patches(self, x: np.ndarray) -> np.ndarray:
        """(B, h, w, c_in, fh, fw) view of the zero-padded input."""
        b = x.shape[0]
        img = x.reshape(b, self.c_in, self.height, self.width)
        ph, pw = (self.filter_h - 1) // 2, (self.filter_w - 1) // 2
        padded = np.pad(
            img,
            ((0, 0), (0, 0), (ph, self.filter_h - 1 - ph), (pw, self.filter_w - 1 - pw)),
        )
        win = sliding_window_view(padded, (self.filter_h, self.filter_w), axis=(2, 3))
        # win: (B, c_in, h, w, fh, fw)
        return win.transpose(0, 2, 3, 1, 4, 5)

    def forward(self, params, x):
        x = _check_input(x, self.input_size())
        _check_params(self, params)
        out = np.einsum("bhwdrs,cdrs->bchw", self._patches(x), params, optimize=True)
        return out.reshape(x.shape[0], -1)

    def vjp(self, params, x, upstream):
        x = _check_input(x, self.input_size())
        upstream = _check_input(upstream, self.output_size())
        b = x.shape[0]
        g = upstream.reshape(b, self.c_out, self.height, self.width)
        grad_params = np.einsum("bchw,bhwdrs->bcdrs", g, self._patches(x), optimize=True)
        grad_cols = np.einsum("bchw,cdrs->bdrshw", g, params, optimize=True)
        ph, pw = (self.filter_h - 1) // 2, (self.filter_w - 1) // 2
        padded = np.zeros(
            (b, self.c_in, self.height + self.filter_h - 1, self.width + self.filter_w - 1)
        )
        for r in range(self.filter_h):
            for s in range(self.filter_w):
                padded[:, :, r : r + self.height, s : s + self.width] += grad_cols[:, :, r, s]
        grad_x = padded[:, :, ph : ph + self.height, pw : pw + self.width]
        return grad_x.reshape(b, -1), grad_params

    def input_lipschitz_from_norm(self, weight_norm: float) -> float:
        return self.shift_factor * weight_norm

    def input_lipschitz(self, params, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> float:
        return self.shift_factor * spectral_norm(self.weight_matrix(params), tol, max_iter)

    def param_lipschitz(self, x_bound: float) -> float:
        return self.shift_factor * x_bound

    def output_bound(self, x_bound: float, weight_norm: float, dim: int) -> float:
        # each input pixel feeds at most filter_h * filter_w output positions
        return self.shift_factor * weight_norm * x_bound


@dataclass(frozen=True)
class GroupNorm:
    """Group normalization with the denominator clamped below by ``alpha``.

    ``groups`` is a partition of ``range(dim)``. Each group ``g`` maps to
    ``(x_g - mean) / max(alpha, sqrt(var + kappa))``.
    """

    dim: int
    groups: tuple[tuple[int, ...], ...]
    alpha: float
    kappa: float = 1e-5

    def __post_init__(self):
        if not self.alpha > 0 or not self.kappa > 0:
            raise ValueError("GroupNorm needs alpha > 0 and kappa > 0")
        seen = [i for g in self.groups for i in g]
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("GroupNorm groups must be non-empty")
        if sorted(seen) != list(range(self.dim)):
            raise ValueError("GroupNorm groups must partition range(dim)")

    @classmethod
    def contiguous(cls, dim: int, n_groups: int, alpha: float, kappa: float = 1e-5):
        if n_groups < 1 or dim % n_groups:
            raise ValueError(f"cannot split {dim} features into {n_groups} equal groups")
        size = dim // n_groups
        groups = tuple(tuple(range(g * size, (g + 1) * size)) for g in range(n_groups))
        return cls(dim, groups, alpha, kappa)

    @property
    def has_params(self) -> bool:
        return False

    param_shape = (0,)
    fan_in = 0

    def input_size(self, dim: int | None = None) -> int:
        return self.dim

    def output_size(self, dim: int | None = None) -> int:
        return self.dim

    def _stats(self, xg: np.ndarray):
        mu = xg.mean(axis=1, keepdims=True)
        c = xg - mu
        sigma = np.sqrt((c * c).mean(axis=1, keepdims=True) + self.kappa)
        return c, sigma

    def forward(self, params, x):
        x = _check_input(x, self.dim)
        out = np.empty_like(x)
        for g in self.groups:
            idx = list(g)
            c, sigma = self._stats(x[:, idx])
            out[:, idx] = c / np.maximum(self.alpha, sigma)
        return out

    def vjp(self, params, x, upstream):
        x = _check_input(x, self.dim)
        upstream = _check_input(upstream, self.dim)
        grad = np.empty_like(x)
        for g in self.groups:
            idx = list(g)
            n = len(idx)
            c, sigma = self._stats(x[:, idx])
            u = upstream[:, idx]
            pu = u - u.mean(axis=1, keepdims=True)
            free = sigma > self.alpha
            denom = np.where(free, sigma, self.alpha)
            corr = np.where(free, c * (u * c).sum(axis=1, keepdims=True) / (n * sigma**3), 0.0)
            grad[:, idx] = pu / denom - corr
        return grad, np.zeros((x.shape[0], 0))

    def input_lipschitz_from_norm(self, weight_norm: float = 0.0) -> float:
        return 1.0 / self.alpha

    def input_lipschitz(self, params=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> float:
        return 1.0 / self.alpha

    def param_lipschitz(self, x_bound: float) -> float:
        return 0.0

    def output_bound(self, x_bound: float, weight_norm: float, dim: int) -> float:
        return min(math.sqrt(dim), x_bound / self.alpha)


ACTIVATIONS = ("relu", "tanh", "sigmoid")


@dataclass(frozen=True)
class Activation:
    """Elementwise activation.

    The sigmoid input bound defaults to 1/2 (the tabulated value); ``sharp=True``
    switches to the exact constant 1/4.
    """

    kind: str
    sharp: bool = False

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {ACTIVATIONS}")

    @property
    def has_params(self) -> bool:
        return False

    param_shape = (0,)
    fan_in = 0

    def input_size(self, dim: int | None = None) -> int | None:
        return dim

    def output_size(self, dim: int | None = None) -> int | None:
        return dim

    def forward(self, params, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "relu":
            return np.maximum(x, 0.0)
        if self.kind == "tanh":
            return np.tanh(x)
        return _sigmoid(x)

    def vjp(self, params, x, upstream):
        x = np.asarray(x, dtype=np.float64)
        if upstream.shape != x.shape:
            raise ShapeError(f"upstream shape {upstream.shape} != input shape {x.shape}")
        if self.kind == "relu":
            d = (x > 0).astype(np.float64)
        elif self.kind == "tanh":
            d = 1.0 - np.tanh(x) ** 2
        else:
            s = _sigmoid(x)
            d = s * (1.0 - s)
        return upstream * d, np.zeros((x.shape[0], 0))

    def input_lipschitz_from_norm(self, weight_norm: float = 0.0) -> float:
        if self.kind == "sigmoid":
            return 0.25 if self.sharp else 0.5
        return 1.0

    def input_lipschitz(self, params=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> float:
        return self.input_lipschitz_from_norm()

    def param_lipschitz(self, x_bound: float) -> float:
        return 0.0

    def output_bound(self, x_bound: float, weight_norm: float, dim: int) -> float:
        if self.kind == "sigmoid":
            # sigmoid(0) != 0, so scale-by-Lipschitz is not a valid norm bound
            return math.sqrt(dim)
        return x_bound


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


Layer = Union[Dense, Conv2D, GroupNorm, Activation]


def _check_params(layer, params):
    if np.shape(params) != layer.param_shape:
        raise ShapeError(f"expected parameters of shape {layer.param_shape}, got {np.shape(params)}")


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _one_hot(labels: np.ndarray, c: int) -> np.ndarray:
    labels = np.asarray(labels).astype(int)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    out = np.zeros((labels.shape[0], c))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass(frozen=True)
class SoftmaxCE:
    """Cross-entropy of ``softmax(x / temperature)``; gradient norm <= sqrt(2)/temperature."""

    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def value_and_grad(self, output, labels):
        z = np.asarray(output, dtype=np.float64) / self.temperature
        y = _one_hot(labels, z.shape[1])
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -(y * logp).sum(axis=1)
        grad = (np.exp(logp) - y) / self.temperature
        return loss, grad

    def lipschitz(self, output_bound: float | None = None) -> float:
        return math.sqrt(2.0) / self.temperature


@dataclass(frozen=True)
class MulticlassHinge:
    """``sum_i max(0, margin/2 - x_i * y_i) / sqrt(c)`` with ``y_i = +1`` for the
    true class and ``-1`` otherwise.

    The ``1/sqrt(c)`` scale makes the gradient norm at most 1.
    """

    margin: float = 1.0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")

    def value_and_grad(self, output, labels):
        x = np.asarray(output, dtype=np.float64)
        c = x.shape[1]
        y = 2.0 * _one_hot(labels, c) - 1.0
        slack = self.margin / 2.0 - x * y
        active = slack > 0
        scale = 1.0 / math.sqrt(c)
        loss = np.where(active, slack, 0.0).sum(axis=1) * scale
        grad = np.where(active, -y, 0.0) * scale
        return loss, grad

    def lipschitz(self, output_bound: float | None = None) -> float:
        return 1.0


@dataclass(frozen=True)
class CosineSimilarity:
    """``1 - cos(x, e_y)``; requires ``||x|| >= min_output_norm``."""

    min_output_norm: float

    def __post_init__(self):
        if not self.min_output_norm > 0:
            raise ValueError("min_output_norm must be positive")

    def value_and_grad(self, output, labels):
        x = np.asarray(output, dtype=np.float64)
        y = _one_hot(labels, x.shape[1])
        norm = np.linalg.norm(x, axis=1, keepdims=True)
        bad = np.flatnonzero(norm[:, 0] < self.min_output_norm)
        if bad.size:
            raise ValueError(
                f"output norm {norm[bad[0], 0]:.6g} of sample {bad[0]} is below "
                f"min_output_norm={self.min_output_norm}"
            )
        cos = (x * y).sum(axis=1, keepdims=True) / norm
        grad = -(y - cos * x / norm) / norm
        return 1.0 - cos[:, 0], grad

    def lipschitz(self, output_bound: float | None = None) -> float:
        return 1.0 / self.min_output_norm


@dataclass(frozen=True)
class SquaredError:
    """``||x - y||^2`` for real-valued targets with ``||y|| <= target_bound``.

    The gradient ``2 (x - y)`` is bounded only once the output norm is bounded,
    so ``lipschitz`` needs that bound.
    """

    target_bound: float = math.inf

    def value_and_grad(self, output, targets):
        x = np.asarray(output, dtype=np.float64)
        y = np.asarray(targets, dtype=np.float64).reshape(x.shape[0], -1)
        if y.shape != x.shape:
            raise ShapeError(f"targets of shape {y.shape} do not match outputs {x.shape}")
        r = x - y
        return (r * r).sum(axis=1), 2.0 * r

    def lipschitz(self, output_bound: float | None = None) -> float:
        if output_bound is None:
            return math.inf
        return 2.0 * (output_bound + self.target_bound)


Loss = Union[SoftmaxCE, MulticlassHinge, CosineSimilarity, SquaredError]


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    loss: Loss = field(default_factory=SoftmaxCE)
    input_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        dims = []
        dim = self.input_dim
        for k, layer in enumerate(self.layers):
            want = layer.input_size(dim)
            if dim is None:
                dim = want
            elif want != dim:
                raise ShapeError(f"expects input size {want} but receives {dim}", k)
            dims.append(dim)
            dim = layer.output_size(dim)
        if dims[0] is None:
            raise ShapeError("input size cannot be inferred; pass input_dim", 0)
        if any(d is None for d in dims):
            raise ShapeError("input size cannot be inferred")
        dims.append(dim)
        object.__setattr__(self, "dims", tuple(dims))
        if self.input_dim is None:
            object.__setattr__(self, "input_dim", dims[0])

    def __len__(self):
        return len(self.layers)

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    def param_shapes(self) -> list[tuple[int, ...]]:
        return [layer.param_shape for layer in self.layers]

    def init_params(self, rng: np.random.Generator) -> list[np.ndarray]:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per parameterized layer."""
        params = []
        for layer in self.layers:
            if layer.has_params:
                bound = 1.0 / math.sqrt(layer.fan_in)
                params.append(rng.uniform(-bound, bound, size=layer.param_shape))
            else:
                params.append(NO_PARAMS)
        return params

    def forward(self, params: Sequence[np.ndarray], x: np.ndarray) -> list[np.ndarray]:
        """Activations ``[x_1, ..., x_{K+1}]`` for a batch."""
        xs = [np.asarray(x, dtype=np.float64)]
        if xs[0].ndim == 1:
            xs[0] = xs[0][None, :]
        for k, (layer, p) in enumerate(zip(self.layers, params)):
            try:
                if xs[-1].shape[1] != self.dims[k]:
                    raise ShapeError(f"expected input of size {self.dims[k]}, got {xs[-1].shape[1]}")
                xs.append(layer.forward(p, xs[-1]))
            except ShapeError as exc:
                if exc.layer_index is not None:
                    raise
                raise ShapeError(str(exc), k) from None
        return xs

    def predict(self, params, x) -> np.ndarray:
        return self.forward(params, x)[-1]

    def per_sample_grads(self, params, x, labels):
        """Per-sample losses ``(B,)`` and gradients ``[(B, *shape_k)]`` for every layer."""
        xs = self.forward(params, x)
        losses, up = self.loss.value_and_grad(xs[-1], labels)
        grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            up, grads[k] = self.layers[k].vjp(params[k], xs[k], up)
        return losses, grads

    def weight_norm(self, k: int, theta: np.ndarray, kind: str = "spectral",
                    tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> float:
        """Norm used for weight clipping: spectral norm of the layer's matricization
        or the Frobenius norm."""
        layer = self.layers[k]
        if not layer.has_params:
            return 0.0
        if kind == "frobenius":
            return frobenius_norm(theta)
        if kind != "spectral":
            raise ValueError(f"unknown norm kind {kind!r}")
        return spectral_norm(layer.weight_matrix(theta), tol, max_iter)


def flatten_grads(grads: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate per-sample gradient arrays into shape ``(B, total_params)``."""
    b = grads[0].shape[0]
    return np.concatenate([g.reshape(b, -1) for g in grads], axis=1)
