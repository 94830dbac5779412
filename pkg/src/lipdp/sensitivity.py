"""Per-layer gradient sensitivity bounds for weight-clipped networks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import ModelSpec
from .tensor import DEFAULT_MAX_ITER, DEFAULT_TOL


class UnclippedParamsError(ValueError):
    """A layer's weight norm exceeds the norm bound it was declared with."""


@dataclass(frozen=True)
class SensitivityReport:
    """Bounds produced by :func:`layer_sensitivity`.

    ``X[k]`` bounds ``||x_{k+1}||`` (0-based, so ``X[0]`` is the input bound and
    ``X[K]`` the output bound). ``l[k]`` bounds the loss gradient with respect
    to the same activation; ``l[K]`` is the loss Lipschitz value. ``delta[k]``
    bounds the per-sample gradient norm of layer ``k``'s parameters.
    """

    X: tuple[float, ...]
    l: tuple[float, ...]
    delta: tuple[float, ...]
    u_theta: tuple[float, ...]

    def to_text(self) -> str:
        lines = ["k\tX_k\tl_k\tdelta_k"]
        for k, d in enumerate(self.delta):
            lines.append(f"{k + 1}\t{self.X[k]!r}\t{self.l[k]!r}\t{d!r}")
        k = len(self.delta)
        lines.append(f"{k + 1}\t{self.X[k]!r}\t{self.l[k]!r}\t-")
        return "\n".join(lines) + "\n"


def delta_from_bounds(model: ModelSpec, X: Sequence[float], l: Sequence[float]) -> tuple[float, ...]:
    return tuple(
        l[k + 1] * layer.param_lipschitz(X[k]) if layer.has_params else 0.0
        for k, layer in enumerate(model.layers)
    )


def layer_sensitivity(
    model: ModelSpec,
    params: Sequence[np.ndarray] | None,
    u_theta: Sequence[float],
    X1: float,
    l_loss: float | None = None,
    norm: str = "spectral",
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> SensitivityReport:
    """Propagate norm bounds forward and gradient bounds backward.

    ``u_theta[k]`` must bound the weight norm of layer ``k`` (as returned by
    weight clipping). When ``params`` is not None each bound is checked against the
    actual norm, to relative tolerance ``10 * tol``. ``l_loss`` defaults to the
    loss's own Lipschitz value at the propagated output bound.
    """
    K = len(model.layers)
    if len(u_theta) != K:
        raise ValueError(f"u_theta has {len(u_theta)} entries for {K} layers")
    if not X1 > 0:
        raise ValueError("X1 must be positive")
    if params is not None:
        for k, layer in enumerate(model.layers):
            if not layer.has_params:
                continue
            actual = model.weight_norm(k, params[k], norm, tol, max_iter)
            if actual > u_theta[k] * (1 + 10 * tol) + 1e-12:
                raise UnclippedParamsError(
                    f"layer {k}: weight norm {actual!r} exceeds declared bound {u_theta[k]!r}"
                )

    X = [float(X1)]
    for k, layer in enumerate(model.layers):
        X.append(float(layer.output_bound(X[k], u_theta[k], model.dims[k + 1])))

    if l_loss is None:
        l_loss = model.loss.lipschitz(X[K])
    elif l_loss < model.loss.lipschitz(X[K]):
        raise ValueError(f"l_loss={l_loss} is below the loss Lipschitz bound")
    if not math.isfinite(l_loss) or l_loss < 0:
        raise ValueError(f"loss gradient bound must be finite and non-negative, got {l_loss}")

    l = [0.0] * (K + 1)
    l[K] = float(l_loss)
    for k in range(K - 1, -1, -1):
        layer = model.layers[k]
        l[k] = l[k + 1] * layer.input_lipschitz_from_norm(u_theta[k])

    delta = delta_from_bounds(model, X, l)
    u = tuple(float(u_theta[k]) if layer.has_params else 0.0 for k, layer in enumerate(model.layers))
    return SensitivityReport(tuple(X), tuple(l), delta, u)
