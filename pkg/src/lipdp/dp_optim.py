"""Private training loops: weight clipping with analytic sensitivity (``lip``),
its fixed-norm ablation (``fix``) and per-sample gradient clipping (``classic``)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .accountant import RdpLedger
from .layers import ModelSpec, flatten_grads
from .sensitivity import SensitivityReport, layer_sensitivity
from .tensor import DEFAULT_MAX_ITER, DEFAULT_TOL, frobenius_norm, gaussian_noise

VARIANTS = ("lip", "fix", "classic")


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, message: str):
        self.iteration = iteration
        self.detail = message
        super().__init__(f"iteration {iteration}: {message}")


@dataclass
class TrainConfig:
    epochs: int = 10
    noise_multiplier: float = 1.0
    expected_batch_size: int = 64
    clip_threshold: float = 1.0
    learning_rate: float = 0.01
    step_rule: str = "adam"  # "fixed" or "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    averaging: str = "expected_batch"  # or "realized_batch"
    l2_weight: float = 0.0
    norm: str = "spectral"  # or "frobenius"
    input_bound: float = 1.0
    power_tol: float = DEFAULT_TOL
    power_max_iter: int = 1000
    steps_per_epoch: int | None = None  # None: round(n / expected_batch_size)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")
        if self.expected_batch_size < 1:
            raise ValueError("expected_batch_size must be >= 1")
        if not self.clip_threshold > 0 or not self.learning_rate > 0:
            raise ValueError("clip_threshold and learning_rate must be positive")
        if self.step_rule not in ("fixed", "adam"):
            raise ValueError(f"unknown step_rule {self.step_rule!r}")
        if self.averaging not in ("expected_batch", "realized_batch"):
            raise ValueError(f"unknown averaging {self.averaging!r}")
        if self.norm not in ("spectral", "frobenius"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")
        if not self.input_bound > 0:
            raise ValueError("input_bound must be positive")

    def iterations(self, n: int) -> int:
        per_epoch = self.steps_per_epoch or max(1, round(n / self.expected_batch_size))
        return self.epochs * per_epoch


@dataclass
class ClipResult:
    u_theta: list[float]
    params: list[np.ndarray]


@dataclass
class StepResult:
    params: list[np.ndarray]
    u_theta: list[float] | None
    loss: float
    batch_size: int
    clip_error: float | None = None
    clipped_grad_norm: float | None = None


class Optimizer:
    """Fixed-step SGD or Adam, applied to an already privatized gradient."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def update(self, params, grads):
        cfg = self.cfg
        if cfg.step_rule == "fixed":
            return [p - cfg.learning_rate * g for p, g in zip(params, grads)]
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g
            m_hat = self.m[i] / (1 - cfg.beta1**self.t)
            v_hat = self.v[i] / (1 - cfg.beta2**self.t)
            out.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps))
        return out


def poisson_sample(n: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """Indices included independently with probability ``s / n``, redrawn while empty."""
    if not 1 <= s <= n:
        raise ValueError(f"need 1 <= s <= n, got s={s}, n={n}")
    q = s / n
    while True:
        idx = np.flatnonzero(rng.random(n) < q)
        if idx.size:
            return idx


def clip_weights(
    model: ModelSpec,
    params: Sequence[np.ndarray],
    C: float,
    norm: str = "spectral",
    fixed: bool = False,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> ClipResult:
    """Rescale each parameterized layer to norm ``min(C, ||theta_k||)``.

    With ``fixed=True`` every non-zero layer is rescaled to norm exactly ``C``.
    """
    if not C > 0:
        raise ValueError("C must be positive")
    u, out = [], []
    for k, (layer, theta) in enumerate(zip(model.layers, params)):
        if not layer.has_params:
            u.append(0.0)
            out.append(theta)
            continue
        current = model.weight_norm(k, theta, norm, tol, max_iter)
        if current == 0.0:
            u.append(0.0)
            out.append(theta.copy())
            continue
        target = C if fixed else min(C, current)
        u.append(target)
        out.append(theta * (target / current) if target != current else theta.copy())
    return ClipResult(u, out)


def _batch_divisor(cfg: TrainConfig, realized: int) -> float:
    return float(cfg.expected_batch_size if cfg.averaging == "expected_batch" else realized)


def lip_dp_sgd_step(
    model: ModelSpec,
    params: Sequence[np.ndarray],
    batch: tuple[np.ndarray, np.ndarray],
    report: SensitivityReport,
    cfg: TrainConfig,
    rng: np.random.Generator,
    optimizer: Optimizer | None = None,
    fixed: bool = False,
) -> StepResult:
    """One noised step: per-layer noise std ``sigma * delta_k``, then weight clipping."""
    x, y = batch
    losses, grads = model.per_sample_grads(params, x, y)
    b = _batch_divisor(cfg, x.shape[0])
    noisy = []
    for k, (theta, g) in enumerate(zip(params, grads)):
        total = g.sum(axis=0)
        noise = gaussian_noise(theta.shape, cfg.noise_multiplier * report.delta[k], rng)
        noisy.append((total + noise) / b + cfg.l2_weight * theta)
    optimizer = optimizer or Optimizer(cfg)
    stepped = optimizer.update(params, noisy)
    clipped = clip_weights(model, stepped, cfg.clip_threshold, cfg.norm, fixed,
                           cfg.power_tol, cfg.power_max_iter)
    return StepResult(clipped.params, clipped.u_theta, float(losses.mean()), x.shape[0])


def clip_per_sample(flat: np.ndarray, C: float) -> np.ndarray:
    """Scale each row ``v`` by ``min(1, C / ||v||)``."""
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        factor = np.where(norms > C, C / norms, 1.0)
    return flat * factor


def dp_sgd_step(
    model: ModelSpec,
    params: Sequence[np.ndarray],
    batch: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    rng: np.random.Generator,
    optimizer: Optimizer | None = None,
) -> StepResult:
    """One step of per-sample gradient clipping with noise std ``sigma * C``."""
    x, y = batch
    losses, grads = model.per_sample_grads(params, x, y)
    flat = flatten_grads(grads)
    clipped = clip_per_sample(flat, cfg.clip_threshold)
    realized = x.shape[0]
    true_mean = flat.sum(axis=0) / realized
    clipped_mean = clipped.sum(axis=0) / realized
    b = _batch_divisor(cfg, realized)

    summed = clipped.sum(axis=0)
    noisy, offset = [], 0
    for theta in params:
        size = theta.size
        part = summed[offset : offset + size].reshape(theta.shape)
        offset += size
        noise = gaussian_noise(theta.shape, cfg.noise_multiplier * cfg.clip_threshold, rng)
        noisy.append((part + noise) / b + cfg.l2_weight * theta)
    optimizer = optimizer or Optimizer(cfg)
    stepped = optimizer.update(params, noisy)
    return StepResult(
        stepped,
        None,
        float(losses.mean()),
        realized,
        clip_error=frobenius_norm(true_mean - clipped_mean),
        clipped_grad_norm=frobenius_norm(clipped_mean),
    )


@dataclass
class TrainResult:
    params: list[np.ndarray]
    ledger: RdpLedger
    diagnostics: list[dict] = field(default_factory=list)
    u_theta: list[float] | None = None


DIAGNOSTIC_FIELDS = ("iteration", "layer", "weight_norm", "delta", "loss", "clip_error", "clipped_grad_norm")


def train(
    model: ModelSpec,
    dataset: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    variant: str,
    rng: np.random.Generator,
    params: Sequence[np.ndarray] | None = None,
    diagnostics: bool = True,
    on_step: Callable[[int, list[np.ndarray]], None] | None = None,
) -> TrainResult:
    """Train for ``cfg.iterations(n)`` Poisson-sampled steps.

    ``dataset`` is ``(features, labels)`` with every feature row of norm at most
    ``cfg.input_bound``. The returned ledger has one step per iteration.
    ``on_step(iteration, params)`` is called after every update.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    x, y = dataset
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    row_norms = np.linalg.norm(x, axis=1)
    if row_norms.max(initial=0.0) > cfg.input_bound * (1 + 1e-9):
        raise ValueError(
            f"input row norm {row_norms.max():.6g} exceeds input_bound={cfg.input_bound}"
        )
    if cfg.expected_batch_size > n:
        raise ValueError("expected_batch_size exceeds dataset size")

    params = [np.array(p, dtype=np.float64) for p in (params or model.init_params(rng))]
    fixed = variant == "fix"
    u_theta = None
    if variant != "classic":
        clipped = clip_weights(model, params, cfg.clip_threshold, cfg.norm, fixed,
                               cfg.power_tol, cfg.power_max_iter)
        params, u_theta = clipped.params, clipped.u_theta

    ledger = RdpLedger(cfg.expected_batch_size / n, cfg.noise_multiplier)
    optimizer = Optimizer(cfg)
    rows: list[dict] = []
    for it in range(cfg.iterations(n)):
        report = None
        if variant != "classic":
            report = layer_sensitivity(model, None, u_theta, cfg.input_bound,
                                       norm=cfg.norm, tol=cfg.power_tol, max_iter=cfg.power_max_iter)
        idx = poisson_sample(n, cfg.expected_batch_size, rng)
        batch = (x[idx], y[idx])
        # divergence is detected below and reported as TrainingAborted
        with np.errstate(over="ignore", invalid="ignore"):
            if variant == "classic":
                res = dp_sgd_step(model, params, batch, cfg, rng, optimizer)
            else:
                res = lip_dp_sgd_step(model, params, batch, report, cfg, rng, optimizer, fixed)
                u_theta = res.u_theta
        if not math.isfinite(res.loss) or not all(np.isfinite(p).all() for p in res.params):
            raise TrainingAborted(it, f"non-finite loss or parameters (loss={res.loss})")
        params = res.params
        ledger.step()
        if on_step is not None:
            on_step(it, params)
        if diagnostics:
            rows.extend(_diagnostic_rows(model, params, it, res, report, u_theta, cfg))
    return TrainResult(params, ledger, rows, u_theta)


def _diagnostic_rows(model, params, it, res, report, u_theta, cfg):
    rows = []
    for k, layer in enumerate(model.layers):
        if not layer.has_params:
            continue
        if u_theta is not None:
            wn = u_theta[k]
        else:
            wn = model.weight_norm(k, params[k], cfg.norm, cfg.power_tol, cfg.power_max_iter)
        rows.append(
            {
                "iteration": it,
                "layer": k,
                "weight_norm": wn,
                "delta": report.delta[k] if report is not None else cfg.clip_threshold,
                "loss": res.loss,
                "clip_error": res.clip_error,
                "clipped_grad_norm": res.clipped_grad_norm,
            }
        )
    return rows


def mean_gradient(model: ModelSpec, params, dataset) -> list[np.ndarray]:
    x, y = dataset
    _, grads = model.per_sample_grads(params, x, y)
    return [g.mean(axis=0) for g in grads]


@dataclass(frozen=True)
class Stationarity:
    """Per-layer stationarity measures of the mean gradient at ``params``."""

    weight_norm: tuple[float, ...]
    grad_norm: tuple[float, ...]
    tangential_norm: tuple[float, ...]

    def satisfied(self, C: float, grad_tol: float, norm_tol: float) -> bool:
        for wn, g, t in zip(self.weight_norm, self.grad_norm, self.tangential_norm):
            interior = wn < C - norm_tol and g <= grad_tol
            boundary = abs(wn - C) <= norm_tol and t <= grad_tol
            if not (interior or boundary):
                return False
        return True


def stationarity(model: ModelSpec, params, dataset, cfg: TrainConfig) -> Stationarity:
    """Gradient norm and its component orthogonal to ``theta_k`` for each layer."""
    grads = mean_gradient(model, params, dataset)
    wn, gn, tn = [], [], []
    for k, layer in enumerate(model.layers):
        if not layer.has_params:
            continue
        theta = params[k].ravel()
        g = grads[k].ravel() + cfg.l2_weight * theta
        tt = float(theta @ theta)
        tangential = g - (g @ theta) / tt * theta if tt > 0 else g
        wn.append(model.weight_norm(k, params[k], cfg.norm, cfg.power_tol, cfg.power_max_iter))
        gn.append(frobenius_norm(g))
        tn.append(frobenius_norm(tangential))
    return Stationarity(tuple(wn), tuple(gn), tuple(tn))
