"""Gaussian-process regression baseline with squared-exponential kernel.

Hyperparameters (signal variance, length scale, noise variance) are fitted by
maximizing the log marginal likelihood over a deterministic logarithmic grid
followed by coordinatewise refinement. Predictions expose the two-sigma lower
bound and its analytic spatial gradient so the control pipeline can swap this
model in for the meta-learned posterior.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import IllConditioned
from .surface import SurfaceDataset


@dataclass(frozen=True)
class GPSearchConfig:
    length_scale_grid: tuple[float, ...] = tuple(np.geomspace(0.05, 5.0, 7).tolist())
    signal_var_grid: tuple[float, ...] = tuple(np.geomspace(1e-4, 1.0, 7).tolist())
    noise_var_grid: tuple[float, ...] = tuple(np.geomspace(1e-8, 1e-2, 5).tolist())
    noise_var_bounds: tuple[float, float] = (1e-8, 1e-2)
    refinement_passes: int = 2
    refinement_factors: tuple[float, ...] = (0.5, 1.0 / math.sqrt(2.0), math.sqrt(2.0), 2.0)
    max_points: int = 800


@dataclass(eq=False)
class GPModel:
    signal_var: float
    length_scale: float
    noise_var: float
    train_x: np.ndarray
    train_y: np.ndarray
    chol: tuple = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)
    log_marginal_likelihood: float = -math.inf

    @property
    def n_points(self) -> int:
        return len(self.train_y)


def _kernel(x1: np.ndarray, x2: np.ndarray, signal_var: float, length_scale: float) -> np.ndarray:
    d2 = np.sum((x1[:, None, :] - x2[None, :, :]) ** 2, axis=2)
    return signal_var * np.exp(-0.5 * d2 / length_scale**2)


def _log_marginal(x, y, signal_var, length_scale, noise_var):
    k = _kernel(x, x, signal_var, length_scale) + noise_var * np.eye(len(x))
    try:
        chol = cho_factor(k, lower=True)
    except np.linalg.LinAlgError:
        return None, None, None
    alpha = cho_solve(chol, y)
    lml = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(chol[0])))) - 0.5 * len(
        y
    ) * math.log(2.0 * math.pi)
    return lml, chol, alpha


def _subsample(points: np.ndarray, targets: np.ndarray, cap: int):
    if len(targets) <= cap:
        return points, targets
    idx = np.linspace(0, len(targets) - 1, cap).round().astype(int)
    return points[idx], targets[idx]


def gp_fit(data, cfg: GPSearchConfig = GPSearchConfig()) -> GPModel:
    """Maximum-likelihood hyperparameter search, deterministic.

    ``data`` is a SurfaceDataset or a (points, targets) pair. Training sets
    larger than cfg.max_points are uniformly subsampled (evenly spaced
    indices). Raises IllConditioned when no candidate factorizes.
    """
    if isinstance(data, SurfaceDataset):
        points, targets = data.points, data.labels
    else:
        points, targets = data
    points = np.atleast_2d(np.asarray(points, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if len(targets) == 0:
        raise ValueError("training data must be nonempty")
    points, targets = _subsample(points, targets, cfg.max_points)

    best = None
    for ls in cfg.length_scale_grid:
        for sv in cfg.signal_var_grid:
            for nv in cfg.noise_var_grid:
                lml, chol, alpha = _log_marginal(points, targets, sv, ls, nv)
                if lml is not None and (best is None or lml > best[0]):
                    best = (lml, sv, ls, nv, chol, alpha)
    if best is None:
        raise IllConditioned("no hyperparameter candidate factorized")

    lo_nv, hi_nv = cfg.noise_var_bounds
    for _ in range(cfg.refinement_passes):
        for param_idx in (1, 2, 3):
            current = list(best[1:4])
            for factor in cfg.refinement_factors:
                trial = list(current)
                trial[param_idx - 1] = current[param_idx - 1] * factor
                if param_idx == 3:
                    trial[2] = min(max(trial[2], lo_nv), hi_nv)
                lml, chol, alpha = _log_marginal(points, targets, trial[0], trial[1], trial[2])
                if lml is not None and lml > best[0]:
                    best = (lml, trial[0], trial[1], trial[2], chol, alpha)
    lml, sv, ls, nv, chol, alpha = best
    return GPModel(sv, ls, nv, points, targets, chol, alpha, lml)


def gp_predict(model: GPModel, points) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and (latent) variance at query points (n, 2)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    k_star = _kernel(model.train_x, points, model.signal_var, model.length_scale)
    mean = k_star.T @ model.alpha
    v = solve_triangular(model.chol[0], k_star, lower=True)
    var = model.signal_var - np.einsum("in,in->n", v, v)
    return mean, np.maximum(var, 0.0)


def gp_predict_bounds(model: GPModel, z) -> tuple[float, float, float]:
    """(mean, variance, mean - 2 * sqrt(variance)) at a single point."""
    mean, var = gp_predict(model, np.asarray(z, dtype=float)[None, :])
    m, s2 = float(mean[0]), float(var[0])
    return m, s2, m - 2.0 * math.sqrt(s2)


def gp_lower_bound_gradient(model: GPModel, z, var_floor: float = 1e-12) -> np.ndarray:
    """Analytic spatial gradient of the two-sigma lower bound at one point.

    d k(z, x_i) / d z = k(z, x_i) (x_i - z) / length_scale^2; the variance
    term uses the kernel-weight solve against the factorized train kernel.
    """
    z = np.asarray(z, dtype=float)
    k_star = _kernel(model.train_x, z[None, :], model.signal_var, model.length_scale)[:, 0]
    dk = k_star[:, None] * (model.train_x - z) / model.length_scale**2
    mean_grad = dk.T @ model.alpha
    w = cho_solve(model.chol, k_star)
    var = model.signal_var - float(k_star @ w)
    var_grad = -2.0 * dk.T @ w
    if var <= var_floor:
        return mean_grad
    return mean_grad - var_grad / math.sqrt(var)


def gp_nll(model: GPModel, points, targets) -> float:
    """Mean predictive NLL of held-out labels (observation noise included)."""
    from .blr import gaussian_nll

    mean, var = gp_predict(model, points)
    return gaussian_nll(mean, var + model.noise_var, targets)
