"""Bayesian linear regression over network features, with confidence bounds.

The model is y = theta . phi(z) + noise with theta Gaussian. A posterior is
an immutable snapshot (mean, precision, noise scale); updates produce new
snapshots. On top of the posterior this module computes the per-posterior
confidence radius beta, the high-probability lower bound of the learned
signed-distance field (used as the runtime barrier function), and its spatial
gradient.

All symmetric positive-definite solves go through a cached Cholesky factor;
log-determinants come from the factor diagonal. Explicit inverses appear
nowhere outside the tests that use them as oracles.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammainc

from . import features
from .errors import DomainError, NearSingularNorm, NumericalBreakdown
from .features import NetParams

# Guard on the weighted norm in the bound gradient denominator; below this the
# gradient of the norm is numerically undefined (zero basis vector).
EPS_GRAD = 1e-12


def _position(state) -> np.ndarray:
    """Default state-to-point map: the first two state components."""
    return np.asarray(state, dtype=float)[:2]


@dataclass(frozen=True, eq=False)
class Posterior:
    """Gaussian coefficient belief: mean, precision (SPD), noise scale.

    The Cholesky factor of the precision is computed once at construction;
    failure to factorize raises NumericalBreakdown.
    """

    mean: np.ndarray
    precision: np.ndarray
    sigma: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        prec = np.asarray(self.precision, dtype=float)
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if prec.shape != (len(mean), len(mean)):
            raise ValueError("precision shape inconsistent with mean")
        asym = np.abs(prec - prec.T).max() if prec.size else 0.0
        if asym > 1e-8 * max(1.0, np.abs(prec).max()):
            raise ValueError("precision must be symmetric")
        prec = 0.5 * (prec + prec.T)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", prec)
        try:
            chol = cho_factor(prec, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdown("precision is not positive definite") from exc
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """precision^{-1} @ rhs via the cached factor."""
        return cho_solve(self._chol, rhs)

    @property
    def log_det_precision(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol[0]))))

    @classmethod
    def standard_prior(cls, dim: int, sigma: float, scale: float = 1.0) -> "Posterior":
        return cls(np.zeros(dim), scale * np.eye(dim), sigma)


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float
    basis: np.ndarray


@dataclass(frozen=True)
class BoundParams:
    """Confidence level and the resulting radius for one posterior snapshot."""

    delta: float
    chi_square: float
    beta: float


def posterior_update_features(post: Posterior, Phi: np.ndarray, targets: np.ndarray) -> Posterior:
    """Conjugate update from a stacked feature matrix.

    New precision is Phi^T Phi + precision; new mean solves the shifted
    normal equations against the new precision. An empty batch returns the
    input snapshot unchanged.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if Phi.shape[0] == 0:
        return post
    if Phi.shape != (len(targets), post.dim):
        raise ValueError("feature matrix shape inconsistent with targets and posterior")
    if not (np.all(np.isfinite(Phi)) and np.all(np.isfinite(targets))):
        raise ValueError("features and targets must be finite")
    precision = Phi.T @ Phi + post.precision
    rhs = Phi.T @ targets + post.precision @ post.mean
    updated = Posterior(np.zeros(post.dim), precision, post.sigma)
    mean = updated.solve(rhs)
    object.__setattr__(updated, "mean", mean)
    return updated


def posterior_update(post: Posterior, points, targets, net: NetParams) -> Posterior:
    """Conjugate update from labeled points through the feature network."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(points) == 0:
        return post
    return posterior_update_features(post, features.forward(net, points), targets)


def predict_features(post: Posterior, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance for stacked basis rows (n, d)."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    mu = phi @ post.mean
    w = post.solve(phi.T)
    s = np.einsum("nd,dn->n", phi, w)
    var = post.sigma**2 * (1.0 + s)
    return mu, var


def predict(post: Posterior, z, net: NetParams) -> Prediction:
    """Predictive distribution of the field value at a point."""
    phi = features.forward(net, np.asarray(z, dtype=float))
    mu, var = predict_features(post, phi[None, :])
    return Prediction(float(mu[0]), float(var[0]), phi)


def predict_batch(post: Posterior, points, net: NetParams) -> tuple[np.ndarray, np.ndarray]:
    phi = features.forward(net, np.atleast_2d(np.asarray(points, dtype=float)))
    return predict_features(post, phi)


@lru_cache(maxsize=None)
def chi_square_quantile(d: int, p: float) -> float:
    """p-th quantile of the chi-square distribution with d degrees of freedom.

    Inverts the regularized lower incomplete gamma by bracketed bisection;
    the returned q satisfies |P(d/2, q/2) - p| below 1e-10.
    """
    if d < 1 or int(d) != d:
        raise ValueError("degrees of freedom must be a positive integer")
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    half = d / 2.0

    def cdf(q):
        return gammainc(half, q / 2.0)

    hi = d + 10.0 * math.sqrt(2.0 * d) + 10.0
    while cdf(hi) < p:
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def confidence_radius(post: Posterior, prior: Posterior, delta: float) -> float:
    """Radius beta bounding |phi . (mean - true coefficients)| in the
    precision-inverse norm with probability at least 1 - 2*delta.

    beta = sigma * ( sqrt(2 * log( (1/delta) * sqrt(det post / det prior) ))
                     + sqrt( (max eig prior / min eig post) * chi2_d(1-delta) ) )
    """
    if not 0.0 < delta < 0.5:
        raise ValueError("delta must lie strictly between 0 and 0.5")
    if post.dim != prior.dim:
        raise ValueError("posterior and prior dimensions differ")
    if post.sigma != prior.sigma:
        raise ValueError("posterior and prior noise scales differ")
    log_arg = -math.log(delta) + 0.5 * (post.log_det_precision - prior.log_det_precision)
    radicand = 2.0 * log_arg
    if radicand < 0.0:
        raise DomainError(
            f"log term {log_arg:.6g} makes the radicand negative; "
            "the posterior determinant shrank below the prior's"
        )
    lam_max_prior = float(np.linalg.eigvalsh(prior.precision)[-1])
    lam_min_post = float(np.linalg.eigvalsh(post.precision)[0])
    chi2 = chi_square_quantile(post.dim, 1.0 - delta)
    return post.sigma * (
        math.sqrt(radicand) + math.sqrt(lam_max_prior / lam_min_post * chi2)
    )


def _bound_terms(post: Posterior, z, net: NetParams):
    phi = features.forward(net, np.asarray(z, dtype=float))
    w = post.solve(phi)
    q = math.sqrt(max(float(phi @ w), 0.0))
    mu = float(post.mean @ phi)
    return phi, w, q, mu


def cbf_lower_bound(
    post: Posterior,
    prior: Posterior,
    delta: float,
    state,
    net: NetParams,
    v=None,
    beta: float | None = None,
) -> float:
    """High-probability lower bound of the learned field at a robot state.

    value = mean prediction - weighted feature norm * beta. ``v`` maps the
    state to the 2D query point (defaults to the first two components);
    ``beta`` may be injected to reuse a cached radius.
    """
    v = v or _position
    if beta is None:
        beta = confidence_radius(post, prior, delta)
    _, _, q, mu = _bound_terms(post, v(state), net)
    return mu - q * beta


def cbf_lower_bound_gradient(
    post: Posterior,
    prior: Posterior,
    delta: float,
    state,
    net: NetParams,
    v=None,
    beta: float | None = None,
) -> np.ndarray:
    """Spatial gradient of the lower bound with respect to the 2D point.

    grad = J^T mean - beta * (J^T precision^{-1} phi) / ||phi||_{precision^{-1}}
    with J the feature Jacobian. Raises NearSingularNorm when the weighted
    norm falls below EPS_GRAD (callers fall back to the mean-only gradient).
    """
    v = v or _position
    if beta is None:
        beta = confidence_radius(post, prior, delta)
    z = v(state)
    phi, jac = features.forward_and_jacobian(net, np.asarray(z, dtype=float))
    w = post.solve(phi)
    q = math.sqrt(max(float(phi @ w), 0.0))
    mean_grad = jac.T @ post.mean
    if beta == 0.0:
        return mean_grad
    if q <= EPS_GRAD:
        raise NearSingularNorm("weighted feature norm is numerically zero")
    return mean_grad - beta * (jac.T @ w) / q


def gaussian_nll(mu: np.ndarray, var: np.ndarray, targets: np.ndarray) -> float:
    """Mean Gaussian negative log-likelihood of targets under (mu, var)."""
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    targets = np.asarray(targets, dtype=float)
    return float(np.mean(0.5 * (np.log(2.0 * math.pi * var) + (targets - mu) ** 2 / var)))


def negative_log_likelihood(post: Posterior, points, targets, net: NetParams) -> float:
    """Mean predictive NLL of labeled points under the posterior."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(points) == 0:
        raise ValueError("test set must be nonempty")
    mu, var = predict_batch(post, points, net)
    return gaussian_nll(mu, var, targets)
