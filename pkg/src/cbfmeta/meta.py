"""Offline meta-training of the feature network and coefficient prior.

Each iteration samples a handful of obstacle tasks, builds their labeled
offset datasets, splits them into adaptation and evaluation halves, runs the
closed-form coefficient update on the adaptation half, and scores the
evaluation half under the resulting predictive distribution. The scalar
objective per evaluation point is log Sigma + residual^2 / Sigma plus a
trace regularizer that discourages wide confidence radii. Gradients flow
through the posterior formulas into the network weights, the prior mean, and
the prior precision; they are derived by hand and checked against finite
differences in the test suite.

The prior precision is parameterized as L L^T + eps I with L lower
triangular, so it stays positive definite under unconstrained updates.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import container, features
from .blr import Posterior, chi_square_quantile
from .environment import DistributionParams, EnvironmentSpec, sample_environment
from .errors import EmptyTask, NumericalBreakdown
from .features import NetParams, NetSpec
from .lidar import LidarConfig, cast_scan
from .surface import OffsetConfig, SurfaceDataset, build_offset_dataset

_CKPT_MAGIC = b"CBFM-CKPT-1\n"

# Iteration budget reported for the full-scale training run; the desk-scale
# budget below keeps the whole pipeline reproducible on a laptop.
PAPER_ITERATIONS = 30_000
DESK_ITERATIONS = 2_000


@dataclass(frozen=True)
class MetaConfig:
    n_iterations: int = PAPER_ITERATIONS
    tasks_per_iteration: int = 4
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"
    lr_min_fraction: float = 0.03
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma: float = 1e-9
    sigma: float = 0.001
    lambda0_eps: float = 1e-6
    lambda0_init: float = 1.0
    seed: int = 0
    net: NetSpec = field(default_factory=NetSpec)
    distribution: DistributionParams = field(default_factory=DistributionParams)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    offsets: OffsetConfig = field(default_factory=OffsetConfig)
    n_poses: int = 8
    pose_ring_radius: float = 2.0
    max_anchors_per_task: int | None = 48
    split_unit: str = "anchor"
    beta_probe_delta: float = 0.025

    def __post_init__(self):
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be nonnegative")
        if self.tasks_per_iteration < 1:
            raise ValueError("tasks_per_iteration must be at least 1")
        if self.gamma < 0.0:
            raise ValueError("gamma must be nonnegative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.split_unit not in ("point", "anchor"):
            raise ValueError(f"unknown split_unit {self.split_unit!r}")

    def learning_rate_at(self, iteration: int) -> float:
        """Step size for one iteration under the configured schedule."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        lo = self.learning_rate * self.lr_min_fraction
        span = max(self.n_iterations - 1, 1)
        cos = 0.5 * (1.0 + math.cos(math.pi * iteration / span))
        return lo + (self.learning_rate - lo) * cos


@dataclass(frozen=True, eq=False)
class TaskData:
    """One task after the adaptation/evaluation split."""

    train_points: np.ndarray
    train_targets: np.ndarray
    test_points: np.ndarray
    test_targets: np.ndarray


@dataclass(eq=False)
class MetaCheckpoint:
    """Trained bundle: feature net, prior mean, prior precision, noise scale."""

    spec: NetSpec
    net: NetParams
    theta0: np.ndarray
    lambda0: np.ndarray
    sigma: float

    def prior(self) -> Posterior:
        return Posterior(self.theta0, self.lambda0, self.sigma)

    def save(self, path) -> None:
        arrays = []
        for w, b in zip(self.net.weights, self.net.biases):
            arrays.append(w)
            arrays.append(b)
        arrays.append(self.theta0)
        arrays.append(self.lambda0)
        container.write_file(
            path, _CKPT_MAGIC, {"spec": self.spec.to_dict(), "sigma": self.sigma}, arrays
        )

    @classmethod
    def load(cls, path) -> "MetaCheckpoint":
        meta, arrays = container.read_file(path, _CKPT_MAGIC)
        spec = NetSpec.from_dict(meta["spec"])
        n_layers = len(spec.hidden) + 1
        net = NetParams(spec, list(arrays[0 : 2 * n_layers : 2]), list(arrays[1 : 2 * n_layers : 2]))
        theta0, lambda0 = arrays[2 * n_layers], arrays[2 * n_layers + 1]
        return cls(spec, net, theta0, lambda0, float(meta["sigma"]))


@dataclass(eq=False)
class MetaResult:
    checkpoint: MetaCheckpoint
    log: list[tuple[int, float, float]]

    def write_log_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss", "mean_beta_probe"])
            for it, loss, beta in self.log:
                writer.writerow([it, repr(float(loss)), repr(float(beta))])


def ring_poses(center, radius: float, n_poses: int, phase: float = 0.0) -> list[tuple]:
    """Sensor poses on a circle, each heading toward the center."""
    cx, cy = float(center[0]), float(center[1])
    poses = []
    for k in range(n_poses):
        a = phase + 2.0 * math.pi * k / n_poses
        poses.append((cx + radius * math.cos(a), cy + radius * math.sin(a), a + math.pi))
    return poses


def build_task(
    env: EnvironmentSpec,
    poses,
    lidar_cfg: LidarConfig,
    offset_cfg: OffsetConfig,
    rng: np.random.Generator,
    *,
    obstacle_index: int = 0,
    max_anchors: int | None = None,
) -> SurfaceDataset:
    """Union of offset datasets from scans at the given poses, one obstacle.

    Raises EmptyTask when no ray reaches the obstacle from any pose. When
    ``max_anchors`` is set, a random subset of anchors (with their whole
    offset groups) is kept.
    """
    parts = []
    for pose in poses:
        scan = cast_scan(env, pose, lidar_cfg, rng)
        ds = build_offset_dataset(scan, offset_cfg)
        if len(ds):
            parts.append(ds.for_obstacle(obstacle_index))
    dataset = SurfaceDataset.concat(parts)
    if len(dataset) == 0:
        raise EmptyTask("no surface returns from any pose")
    if max_anchors is not None and dataset.n_anchors > max_anchors:
        anchors = dataset.anchor_order()
        keep = rng.choice(anchors, size=max_anchors, replace=False)
        dataset = dataset.subsample_anchors(np.sort(keep))
    return dataset


def split_task(dataset: SurfaceDataset, rng: np.random.Generator) -> TaskData:
    """Random disjoint split over rows; the adaptation size is uniform on
    {1, ..., n}."""
    n = len(dataset)
    n_tr = int(rng.integers(1, n + 1))
    perm = rng.permutation(n)
    tr, ts = perm[:n_tr], perm[n_tr:]
    return TaskData(
        dataset.points[tr], dataset.labels[tr], dataset.points[ts], dataset.labels[ts]
    )


def split_task_by_anchor(dataset: SurfaceDataset, rng: np.random.Generator) -> TaskData:
    """Random disjoint split that keeps each anchor's offset group whole.

    Mirrors how data reaches the model online: the buffer admits whole
    groups, so evaluation points never sit a single offset step away from an
    adaptation point of the same surface hit. The adaptation size is uniform
    over {1, ..., n_anchors}.
    """
    anchors = dataset.anchor_order()
    n = len(anchors)
    n_tr = int(rng.integers(1, n + 1))
    perm = rng.permutation(anchors)
    tr_mask = np.isin(dataset.anchor_ids, perm[:n_tr])
    return TaskData(
        dataset.points[tr_mask],
        dataset.labels[tr_mask],
        dataset.points[~tr_mask],
        dataset.labels[~tr_mask],
    )


def make_lidar_task_sampler(cfg: MetaConfig):
    """Production task stream: sample an obstacle, scan it from a pose ring."""
    split = split_task_by_anchor if cfg.split_unit == "anchor" else split_task

    def sampler(rng: np.random.Generator) -> TaskData:
        env_seed = int(rng.integers(0, 2**63 - 1))
        env = sample_environment(cfg.distribution, 1, env_seed)
        phase = rng.uniform(0.0, 2.0 * math.pi / cfg.n_poses)
        poses = ring_poses(
            env.obstacles[0].reference_point, cfg.pose_ring_radius, cfg.n_poses, phase
        )
        dataset = build_task(
            env, poses, cfg.lidar, cfg.offsets, rng, max_anchors=cfg.max_anchors_per_task
        )
        return split(dataset, rng)

    return sampler


def _lambda0_from_chol(L: np.ndarray, eps: float) -> np.ndarray:
    return L @ L.T + eps * np.eye(len(L))


def meta_loss(
    theta0: np.ndarray,
    chol_param: np.ndarray,
    net: NetParams,
    tasks: list[TaskData],
    *,
    sigma: float,
    gamma: float,
    lambda0_eps: float = 1e-6,
):
    """Objective and exact gradients over (prior mean, precision factor, net).

    Returns (loss, grad_theta0, grad_chol_param, grad_net_flat, aux) where
    aux carries the per-task posterior precisions for diagnostics. Gradients
    are hand-derived adjoints through the conjugate update; NumericalBreakdown
    propagates from failed factorizations.
    """
    d = len(theta0)
    lam0 = _lambda0_from_chol(chol_param, lambda0_eps)
    try:
        lam0_chol = cho_factor(lam0, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalBreakdown("prior precision lost positive definiteness") from exc
    lam0_inv = cho_solve(lam0_chol, np.eye(d))
    t0 = float(np.sum(lam0_inv * lam0_inv))

    loss = 0.0
    theta0_bar = np.zeros(d)
    lam0_bar = np.zeros((d, d))
    train_batches, test_batches = [], []
    precisions = []
    sig2 = sigma * sigma

    for task in tasks:
        phi_tr = features.forward(net, task.train_points)
        a_mat = phi_tr.T @ phi_tr + lam0
        try:
            a_chol = cho_factor(a_mat, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdown("posterior precision not positive definite") from exc
        precisions.append(a_mat)
        b_vec = phi_tr.T @ task.train_targets + lam0 @ theta0
        theta = cho_solve(a_chol, b_vec)
        a_inv = cho_solve(a_chol, np.eye(d))
        t_xi = float(np.sum(a_inv * a_inv))
        loss += gamma * t_xi * t0
        a_bar = gamma * t0 * (-2.0) * (a_inv @ a_inv @ a_inv)
        lam0_bar += gamma * t_xi * (-2.0) * (lam0_inv @ lam0_inv @ lam0_inv)

        n_ts = len(task.test_points)
        if n_ts:
            phi_ts = features.forward(net, task.test_points)
            u_mat = cho_solve(a_chol, phi_ts.T)
            s = np.einsum("nd,dn->n", phi_ts, u_mat)
            var = sig2 * (1.0 + s)
            resid = task.test_targets - phi_ts @ theta
            loss += float(np.sum(np.log(var) + resid * resid / var))

            d_var = 1.0 / var - (resid * resid) / (var * var)
            c = sig2 * d_var
            d_mu = -2.0 * resid / var
            theta_adj = phi_ts.T @ d_mu
            phi_ts_bar = np.outer(d_mu, theta) + 2.0 * (u_mat * c).T
            a_bar += -(u_mat * c) @ u_mat.T
            b_bar = cho_solve(a_chol, theta_adj)
            a_bar += -np.outer(b_bar, theta)
            test_batches.append((task.test_points, phi_ts_bar))
        else:
            b_bar = np.zeros(d)

        phi_tr_bar = np.outer(task.train_targets, b_bar) + phi_tr @ (a_bar + a_bar.T)
        train_batches.append((task.train_points, phi_tr_bar))
        lam0_bar += a_bar + np.outer(b_bar, theta0)
        theta0_bar += lam0 @ b_bar

    chol_bar = np.tril((lam0_bar + lam0_bar.T) @ chol_param)

    all_points = [p for p, _ in train_batches] + [p for p, _ in test_batches]
    all_adjoints = [a for _, a in train_batches] + [a for _, a in test_batches]
    net_grad = features.parameter_gradient(
        net, np.concatenate(all_points), np.concatenate(all_adjoints)
    )
    aux = {"posterior_precisions": precisions, "lambda0": lam0}
    return loss, theta0_bar, chol_bar, net_grad, aux


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def _adam_step(state: _AdamState, grad: np.ndarray, cfg: MetaConfig, lr: float) -> np.ndarray:
    state.t += 1
    state.m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grad
    state.v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.adam_beta1**state.t)
    v_hat = state.v / (1.0 - cfg.adam_beta2**state.t)
    return -lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def _beta_probe(aux: dict, sigma: float, delta: float) -> float:
    """Mean confidence radius over the iteration's task posteriors."""
    lam0 = aux["lambda0"]
    sign0, logdet0 = np.linalg.slogdet(lam0)
    lam_max0 = float(np.linalg.eigvalsh(lam0)[-1])
    chi2 = chi_square_quantile(len(lam0), 1.0 - delta)
    betas = []
    for a_mat in aux["posterior_precisions"]:
        _, logdet_a = np.linalg.slogdet(a_mat)
        radicand = 2.0 * (-math.log(delta) + 0.5 * (logdet_a - logdet0))
        lam_min = float(np.linalg.eigvalsh(a_mat)[0])
        betas.append(sigma * (math.sqrt(max(radicand, 0.0)) + math.sqrt(lam_max0 / lam_min * chi2)))
    return float(np.mean(betas))


def meta_train(cfg: MetaConfig, task_sampler=None, progress_every: int = 0) -> MetaResult:
    """Run the training loop and return the checkpoint plus per-iteration log.

    Deterministic given the config seed. With n_iterations = 0 the initial
    parameters are returned unchanged. Aborts with NumericalBreakdown when
    the loss stops being finite.
    """
    rng = np.random.default_rng(cfg.seed)
    if task_sampler is None:
        task_sampler = make_lidar_task_sampler(cfg)
    d = cfg.net.output_dim
    net = features.init_params(cfg.net, rng)
    theta0 = np.zeros(d)
    chol_param = math.sqrt(cfg.lambda0_init) * np.eye(d)
    tril = np.tril_indices(d)

    n_net = features.n_params(cfg.net)
    flat = np.concatenate([features.to_flat(net), theta0, chol_param[tril]])
    adam = _AdamState(np.zeros_like(flat), np.zeros_like(flat))
    log: list[tuple[int, float, float]] = []

    for it in range(cfg.n_iterations):
        tasks = [task_sampler(rng) for _ in range(cfg.tasks_per_iteration)]
        loss, g_theta0, g_chol, g_net, aux = meta_loss(
            theta0,
            chol_param,
            net,
            tasks,
            sigma=cfg.sigma,
            gamma=cfg.gamma,
            lambda0_eps=cfg.lambda0_eps,
        )
        if not math.isfinite(loss):
            raise NumericalBreakdown(f"non-finite loss {loss!r} at iteration {it}")
        grad = np.concatenate([g_net, g_theta0, g_chol[tril]])
        flat += _adam_step(adam, grad, cfg, cfg.learning_rate_at(it))
        net = features.from_flat(cfg.net, flat[:n_net])
        theta0 = flat[n_net : n_net + d]
        chol_param = np.zeros((d, d))
        chol_param[tril] = flat[n_net + d :]
        # SPD holds by construction; the factorization is asserted regardless.
        np.linalg.cholesky(_lambda0_from_chol(chol_param, cfg.lambda0_eps))
        log.append((it, float(loss), _beta_probe(aux, cfg.sigma, cfg.beta_probe_delta)))
        if progress_every and (it + 1) % progress_every == 0:
            print(f"iteration {it + 1}/{cfg.n_iterations}: loss {loss:.4g}")

    lambda0 = _lambda0_from_chol(chol_param, cfg.lambda0_eps)
    checkpoint = MetaCheckpoint(cfg.net, net, theta0.copy(), lambda0, cfg.sigma)
    return MetaResult(checkpoint, log)


def adapt(checkpoint: MetaCheckpoint, points, targets) -> Posterior:
    """Closed-form coefficient update of the trained prior on new labeled points."""
    from .blr import posterior_update

    return posterior_update(checkpoint.prior(), points, targets, checkpoint.net)
