"""Barrier backends: one common surface for the controller to query.

A backend owns per-obstacle data buffers and turns them into barrier values
and spatial gradients at query points. The meta backend adapts the trained
coefficient prior in closed form and subtracts the confidence radius; the GP
backend refits a squared-exponential GP and uses the two-sigma lower bound.
Both apply the same variance-threshold data selection so the controller can
swap them via configuration.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import blr, gp
from .blr import Posterior
from .buffers import Buffer, update_buffer
from .errors import NearSingularNorm
from .meta import MetaCheckpoint
from .surface import SurfaceDataset

logger = logging.getLogger(__name__)


class MetaBarrierBackend:
    """Meta-learned posterior per obstacle with cached confidence radii."""

    name = "meta"

    def __init__(self, checkpoint: MetaCheckpoint, delta: float, eta: float, capacity: int):
        self.checkpoint = checkpoint
        self.delta = delta
        self.prior = checkpoint.prior()
        self._buffers: dict[int, Buffer] = {}
        self._betas: dict[int, float] = {}
        self._eta = eta
        self._capacity = capacity
        self.mean_gradient_fallbacks = 0

    def detected_ids(self) -> list[int]:
        return sorted(i for i, b in self._buffers.items() if len(b))

    def buffer_size(self, obstacle_id: int) -> int:
        buf = self._buffers.get(obstacle_id)
        return len(buf) if buf is not None else 0

    def ingest(self, obstacle_id: int, dataset: SurfaceDataset) -> None:
        buf = self._buffers.get(obstacle_id)
        if buf is None:
            buf = Buffer(posterior=self.prior, eta=self._eta, capacity=self._capacity)
        before = len(buf)
        buf, posterior = update_buffer(buf, dataset, self.prior, self.checkpoint.net)
        self._buffers[obstacle_id] = buf
        if len(buf) != before:
            self._betas[obstacle_id] = blr.confidence_radius(posterior, self.prior, self.delta)

    def posterior_for(self, obstacle_id: int) -> Posterior:
        return self._buffers[obstacle_id].posterior

    def value_and_gradient(self, obstacle_id: int, point) -> tuple[float, np.ndarray] | None:
        post = self._buffers[obstacle_id].posterior
        beta = self._betas[obstacle_id]
        value = blr.cbf_lower_bound(
            post, self.prior, self.delta, point, self.checkpoint.net, beta=beta
        )
        try:
            grad = blr.cbf_lower_bound_gradient(
                post, self.prior, self.delta, point, self.checkpoint.net, beta=beta
            )
        except NearSingularNorm:
            self.mean_gradient_fallbacks += 1
            grad = blr.cbf_lower_bound_gradient(
                post, self.prior, self.delta, point, self.checkpoint.net, beta=0.0
            )
        return value, grad

    def value_grid(self, obstacle_id: int, points: np.ndarray) -> np.ndarray:
        post = self._buffers[obstacle_id].posterior
        beta = self._betas[obstacle_id]
        mu, var = blr.predict_batch(post, points, self.checkpoint.net)
        sig2 = post.sigma**2
        q = np.sqrt(np.maximum(var / sig2 - 1.0, 0.0))
        return mu - q * beta


@dataclass(eq=False)
class _GpObstacleState:
    points: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    model: gp.GPModel | None = None


class GpBarrierBackend:
    """Per-obstacle GP refit on selected data; barrier is mean - 2 sigma.

    Selection thresholds the GP predictive variance at each anchor's surface
    point under the model fitted at the previous scan; the model is refitted
    once per ingest (a per-anchor refit would cost a cubic solve per anchor).

    A stationary-kernel GP reverts to its prior away from data: the two-sigma
    lower bound goes negative with a vanishing gradient, which would wedge
    the safety filter the moment an obstacle is detected. The constraint row
    is therefore gated to the region where the model is informative: queries
    whose posterior variance still exceeds ``gate_ratio`` times the signal
    variance carry no constraint, mirroring how undetected obstacles
    contribute no rows.
    """

    name = "gp"

    def __init__(
        self,
        search: gp.GPSearchConfig,
        eta: float,
        capacity: int,
        gate_ratio: float = 0.5,
    ):
        self.search = search
        self._eta = eta
        self._capacity = capacity
        self._gate_ratio = gate_ratio
        self._states: dict[int, _GpObstacleState] = {}
        self.mean_gradient_fallbacks = 0

    def detected_ids(self) -> list[int]:
        return sorted(i for i, s in self._states.items() if s.model is not None)

    def buffer_size(self, obstacle_id: int) -> int:
        state = self._states.get(obstacle_id)
        return len(state.labels) if state is not None else 0

    def ingest(self, obstacle_id: int, dataset: SurfaceDataset) -> None:
        state = self._states.setdefault(obstacle_id, _GpObstacleState())
        n_rows = len(state.labels)
        added = False
        for anchor in dataset.anchor_order():
            group = dataset.rows_for_anchor(int(anchor))
            if n_rows + len(group) > self._capacity:
                logger.warning("gp buffer capacity %d reached", self._capacity)
                break
            if state.model is not None:
                _, var = gp.gp_predict(state.model, dataset.surface_point(int(anchor))[None, :])
                if float(var[0]) + state.model.noise_var <= self._eta:
                    continue
            state.points.extend(group.points.tolist())
            state.labels.extend(group.labels.tolist())
            n_rows += len(group)
            added = True
        if added:
            state.model = gp.gp_fit(
                (np.asarray(state.points), np.asarray(state.labels)), self.search
            )

    def model_for(self, obstacle_id: int) -> gp.GPModel:
        return self._states[obstacle_id].model

    def value_and_gradient(self, obstacle_id: int, point) -> tuple[float, np.ndarray] | None:
        model = self._states[obstacle_id].model
        _, var, lower = gp.gp_predict_bounds(model, point)
        if var > self._gate_ratio * model.signal_var:
            return None
        return lower, gp.gp_lower_bound_gradient(model, point)

    def value_grid(self, obstacle_id: int, points: np.ndarray) -> np.ndarray:
        model = self._states[obstacle_id].model
        mean, var = gp.gp_predict(model, points)
        return mean - 2.0 * np.sqrt(var)
