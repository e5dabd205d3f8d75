"""Per-obstacle online buffer with variance-thresholded data selection.

Anchors arriving from a new scan are admitted only when the model is still
uncertain at their surface point: the predictive variance there, under the
posterior of the data accepted so far, must exceed the threshold eta. Each
accepted anchor's whole offset group is appended and the posterior is
refreshed incrementally before the next anchor is judged, so later anchors
see the information the earlier ones added.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .blr import Posterior, posterior_update, predict
from .features import NetParams
from .surface import SurfaceDataset

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY = 5000


@dataclass(eq=False)
class Buffer:
    """Accepted rows plus the posterior snapshot they imply.

    The posterior always equals the batch update of the prior with every
    accepted row (the incremental refreshes are algebraically identical).
    """

    posterior: Posterior | None = None
    rows: SurfaceDataset = field(default_factory=SurfaceDataset)
    eta: float = 2e-6
    capacity: int = DEFAULT_CAPACITY
    capacity_exceeded: bool = False

    def __post_init__(self):
        if self.eta < 0.0:
            raise ValueError("eta must be nonnegative")
        if self.capacity < 1:
            raise ValueError("capacity must be positive")

    def __len__(self) -> int:
        return len(self.rows)

    def dump_csv(self, path) -> None:
        self.rows.to_csv(path)


def update_buffer(
    buf: Buffer,
    new_scan_dataset: SurfaceDataset,
    prior: Posterior,
    net: NetParams,
) -> tuple[Buffer, Posterior]:
    """Admit informative anchors from a scan; return the refreshed buffer.

    Anchors are visited in scan order. An anchor is accepted when the
    predictive variance at its surface point under the buffer's current
    posterior exceeds eta; its full offset group is then appended and the
    posterior updated before the next anchor is evaluated. Once the capacity
    would be exceeded, remaining anchors are skipped with a warning.
    """
    posterior = buf.posterior if buf.posterior is not None else prior
    accepted = [buf.rows] if len(buf.rows) else []
    n_rows = len(buf.rows)
    hit_capacity = buf.capacity_exceeded
    for anchor in new_scan_dataset.anchor_order():
        group = new_scan_dataset.rows_for_anchor(int(anchor))
        if n_rows + len(group) > buf.capacity:
            if not hit_capacity:
                logger.warning(
                    "buffer capacity %d reached; skipping remaining anchors", buf.capacity
                )
            hit_capacity = True
            break
        variance = predict(posterior, new_scan_dataset.surface_point(int(anchor)), net).variance
        if variance > buf.eta:
            posterior = posterior_update(posterior, group.points, group.labels, net)
            accepted.append(group)
            n_rows += len(group)
    rows = SurfaceDataset.concat(accepted) if accepted else buf.rows
    new_buf = replace(buf, posterior=posterior, rows=rows, capacity_exceeded=hit_capacity)
    return new_buf, posterior
