import logging
import math

import numpy as np
import pytest

from cbfmeta import features
from cbfmeta.blr import Posterior, posterior_update, predict
from cbfmeta.buffers import Buffer, update_buffer
from cbfmeta.environment import EnvironmentSpec, Obstacle
from cbfmeta.features import NetSpec
from cbfmeta.lidar import LidarConfig, cast_scan
from cbfmeta.surface import OffsetConfig, build_offset_dataset


@pytest.fixture()
def scan_dataset(rng):
    env = EnvironmentSpec((Obstacle.ellipse((0.5, 0.5), center=(1.2, 0.0)),))
    scan = cast_scan(env, (0.0, 0.0, 0.0), LidarConfig(), rng)
    return build_offset_dataset(scan, OffsetConfig())


@pytest.fixture()
def net(rng):
    return features.init_params(NetSpec(hidden=(16,), output_dim=8), rng)


@pytest.fixture()
def prior():
    return Posterior.standard_prior(8, sigma=0.001)


class TestUpdateBuffer:
    def test_first_anchor_accepted_on_empty_buffer(self, scan_dataset, prior, net):
        first_anchor = int(scan_dataset.anchor_order()[0])
        prior_variance = predict(prior, scan_dataset.surface_point(first_anchor), net).variance
        buf = Buffer(eta=prior_variance / 2.0)
        updated, _ = update_buffer(buf, scan_dataset, prior, net)
        assert len(updated) > 0
        accepted_anchors = set(updated.rows.anchor_ids.tolist())
        assert len(accepted_anchors) >= 1

    def test_infinite_threshold_accepts_nothing(self, scan_dataset, prior, net):
        buf = Buffer(eta=math.inf)
        updated, posterior = update_buffer(buf, scan_dataset, prior, net)
        assert len(updated) == 0
        assert posterior is prior

    def test_zero_threshold_accepts_everything(self, scan_dataset, prior, net):
        buf = Buffer(eta=0.0)
        updated, _ = update_buffer(buf, scan_dataset, prior, net)
        assert len(updated) == len(scan_dataset)

    def test_rescan_accepts_far_fewer(self, prior, net):
        env = EnvironmentSpec((Obstacle.ellipse((0.5, 0.5), center=(1.2, 0.0)),))
        eta = 2.0 * prior.sigma**2
        buf = Buffer(eta=eta)
        rng = np.random.default_rng(0)
        ds1 = build_offset_dataset(cast_scan(env, (0, 0, 0), LidarConfig(), rng), OffsetConfig())
        buf, _ = update_buffer(buf, ds1, prior, net)
        first_accepted = buf.rows.n_anchors
        ds2 = build_offset_dataset(cast_scan(env, (0, 0, 0), LidarConfig(), rng), OffsetConfig())
        buf2, _ = update_buffer(buf, ds2, prior, net)
        second_accepted = buf2.rows.n_anchors - first_accepted
        assert second_accepted <= 0.1 * first_accepted

    def test_posterior_rederivable_from_rows(self, scan_dataset, prior, net):
        buf = Buffer(eta=2e-6)
        buf, posterior = update_buffer(buf, scan_dataset, prior, net)
        rederived = posterior_update(prior, buf.rows.points, buf.rows.labels, net)
        assert np.abs(rederived.mean - posterior.mean).max() < 1e-9
        assert np.abs(rederived.precision - posterior.precision).max() < 1e-9

    def test_accepted_count_non_increasing_over_repeats(self, prior, net):
        env = EnvironmentSpec((Obstacle.ellipse((0.5, 0.5), center=(1.2, 0.0)),))
        buf = Buffer(eta=2e-6)
        rng = np.random.default_rng(1)
        counts = []
        previous = 0
        for _ in range(3):
            ds = build_offset_dataset(cast_scan(env, (0, 0, 0), LidarConfig(), rng), OffsetConfig())
            buf, _ = update_buffer(buf, ds, prior, net)
            counts.append(buf.rows.n_anchors - previous)
            previous = buf.rows.n_anchors
        assert counts[1] <= counts[0]
        assert counts[2] <= counts[1]

    def test_capacity_cap_skips_and_warns(self, scan_dataset, prior, net, caplog):
        buf = Buffer(eta=0.0, capacity=15)
        with caplog.at_level(logging.WARNING, logger="cbfmeta.buffers"):
            updated, _ = update_buffer(buf, scan_dataset, prior, net)
        assert len(updated) <= 15
        assert updated.capacity_exceeded
        assert any("capacity" in record.message for record in caplog.records)

    def test_dump_csv(self, tmp_path, scan_dataset, prior, net):
        buf, _ = update_buffer(Buffer(eta=0.0), scan_dataset, prior, net)
        path = tmp_path / "buffer.csv"
        buf.dump_csv(path)
        assert path.read_text().startswith("x,y,label,obstacle_id,anchor")

    def test_validation(self):
        with pytest.raises(ValueError):
            Buffer(eta=-1.0)
        with pytest.raises(ValueError):
            Buffer(capacity=0)
