#!/usr/bin/env python3
"""Adapt a trained checkpoint to one sampled obstacle and dump the barrier
lower bound on a grid, plus the accepted surface data, as CSVs.

Useful for eyeballing how tight the learned bound hugs the true surface:

    python scripts/inspect_barrier_field.py --checkpoint runs/desk/checkpoint.ckpt \
        --seed 4 --out field_dump
"""

import argparse
from pathlib import Path

import numpy as np

from cbfmeta.backends import MetaBarrierBackend
from cbfmeta.control import sample_barrier_grid, write_barrier_grid_csv
from cbfmeta.environment import DistributionParams, sample_environment
from cbfmeta.lidar import LidarConfig, cast_scan
from cbfmeta.meta import MetaCheckpoint, ring_poses
from cbfmeta.surface import OffsetConfig, build_offset_dataset


def run() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="field_dump")
    parser.add_argument("--resolution", type=int, default=80)
    parser.add_argument("--delta", type=float, default=0.025)
    args = parser.parse_args()

    checkpoint = MetaCheckpoint.load(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    env = sample_environment(DistributionParams(), 1, args.seed)
    backend = MetaBarrierBackend(checkpoint, args.delta, eta=2e-6, capacity=5000)
    for pose in ring_poses(env.obstacles[0].reference_point, 2.0, 8):
        scan = cast_scan(env, pose, LidarConfig(), rng)
        dataset = build_offset_dataset(scan, OffsetConfig())
        if len(dataset):
            backend.ingest(0, dataset.for_obstacle(0))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "environment.json").write_text(env.to_json())
    backend._buffers[0].dump_csv(out / "accepted_rows.csv")
    grids = sample_barrier_grid(backend, (-2.5, -2.5, 2.5, 2.5), args.resolution)
    write_barrier_grid_csv(out / "grid_hb.csv", grids)
    print(f"wrote {out}/grid_hb.csv ({args.resolution}x{args.resolution} grid)")


if __name__ == "__main__":
    run()
