"""Online control execution: dynamics integration, periodic barrier updates,
per-step safety-filtered control, and episode metrics.

The vehicle is a planar unicycle tracked at a point a small distance ahead of
the axle, which makes both position coordinates directly controllable. Every
lidar period the scan is converted to labeled offset data, pushed through the
per-obstacle buffers, and the barrier bounds are refreshed; every step a
quadratic program trades goal progress against the barrier constraints of the
obstacles detected so far.
"""

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .environment import EnvironmentSpec
from .lidar import LidarConfig, cast_scan
from .qp import (
    SOLVED,
    assemble_cbf_clf_qp,
    box_input_polytope,
    solve_qp,
)
from .surface import OffsetConfig, build_offset_dataset


def wrap_angle(theta: float) -> float:
    """Wrap to the half-open interval (-pi, pi]; exact for in-range angles."""
    if -math.pi < theta <= math.pi:
        return theta
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class RobotState:
    """Tracked point coordinates (meters) and heading (radians, wrapped)."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


class UnicycleDynamics:
    """Drift-free unicycle observed at a point ``ell`` ahead of the axle.

    xdot = g(x) u with u = (forward speed, turn rate); the off-axis point
    gives the 2-by-2 top block of g full rank, so barrier constraints on the
    position have relative degree one.
    """

    def __init__(self, ell: float = 0.1):
        if ell <= 0.0:
            raise ValueError("ell must be positive")
        self.ell = ell

    def f(self, state: np.ndarray) -> np.ndarray:
        return np.zeros(3)

    def g(self, state: np.ndarray) -> np.ndarray:
        heading = state[2]
        c, s = math.cos(heading), math.sin(heading)
        return np.array([[c, -self.ell * s], [s, self.ell * c], [0.0, 1.0]])


class QuadraticGoalClf:
    """V(x) = squared distance of the tracked point from the goal."""

    def __init__(self, goal):
        self.goal = np.asarray(goal, dtype=float)

    def value(self, state: np.ndarray) -> float:
        dx = state[0] - self.goal[0]
        dy = state[1] - self.goal[1]
        return dx * dx + dy * dy

    def gradient(self, state: np.ndarray) -> np.ndarray:
        return np.array([2.0 * (state[0] - self.goal[0]), 2.0 * (state[1] - self.goal[1]), 0.0])


def dynamics_step(state: RobotState, u, dt: float, dynamics: UnicycleDynamics) -> RobotState:
    """Classical fourth-order Runge-Kutta step under a constant input."""
    u = np.asarray(u, dtype=float)

    def xdot(x):
        return dynamics.g(x) @ u

    x0 = state.as_array()
    k1 = xdot(x0)
    k2 = xdot(x0 + 0.5 * dt * k1)
    k3 = xdot(x0 + 0.5 * dt * k2)
    k4 = xdot(x0 + dt * k3)
    x1 = x0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return RobotState(x1[0], x1[1], x1[2])


@dataclass(frozen=True)
class EpisodeConfig:
    dt: float = 0.02
    duration: float = 30.0
    delta_lidar: float = 5.0
    goal: tuple[float, float] = (2.5, 0.0)
    start: tuple[float, float, float] = (-2.5, 0.0, 0.0)
    ell: float = 0.1
    delta: float = 0.025
    gamma_c: float = 1.0
    gamma_v: float = 1.0
    slack_penalty: float = 10.0
    v_max: float = 1.0
    omega_max: float = 2.0
    eta: float = 2e-6
    buffer_capacity: int = 5000
    error_sample_period: float = 0.02

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        ratio = self.delta_lidar / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("delta_lidar must be a multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def lidar_stride(self) -> int:
        return int(round(self.delta_lidar / self.dt))

    @property
    def error_stride(self) -> int:
        return max(1, int(round(self.error_sample_period / self.dt)))


_STATUS_CODES = {SOLVED: 0, "infeasible": 1, "iteration_limit": 2}


@dataclass(eq=False)
class EpisodeLog:
    """Per-step record of one control episode plus derived metrics."""

    goal: np.ndarray
    dt: float
    error_stride: int
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    epsilons: np.ndarray
    statuses: np.ndarray
    barrier_values: np.ndarray
    true_distances: np.ndarray
    buffer_sizes: np.ndarray
    detected_step: np.ndarray
    update_steps: list[int]
    aborted: bool = False
    timings: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.times)

    @property
    def n_obstacles(self) -> int:
        return self.true_distances.shape[1]

    @property
    def infeasible_steps(self) -> int:
        return int(np.sum(self.statuses != _STATUS_CODES[SOLVED]))

    @property
    def final_goal_distance(self) -> float:
        if self.n_steps == 0:
            return math.nan
        return float(np.linalg.norm(self.states[-1, :2] - self.goal))

    def violation_steps(self) -> np.ndarray:
        """Steps where a detected obstacle's true signed distance is negative."""
        if self.n_obstacles == 0 or self.n_steps == 0:
            return np.zeros(0, dtype=int)
        steps = np.arange(self.n_steps)[:, None]
        detected = (self.detected_step[None, :] >= 0) & (steps >= self.detected_step[None, :])
        return np.flatnonzero(np.any(detected & (self.true_distances < 0.0), axis=1))

    @property
    def violations(self) -> int:
        return len(self.violation_steps())

    def pre_detection_violation(self) -> bool:
        """True if any obstacle was crossed before its first detection."""
        if self.n_obstacles == 0 or self.n_steps == 0:
            return False
        steps = np.arange(self.n_steps)[:, None]
        undetected = (self.detected_step[None, :] < 0) | (steps < self.detected_step[None, :])
        return bool(np.any(undetected & (self.true_distances < 0.0)))

    def summary(self) -> dict:
        return {
            "cse": cumulative_squared_error(self),
            "violations": self.violations,
            "infeasible_steps": self.infeasible_steps,
            "aborted": self.aborted,
            "final_goal_distance": self.final_goal_distance,
            "pre_detection_violation": self.pre_detection_violation(),
            "n_steps": self.n_steps,
            "detected_step": self.detected_step.tolist(),
            "min_true_distance": (
                float(self.true_distances.min()) if self.true_distances.size else None
            ),
            "wall_clock": self.timings,
        }

    def to_csv(self, path) -> None:
        n_obs = self.n_obstacles
        header = ["t", "qx", "qy", "heading", "v", "omega", "epsilon", "qp_status"]
        header += [f"hb_{i}" for i in range(n_obs)]
        header += [f"tsd_{i}" for i in range(n_obs)]
        header += [f"buf_{i}" for i in range(n_obs)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(self.n_steps):
                row = [
                    repr(float(self.times[k])),
                    repr(float(self.states[k, 0])),
                    repr(float(self.states[k, 1])),
                    repr(float(self.states[k, 2])),
                    repr(float(self.controls[k, 0])),
                    repr(float(self.controls[k, 1])),
                    repr(float(self.epsilons[k])),
                    int(self.statuses[k]),
                ]
                row += [repr(float(v)) for v in self.barrier_values[k]]
                row += [repr(float(v)) for v in self.true_distances[k]]
                row += [int(v) for v in self.buffer_sizes[k]]
                writer.writerow(row)


def replay_states_from_csv(path) -> np.ndarray:
    """Positions (n, 2) parsed back from an episode CSV, bit-exact."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out.append((float(row[1]), float(row[2])))
    return np.asarray(out).reshape(-1, 2)


def cumulative_squared_error(log, positions: np.ndarray | None = None) -> float:
    """Sum of squared goal distances over the error-sampling grid."""
    pos = log.states[:, :2] if positions is None else positions
    pos = pos[:: log.error_stride]
    d2 = (pos[:, 0] - log.goal[0]) ** 2 + (pos[:, 1] - log.goal[1]) ** 2
    return float(np.sum(d2))


def run_episode(
    env: EnvironmentSpec,
    backend,
    cfg: EpisodeConfig,
    lidar_cfg: LidarConfig,
    rng: np.random.Generator,
    offset_cfg: OffsetConfig = OffsetConfig(),
) -> EpisodeLog:
    """Closed-loop episode under the barrier-filtered goal controller.

    Every ``delta_lidar`` seconds: scan, build offset data per obstacle hit,
    update that obstacle's buffer and barrier. Every step: assemble the
    program with one barrier row per detected obstacle (undetected obstacles
    contribute nothing), solve for the input, integrate. Infeasible steps
    apply zero input and are flagged; leaving the world bounds aborts the
    episode with a flagged log.
    """
    state = RobotState(*cfg.start)
    if env.min_signed_distance(state.position()) < 0.0:
        raise ValueError("initial state lies inside an obstacle")
    dynamics = UnicycleDynamics(cfg.ell)
    clf = QuadraticGoalClf(cfg.goal)
    input_rows, input_bounds = box_input_polytope(cfg.v_max, cfg.omega_max)
    control_penalty = np.eye(2)

    n_steps = cfg.n_steps
    n_obs = env.n_obstacles
    times = np.empty(n_steps)
    states = np.empty((n_steps, 3))
    controls = np.zeros((n_steps, 2))
    epsilons = np.zeros(n_steps)
    statuses = np.zeros(n_steps, dtype=int)
    barrier_values = np.full((n_steps, n_obs), np.nan)
    true_distances = np.empty((n_steps, n_obs))
    buffer_sizes = np.zeros((n_steps, n_obs), dtype=int)
    detected_step = np.full(n_obs, -1, dtype=int)
    update_steps: list[int] = []
    timings = {"scan": 0.0, "update": 0.0, "qp": 0.0, "integrate": 0.0}
    aborted = False
    steps_done = 0

    for k in range(n_steps):
        t = k * cfg.dt
        if k % cfg.lidar_stride == 0:
            tic = time.perf_counter()
            scan = cast_scan(env, (state.x, state.y, state.heading), lidar_cfg, rng)
            dataset = build_offset_dataset(scan, offset_cfg)
            timings["scan"] += time.perf_counter() - tic
            tic = time.perf_counter()
            if len(dataset):
                for ob_id in np.unique(dataset.obstacle_ids):
                    backend.ingest(int(ob_id), dataset.for_obstacle(int(ob_id)))
            for ob_id in backend.detected_ids():
                if detected_step[ob_id] < 0:
                    detected_step[ob_id] = k
            timings["update"] += time.perf_counter() - tic
            update_steps.append(k)

        tic = time.perf_counter()
        x_arr = state.as_array()
        barriers = []
        for ob_id in backend.detected_ids():
            result = backend.value_and_gradient(ob_id, state.position())
            if result is None:
                continue
            value, grad = result
            barrier_values[k, ob_id] = value
            barriers.append((value, grad, None))
        problem = assemble_cbf_clf_qp(
            x_arr,
            clf,
            barriers,
            dynamics,
            gamma_c=cfg.gamma_c,
            gamma_v=cfg.gamma_v,
            control_penalty=control_penalty,
            slack_penalty=cfg.slack_penalty,
            input_rows=input_rows,
            input_bounds=input_bounds,
        )
        solution = solve_qp(problem)
        timings["qp"] += time.perf_counter() - tic

        if solution.status == SOLVED:
            u = solution.x[:2]
            epsilons[k] = solution.x[2]
        else:
            u = np.zeros(2)
            epsilons[k] = math.nan
        times[k] = t
        states[k] = x_arr
        controls[k] = u
        statuses[k] = _STATUS_CODES[solution.status]
        true_distances[k] = env.signed_distances(state.position())
        for ob_id in range(n_obs):
            buffer_sizes[k, ob_id] = backend.buffer_size(ob_id)
        steps_done = k + 1

        tic = time.perf_counter()
        state = dynamics_step(state, u, cfg.dt, dynamics)
        timings["integrate"] += time.perf_counter() - tic
        if not env.in_bounds(state.position()):
            aborted = True
            break

    sl = slice(0, steps_done)
    return EpisodeLog(
        goal=np.asarray(cfg.goal, dtype=float),
        dt=cfg.dt,
        error_stride=cfg.error_stride,
        times=times[sl],
        states=states[sl],
        controls=controls[sl],
        epsilons=epsilons[sl],
        statuses=statuses[sl],
        barrier_values=barrier_values[sl],
        true_distances=true_distances[sl],
        buffer_sizes=buffer_sizes[sl],
        detected_step=detected_step,
        update_steps=update_steps,
        aborted=aborted,
        timings=timings,
    )


def sample_barrier_grid(backend, bounds, resolution: int) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Barrier values of each detected obstacle on a regular grid.

    Returns (obstacle_id, points (n, 2), values (n,)) triples for CSV export.
    """
    xmin, ymin, xmax, ymax = bounds
    xs = np.linspace(xmin, xmax, resolution)
    ys = np.linspace(ymin, ymax, resolution)
    gx, gy = np.meshgrid(xs, ys)
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    out = []
    for ob_id in backend.detected_ids():
        out.append((ob_id, points, backend.value_grid(ob_id, points)))
    return out


def write_barrier_grid_csv(path, grids) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "obstacle_id", "h_b"])
        for ob_id, points, values in grids:
            for (x, y), v in zip(points, values):
                writer.writerow([repr(float(x)), repr(float(y)), int(ob_id), repr(float(v))])


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
