"""Target motion: random walk on velocity with boundary reflection.

The velocity picks up an independent zero-mean Gaussian step of standard
deviation sigma_w per component each estimation period; the position
advances with the previous velocity (matching the linear state model
used by the tracking recursion) and reflects off the area boundary.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .scenario import Scenario


@dataclass(frozen=True)
class Trajectory:
    """States as an (n_steps, 4) array of [x, y, vx, vy], plus its seed."""

    states: np.ndarray
    seed: object

    def __len__(self):
        return len(self.states)

    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    def speeds(self) -> np.ndarray:
        return np.hypot(self.states[:, 2], self.states[:, 3])


def _reflect(pos: float, vel: float, side: float) -> tuple[float, float]:
    # Mirror about the crossed boundary and negate the velocity component;
    # repeat so corner-cutting and overshoot past both walls stay inside.
    while pos < 0.0 or pos > side:
        if pos < 0.0:
            pos = -pos
        else:
            pos = 2.0 * side - pos
        vel = -vel
    return pos, vel


def motion_step(state, sigma_w: float, noise, t_est: float, area_side: float) -> np.ndarray:
    """Advance one step: position with current velocity, then velocity noise.

    `noise` is a pair of standard normal draws. Boundary crossings are
    mirrored and the corresponding velocity component negated.
    """
    x, y, vx, vy = state
    x = x + vx * t_est
    y = y + vy * t_est
    vx = vx + sigma_w * noise[0]
    vy = vy + sigma_w * noise[1]
    x, vx = _reflect(x, vx, area_side)
    y, vy = _reflect(y, vy, area_side)
    return np.array([x, y, vx, vy])


def generate_trajectory(scenario: Scenario, seed) -> Trajectory:
    """Seeded trajectory starting at rest in the center of the area."""
    rng = np.random.default_rng(seed)
    n = scenario.n_steps
    states = np.empty((n, 4))
    states[0] = (scenario.area_side / 2.0, scenario.area_side / 2.0, 0.0, 0.0)
    noise = rng.standard_normal((n - 1, 2))
    for k in range(1, n):
        states[k] = motion_step(
            states[k - 1], scenario.sigma_w, noise[k - 1], scenario.t_est, scenario.area_side
        )
    return Trajectory(states=states, seed=seed)


def rms_speed(trajectories) -> float:
    """Root mean square speed over all steps of all trajectories."""
    sq = np.concatenate([t.speeds() ** 2 for t in trajectories])
    return float(np.sqrt(sq.mean()))


def write_trajectory_csv(traj: Trajectory, path):
    """Dump a trajectory as CSV with columns step, x, y, vx, vy."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "x", "y", "vx", "vy"])
        for k, s in enumerate(traj.states):
            w.writerow([k, repr(s[0]), repr(s[1]), repr(s[2]), repr(s[3])])
