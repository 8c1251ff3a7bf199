"""Energy-aware ToA tracking simulator.

Tracks a moving 2D target from time-of-arrival ranging against fixed
anchors, propagates the recursive posterior error bound (the EKF
covariance recursion), and allocates per-anchor transmit energy so the
bound stays at a target while total energy is minimized.
"""

__version__ = "0.1.0"

from .scenario import AnchorPos, Scenario, distance, place_anchors_random
from .channel import crb_distance, link_snr, pathloss_db, sample_rice_amp2
from .motion import Trajectory, generate_trajectory, motion_step
from .pcrb_core import (
    kalman_predict,
    kalman_update,
    make_cv_matrices,
    position_bound,
    range_jacobian,
)
from .sensitivity import bound_delta, bound_delta_uplink, energy_gradient

__all__ = [
    "AnchorPos",
    "Scenario",
    "distance",
    "place_anchors_random",
    "pathloss_db",
    "link_snr",
    "crb_distance",
    "sample_rice_amp2",
    "Trajectory",
    "motion_step",
    "generate_trajectory",
    "make_cv_matrices",
    "kalman_predict",
    "kalman_update",
    "range_jacobian",
    "position_bound",
    "energy_gradient",
    "bound_delta",
    "bound_delta_uplink",
    "__version__",
]
