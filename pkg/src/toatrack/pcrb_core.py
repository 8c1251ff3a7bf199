"""Recursive posterior error bound for the 2D tracking problem.

Structurally this is the EKF covariance recursion on the 4-state
[x, y, vx, vy] model: predict through the constant-velocity transition,
update against per-anchor range measurements whose variances are the
per-link ranging CRBs. The position bound at each step is the sum of
the two position variances of the posterior covariance.

Muted links (zero energy or no line of sight, signalled by an infinite
measurement variance) are removed from the update by row/column
deletion, which is equivalent to infinite-variance arithmetic but
numerically safe.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

N_X = 4  # state dimension [x, y, vx, vy]

# Condition-number ceiling above which the innovation covariance is
# treated as singular and the update is skipped.
COND_LIMIT = 1e12


class SingularGeometryError(ValueError):
    """Target coincides with an anchor: the range Jacobian is undefined."""


def make_cv_matrices(t_est: float, sigma_w: float) -> tuple[np.ndarray, np.ndarray]:
    """Transition and process-noise matrices of the velocity random walk.

    F couples position to velocity through the step duration; Q injects
    sigma_w^2 into the two velocity variances only.
    """
    if t_est <= 0:
        raise ValueError(f"t_est must be positive, got {t_est}")
    f = np.eye(N_X)
    f[0, 2] = t_est
    f[1, 3] = t_est
    q = np.diag([0.0, 0.0, sigma_w**2, sigma_w**2])
    return f, q


def symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def check_cov(p: np.ndarray, tol: float = 1e-9) -> bool:
    """True when p is symmetric and PSD within tolerance.

    Eigenvalues of the symmetrized matrix must be >= -tol relative to
    max(1, largest eigenvalue).
    """
    if p.shape != (N_X, N_X):
        return False
    scale = max(1.0, float(np.abs(p).max()))
    if np.abs(p - p.T).max() > tol * scale:
        return False
    w = np.linalg.eigvalsh(symmetrize(p))
    return bool(w.min() >= -tol * max(1.0, w.max()))


def kalman_predict(p_post: np.ndarray, f: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Propagate the covariance one step: F P F^T + Q."""
    return symmetrize(f @ p_post @ f.T + q)


def range_jacobian(p_eval, anchor_xy: np.ndarray) -> np.ndarray:
    """Jacobian of the anchor ranges at the evaluation point.

    Row j is [(x - x_j)/d_j, (y - y_j)/d_j, 0, 0]; the position part of
    each row is a unit vector. Raises when the point sits on an anchor.
    """
    p_eval = np.asarray(p_eval, dtype=float)
    diff = p_eval[None, :2] - anchor_xy
    d = np.linalg.norm(diff, axis=1)
    if np.any(d < 1e-12):
        j = int(np.argmin(d))
        raise SingularGeometryError(f"target on top of anchor {j + 1}")
    h = np.zeros((len(anchor_xy), N_X))
    h[:, 0] = diff[:, 0] / d
    h[:, 1] = diff[:, 1] / d
    return h


def ranges(p_eval, anchor_xy: np.ndarray) -> np.ndarray:
    """Distances from the evaluation point to every anchor."""
    p_eval = np.asarray(p_eval, dtype=float)
    return np.linalg.norm(p_eval[None, :2] - anchor_xy, axis=1)


@dataclass(frozen=True)
class UpdateResult:
    """Measurement-update products for one step.

    S and S_inv are restricted to the active (unmuted) links; K keeps
    the full anchor count with zero columns on muted links so that
    per-anchor quantities stay aligned.
    """

    s: np.ndarray
    s_inv: np.ndarray
    k: np.ndarray
    p_post: np.ndarray
    active: np.ndarray
    skipped: bool = False

    @property
    def n_active(self) -> int:
        return int(self.active.sum())


def kalman_update(
    p_prior: np.ndarray, h: np.ndarray, r_diag: np.ndarray, cond_limit: float = COND_LIMIT
) -> UpdateResult:
    """Measurement update with per-link variances r_diag.

    Links with non-finite or non-positive-infinite variance are muted
    (deleted from the update). With every link muted, or a numerically
    singular innovation covariance, the update is skipped and the prior
    is returned unchanged.
    """
    n_a = len(r_diag)
    r_diag = np.asarray(r_diag, dtype=float)
    active = np.isfinite(r_diag)
    if np.any(r_diag[active] <= 0):
        raise ValueError("active links need positive measurement variance")

    k_full = np.zeros((N_X, n_a))
    if not active.any():
        return UpdateResult(
            s=np.zeros((0, 0)),
            s_inv=np.zeros((0, 0)),
            k=k_full,
            p_post=symmetrize(p_prior.copy()),
            active=active,
        )

    h_a = h[active]
    s = h_a @ p_prior @ h_a.T + np.diag(r_diag[active])
    s = symmetrize(s)
    if np.linalg.cond(s) > cond_limit:
        warnings.warn("innovation covariance numerically singular; update skipped")
        return UpdateResult(
            s=s,
            s_inv=np.full_like(s, np.nan),
            k=k_full,
            p_post=symmetrize(p_prior.copy()),
            active=active,
            skipped=True,
        )
    s_inv = np.linalg.inv(s)
    s_inv = symmetrize(s_inv)
    k_a = p_prior @ h_a.T @ s_inv
    p_post = (np.eye(N_X) - k_a @ h_a) @ p_prior
    k_full[:, active] = k_a
    return UpdateResult(
        s=s, s_inv=s_inv, k=k_full, p_post=symmetrize(p_post), active=active
    )


def position_bound(p: np.ndarray) -> float:
    """Sum of the two position variances: the per-step error bound."""
    return float(p[0, 0] + p[1, 1])


def initial_covariance(sigma_w: float) -> np.ndarray:
    """Start-of-track covariance.

    The target provably starts at the known area center at rest, so the
    initial uncertainty is small: unit position variance and one motion
    step's worth of velocity variance.
    """
    return np.diag([1.0, 1.0, sigma_w**2, sigma_w**2])


@dataclass
class TrackState:
    """Everything one tracking step exposes to an energy allocator.

    Captured after the measurement update at the current energies and
    before any allocation decision: `pcrb` is the bound the filter
    would report if the energies stayed as they are, `pcrb_pred` the
    prior (pre-update) bound. `upd` carries the gain and innovation
    covariance the sensitivity coefficients are built from, `crb_unit`
    the per-link range variance at unit energy (inf on non-LoS links).
    """

    k: int
    p_post: np.ndarray
    p_prior: np.ndarray
    h: np.ndarray
    crb_unit: np.ndarray
    r_diag: np.ndarray
    upd: UpdateResult
    energies: np.ndarray
    pcrb: float
    pcrb_pred: float


def track_step_state(
    k: int,
    p_prior: np.ndarray,
    h: np.ndarray,
    crb_unit: np.ndarray,
    energies: np.ndarray,
    cond_limit: float = COND_LIMIT,
) -> TrackState:
    """Run the measurement update at the current energies and snapshot it."""
    with np.errstate(divide="ignore"):
        r_diag = np.where(energies > 0, crb_unit / np.where(energies > 0, energies, 1.0), np.inf)
    upd = kalman_update(p_prior, h, r_diag, cond_limit)
    return TrackState(
        k=k,
        p_post=upd.p_post,
        p_prior=p_prior,
        h=h,
        crb_unit=np.asarray(crb_unit, dtype=float),
        r_diag=r_diag,
        upd=upd,
        energies=np.asarray(energies, dtype=float).copy(),
        pcrb=position_bound(upd.p_post),
        pcrb_pred=position_bound(p_prior),
    )


def ekf_step(
    state_est: np.ndarray,
    p_post: np.ndarray,
    measurements: np.ndarray,
    f: np.ndarray,
    q: np.ndarray,
    anchor_xy: np.ndarray,
    r_diag: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, UpdateResult]:
    """One full extended-filter step on an actual measurement vector.

    Demonstration mode: propagates the state estimate, evaluates the
    Jacobian at the predicted state, and corrects with the innovation.
    Muted links are ignored in the correction.
    """
    x_pred = f @ state_est
    p_prior = kalman_predict(p_post, f, q)
    h = range_jacobian(x_pred[:2], anchor_xy)
    upd = kalman_update(p_prior, h, r_diag)
    innov = np.asarray(measurements, dtype=float) - ranges(x_pred[:2], anchor_xy)
    x_new = x_pred + upd.k[:, upd.active] @ innov[upd.active] if upd.active.any() else x_pred
    return x_new, upd.p_post, upd
