"""First-order response of the position bound to per-anchor energy changes.

The posterior bound depends on the transmit energies only through the
diagonal measurement covariance, whose entries scale as 1/E_j. The
gradient has one closed-form coefficient per anchor,

    g_j = -(K(1,j)^2 + K(2,j)^2) * crb_j / E_j,

always nonpositive: more energy can only tighten the bound. The same
perturbation propagated through the innovation covariance yields an
incremental gain-matrix update that avoids re-inverting S.
"""

from __future__ import annotations

import numpy as np


def energy_gradient(k: np.ndarray, crb_dis: np.ndarray, energies: np.ndarray) -> np.ndarray:
    """Per-anchor derivative of the position bound w.r.t. transmit energy.

    `k` is the gain matrix with zero columns on muted links, `crb_dis`
    the current per-link range variances and `energies` the current
    allocation. Muted links (infinite variance) get a zero coefficient
    and are excluded from any gradient ordering downstream.

    Raises when an active link has zero energy: such a link must be
    muted instead, since the coefficient diverges.
    """
    crb_dis = np.asarray(crb_dis, dtype=float)
    energies = np.asarray(energies, dtype=float)
    active = np.isfinite(crb_dis)
    if np.any(active & (energies <= 0)):
        raise ValueError("active link with zero energy: mute it instead")
    g = np.zeros(len(energies))
    w = k[0, active] ** 2 + k[1, active] ** 2
    g[active] = -w * crb_dis[active] / energies[active]
    return g


def revival_gradient(
    p_post: np.ndarray, h: np.ndarray, crb_unit: np.ndarray, energies: np.ndarray
) -> np.ndarray:
    """One-sided derivative of the bound at zero energy for muted links.

    The closed-form coefficient divides by E_j and is undefined on a
    muted link, but the limit from above exists: adding a first sliver
    of energy to link j changes the bound at rate

        -((P h_j^T)_x^2 + (P h_j^T)_y^2) / crb_unit_j,

    with P the posterior built from the other links. Nonzero only for
    links at zero energy with a line of sight; it lets an allocator
    price re-enabling a muted link instead of writing it off forever.
    """
    crb_unit = np.asarray(crb_unit, dtype=float)
    energies = np.asarray(energies, dtype=float)
    out = np.zeros(len(energies))
    idx = np.flatnonzero((energies <= 0) & np.isfinite(crb_unit))
    for j in idx:
        v = p_post @ h[j]
        out[j] = -(v[0] ** 2 + v[1] ** 2) / crb_unit[j]
    return out


def bound_delta(g: np.ndarray, de: np.ndarray) -> float:
    """First-order bound change for per-anchor energy deltas: g . de."""
    return float(np.dot(g, de))


def bound_delta_uplink(g: np.ndarray, de: float) -> float:
    """Bound change when one shared energy delta reaches every anchor."""
    return float(de * np.sum(g))


def meas_cov_delta(j: int, crb_dis_j: float, de_j: float, e_j: float, n_a: int) -> np.ndarray:
    """First-order innovation-covariance perturbation from one anchor.

    Only entry (j, j) is nonzero: -(crb_j / E_j) * dE_j.
    """
    if e_j <= 0:
        raise ValueError(f"need E_j > 0, got {e_j}")
    ds = np.zeros((n_a, n_a))
    ds[j, j] = -crb_dis_j / e_j * de_j
    return ds


def meas_cov_delta_diag(
    crb_dis: np.ndarray, de: np.ndarray, energies: np.ndarray
) -> np.ndarray:
    """Diagonal of the summed innovation-covariance perturbation.

    Muted links contribute zero regardless of their delta.
    """
    crb_dis = np.asarray(crb_dis, dtype=float)
    de = np.asarray(de, dtype=float)
    energies = np.asarray(energies, dtype=float)
    active = np.isfinite(crb_dis) & (energies > 0)
    out = np.zeros(len(energies))
    out[active] = -crb_dis[active] / energies[active] * de[active]
    return out


def gain_delta(
    p_prior: np.ndarray, h: np.ndarray, s_inv: np.ndarray, ds: np.ndarray
) -> np.ndarray:
    """First-order gain-matrix update for a perturbed innovation covariance.

    -P H^T S^-1 dS S^-1; adding it to the current gain approximates the
    gain recomputed from scratch with the perturbed measurement
    covariance, with an error quadratic in dS.
    """
    return -p_prior @ h.T @ s_inv @ ds @ s_inv
