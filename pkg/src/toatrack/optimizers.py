"""Per-step energy allocation: greedy gradient descent and windowed search.

Three allocators share the same contract: given the tracking state
after the measurement update at the current energies, return a vector
of per-anchor energy deltas that keeps the position bound at its target
while minimizing total transmitted energy.

  * jte_step: gradient-ordered greedy pass over the anchors, sizing each
    delta from the first-order bound sensitivity (cost linear in the
    anchor count).
  * ssw_step: semi-exhaustive search over a discrete window of delta
    combinations scored with the first-order model.
  * ssw_benchmark_step: the same search with the exact bound recomputed
    per combination; the validation reference for the first-order model.

The decision baseline is the posterior bound at the current energies
(`track.pcrb`); the exact-recomputation benchmark constrains the same
quantity, which keeps the two searches interchangeable. A `reference`
switch falls back to the prior-trace baseline for comparison runs.

Multiplication counts follow the usual accounting for these searches:
only scalar multiplies inside the allocation decision are charged, not
the filter update that runs regardless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .pcrb_core import (
    N_X,
    TrackState,
    UpdateResult,
    kalman_update,
    position_bound,
    symmetrize,
)
from .sensitivity import bound_delta, meas_cov_delta_diag


@dataclass(frozen=True)
class OptimizerParams:
    """Allocation parameters; defaults follow the reference setup."""

    pcrb_target: float = 1.0
    e_min: float = 0.0
    e_max: float = 256.0
    de_max: float = 5.0
    dpcrb_thr: float = 0.05
    e_ssw_step: float = 5.0
    m_ssw: int = 10
    reference: str = "posterior"  # posterior | prior

    def __post_init__(self):
        if self.dpcrb_thr < 0:
            raise ValueError("dpcrb_thr must be >= 0")
        if self.e_min < 0 or self.e_max <= self.e_min:
            raise ValueError("need 0 <= e_min < e_max")
        if self.reference not in ("posterior", "prior"):
            raise ValueError(f"reference must be posterior|prior, got {self.reference!r}")

    def for_ssw(self) -> "OptimizerParams":
        """Copy with the per-step window tied to the search grid."""
        return replace(self, de_max=self.m_ssw * self.e_ssw_step)


@dataclass(frozen=True)
class AllocDecision:
    """Outcome of one allocation decision."""

    de: np.ndarray
    predicted_dpcrb: float
    mult_count: int


@dataclass(frozen=True)
class SearchGrid:
    """Prebuilt delta-combination grid shared across steps of a run."""

    grid: np.ndarray
    sum_de: np.ndarray
    zero_idx: int
    m: int
    step: float

    @classmethod
    def build(cls, n_a: int, m: int, step: float) -> "SearchGrid":
        grid = kernels.delta_grid(n_a, m, step)
        zero_idx = int(np.argmin(np.abs(grid).sum(axis=1)))
        return cls(grid=grid, sum_de=grid.sum(axis=1), zero_idx=zero_idx, m=m, step=step)

    @classmethod
    def build_uplink(cls, n_a: int, m: int, step: float) -> "SearchGrid":
        # One shared delta replicated on every link; totals count the single
        # transmitter once.
        vals = step * (np.arange(2 * m + 1, dtype=float) - m)
        grid = np.repeat(vals[:, None], n_a, axis=1)
        return cls(grid=grid, sum_de=vals.copy(), zero_idx=m, m=m, step=step)


def _reference_bound(track: TrackState, params: OptimizerParams) -> float:
    return track.pcrb if params.reference == "posterior" else track.pcrb_pred


def jte_step(
    track: TrackState,
    params: OptimizerParams,
    grad: np.ndarray,
    link: str = "downlink",
    integer_steps: bool = False,
) -> AllocDecision:
    """Greedy gradient-ordered reallocation.

    When the bound sits below target, energy is taken first from the
    anchors whose coefficient is smallest in magnitude (least accuracy
    lost per unit energy); when it sits above, energy is added first to
    the anchors with the largest coefficients. Each delta is sized so
    the remaining first-order budget is consumed, capped per step and
    clamped to the energy box. Within-threshold gaps leave the
    allocation untouched.
    """
    n_a = len(track.energies)
    de = np.zeros(n_a)
    ref = _reference_bound(track, params)
    gap = abs(ref - params.pcrb_target)
    if params.dpcrb_thr > 0 and gap < params.dpcrb_thr:
        return AllocDecision(de=de, predicted_dpcrb=0.0, mult_count=0)
    decrease = ref < params.pcrb_target

    if link == "uplink":
        return _jte_uplink(track, params, grad, gap, decrease, integer_steps)

    absg = np.abs(grad)
    candidates = np.flatnonzero(absg > 0.0)
    if len(candidates) == 0:
        return AllocDecision(de=de, predicted_dpcrb=0.0, mult_count=0)
    order = candidates[np.argsort(absg[candidates], kind="stable")]
    if not decrease:
        order = order[::-1]

    residual = gap
    mults = 0
    for n in order:
        qn = absg[n]
        raw = min(params.de_max, residual / qn)  # one division
        if integer_steps:
            raw = math.floor(raw)
        if decrease:
            step = -raw
            if track.energies[n] + step < params.e_min:
                step = params.e_min - track.energies[n]
        else:
            step = raw
            if track.energies[n] + step > params.e_max:
                step = params.e_max - track.energies[n]
        de[n] = step
        residual -= abs(step) * qn  # one multiplication
        mults += 2
        if residual < params.dpcrb_thr:
            break
    return AllocDecision(de=de, predicted_dpcrb=bound_delta(grad, de), mult_count=mults)


def _jte_uplink(track, params, grad, gap, decrease, integer_steps) -> AllocDecision:
    # Single transmitter: one shared delta sized against the summed
    # coefficients, bounds applied to the shared energy level.
    qsum = abs(float(np.sum(grad)))
    n_a = len(track.energies)
    if qsum == 0.0:
        return AllocDecision(de=np.zeros(n_a), predicted_dpcrb=0.0, mult_count=0)
    raw = min(params.de_max, gap / qsum)
    if integer_steps:
        raw = math.floor(raw)
    e0 = float(track.energies[0])
    step = -raw if decrease else raw
    step = min(max(step, params.e_min - e0), params.e_max - e0)
    de = np.full(n_a, step)
    return AllocDecision(de=de, predicted_dpcrb=step * float(np.sum(grad)), mult_count=2)


def ssw_step(
    track: TrackState,
    params: OptimizerParams,
    grad: np.ndarray,
    grid: SearchGrid,
) -> AllocDecision:
    """Semi-exhaustive search scored with the first-order bound model.

    Every delta combination inside the window is scored as
    ref + grad . de; among in-box combinations meeting the target the
    one with minimum total delta wins (ties to the lowest combination
    index). With no combination meeting the target, the most
    accuracy-improving one wins.
    """
    window = grid.m * grid.step
    if abs(params.de_max - window) > 1e-9:
        raise ValueError(
            f"SSW window mismatch: de_max={params.de_max} but grid spans {window}"
        )
    ref = _reference_bound(track, params)
    pcrb_i = kernels.linear_bound_scan(
        ref, grad, track.energies, grid.grid, params.e_min, params.e_max
    )
    sel = kernels.select_combination(pcrb_i, grid.sum_de, params.pcrb_target, grid.zero_idx)
    de = grid.grid[sel].copy()
    n_comb, n_a = grid.grid.shape
    return AllocDecision(
        de=de,
        predicted_dpcrb=bound_delta(grad, de),
        mult_count=n_comb * n_a,
    )


def ssw_benchmark_step(
    track: TrackState,
    params: OptimizerParams,
    grid: SearchGrid,
) -> AllocDecision:
    """The same search with the exact bound recomputed per combination.

    Each combination re-solves the measurement update (fresh innovation
    covariance factorization); the selection rule is identical to
    ssw_step. Combinations with a singular update are infeasible.
    """
    a = track.h @ track.p_prior
    s0 = a @ track.h.T
    pcrb_i = kernels.exact_bound_scan(
        s0,
        np.ascontiguousarray(a[:, 0]),
        np.ascontiguousarray(a[:, 1]),
        track.crb_unit,
        track.energies,
        grid.grid,
        params.e_min,
        params.e_max,
        track.pcrb_pred,
    )
    sel = kernels.select_combination(pcrb_i, grid.sum_de, params.pcrb_target, grid.zero_idx)
    de = grid.grid[sel].copy()
    n_comb, n_a = grid.grid.shape
    per_comb = n_a**3 / 3.0 + N_X**3 + N_X**2 * n_a + N_X * n_a**2
    predicted = float(pcrb_i[sel] - track.pcrb) if np.isfinite(pcrb_i[sel]) else 0.0
    return AllocDecision(
        de=de,
        predicted_dpcrb=predicted,
        mult_count=int(round(n_comb * per_comb)),
    )


def apply_decision(track: TrackState, decision: AllocDecision, mode: str) -> TrackState:
    """Fold an allocation decision into the step's posterior.

    exact: rebuild the measurement update from scratch at the new
    energies (used by the benchmark).

    incremental: shift the gain by the first-order increment and take
    the matching posterior P + K dS K^T, which is algebraically the
    posterior produced by the shifted gain. The stored innovation
    covariance moves by the same first-order diagonal; its inverse is
    left at the pre-decision value since the next step rebuilds it.
    """
    e_new = np.clip(track.energies + decision.de, 0.0, None)
    with np.errstate(divide="ignore"):
        r_new = np.where(e_new > 0, track.crb_unit / np.where(e_new > 0, e_new, 1.0), np.inf)

    if mode == "exact":
        upd = kalman_update(track.p_prior, track.h, r_new)
        return replace(
            track,
            p_post=upd.p_post,
            r_diag=r_new,
            upd=upd,
            energies=e_new,
            pcrb=position_bound(upd.p_post),
        )
    if mode != "incremental":
        raise ValueError(f"mode must be exact|incremental, got {mode!r}")

    if not np.any(decision.de):
        return replace(track, energies=e_new)

    upd = track.upd
    ds_diag = meas_cov_delta_diag(track.r_diag, decision.de, track.energies)
    ds_a = ds_diag[upd.active]
    k_a = upd.k[:, upd.active]
    kds = k_a * ds_a[None, :]
    k_new = upd.k.copy()
    k_new[:, upd.active] = k_a - kds @ upd.s_inv
    # (I - (K + dK) H) P rewritten as P_post + K dS K^T: symmetric, and
    # PSD whenever energies only decrease (dS is then nonnegative).
    p_new = symmetrize(track.p_post + kds @ k_a.T)
    if np.linalg.eigvalsh(p_new).min() < 0.0:
        # Large upward energy steps can overshoot first order and leave
        # an indefinite matrix; fall back to the gain-form covariance
        # (I - K'H) P (I - K'H)^T + K' R K'^T, which is valid for any
        # gain, coincides with the fast path at the optimum, and stays
        # PSD by construction. Links muted by the decision drop out.
        act = np.isfinite(r_new)
        k_act = k_new[:, act]
        h_act = track.h[act]
        imkh = np.eye(N_X) - k_act @ h_act
        p_new = symmetrize(
            imkh @ track.p_prior @ imkh.T + (k_act * r_new[act][None, :]) @ k_act.T
        )
        k_new[:, ~act] = 0.0
    upd_new = UpdateResult(
        s=upd.s + np.diag(ds_a),
        s_inv=upd.s_inv,
        k=k_new,
        p_post=p_new,
        active=upd.active,
        skipped=upd.skipped,
    )
    return replace(
        track,
        p_post=p_new,
        r_diag=r_new,
        upd=upd_new,
        energies=e_new,
        pcrb=position_bound(p_new),
    )


def latency_map(energies: np.ndarray, t_s: float) -> tuple[np.ndarray, float]:
    """Integer symbol counts and total TDM transmission time.

    With the per-symbol energy pinned at its maximum, an energy E_j
    takes ceil(E_j) symbols; M_j = 0 mutes the anchor. The latency is
    the symbol period times the total symbol count, since the anchors
    transmit serially.
    """
    m = np.ceil(np.asarray(energies, dtype=float)).astype(int)
    return m, float(t_s * m.sum())
