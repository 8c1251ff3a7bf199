"""Hot enumeration kernels: exact and first-order bound scans over energy grids.

The semi-exhaustive allocators score every combination of per-anchor
energy deltas at every tracking step; the exact variant factorizes a
fresh innovation covariance per combination, which dominates the whole
simulation's runtime. Both scans ship in two implementations:

  * numba @njit kernels (parallel over combination blocks), the default;
  * a pure-numpy path, selected with TOATRACK_BACKEND=numpy, used when
    numba is unavailable and as an independent check of the kernels.

Backends produce the same values up to last-digit rounding; selection
logic stays outside the kernels and is shared.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit, prange
except ImportError:  # pragma: no cover - numba is a default dependency
    numba = None

# Measurement variance standing in for a muted link inside the scans.
# Large enough that the link contributes nothing at double precision,
# small enough that the Cholesky factorization stays well behaved.
MUTED_R = 1e30

_BACKEND: str | None = None
_CHUNK = 1024


def available_backends() -> tuple[str, ...]:
    return ("numba", "numpy") if numba is not None else ("numpy",)


def active_backend() -> str:
    """Resolve the kernel backend once: env override, then numba if present."""
    global _BACKEND
    if _BACKEND is None:
        choice = os.environ.get("TOATRACK_BACKEND", "auto").lower()
        if choice not in ("auto", "numba", "numpy"):
            raise ValueError(f"TOATRACK_BACKEND must be auto|numba|numpy, got {choice!r}")
        if choice == "numba" and numba is None:
            raise RuntimeError("TOATRACK_BACKEND=numba but numba is not importable")
        if choice == "auto":
            choice = "numba" if numba is not None else "numpy"
        _BACKEND = choice
    return _BACKEND


def set_backend(name: str | None):
    """Force a backend ('numba'|'numpy') or None to re-resolve from the env."""
    global _BACKEND
    if name is not None and name not in available_backends():
        raise ValueError(f"backend {name!r} not available")
    _BACKEND = name


def delta_grid(n_a: int, m: int, step: float) -> np.ndarray:
    """All (2m+1)^n_a combinations of per-anchor deltas step*{-m..m}.

    Anchor 1 is the fastest-varying digit, so combination index order is
    the lexicographic grid order used for deterministic tie-breaking.
    """
    n_vals = 2 * m + 1
    vals = step * (np.arange(n_vals, dtype=float) - m)
    idx = np.arange(n_vals**n_a, dtype=np.int64)
    grid = np.empty((len(idx), n_a))
    for j in range(n_a):
        grid[:, j] = vals[(idx // n_vals**j) % n_vals]
    return grid


def select_combination(pcrb_i: np.ndarray, sum_de: np.ndarray, target: float, zero_idx: int) -> int:
    """Pick the admissible combination: cheapest within the bound target.

    NaN marks combinations outside the energy box (or with a singular
    update). Among those meeting the bound target the minimum total
    energy delta wins; with no such combination the most accuracy-
    improving one wins. Ties break to the lowest combination index.
    """
    ok = ~np.isnan(pcrb_i)
    if not ok.any():
        return zero_idx
    meets = ok & (pcrb_i <= target)
    if meets.any():
        return int(np.argmin(np.where(meets, sum_de, np.inf)))
    return int(np.argmin(np.where(ok, pcrb_i, np.inf)))


# ---------------------------------------------------------------------------
# exact scan: factorize S = H P H^T + diag(R_i) per combination and score
# pcrb_i = pcrb_prior - |L^-1 g1|^2 - |L^-1 g2|^2, where g1/g2 are the two
# position columns of (H P)^T. NaN flags bounds-infeasible or singular.
# ---------------------------------------------------------------------------


def _exact_scan_numpy(s0, g1, g2, crb_unit, energies, de_grid, e_min, e_max, pcrb_prior):
    n_comb, n_a = de_grid.shape
    out = np.full(n_comb, np.nan)
    e_new = energies[None, :] + de_grid
    feasible = np.all((e_new >= e_min - 1e-9) & (e_new <= e_max + 1e-9), axis=1)
    if not feasible.any():
        return out
    e_f = e_new[feasible]
    with np.errstate(divide="ignore"):
        r = np.where(
            (e_f > 0) & np.isfinite(crb_unit)[None, :],
            crb_unit[None, :] / np.where(e_f > 0, e_f, 1.0),
            MUTED_R,
        )
    s = np.broadcast_to(s0, (len(e_f), n_a, n_a)).copy()
    ii = np.arange(n_a)
    s[:, ii, ii] += r
    rhs = np.stack([g1, g2], axis=1)
    try:
        low = np.linalg.cholesky(s)
        y = np.linalg.solve(low, np.broadcast_to(rhs, (len(e_f), n_a, 2)))
        vals = pcrb_prior - np.einsum("ijk,ijk->i", y, y)
    except np.linalg.LinAlgError:
        vals = np.empty(len(e_f))
        for i in range(len(e_f)):
            si = s0 + np.diag(r[i])
            try:
                li = np.linalg.cholesky(si)
                yi = np.linalg.solve(li, rhs)
                vals[i] = pcrb_prior - float((yi**2).sum())
            except np.linalg.LinAlgError:
                vals[i] = np.nan
    out[feasible] = vals
    return out


def _linear_scan_numpy(pcrb_base, grad, energies, de_grid, e_min, e_max):
    e_new = energies[None, :] + de_grid
    feasible = np.all((e_new >= e_min - 1e-9) & (e_new <= e_max + 1e-9), axis=1)
    out = pcrb_base + de_grid @ grad
    out[~feasible] = np.nan
    return out


if numba is not None:

    @njit(cache=True, inline="always")
    def _chol_quadforms(a, g1, g2, y1, y2):
        # In-place lower Cholesky of a, then g^T a^-1 g = |L^-1 g|^2 for both
        # right-hand sides. Returns (ok, q1, q2).
        n = a.shape[0]
        for j in range(n):
            pivot = a[j, j]
            for t in range(j):
                pivot -= a[j, t] * a[j, t]
            if pivot <= 0.0:
                return False, 0.0, 0.0
            pivot = np.sqrt(pivot)
            a[j, j] = pivot
            for i in range(j + 1, n):
                acc = a[i, j]
                for t in range(j):
                    acc -= a[i, t] * a[j, t]
                a[i, j] = acc / pivot
        q1 = 0.0
        q2 = 0.0
        for i in range(n):
            acc1 = g1[i]
            acc2 = g2[i]
            for t in range(i):
                acc1 -= a[i, t] * y1[t]
                acc2 -= a[i, t] * y2[t]
            y1[i] = acc1 / a[i, i]
            y2[i] = acc2 / a[i, i]
            q1 += y1[i] * y1[i]
            q2 += y2[i] * y2[i]
        return True, q1, q2

    @njit(cache=True, parallel=True)
    def _exact_scan_numba(s0, g1, g2, crb_unit, energies, de_grid, e_min, e_max, pcrb_prior, out):
        n_comb, n_a = de_grid.shape
        n_chunks = (n_comb + _CHUNK - 1) // _CHUNK
        for c in prange(n_chunks):
            a = np.empty((n_a, n_a))
            y1 = np.empty(n_a)
            y2 = np.empty(n_a)
            rr = np.empty(n_a)
            lo = c * _CHUNK
            hi = min(n_comb, lo + _CHUNK)
            for i in range(lo, hi):
                feasible = True
                for j in range(n_a):
                    e_new = energies[j] + de_grid[i, j]
                    if e_new < e_min - 1e-9 or e_new > e_max + 1e-9:
                        feasible = False
                        break
                    if e_new <= 0.0 or not np.isfinite(crb_unit[j]):
                        rr[j] = MUTED_R
                    else:
                        rr[j] = crb_unit[j] / e_new
                if not feasible:
                    out[i] = np.nan
                    continue
                for row in range(n_a):
                    for col in range(row + 1):
                        a[row, col] = s0[row, col]
                    a[row, row] += rr[row]
                ok, q1, q2 = _chol_quadforms(a, g1, g2, y1, y2)
                out[i] = pcrb_prior - q1 - q2 if ok else np.nan

    @njit(cache=True, parallel=True)
    def _linear_scan_numba(pcrb_base, grad, energies, de_grid, e_min, e_max, out):
        n_comb, n_a = de_grid.shape
        for i in prange(n_comb):
            feasible = True
            acc = pcrb_base
            for j in range(n_a):
                e_new = energies[j] + de_grid[i, j]
                if e_new < e_min - 1e-9 or e_new > e_max + 1e-9:
                    feasible = False
                    break
                acc += grad[j] * de_grid[i, j]
            out[i] = acc if feasible else np.nan


def exact_bound_scan(
    s0: np.ndarray,
    g1: np.ndarray,
    g2: np.ndarray,
    crb_unit: np.ndarray,
    energies: np.ndarray,
    de_grid: np.ndarray,
    e_min: float,
    e_max: float,
    pcrb_prior: float,
) -> np.ndarray:
    """Exact posterior bound for every energy-delta combination.

    s0 = H P H^T, g1/g2 the two position columns of (H P)^T, crb_unit
    the per-link range variance at unit energy. Combinations leaving
    the [e_min, e_max] box come back NaN.
    """
    if active_backend() == "numba":
        out = np.empty(len(de_grid))
        _exact_scan_numba(
            np.ascontiguousarray(s0),
            np.ascontiguousarray(g1),
            np.ascontiguousarray(g2),
            np.ascontiguousarray(crb_unit),
            np.ascontiguousarray(energies),
            np.ascontiguousarray(de_grid),
            e_min,
            e_max,
            pcrb_prior,
            out,
        )
        return out
    return _exact_scan_numpy(s0, g1, g2, crb_unit, energies, de_grid, e_min, e_max, pcrb_prior)


def linear_bound_scan(
    pcrb_base: float,
    grad: np.ndarray,
    energies: np.ndarray,
    de_grid: np.ndarray,
    e_min: float,
    e_max: float,
) -> np.ndarray:
    """First-order bound for every combination: pcrb_base + de . grad."""
    if active_backend() == "numba":
        out = np.empty(len(de_grid))
        _linear_scan_numba(
            pcrb_base,
            np.ascontiguousarray(grad),
            np.ascontiguousarray(energies),
            np.ascontiguousarray(de_grid),
            e_min,
            e_max,
            out,
        )
        return out
    return _linear_scan_numpy(pcrb_base, grad, energies, de_grid, e_min, e_max)
