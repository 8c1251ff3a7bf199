"""Per-link channel model: pathloss, Rician fading, SNR, and ranging accuracy.

Maps geometry and transmit energy to the variance floor of any unbiased
ToA range estimate on that link. The SNR is anchored to a reference
point (`snr_ref_db` for one symbol at `ref_distance`) instead of an
absolute power budget, so energies stay in per-symbol units throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenario import Scenario


@dataclass(frozen=True)
class LinkGain:
    """SNR per unit energy on one target-anchor link.

    `gamma` folds pathloss, the multipath overlap factor chi and the
    current fading power together: SNR_j = gamma * E_j. A link with no
    line of sight is muted and carries no ranging information.
    """

    gamma: float
    fading_amp2: float = 1.0
    los_present: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.fading_amp2 < 0:
            raise ValueError(f"fading_amp2 must be >= 0, got {self.fading_amp2}")


def pathloss_db(d: float, scenario: Scenario) -> float:
    """Log-distance pathloss alpha + beta*log10(d/d0) in dB."""
    if d <= 0:
        raise ValueError(f"pathloss needs d > 0, got {d}")
    return scenario.pathloss_alpha_db + scenario.pathloss_beta_db * math.log10(
        d / scenario.pathloss_d0
    )


def snr_per_unit_energy(d, fading_amp2, scenario: Scenario):
    """SNR of a single unit of energy at distance d (vectorized over d).

    Calibrated so one symbol at `ref_distance` with unit fading and
    chi = 0 sees `snr_ref_db`.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("snr needs d > 0")
    ref_pl = pathloss_db(scenario.ref_distance, scenario)
    pl = scenario.pathloss_alpha_db + scenario.pathloss_beta_db * np.log10(
        d / scenario.pathloss_d0
    )
    gain_db = scenario.snr_ref_db + ref_pl - pl
    return 10.0 ** (gain_db / 10.0) * (1.0 - scenario.chi) * fading_amp2


def link_snr(e_j: float, d: float, fading_amp2: float, scenario: Scenario) -> float:
    """SNR of an energy-e_j signal at distance d; zero when e_j = 0."""
    if e_j < 0:
        raise ValueError(f"energy must be >= 0, got {e_j}")
    if e_j == 0.0:
        return 0.0
    return float(e_j * snr_per_unit_energy(d, fading_amp2, scenario))


def crb_distance(snr, scenario: Scenario):
    """Variance floor (m^2) of an unbiased ToA range estimate at this SNR.

    c^2 / (8 pi^2 B^2 SNR); snr <= 0 yields inf (the link carries no
    information and its measurement-covariance entry is effectively
    infinite). Vectorized over snr.
    """
    snr = np.asarray(snr, dtype=float)
    scale = scenario.speed_of_light**2 / (8.0 * math.pi**2 * scenario.bandwidth_hz**2)
    with np.errstate(divide="ignore"):
        out = np.where(snr > 0, scale / np.where(snr > 0, snr, 1.0), np.inf)
    if out.ndim == 0:
        return float(out)
    return out


def unit_crbs(dists, fading_amp2, scenario: Scenario, los=None) -> np.ndarray:
    """Per-link range CRB at unit energy; inf on non-LoS links.

    The full measurement covariance diagonal at energies E is simply
    unit_crbs / E, since the CRB is exactly inversely proportional to
    the transmitted energy.
    """
    gamma = snr_per_unit_energy(dists, fading_amp2, scenario)
    out = np.asarray(crb_distance(gamma, scenario), dtype=float)
    if los is not None:
        out = np.where(np.asarray(los, dtype=bool), out, np.inf)
    return out


def sample_rice_amp2(rice_factor_db: float | None, rng: np.random.Generator, size=None):
    """Squared magnitude of a unit-mean-power Rician fading gain.

    With K the linear Rice factor, returns |sqrt(K/(K+1)) + sqrt(1/(K+1)) n|^2
    for n standard complex Gaussian, so the mean power is exactly 1.
    K = 0 degenerates to Rayleigh (exponential power); rice_factor_db None
    means no fading (returns 1).
    """
    if rice_factor_db is None:
        return 1.0 if size is None else np.ones(size)
    k = 10.0 ** (rice_factor_db / 10.0)
    los = math.sqrt(k / (k + 1.0))
    sigma = math.sqrt(1.0 / (2.0 * (k + 1.0)))
    shape = () if size is None else size
    re = los + sigma * rng.standard_normal(shape)
    im = sigma * rng.standard_normal(shape)
    amp2 = re * re + im * im
    if size is None:
        return float(amp2)
    return amp2
