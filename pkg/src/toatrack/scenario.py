"""World description: anchor layout, area geometry, channel and timing constants.

A `Scenario` is immutable after construction and safe to share across
trajectory workers. Defaults reproduce the reference simulation setup
(420 m square, 10 MHz bandwidth, 0 dB single-symbol SNR at the square
side, 30 dB/decade pathloss, 1 s estimation period, 532 steps).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
import yaml

SPEED_OF_LIGHT = 299_792_458.0  # m/s


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


@dataclass(frozen=True)
class AnchorPos:
    """Fixed anchor at a known position, ids contiguous from 1."""

    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Scenario:
    """Immutable world description.

    Energies elsewhere in the package are expressed in units of the
    per-symbol energy, so `snr_ref_db` is the single-symbol SNR at
    `ref_distance` and absolute transmit power never appears.
    """

    anchors: tuple[AnchorPos, ...]
    area_side: float = 420.0
    bandwidth_hz: float = 10e6
    snr_ref_db: float = 0.0
    ref_distance: float = 420.0
    pathloss_alpha_db: float = 40.0
    pathloss_beta_db: float = 30.0
    pathloss_d0: float = 1.0
    rice_factor_db: float | None = None
    chi: float = 0.0
    t_est: float = 1.0
    n_steps: int = 532
    sigma_w: float = 0.025
    speed_of_light: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if self.area_side <= 0:
            raise ConfigError(f"area_side must be positive, got {self.area_side}")
        if self.bandwidth_hz <= 0:
            raise ConfigError(f"bandwidth_hz must be positive, got {self.bandwidth_hz}")
        if self.t_est <= 0:
            raise ConfigError(f"t_est must be positive, got {self.t_est}")
        if not 0.0 <= self.chi < 1.0:
            raise ConfigError(f"chi must be in [0, 1), got {self.chi}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if len(self.anchors) < 3:
            raise ConfigError(
                f"2D trilateration needs >= 3 anchors, got {len(self.anchors)}"
            )
        ids = [a.id for a in self.anchors]
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigError(f"anchor ids must be contiguous from 1, got {ids}")
        for a in self.anchors:
            if not (0.0 <= a.x <= self.area_side and 0.0 <= a.y <= self.area_side):
                raise ConfigError(f"anchor {a.id} at ({a.x}, {a.y}) outside area")
        self._warn_degenerate()

    def _warn_degenerate(self):
        xy = self.anchor_xy()
        # Coincident or collinear layouts keep the recursion defined as long
        # as the innovation covariance stays invertible, so only warn.
        d = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() < 1e-9:
            warnings.warn("degenerate anchor layout: coincident anchors")
            return
        rel = xy - xy[0]
        if len(xy) >= 3 and np.linalg.matrix_rank(rel, tol=1e-6) < 2:
            warnings.warn("degenerate anchor layout: collinear anchors")

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    def anchor_xy(self) -> np.ndarray:
        """Anchor coordinates as an (n_anchors, 2) array."""
        return np.array([[a.x, a.y] for a in self.anchors], dtype=float)


def distance(p, anchor: AnchorPos) -> float:
    """Euclidean distance between a 2D point and an anchor."""
    return math.hypot(p[0] - anchor.x, p[1] - anchor.y)


def place_anchors_random(n: int, area_side: float, seed) -> list[AnchorPos]:
    """Place n anchors i.i.d. uniform on the square, deterministic per seed."""
    if n < 3:
        raise ConfigError(f"need at least 3 anchors, got {n}")
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0.0, area_side, size=(n, 2))
    return [AnchorPos(id=j + 1, x=float(xy[j, 0]), y=float(xy[j, 1])) for j in range(n)]


# Configuration file handling. The file is nested key-value YAML holding
# every Scenario field; unknown keys are rejected at every level.

_SCALAR_KEYS = {
    "area_side",
    "bandwidth_hz",
    "snr_ref_db",
    "ref_distance",
    "pathloss_alpha_db",
    "pathloss_beta_db",
    "pathloss_d0",
    "rice_factor_db",
    "chi",
    "t_est",
    "n_steps",
    "sigma_w",
    "speed_of_light",
}

_ANCHOR_KEYS = {"n", "seed", "redraw", "list"}


@dataclass(frozen=True)
class AnchorSpec:
    """How anchors are produced: an explicit list or a seeded random draw."""

    n: int = 4
    seed: int = 1
    redraw: str = "per-experiment"  # or "per-trajectory"
    explicit: tuple[AnchorPos, ...] | None = None

    def realize(self, area_side: float, traj_id: int | None = None) -> tuple[AnchorPos, ...]:
        if self.explicit is not None:
            return self.explicit
        seed = self.seed
        if self.redraw == "per-trajectory" and traj_id is not None:
            seed = (self.seed, traj_id)
        return tuple(place_anchors_random(self.n, area_side, seed))


def _reject_unknown(mapping: dict, allowed: set, where: str):
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {sorted(unknown)}")


def scenario_from_dict(cfg: dict) -> tuple[Scenario, AnchorSpec]:
    """Build (Scenario, AnchorSpec) from a parsed config mapping."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    _reject_unknown(cfg, _SCALAR_KEYS | {"anchors"}, "scenario")

    anchors_cfg = cfg.get("anchors", {})
    if isinstance(anchors_cfg, list):
        anchors_cfg = {"list": anchors_cfg}
    if not isinstance(anchors_cfg, dict):
        raise ConfigError("anchors must be a mapping or a list")
    _reject_unknown(anchors_cfg, _ANCHOR_KEYS, "anchors")
    redraw = anchors_cfg.get("redraw", "per-experiment")
    if redraw not in ("per-experiment", "per-trajectory"):
        raise ConfigError(f"anchors.redraw must be per-experiment|per-trajectory, got {redraw!r}")

    explicit = None
    if "list" in anchors_cfg:
        explicit = []
        for row in anchors_cfg["list"]:
            _reject_unknown(row, {"id", "x", "y"}, "anchor entry")
            explicit.append(AnchorPos(id=int(row["id"]), x=float(row["x"]), y=float(row["y"])))
        explicit = tuple(explicit)
    spec = AnchorSpec(
        n=int(anchors_cfg.get("n", 4)),
        seed=anchors_cfg.get("seed", 1),
        redraw=redraw,
        explicit=explicit,
    )

    kwargs = {}
    for key in _SCALAR_KEYS & set(cfg):
        kwargs[key] = cfg[key]
    if kwargs.get("rice_factor_db") in ("none", "None"):
        kwargs["rice_factor_db"] = None
    if "n_steps" in kwargs:
        kwargs["n_steps"] = int(kwargs["n_steps"])

    area_side = float(kwargs.get("area_side", 420.0))
    scen = Scenario(anchors=spec.realize(area_side), **kwargs)
    return scen, spec


def load_scenario(path) -> tuple[Scenario, AnchorSpec]:
    """Load a scenario config file (YAML)."""
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    return scenario_from_dict(cfg)


def with_anchors(scen: Scenario, anchors) -> Scenario:
    """Copy of the scenario with a different anchor layout."""
    return replace(scen, anchors=tuple(anchors))
