"""Monte Carlo experiment driver.

Runs seeded trajectory batches through the bound recursion with a
chosen energy allocator, calibrates the initial uniform allocation
against an outage target, and aggregates per-step records into the
distribution summaries the study reports (bound CDF, energy-gain CCDF,
gain-vs-step convergence, outage, operation counts).

Seeding: one master seed derives independent named streams through
SeedSequence spawn keys (anchors, per-trajectory motion, per-trajectory
per-link fading, per-trajectory measurement noise), so adding
trajectories never perturbs existing ones.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .channel import sample_rice_amp2, unit_crbs
from .motion import generate_trajectory
from .optimizers import (
    AllocDecision,
    OptimizerParams,
    SearchGrid,
    apply_decision,
    jte_step,
    latency_map,
    ssw_benchmark_step,
    ssw_step,
)
from .pcrb_core import (
    check_cov,
    initial_covariance,
    kalman_predict,
    make_cv_matrices,
    range_jacobian,
    ranges,
    track_step_state,
)
from .scenario import AnchorSpec, Scenario, with_anchors
from .sensitivity import energy_gradient, revival_gradient

ALGORITHMS = ("none", "jte", "ssw", "ssw-benchmark")

# Stream labels for SeedSequence spawn keys.
_ANCHORS, _MOTION, _FADING, _MEAS = 0, 1, 2, 3


class CalibrationError(RuntimeError):
    """The outage target cannot be met within the allowed energy."""


class NumericalError(RuntimeError):
    """A run produced an invalid covariance or violated energy bounds."""


def stream(master_seed: int, *key) -> np.random.Generator:
    """Named independent random stream derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment run depends on besides the scenario."""

    algorithm: str = "none"
    mode: str = "energy"  # energy | latency
    link: str = "downlink"  # downlink | uplink
    e_init: float = 32.0
    n_traj: int = 50
    master_seed: int = 0
    params: OptimizerParams = field(default_factory=OptimizerParams)
    h_eval: str = "true-state"  # true-state | ekf-predicted
    fading_redraw: str = "per-step"  # per-step | per-trajectory
    symbol_time: float = 1e-6
    # Posterior propagation for jte/ssw decisions: the incremental
    # gain-shift bookkeeping of the reference flow, or a fresh exact
    # update at the new energies (the benchmark always uses exact).
    apply_mode: str = "incremental"
    # Check covariance validity and energy bounds on every step.
    validate: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.mode not in ("energy", "latency"):
            raise ValueError(f"mode must be energy|latency, got {self.mode!r}")
        if self.link not in ("downlink", "uplink"):
            raise ValueError(f"link must be downlink|uplink, got {self.link!r}")
        if self.h_eval not in ("true-state", "ekf-predicted"):
            raise ValueError(f"h_eval must be true-state|ekf-predicted, got {self.h_eval!r}")
        if self.fading_redraw not in ("per-step", "per-trajectory"):
            raise ValueError(
                f"fading_redraw must be per-step|per-trajectory, got {self.fading_redraw!r}"
            )
        if self.apply_mode not in ("incremental", "exact"):
            raise ValueError(f"apply_mode must be incremental|exact, got {self.apply_mode!r}")
        if self.mode == "latency" and abs(self.params.e_ssw_step - round(self.params.e_ssw_step)) > 0:
            raise ValueError("latency mode needs an integer e_ssw_step")

    def effective_params(self) -> OptimizerParams:
        if self.algorithm in ("ssw", "ssw-benchmark"):
            return self.params.for_ssw()
        return self.params


@dataclass
class StepRecord:
    """One row of the per-step log."""

    trajectory_id: int
    k: int
    algorithm: str
    pcrb: float
    pcrb_pred: float
    energies: np.ndarray
    total_energy: float
    energy_gain_pct: float
    mult_count: int


def _baseline_total(n_a: int, cfg: RunConfig) -> float:
    return cfg.e_init if cfg.link == "uplink" else n_a * cfg.e_init


def _decision_gradient(track) -> np.ndarray:
    """Bound-vs-energy coefficients, with muted LoS links priced at their
    zero-energy limit so the allocators can re-enable them."""
    grad = energy_gradient(track.upd.k, track.r_diag, track.energies)
    if np.any(track.energies <= 0):
        grad = grad + revival_gradient(track.p_post, track.h, track.crb_unit, track.energies)
    return grad


def run_trajectory(
    scenario: Scenario, cfg: RunConfig, traj_id: int, grid: SearchGrid | None = None
) -> list[StepRecord]:
    """Track one seeded trajectory and log every step.

    Flow per step: predict, measurement update at the current energies,
    allocation decision, decision folded into the posterior.
    """
    params = cfg.effective_params()
    if cfg.algorithm in ("ssw", "ssw-benchmark") and grid is None:
        builder = SearchGrid.build_uplink if cfg.link == "uplink" else SearchGrid.build
        grid = builder(scenario.n_anchors, params.m_ssw, params.e_ssw_step)

    traj = generate_trajectory(
        scenario, np.random.SeedSequence(cfg.master_seed, spawn_key=(_MOTION, traj_id))
    )
    n_a = scenario.n_anchors
    anchor_xy = scenario.anchor_xy()
    fading_rngs = [stream(cfg.master_seed, _FADING, traj_id, j) for j in range(n_a)]
    meas_rng = stream(cfg.master_seed, _MEAS, traj_id)

    f_mat, q_mat = make_cv_matrices(scenario.t_est, scenario.sigma_w)
    p_post = initial_covariance(scenario.sigma_w)
    energies = np.full(n_a, float(cfg.e_init))
    baseline_total = _baseline_total(n_a, cfg)
    x_est = np.array([scenario.area_side / 2.0, scenario.area_side / 2.0, 0.0, 0.0])

    held_amp2 = None
    if scenario.rice_factor_db is not None and cfg.fading_redraw == "per-trajectory":
        held_amp2 = np.array([sample_rice_amp2(scenario.rice_factor_db, r) for r in fading_rngs])

    records: list[StepRecord] = []
    for k in range(scenario.n_steps):
        true_state = traj.states[k]
        if scenario.rice_factor_db is None:
            amp2 = np.ones(n_a)
        elif held_amp2 is not None:
            amp2 = held_amp2
        else:
            amp2 = np.array([sample_rice_amp2(scenario.rice_factor_db, r) for r in fading_rngs])

        if cfg.h_eval == "ekf-predicted":
            x_pred = f_mat @ x_est if k > 0 else x_est.copy()
            eval_p = x_pred[:2]
        else:
            eval_p = true_state[:2]
        dists = ranges(eval_p, anchor_xy)
        crb_unit = unit_crbs(dists, amp2, scenario)
        h = range_jacobian(eval_p, anchor_xy)

        # The first measurement epoch coincides with the known initial
        # state, so the prior at k = 0 is the initial covariance itself.
        p_prior = kalman_predict(p_post, f_mat, q_mat) if k > 0 else p_post.copy()
        track = track_step_state(k, p_prior, h, crb_unit, energies)

        if cfg.algorithm == "none":
            decision = AllocDecision(de=np.zeros(n_a), predicted_dpcrb=0.0, mult_count=0)
            final = apply_decision(track, decision, cfg.apply_mode)
        elif cfg.algorithm == "jte":
            grad = _decision_gradient(track)
            decision = jte_step(
                track, params, grad, link=cfg.link, integer_steps=cfg.mode == "latency"
            )
            final = apply_decision(track, decision, cfg.apply_mode)
        elif cfg.algorithm == "ssw":
            grad = _decision_gradient(track)
            decision = ssw_step(track, params, grad, grid)
            final = apply_decision(track, decision, cfg.apply_mode)
        else:  # ssw-benchmark
            decision = ssw_benchmark_step(track, params, grid)
            final = apply_decision(track, decision, "exact")

        if cfg.h_eval == "ekf-predicted":
            true_d = ranges(true_state[:2], anchor_xy)
            r_true = unit_crbs(true_d, amp2, scenario)
            with np.errstate(divide="ignore"):
                r_true = np.where(
                    final.energies > 0,
                    r_true / np.where(final.energies > 0, final.energies, 1.0),
                    np.inf,
                )
            noise = np.where(np.isfinite(r_true), np.sqrt(np.where(np.isfinite(r_true), r_true, 0.0)), 0.0)
            z = true_d + noise * meas_rng.standard_normal(n_a)
            innov = z - dists
            act = final.upd.active
            x_est = x_pred + final.upd.k[:, act] @ innov[act] if act.any() else x_pred

        if cfg.validate:
            if not check_cov(final.p_post):
                raise NumericalError(
                    f"invalid covariance at trajectory {traj_id} step {k} ({cfg.algorithm})"
                )
            if final.energies.min() < params.e_min - 1e-9 or final.energies.max() > params.e_max + 1e-9:
                raise NumericalError(
                    f"energy bounds violated at trajectory {traj_id} step {k} ({cfg.algorithm})"
                )

        p_post = final.p_post
        energies = final.energies
        total = energies[0] if cfg.link == "uplink" else float(energies.sum())
        records.append(
            StepRecord(
                trajectory_id=traj_id,
                k=k,
                algorithm=cfg.algorithm,
                pcrb=final.pcrb,
                pcrb_pred=final.pcrb_pred,
                energies=energies.copy(),
                total_energy=float(total),
                energy_gain_pct=100.0 * (baseline_total - total) / baseline_total,
                mult_count=decision.mult_count,
            )
        )
    return records


def run_experiment(
    scenario: Scenario, cfg: RunConfig, anchor_spec: AnchorSpec | None = None
) -> list[StepRecord]:
    """All trajectories of one run, sequential, deterministic order."""
    params = cfg.effective_params()
    grid = None
    if cfg.algorithm in ("ssw", "ssw-benchmark"):
        builder = SearchGrid.build_uplink if cfg.link == "uplink" else SearchGrid.build
        grid = builder(scenario.n_anchors, params.m_ssw, params.e_ssw_step)
    records: list[StepRecord] = []
    for t in range(cfg.n_traj):
        scen_t = scenario
        if anchor_spec is not None and anchor_spec.redraw == "per-trajectory":
            scen_t = with_anchors(scenario, anchor_spec.realize(scenario.area_side, t))
        records.extend(run_trajectory(scen_t, cfg, t, grid))
    return records


def outage_rate(records, pcrb_target: float) -> float:
    """Fraction of steps whose bound exceeds the target."""
    n_over = sum(1 for r in records if r.pcrb > pcrb_target)
    return n_over / len(records) if records else 0.0


def calibrate_einit(
    scenario: Scenario,
    n_traj: int,
    target_outage: float,
    pcrb_target: float = 1.0,
    master_seed: int = 0,
    e_cap: float = 2.0**20,
    resolution: float = 1.0,
) -> float:
    """Smallest uniform per-anchor energy meeting the outage target.

    Runs the fixed-allocation baseline on a doubling grid, then
    bisection-refines to `resolution` energy units (one unit by
    default). Raising the energy never raises any step's bound, so the
    outage is monotone and the search is exact on the grid.
    """
    if not 0.0 < target_outage <= 1.0:
        raise CalibrationError(f"target_outage must be in (0, 1], got {target_outage}")
    if resolution <= 0:
        raise CalibrationError(f"resolution must be positive, got {resolution}")

    def outage(e: float) -> float:
        cfg = RunConfig(algorithm="none", e_init=e, n_traj=n_traj, master_seed=master_seed)
        return outage_rate(run_experiment(scenario, cfg), pcrb_target)

    lo, hi = None, resolution
    while outage(hi) > target_outage:
        lo = hi
        hi *= 2.0
        if hi > e_cap:
            raise CalibrationError(
                f"outage target {target_outage} unattainable below energy {e_cap}"
            )
    if lo is None:
        return hi
    # smallest grid multiple in (lo, hi] meeting the target
    lo_i, hi_i = round(lo / resolution), round(hi / resolution)
    while hi_i - lo_i > 1:
        mid = (lo_i + hi_i) // 2
        if outage(mid * resolution) <= target_outage:
            hi_i = mid
        else:
            lo_i = mid
    return hi_i * resolution


@dataclass
class ExperimentSummary:
    """Aggregated distributions over all (trajectory, step) pairs."""

    pcrb_target: float
    n_records: dict
    pcrb_sorted: dict
    gain_sorted: dict
    gain_vs_step: dict
    outage: dict
    total_mult: dict
    mean_gain: dict

    def algorithms(self):
        return sorted(self.n_records)


def aggregate(records, pcrb_target: float = 1.0) -> ExperimentSummary:
    """Empirical distributions per algorithm.

    The bound CDF and gain CCDF run over all (trajectory, step) pairs;
    the gain-vs-step curve averages across trajectories at fixed step.
    """
    if not records:
        raise ValueError("aggregate needs at least one record")
    by_alg: dict[str, list[StepRecord]] = {}
    for r in records:
        by_alg.setdefault(r.algorithm, []).append(r)

    out = ExperimentSummary(
        pcrb_target=pcrb_target,
        n_records={},
        pcrb_sorted={},
        gain_sorted={},
        gain_vs_step={},
        outage={},
        total_mult={},
        mean_gain={},
    )
    for alg, rows in by_alg.items():
        pcrb = np.array([r.pcrb for r in rows])
        gain = np.array([r.energy_gain_pct for r in rows])
        out.n_records[alg] = len(rows)
        out.pcrb_sorted[alg] = np.sort(pcrb)
        out.gain_sorted[alg] = np.sort(gain)
        out.outage[alg] = float((pcrb > pcrb_target).mean())
        out.total_mult[alg] = int(sum(r.mult_count for r in rows))
        out.mean_gain[alg] = float(gain.mean())
        steps = {}
        for r in rows:
            steps.setdefault(r.k, []).append(r.energy_gain_pct)
        ks = sorted(steps)
        out.gain_vs_step[alg] = np.array([np.mean(steps[k]) for k in ks])
    return out


def ecdf(sorted_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF as (sorted values, P[X <= value])."""
    n = len(sorted_values)
    return sorted_values, np.arange(1, n + 1) / n


def ccdf(sorted_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Empirical complementary CDF as (sorted values, P[X > value])."""
    vals, cdf_p = ecdf(sorted_values)
    return vals, 1.0 - cdf_p


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

CSV_FIXED_COLUMNS = [
    "trajectory_id",
    "k",
    "algorithm",
    "pcrb",
    "pcrb_pred",
]
CSV_TAIL_COLUMNS = ["total_energy", "energy_gain_pct", "mult_count"]


def _csv_header(n_a: int) -> list[str]:
    return CSV_FIXED_COLUMNS + [f"e_{j + 1}" for j in range(n_a)] + CSV_TAIL_COLUMNS


def write_records_csv(records, path, n_anchors: int | None = None):
    """Per-step log as CSV; floats round-trip exactly via repr."""
    if n_anchors is None:
        if not records:
            raise ValueError("need n_anchors to write a header-only csv")
        n_anchors = len(records[0].energies)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_csv_header(n_anchors))
        for r in records:
            w.writerow(
                [r.trajectory_id, r.k, r.algorithm, repr(r.pcrb), repr(r.pcrb_pred)]
                + [repr(float(e)) for e in r.energies]
                + [repr(r.total_energy), repr(r.energy_gain_pct), r.mult_count]
            )


def read_records_csv(path) -> list[StepRecord]:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    e_cols = [i for i, name in enumerate(header) if name.startswith("e_")]
    idx = {name: i for i, name in enumerate(header)}
    records = []
    for row in rows[1:]:
        records.append(
            StepRecord(
                trajectory_id=int(row[idx["trajectory_id"]]),
                k=int(row[idx["k"]]),
                algorithm=row[idx["algorithm"]],
                pcrb=float(row[idx["pcrb"]]),
                pcrb_pred=float(row[idx["pcrb_pred"]]),
                energies=np.array([float(row[i]) for i in e_cols]),
                total_energy=float(row[idx["total_energy"]]),
                energy_gain_pct=float(row[idx["energy_gain_pct"]]),
                mult_count=int(row[idx["mult_count"]]),
            )
        )
    return records


def summary_text(
    summary: ExperimentSummary, scenario: Scenario | None = None, cfg: RunConfig | None = None
) -> str:
    """Structured text summary with full config echo for re-runnability."""
    buf = io.StringIO()
    print(f"toatrack {__version__}", file=buf)
    if scenario is not None:
        print("[scenario]", file=buf)
        for key in (
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
        ):
            print(f"  {key} = {getattr(scenario, key)}", file=buf)
        for a in scenario.anchors:
            print(f"  anchor {a.id} = ({a.x!r}, {a.y!r})", file=buf)
    if cfg is not None:
        print("[run]", file=buf)
        for key in (
            "algorithm",
            "mode",
            "link",
            "e_init",
            "n_traj",
            "master_seed",
            "h_eval",
            "fading_redraw",
            "symbol_time",
        ):
            print(f"  {key} = {getattr(cfg, key)}", file=buf)
        print("[params]", file=buf)
        p = cfg.effective_params()
        for key in (
            "pcrb_target",
            "e_min",
            "e_max",
            "de_max",
            "dpcrb_thr",
            "e_ssw_step",
            "m_ssw",
            "reference",
        ):
            print(f"  {key} = {getattr(p, key)}", file=buf)
    print("[results]", file=buf)
    print(f"  pcrb_target = {summary.pcrb_target}", file=buf)
    for alg in summary.algorithms():
        pcrb = summary.pcrb_sorted[alg]
        gain = summary.gain_sorted[alg]
        print(f"  [{alg}]", file=buf)
        print(f"    records = {summary.n_records[alg]}", file=buf)
        print(f"    outage = {summary.outage[alg]!r}", file=buf)
        print(f"    mean_gain_pct = {summary.mean_gain[alg]!r}", file=buf)
        print(f"    pcrb_median = {float(np.median(pcrb))!r}", file=buf)
        print(f"    pcrb_p99 = {float(np.quantile(pcrb, 0.99))!r}", file=buf)
        print(f"    gain_median = {float(np.median(gain))!r}", file=buf)
        print(f"    total_mult = {summary.total_mult[alg]}", file=buf)
    return buf.getvalue()


def emit(summary, records, outdir, scenario: Scenario = None, cfg: RunConfig = None):
    """Write records.csv and summary.txt into outdir."""
    import os

    os.makedirs(outdir, exist_ok=True)
    n_a = scenario.n_anchors if scenario is not None else None
    try:
        write_records_csv(records, os.path.join(outdir, "records.csv"), n_a)
        with open(os.path.join(outdir, "summary.txt"), "w") as fh:
            fh.write(summary_text(summary, scenario, cfg))
    except OSError as exc:
        raise OSError(f"while writing results under {outdir!r}: {exc}") from exc
    return os.path.join(outdir, "records.csv")
