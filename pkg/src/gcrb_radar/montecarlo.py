"""Seeded RMSE-versus-bound experiments.

Every trial draws its own bits, reflection coefficients and noise from a
substream keyed by (seed, point index, trial index), so results do not
depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .fim_crb import (
    EcrbobResult,
    MismatchPair,
    MismatchStabilityError,
    average_bounds,
    crb_for_bits,
    fim_mismatched,
)
from .geometry import jacobian
from .estimator import EstimationError, SearchSpec, ml_estimate
from .signal_model import (
    ModelError,
    NoiseCorrelation,
    ReflectionCorrelation,
    Scenario,
    build_steering,
    complex_normal,
    scenario_noise,
    scenario_reflection,
    synthesize_observation,
)
from .waveform import GmskParams, draw_bits

log = logging.getLogger(__name__)

SERIES_VARS = ("none", "reflection_decay", "noise_decay", "freq_offset_hz", "mismatch_variance")
COMPONENTS = ("x", "y", "vx", "vy", "position", "velocity")
CSV_HEADER = ("sweep_var", "component", "rmse", "rmse_stderr", "recrbob", "trials", "failures")
FAILURE_FLAG_FRACTION = 0.05
BOUND_STREAM = 1 << 20  # trial index reserved for the bound computation at each point


@dataclass(frozen=True)
class ExperimentPlan:
    """SCNR sweep, optionally repeated for each value of a second (series) variable.

    ``mismatch_variance`` > 0 turns on the signal-estimation error model: the
    estimator's signal matrix is the true one plus CN(0, variance) sample noise.
    """

    scenario: Scenario
    search: SearchSpec
    scnr_db: tuple = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    series_var: str = "none"
    series_values: tuple = ()
    trials: int = 200
    bit_draws: int = 50
    seed: int = 0
    mismatch_variance: float = 0.0
    mismatch_mc_samples: int = 5000
    run_estimator: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1 and self.run_estimator:
            raise ValueError("trials must be >= 1")
        if self.bit_draws < 1:
            raise ValueError("bit_draws must be >= 1")
        if len(self.scnr_db) == 0:
            raise ValueError("the SCNR sweep is empty")
        if self.series_var not in SERIES_VARS:
            raise ValueError(f"series_var must be one of {SERIES_VARS}")
        if self.series_var != "none" and len(self.series_values) == 0:
            raise ValueError(f"series '{self.series_var}' has no values")
        if self.mismatch_variance < 0:
            raise ValueError("mismatch_variance must be >= 0")
        object.__setattr__(self, "scnr_db", tuple(float(v) for v in self.scnr_db))
        object.__setattr__(self, "series_values", tuple(float(v) for v in self.series_values))

    def series(self) -> list[float | None]:
        return [None] if self.series_var == "none" else list(self.series_values)

    def points(self) -> list[tuple[float | None, float]]:
        return [(s, snr) for s in self.series() for snr in self.scnr_db]

    def point_setup(self, series_value) -> tuple[Scenario, float]:
        """Scenario and mismatch variance for one series value."""
        sc, var = self.scenario, self.mismatch_variance
        if self.series_var == "reflection_decay":
            sc = sc.with_(reflection=replace(sc.reflection, decay=series_value))
        elif self.series_var == "noise_decay":
            sc = sc.with_(noise=NoiseCorrelation(decay=series_value))
        elif self.series_var == "freq_offset_hz":
            sc = sc.with_(gmsk=replace(sc.gmsk, freq_offset=series_value))
        elif self.series_var == "mismatch_variance":
            var = series_value
        return sc, var


@dataclass(frozen=True)
class PointResult:
    series_value: float | None
    scnr_db: float
    rmse: np.ndarray  # over COMPONENTS
    rmse_stderr: np.ndarray
    recrbob: np.ndarray
    recrbob_stderr: np.ndarray
    trials: int
    failures: int
    bound_failures: int = 0

    @property
    def flagged(self) -> bool:
        total = self.trials + self.failures
        return total > 0 and self.failures > FAILURE_FLAG_FRACTION * total

    def component(self, name: str) -> tuple[float, float, float]:
        i = COMPONENTS.index(name)
        return float(self.rmse[i]), float(self.rmse_stderr[i]), float(self.recrbob[i])


@dataclass(frozen=True)
class SweepResult:
    series_var: str
    points: tuple

    def series_values(self) -> list:
        out = []
        for p in self.points:
            if p.series_value not in out:
                out.append(p.series_value)
        return out

    def curve(self, series_value=None) -> list[PointResult]:
        return [p for p in self.points if p.series_value == series_value or
                (p.series_value is not None and series_value is not None and np.isclose(p.series_value, series_value))]

    def threshold(self, series_value=None, factor: float = 2.0, components=("x", "y")) -> float | None:
        """Lowest SCNR from which RMSE <= factor * RECRBOB holds at every higher grid point."""
        curve = sorted(self.curve(series_value), key=lambda p: p.scnr_db)
        ok = [all(p.component(c)[0] <= factor * p.component(c)[2] for c in components) for p in curve]
        thr = None
        for p, good in zip(reversed(curve), reversed(ok)):
            if not good:
                break
            thr = p.scnr_db
        return thr

    def rows(self):
        for p in self.points:
            label = f"scnr_db={p.scnr_db:g}"
            if self.series_var != "none":
                label = f"{self.series_var}={p.series_value:g};" + label
            for i, comp in enumerate(COMPONENTS):
                yield (label, comp, _fmt(p.rmse[i]), _fmt(p.rmse_stderr[i]), _fmt(p.recrbob[i]), p.trials, p.failures)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.rows())
        return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if np.isfinite(v) else "nan"


def substream(seed: int, point: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(point, trial)))


def _combine(vals: np.ndarray) -> np.ndarray:
    """Per-component squared quantities (4,) -> COMPONENTS order (6,)."""
    return np.concatenate([vals, [vals[0] + vals[1], vals[2] + vals[3]]])


@dataclass(frozen=True)
class _TrialTask:
    scenario: Scenario
    search: SearchSpec
    seed: int
    point: int
    trial: int
    mismatch_variance: float


def run_trial(task: _TrialTask) -> np.ndarray | None:
    """Squared error per theta component for one trial, or None if the estimator failed."""
    sc = task.scenario
    rng = substream(task.seed, task.point, task.trial)
    bits = draw_bits(rng, sc.num_tx, sc.gmsk.num_bits)
    R, Q = scenario_reflection(sc), scenario_noise(sc)
    steering = build_steering(sc, sc.truth, bits)
    signal_error = None
    if task.mismatch_variance > 0:
        shape = (sc.num_rx, sc.num_tx, sc.gmsk.num_samples)
        signal_error = np.sqrt(task.mismatch_variance) * complex_normal(rng, shape)
    r = synthesize_observation(steering, R, Q, rng)
    try:
        est = ml_estimate(r, sc, bits, task.search, R, Q, signal_error)
    except (EstimationError, ModelError, np.linalg.LinAlgError) as exc:
        log.warning("trial %d at point %d failed: %s", task.trial, task.point, exc)
        return None
    err = est.theta_hat.as_array() - sc.truth.as_array()
    if not np.all(np.isfinite(err)):
        return None
    return err**2


def _map(func, tasks, workers: int):
    if workers <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def matched_bound(sc: Scenario, draws: int, seed: int, point: int) -> EcrbobResult:
    rng = substream(seed, point, BOUND_STREAM)
    R, Q = scenario_reflection(sc), scenario_noise(sc)
    crbs, singular = [], 0
    for _ in range(draws):
        bits = draw_bits(rng, sc.num_tx, sc.gmsk.num_bits)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = crb_for_bits(sc, bits, R, Q)
        if res.reliable:
            crbs.append(res.crb)
        else:
            singular += 1
    return average_bounds(crbs, singular)


def mismatched_bound(sc: Scenario, variance: float, draws: int, mc_samples: int, seed: int, point: int):
    """Average CRB_mis over bit and signal-error draws.

    Returns (EcrbobResult or None, failed draws); None when no draw passed
    the stability condition, in which case the bound is undefined there.
    """
    rng = substream(seed, point, BOUND_STREAM)
    R, Q = scenario_reflection(sc), scenario_noise(sc)
    jac = jacobian(sc.layout, sc.truth, sc.wavelength)
    shape = (sc.num_rx, sc.num_tx, sc.gmsk.num_samples)
    crbs, failures = [], 0
    for _ in range(draws):
        bits = draw_bits(rng, sc.num_tx, sc.gmsk.num_bits)
        signal_error = np.sqrt(variance) * complex_normal(rng, shape)
        assumed = build_steering(sc, sc.truth, bits, signal_error)
        actual = build_steering(sc, sc.truth, bits)
        pair = MismatchPair(assumed, R, Q, actual.S, R, Q)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = fim_mismatched(pair, jac, mc_samples, rng).result
        except MismatchStabilityError:
            failures += 1
            continue
        if res.reliable:
            crbs.append(res.crb)
        else:
            failures += 1
    if not crbs:
        log.warning("point %d: all %d mismatch draws failed the stability condition; bound undefined", point, draws)
        return None, failures
    stack = np.array(crbs)
    se = stack.std(axis=0, ddof=1) / np.sqrt(len(stack)) if len(stack) > 1 else np.zeros_like(stack[0])
    return EcrbobResult(stack.mean(axis=0), se, len(stack), failures), failures


def _bound_components(bound: EcrbobResult) -> tuple[np.ndarray, np.ndarray]:
    diag = np.diag(bound.crb)
    diag_se = np.diag(bound.stderr)
    var = _combine(diag)
    var_se = np.sqrt(_combine(diag_se**2))
    root = np.sqrt(np.clip(var, 0, None))
    return root, np.where(root > 0, var_se / (2 * np.where(root > 0, root, 1)), 0.0)


def run_point(plan: ExperimentPlan, index: int, series_value, scnr_db: float) -> PointResult:
    base, variance = plan.point_setup(series_value)
    sc = base.with_(scnr_db=scnr_db)
    if variance > 0:
        bound, bound_failures = mismatched_bound(sc, variance, plan.bit_draws, plan.mismatch_mc_samples, plan.seed, index)
    else:
        bound, bound_failures = matched_bound(sc, plan.bit_draws, plan.seed, index), 0
    if bound is None:
        recrbob = recrbob_se = np.full(len(COMPONENTS), np.nan)
    else:
        recrbob, recrbob_se = _bound_components(bound)

    if plan.run_estimator:
        tasks = [_TrialTask(sc, plan.search, plan.seed, index, t, variance) for t in range(plan.trials)]
        outcomes = _map(run_trial, tasks, plan.workers)
        sq = np.array([_combine(o) for o in outcomes if o is not None]).reshape(-1, len(COMPONENTS))
        failures = len(outcomes) - len(sq)
    else:
        sq, failures = np.empty((0, len(COMPONENTS))), 0
    n = len(sq)
    if n:
        mse = sq.mean(axis=0)
        mse_se = sq.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(COMPONENTS))
        rmse = np.sqrt(mse)
        rmse_se = np.where(rmse > 0, mse_se / (2 * np.where(rmse > 0, rmse, 1)), 0.0)
    else:
        rmse = rmse_se = np.full(len(COMPONENTS), np.nan)
    res = PointResult(series_value, scnr_db, rmse, rmse_se, recrbob, recrbob_se, n, failures, bound_failures)
    if res.flagged:
        log.warning("point %s=%s scnr=%g dB: %d of %d trials failed", plan.series_var, series_value, scnr_db, failures, n + failures)
    return res


def run_rmse_sweep(plan: ExperimentPlan) -> SweepResult:
    points = []
    for idx, (series_value, snr) in enumerate(plan.points()):
        log.info("point %d: %s=%s scnr=%g dB", idx, plan.series_var, series_value, snr)
        points.append(run_point(plan, idx, series_value, snr))
    return SweepResult(plan.series_var, tuple(points))


def run_correlation_sweep(plan: ExperimentPlan) -> SweepResult:
    if plan.series_var not in ("reflection_decay", "noise_decay"):
        raise ValueError("correlation sweeps vary reflection_decay or noise_decay")
    return run_rmse_sweep(plan)


def run_mismatch_experiment(plan: ExperimentPlan) -> SweepResult:
    if plan.mismatch_variance <= 0 and plan.series_var != "mismatch_variance":
        raise ValueError("mismatch experiment needs mismatch_variance > 0 or a mismatch_variance series")
    return run_rmse_sweep(plan)
