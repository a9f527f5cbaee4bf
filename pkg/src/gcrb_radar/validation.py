"""Oracle and invariant checks shared by the test suite and ``gcrb-radar validate``."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .fim_crb import (
    BoundContext,
    central_differences,
    covariance_derivatives,
    covariance_function,
    default_param_steps,
    fim_intermediate_closed_form,
    fim_intermediate_trace_oracle,
    fim_theta,
    relative_error,
    trace_information,
    validate_chain_rule_expansion,
)
from .geometry import (
    COLOCATION_RADIUS,
    StationLayout,
    TargetState,
    intermediate_params,
    jacobian,
)
from .signal_model import (
    NoiseCorrelation,
    ReflectionCorrelation,
    Scenario,
    build_covariance,
    noise_power_from_scnr,
    scnr_from_noise_power,
)
from .waveform import GmskParams, GmskWaveform, draw_bits

THETA_STEPS = np.array([1e-2, 1e-2, 1e-3, 1e-3])


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool


def _check(name, value, tol) -> CheckResult:
    return CheckResult(name, float(value), float(tol), bool(np.isfinite(value) and value < tol))


def random_target(rng, box=30e3, max_speed=300.0) -> TargetState:
    speed = rng.uniform(0, max_speed)
    ang = rng.uniform(0, 2 * np.pi)
    x, y = rng.uniform(0, box, size=2)
    return TargetState(x, y, speed * np.cos(ang), speed * np.sin(ang))


def random_layout(rng, num_tx, num_rx, target: TargetState, box=30e3, guard=1.0) -> StationLayout:
    """Stations uniform in the box, at least ``guard`` meters from the target."""
    pts = []
    while len(pts) < num_tx + num_rx:
        p = rng.uniform(0, box, size=2)
        if np.hypot(*(p - target.position)) > max(guard, COLOCATION_RADIUS):
            pts.append(p)
    pts = np.array(pts)
    return StationLayout(pts[:num_tx], pts[num_tx:])


def random_scenario(rng, max_tx=3, max_rx=3, num_bits=8, oversampling=4, box=30e3):
    """Small random scenario (K = num_bits * oversampling) plus a bit draw.

    Stations sit at least 1 km from the target so the path gains stay in a
    sensible range; correlation models are drawn from a few regimes.
    """
    m = int(rng.integers(1, max_tx + 1))
    n = int(rng.integers(1, max_rx + 1))
    target = random_target(rng, box, 300.0)
    layout = random_layout(rng, m, n, target, box, guard=1e3)
    gmsk = GmskParams(num_bits=num_bits, oversampling=oversampling, freq_offset=float(rng.choice([300.0, 3000.0])))
    refl = ReflectionCorrelation(decay=float(rng.choice([np.inf, 1.0, 0.1])), variances=tuple(rng.uniform(0.5, 2.0, m * n)))
    noise = NoiseCorrelation(decay=float(rng.choice([np.inf, 1e-4, 1e-5])))
    sc = Scenario(layout, target, gmsk, energies=tuple(rng.uniform(0.5, 2.0, m)), reflection=refl, noise=noise,
                  scnr_db=float(rng.uniform(0, 30)))
    return sc, draw_bits(rng, m, num_bits)


def oracle_equivalence_error(scenario: Scenario, bits) -> float:
    """Closed-form intermediate FIM vs the trace formula with analytic dC."""
    ctx = BoundContext(scenario, np.asarray(bits))
    st = ctx.steering()
    cov = build_covariance(st, ctx.R, ctx.Q)
    closed = fim_intermediate_closed_form(st, ctx.R, cov)
    trace = trace_information(cov, covariance_derivatives(st, ctx.R))
    return relative_error(closed.J, trace)


def finite_difference_oracle_error(scenario: Scenario, bits) -> float:
    """Trace formula with central-difference dC vs analytic dC."""
    ctx = BoundContext(scenario, np.asarray(bits))
    st = ctx.steering()
    cov = build_covariance(st, ctx.R, ctx.Q)
    analytic = trace_information(cov, covariance_derivatives(st, ctx.R))
    cov_at = covariance_function(scenario, bits, ctx.R, ctx.Q)
    fd = fim_intermediate_trace_oracle(cov_at, scenario.params().as_vector(), steps=default_param_steps(scenario))
    return relative_error(fd.J, analytic)


def chain_rule_error(scenario: Scenario, bits, steps=THETA_STEPS) -> float:
    """J(theta) via the Jacobian vs the trace formula with dC/dtheta by central differences."""
    ctx = BoundContext(scenario, np.asarray(bits))
    st = ctx.steering()
    cov = build_covariance(st, ctx.R, ctx.Q)
    with warnings.catch_warnings():
        # single-pair scenarios have a singular J(theta); the comparison is still meaningful
        warnings.simplefilter("ignore", RuntimeWarning)
        res = fim_theta(fim_intermediate_closed_form(st, ctx.R, cov), ctx.jacobian())

    def cov_theta(theta):
        return ctx.covariance(TargetState.from_array(theta)).C

    direct = trace_information(cov, central_differences(cov_theta, scenario.truth.as_array(), steps))
    return relative_error(res.J_theta, direct)


def jacobian_error(layout: StationLayout, target: TargetState, wavelength: float, pos_step=1e-3, vel_step=1e-4) -> float:
    """Max over Jacobian blocks of max|analytic - FD| / max|FD block|."""
    jac = jacobian(layout, target, wavelength).assembled
    steps = [pos_step, pos_step, vel_step, vel_step]

    def params(theta):
        return intermediate_params(layout, TargetState.from_array(theta), wavelength).as_vector()

    fd = central_differences(params, target.as_array(), steps)
    m, n = layout.num_tx, layout.num_rx
    nm = m * n
    groups = [slice(0, nm), slice(nm, 2 * nm), slice(2 * nm, 2 * nm + m), slice(2 * nm + m, None)]
    worst = 0.0
    for rows in (slice(0, 2), slice(2, 4)):
        for g in groups:
            ref = fd[rows, g]
            scale = np.max(np.abs(ref))
            diff = np.max(np.abs(jac[rows, g] - ref))
            if scale == 0:
                if diff > 0:
                    worst = max(worst, np.inf)
                continue
            worst = max(worst, diff / scale)
    return worst


def waveform_errors(params: GmskParams, bits) -> dict[str, float]:
    """Normalization, envelope and derivative errors for every transmitter."""
    out = {"normalization": 0.0, "envelope": 0.0, "derivative": 0.0}
    t = params.sample_times
    h = params.sample_period / 1000
    for m, row in enumerate(np.atleast_2d(bits)):
        wf = GmskWaveform(params, row, m + 1)
        s = wf(t)
        out["normalization"] = max(out["normalization"], abs(np.sum(np.abs(s) ** 2) * params.sample_period - 1.0))
        out["envelope"] = max(out["envelope"], float(np.max(np.abs(np.abs(s) - wf.amplitude))) / wf.amplitude)
        # fourth-order central stencil at step h
        fd = (8 * (wf(t + h) - wf(t - h)) - (wf(t + 2 * h) - wf(t - 2 * h))) / (12 * h)
        d = wf.derivative(t)
        out["derivative"] = max(out["derivative"], float(np.max(np.abs(fd - d)) / np.max(np.abs(d))))
    return out


def normalized_cross_correlation(params: GmskParams, bits) -> float:
    """|<s_1, s_2>| / (||s_1|| ||s_2||) over the sampling instants."""
    t = params.sample_times
    s1 = GmskWaveform(params, bits[0], 1)(t)
    s2 = GmskWaveform(params, bits[1], 2)(t)
    return float(abs(np.vdot(s1, s2)) / (np.linalg.norm(s1) * np.linalg.norm(s2)))


def scaling_invariance_error(scenario: Scenario, bits, factor=4.0) -> float:
    """Scale all energies and the noise power together; J(theta) should not move."""
    ctx = BoundContext(scenario, np.asarray(bits))
    st = ctx.steering()
    scaled_sc = scenario.with_(energies=tuple(factor * e for e in scenario.energies))
    ctx2 = BoundContext(scaled_sc, np.asarray(bits), ctx.R, ctx.Q.scaled(factor))
    st2 = ctx2.steering()
    jac = ctx.jacobian().assembled
    base = jac @ fim_intermediate_closed_form(st, ctx.R, build_covariance(st, ctx.R, ctx.Q)).J @ jac.T
    other = jac @ fim_intermediate_closed_form(st2, ctx2.R, build_covariance(st2, ctx2.R, ctx2.Q)).J @ jac.T
    return relative_error(other, base)


def run_validation_suite(scenario: Scenario, seed: int = 0, num_random: int = 20) -> list[CheckResult]:
    """Oracle suite on ``scenario`` plus ``num_random`` small random scenarios."""
    rng = np.random.default_rng(seed)
    bits = draw_bits(rng, scenario.num_tx, scenario.gmsk.num_bits)
    results = [
        _check("closed_form_vs_trace", oracle_equivalence_error(scenario, bits), 1e-8),
        _check("fd_trace_vs_analytic_trace", finite_difference_oracle_error(scenario, bits), 1e-5),
        _check("chain_rule_vs_direct_fd", chain_rule_error(scenario, bits), 1e-4),
        _check("jacobian_vs_fd", jacobian_error(scenario.layout, scenario.truth, scenario.wavelength), 1e-6),
        _check("scaling_invariance", scaling_invariance_error(scenario, bits), 1e-10),
    ]
    for key, tol in (("normalization", 1e-12), ("envelope", 1e-12), ("derivative", 1e-6)):
        results.append(_check(f"waveform_{key}", waveform_errors(scenario.gmsk, bits)[key], tol))
    sigma2 = noise_power_from_scnr(scenario)
    results.append(_check("scnr_round_trip_db", abs(scnr_from_noise_power(scenario, sigma2) - scenario.scnr_db), 1e-9))
    if scenario.num_tx <= 3 and scenario.num_rx <= 3:
        rep = validate_chain_rule_expansion(scenario, bits)
        results.append(_check("chain_rule_expansion", rep.max_relative_discrepancy, 1e-10))

    worst = {"random_closed_form_vs_trace": 0.0, "random_chain_rule_vs_direct_fd": 0.0, "random_jacobian_vs_fd": 0.0}
    for _ in range(num_random):
        sc, b = random_scenario(rng)
        worst["random_closed_form_vs_trace"] = max(worst["random_closed_form_vs_trace"], oracle_equivalence_error(sc, b))
        worst["random_chain_rule_vs_direct_fd"] = max(worst["random_chain_rule_vs_direct_fd"], chain_rule_error(sc, b))
        worst["random_jacobian_vs_fd"] = max(worst["random_jacobian_vs_fd"], jacobian_error(sc.layout, sc.truth, sc.wavelength))
    tols = {"random_closed_form_vs_trace": 1e-8, "random_chain_rule_vs_direct_fd": 1e-4, "random_jacobian_vs_fd": 1e-6}
    if num_random:
        results += [_check(k, v, tols[k]) for k, v in worst.items()]
    return results


def results_csv(results: list[CheckResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["check", "value", "tolerance", "passed"])
    for r in results:
        w.writerow([r.name, f"{r.value:.6e}", f"{r.tolerance:.1e}", "pass" if r.passed else "FAIL"])
    return buf.getvalue()
