import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gcrb_radar.fim_crb import (
    BoundContext,
    MismatchPair,
    MismatchStabilityError,
    SingularInformationError,
    average_bounds,
    column_to_param_map,
    crb_for_bits,
    ecrbob,
    fim_intermediate_closed_form,
    fim_mismatched,
    fim_report_csv,
    fim_theta,
    invert_information,
    relative_error,
    rx_selector,
    tx_selector,
    validate_chain_rule_expansion,
)
from gcrb_radar.geometry import StationLayout
from gcrb_radar.signal_model import NoiseCorrelation, ReflectionCorrelation, Scenario, build_covariance
from gcrb_radar.validation import (
    chain_rule_error,
    finite_difference_oracle_error,
    oracle_equivalence_error,
    random_scenario,
    scaling_invariance_error,
)
from gcrb_radar.waveform import GmskParams, draw_bits

from conftest import REFERENCE, TRUTH, reference_scenario


def correlated(sc):
    return sc.with_(reflection=ReflectionCorrelation(decay=0.1), noise=NoiseCorrelation(decay=1e-5))


def test_selectors():
    np.testing.assert_array_equal(tx_selector(2, 3), np.tile(np.eye(2), (3, 1)))
    np.testing.assert_array_equal(rx_selector(2, 3), np.kron(np.eye(3), np.ones((2, 1))))
    G = column_to_param_map(2, 3)
    assert G.shape == (4 * 6, 2 * 6 + 5)
    # every column-level derivative feeds exactly one intermediate parameter
    np.testing.assert_array_equal(G.sum(axis=1), 1.0)


def test_closed_form_matches_trace_reference(scenario, bits):
    assert oracle_equivalence_error(correlated(scenario), bits) < 1e-8


def test_fd_trace_matches_analytic(scenario, bits):
    assert finite_difference_oracle_error(correlated(scenario), bits) < 1e-5


def test_chain_rule_matches_direct_fd(scenario, bits):
    assert chain_rule_error(correlated(scenario), bits) < 1e-4


@given(seed=st.integers(0, 2**32 - 1))
def test_closed_form_matches_trace_random(seed):
    sc, b = random_scenario(np.random.default_rng(seed))
    assert oracle_equivalence_error(sc, b) < 1e-8


@given(seed=st.integers(0, 2**32 - 1))
def test_information_symmetric_psd(seed):
    sc, b = random_scenario(np.random.default_rng(seed))
    ctx = BoundContext(sc, b)
    steer = ctx.steering()
    fim = fim_intermediate_closed_form(steer, ctx.R, ctx.covariance())
    np.testing.assert_allclose(fim.J, fim.J.T, atol=1e-12 * np.max(np.abs(fim.J)))
    d = np.sqrt(np.diag(fim.J))
    w = np.linalg.eigvalsh(fim.J / np.outer(d, d))
    assert w.min() > -1e-8


def test_single_pair_is_flagged_singular():
    layout = StationLayout([[22000.0, 10000.0]], [[15000.0, 17000.0]])
    sc = Scenario(layout, TRUTH, GmskParams())
    bits = draw_bits(np.random.default_rng(0), 1, 16)
    with pytest.warns(RuntimeWarning, match="ill-conditioned"):
        res = crb_for_bits(sc, bits)
    assert not res.reliable
    assert res.condition > 1e12
    assert res.null_direction is not None
    np.testing.assert_allclose(np.linalg.norm(res.null_direction), 1.0)
    assert np.linalg.norm(res.J_theta @ res.null_direction) < 1e-10 * np.linalg.norm(res.J_theta)


def test_invert_well_conditioned():
    J = np.diag([4.0, 1.0, 9.0, 16.0])
    res = invert_information(J, "test")
    assert res.reliable
    np.testing.assert_allclose(res.root_crb, [0.5, 1.0, 1 / 3, 0.25])


def test_velocity_information_uses_only_doppler_block(scenario, bits):
    ctx = BoundContext(scenario, bits)
    fim = fim_intermediate_closed_form(ctx.steering(), ctx.R, ctx.covariance())
    jac = ctx.jacobian()
    others = [(a, b) for a in ("tau", "f", "dt", "dr") for b in ("tau", "f", "dt", "dr") if (a, b) != ("f", "f")]
    A = jac.assembled
    full = A @ fim.J @ A.T
    only_ff = fim.with_blocks_zeroed(*others)
    part = A @ only_ff.J @ A.T
    np.testing.assert_allclose(part[2:, 2:], full[2:, 2:], rtol=1e-12)
    assert np.abs(full[:2, 2:]).max() > 0


def test_scaling_invariance(scenario, bits):
    assert scaling_invariance_error(correlated(scenario), bits) < 1e-10


def test_crb_decreases_with_scnr(bits):
    prev = None
    for db in (0.0, 10.0, 20.0, 30.0):
        crb = np.diag(crb_for_bits(reference_scenario(scnr_db=db), bits).crb)
        if prev is not None:
            assert np.all(crb < prev)
        prev = crb


def test_crb_inverse_of_information(scenario, bits):
    res = crb_for_bits(scenario, bits)
    np.testing.assert_allclose(res.crb @ res.J_theta, np.eye(4), atol=1e-8)


def test_ecrbob_single_draw_equals_crb(scenario):
    res = ecrbob(scenario, 1, np.random.default_rng(9))
    bits = draw_bits(np.random.default_rng(9), 2, 16)
    np.testing.assert_allclose(res.crb, crb_for_bits(scenario, bits).crb, rtol=1e-12)
    assert res.draws == 1
    np.testing.assert_array_equal(res.stderr, 0.0)


def test_ecrbob_stderr_shrinks_with_draws(scenario):
    small = ecrbob(scenario, 20, np.random.default_rng(1))
    large = ecrbob(scenario, 80, np.random.default_rng(2))
    ratio = np.diag(large.stderr) / np.diag(small.stderr)
    assert np.all((ratio > 0.3) & (ratio < 0.8))


def test_average_bounds_rejects_many_singular():
    with pytest.raises(SingularInformationError):
        average_bounds([np.eye(4)] * 8, 2)
    res = average_bounds([np.eye(4)] * 9, 1)
    assert res.draws == 9 and res.singular_draws == 1
    with pytest.raises(ValueError):
        ecrbob(reference_scenario(), 0, np.random.default_rng(0))


def test_matched_mismatch_reduces_to_exact(small_scenario):
    sc = correlated(small_scenario)
    bits = draw_bits(np.random.default_rng(3), 2, sc.gmsk.num_bits)
    ctx = BoundContext(sc, bits)
    steer = ctx.steering()
    exact = fim_theta(fim_intermediate_closed_form(steer, ctx.R, ctx.covariance()), ctx.jacobian())
    pair = MismatchPair(steer, ctx.R, ctx.Q, steer.S, ctx.R, ctx.Q)
    mis = fim_mismatched(pair, ctx.jacobian(), 20000, np.random.default_rng(4))
    assert mis.effective_samples == pytest.approx(20000)
    z = np.abs(np.diag(mis.result.J_theta) - np.diag(exact.J_theta)) / np.diag(mis.stderr_theta)
    assert np.all(z < 3)


def test_severe_mismatch_rejected(small_scenario):
    bits = draw_bits(np.random.default_rng(3), 2, small_scenario.gmsk.num_bits)
    ctx = BoundContext(small_scenario, bits)
    steer = ctx.steering()
    pair = MismatchPair(steer, ctx.R, ctx.Q.scaled(3.0), steer.S, ctx.R, ctx.Q)
    with pytest.raises(MismatchStabilityError):
        fim_mismatched(pair, ctx.jacobian(), 100, np.random.default_rng(0))


def test_chain_rule_expansion(scenario, bits):
    rep = validate_chain_rule_expansion(correlated(scenario), bits)
    assert rep.max_relative_discrepancy < 1e-10
    assert rep.lines()


def test_relative_error_is_scale_free():
    b = np.diag([1e6, 1e-6])
    a = b + np.diag([1.0, 1e-12])
    assert relative_error(a, b) == pytest.approx(1e-6)


def test_report_csv(scenario, bits):
    ctx = BoundContext(scenario, bits)
    fim = fim_intermediate_closed_form(ctx.steering(), ctx.R, ctx.covariance())
    text = fim_report_csv(fim_theta(fim, ctx.jacobian()), fim)
    lines = text.splitlines()
    assert lines[0] == "block,i,j,value"
    assert len(lines) == 1 + 32 + sum(v.size for v in fim.blocks.values())
