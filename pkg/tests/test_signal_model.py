import numpy as np
import pytest
from hypothesis import given, strategies as st

from gcrb_radar.geometry import IntermediateParams
from gcrb_radar.signal_model import (
    ModelError,
    NoiseCorrelation,
    NoiseCovariance,
    ReflectionCorrelation,
    build_covariance,
    build_reflection_covariance,
    build_steering,
    noise_power_from_scnr,
    path_samples,
    receiver_noise_correlation,
    scenario_noise,
    scenario_reflection,
    scnr_from_noise_power,
    steering_from_params,
    synthesize_observation,
)
from gcrb_radar.waveform import make_waveforms

from conftest import TRUTH, reference_scenario

# independent evaluation for the reference ring (2 tx, 3 rx)
RHO_T12_DECAY_01 = 0.7330692266938343
Q_TILDE12_DECAY_5E6 = 0.9411791468758278


def test_block_diagonal_support(scenario, bits):
    st_ = build_steering(scenario, TRUTH, bits)
    K, M, N = scenario.gmsk.num_samples, 2, 3
    assert st_.S.shape == (N * K, N * M)
    for c in range(N * M):
        n = c // M
        rows = np.zeros(N * K, bool)
        rows[n * K:(n + 1) * K] = True
        for mat in (st_.S, st_.S_tau, st_.S_f, st_.S_t, st_.S_r):
            assert np.all(mat[~rows, c] == 0)
            assert np.any(mat[rows, c] != 0)


def test_column_is_path_samples(scenario, bits):
    st_ = build_steering(scenario, TRUTH, bits)
    K, M = scenario.gmsk.num_samples, 2
    fast = path_samples(scenario.gmsk, scenario.energies, scenario.p0, scenario.params(), make_waveforms(scenario.gmsk, bits))
    np.testing.assert_array_equal(fast, st_.paths)
    n, m = 2, 1
    np.testing.assert_array_equal(st_.S[n * K:(n + 1) * K, n * M + m], st_.paths[n, m])


def _perturbed(ip, group, index, step):
    vec = ip.as_vector().copy()
    nm = ip.num_tx * ip.num_rx
    offset = {"tau": 0, "f": nm, "dt": 2 * nm, "dr": 2 * nm + ip.num_tx}[group]
    vec[offset + index] += step
    return IntermediateParams.from_vector(vec, ip.num_tx, ip.num_rx)


@pytest.mark.parametrize("group,attr,index,step", [
    ("tau", "S_tau", 3, 1e-9),
    ("f", "S_f", 4, 1e-3),
    ("dt", "S_t", 1, 1e-2),
    ("dr", "S_r", 2, 1e-2),
])
def test_derivative_columns_match_finite_differences(scenario, bits, group, attr, index, step):
    g, wfs = scenario.gmsk, make_waveforms(scenario.gmsk, bits)
    ip = scenario.params()

    def S(p):
        return steering_from_params(g, scenario.energies, scenario.p0, p, wfs).S

    fd = (S(_perturbed(ip, group, index, step)) - S(_perturbed(ip, group, index, -step))) / (2 * step)
    ana = getattr(steering_from_params(g, scenario.energies, scenario.p0, ip, wfs), attr)
    # a d_t or d_r step moves every path through that station, so compare summed columns
    if group == "dt":
        cols = [n * 2 + index for n in range(3)]
    elif group == "dr":
        cols = [index * 2 + m for m in range(2)]
    else:
        cols = [index]
    fd_sum = fd.sum(axis=1)
    ana_sum = ana[:, cols].sum(axis=1)
    assert np.max(np.abs(fd_sum - ana_sum)) < 1e-6 * np.max(np.abs(ana_sum))


def test_reflection_covariance_golden():
    sc = reference_scenario(reflection=ReflectionCorrelation(decay=0.1))
    R = scenario_reflection(sc)
    assert R.shape == (6, 6)
    assert R[0, 1] == pytest.approx(RHO_T12_DECAY_01, rel=1e-12)
    np.testing.assert_allclose(np.diag(R), 1.0)
    np.testing.assert_allclose(R, R.T)
    assert np.linalg.eigvalsh(R).min() > 0


def test_reflection_independent_is_diagonal():
    sc = reference_scenario(reflection=ReflectionCorrelation(variances=tuple(np.arange(1.0, 7.0))))
    np.testing.assert_allclose(scenario_reflection(sc), np.diag(np.arange(1.0, 7.0)), rtol=1e-15, atol=0)


def test_noise_correlation_golden():
    sc = reference_scenario(noise=NoiseCorrelation(decay=5e-6))
    qt = receiver_noise_correlation(sc.noise, sc.layout)
    assert qt[0, 1] == pytest.approx(Q_TILDE12_DECAY_5E6, rel=1e-12)
    np.testing.assert_allclose(np.diag(qt), 1.0)


def test_noise_kronecker_structure():
    sc = reference_scenario(noise=NoiseCorrelation(decay=1e-5))
    Q = scenario_noise(sc)
    dense = Q.dense()
    K = sc.gmsk.num_samples
    qt = receiver_noise_correlation(sc.noise, sc.layout)
    np.testing.assert_allclose(dense[:K, K:2 * K], Q.sigma2 * qt[0, 1] * np.eye(K))
    assert Q.logdet() == pytest.approx(np.linalg.slogdet(dense)[1], rel=1e-12)
    x = np.random.default_rng(1).standard_normal((3 * K, 2))
    np.testing.assert_allclose(Q.solve(x), np.linalg.solve(dense, x), rtol=1e-10)
    g = np.random.default_rng(2).standard_normal(3 * K)
    y = Q.sqrt_apply(g)
    # Q^{1/2} here is the Cholesky factor, so Q^{1/2} Q^{1/2}^T = Q
    L = np.column_stack([Q.sqrt_apply(e) for e in np.eye(3 * K)])
    np.testing.assert_allclose(L @ L.T, dense, rtol=1e-10, atol=1e-12 * Q.sigma2)
    np.testing.assert_allclose(y, L @ g)


def test_non_pd_noise_raises():
    with pytest.raises(ModelError, match="noise decay"):
        NoiseCovariance(1.0, np.ones((2, 2)), 4)
    with pytest.raises(ModelError):
        NoiseCovariance(0.0, np.eye(2), 4)


def test_covariance_logdet_matches_eigenvalues(scenario, bits):
    sc = scenario.with_(reflection=ReflectionCorrelation(decay=0.1), noise=NoiseCorrelation(decay=1e-5))
    st_ = build_steering(sc, TRUTH, bits)
    cov = build_covariance(st_, scenario_reflection(sc), scenario_noise(sc))
    w = np.linalg.eigvalsh(cov.C)
    assert cov.logdet == pytest.approx(np.sum(np.log(w)), rel=1e-10)
    r = np.random.default_rng(3).standard_normal(len(w)) + 0j
    assert cov.quad(r) == pytest.approx(np.real(r.conj() @ np.linalg.solve(cov.C, r)), rel=1e-10)


def test_dimension_mismatch(scenario, bits):
    st_ = build_steering(scenario, TRUTH, bits)
    with pytest.raises(ValueError, match="dimension"):
        build_covariance(st_, np.eye(5), scenario_noise(scenario))


def test_sample_covariance_matches_model(small_scenario):
    sc = small_scenario.with_(reflection=ReflectionCorrelation(decay=0.5), noise=NoiseCorrelation(decay=1e-5), scnr_db=5.0)
    bits = np.ones((2, sc.gmsk.num_bits))
    st_ = build_steering(sc, sc.truth, bits)
    R, Q = scenario_reflection(sc), scenario_noise(sc)
    C = build_covariance(st_, R, Q).C
    rng = np.random.default_rng(4)
    n = 20000
    X = np.column_stack([synthesize_observation(st_, R, Q, rng) for _ in range(n)])
    emp = X @ X.conj().T / n
    # entrywise standard error of a sample covariance is sqrt(C_ii C_jj / n)
    scale = np.sqrt(np.outer(np.real(np.diag(C)), np.real(np.diag(C))))
    assert np.max(np.abs(emp - C) / scale) < 6 / np.sqrt(n)


@given(db=st.floats(-20.0, 60.0))
def test_scnr_round_trip(db):
    sc = reference_scenario(scnr_db=db)
    sigma2 = noise_power_from_scnr(sc)
    assert scnr_from_noise_power(sc, sigma2) == pytest.approx(db, abs=1e-9)


def test_noise_power_scales_with_scnr():
    sc = reference_scenario()
    assert noise_power_from_scnr(sc, 10.0) / noise_power_from_scnr(sc, 20.0) == pytest.approx(10.0)


@given(decay=st.floats(1e-3, 10.0), seed=st.integers(0, 1000))
def test_reflection_covariance_is_psd(decay, seed):
    from gcrb_radar.validation import random_layout, random_target
    rng = np.random.default_rng(seed)
    target = random_target(rng)
    layout = random_layout(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)), target, guard=10.0)
    R = build_reflection_covariance(ReflectionCorrelation(decay=decay), layout, target)
    assert np.linalg.eigvalsh(R).min() > -1e-10
