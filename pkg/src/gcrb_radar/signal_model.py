"""Observation model r = S zeta + w and its covariance C = S R S^H + Q.

S is NK x NM, block diagonal with one K x M block per receiver; column
``c = n*M + m`` carries path (n, m).  Complex normals are circular:
CN(0, s2) has variance s2/2 per real and imaginary part.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .geometry import IntermediateParams, StationLayout, TargetState, intermediate_params
from .waveform import GmskParams, GmskWaveform, make_waveforms


class ModelError(RuntimeError):
    """Covariance model is not positive definite."""


@dataclass(frozen=True)
class ReflectionCorrelation:
    """Reflection-coefficient correlation, exp(-decay * angle) per station pair.

    ``decay`` is per radian; ``inf`` means independent reflections.
    ``variances`` holds one sigma^2 per path (length NM) or a scalar.
    """

    decay: float = np.inf
    variances: float | tuple = 1.0

    def path_variances(self, num_paths: int) -> np.ndarray:
        var = np.broadcast_to(np.asarray(self.variances, dtype=float), (num_paths,)).copy()
        if np.any(var < 0):
            raise ValueError("reflection variances must be nonnegative")
        return var


@dataclass(frozen=True)
class NoiseCorrelation:
    """Clutter-plus-noise correlation across receivers, exp(-decay * distance).

    ``decay`` is per meter; ``inf`` means independent receivers.
    """

    decay: float = np.inf


@dataclass(frozen=True)
class Scenario:
    layout: StationLayout
    truth: TargetState
    gmsk: GmskParams = field(default_factory=GmskParams)
    energies: tuple = None
    p0: float = 1.0
    reflection: ReflectionCorrelation = field(default_factory=ReflectionCorrelation)
    noise: NoiseCorrelation = field(default_factory=NoiseCorrelation)
    scnr_db: float = 20.0
    seed: int = 0

    def __post_init__(self):
        e = np.ones(self.layout.num_tx) if self.energies is None else np.asarray(self.energies, dtype=float)
        e = np.broadcast_to(e, (self.layout.num_tx,))
        if np.any(e <= 0):
            raise ValueError("transmit energies must be positive")
        if not np.isfinite(self.scnr_db):
            raise ValueError("scnr_db must be finite")
        object.__setattr__(self, "energies", tuple(float(v) for v in e))

    @property
    def num_tx(self) -> int:
        return self.layout.num_tx

    @property
    def num_rx(self) -> int:
        return self.layout.num_rx

    @property
    def wavelength(self) -> float:
        return self.gmsk.wavelength

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def params(self, target: TargetState | None = None) -> IntermediateParams:
        return intermediate_params(self.layout, target or self.truth, self.wavelength)


@dataclass(frozen=True)
class SteeringSet:
    """S and its derivative columns.

    ``paths`` is the (N, M, K) array of u_nm(k).  S_t column c is the
    derivative of column c with respect to the transmitter distance of its
    path, S_r likewise for the receiver distance.
    """

    S: np.ndarray
    S_tau: np.ndarray
    S_f: np.ndarray
    S_t: np.ndarray
    S_r: np.ndarray
    paths: np.ndarray

    @property
    def num_rx(self) -> int:
        return self.paths.shape[0]

    @property
    def num_tx(self) -> int:
        return self.paths.shape[1]

    @property
    def dt_groups(self) -> list[np.ndarray]:
        """For each receiver n, the NK x M group of d_t-derivative columns."""
        m = self.num_tx
        return [self.S_t[:, n * m:(n + 1) * m] for n in range(self.num_rx)]

    @property
    def dr_groups(self) -> list[np.ndarray]:
        """For each transmitter m, the NK x N group of d_r-derivative columns."""
        m = self.num_tx
        return [self.S_r[:, mm::m] for mm in range(m)]

    def stacked_derivatives(self) -> np.ndarray:
        """[S_tau, S_f, S_t, S_r], NK x 4NM."""
        return np.hstack([self.S_tau, self.S_f, self.S_t, self.S_r])


def _block_diag_columns(blocks: np.ndarray) -> np.ndarray:
    """(N, M, K) path array -> NK x NM block-diagonal matrix."""
    n, m, k = blocks.shape
    out = np.zeros((n * k, n * m), dtype=complex)
    for i in range(n):
        out[i * k:(i + 1) * k, i * m:(i + 1) * m] = blocks[i].T
    return out


def steering_from_params(
    gmsk: GmskParams,
    energies,
    p0: float,
    params: IntermediateParams,
    waveforms: list[GmskWaveform],
    signal_error: np.ndarray | None = None,
) -> SteeringSet:
    """Build S from intermediate parameters treated as free variables.

    ``signal_error`` is an optional (N, M, K) additive perturbation of the
    delayed waveform samples (imperfect reference-signal estimate).
    """
    m_count, n_count = params.num_tx, params.num_rx
    t = gmsk.sample_times
    tau = params.tau.reshape(n_count, m_count)
    f = params.f.reshape(n_count, m_count)
    d_t, d_r = params.d_t, params.d_r
    amp = np.sqrt(np.asarray(energies)[None, :] * p0) / (d_t[None, :] * d_r[:, None])

    wav = np.empty((n_count, m_count, len(t)), dtype=complex)
    dwav = np.empty_like(wav)
    for m in range(m_count):
        s, ds = waveforms[m].sample_with_derivative(t[None, :] - tau[:, m, None])
        wav[:, m], dwav[:, m] = s, ds
    if signal_error is not None:
        wav = wav + signal_error

    doppler = np.exp(2j * np.pi * f[:, :, None] * t)
    u = amp[:, :, None] * wav * doppler
    u_tau = -amp[:, :, None] * dwav * doppler
    u_f = 2j * np.pi * t * u
    u_t = -u / d_t[None, :, None]
    u_r = -u / d_r[:, None, None]
    return SteeringSet(
        S=_block_diag_columns(u),
        S_tau=_block_diag_columns(u_tau),
        S_f=_block_diag_columns(u_f),
        S_t=_block_diag_columns(u_t),
        S_r=_block_diag_columns(u_r),
        paths=u,
    )


def path_samples(gmsk: GmskParams, energies, p0: float, params: IntermediateParams, waveforms, signal_error=None) -> np.ndarray:
    """The (N, M, K) array of u_nm(k) without derivative columns."""
    m_count, n_count = params.num_tx, params.num_rx
    t = gmsk.sample_times
    tau = params.tau.reshape(n_count, m_count)
    f = params.f.reshape(n_count, m_count)
    amp = np.sqrt(np.asarray(energies)[None, :] * p0) / (params.d_t[None, :] * params.d_r[:, None])
    wav = np.empty((n_count, m_count, len(t)), dtype=complex)
    for m in range(m_count):
        wav[:, m] = waveforms[m](t[None, :] - tau[:, m, None])
    if signal_error is not None:
        wav = wav + signal_error
    return amp[:, :, None] * wav * np.exp(2j * np.pi * f[:, :, None] * t)


def build_steering(scenario: Scenario, target: TargetState, bits, signal_error=None) -> SteeringSet:
    waveforms = make_waveforms(scenario.gmsk, bits)
    return steering_from_params(
        scenario.gmsk, scenario.energies, scenario.p0, scenario.params(target), waveforms, signal_error
    )


def _separation_angles(directions: np.ndarray) -> np.ndarray:
    """Pairwise angles in [0, pi] between 2-D direction vectors."""
    dx, dy = directions[:, 0], directions[:, 1]
    cross = dx[:, None] * dy[None, :] - dy[:, None] * dx[None, :]
    dot = dx[:, None] * dx[None, :] + dy[:, None] * dy[None, :]
    return np.abs(np.arctan2(cross, dot))


def _decay_correlation(decay: float, separation: np.ndarray) -> np.ndarray:
    if np.isinf(decay):
        return np.eye(len(separation))
    return np.exp(-decay * separation)


def build_reflection_covariance(model: ReflectionCorrelation, layout: StationLayout, target: TargetState) -> np.ndarray:
    """R = R^r kron R^t scaled to the per-path variances.

    Separation angles are measured at the target between station directions.
    """
    p = target.position
    rho_r = _decay_correlation(model.decay, _separation_angles(layout.rx_positions - p))
    rho_t = _decay_correlation(model.decay, _separation_angles(layout.tx_positions - p))
    sd = np.sqrt(model.path_variances(layout.num_tx * layout.num_rx))
    return np.kron(rho_r, rho_t) * np.outer(sd, sd)


def path_gains(scenario: Scenario, target: TargetState | None = None) -> np.ndarray:
    """E_m P0 / (d_tm^2 d_rn^2) as an (N, M) array."""
    ip = scenario.params(target)
    e = np.asarray(scenario.energies)
    return e[None, :] * scenario.p0 / (ip.d_t[None, :] ** 2 * ip.d_r[:, None] ** 2)


def noise_power_from_scnr(scenario: Scenario, scnr_db: float | None = None) -> float:
    """sigma_w^2 giving the requested SCNR at the true target position."""
    scnr_db = scenario.scnr_db if scnr_db is None else scnr_db
    var = scenario.reflection.path_variances(scenario.num_tx * scenario.num_rx)
    signal = float(np.sum(var * path_gains(scenario).ravel()))
    return signal / (scenario.num_rx * 10.0 ** (scnr_db / 10.0))


def scnr_from_noise_power(scenario: Scenario, sigma2: float) -> float:
    var = scenario.reflection.path_variances(scenario.num_tx * scenario.num_rx)
    signal = float(np.sum(var * path_gains(scenario).ravel()))
    return 10.0 * np.log10(signal / (scenario.num_rx * sigma2))


@dataclass(frozen=True)
class NoiseCovariance:
    """Q = sigma2 * (q_tilde kron I_K), kept in factored form."""

    sigma2: float
    q_tilde: np.ndarray
    num_samples: int
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ModelError("noise power must be positive")
        try:
            chol = np.linalg.cholesky(self.q_tilde)
        except np.linalg.LinAlgError:
            raise ModelError(
                "receiver noise correlation matrix is not positive definite; increase the noise decay rate"
            ) from None
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return len(self.q_tilde) * self.num_samples

    def dense(self) -> np.ndarray:
        return self.sigma2 * np.kron(self.q_tilde, np.eye(self.num_samples))

    def logdet(self) -> float:
        n = len(self.q_tilde)
        return self.num_samples * 2.0 * np.sum(np.log(np.diag(self.chol))) + n * self.num_samples * np.log(self.sigma2)

    def _per_receiver(self, x):
        x = np.asarray(x)
        return x.reshape(len(self.q_tilde), self.num_samples, *x.shape[1:])

    def solve(self, x):
        """Q^{-1} x for x of shape (NK,) or (NK, p)."""
        xr = self._per_receiver(x)
        y = sla.cho_solve((self.chol, True), xr.reshape(len(self.q_tilde), -1))
        return (y / self.sigma2).reshape(np.shape(x))

    def sqrt_apply(self, g):
        """Q^{1/2} g using the Cholesky factor of q_tilde."""
        gr = self._per_receiver(g)
        y = self.chol @ gr.reshape(len(self.q_tilde), -1)
        return (np.sqrt(self.sigma2) * y).reshape(np.shape(g))

    def scaled(self, factor: float) -> "NoiseCovariance":
        return NoiseCovariance(self.sigma2 * factor, self.q_tilde, self.num_samples)


def receiver_noise_correlation(model: NoiseCorrelation, layout: StationLayout) -> np.ndarray:
    rx = layout.rx_positions
    dist = np.hypot(rx[:, None, 0] - rx[None, :, 0], rx[:, None, 1] - rx[None, :, 1])
    return _decay_correlation(model.decay, dist)


def build_noise_covariance(model: NoiseCorrelation, layout: StationLayout, num_samples: int, sigma2: float) -> NoiseCovariance:
    return NoiseCovariance(sigma2, receiver_noise_correlation(model, layout), num_samples)


def scenario_noise(scenario: Scenario, scnr_db: float | None = None) -> NoiseCovariance:
    return build_noise_covariance(
        scenario.noise, scenario.layout, scenario.gmsk.num_samples, noise_power_from_scnr(scenario, scnr_db)
    )


def scenario_reflection(scenario: Scenario) -> np.ndarray:
    """R at the true target; treated as known and fixed when theta varies."""
    return build_reflection_covariance(scenario.reflection, scenario.layout, scenario.truth)


@dataclass(frozen=True)
class CovarianceBundle:
    C: np.ndarray
    chol: np.ndarray  # lower Cholesky factor
    logdet: float

    def solve(self, x):
        return sla.cho_solve((self.chol, True), x)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(len(self.C), dtype=self.C.dtype))

    def quad(self, r) -> float:
        """r^H C^{-1} r."""
        y = sla.solve_triangular(self.chol, r, lower=True)
        return float(np.real(np.vdot(y, y)))


def factor_covariance(C: np.ndarray) -> CovarianceBundle:
    C = 0.5 * (C + C.conj().T)
    try:
        chol = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise ModelError("covariance factorization failed; C is not positive definite") from None
    logdet = 2.0 * float(np.sum(np.log(np.real(np.diag(chol)))))
    return CovarianceBundle(C, chol, logdet)


def build_covariance(steering: SteeringSet | np.ndarray, R: np.ndarray, Q) -> CovarianceBundle:
    S = steering.S if isinstance(steering, SteeringSet) else np.asarray(steering)
    Qd = Q.dense() if isinstance(Q, NoiseCovariance) else np.asarray(Q)
    if S.shape[1] != R.shape[0] or R.shape[0] != R.shape[1] or Qd.shape != (S.shape[0], S.shape[0]):
        raise ValueError(f"dimension mismatch: S {S.shape}, R {R.shape}, Q {Qd.shape}")
    return factor_covariance(S @ R @ S.conj().T + Qd)


def psd_sqrt(R: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Hermitian square root with eigenvalues below tol*max clamped to zero."""
    w, v = np.linalg.eigh(0.5 * (R + R.conj().T))
    cutoff = tol * max(float(np.max(np.abs(w))), 0.0)
    w = np.where(w > cutoff, w, 0.0)
    return (v * np.sqrt(w)) @ v.conj().T


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def synthesize_observation(steering: SteeringSet | np.ndarray, R: np.ndarray, Q, rng: np.random.Generator) -> np.ndarray:
    S = steering.S if isinstance(steering, SteeringSet) else np.asarray(steering)
    zeta = psd_sqrt(R) @ complex_normal(rng, R.shape[0])
    g = complex_normal(rng, S.shape[0])
    if isinstance(Q, NoiseCovariance):
        w = Q.sqrt_apply(g)
    else:
        w = np.linalg.cholesky(Q) @ g
    return S @ zeta + w
