"""GMSK signals of opportunity (GSM-like), evaluable at arbitrary times.

The phase of transmitter ``m`` (1-based) is

    phi_m(t) = sum_i c_mi * q(t - i*Tp) + 2*pi*m*df*t,   i = 1..Nc

where ``q`` is the running integral of the Gaussian-filtered frequency pulse
``z``.  ``q`` has a closed form in terms of the normal CDF, so both the
waveform and its time derivative are exact and mutually consistent, which
the finite-difference checks downstream rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import ndtr

from .geometry import C_LIGHT

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class GmskParams:
    bit_duration: float = 577e-6
    bt_product: float = 0.3
    num_bits: int = 16
    freq_offset: float = 300.0
    carrier_hz: float = 900e6
    oversampling: int = 4

    def __post_init__(self):
        if self.bit_duration <= 0 or self.bt_product <= 0:
            raise ValueError("bit_duration and bt_product must be positive")
        if self.num_bits < 1 or self.oversampling < 1:
            raise ValueError("num_bits and oversampling must be >= 1")
        if self.carrier_hz <= 0:
            raise ValueError("carrier_hz must be positive")

    @property
    def sample_period(self) -> float:
        return self.bit_duration / self.oversampling

    @property
    def num_samples(self) -> int:
        return self.num_bits * self.oversampling

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.carrier_hz

    @property
    def sample_times(self) -> np.ndarray:
        """k * Ts for k = 1..K."""
        return np.arange(1, self.num_samples + 1) * self.sample_period


def _gauss_tail_integral(x):
    # H(x) = x*Phi(x) + phi(x), an antiderivative of the normal CDF
    return x * ndtr(x) + _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class PhasePulse:
    """Frequency pulse ``z`` and phase pulse ``q`` for one bit of GMSK.

    ``z`` is nonzero (above ~1e-20) only on ``[-L*Tp, (L+1)*Tp]``; outside that
    window ``q`` is held at exactly 0 or pi/2.
    """

    bit_duration: float
    bt_product: float
    support: int = 4

    @property
    def bandwidth_scale(self) -> float:
        # argument scale of the Gaussian tail integrals
        return 2 * np.pi * (self.bt_product / self.bit_duration) / np.sqrt(np.log(2.0))

    @property
    def window(self) -> tuple[float, float]:
        return -self.support * self.bit_duration, (self.support + 1) * self.bit_duration

    def z(self, t):
        t = np.asarray(t, dtype=float)
        b, tp = self.bandwidth_scale, self.bit_duration
        # Q(b(t - Tp)) - Q(bt) written with the CDF
        val = (np.pi / (2 * tp)) * (ndtr(b * t) - ndtr(b * (t - tp)))
        lo, hi = self.window
        return np.where((t < lo) | (t > hi), 0.0, val)

    def q(self, t):
        t = np.asarray(t, dtype=float)
        b, tp = self.bandwidth_scale, self.bit_duration
        val = (np.pi / (2 * tp * b)) * (_gauss_tail_integral(b * t) - _gauss_tail_integral(b * (t - tp)))
        lo, hi = self.window
        return np.where(t < lo, 0.0, np.where(t > hi, np.pi / 2, val))


    def q_train(self, t, starts):
        """q(t - starts) for starts spaced by one bit duration.

        Neighbouring bits share tail-integral terms, so each is evaluated once.
        """
        t = np.asarray(t, dtype=float)
        b, tp = self.bandwidth_scale, self.bit_duration
        u = t[..., None] - np.append(starts, starts[-1] + tp)
        h = _gauss_tail_integral(b * u)
        val = (np.pi / (2 * tp * b)) * (h[..., :-1] - h[..., 1:])
        u = u[..., :-1]
        lo, hi = self.window
        return np.where(u < lo, 0.0, np.where(u > hi, np.pi / 2, val))


def build_phase_pulse(params: GmskParams, support: int = 4) -> PhasePulse:
    return PhasePulse(params.bit_duration, params.bt_product, support)


def draw_bits(rng: np.random.Generator, num_tx: int, num_bits: int) -> np.ndarray:
    """I.i.d. equiprobable +/-1 bits, shape (num_tx, num_bits)."""
    return rng.choice(np.array([-1.0, 1.0]), size=(num_tx, num_bits))


def _check_bits(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=float)
    if not np.all(np.abs(bits) == 1.0):
        raise ValueError("bit sequences must contain only -1 and +1")
    return bits


@dataclass(frozen=True)
class GmskWaveform:
    """Normalized GMSK waveform of one transmitter.

    ``tx_index`` is 1-based and sets the carrier offset ``tx_index * df``.
    """

    params: GmskParams
    bits: np.ndarray
    tx_index: int
    pulse: PhasePulse = field(default=None, compare=False)

    def __post_init__(self):
        bits = _check_bits(self.bits)
        if bits.shape != (self.params.num_bits,):
            raise ValueError(f"expected {self.params.num_bits} bits, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        if self.pulse is None:
            object.__setattr__(self, "pulse", build_phase_pulse(self.params))

    @cached_property
    def _bit_starts(self) -> np.ndarray:
        return np.arange(1, self.params.num_bits + 1) * self.params.bit_duration

    @property
    def _omega(self) -> float:
        return 2 * np.pi * self.tx_index * self.params.freq_offset

    def bit_phase(self, t):
        """Data-driven part of the phase, sum_i c_i q(t - i Tp)."""
        t = np.asarray(t, dtype=float)
        return self.pulse.q_train(t, self._bit_starts) @ self.bits

    def phase(self, t):
        return self.bit_phase(t) + self._omega * np.asarray(t, dtype=float)

    def instantaneous_frequency(self, t):
        """d(phase)/dt in rad/s."""
        t = np.asarray(t, dtype=float)
        return self.pulse.z(t[..., None] - self._bit_starts) @ self.bits + self._omega

    @cached_property
    def amplitude(self) -> float:
        # sum_k |s(k Ts)|^2 Ts = 1
        ts = self.params.sample_period
        unit = np.exp(1j * self.phase(self.params.sample_times))
        return 1.0 / np.sqrt(np.sum(np.abs(unit) ** 2) * ts)

    def __call__(self, t):
        return self.amplitude * np.exp(1j * self.phase(t))

    def derivative(self, t):
        """ds/dt; the delay derivative is ``-derivative(k Ts - tau)``."""
        t = np.asarray(t, dtype=float)
        ph = self.phase(t)
        return 1j * self.instantaneous_frequency(t) * self.amplitude * np.exp(1j * ph)

    def sample_with_derivative(self, t):
        """(s(t), ds/dt) sharing one phase evaluation."""
        t = np.asarray(t, dtype=float)
        ph = self.pulse.q_train(t, self._bit_starts) @ self.bits + self._omega * t
        freq = self.pulse.z(t[..., None] - self._bit_starts) @ self.bits + self._omega
        s = self.amplitude * np.exp(1j * ph)
        return s, 1j * freq * s


def make_waveforms(params: GmskParams, bits) -> list[GmskWaveform]:
    bits = _check_bits(bits)
    if bits.ndim != 2:
        raise ValueError("bits must have shape (M, Nc)")
    pulse = build_phase_pulse(params)
    return [GmskWaveform(params, row, m + 1, pulse) for m, row in enumerate(bits)]


def sample(params: GmskParams, bits, tx_index: int, t):
    """Complex baseband sample(s) of transmitter ``tx_index`` (1-based) at time(s) ``t``."""
    return GmskWaveform(params, bits, tx_index)(t)


def sample_time_derivative(params: GmskParams, bits, tx_index: int, t):
    return GmskWaveform(params, bits, tx_index).derivative(t)
