"""Station layout, target kinematics and the delay/Doppler/distance map.

All quantities are SI: meters, seconds, Hz.  Path index ``c = n * M + m``
(receiver-major), matching the ordering of the reflection vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

C_LIGHT = 2.99792458e8  # m/s
COLOCATION_RADIUS = 1e-6  # m


class GeometryError(ValueError):
    """Target coincides with a station (distance below the guard radius)."""


@dataclass(frozen=True)
class StationLayout:
    tx_positions: np.ndarray  # (M, 2)
    rx_positions: np.ndarray  # (N, 2)

    def __post_init__(self):
        tx = np.atleast_2d(np.asarray(self.tx_positions, dtype=float))
        rx = np.atleast_2d(np.asarray(self.rx_positions, dtype=float))
        if tx.shape[1] != 2 or rx.shape[1] != 2 or len(tx) < 1 or len(rx) < 1:
            raise ValueError("station positions must be non-empty (k, 2) arrays")
        if not (np.all(np.isfinite(tx)) and np.all(np.isfinite(rx))):
            raise ValueError("station coordinates must be finite")
        tx.setflags(write=False)
        rx.setflags(write=False)
        object.__setattr__(self, "tx_positions", tx)
        object.__setattr__(self, "rx_positions", rx)

    @property
    def num_tx(self) -> int:
        return len(self.tx_positions)

    @property
    def num_rx(self) -> int:
        return len(self.rx_positions)

    @classmethod
    def ring(cls, num_tx: int, num_rx: int, reference=(15e3, 10e3), radius=7e3) -> "StationLayout":
        """Stations on a circle around ``reference``; station k sits at angle 2*pi*k/count."""
        ref = np.asarray(reference, dtype=float)
        phi_t = 2 * np.pi * np.arange(num_tx) / num_tx
        phi_r = 2 * np.pi * np.arange(num_rx) / num_rx
        tx = ref + radius * np.column_stack([np.cos(phi_t), np.sin(phi_t)])
        rx = ref + radius * np.column_stack([np.cos(phi_r), np.sin(phi_r)])
        return cls(tx, rx)


@dataclass(frozen=True)
class TargetState:
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.vx, self.vy])):
            raise ValueError("target state must be finite")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy])

    @classmethod
    def from_array(cls, theta) -> "TargetState":
        x, y, vx, vy = (float(v) for v in theta)
        return cls(x, y, vx, vy)


@dataclass(frozen=True)
class IntermediateParams:
    """Stacked (tau, f, d_t, d_r); tau and f are flattened (N, M) arrays."""

    tau: np.ndarray
    f: np.ndarray
    d_t: np.ndarray
    d_r: np.ndarray

    @property
    def num_tx(self) -> int:
        return len(self.d_t)

    @property
    def num_rx(self) -> int:
        return len(self.d_r)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.tau, self.f, self.d_t, self.d_r])

    @classmethod
    def from_vector(cls, vec, num_tx: int, num_rx: int) -> "IntermediateParams":
        vec = np.asarray(vec, dtype=float)
        nm = num_tx * num_rx
        if vec.shape != (2 * nm + num_tx + num_rx,):
            raise ValueError(f"expected length {2 * nm + num_tx + num_rx}, got {vec.shape}")
        return cls(vec[:nm], vec[nm:2 * nm], vec[2 * nm:2 * nm + num_tx], vec[2 * nm + num_tx:])


@dataclass(frozen=True)
class JacobianBlocks:
    """Partials of the intermediate parameters with respect to (x, y, vx, vy).

    F, G, H are (2, NM); Dt is (2, M); Dr is (2, N).  ``assembled`` is the
    4 x (2NM + M + N) matrix whose rows are x, y, vx, vy.
    """

    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    Dt: np.ndarray
    Dr: np.ndarray

    @property
    def assembled(self) -> np.ndarray:
        nm = self.F.shape[1]
        m, n = self.Dt.shape[1], self.Dr.shape[1]
        top = np.hstack([self.F, self.G, self.Dt, self.Dr])
        bottom = np.hstack([np.zeros((2, nm)), self.H, np.zeros((2, m + n))])
        return np.vstack([top, bottom])


def _unit_vectors(layout: StationLayout, position: np.ndarray):
    """Offsets (station - target), distances, with the colocation guard."""
    dt_vec = layout.tx_positions - position
    dr_vec = layout.rx_positions - position
    d_t = np.hypot(dt_vec[:, 0], dt_vec[:, 1])
    d_r = np.hypot(dr_vec[:, 0], dr_vec[:, 1])
    for kind, d in (("transmitter", d_t), ("receiver", d_r)):
        bad = np.flatnonzero(d <= COLOCATION_RADIUS)
        if bad.size:
            raise GeometryError(f"target is colocated with {kind} {int(bad[0]) + 1}")
    return dt_vec, dr_vec, d_t, d_r


def intermediate_params(layout: StationLayout, target: TargetState, wavelength: float) -> IntermediateParams:
    dt_vec, dr_vec, d_t, d_r = _unit_vectors(layout, target.position)
    v = target.velocity
    tau = (d_t[None, :] + d_r[:, None]) / C_LIGHT
    f_t = dt_vec @ v / (wavelength * d_t)
    f_r = dr_vec @ v / (wavelength * d_r)
    f = f_t[None, :] + f_r[:, None]
    return IntermediateParams(tau.ravel(), f.ravel(), d_t, d_r)


def jacobian(layout: StationLayout, target: TargetState, wavelength: float) -> JacobianBlocks:
    dt_vec, dr_vec, d_t, d_r = _unit_vectors(layout, target.position)
    v = target.velocity
    # d(d_t)/d(x, y) = (p - p_t) / d_t
    grad_t = -dt_vec / d_t[:, None]  # (M, 2)
    grad_r = -dr_vec / d_r[:, None]  # (N, 2)

    F = (grad_t[None, :, :] + grad_r[:, None, :]) / C_LIGHT  # (N, M, 2)

    proj_t = dt_vec @ v  # v . (p_t - p)
    proj_r = dr_vec @ v
    # d/dp of v.(p_s - p)/d = -v/d + (p_s - p) * [v.(p_s - p)] / d^3
    dft = -v[None, :] / d_t[:, None] + dt_vec * (proj_t / d_t**3)[:, None]
    dfr = -v[None, :] / d_r[:, None] + dr_vec * (proj_r / d_r**3)[:, None]
    G = (dft[None, :, :] + dfr[:, None, :]) / wavelength

    # beta, kappa: independent of velocity
    H = (dt_vec[None, :, :] / d_t[None, :, None] + dr_vec[:, None, :] / d_r[:, None, None]) / wavelength

    n, m = len(d_r), len(d_t)
    flat = lambda a: a.reshape(n * m, 2).T
    return JacobianBlocks(F=flat(F), G=flat(G), H=flat(H), Dt=grad_t.T.copy(), Dr=grad_r.T.copy())
