"""Maximum-likelihood estimation of (x, y, vx, vy).

The log-likelihood is -r^H C^-1 r - ln det C with C = S R S^H + Q.  The
dense form rebuilds C per candidate and is the reference.  The search uses
an algebraically identical low-rank form: with U = S R^{1/2} (NM columns),

    r^H C^-1 r = r^H Q^-1 r - b^H M^-1 b,   ln det C = ln det Q + ln det M,
    M = I + R^{1/2} S^H Q^-1 S R^{1/2},     b = R^{1/2} S^H Q^-1 r,

which only needs NM x NM factorizations and vectorizes over velocities
because the Doppler phase is linear in (vx, vy) at fixed position.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize as sopt

from .fim_crb import fim_intermediate_closed_form
from .geometry import GeometryError, TargetState, intermediate_params, jacobian
from .signal_model import (
    ModelError,
    NoiseCovariance,
    Scenario,
    build_covariance,
    path_samples,
    psd_sqrt,
    scenario_noise,
    scenario_reflection,
    steering_from_params,
)
from .waveform import make_waveforms

log = logging.getLogger(__name__)


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpec:
    """Search box and optimizer settings.  Boxes are (min, max) pairs."""

    x_range: tuple = (14500.0, 15500.0)
    y_range: tuple = (9500.0, 10500.0)
    vx_range: tuple = (-50.0, 50.0)
    vy_range: tuple = (-50.0, 50.0)
    grid: tuple = (21, 21, 11, 11)
    max_iter: int = 500
    simplex_scale: float = 1.0  # in local standard deviations
    ll_rtol: float = 1e-6
    x_tol: float = 1e-3  # in local standard deviations
    restarts: int = 5
    starts: int = 3  # refinements from the best cells of this many velocity nodes

    def __post_init__(self):
        for name in ("x_range", "y_range", "vx_range", "vy_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
                raise ValueError(f"{name} must be a finite (min, max) pair with min <= max")
            object.__setattr__(self, name, (float(lo), float(hi)))
        grid = tuple(int(g) for g in self.grid)
        if len(grid) != 4:
            raise ValueError("grid needs four counts")
        for g, (lo, hi) in zip(grid, self.bounds):
            if hi > lo and g < 2:
                raise ValueError("grid counts must be >= 2 on every searched axis")
            if g < 1:
                raise ValueError("grid counts must be >= 1")
        object.__setattr__(self, "grid", grid)
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if self.starts < 1:
            raise ValueError("starts must be >= 1")

    @property
    def bounds(self) -> tuple:
        return self.x_range, self.y_range, self.vx_range, self.vy_range

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds])

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, g) if hi > lo else np.array([lo]) for (lo, hi), g in zip(self.bounds, self.grid)]

    def cell_size(self) -> np.ndarray:
        return np.array([(hi - lo) / (g - 1) if hi > lo else 0.0 for (lo, hi), g in zip(self.bounds, self.grid)])

    def contains(self, theta) -> bool:
        theta = np.asarray(theta)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    @classmethod
    def centered(cls, center, half_width_m=500.0, half_width_mps=50.0, velocity_center=(0.0, 0.0), **kw) -> "SearchSpec":
        cx, cy = center
        vx, vy = velocity_center
        return cls(
            (cx - half_width_m, cx + half_width_m),
            (cy - half_width_m, cy + half_width_m),
            (vx - half_width_mps, vx + half_width_mps),
            (vy - half_width_mps, vy + half_width_mps),
            **kw,
        )


@dataclass(frozen=True)
class MlEstimate:
    theta_hat: TargetState
    log_likelihood: float
    iterations: int
    grid_cell: tuple
    converged: bool
    grid_log_likelihood: float


def log_likelihood(r, scenario: Scenario, bits, candidate: TargetState, R=None, Q=None, signal_error=None) -> float:
    """-r^H C^-1 r - ln det C at ``candidate``; -inf if the candidate sits on a station."""
    R = scenario_reflection(scenario) if R is None else R
    Q = scenario_noise(scenario) if Q is None else Q
    try:
        ip = intermediate_params(scenario.layout, candidate, scenario.wavelength)
    except GeometryError:
        return -np.inf
    st = steering_from_params(scenario.gmsk, scenario.energies, scenario.p0, ip, make_waveforms(scenario.gmsk, bits), signal_error)
    cov = build_covariance(st, R, Q)
    return -cov.quad(np.asarray(r)) - cov.logdet


@dataclass
class LikelihoodEvaluator:
    """Batched low-rank evaluation of the log-likelihood for one observation.

    R and Q are the estimator's (assumed) model; they do not depend on theta.
    """

    r: np.ndarray
    scenario: Scenario
    bits: np.ndarray
    R: np.ndarray = None
    Q: NoiseCovariance = None
    signal_error: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        sc = self.scenario
        if self.R is None:
            self.R = scenario_reflection(sc)
        if self.Q is None:
            self.Q = scenario_noise(sc)
        self.r = np.asarray(self.r, dtype=complex)
        self.waveforms = make_waveforms(sc.gmsk, self.bits)
        self.R_half = psd_sqrt(self.R)
        n, k = sc.num_rx, sc.gmsk.num_samples
        q_inv = np.linalg.inv(self.Q.q_tilde) / self.Q.sigma2
        self.q_inv = 0.5 * (q_inv + q_inv.T)
        self.r_white = (self.q_inv @ self.r.reshape(n, k))  # (Q~^-1 kron I) r / sigma2
        self.const = -float(np.real(np.vdot(self.r, self.Q.solve(self.r)))) - self.Q.logdet()
        m = sc.num_tx
        self.weight = np.kron(self.q_inv, np.ones((m, m)))
        self.t = sc.gmsk.sample_times
        self.r_rep = np.repeat(self.r_white, m, axis=0)  # (NM, K)
        self.eye = np.eye(n * m)

    def _position_terms(self, x: float, y: float):
        """Velocity-free path samples (N, M, K) and Doppler slopes (2, N, M)."""
        key = (x, y)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        sc = self.scenario
        target = TargetState(x, y, 0.0, 0.0)
        ip = intermediate_params(sc.layout, target, sc.wavelength)
        base = path_samples(sc.gmsk, sc.energies, sc.p0, ip, self.waveforms, self.signal_error)
        H = jacobian(sc.layout, target, sc.wavelength).H.reshape(2, sc.num_rx, sc.num_tx)
        out = (base, H)
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[key] = out
        return out

    def _from_paths(self, u: np.ndarray) -> np.ndarray:
        """Log-likelihood for a batch of path arrays u of shape (V, NM, K)."""
        n, m = self.scenario.num_rx, self.scenario.num_tx
        uc = u.conj()
        # U^H Q^-1 U and U^H Q^-1 r over all receiver pairs
        gram = np.matmul(uc, u.transpose(0, 2, 1)) * self.weight
        proj = np.einsum("vak,ak->va", uc, self.r_rep)
        Rh = self.R_half
        Mh = self.eye + Rh @ gram @ Rh
        b = proj @ Rh.T
        L = np.linalg.cholesky(Mh)
        logdet = 2.0 * np.sum(np.log(np.real(np.diagonal(L, axis1=1, axis2=2))), axis=1)
        sol = np.linalg.solve(Mh, b[..., None])[..., 0]
        quad = np.real(np.einsum("va,va->v", b.conj(), sol))
        return self.const + quad - logdet

    def evaluate(self, x: float, y: float, velocities) -> np.ndarray:
        """Log-likelihood at position (x, y) for each row (vx, vy) of ``velocities``."""
        velocities = np.atleast_2d(np.asarray(velocities, dtype=float))
        try:
            base, H = self._position_terms(float(x), float(y))
        except GeometryError:
            return np.full(len(velocities), -np.inf)
        n, m, k = base.shape
        f = velocities[:, 0, None, None] * H[0] + velocities[:, 1, None, None] * H[1]  # (V, N, M)
        u = base * np.exp(2j * np.pi * f[..., None] * self.t)
        return self._from_paths(u.reshape(len(velocities), n * m, k))

    def evaluate_grid(self, x: float, y: float, vx_axis, vy_axis) -> np.ndarray:
        """Log-likelihood on the (vx, vy) product grid at one position, shape (len(vx), len(vy)).

        The Doppler phasor factors as exp(j2pi t beta vx) * exp(j2pi t kappa vy).
        """
        vx_axis, vy_axis = np.asarray(vx_axis, dtype=float), np.asarray(vy_axis, dtype=float)
        try:
            base, H = self._position_terms(float(x), float(y))
        except GeometryError:
            return np.full((len(vx_axis), len(vy_axis)), -np.inf)
        n, m, k = base.shape
        tt = 2j * np.pi * self.t
        ex = np.exp(vx_axis[:, None, None, None] * H[0][..., None] * tt)  # (A, N, M, K)
        ey = np.exp(vy_axis[:, None, None, None] * H[1][..., None] * tt)
        u = (base * ex)[:, None] * ey[None]
        ll = self._from_paths(u.reshape(len(vx_axis) * len(vy_axis), n * m, k))
        return ll.reshape(len(vx_axis), len(vy_axis))

    def __call__(self, theta) -> float:
        x, y, vx, vy = theta
        return float(self.evaluate(x, y, [[vx, vy]])[0])


def grid_search(evaluator: LikelihoodEvaluator, search: SearchSpec):
    """Exhaustive coarse grid; returns (values over the grid, linear index of the winner)."""
    ax, ay, avx, avy = search.axes()
    values = np.empty((len(ax), len(ay), len(avx), len(avy)))
    for i, x in enumerate(ax):
        for j, y in enumerate(ay):
            values[i, j] = evaluator.evaluate_grid(x, y, avx, avy)
    flat = values.ravel()
    finite = np.isfinite(flat)
    if not finite.any():
        raise EstimationError("every grid cell was rejected (candidate colocated with a station)")
    # np.argmax returns the first (lowest linear index) maximizer
    best = int(np.argmax(np.where(finite, flat, -np.inf)))
    return values, best


def local_information(ev: LikelihoodEvaluator, theta) -> np.ndarray | None:
    """Expected 4 x 4 information of the evaluator's model at ``theta`` (None on failure)."""
    sc = ev.scenario
    target = TargetState.from_array(theta)
    try:
        ip = intermediate_params(sc.layout, target, sc.wavelength)
        st = steering_from_params(sc.gmsk, sc.energies, sc.p0, ip, ev.waveforms, ev.signal_error)
        fim = fim_intermediate_closed_form(st, ev.R, build_covariance(st, ev.R, ev.Q))
    except (GeometryError, ModelError):
        return None
    A = jacobian(sc.layout, target, sc.wavelength).assembled
    return A @ fim.J @ A.T


def refinement_basis(ev: LikelihoodEvaluator, theta, search: SearchSpec) -> np.ndarray:
    """Columns are the simplex axes: local-information eigenvectors scaled to one standard deviation.

    The likelihood has a narrow position-velocity ridge; in these coordinates
    it is close to round.  Falls back to coarse-cell axes when the local
    information is not usable.
    """
    scale = search.cell_size()
    free = np.flatnonzero(scale > 0)
    fallback = np.eye(4)[:, free] * scale[free]
    J = local_information(ev, theta)
    if J is None:
        return fallback
    Jf = J[np.ix_(free, free)]
    w, V = np.linalg.eigh(0.5 * (Jf + Jf.T))
    if not np.all(np.isfinite(w)) or w[0] <= 0 or w[-1] > 1e12 * w[0]:
        return fallback
    B = np.zeros((4, len(free)))
    B[free] = V / np.sqrt(w)
    return B


def start_cells(values: np.ndarray, count: int) -> list[int]:
    """Linear indices of refinement starts: the grid winner, then the best
    position cell of each next-best velocity node.

    At high SCNR a wrong velocity node can outscore the right one by sliding
    its position along the position-velocity ridge, so starts are spread
    across velocity nodes rather than taken from one neighbourhood.
    """
    shape = values.shape
    flat = np.where(np.isfinite(values), values, -np.inf).reshape(shape[0] * shape[1], -1)
    pos_best = np.argmax(flat, axis=0)
    vel_values = flat[pos_best, np.arange(flat.shape[1])]
    # stable sort keeps the lowest index first among ties
    order = np.argsort(-vel_values, kind="stable")
    cells = []
    for v in order[:count]:
        if not np.isfinite(vel_values[v]):
            break
        cells.append(int(pos_best[v]) * flat.shape[1] + int(v))
    return cells


def _refine(ev: LikelihoodEvaluator, search: SearchSpec, start, start_ll: float):
    """Restarted Nelder-Mead in whitened coordinates; candidates are clipped to the box."""
    lo, hi = search.lower, search.upper
    fatol = search.ll_rtol * max(abs(start_ll), 1.0)
    theta, ll = np.asarray(start, dtype=float).copy(), start_ll
    used, converged = 0, False
    for _ in range(search.restarts + 1):
        origin = theta.copy()
        B = refinement_basis(ev, origin, search)
        dim = B.shape[1]

        def objective(z, origin=origin, B=B):
            # evaluating at the projection keeps the simplex from collapsing on the box faces
            return -ev(np.clip(origin + B @ z, lo, hi))

        res = sopt.minimize(
            objective,
            np.zeros(dim),
            method="Nelder-Mead",
            options={
                "initial_simplex": np.vstack([np.zeros(dim), search.simplex_scale * np.eye(dim)]),
                "maxiter": search.max_iter,
                "xatol": search.x_tol,
                "fatol": fatol,
            },
        )
        used += int(res.nit)
        new_ll = -float(res.fun)
        converged = bool(res.success)
        if not new_ll > ll:
            break
        gain = new_ll - ll
        theta, ll = np.clip(origin + B @ res.x, lo, hi), new_ll
        if gain <= fatol:
            break
    return theta, ll, used, converged


def ml_estimate(r, scenario: Scenario, bits, search: SearchSpec, R=None, Q=None, signal_error=None) -> MlEstimate:
    """Coarse grid over the 4-D box, then Nelder-Mead from the best cells.

    Refinement starts from the grid winner and from the best cells of the
    next ``search.starts - 1`` velocity nodes; the highest refined
    log-likelihood wins, earlier starts winning ties.  Each refinement runs in
    information-whitened coordinates and is restarted from its own optimum
    until a restart stops improving the log-likelihood (at most
    ``search.restarts`` restarts of at most ``search.max_iter`` iterations).
    """
    ev = LikelihoodEvaluator(r, scenario, np.asarray(bits), R, Q, signal_error)
    values, best = grid_search(ev, search)
    axes = search.axes()
    cell = tuple(int(c) for c in np.unravel_index(best, values.shape))
    grid_ll = float(values[cell])
    start = np.array([axes[d][cell[d]] for d in range(4)])

    if not np.any(search.cell_size() > 0) or search.max_iter == 0:
        return MlEstimate(TargetState.from_array(start), grid_ll, 0, cell, True, grid_ll)

    best_theta, best_ll, total, best_conv = start, grid_ll, 0, True
    for idx in start_cells(values, search.starts):
        c = np.unravel_index(idx, values.shape)
        theta0 = np.array([axes[d][c[d]] for d in range(4)])
        theta, ll, used, conv = _refine(ev, search, theta0, float(values[c]))
        total += used
        if ll > best_ll:
            best_theta, best_ll, best_conv = theta, ll, conv
    return MlEstimate(TargetState.from_array(best_theta), best_ll, total, cell, best_conv, grid_ll)
