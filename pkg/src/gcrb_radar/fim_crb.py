"""Fisher information and Cramer-Rao bounds for (x, y, vx, vy).

The information is first computed over the intermediate parameters
(tau, f, d_t, d_r) and then pulled back through the geometry Jacobian.
For a zero-mean complex Gaussian with covariance C(p),

    J_ij = Tr(C^-1 dC/dp_i C^-1 dC/dp_j),

and because every parameter moves only a few columns of S, dC/dp_i is a
sum of rank-two terms s^X_a z_a^H S^H + h.c.  Working at the level of
single columns a (of derivative type X) gives the pairwise matrix

    T^XY = 2 Re{ (Y S^X)^T o (Y S^Y) + ((S^Y)^H C^-1 S^X)^T o (Y S R) },
    Y = R S^H C^-1,

from which every named block follows by summing over the columns a
parameter touches (one column for tau_nm and f_nm, the M columns of
receiver n for d_rn, the N columns of transmitter m for d_tm).
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .geometry import IntermediateParams, JacobianBlocks, TargetState, jacobian
from .signal_model import (
    CovarianceBundle,
    NoiseCovariance,
    Scenario,
    SteeringSet,
    build_covariance,
    build_steering,
    factor_covariance,
    scenario_noise,
    scenario_reflection,
    steering_from_params,
)
from .waveform import draw_bits, make_waveforms

log = logging.getLogger(__name__)

GROUPS = ("tau", "f", "dt", "dr")
THETA_NAMES = ("x", "y", "vx", "vy")
PINV_RTOL = 1e-12
CONDITION_LIMIT = 1e12


class SingularInformationError(RuntimeError):
    pass


class MismatchStabilityError(RuntimeError):
    pass


def _group_sizes(num_tx: int, num_rx: int) -> dict[str, int]:
    nm = num_tx * num_rx
    return {"tau": nm, "f": nm, "dt": num_tx, "dr": num_rx}


def _group_slices(num_tx: int, num_rx: int) -> dict[str, slice]:
    out, start = {}, 0
    for name, size in _group_sizes(num_tx, num_rx).items():
        out[name] = slice(start, start + size)
        start += size
    return out


def tx_selector(num_tx: int, num_rx: int) -> np.ndarray:
    """NM x M indicator of which columns belong to each transmitter."""
    return np.tile(np.eye(num_tx), (num_rx, 1))


def rx_selector(num_tx: int, num_rx: int) -> np.ndarray:
    """NM x N indicator of which columns belong to each receiver."""
    return np.kron(np.eye(num_rx), np.ones((num_tx, 1)))


def column_to_param_map(num_tx: int, num_rx: int) -> np.ndarray:
    """4NM x P map from column-level derivative weights to intermediate parameters."""
    nm = num_tx * num_rx
    return sla.block_diag(np.eye(nm), np.eye(nm), tx_selector(num_tx, num_rx), rx_selector(num_tx, num_rx))


@dataclass(frozen=True)
class FimIntermediate:
    """FIM over (tau, f, d_t, d_r), with named block access, e.g. ``block('tau', 'dt')``."""

    J: np.ndarray
    num_tx: int
    num_rx: int
    derivation: str = "closed-form"

    def block(self, row: str, col: str) -> np.ndarray:
        sl = _group_slices(self.num_tx, self.num_rx)
        return self.J[sl[row], sl[col]]

    @property
    def blocks(self) -> dict[str, np.ndarray]:
        return {f"{a}{b}": self.block(a, b) for a in GROUPS for b in GROUPS}

    def with_blocks_zeroed(self, *pairs) -> "FimIntermediate":
        J = self.J.copy()
        sl = _group_slices(self.num_tx, self.num_rx)
        for a, b in pairs:
            J[sl[a], sl[b]] = 0.0
            J[sl[b], sl[a]] = 0.0
        return FimIntermediate(J, self.num_tx, self.num_rx, self.derivation)


def _pair_information(Y, YSR, cov: CovarianceBundle, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    YX = Y @ X
    YZ = Y @ Z
    ZCX = Z.conj().T @ cov.solve(X)
    return 2.0 * np.real(YX.T * YZ + ZCX.T * YSR)


def fim_intermediate_closed_form(steering: SteeringSet, R: np.ndarray, cov: CovarianceBundle) -> FimIntermediate:
    S = steering.S
    nk, nm = S.shape
    if R.shape != (nm, nm) or cov.C.shape != (nk, nk):
        raise ValueError(f"dimension mismatch: S {S.shape}, R {R.shape}, C {cov.C.shape}")
    m, n = steering.num_tx, steering.num_rx
    Y = R @ cov.solve(S).conj().T  # R S^H C^-1
    YSR = Y @ S @ R
    cols = {"tau": steering.S_tau, "f": steering.S_f, "dt": steering.S_t, "dr": steering.S_r}
    sel = {"tau": None, "f": None, "dt": tx_selector(m, n), "dr": rx_selector(m, n)}

    blocks = {}
    for i, a in enumerate(GROUPS):
        for b in GROUPS[i:]:
            T = _pair_information(Y, YSR, cov, cols[a], cols[b])
            if sel[a] is not None:
                T = sel[a].T @ T
            if sel[b] is not None:
                T = T @ sel[b]
            blocks[a, b] = T
            blocks[b, a] = T.T
    J = np.block([[blocks[a, b] for b in GROUPS] for a in GROUPS])
    return FimIntermediate(J, m, n, "closed-form")


def covariance_derivatives(steering: SteeringSet, R: np.ndarray) -> np.ndarray:
    """dC/dp for every intermediate parameter p, shape (P, NK, NK)."""
    m, n = steering.num_tx, steering.num_rx
    D = steering.stacked_derivatives()
    G = column_to_param_map(m, n)
    RSh = R @ steering.S.conj().T
    out = []
    for p in range(G.shape[1]):
        w = G[:, p]
        nz = np.flatnonzero(w)
        A = np.zeros((D.shape[0], D.shape[0]), dtype=complex)
        for col in nz:
            A += w[col] * np.outer(D[:, col], RSh[col % (m * n)])
        out.append(A + A.conj().T)
    return np.array(out)


def trace_information(cov: CovarianceBundle | np.ndarray, derivatives) -> np.ndarray:
    """J_ij = Re Tr(C^-1 dC_i C^-1 dC_j)."""
    if not isinstance(cov, CovarianceBundle):
        cov = factor_covariance(np.asarray(cov))
    X = [cov.solve(d) for d in derivatives]
    P = len(X)
    J = np.empty((P, P))
    for i in range(P):
        for j in range(i, P):
            J[i, j] = J[j, i] = np.real(np.sum(X[i] * X[j].T))
    return J


def covariance_function(scenario: Scenario, bits, R: np.ndarray, Q: NoiseCovariance, signal_error=None) -> Callable:
    """p -> C(p) with the intermediate parameters varied independently."""
    waveforms = make_waveforms(scenario.gmsk, bits)
    Qd = Q.dense()
    m, n = scenario.num_tx, scenario.num_rx

    def cov_at(vartheta):
        ip = IntermediateParams.from_vector(vartheta, m, n)
        st = steering_from_params(scenario.gmsk, scenario.energies, scenario.p0, ip, waveforms, signal_error)
        return st.S @ R @ st.S.conj().T + Qd

    return cov_at


def default_param_steps(scenario: Scenario) -> np.ndarray:
    sizes = _group_sizes(scenario.num_tx, scenario.num_rx)
    return np.concatenate([
        np.full(sizes["tau"], scenario.gmsk.sample_period * 1e-4),
        np.full(sizes["f"], 1e-3),
        np.full(sizes["dt"], 1e-2),
        np.full(sizes["dr"], 1e-2),
    ])


def central_differences(func: Callable, x0, steps) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    out = []
    for i, h in enumerate(steps):
        e = np.zeros_like(x0)
        e[i] = h
        out.append((func(x0 + e) - func(x0 - e)) / (2 * h))
    return np.array(out)


def fim_intermediate_trace_oracle(cov_at: Callable, vartheta0, steps=None, derivatives=None, num_tx=None, num_rx=None) -> FimIntermediate:
    """Entry-by-entry trace formula.  Uses ``derivatives`` if supplied, else central differences."""
    vartheta0 = np.asarray(vartheta0, dtype=float)
    if derivatives is None:
        if steps is None:
            raise ValueError("finite-difference steps are required when derivatives are not supplied")
        derivatives = central_differences(cov_at, vartheta0, steps)
        derivation = "trace-oracle/finite-difference"
    else:
        derivation = "trace-oracle/analytic"
    J = trace_information(cov_at(vartheta0), derivatives)
    return FimIntermediate(J, num_tx or 0, num_rx or 0, derivation)


@dataclass(frozen=True)
class FimResult:
    J_theta: np.ndarray
    crb: np.ndarray
    derivation: str
    condition: float
    reliable: bool = True
    null_direction: np.ndarray | None = None

    @property
    def root_crb(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.crb), 0.0, None))


def invert_information(J: np.ndarray, derivation: str) -> FimResult:
    J = 0.5 * (J + J.T)
    u, s, vt = np.linalg.svd(J)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
    if cond <= CONDITION_LIMIT:
        crb = np.linalg.solve(J, np.eye(len(J)))
        return FimResult(J, 0.5 * (crb + crb.T), derivation, cond)
    warnings.warn(f"information matrix is ill-conditioned (cond={cond:.3g}); CRB from pseudo-inverse", RuntimeWarning, stacklevel=3)
    crb = np.linalg.pinv(J, rcond=PINV_RTOL, hermitian=True)
    return FimResult(J, crb, derivation, cond, reliable=False, null_direction=vt[-1])


def fim_theta(fim: FimIntermediate, jac: JacobianBlocks) -> FimResult:
    A = jac.assembled
    if A.shape[1] != fim.J.shape[0]:
        raise ValueError(f"Jacobian has {A.shape[1]} columns, FIM is {fim.J.shape}")
    return invert_information(A @ fim.J @ A.T, fim.derivation)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| after scaling rows/cols by sqrt(diag(b)); unit-free for information matrices."""
    d = np.sqrt(np.abs(np.diag(b)))
    d = np.where(d > 0, d, 1.0)
    return float(np.max(np.abs(a - b) / np.outer(d, d)))


@dataclass
class BoundContext:
    """Model pieces held fixed while the target state varies: R, Q and the bits."""

    scenario: Scenario
    bits: np.ndarray
    R: np.ndarray = None
    Q: NoiseCovariance = None
    signal_error: np.ndarray | None = None

    def __post_init__(self):
        if self.R is None:
            self.R = scenario_reflection(self.scenario)
        if self.Q is None:
            self.Q = scenario_noise(self.scenario)

    def steering(self, target: TargetState | None = None) -> SteeringSet:
        return build_steering(self.scenario, target or self.scenario.truth, self.bits, self.signal_error)

    def covariance(self, target: TargetState | None = None) -> CovarianceBundle:
        return build_covariance(self.steering(target), self.R, self.Q)

    def jacobian(self, target: TargetState | None = None) -> JacobianBlocks:
        sc = self.scenario
        return jacobian(sc.layout, target or sc.truth, sc.wavelength)


def crb_for_bits(scenario: Scenario, bits, R=None, Q=None, target=None) -> FimResult:
    ctx = BoundContext(scenario, np.asarray(bits), R, Q)
    st = ctx.steering(target)
    cov = build_covariance(st, ctx.R, ctx.Q)
    return fim_theta(fim_intermediate_closed_form(st, ctx.R, cov), ctx.jacobian(target))


@dataclass(frozen=True)
class EcrbobResult:
    crb: np.ndarray
    stderr: np.ndarray
    draws: int
    singular_draws: int

    @property
    def recrbob(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.crb), 0.0, None))

    @property
    def recrbob_stderr(self) -> np.ndarray:
        # delta method on sqrt
        root = self.recrbob
        return np.where(root > 0, np.diag(self.stderr) / (2 * np.where(root > 0, root, 1.0)), 0.0)


def average_bounds(crbs: list[np.ndarray], singular: int) -> EcrbobResult:
    total = len(crbs) + singular
    if total == 0:
        raise ValueError("no bit draws")
    if singular > 0.1 * total:
        raise SingularInformationError(f"{singular} of {total} bit draws gave a singular information matrix")
    stack = np.array(crbs)
    mean = stack.mean(axis=0)
    se = stack.std(axis=0, ddof=1) / np.sqrt(len(stack)) if len(stack) > 1 else np.zeros_like(mean)
    return EcrbobResult(mean, se, len(stack), singular)


def ecrbob(scenario: Scenario, num_bit_draws: int, rng: np.random.Generator, R=None, Q=None) -> EcrbobResult:
    """Average of CRB(theta | bits) over i.i.d. bit draws."""
    if num_bit_draws < 1:
        raise ValueError("num_bit_draws must be >= 1")
    R = scenario_reflection(scenario) if R is None else R
    Q = scenario_noise(scenario) if Q is None else Q
    crbs, singular = [], 0
    for _ in range(num_bit_draws):
        bits = draw_bits(rng, scenario.num_tx, scenario.gmsk.num_bits)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = crb_for_bits(scenario, bits, R, Q)
        if res.reliable:
            crbs.append(res.crb)
        else:
            singular += 1
    return average_bounds(crbs, singular)


@dataclass(frozen=True)
class MismatchPair:
    """Assumed model (S0, R0, Q0) used by the estimator and actual model (S1, R1, Q1)."""

    assumed: SteeringSet
    assumed_R: np.ndarray
    assumed_Q: NoiseCovariance | np.ndarray
    actual_S: np.ndarray
    actual_R: np.ndarray
    actual_Q: NoiseCovariance | np.ndarray

    def covariances(self) -> tuple[CovarianceBundle, CovarianceBundle]:
        return (
            build_covariance(self.assumed, self.assumed_R, self.assumed_Q),
            build_covariance(self.actual_S, self.actual_R, self.actual_Q),
        )


@dataclass(frozen=True)
class MismatchedFim:
    result: FimResult
    stderr_theta: np.ndarray
    J_vartheta: np.ndarray
    num_samples: int
    effective_samples: float


def mismatch_stability_margin(C0: CovarianceBundle, C1: CovarianceBundle) -> float:
    """2 - lambda_max(C0, C1); positive iff 2 C0^-1 - C1^-1 is positive definite."""
    lam = sla.eigh(C0.C, C1.C, eigvals_only=True)
    return float(2.0 - lam[-1])


def fim_mismatched(
    pair: MismatchPair,
    jac: JacobianBlocks,
    num_mc_samples: int,
    rng: np.random.Generator,
    chunk: int = 4096,
) -> MismatchedFim:
    """Importance-weighted Monte-Carlo estimate of the mismatched information.

    r ~ CN(0, C1), weight (p0/p1)^2, score of the assumed model.
    """
    C0, C1 = pair.covariances()
    margin = mismatch_stability_margin(C0, C1)
    if margin <= 0:
        raise MismatchStabilityError(
            "mismatch too severe for the importance-weighted bound: 2 C0^-1 - C1^-1 is not positive definite "
            f"(margin {margin:.3g})"
        )
    st = pair.assumed
    m, n = st.num_tx, st.num_rx
    nm = m * n
    D = st.stacked_derivatives()
    G = column_to_param_map(m, n)
    A = jac.assembled
    RSh = pair.assumed_R @ st.S.conj().T
    Y0D = RSh @ C0.solve(D)  # NM x 4NM
    idx = np.arange(4 * nm)
    trace_col = 2.0 * np.real(Y0D[idx % nm, idx])
    log_det_ratio = C1.logdet - C0.logdet
    P = G.shape[1]

    acc = np.zeros((4, 4))
    acc_sq = np.zeros((4, 4))
    acc_v = np.zeros((P, P))
    w_sum = w_sq = 0.0
    done = 0
    while done < num_mc_samples:
        b = min(chunk, num_mc_samples - done)
        g = (rng.standard_normal((C1.C.shape[0], b)) + 1j * rng.standard_normal((C1.C.shape[0], b))) / np.sqrt(2.0)
        r = C1.chol @ g
        x = C0.solve(r)
        quad0 = np.real(np.sum(r.conj() * x, axis=0))
        quad1 = np.real(np.sum(g.conj() * g, axis=0))
        w = np.exp(2.0 * (log_det_ratio - quad0 + quad1))
        p = D.conj().T @ x
        y = RSh @ x
        score_col = 2.0 * np.real(p.conj() * y[idx % nm]) - trace_col[:, None]
        sv = G.T @ score_col
        st_ = A @ sv
        ws = w * st_
        outer = np.einsum("ib,jb->bij", ws, st_)
        acc += outer.sum(axis=0)
        acc_sq += np.einsum("bij,bij->ij", outer, outer)
        acc_v += (w * sv) @ sv.T
        w_sum += w.sum()
        w_sq += (w**2).sum()
        done += b

    mean = acc / done
    var = np.maximum(acc_sq / done - mean**2, 0.0) * done / max(done - 1, 1)
    stderr = np.sqrt(var / done)
    ess = w_sum**2 / w_sq if w_sq > 0 else 0.0
    rel = np.diag(stderr) / np.abs(np.diag(mean))
    if np.any(rel > 0.1):
        warnings.warn(f"mismatched FIM diagonal relative standard error up to {rel.max():.2f}", RuntimeWarning, stacklevel=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = invert_information(mean, "importance-sampling")
    return MismatchedFim(res, stderr, acc_v / done, done, ess)


@dataclass(frozen=True)
class ExpansionReport:
    expansion: np.ndarray
    matrix_product: np.ndarray

    @property
    def discrepancy(self) -> np.ndarray:
        return self.expansion - self.matrix_product

    @property
    def max_relative_discrepancy(self) -> float:
        return relative_error(self.expansion, self.matrix_product)

    def lines(self) -> list[str]:
        out = []
        for i in range(4):
            for j in range(4):
                e, p = self.expansion[i, j], self.matrix_product[i, j]
                out.append(f"{THETA_NAMES[i]},{THETA_NAMES[j]}: expansion={e:.12e} product={p:.12e} diff={e - p:.3e}")
        return out


def expand_chain_rule(fim: FimIntermediate, jac: JacobianBlocks) -> np.ndarray:
    """Quadruple-sum form over (p, q, n, m) with the 1/N and 1/M repetition factors."""
    M, N = fim.num_tx, fim.num_rx
    b = fim.blocks
    Jtt, Jtf, Jtdt, Jtdr = b["tautau"], b["tauf"], b["taudt"], b["taudr"]
    Jft, Jff, Jfdt, Jfdr = b["ftau"], b["ff"], b["fdt"], b["fdr"]
    Jdtt, Jdtf, Jdtdt, Jdtdr = b["dttau"], b["dtf"], b["dtdt"], b["dtdr"]
    Jdrt, Jdrf, Jdrdt, Jdrdr = b["drtau"], b["drf"], b["drdt"], b["drdr"]
    a_, b_ = jac.F
    e_, g_ = jac.G
    beta, kappa = jac.H
    ups, lt = jac.Dt
    eta, psi = jac.Dr

    def position_row(dx, df, ddt, ddr, n, m, c):
        """Inner (n, m) factors for a position row: tau, f, d_t, d_r coefficients."""
        return dx[c], df[c], ddt[m] / N, ddr[n] / M

    rows = [(a_, e_, ups, eta), (b_, g_, lt, psi)]
    A = np.zeros((4, 4))
    for p in range(N):
        for q in range(M):
            d = p * M + q
            for n in range(N):
                for m in range(M):
                    c = n * M + m
                    for i in range(2):
                        ci = position_row(*rows[i], n, m, c)
                        col_tau = ci[0] * Jtt[c, d] + ci[1] * Jft[c, d] + ci[2] * Jdtt[m, d] + ci[3] * Jdrt[n, d]
                        col_f = ci[0] * Jtf[c, d] + ci[1] * Jff[c, d] + ci[2] * Jdtf[m, d] + ci[3] * Jdrf[n, d]
                        col_dt = ci[0] * Jtdt[c, q] + ci[1] * Jfdt[c, q] + ci[2] * Jdtdt[m, q] + ci[3] * Jdrdt[n, q]
                        col_dr = ci[0] * Jtdr[c, p] + ci[1] * Jfdr[c, p] + ci[2] * Jdtdr[m, p] + ci[3] * Jdrdr[n, p]
                        for j in range(2):
                            oj = rows[j]
                            A[j, i] += oj[0][d] * col_tau + oj[1][d] * col_f + oj[2][q] / N * col_dt + oj[3][p] / M * col_dr
                        A[2, i] += beta[d] * col_f
                        A[3, i] += kappa[d] * col_f
                    A[2, 2] += beta[d] * beta[c] * Jff[c, d]
                    A[3, 2] += kappa[d] * beta[c] * Jff[c, d]
                    A[3, 3] += kappa[d] * kappa[c] * Jff[c, d]
    A[0:2, 2:4] = A[2:4, 0:2].T
    A[2, 3] = A[3, 2]
    return A


def validate_chain_rule_expansion(scenario: Scenario, bits=None, rng=None) -> ExpansionReport:
    if scenario.num_tx > 3 or scenario.num_rx > 3:
        raise ValueError("expansion diagnostic is limited to M, N <= 3")
    if bits is None:
        bits = draw_bits(rng or np.random.default_rng(scenario.seed), scenario.num_tx, scenario.gmsk.num_bits)
    ctx = BoundContext(scenario, np.asarray(bits))
    st = ctx.steering()
    fim = fim_intermediate_closed_form(st, ctx.R, build_covariance(st, ctx.R, ctx.Q))
    jac = ctx.jacobian()
    A = jac.assembled
    return ExpansionReport(expand_chain_rule(fim, jac), A @ fim.J @ A.T)


def fim_report_rows(result: FimResult, fim: FimIntermediate | None = None):
    """(block, i, j, value) rows for CSV output."""
    for name, mat in (("J_theta", result.J_theta), ("crb", result.crb)):
        for i in range(4):
            for j in range(4):
                yield name, THETA_NAMES[i], THETA_NAMES[j], mat[i, j]
    if fim is not None:
        for key, mat in fim.blocks.items():
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    yield f"J_{key}", i, j, mat[i, j]


def fim_report_csv(result: FimResult, fim: FimIntermediate | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "i", "j", "value"])
    for block, i, j, v in fim_report_rows(result, fim):
        w.writerow([block, i, j, repr(float(v))])
    return buf.getvalue()


def fim_summary(result: FimResult) -> str:
    lines = [f"derivation: {result.derivation}", f"condition number: {result.condition:.6g}",
             f"reliable: {result.reliable}"]
    for name, v in zip(THETA_NAMES, result.root_crb):
        unit = "m" if name in ("x", "y") else "m/s"
        lines.append(f"sqrt CRB {name}: {v:.6g} {unit}")
    if result.null_direction is not None:
        lines.append("null direction: " + ", ".join(f"{v:.6g}" for v in result.null_direction))
    return "\n".join(lines) + "\n"
