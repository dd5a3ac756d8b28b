"""Two-step state estimation: power-flow prior, prior covariance, linear PMU update.

Power flow uses the fixed-point (Z-bus) iteration

    V <- Y_LL^{-1} (conj(S / V) - Y_Lsrc V_src)

from a flat start, where ``S`` is the complex power injected at every
non-source phase (loads are negative injections).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .errors import PowerFlowDiverged, ShapeMismatch, SingularPrior
from .grid import AdmittanceMatrix, GridModel, build_admittance

logger = logging.getLogger(__name__)

PF_TOL = 1e-10
PF_MAX_ITER = 100
PF_RESIDUAL_TOL = 1e-8
SIGMA_VIRT = 1e-6
FD_REL_STEP = 1e-6


def flat_start(grid: GridModel) -> np.ndarray:
    """Every non-source phase at the source phasor of the same phase."""
    col = {p: k for k, p in enumerate("abc")}
    return np.array([grid.v_source[col[p]] for b in grid.non_source_buses for p in b.phases])


def _fixed_point(adm, v_src, S, v0, tol, max_iter):
    offset = adm.Y_Lsrc @ v_src
    if S.ndim == 2:
        offset = offset[:, None]
    V = v0.copy()
    for it in range(1, max_iter + 1):
        V_new = adm.solve(np.conj(S / V) - offset)
        step = np.max(np.abs(V_new - V)) if V.size else 0.0
        V = V_new
        if not np.isfinite(step):
            return V, it, False
        if step < tol:
            return V, it, True
    return V, max_iter, False


def power_flow_residual(grid: GridModel, V: np.ndarray, S: np.ndarray, admittance=None) -> float:
    """Max-norm mismatch of ``diag(conj(I)) V - S`` over the non-source phases."""
    adm = admittance or build_admittance(grid)
    v_src = grid.v_source if V.ndim == 1 else grid.v_source[:, None]
    I = adm.Y[3:, :] @ np.concatenate([np.broadcast_to(v_src, (3,) + V.shape[1:]), V])
    return float(np.max(np.abs(np.conj(I) * V - S))) if V.size else 0.0


def power_flow(
    grid: GridModel,
    S_psd: np.ndarray | None = None,
    admittance: AdmittanceMatrix | None = None,
    tol: float = PF_TOL,
    max_iter: int = PF_MAX_ITER,
    v0: np.ndarray | None = None,
) -> np.ndarray:
    """Solve the power flow for injections ``S_psd`` (defaults to the grid loads).

    ``S_psd`` may also be an ``(N, k)`` array, in which case ``k`` independent
    power flows are solved together.
    """
    adm = admittance or build_admittance(grid)
    S = grid.injections() if S_psd is None else np.asarray(S_psd, dtype=complex)
    if S.shape[0] != adm.n:
        raise ShapeMismatch(f"S has {S.shape[0]} rows, grid has N={adm.n}")
    scale = float(np.max(np.abs(grid.v_source)))
    if v0 is None:
        v0 = flat_start(grid)
        if S.ndim == 2:
            v0 = np.repeat(v0[:, None], S.shape[1], axis=1)
    V, n_iter, ok = _fixed_point(adm, grid.v_source, S, v0.astype(complex), tol * scale, max_iter)
    if not ok:
        raise PowerFlowDiverged(f"fixed-point iteration did not converge in {max_iter} iterations")
    res = power_flow_residual(grid, V, S, adm)
    s_scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if res > PF_RESIDUAL_TOL * s_scale:
        raise PowerFlowDiverged(f"power-flow residual {res:.3e} above tolerance")
    logger.debug("power flow converged in %d iterations, residual %.2e", n_iter, res)
    return V


def injection_variances(grid: GridModel, S_psd, sigma_psd, sigma_virt=SIGMA_VIRT) -> np.ndarray:
    """Per-entry variance of the complex pseudo-measurement error.

    Zero-injection entries get a tiny virtual variance ``(sigma_virt * s_ref)^2``
    with ``s_ref`` the mean magnitude of the nonzero injections.
    """
    S = np.asarray(S_psd, dtype=complex)
    mag = np.abs(S)
    var = (sigma_psd * mag) ** 2
    zero = grid.zero_injection_mask() | (mag == 0)
    s_ref = float(mag[~zero].mean()) if np.any(~zero) else 1.0
    var[zero] = (sigma_virt * s_ref) ** 2
    return var


def power_flow_jacobian(grid, S_psd, V_prior=None, admittance=None, method="implicit"):
    """Real-linear sensitivity of the power-flow solution to the injections.

    Returns ``(J_re, J_im)``: column ``k`` is dV/d(Re S_k), resp. dV/d(Im S_k).
    ``method="fd"`` uses forward differences (2N warm-started solves run to
    machine precision), ``"implicit"`` differentiates the fixed point.
    """
    adm = admittance or build_admittance(grid)
    S = np.asarray(S_psd, dtype=complex)
    V = power_flow(grid, S, adm) if V_prior is None else V_prior
    n = adm.n
    if method == "implicit":
        # dV = Y_LL^{-1}(conj(dS)/conj(V) - conj(S)/conj(V)^2 conj(dV)); solve as a real 2N system
        A = adm.solve(np.diag(-np.conj(S) / np.conj(V) ** 2))
        B = adm.solve(np.diag(1.0 / np.conj(V)))
        # dV = A conj(dV) + B conj(dS)  ->  [Re; Im] block system
        Ar, Ai = A.real, A.imag
        lhs = np.block([[np.eye(n) - Ar, -Ai], [-Ai, np.eye(n) + Ar]])
        rhs_re = np.vstack([B.real, B.imag])  # dS = e_k (real unit)
        rhs_im = np.vstack([B.imag, -B.real])  # dS = j e_k  -> conj = -j e_k
        sol = np.linalg.solve(lhs, np.hstack([rhs_re, rhs_im]))
        J = sol[:n] + 1j * sol[n:]
        return J[:, :n], J[:, n:]
    if method != "fd":
        raise ValueError(f"unknown jacobian method {method!r}")

    h = FD_REL_STEP * np.maximum(np.abs(S), 1.0)
    scale = float(np.max(np.abs(grid.v_source)))
    V_base, _, _ = _fixed_point(adm, grid.v_source, S, V.astype(complex), 1e-15 * scale, 200)
    cols = []
    for unit in (1.0, 1j):
        J = np.empty((n, n), dtype=complex)
        chunk = max(1, min(n, 4_000_000 // max(n, 1)))
        for start in range(0, n, chunk):
            idx = np.arange(start, min(n, start + chunk))
            Sp = np.repeat(S[:, None], idx.size, axis=1)
            Sp[idx, np.arange(idx.size)] += unit * h[idx]
            v0 = np.repeat(V_base[:, None], idx.size, axis=1)
            Vp, _, _ = _fixed_point(adm, grid.v_source, Sp, v0, 1e-15 * scale, 200)
            J[:, idx] = (Vp - V_base[:, None]) / h[idx]
        cols.append(J)
    return cols[0], cols[1]


def _linearized_factor(grid, S, var, adm, jacobian="implicit"):
    """``L`` (N x 2N) with ``Sigma_prior = L L^H`` under the linearized power flow."""
    V = power_flow(grid, S, adm)
    J_re, J_im = power_flow_jacobian(grid, S, V, adm, method=jacobian)
    d = np.sqrt(var / 2.0)
    return np.hstack([J_re * d, J_im * d])


def _sample_injections(rng, S, var, n):
    std = np.sqrt(var / 2.0)[:, None]
    noise = std * (rng.standard_normal((S.size, n)) + 1j * rng.standard_normal((S.size, n)))
    return S[:, None] + noise


def prior_covariance(
    grid: GridModel,
    S_psd: np.ndarray | None = None,
    method: str = "linearization",
    sigma_psd: float = 0.5,
    n_samples: int = 10_000,
    seed: int = 0,
    sigma_virt: float = SIGMA_VIRT,
    admittance: AdmittanceMatrix | None = None,
    jacobian: str = "implicit",
) -> np.ndarray:
    """Covariance of the power-flow prior under Gaussian pseudo-measurement errors.

    Injection errors are circular complex Gaussian with variance
    ``(sigma_psd |S_i|)^2`` (virtual variance on zero injections). The
    ``linearization`` method propagates them through the power-flow Jacobian,
    ``monte_carlo`` takes the sample covariance of solved power flows.
    """
    adm = admittance or build_admittance(grid)
    S = grid.injections() if S_psd is None else np.asarray(S_psd, dtype=complex)
    var = injection_variances(grid, S, sigma_psd, sigma_virt)
    n = adm.n

    if method == "linearization":
        L = _linearized_factor(grid, S, var, adm, jacobian)
        sigma = L @ L.conj().T
        return 0.5 * (sigma + sigma.conj().T)

    if method == "monte_carlo":
        if n_samples < 2:
            raise ValueError("monte_carlo prior needs at least 2 samples")
        rng = np.random.default_rng(seed)
        V0 = power_flow(grid, S, adm)
        total = np.zeros(n, dtype=complex)
        second = np.zeros((n, n), dtype=complex)
        batch = max(1, min(n_samples, 2_000_000 // max(n, 1)))
        done = 0
        while done < n_samples:
            k = min(batch, n_samples - done)
            Vs = power_flow(grid, _sample_injections(rng, S, var, k), adm,
                            v0=np.repeat(V0[:, None], k, axis=1))
            dV = Vs - V0[:, None]
            total += dV.sum(axis=1)
            second += dV @ dV.conj().T
            done += k
        mean = total / n_samples
        sigma = (second - n_samples * np.outer(mean, mean.conj())) / (n_samples - 1)
        sigma = 0.5 * (sigma + sigma.conj().T)
        sigma += 1e-10 * np.trace(sigma).real / n * np.eye(n)
        try:
            sla.cholesky(sigma, lower=True)
        except sla.LinAlgError as exc:
            raise SingularPrior("Monte-Carlo prior is not positive definite") from exc
        return sigma

    raise ValueError(f"unknown prior method {method!r}")


@dataclass(frozen=True, eq=False)
class PriorState:
    """Prior estimate and its covariance.

    ``factor`` is a square root ``F`` with ``Sigma_prior = F F^H``. When not
    supplied it is taken from a Cholesky factorization of ``Sigma_prior``.
    Posterior covariances are evaluated in the coordinates whitened by
    ``F``, which never requires ``Sigma_prior^{-1}``.
    """

    V_prior: np.ndarray
    Sigma_prior: np.ndarray
    factor: np.ndarray | None = None

    def __post_init__(self):
        n = self.V_prior.shape[0]
        if self.Sigma_prior.shape != (n, n):
            raise ShapeMismatch(f"Sigma_prior shape {self.Sigma_prior.shape} does not match N={n}")
        if self.factor is None:
            try:
                F = sla.cholesky(self.Sigma_prior, lower=True)
            except sla.LinAlgError as exc:
                raise SingularPrior("Sigma_prior is not positive definite") from exc
            object.__setattr__(self, "factor", F)
        elif self.factor.shape != (n, n):
            raise ShapeMismatch(f"prior factor shape {self.factor.shape} does not match N={n}")

    @property
    def n(self) -> int:
        return self.V_prior.shape[0]

    @cached_property
    def logdet(self) -> float:
        """log det Sigma_prior from the (triangular) factor."""
        F = self.factor
        if np.allclose(F, np.tril(F), rtol=0, atol=0):
            d = np.abs(np.diag(F))
            if np.any(d == 0):
                raise SingularPrior("prior factor has a zero pivot")
            return float(2 * np.sum(np.log(d)))
        sign, ld = np.linalg.slogdet(F)
        if sign == 0:
            raise SingularPrior("prior factor is singular")
        return float(2 * ld)

    def check(self):
        """Raise :class:`SingularPrior` unless Sigma_prior is Hermitian with a nonsingular factor."""
        s = self.Sigma_prior
        if np.linalg.norm(s - s.conj().T) > 1e-12 * max(np.linalg.norm(s), 1e-300):
            raise SingularPrior("Sigma_prior is not Hermitian")
        if not np.isfinite(self.logdet):
            raise SingularPrior("Sigma_prior is singular")
        return self

    @classmethod
    def from_root(cls, V_prior, L):
        """Prior whose covariance is ``L L^H`` for a (possibly wide) ``L``."""
        R = sla.qr(np.asarray(L).conj().T, mode="r")[0][: L.shape[0]]
        sigma = L @ L.conj().T
        return cls(np.asarray(V_prior), 0.5 * (sigma + sigma.conj().T), R.conj().T)


def make_prior(grid, S_psd=None, method="linearization", sigma_psd=0.5, n_samples=10_000,
               seed=0, sigma_virt=SIGMA_VIRT, admittance=None, jacobian="implicit") -> PriorState:
    """Power-flow prior and its covariance, packaged for placement."""
    adm = admittance or build_admittance(grid)
    S = grid.injections() if S_psd is None else np.asarray(S_psd, dtype=complex)
    V = power_flow(grid, S, adm)
    if method == "linearization":
        var = injection_variances(grid, S, sigma_psd, sigma_virt)
        return PriorState.from_root(V, _linearized_factor(grid, S, var, adm, jacobian)).check()
    sigma = prior_covariance(grid, S, method, sigma_psd, n_samples, seed, sigma_virt, adm)
    return PriorState(V, sigma).check()


@dataclass(frozen=True, eq=False)
class PosteriorState:
    V_post: np.ndarray
    K: np.ndarray


def _dense(C):
    return C.toarray() if hasattr(C, "toarray") else np.asarray(C, dtype=complex)


def kalman_gain(Sigma_prior, C_meas, Sigma_meas_diag):
    C = np.atleast_2d(_dense(C_meas))
    n = Sigma_prior.shape[0]
    if C.shape[0] == 0:
        return np.zeros((n, 0), dtype=complex)
    R = np.asarray(Sigma_meas_diag, dtype=float)
    if C.shape[1] != n or R.shape != (C.shape[0],):
        raise ShapeMismatch(f"C_meas {C.shape}, Sigma_meas {R.shape}, N={n}")
    PCt = Sigma_prior @ C.conj().T
    innov = C @ PCt + np.diag(R)
    innov = 0.5 * (innov + innov.conj().T)
    KH = sla.cho_solve(sla.cho_factor(innov, lower=True), PCt.conj().T)
    return KH.conj().T


def posterior_update(prior: PriorState, C_meas, Sigma_meas_diag, z_meas) -> PosteriorState:
    """Linear minimum-variance update ``V_post = V_prior + K (z - C V_prior)``.

    ``z_meas`` may be a vector or an ``(N_meas, k)`` batch of measurement
    vectors; ``V_post`` then has ``k`` columns.
    """
    C = np.atleast_2d(_dense(C_meas)) if np.size(z_meas) else np.zeros((0, prior.n), complex)
    z = np.asarray(z_meas, dtype=complex)
    if C.shape[0] == 0:
        return PosteriorState(prior.V_prior.copy(), np.zeros((prior.n, 0), dtype=complex))
    if z.shape[0] != C.shape[0]:
        raise ShapeMismatch(f"z_meas has {z.shape[0]} rows, C_meas has {C.shape[0]}")
    K = kalman_gain(prior.Sigma_prior, C, Sigma_meas_diag)
    V = prior.V_prior if z.ndim == 1 else prior.V_prior[:, None]
    return PosteriorState(V + K @ (z - C @ V), K)


def posterior_covariance_joseph(Sigma_prior, C_meas, Sigma_meas_diag):
    """Error covariance of the update for the minimum-variance gain.

    Evaluated in the update (Joseph) form ``(I-KC) P (I-KC)^H + K R K^H``,
    which holds for any gain and needs no inverse of ``Sigma_prior``.
    """
    C = np.atleast_2d(_dense(C_meas))
    n = Sigma_prior.shape[0]
    if C.shape[0] == 0:
        return Sigma_prior.copy()
    K = kalman_gain(Sigma_prior, C, Sigma_meas_diag)
    A = np.eye(n) - K @ C
    out = A @ Sigma_prior @ A.conj().T + (K * np.asarray(Sigma_meas_diag)) @ K.conj().T
    return 0.5 * (out + out.conj().T)


@dataclass
class ValidationReport:
    n_trials: int
    n_sensors: int
    deviation: float
    metrics: dict = field(default_factory=dict)
    empirical: np.ndarray | None = field(default=None, repr=False)
    Sigma_post: np.ndarray | None = field(default=None, repr=False)

    def to_text(self) -> str:
        lines = [
            f"trials\t{self.n_trials}",
            f"sensors\t{self.n_sensors}",
            f"deviation\t{self.deviation:.6e}",
        ]
        lines += [f"f_{k}\t{v:.12e}" for k, v in self.metrics.items()]
        return "\n".join(lines) + "\n"


def validate_posterior_covariance(
    grid: GridModel,
    candidate_ids,
    n_trials: int,
    seed: int = 0,
    candidates=None,
    prior: PriorState | None = None,
    sigma_psd: float = 0.5,
    sigma_virt: float = SIGMA_VIRT,
    batch: int = 5_000,
) -> ValidationReport:
    """Monte-Carlo check that the two-step estimator attains its predicted covariance.

    Each trial draws loads around the pseudo-measurements, solves the true
    power flow, corrupts the selected PMU readings with magnitude/angle noise
    and runs the linear update. The second moment of ``V_post - V_true`` is
    compared with the predicted posterior covariance (relative Frobenius).
    """
    from .covariance import metric_value, Metric
    from .measurements import apply_noise, enumerate_candidates

    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    adm = build_admittance(grid)
    S = grid.injections()
    if prior is None:
        prior = make_prior(grid, S, sigma_psd=sigma_psd, sigma_virt=sigma_virt, admittance=adm)
    if candidates is None:
        candidates = enumerate_candidates(grid, v_prior=prior.V_prior, admittance=adm)
    ids = np.asarray(list(candidate_ids), dtype=int)
    C = candidates.C_tilde[ids].toarray() if ids.size else np.zeros((0, adm.n), complex)
    R = candidates.Sigma_meas_diag[ids]
    offset = candidates.offsets[ids]
    sig_mag = np.array([candidates.candidates[i].sigma_mag for i in ids])
    sig_ang = np.array([candidates.candidates[i].sigma_ang for i in ids])

    K = kalman_gain(prior.Sigma_prior, C, R)
    sigma_post = posterior_covariance_joseph(prior.Sigma_prior, C, R)
    var = injection_variances(grid, S, sigma_psd, sigma_virt)

    rng = np.random.default_rng(seed)
    n = adm.n
    second = np.zeros((n, n), dtype=complex)
    done = 0
    while done < n_trials:
        k = min(batch, n_trials - done)
        S_true = _sample_injections(rng, S, var, k)
        V_true = power_flow(grid, S_true, adm, v0=np.repeat(prior.V_prior[:, None], k, axis=1))
        if ids.size:
            z_full = C @ V_true + offset[:, None]
            z = apply_noise(z_full, rng, sig_mag[:, None], sig_ang[:, None]) - offset[:, None]
            V_post = prior.V_prior[:, None] + K @ (z - (C @ prior.V_prior)[:, None])
        else:
            V_post = np.repeat(prior.V_prior[:, None], k, axis=1)
        err = V_post - V_true
        second += err @ err.conj().T
        done += k
    empirical = second / n_trials
    deviation = float(np.linalg.norm(empirical - sigma_post) / np.linalg.norm(sigma_post))
    metrics = {m.value: metric_value(sigma_post, m) for m in Metric}
    return ValidationReport(n_trials, int(ids.size), deviation, metrics, empirical, sigma_post)
