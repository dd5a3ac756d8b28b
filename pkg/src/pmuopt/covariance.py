"""Posterior covariance of a (possibly fractional) placement and its metrics.

For a placement ``x`` the information matrix is

    M(x) = Sigma_prior^{-1} + sum_i x_i w_i c_i^H c_i,

with ``c_i`` the candidate rows and ``w_i`` their inverse noise variances.
Priors of distribution grids are extremely ill-conditioned (zero-injection
buses carry near-exact virtual measurements), so ``M(x)`` is never formed
directly: with ``Sigma_prior = F F^H`` we factor the whitened matrix
``I + F^H H(x) F`` and recover ``Sigma_post = F (I + F^H H(x) F)^{-1} F^H``,
which is the same quantity without any inverse of ``Sigma_prior``.

``F`` is re-factored once to be upper triangular. Then ``W = F R^{-1}``
(with ``R^H R`` the Cholesky factorization of the whitened matrix) is upper
triangular as well and ``Sigma_post = W W^H`` is a triangular product.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg as sla
from scipy.linalg import blas, lapack
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AlreadySelected, EigensolverFailure, NonFiniteMetric, ShapeMismatch, SingularPrior

EIG_RESIDUAL_TOL = 1e-8
DENSE_EIG_MAX = 600


class Metric(str, Enum):
    A = "A"  # trace
    D = "D"  # log det
    E = "E"  # largest eigenvalue
    M = "M"  # largest diagonal entry

    @classmethod
    def parse(cls, value) -> "Metric":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown metric {value!r}; expected one of A, D, E, M") from None


@dataclass(eq=False)
class PosteriorCovariance:
    """``Sigma_post`` for placement ``x`` plus cached spectral data.

    ``logdet`` is ``log det Sigma_post``; it is carried along (and updated by
    rank-one additions) so the D metric never needs a fresh factorization.
    """

    Sigma_post: np.ndarray
    x: np.ndarray
    logdet: float
    top_eigvec: np.ndarray | None = field(default=None, repr=False)
    _eig: tuple | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.Sigma_post.shape[0]


def _fix_phase(u: np.ndarray) -> np.ndarray:
    """Scale a unit vector so its first nonzero component is positive real."""
    nz = np.flatnonzero(np.abs(u) > 1e-14 * np.abs(u).max())
    k = nz[0] if nz.size else 0
    return u * (np.abs(u[k]) / u[k]) if u[k] != 0 else u


def top_eigenpair(sigma: np.ndarray, v0: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Largest eigenvalue of a Hermitian matrix and its phase-normalized eigenvector."""
    n = sigma.shape[0]
    if n <= DENSE_EIG_MAX:
        w, U = sla.eigh(sigma, subset_by_index=[n - 1, n - 1])
        lam, u = float(w[0]), U[:, 0]
    else:
        w, U = spla.eigsh(sigma, k=1, which="LA", v0=v0, tol=1e-10, maxiter=20 * n)
        lam, u = float(w[0]), U[:, 0]
    u = _fix_phase(u / np.linalg.norm(u))
    res = np.linalg.norm(sigma @ u - lam * u)
    if not np.isfinite(res) or res > EIG_RESIDUAL_TOL * max(abs(lam), 1e-300):
        raise EigensolverFailure(f"eigenpair residual {res:.3e} exceeds tolerance")
    return lam, u


def _as_cov(cov) -> PosteriorCovariance:
    if isinstance(cov, PosteriorCovariance):
        return cov
    sigma = np.asarray(cov)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ShapeMismatch("covariance must be a square matrix")
    try:
        L = sla.cholesky(sigma, lower=True)
    except sla.LinAlgError as exc:
        raise NonFiniteMetric("covariance is not positive definite") from exc
    logdet = float(2 * np.sum(np.log(np.abs(np.diag(L)))))
    return PosteriorCovariance(sigma, np.zeros(0), logdet)


def metric_value(cov, metric) -> float:
    """A: trace, D: log det, E: largest eigenvalue, M: largest diagonal entry."""
    metric = Metric.parse(metric)
    cov = _as_cov(cov)
    sigma = cov.Sigma_post
    if metric is Metric.A:
        tr = np.trace(sigma)
        if abs(tr.imag) > 1e-10 * max(abs(tr.real), 1e-300):
            raise NonFiniteMetric(f"trace has imaginary residue {tr.imag:.3e}")
        val = float(tr.real)
    elif metric is Metric.D:
        val = cov.logdet
    elif metric is Metric.E:
        lam, u = top_eigenpair(sigma, cov.top_eigvec)
        cov.top_eigvec = u
        val = lam
    else:
        val = float(np.max(np.real(np.diag(sigma))))
    if not np.isfinite(val):
        raise NonFiniteMetric(f"metric {metric.value} is not finite")
    return val


class PlacementModel:
    """A prior and a candidate set, prepared for repeated covariance evaluation."""

    def __init__(self, prior, candidates):
        self.prior = prior
        self.candidates = candidates
        self.C = sp.csr_matrix(candidates.C_tilde)
        self.CH = self.C.conj().T.tocsr()
        self.w = np.asarray(candidates.weights, dtype=float)
        self.F = _upper_factor(prior.factor)
        self.logdet_prior = prior.logdet
        if self.C.shape[1] != prior.n:
            raise ShapeMismatch(f"candidate rows have {self.C.shape[1]} columns, prior has N={prior.n}")

    @property
    def n_x(self) -> int:
        return self.C.shape[0]

    @property
    def costs(self) -> np.ndarray:
        return self.candidates.c

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (self.n_x,):
            raise ShapeMismatch(f"placement has {x.size} entries, expected {self.n_x}")
        if np.any(x < -1e-12) or np.any(x > 1 + 1e-12) or not np.all(np.isfinite(x)):
            raise ValueError("placement weights must lie in [0, 1]")
        return np.clip(x, 0.0, 1.0)

    def information(self, x) -> np.ndarray:
        """Sum of the weighted measurement information ``H(x)`` (dense)."""
        x = self._check_x(x)
        H = self.CH @ sp.diags(x * self.w) @ self.C
        return H.toarray()

    def posterior(self, x) -> PosteriorCovariance:
        x = self._check_x(x)
        F = self.F
        active = np.flatnonzero(x > 0)
        if active.size == 0:
            sigma = self.prior.Sigma_prior.copy()
            return PosteriorCovariance(sigma, x, self.logdet_prior)
        Ca = self.C[active]
        H = Ca.conj().T @ sp.diags(x[active] * self.w[active]) @ Ca
        # only the upper triangle of F^H H F is read by the Cholesky factorization
        Mt = blas.ztrmm(1.0, F, np.asarray(H @ F, dtype=complex), side=0, lower=0, trans_a=2)
        Mt[np.diag_indices_from(Mt)] += 1.0
        try:
            R = sla.cholesky(Mt, lower=False, check_finite=False)
        except sla.LinAlgError as exc:
            raise SingularPrior("whitened information matrix is not positive definite") from exc
        W = blas.ztrsm(1.0, R, F, side=1, lower=0)
        sigma = _upper_outer(W)
        logdet = self.logdet_prior - 2 * float(np.sum(np.log(np.real(np.diag(R)))))
        return PosteriorCovariance(sigma, x, logdet)

    def rank_one_add(self, cov: PosteriorCovariance, i: int, weight: float = 1.0) -> PosteriorCovariance:
        """Sherman-Morrison update of ``cov`` for candidate ``i`` joining with ``weight``."""
        if not 0 <= i < self.n_x:
            raise IndexError(f"candidate index {i} out of range")
        if cov.x[i] != 0:
            raise AlreadySelected(f"candidate {i} is already part of the placement")
        x = cov.x.copy()
        x[i] = weight
        rho = weight * self.w[i]
        if rho == 0:
            return PosteriorCovariance(cov.Sigma_post.copy(), x, cov.logdet, cov.top_eigvec)
        ci = self.C.getrow(i)
        s = np.asarray(ci @ cov.Sigma_post).ravel().conj()  # Sigma c_i^H
        q = float(np.real(ci @ s)[0])
        sigma = cov.Sigma_post - np.outer(s, s.conj()) * (rho / (1.0 + rho * q))
        sigma = 0.5 * (sigma + sigma.conj().T)
        return PosteriorCovariance(sigma, x, cov.logdet - float(np.log1p(rho * q)), cov.top_eigvec)

    def value(self, cov: PosteriorCovariance, metric) -> float:
        return metric_value(cov, metric)

    def gradient(self, cov: PosteriorCovariance, metric) -> np.ndarray:
        """Gradient (A, D) or subgradient (E, M) of the metric w.r.t. the weights ``x``."""
        metric = Metric.parse(metric)
        sigma = cov.Sigma_post
        if metric is Metric.A:
            P = np.asarray(self.C @ sigma)  # rows c_i Sigma
            g = -self.w * np.sum(np.abs(P) ** 2, axis=1)
        elif metric is Metric.D:
            P = np.asarray(self.C @ sigma)
            g = -self.w * _row_quadratic(self.C, P)
        elif metric is Metric.M:
            k = int(np.argmax(np.real(np.diag(sigma))))
            col = sigma[:, k]
            g = -self.w * np.abs(self.C @ col) ** 2
        else:
            lam, u = top_eigenpair(sigma, cov.top_eigvec)
            cov.top_eigvec = u
            g = -self.w * np.abs(self.C @ (sigma @ u)) ** 2
        return np.minimum(g, 0.0)

    def certificate_value(self, cov: PosteriorCovariance, metric) -> float:
        """Value of the convex minorant whose gradient :meth:`gradient` returns.

        Equal to the metric for A, D and M; for E it is the Rayleigh quotient
        of the eigenvector used, which never exceeds the largest eigenvalue.
        """
        metric = Metric.parse(metric)
        if metric is Metric.E:
            lam, u = top_eigenpair(cov.Sigma_post, cov.top_eigvec)
            cov.top_eigvec = u
            return min(lam, float(np.real(u.conj() @ cov.Sigma_post @ u)))
        return metric_value(cov, metric)


def _upper_factor(F: np.ndarray) -> np.ndarray:
    """Upper-triangular ``U`` with ``U U^H = F F^H`` (QR of the column-reversed ``F^H``)."""
    F = np.asarray(F, dtype=complex)
    R = sla.qr(F.conj().T[:, ::-1], mode="r", check_finite=False)[0]
    return np.ascontiguousarray(R.conj().T[::-1, ::-1])


def _upper_outer(W: np.ndarray) -> np.ndarray:
    """``W W^H`` for upper-triangular ``W``, exactly Hermitian."""
    U, info = lapack.zlauum(W, lower=0)
    if info != 0:
        raise NonFiniteMetric(f"triangular product failed (info={info})")
    U = np.triu(U)
    G = U + U.conj().T
    G[np.diag_indices_from(G)] = 0.5 * G.diagonal().real
    return G


def _row_quadratic(C: sp.csr_matrix, P: np.ndarray) -> np.ndarray:
    """``Re(sum_k P[i,k] conj(C[i,k]))`` for every row, touching only C's nonzeros."""
    C = C.tocoo()
    out = np.zeros(C.shape[0])
    np.add.at(out, C.row, np.real(P[C.row, C.col] * np.conj(C.data)))
    return out


def posterior_cov(x, prior, candidates) -> PosteriorCovariance:
    return PlacementModel(prior, candidates).posterior(x)


def rank_one_add(cov, i, prior, candidates) -> PosteriorCovariance:
    return PlacementModel(prior, candidates).rank_one_add(cov, i)


def metric_gradient(cov, metric, prior, candidates) -> np.ndarray:
    return PlacementModel(prior, candidates).gradient(cov, metric)
