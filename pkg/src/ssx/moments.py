"""Analytic GP prediction at Gaussian-distributed query points.

When the query point is itself a Gaussian random variable the exact
predictive distribution is intractable; it is approximated by a
Gaussian whose first two moments are available in closed form for the
RBF kernel.  `moment_matched_posterior` implements the general
formulas; `IsotropicMomentTable` is an algebraically equivalent fast
path for isotropic query covariances that batches over many query
means with two matrix multiplies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .errors import NumericalInstability
from .gp import GpModel, MOMENT_VAR_TOL, kernel_matrix, posterior


@dataclass(frozen=True)
class GaussianBelief:
    """A Gaussian distribution over a query state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        if mean.shape[0] <= 3:
            if np.min(np.linalg.eigvalsh(cov)) < -1e-12:
                raise ValueError("covariance must be positive semi-definite")

    @property
    def dim(self):
        return self.mean.shape[0]


def moment_matched_posterior(model: GpModel, belief: GaussianBelief):
    """Gaussian-approximated predictive moments at an uncertain input.

    Returns ``(mean, variance)`` of the GP output when the input is
    distributed ``N(belief.mean, belief.cov)``.  Exact for the RBF
    kernel under the Gaussian approximation of the output.
    """
    if belief.dim != model.params.dim:
        raise ValueError("belief dimension does not match model")
    X = model.inputs
    B = model.coeffs
    alpha2 = model.params.signal_variance
    Lam = np.diag(model.params.lengthscales ** 2)
    Lam_inv = np.diag(model.params.lengthscales ** -2)
    S = belief.cov
    d = belief.dim

    V = X - belief.mean  # rows are v_i
    # mean: d_i = alpha^2 |S Lam^-1 + I|^{-1/2} exp(-1/2 v_i^T (S+Lam)^-1 v_i)
    det_fac = 1.0 / np.sqrt(np.linalg.det(S @ Lam_inv + np.eye(d)))
    SL_inv = np.linalg.inv(S + Lam)
    quad = np.einsum("ij,jk,ik->i", V, SL_inv, V)
    dvec = alpha2 * det_fac * np.exp(-0.5 * quad)
    mean_c = float(dvec @ B)

    # variance: Q_ij = k_i k_j |R|^{-1/2} exp(1/2 z_ij^T R^-1 S z_ij),
    # R = 2 S Lam^-1 + I, z_ij = Lam^-1 (v_i + v_j)
    # Assembled in log domain: exp(expo) alone can overflow for far-away
    # training points even though Q itself stays bounded by alpha^4.
    logk = np.log(alpha2) - 0.5 * np.einsum("ij,jk,ik->i", V, Lam_inv, V)
    R = 2.0 * (S @ Lam_inv) + np.eye(d)
    W = np.linalg.solve(R, S)  # R^-1 S (symmetric)
    Z = V @ Lam_inv  # rows are Lam^-1 v_i
    ZW = Z @ W
    cross = ZW @ Z.T
    diag = np.einsum("ij,ij->i", ZW, Z)
    expo = 0.5 * (diag[:, None] + diag[None, :] + 2.0 * cross)
    Q = np.exp(
        logk[:, None] + logk[None, :] - 0.5 * np.log(np.linalg.det(R)) + expo
    )

    Ainv_Q = cho_solve((model.chol, True), Q, check_finite=False)
    variance = alpha2 - float(np.trace(Ainv_Q)) + float(B @ Q @ B) - mean_c ** 2
    if variance < -MOMENT_VAR_TOL:
        raise NumericalInstability(
            f"negative moment-matched variance {variance:.3e}"
        )
    return model.prior_mean + mean_c, max(variance, 0.0)


class IsotropicMomentTable:
    """Batched moment-matched prediction for isotropic query covariance.

    For ``cov = sigma_sq * I`` and a scalar lengthscale the pair matrix
    `Q` factors as ``Q_ij = s * p_i p_j * G_ij`` with a query-independent
    ``G``; the per-query cost then reduces to two thin matrix products.
    Precomputes everything that depends only on the training data and
    ``sigma_sq``.  Agrees with `moment_matched_posterior` to float
    precision (asserted in tests).
    """

    def __init__(self, model: GpModel, sigma_sq: float, gram_inv=None, pair_g=None):
        ls = model.params.lengthscales
        if not np.allclose(ls, ls[0]):
            raise ValueError("fast path requires a scalar lengthscale")
        self.model = model
        self.sigma_sq = float(sigma_sq)
        self.d = model.params.dim
        l2 = float(ls[0]) ** 2
        a2 = model.params.signal_variance
        s2 = self.sigma_sq

        self._mean_scale = a2 * (1.0 + s2 / l2) ** (-self.d / 2.0)
        self._mean_coef = 0.5 / (l2 + s2)

        rho = 1.0 + 2.0 * s2 / l2
        self._p_coef = 0.5 / (l2 + 2.0 * s2)
        self._s_fac = a2 * a2 * rho ** (-self.d / 2.0)

        if pair_g is None:
            pair_g = pair_decay_matrix(model.inputs, l2, s2)
        if gram_inv is None:
            gram_inv = cho_solve((model.chol, True), np.eye(model.n), check_finite=False)
        B = model.coeffs
        # variance = a2 - s * p^T M p - (mean_c)^2 with M = (A_inv - B B^T) o G
        self._M = (gram_inv - np.outer(B, B)) * pair_g
        self._B = B

    def query(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Moment-matched (means, variances) for many query means."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        X = self.model.inputs
        sq = (
            np.sum(P * P, axis=1)[:, None]
            + np.sum(X * X, axis=1)[None, :]
            - 2.0 * (P @ X.T)
        )
        np.maximum(sq, 0.0, out=sq)
        dmat = self._mean_scale * np.exp(-self._mean_coef * sq)  # (m, n)
        mean_c = dmat @ self._B

        p = np.exp(-self._p_coef * sq)  # (m, n)
        quad = np.einsum("mn,mn->m", p @ self._M, p)
        variances = (
            self.model.params.signal_variance - self._s_fac * quad - mean_c ** 2
        )
        bad = variances < -MOMENT_VAR_TOL
        if np.any(bad):
            raise NumericalInstability(
                f"negative moment-matched variance {variances[bad].min():.3e}"
            )
        np.maximum(variances, 0.0, out=variances)
        return self.model.prior_mean + mean_c, variances

    def query_one(self, point) -> tuple[float, float]:
        means, variances = self.query(np.atleast_1d(point)[None, :])
        return float(means[0]), float(variances[0])


def pair_coefficient(l2: float, sigma_sq: float) -> float:
    """Decay rate of the query-independent pair matrix."""
    return sigma_sq / (l2 * (l2 + 2.0 * sigma_sq))


def pair_decay_matrix(X, l2: float, sigma_sq: float) -> np.ndarray:
    """exp(-c/2 * squared pairwise distances), the fixed factor of Q."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    c = pair_coefficient(l2, sigma_sq)
    sq = (
        np.sum(X * X, axis=1)[:, None]
        + np.sum(X * X, axis=1)[None, :]
        - 2.0 * (X @ X.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-0.5 * c * sq)


class RunningGramInverse:
    """Explicit inverse of K + noise*I maintained under appended points.

    Block-inverse updates cost O(n^2) per observation; the factor is
    recomputed exactly from the model's Cholesky every `refresh`
    additions to stop round-off accumulation.
    """

    def __init__(self, model: GpModel, refresh: int = 64):
        self.refresh = refresh
        self._since = 0
        self.matrix = cho_solve((model.chol, True), np.eye(model.n), check_finite=False)

    def extend(self, model: GpModel, cross, self_var):
        """Update for a model that appended one point (cross = k(X_old, x))."""
        self._since += 1
        if self._since >= self.refresh:
            self._since = 0
            self.matrix = cho_solve((model.chol, True), np.eye(model.n), check_finite=False)
            return self.matrix
        A = self.matrix
        w = A @ cross
        s = float(self_var - cross @ w)
        n = A.shape[0]
        out = np.empty((n + 1, n + 1))
        out[:n, :n] = A + np.outer(w, w) / s
        out[:n, n] = -w / s
        out[n, :n] = -w / s
        out[n, n] = 1.0 / s
        self.matrix = out
        return out


def moment_matched_bounds(model: GpModel, belief: GaussianBelief, beta: float):
    """Confidence interval (lower, upper) of the moment-matched prediction."""
    mean, var = moment_matched_posterior(model, belief)
    h = beta * np.sqrt(var)
    return mean - h, mean + h


def deterministic_limit_check(model: GpModel, x, tol: float = 1e-8) -> bool:
    """True when a zero-covariance belief reproduces the plain posterior."""
    d = model.params.dim
    belief = GaussianBelief(np.atleast_1d(x), np.zeros((d, d)))
    m1, v1 = moment_matched_posterior(model, belief)
    m2, v2 = posterior(model, x)
    return abs(m1 - m2) <= tol and abs(v1 - v2) <= tol
