"""Gaussian-process safety estimation.

Exact GP regression with an RBF kernel, online (incremental) updates,
running per-state confidence bounds, and a batched predictor over a
fixed query set used by the grid-world explorer.

All models are immutable values: updates return a new model.  The
Cholesky factor of ``K + noise*I`` is extended row-by-row on update,
which is algebraically identical to refitting from scratch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ContractViolation, DegenerateKernelMatrix, NumericalInstability

# Negative predictive variances above this magnitude indicate a real
# numerical problem rather than round-off and are raised as errors.
VAR_CLAMP_TOL = 1e-9
MOMENT_VAR_TOL = 1e-6

# Relative floor for Cholesky pivots; below this the matrix is treated as
# singular even when LAPACK happens to return a tiny positive pivot.
_PIVOT_RTOL = 1e-12


@dataclass(frozen=True)
class KernelParams:
    """RBF kernel hyperparameters.

    Parameters
    ----------
    signal_variance : float
        Prior variance of the latent function (the kernel value at
        zero distance).
    lengthscales : array_like
        One positive lengthscale per input dimension.
    noise_variance : float
        Observation noise variance; may be zero.
    """

    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if self.signal_variance <= 0:
            raise ValueError("signal_variance must be positive")
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")

    @property
    def dim(self):
        return self.lengthscales.shape[0]


def kernel(x, z, params: KernelParams) -> float:
    """RBF kernel value between two points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if x.shape != z.shape or x.shape[0] != params.dim:
        raise ContractViolation(
            f"kernel dimension mismatch: {x.shape} vs {z.shape} vs "
            f"{params.dim} lengthscales"
        )
    r = (x - z) / params.lengthscales
    return float(params.signal_variance * np.exp(-0.5 * np.dot(r, r)))


def kernel_matrix(X, Z, params: KernelParams) -> np.ndarray:
    """RBF kernel matrix between two point sets, shape (len(X), len(Z))."""
    X = np.atleast_2d(np.asarray(X, dtype=float)) / params.lengthscales
    Z = np.atleast_2d(np.asarray(Z, dtype=float)) / params.lengthscales
    sq = (
        np.sum(X * X, axis=1)[:, None]
        + np.sum(Z * Z, axis=1)[None, :]
        - 2.0 * (X @ Z.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return params.signal_variance * np.exp(-0.5 * sq)


@dataclass(frozen=True)
class GpModel:
    """A fitted GP over safety observations.

    Fields
    ------
    inputs : (n, d) array of training inputs.
    targets : (n,) array of noisy safety observations.
    params : KernelParams.
    chol : lower Cholesky factor of ``K(X, X) + noise*I``.
    coeffs : ``(K + noise*I)^-1 (targets - prior_mean)``.
    prior_mean : constant prior mean.
    """

    inputs: np.ndarray
    targets: np.ndarray
    params: KernelParams
    chol: np.ndarray
    coeffs: np.ndarray
    prior_mean: float = 0.0

    @property
    def n(self):
        return self.inputs.shape[0]

    def to_snapshot(self) -> dict:
        """Self-describing state for trial replay; refit with `fit`."""
        return {
            "inputs": self.inputs.tolist(),
            "targets": self.targets.tolist(),
            "signal_variance": self.params.signal_variance,
            "lengthscales": self.params.lengthscales.tolist(),
            "noise_variance": self.params.noise_variance,
            "prior_mean": self.prior_mean,
        }

    @staticmethod
    def from_snapshot(snap: dict) -> "GpModel":
        params = KernelParams(
            snap["signal_variance"],
            np.asarray(snap["lengthscales"]),
            snap["noise_variance"],
        )
        return fit(
            np.asarray(snap["inputs"]),
            np.asarray(snap["targets"]),
            params,
            prior_mean=snap["prior_mean"],
        )


def fit(inputs, targets, params: KernelParams, prior_mean: float = 0.0) -> GpModel:
    """Fit an exact GP, caching the Cholesky factor of K + noise*I."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.atleast_1d(np.asarray(targets, dtype=float))
    if X.shape[0] < 1:
        raise ContractViolation("fit requires at least one data point")
    if X.shape[0] != y.shape[0]:
        raise ContractViolation("inputs/targets length mismatch")
    if X.shape[1] != params.dim:
        raise ContractViolation("input dimension does not match lengthscales")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ContractViolation("non-finite training data")
    K = kernel_matrix(X, X, params)
    K[np.diag_indices_from(K)] += params.noise_variance
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise DegenerateKernelMatrix(
            "degenerate kernel matrix: K + noise*I is not positive definite "
            "(duplicate inputs with zero noise?)"
        ) from exc
    scale = params.signal_variance + params.noise_variance
    if np.min(np.diag(L)) ** 2 <= _PIVOT_RTOL * scale:
        raise DegenerateKernelMatrix("degenerate kernel matrix: vanishing pivot")
    coeffs = cho_solve((L, True), y - prior_mean, check_finite=False)
    return GpModel(X, y, params, L, coeffs, prior_mean)


def _extend_chol(L, cross, self_var):
    """Append one row/column to a Cholesky factor.

    `cross` is the covariance vector against existing inputs and
    `self_var` the new diagonal entry (kernel + noise).
    """
    n = L.shape[0]
    l21 = solve_triangular(L, cross, lower=True, check_finite=False)
    d2 = self_var - float(l21 @ l21)
    if d2 <= _PIVOT_RTOL * self_var:
        raise DegenerateKernelMatrix(
            "degenerate kernel matrix: update would lose positive definiteness"
        )
    out = np.zeros((n + 1, n + 1))
    out[:n, :n] = L
    out[n, :n] = l21
    out[n, n] = np.sqrt(d2)
    return out


def _is_thinnable(model: GpModel, x, y) -> bool:
    """Spec'd data-thinning rule: nearest training input closer than 1e-3
    lengthscale-normalised distance and target within one noise std."""
    diff = (model.inputs - x) / model.params.lengthscales
    d2 = np.sum(diff * diff, axis=1)
    i = int(np.argmin(d2))
    if d2[i] >= 1e-6:  # (1e-3)^2
        return False
    noise_std = np.sqrt(model.params.noise_variance)
    return abs(model.targets[i] - y) < noise_std


def add_observation(model: GpModel, x, y, thinning: bool = False) -> GpModel:
    """Return a model extended by one observation.

    Equivalent (to numerical precision) to refitting from scratch on
    the extended dataset.  With ``thinning=True`` an observation that
    near-duplicates an existing one is silently skipped.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[0] != model.params.dim:
        raise ContractViolation("add_observation dimension mismatch")
    if thinning and _is_thinnable(model, x, y):
        return model
    cross = kernel_matrix(model.inputs, x[None, :], model.params)[:, 0]
    self_var = model.params.signal_variance + model.params.noise_variance
    L = _extend_chol(model.chol, cross, self_var)
    X = np.vstack([model.inputs, x[None, :]])
    t = np.append(model.targets, float(y))
    coeffs = cho_solve((L, True), t - model.prior_mean, check_finite=False)
    return GpModel(X, t, model.params, L, coeffs, model.prior_mean)


def _clamp_variance(var, tol, where=""):
    if var < -tol:
        raise NumericalInstability(
            f"negative predictive variance {var:.3e}{where}"
        )
    return max(var, 0.0)


def posterior(model: GpModel, x) -> tuple[float, float]:
    """Posterior mean and variance at a single query point."""
    means, variances = posterior_batch(model, np.atleast_1d(x)[None, :])
    return float(means[0]), float(variances[0])


def posterior_batch(model: GpModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and variances at many query points."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Kx = kernel_matrix(model.inputs, X, model.params)  # (n, m)
    means = model.prior_mean + Kx.T @ model.coeffs
    V = solve_triangular(model.chol, Kx, lower=True, check_finite=False)
    variances = model.params.signal_variance - np.sum(V * V, axis=0)
    bad = variances < -VAR_CLAMP_TOL
    if np.any(bad):
        raise NumericalInstability(
            f"negative predictive variance {variances[bad].min():.3e}"
        )
    np.maximum(variances, 0.0, out=variances)
    return means, variances


class BoundTracker:
    """Running confidence intervals per state index.

    Intervals are intersected across updates: the lower bound never
    decreases and the upper bound never increases.  Untracked states
    report ``(-inf, +inf)``.  An update that would cross the bounds is
    recorded as an inconsistency and both bounds collapse to the
    midpoint instead of crossing.
    """

    def __init__(self, n_states: int):
        self.n_states = n_states
        self.lower = np.full(n_states, -np.inf)
        self.upper = np.full(n_states, np.inf)
        self.beta_used = np.full(n_states, np.nan)
        self.tracked = np.zeros(n_states, dtype=bool)
        self.inconsistencies = 0

    def bounds(self, state: int) -> tuple[float, float]:
        return float(self.lower[state]), float(self.upper[state])

    def width(self, state: int) -> float:
        return float(self.upper[state] - self.lower[state])

    def update(self, state: int, mean: float, variance: float, beta: float):
        if variance < 0:
            raise ContractViolation("update_bounds requires variance >= 0")
        if beta <= 0:
            raise ContractViolation("update_bounds requires beta > 0")
        h = beta * np.sqrt(variance)
        lo = max(self.lower[state], mean - h)
        hi = min(self.upper[state], mean + h)
        if lo > hi:
            # Model misspecification: the new interval is disjoint from the
            # running one.  Collapse to the midpoint, clipped into the old
            # interval so the monotonicity invariant survives.
            self.inconsistencies += 1
            mid = float(
                np.clip(0.5 * (lo + hi), self.lower[state], self.upper[state])
            )
            lo = hi = mid
        self.lower[state] = lo
        self.upper[state] = hi
        self.beta_used[state] = beta
        self.tracked[state] = True
        return lo, hi

    def update_batch(self, means, variances, beta, indices=None):
        """Vectorised update over all states (or a subset)."""
        means = np.asarray(means, dtype=float)
        h = beta * np.sqrt(np.maximum(np.asarray(variances, dtype=float), 0.0))
        if indices is None:
            lo_new = np.maximum(self.lower, means - h)
            hi_new = np.minimum(self.upper, means + h)
            crossed = lo_new > hi_new
            if np.any(crossed):
                self.inconsistencies += int(np.sum(crossed))
                mid = np.clip(
                    0.5 * (lo_new[crossed] + hi_new[crossed]),
                    self.lower[crossed],
                    self.upper[crossed],
                )
                lo_new[crossed] = mid
                hi_new[crossed] = mid
            self.lower = lo_new
            self.upper = hi_new
            self.beta_used[:] = beta
            self.tracked[:] = True
        else:
            for i, m, v in zip(indices, means, np.asarray(variances)):
                self.update(int(i), float(m), float(v), beta)


def update_bounds(tracker: BoundTracker, state: int, mean, variance, beta):
    """Intersect the tracked interval at `state` with mean +- beta*std."""
    return tracker.update(state, mean, variance, beta)


class GridPredictor:
    """Incremental exact GP posterior over a fixed set of query points.

    Maintains ``V = L^-1 K(X, Q)`` and running mean/variance vectors
    over the query set so that adding one observation costs O(n*m)
    instead of a full re-prediction.  Produces the same numbers as
    `posterior_batch` on the wrapped model.
    """

    def __init__(self, params: KernelParams, query_points, prior_mean: float = 0.0):
        self.params = params
        self.prior_mean = prior_mean
        self.queries = np.atleast_2d(np.asarray(query_points, dtype=float))
        m = self.queries.shape[0]
        self._model: GpModel | None = None
        self._V = np.zeros((0, m))
        self._c = np.zeros(0)  # L^-1 (y - prior_mean)
        self._mean = np.zeros(m)
        self._sumsq = np.zeros(m)

    @property
    def model(self) -> GpModel | None:
        return self._model

    @property
    def n(self):
        return 0 if self._model is None else self._model.n

    def add(self, x, y, thinning: bool = False) -> bool:
        """Add one observation; returns False when thinned away."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self._model is None:
            self._model = fit(x[None, :], [y], self.params, self.prior_mean)
            l11 = self._model.chol[0, 0]
            v = kernel_matrix(x[None, :], self.queries, self.params)[0] / l11
            c = (float(y) - self.prior_mean) / l11
            self._V = v[None, :]
            self._c = np.array([c])
            self._mean = v * c
            self._sumsq = v * v
            return True
        if thinning and _is_thinnable(self._model, x, y):
            return False
        prev = self._model
        self._model = add_observation(prev, x, y)
        L = self._model.chol
        n = prev.n
        l21 = L[n, :n]
        l22 = L[n, n]
        k_q = kernel_matrix(x[None, :], self.queries, self.params)[0]
        v_new = (k_q - l21 @ self._V) / l22
        c_new = (float(y) - self.prior_mean - float(l21 @ self._c)) / l22
        self._V = np.vstack([self._V, v_new[None, :]])
        self._c = np.append(self._c, c_new)
        self._mean += v_new * c_new
        self._sumsq += v_new * v_new
        return True

    def means(self) -> np.ndarray:
        return self.prior_mean + self._mean

    def variances(self) -> np.ndarray:
        var = self.params.signal_variance - self._sumsq
        bad = var < -VAR_CLAMP_TOL
        if np.any(bad):
            raise NumericalInstability(
                f"negative predictive variance {var[bad].min():.3e} on grid"
            )
        return np.maximum(var, 0.0)

    @classmethod
    def attach(cls, model: GpModel, query_points) -> "GridPredictor":
        """Predictor over `query_points` tracking an externally owned model."""
        self = cls(model.params, query_points, model.prior_mean)
        self._model = model
        L = model.chol
        Kq = kernel_matrix(model.inputs, self.queries, model.params)
        self._V = solve_triangular(L, Kq, lower=True, check_finite=False)
        self._c = solve_triangular(
            L, model.targets - model.prior_mean, lower=True, check_finite=False
        )
        self._mean = self._c @ self._V
        self._sumsq = np.sum(self._V * self._V, axis=0)
        return self

    def sync_append(self, model: GpModel):
        """Catch up with a tracked model that appended observations.

        Valid because appending points never alters the existing rows
        of the Cholesky factor.
        """
        if model.n < self._V.shape[0]:
            raise ContractViolation("tracked model shrank; rebuild with attach")
        L = model.chol
        while self._V.shape[0] < model.n:
            n = self._V.shape[0]
            l21 = L[n, :n]
            l22 = L[n, n]
            x = model.inputs[n]
            y = float(model.targets[n])
            k_q = kernel_matrix(x[None, :], self.queries, model.params)[0]
            v_new = (k_q - l21 @ self._V) / l22
            c_new = (y - self.prior_mean - float(l21 @ self._c)) / l22
            self._V = np.vstack([self._V, v_new[None, :]])
            self._c = np.append(self._c, c_new)
            self._mean += v_new * c_new
            self._sumsq += v_new * v_new
        self._model = model
