"""Stochastic dynamics models.

`DiscreteTransition` is a categorical table over a finite state index
universe; `GaussianTransition` wraps an expected-transition function
with truncated Gaussian noise.  Both expose a deterministic expected
projection used by planners, and `sigma_max` looks up the worst-case
arrival covariance among enumerable predecessors of a target state.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

# Probabilities at or below this threshold are treated as zero when
# evaluating "positive probability" conditions, guarding against
# floating-point dust in transition tables.
PROB_EPS = 1e-12


class DiscreteTransition:
    """Categorical transition table over integer states and actions.

    Rows absent from the table denote invalid actions, which result in
    a self-transition with probability one.  Row probabilities must be
    non-negative and sum to one within 1e-9.
    """

    def __init__(self, n_states: int, n_actions: int, rows: dict):
        self.n_states = n_states
        self.n_actions = n_actions
        self.rows = {}
        for (s, a), entries in rows.items():
            entries = [(int(ns), float(p)) for ns, p in entries if p > PROB_EPS]
            total = sum(p for _, p in entries)
            if abs(total - 1.0) > 1e-9:
                raise ContractViolation(
                    f"transition row ({s},{a}) sums to {total}, expected 1"
                )
            for ns, p in entries:
                if not (0 <= ns < n_states):
                    raise ContractViolation(f"next state {ns} out of range")
                if p < 0:
                    raise ContractViolation("negative transition probability")
            self.rows[(int(s), int(a))] = entries
        self._caches = None

    # -- textual format: "state action next prob" per line ------------------

    @classmethod
    def from_text(cls, text: str, n_states: int, n_actions: int):
        rows = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            s, a, ns, p = line.split()
            rows.setdefault((int(s), int(a)), []).append((int(ns), float(p)))
        return cls(n_states, n_actions, rows)

    def to_text(self) -> str:
        lines = []
        for (s, a) in sorted(self.rows):
            for ns, p in self.rows[(s, a)]:
                lines.append(f"{s} {a} {ns} {p!r}")
        return "\n".join(lines) + "\n"

    # -- sampling and projection ---------------------------------------------

    def support(self, state: int, action: int):
        """(next states, probabilities) arrays; self-loop when invalid."""
        row = self.rows.get((state, action))
        if row is None:
            return np.array([state]), np.array([1.0])
        ns, p = zip(*row)
        return np.asarray(ns), np.asarray(p)

    def sample(self, state: int, action: int, rng) -> int:
        row = self.rows.get((state, action))
        if row is None:
            return state
        u = rng.random()
        acc = 0.0
        for ns, p in row:
            acc += p
            if u < acc:
                return ns
        return row[-1][0]

    def expected(self, state: int, action: int) -> int:
        """Most probable next state; ties break to the lowest state index."""
        row = self.rows.get((state, action))
        if row is None:
            return state
        best_p, best_s = -1.0, -1
        for ns, p in row:
            if p > best_p + 1e-15 or (abs(p - best_p) <= 1e-15 and ns < best_s):
                best_p, best_s = p, ns
        return best_s

    # -- vector caches for set operators --------------------------------------

    def caches(self):
        """Padded support arrays and an in-edge CSR, built once."""
        if self._caches is None:
            S, A = self.n_states, self.n_actions
            width = max(
                (len(r) for r in self.rows.values()), default=1
            )
            supp = np.tile(np.arange(S)[:, None, None], (1, A, width))
            mask = np.zeros((S, A, width), dtype=bool)
            mask[:, :, 0] = True  # implicit self-loops
            for (s, a), row in self.rows.items():
                mask[s, a, :] = False
                for k, (ns, _) in enumerate(row):
                    supp[s, a, k] = ns
                    mask[s, a, k] = True
                supp[s, a, len(row):] = row[0][0]
            # in-edges: for each target state, the (source, action) pairs
            # whose support contains it with positive probability
            counts = np.zeros(S + 1, dtype=np.int64)
            edges = []
            for (s, a), row in self.rows.items():
                for ns, _ in row:
                    edges.append((ns, s, a))
            for ns, _, _ in edges:
                counts[ns + 1] += 1
            ptr = np.cumsum(counts)
            src = np.zeros(len(edges), dtype=np.int64)
            act = np.zeros(len(edges), dtype=np.int64)
            fill = ptr[:-1].copy()
            for ns, s, a in edges:
                src[fill[ns]] = s
                act[fill[ns]] = a
                fill[ns] += 1
            self._caches = (supp, mask, ptr, src, act)
        return self._caches


class GaussianTransition:
    """Expected transition plus truncated zero-mean Gaussian noise.

    Noise is drawn per axis from independent normals clamped at
    ``truncation`` standard deviations (covariances in the shipped
    environments are diagonal).
    """

    def __init__(self, expected_fn, cov_fn, actions, truncation: float = 3.0):
        if truncation <= 0:
            raise ContractViolation("truncation must be positive")
        self.expected_fn = expected_fn
        self.cov_fn = cov_fn
        self.actions = list(actions)
        self.truncation = truncation

    def expected(self, state, action):
        return np.asarray(self.expected_fn(state, action), dtype=float)

    def covariance(self, state, action):
        return np.atleast_2d(np.asarray(self.cov_fn(state, action), dtype=float))

    def sample(self, state, action, rng):
        mean = self.expected(state, action)
        cov = self.covariance(state, action)
        noise = sample_truncated_noise(cov, self.truncation, rng)
        return mean + noise


def sample_truncated_noise(cov, truncation, rng):
    """Zero-mean draw from N(0, diag(cov)) with per-axis clamping."""
    std = np.sqrt(np.diag(cov))
    z = np.clip(rng.standard_normal(std.shape[0]), -truncation, truncation)
    return z * std


def clamped_normal_variance(truncation: float) -> float:
    """Variance of a standard normal clamped to +-truncation.

    Closed form used as an independent oracle for the sampler:
    E[X^2] = erf(c/sqrt(2)) - 2 c phi(c) + 2 c^2 (1 - Phi(c)).
    """
    from math import erf, exp, pi, sqrt

    c = truncation
    phi = exp(-0.5 * c * c) / sqrt(2 * pi)
    Phi = 0.5 * (1 + erf(c / sqrt(2)))
    return erf(c / sqrt(2)) - 2 * c * phi + 2 * c * c * (1 - Phi)


def sigma_max(model: GaussianTransition, target, predecessors, atol=1e-9):
    """Worst-case arrival covariance at `target`.

    Takes the element-wise maximum of `model` covariances over the
    enumerable ``(state, action)`` pairs whose expected transition
    lands on `target`.  Falls back to the covariance of staying at
    `target` when no predecessor matches.
    """
    target = np.asarray(target, dtype=float)
    best = None
    for z, a in predecessors:
        if np.allclose(model.expected(z, a), target, atol=atol):
            cov = model.covariance(z, a)
            best = cov if best is None else np.maximum(best, cov)
    if best is None:
        best = model.covariance(target, model.actions[0])
    return best
