"""Continuous-case safe-set machinery.

Safe sets over a lattice graph of reachable states, described by
GP-based indicator functions instead of explicit set recursions: an
immediate indicator on the GP posterior and a stochastic-arrival
indicator on the moment-matched posterior at the arrival distribution.
The planning threshold is lowered by ``L * d_max / 2`` so that safety
holds along the continuous path between adjacent lattice states, and
the confidence multiplier can be decayed toward a floor when target
selection comes up empty.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation
from .gp import GpModel, posterior
from .moments import GaussianBelief, moment_matched_posterior
from .statesets import StateSet
from .transitions import GaussianTransition


@dataclass(frozen=True)
class SafetyIndicatorConfig:
    """Parameters of the continuous safety indicators."""

    beta: float
    beta_min: float
    beta_scale: float
    threshold: float
    lipschitz: float
    d_max: float

    def __post_init__(self):
        if self.beta <= 0 or self.beta_min <= 0:
            raise ContractViolation("beta and beta_min must be positive")
        if self.beta < self.beta_min:
            raise ContractViolation("beta must not start below beta_min")
        if not (0.0 < self.beta_scale <= 1.0):
            raise ContractViolation("beta_scale must lie in (0, 1]")
        if self.d_max < 0 or self.lipschitz <= 0:
            raise ContractViolation("d_max >= 0 and lipschitz > 0 required")

    @property
    def adjusted_threshold(self) -> float:
        """Planning threshold accounting for path-wise excursions."""
        return self.threshold - self.lipschitz * self.d_max / 2.0


def scale_beta(cfg: SafetyIndicatorConfig) -> SafetyIndicatorConfig:
    """Decay beta one multiplicative step, floored at beta_min.

    Invoked when target selection yields an empty set; the caller
    resets beta to its configured value after each expansion iteration.
    """
    return replace(cfg, beta=max(cfg.beta_min, cfg.beta * cfg.beta_scale))


def immediate_indicator(gp: GpModel, x, cfg: SafetyIndicatorConfig, mode: str) -> bool:
    """GP-bound immediate-safety test against the adjusted threshold."""
    mean, var = posterior(gp, x)
    return _indicator_from_moments(mean, var, cfg, mode)


def arrival_indicator(
    gp: GpModel, target, sigma_max, cfg: SafetyIndicatorConfig, mode: str
) -> bool:
    """Moment-matched safety test of the arrival distribution at `target`."""
    belief = GaussianBelief(np.atleast_1d(target), sigma_max)
    mean, var = moment_matched_posterior(gp, belief)
    return _indicator_from_moments(mean, var, cfg, mode)


def _indicator_from_moments(mean, var, cfg, mode) -> bool:
    gamma = {"pessimistic": 1.0, "optimistic": -1.0}[mode]
    return mean + gamma * cfg.beta * np.sqrt(max(var, 0.0)) <= cfg.adjusted_threshold


class LatticeGraph:
    """Action lattice of states reachable under the expected transition.

    Built breadth-first from a root state; node positions are
    deduplicated with a spatial hash at half the action step so no two
    nodes are closer than ``step/2`` in the infinity norm.
    """

    def __init__(self, positions, edges, root_index=0, step=None):
        self.positions = np.asarray(positions, dtype=float)
        self.edges = edges  # list of (src, action, dst)
        self.root = root_index
        self.step = step
        n = self.positions.shape[0]
        self._out = [[] for _ in range(n)]
        self._in = [[] for _ in range(n)]
        for s, a, t in edges:
            self._out[s].append((a, t))
            self._in[t].append((s, a))

    @property
    def n(self):
        return self.positions.shape[0]

    def out_edges(self, i):
        return self._out[i]

    def in_edges(self, i):
        return self._in[i]

    @classmethod
    def build(
        cls,
        root,
        model: GaussianTransition,
        in_bounds,
        max_nodes: int = 100_000,
    ) -> "LatticeGraph":
        """Grow the lattice from `root` under the expected transitions.

        `in_bounds(point) -> bool` limits the extent.  Edges where the
        expected arrival leaves the bounds are dropped (invalid
        actions are inactions and add no edge).
        """
        root = np.asarray(root, dtype=float)
        steps = [
            np.linalg.norm(model.expected(root, a) - root) for a in model.actions
        ]
        step = float(max(steps))
        res = step / 2.0
        key = lambda p: tuple(np.round(np.asarray(p) / res).astype(int))
        index = {key(root): 0}
        positions = [root]
        edges = []
        frontier = [0]
        while frontier and len(positions) < max_nodes:
            nxt = []
            for i in frontier:
                p = positions[i]
                for a in model.actions:
                    q = model.expected(p, a)
                    if not in_bounds(q):
                        continue
                    k = key(q)
                    j = index.get(k)
                    if j is None:
                        j = len(positions)
                        index[k] = j
                        positions.append(q)
                        nxt.append(j)
                    edges.append((i, a, j))
            frontier = nxt
        return cls(np.asarray(positions), edges, root_index=0, step=step)

    def nearest_node(self, point) -> int:
        return int(np.argmin(np.linalg.norm(self.positions - np.asarray(point), axis=1)))


@dataclass(frozen=True)
class LatticeSafeSets:
    pessimistic: StateSet
    optimistic: StateSet


def expand_lattice(
    gp,
    graph: LatticeGraph,
    root_safe: StateSet,
    cfg: SafetyIndicatorConfig,
    model: GaussianTransition,
    edge_indicator=None,
) -> LatticeSafeSets:
    """Breadth-first safe-set growth along lattice edges.

    A node joins the pessimistic set when some in-edge ``(z, a, x)``
    has ``z`` already inside and the arrival distribution
    ``N(T_bar(z,a), Sigma(z,a))`` passes the pessimistic indicator;
    the optimistic set grows analogously.  `edge_indicator(z, a, x,
    mode)` may replace the default evaluation (the explorer supplies a
    cached, batched variant).
    """
    if root_safe.count() == 0:
        raise ContractViolation("root_safe must be nonempty")
    if graph.root not in root_safe:
        raise ContractViolation("root node must belong to root_safe")

    if edge_indicator is None:

        def edge_indicator(z, a, x, mode):
            target = model.expected(graph.positions[z], a)
            cov = model.covariance(graph.positions[z], a)
            return arrival_indicator(gp, target, cov, cfg, mode)

    sets = {}
    for mode in ("pessimistic", "optimistic"):
        mask = root_safe.mask.copy()
        frontier = list(np.flatnonzero(mask))
        while frontier:
            nxt = []
            for z in frontier:
                for a, x in graph.out_edges(z):
                    if mask[x]:
                        continue
                    if edge_indicator(z, a, x, mode):
                        mask[x] = True
                        nxt.append(x)
            frontier = nxt
        sets[mode] = StateSet(mask)
    return LatticeSafeSets(sets["pessimistic"], sets["optimistic"])
