"""Fixed-point safe-set operators for finite state spaces.

Three families of operators over `StateSet`:

* `immediate_expand` grows a set through the Lipschitz certification
  rule ``bound(z) + L*d(x, z) + eps <= threshold``.
* `stochastic_return` keeps the states that can always come back to a
  seed set in spite of stochastic transitions (nested fixed point).
* `stochastic_arrival` keeps the states reachable from the seed with
  actions whose entire arrival support stays inside a given region.

`expand_iteration` composes them into the per-iteration update of the
pessimistic set, the optimistic set and the cached returnable
(visiting) set.

All operators are pure: fixed points are detected by set equality
between sweeps, which on a finite lattice of monotone operators gives
the same result as running ``|X|`` sweeps.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolation
from .gp import BoundTracker
from .statesets import StateSet
from .transitions import DiscreteTransition


@dataclass
class ExpansionContext:
    """Inputs of the Lipschitz immediate-expansion operator.

    `coords` enables the vectorised Euclidean metric; `metric` is the
    general pairwise fallback.  `neighbors_within(i, r)` may be
    supplied to accelerate candidate lookups (e.g. a grid window); it
    must return exactly the states within distance `r` of state `i`.
    """

    lipschitz: float
    epsilon: float
    threshold: float
    bounds: BoundTracker
    coords: Optional[np.ndarray] = None
    metric: Optional[Callable[[int, int], float]] = None
    neighbors_within: Optional[Callable[[int, float], np.ndarray]] = None
    # row-major square grid layout of the coords, when applicable; enables
    # the separable envelope fast path of immediate_expand
    grid_shape: Optional[tuple] = None
    grid_step: Optional[float] = None

    def __post_init__(self):
        if self.lipschitz <= 0:
            raise ContractViolation("lipschitz constant must be positive")
        if self.epsilon < 0:
            raise ContractViolation("epsilon must be non-negative")
        if self.coords is None and self.metric is None:
            raise ContractViolation("either coords or metric is required")

    def distances_from(self, i: int) -> np.ndarray:
        if self.coords is not None:
            return np.linalg.norm(self.coords - self.coords[i], axis=1)
        n = self.bounds.n_states
        return np.array([self.metric(i, j) for j in range(n)])


@dataclass(frozen=True)
class SafeSets:
    """Per-iteration output triple."""

    pessimistic: StateSet
    optimistic: StateSet
    visiting: StateSet


def immediate_expand(ctx: ExpansionContext, seed: StateSet, mode: str) -> StateSet:
    """Fixed point of the single-step Lipschitz expansion.

    Repeatedly adds any state `x` for which some member `z` of the
    current set satisfies ``bound(z) + L*d(x,z) + eps <= threshold``,
    where the bound is the tracked upper bound (pessimistic mode) or
    lower bound (optimistic mode).  The seed is always contained in
    the result.
    """
    if mode not in ("pessimistic", "optimistic"):
        raise ContractViolation(f"unknown mode {mode!r}")
    if seed.count() == 0:
        raise ContractViolation("immediate_expand requires a nonempty seed")
    seed_ids = seed.indices()
    if not np.all(ctx.bounds.tracked[seed_ids]):
        raise ContractViolation("untracked bound for a member of the seed set")

    bound = ctx.bounds.upper if mode == "pessimistic" else ctx.bounds.lower
    if ctx.grid_shape is not None:
        return _grid_lipschitz_closure(ctx, seed, bound)
    result = seed.mask.copy()
    slack_cap = ctx.threshold - ctx.epsilon
    remaining = int(result.size - np.count_nonzero(result))
    owner = getattr(ctx.neighbors_within, "__self__", None)
    annulus_fn = getattr(owner, "annulus_with_dist", None)
    # cover[x]: how far beyond x the already-processed certification discs
    # extend.  Sources are processed as a spatial wave (FIFO), so by the
    # triangle inequality only the annulus (cover[z], reach] of each new
    # source can contain uncertified cells; wave-interior sources are
    # skipped outright.  Order does not affect the fixed point.
    cover = np.full(result.size, -np.inf)
    queue = deque(int(z) for z in seed_ids if ctx.bounds.tracked[z])
    while queue and remaining:
        z = queue.popleft()
        reach = (slack_cap - bound[z]) / ctx.lipschitz
        if reach < 0:
            continue
        if cover[z] >= reach - 1e-12:
            continue
        if ctx.neighbors_within is not None:
            if annulus_fn is not None:
                # cells within cover[z] of z are already certified by the
                # source that set the cover, so only the annulus remains
                cand, dist = annulus_fn(z, cover[z], reach)
            else:
                cand = np.asarray(ctx.neighbors_within(z, reach), dtype=int)
                dist = None
            hits = cand[~result[cand]] if cand.size else cand
            if dist is not None and cand.size:
                cover[cand] = np.maximum(cover[cand], reach - dist)
        else:
            dist_all = ctx.distances_from(z)
            inside = dist_all <= reach
            np.maximum(cover, np.where(inside, reach - dist_all, -np.inf), out=cover)
            hits = np.flatnonzero(inside & ~result)
        if hits.size:
            result[hits] = True
            remaining -= hits.size
            queue.extend(int(h) for h in hits if ctx.bounds.tracked[h])
    return StateSet(result)


_SQ_CACHE = {}


def _grid_lipschitz_closure(ctx: ExpansionContext, seed: StateSet, bound) -> StateSet:
    """Separable-envelope evaluation of the Lipschitz closure on a grid.

    A state x is certified by member z iff ``d(x,z) <= R(z)`` with
    ``R(z) = (cap - bound(z)) / L``, i.e. iff
    ``min_z (d(x,z)^2 - R(z)^2) <= 0``.  That lower envelope separates
    over the two grid axes, so each single-step sweep costs two
    vectorised (n x n x n) reductions; sweeps repeat until the set is
    stable, which matches the member-by-member closure exactly.
    """
    per, per2 = ctx.grid_shape
    step = ctx.grid_step
    key = (per, step)
    sq = _SQ_CACHE.get(key)
    if sq is None:
        ax = np.arange(per, dtype=float) * step
        sq = (ax[:, None] - ax[None, :]) ** 2
        _SQ_CACHE[key] = sq
    cap = ctx.threshold - ctx.epsilon
    reach = (cap - bound) / ctx.lipschitz
    neg_r2 = np.where(
        ctx.bounds.tracked & (reach >= 0), -(reach * reach), np.inf
    ).reshape(per, per2)
    result = seed.mask.copy().reshape(per, per2)
    while True:
        g = np.where(result, neg_r2, np.inf)
        d1 = np.min(sq[:, :, None] + g[None, :, :], axis=1)  # over source rows
        env = np.min(sq[None, :, :] + d1[:, None, :], axis=2)  # over source cols
        new = result | (env <= 1e-12)
        if np.array_equal(new, result):
            return StateSet(new.reshape(-1))
        result = new


def _csr_ranges(ptr, frontier):
    """Concatenated index ranges ptr[f]..ptr[f+1] for all frontier rows."""
    lo = ptr[frontier]
    counts = ptr[frontier + 1] - lo
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return np.repeat(lo, counts) + offsets


def _single_step_return(cur: np.ndarray, outer: np.ndarray, model: DiscreteTransition):
    """One BFS closure of the single-step return rule inside `outer`.

    Adds every state of `outer` having an action with full support in
    `outer` and positive probability of landing in the growing set.
    """
    supp, mask, ptr, src, act = model.caches()
    valid = np.all(outer[supp] | ~mask, axis=2)  # (S, A): support subset of outer
    result = cur.copy()
    frontier = np.flatnonzero(result)
    while frontier.size:
        idx = _csr_ranges(ptr, frontier)
        if idx.size == 0:
            break
        z = src[idx]
        a = act[idx]
        ok = valid[z, a] & outer[z] & ~result[z]
        new = np.unique(z[ok])
        result[new] = True
        frontier = new
    return result


def stochastic_return(S: StateSet, I: StateSet, model: DiscreteTransition) -> StateSet:
    """Largest subset of `I` that can always return to `S`.

    Computes the fixed point of the single-step return closure, then
    re-restricts with the closure on its own output until stable.  The
    result contains `S`, is control invariant, and every member keeps
    a positive-probability route toward `S`.
    """
    if not S.issubset(I):
        raise ContractViolation("stochastic_return requires S subset of I")
    _check_control_invariant(S, model)
    outer = I.mask
    while True:
        nxt = _single_step_return(S.mask, outer, model)
        if np.array_equal(nxt, outer):
            return StateSet(nxt)
        outer = nxt


def _check_control_invariant(S: StateSet, model: DiscreteTransition):
    supp, mask, _, _, _ = model.caches()
    m = S.mask
    ok_action = np.all(m[supp] | ~mask, axis=2)  # (S, A)
    bad = m & ~np.any(ok_action, axis=1)
    if np.any(bad):
        raise ContractViolation(
            f"seed set is not control invariant (e.g. state {int(np.flatnonzero(bad)[0])})"
        )


def stochastic_arrival(S: StateSet, R: StateSet, model: DiscreteTransition) -> StateSet:
    """States of `R` reachable from `S` via actions fully supported in `R`."""
    if not S.issubset(R):
        raise ContractViolation("stochastic_arrival requires S subset of R")
    supp, mask, _, _, _ = model.caches()
    valid = np.all(R.mask[supp] | ~mask, axis=2)  # (S, A)
    result = S.mask.copy()
    frontier = np.flatnonzero(result)
    while frontier.size:
        acts_ok = valid[frontier]  # (f, A)
        z_idx, a_idx = np.nonzero(acts_ok)
        if z_idx.size == 0:
            break
        targets = supp[frontier[z_idx], a_idx]  # (k, width)
        t_mask = mask[frontier[z_idx], a_idx]
        flat = targets[t_mask]
        flat = flat[R.mask[flat] & ~result[flat]]
        new = np.unique(flat)
        result[new] = True
        frontier = new
    return StateSet(result)


def expand_iteration(
    ctx: ExpansionContext,
    prev: SafeSets,
    model: DiscreteTransition,
    immediate=None,
) -> SafeSets:
    """One full safe-set expansion.

    The returnable refinement is seeded with the cached visiting set,
    which is contained in both fresh immediate expansions whenever the
    bounds only tightened since the previous iteration; the seed is
    unioned into the region argument so the containment precondition
    holds even for hand-built inputs.  `immediate` may replace the
    default Lipschitz expansion (the trial loop passes an
    incrementally maintained, result-identical variant).
    """
    if immediate is None:
        immediate = lambda seed, mode: immediate_expand(ctx, seed, mode)
    seed = prev.pessimistic | prev.visiting
    imm_p = immediate(prev.pessimistic, "pessimistic")
    imm_o = immediate(prev.pessimistic, "optimistic")
    visiting = stochastic_return(seed, imm_p | seed, model)
    pess = stochastic_arrival(prev.pessimistic, visiting, model)
    ret_o = stochastic_return(seed, imm_o | seed, model)
    opt = stochastic_arrival(prev.pessimistic, ret_o, model)
    return SafeSets(pessimistic=pess, optimistic=opt, visiting=visiting)
