"""Goal-driven exploration loops.

Implements target selection over the optimistic frontier, shortest-path
planning inside the certified region, and the per-step loop: verify the
next transition against the pessimistic criterion, execute the
stochastic step, record the outcome, sample safety, update the model
and re-expand.  Three engines share this skeleton: the discrete grid
case (exact set operators over a bound tracker), the continuous lattice
case (moment-matched indicators), and the object case (per-object GPs
aggregated by worst-case bound).

The baseline method is a configuration of the same loop: immediate
GP-bound sets only, a next-intended-state check before each step, and
replanning, with all return/arrival machinery disabled.
"""

from __future__ import annotations

import heapq
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import environments as env_mod
from .continuous_sets import LatticeGraph, SafetyIndicatorConfig, scale_beta
from .discrete_sets import ExpansionContext, SafeSets, expand_iteration
from .environments import (
    ACTIONS,
    GridIndexer,
    GroundWorld,
    build_discrete_model,
    control_invariant_start_cells,
    ground_safety,
    ground_step_continuous,
    ground_step_discrete,
)
from .errors import ContractViolation
from .gp import (
    BoundTracker,
    GpModel,
    GridPredictor,
    KernelParams,
    add_observation,
    fit,
    kernel_matrix,
    posterior,
    posterior_batch,
)
from .moments import (
    GaussianBelief,
    IsotropicMomentTable,
    RunningGramInverse,
    moment_matched_posterior,
    pair_coefficient,
)
from .statesets import StateSet
from .tabletop import OBJ_ACTIONS, OBJ_ACTION_DELTAS, ObjectSim, ObjectWorld
from .transitions import GaussianTransition, sigma_max

STUCK_STRIKES = 3


@dataclass
class TargetSelector:
    """Heuristic-driven choice among uncertain expanders."""

    heuristic: object  # callable state-array -> values (lower is better)
    delta: float
    alpha_bucket: float | None = None  # quantisation of heuristic levels


@dataclass
class Plan:
    path: list  # [(state index, action index), ...]
    target: int


@dataclass
class TrialRecord:
    layout: str
    seed: int
    case: str
    method: str
    config_hash: str
    outcome: str  # success | violation | stuck
    steps: int
    states_explored: int
    replans: int
    trajectory: list

    def to_json_line(self) -> str:
        doc = {
            "layout": self.layout,
            "seed": self.seed,
            "case": self.case,
            "method": self.method,
            "config_hash": self.config_hash,
            "outcome": self.outcome,
            "steps": self.steps,
            "states_explored": self.states_explored,
            "replans": self.replans,
        }
        return json.dumps(doc, sort_keys=True)

    def trajectory_lines(self):
        out = []
        for row in self.trajectory:
            out.append(
                " ".join(
                    [
                        ",".join(f"{v:.6f}" for v in row["state"]),
                        row["action"],
                        ",".join(f"{v:.6f}" for v in row["arrival"]),
                        f"{row['true_q']:.6f}",
                        f"{row['sampled_q']:.6f}",
                        "1" if row["violated"] else "0",
                    ]
                )
            )
        return out


def select_target(
    selector: TargetSelector,
    sp_mask,
    so_mask,
    upper,
    lower,
    lipschitz,
    threshold,
    coords,
    goal_index=None,
    exclude=None,
):
    """First nonempty expander set by heuristic level.

    Walks heuristic levels from best (lowest) upward; at each level the
    candidate expanders are the sufficiently uncertain pessimistic
    states within Lipschitz reach of some frontier state at that level.
    Ties break to the widest confidence interval, then the lowest state
    index.  When the goal itself is pessimistically safe it is returned
    directly.
    """
    excluded = np.zeros(len(sp_mask), dtype=bool)
    if exclude is not None:
        excluded[list(exclude)] = True
    if goal_index is not None and sp_mask[goal_index] and not excluded[goal_index]:
        return int(goal_index)

    width = upper - lower
    u_ids = np.flatnonzero(sp_mask & (width > selector.delta) & ~excluded)
    h_ids = np.flatnonzero(so_mask & ~sp_mask)
    if u_ids.size == 0 or h_ids.size == 0:
        return None
    h_vals = np.asarray(selector.heuristic(coords[h_ids]), dtype=float)
    if selector.alpha_bucket:
        levels = np.round(h_vals / selector.alpha_bucket)
    else:
        levels = h_vals
    # one batched pass: a frontier state is reachable when some expander
    # satisfies lower(x) + L * d(x, z) <= threshold; the best (lowest)
    # feasible heuristic level then defines the expander set
    u_xy = coords[u_ids]
    # per-expander squared reach: feasibility compares squared distances so
    # no square roots are taken over the pair matrix; frontier states are
    # walked in heuristic order so the scan stops at the first feasible level
    reach = (threshold - lower[u_ids]) / lipschitz
    r2 = np.where(reach > 0, reach * reach, -1.0)
    u_sq = np.sum(u_xy * u_xy, axis=1)
    order = np.argsort(levels, kind="stable")
    h_sorted = h_ids[order]
    lv_sorted = levels[order]
    pos = 0
    while pos < h_sorted.size:
        stop = min(pos + 1024, h_sorted.size)
        # keep whole levels together
        while stop < h_sorted.size and lv_sorted[stop] == lv_sorted[stop - 1]:
            stop += 1
        z_xy = coords[h_sorted[pos:stop]]
        d2 = (
            u_sq[:, None]
            + np.sum(z_xy * z_xy, axis=1)[None, :]
            - 2.0 * (u_xy @ z_xy.T)
        )
        ok = np.any(d2 <= r2[:, None] + 1e-12, axis=0)
        if np.any(ok):
            lv = lv_sorted[pos:stop]
            alpha = float(np.min(lv[ok]))
            cols = lv == alpha
            g_mask = np.any(d2[:, cols] <= r2[:, None] + 1e-12, axis=1)
            g_ids = u_ids[g_mask]
            w = width[g_ids]
            best = np.lexsort((g_ids, -w))[0]
            return int(g_ids[best])
        pos = stop
    return None



def plan_path(current: int, target: int, edges_of, n_states: int):
    """Uniform-cost BFS through certified edges; None when disconnected."""
    if current == target:
        return []
    parent = {current: None}
    q = deque([current])
    while q:
        s = q.popleft()
        for a, t in edges_of(s):
            if t in parent:
                continue
            parent[t] = (s, a)
            if t == target:
                path = []
                node = t
                while parent[node] is not None:
                    s0, a0 = parent[node]
                    path.append((s0, a0))
                    node = s0
                return path[::-1]
            q.append(t)
    return None


def trial_rngs(seed: int, layout_key: str):
    """Domain-separated environment and algorithm streams for one trial.

    The environment stream depends only on (seed, layout), so method
    variants consume identical noise sequences.
    """
    import hashlib

    digest = int.from_bytes(
        hashlib.sha256(layout_key.encode()).digest()[:4], "big"
    )
    env_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(int(seed), digest, 0))
    )
    alg_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(int(seed), digest, 1))
    )
    return env_rng, alg_rng


def _quantize(point, res):
    return tuple(np.round(np.asarray(point) / res).astype(int).tolist())


# --------------------------------------------------------------------------
# discrete case
# --------------------------------------------------------------------------


class IncrementalLipschitz:
    """Result-identical incremental form of the pessimistic expansion.

    Valid because the tracked upper bound only falls and the seed only
    grows, so certification edges are never lost; sources are
    re-processed whenever their bound improved since last processing.
    """

    def __init__(self, ctx: ExpansionContext):
        n = ctx.bounds.n_states
        self.ctx = ctx
        self.mask = np.zeros(n, dtype=bool)
        self.processed_at = np.full(n, np.inf)

    def expand(self, seed: StateSet) -> StateSet:
        ctx = self.ctx
        bound = ctx.bounds.upper
        new_seed = seed.mask & ~self.mask
        self.mask |= seed.mask
        improved = self.mask & ctx.bounds.tracked & (bound < self.processed_at - 1e-12)
        queue = list(np.flatnonzero(new_seed | improved))
        cap = ctx.threshold - ctx.epsilon
        while queue:
            z = queue.pop()
            if not ctx.bounds.tracked[z]:
                continue
            self.processed_at[z] = bound[z]
            reach = (cap - bound[z]) / ctx.lipschitz
            if reach < 0:
                continue
            cand = ctx.neighbors_within(z, reach)
            hits = cand[~self.mask[cand]]
            if hits.size:
                self.mask[hits] = True
                queue.extend(int(h) for h in hits)
        return StateSet(self.mask.copy())


def _seed_points_disc(center, radius, step, world):
    """3x3 coarse grid over the start disc, snapped onto the state grid."""
    pts = []
    for dx in (-0.5, 0.0, 0.5):
        for dy in (-0.5, 0.0, 0.5):
            p = np.asarray(center) + radius * np.array([dx, dy])
            p = np.round(p / step) * step
            if world.in_bounds(p) and np.linalg.norm(p - center) <= radius:
                pts.append(p)
    return pts


_GRID_CACHE = {}


def _grid_assets(world: GroundWorld, step: float, p: float):
    """Per-process cache of the grid indexer and transition table."""
    key = (
        world.name,
        step,
        p,
        tuple((tuple(h.center), h.peak_cost, h.cutoff) for h in world.hazards),
    )
    if key not in _GRID_CACHE:
        indexer = GridIndexer(world.low, world.high, step)
        _GRID_CACHE[key] = (indexer, build_discrete_model(world, indexer, p))
    return _GRID_CACHE[key]


def run_discrete_trial(world: GroundWorld, cfg, seed: int) -> TrialRecord:
    step = cfg.step
    indexer, model = _grid_assets(world, step, cfg.p_intended)
    env_rng, _ = trial_rngs(seed, f"{world.name}/discrete")

    s0_cells = control_invariant_start_cells(world, indexer, model)
    if s0_cells.size == 0:
        raise ContractViolation(f"{world.name}: empty control-invariant start set")
    start_cell = int(s0_cells[env_rng.integers(0, s0_cells.size)])

    predictor = GridPredictor(cfg.kernel, indexer.coords, cfg.prior_mean)
    tracker = BoundTracker(indexer.n_states)
    for p in _seed_points_disc(world.start_center, world.start_radius, step, world):
        y = ground_safety(world, p) + env_rng.normal(0.0, np.sqrt(world.obs_noise_var))
        predictor.add(p, y, thinning=cfg.thinning)
    tracker.update_batch(predictor.means(), predictor.variances(), cfg.beta)

    ctx = ExpansionContext(
        cfg.lipschitz,
        cfg.epsilon,
        cfg.threshold,
        tracker,
        coords=indexer.coords,
        neighbors_within=indexer.neighbors_within,
        grid_shape=(indexer.per_axis, indexer.per_axis),
        grid_step=indexer.step,
    )
    incr = IncrementalLipschitz(ctx)
    s0 = StateSet.from_indices(indexer.n_states, s0_cells)
    sets = SafeSets(s0, s0, s0)
    goal_cell = indexer.index_of(
        np.clip(world.goal_center, world.low, world.high)
    )
    selector = TargetSelector(
        heuristic=lambda X: np.linalg.norm(X - world.goal_center, axis=1),
        delta=cfg.delta,
    )
    supp, smask, _, _, _ = model.caches()
    is_ours = cfg.method == "ours"

    current = start_cell
    plan = []
    target = None
    tried = set()
    strikes = 0
    replans = 0
    visited = {current}
    trajectory = []
    outcome = "stuck"

    from .discrete_sets import immediate_expand, stochastic_arrival, stochastic_return

    def pessimistic_update(prev):
        """Per-step refresh of the returnable and pessimistic sets."""
        seed = prev.pessimistic | prev.visiting
        imm_p = incr.expand(prev.pessimistic)
        visiting = stochastic_return(seed, imm_p | seed, model)
        pess = stochastic_arrival(prev.pessimistic, visiting, model)
        return SafeSets(pess, prev.optimistic, visiting)

    def optimistic_set(cur):
        """Optimistic side, computed on demand at selection time."""
        seed = cur.pessimistic | cur.visiting
        imm_o = immediate_expand(ctx, cur.pessimistic, "optimistic")
        ret_o = stochastic_return(seed, imm_o | seed, model)
        return stochastic_arrival(cur.pessimistic, ret_o, model)

    def sample_at(cell):
        pt = indexer.point_of(cell)
        q = ground_safety(world, pt)
        y = q + env_rng.normal(0.0, np.sqrt(world.obs_noise_var))
        trajectory.append(
            {
                "state": pt.tolist(),
                "action": "sample",
                "arrival": pt.tolist(),
                "true_q": q,
                "sampled_q": y,
                "violated": False,
            }
        )
        if predictor.add(pt, y, thinning=cfg.thinning):
            tracker.update_batch(predictor.means(), predictor.variances(), cfg.beta)

    for _ in range(cfg.max_iterations):
        if is_ours:
            sets = pessimistic_update(sets)
            sp_mask = sets.pessimistic.mask
            certified = sets.visiting.mask
            edge_ok = np.all(certified[supp] | ~smask, axis=2)
        else:
            sp_mask = tracker.upper <= cfg.threshold
            certified = sp_mask
            edge_ok = None

        def edges_of(s):
            out = []
            for a in range(len(ACTIONS)):
                t = model.expected(s, a)
                if t == s:
                    continue
                if is_ours:
                    if edge_ok[s, a] and certified[t]:
                        out.append((a, t))
                elif certified[t]:
                    out.append((a, t))
            return out

        # target bookkeeping: keep the current target while it stays a
        # sensible expander; re-select only when it is consumed or invalid
        if target is not None:
            width_ok = tracker.upper[target] - tracker.lower[target] > cfg.delta
            if target == current or not sp_mask[target] or not (
                width_ok or target == goal_cell
            ):
                target = None
                plan = []

        action = None
        while True:
            if plan:
                s, a = plan[0]
                if s != current:
                    plan = []
                    replans += 1
                    continue
                ok = (
                    edge_ok[s, a] and certified[model.expected(s, a)]
                    if is_ours
                    else certified[model.expected(s, a)]
                )
                if ok:
                    action = a
                    break
                plan = []
                replans += 1
                continue
            if target is None:
                so_mask = (
                    optimistic_set(sets).mask
                    if is_ours
                    else tracker.lower <= cfg.threshold
                )
                target = select_target(
                    selector,
                    sp_mask,
                    so_mask,
                    tracker.upper,
                    tracker.lower,
                    cfg.lipschitz,
                    cfg.threshold,
                    indexer.coords,
                    goal_index=goal_cell,
                    exclude=tried,
                )
                if target is None:
                    break
            new_plan = plan_path(current, target, edges_of, indexer.n_states)
            if new_plan is None:
                tried.add(target)
                target = None
                if len(tried) > 12:
                    break
                continue
            if not new_plan:
                break  # already at the target: sample here
            plan = new_plan

        if action is None:
            if target is None:
                strikes += 1
                tried.clear()
                if strikes >= STUCK_STRIKES:
                    outcome = "stuck"
                    break
            else:
                strikes = 0
            sample_at(current)
            if target is not None and target == current:
                target = None
            continue

        strikes = 0
        tried.clear()
        obs = ground_step_discrete(
            world, indexer.point_of(current), ACTIONS[action], cfg.p_intended, step, env_rng
        )
        arrival = indexer.index_of(obs.state)
        trajectory.append(
            {
                "state": indexer.point_of(current).tolist(),
                "action": ACTIONS[action],
                "arrival": obs.state.tolist(),
                "true_q": ground_safety(world, obs.state),
                "sampled_q": obs.safety_sample,
                "violated": obs.violated,
            }
        )
        visited.add(arrival)
        intended = model.expected(current, action)
        if arrival == intended and plan:
            plan = plan[1:]
        else:
            plan = []
            if arrival != intended:
                replans += 1
        current = arrival
        if obs.violated:
            outcome = "violation"
            break
        if world.at_goal(obs.state):
            outcome = "success"
            break
        if predictor.add(indexer.point_of(current), obs.safety_sample, thinning=cfg.thinning):
            tracker.update_batch(predictor.means(), predictor.variances(), cfg.beta)

    return TrialRecord(
        layout=world.name,
        seed=seed,
        case="discrete",
        method=cfg.method,
        config_hash=cfg.config_hash,
        outcome=outcome,
        steps=len(trajectory),
        states_explored=len(visited),
        replans=replans,
        trajectory=trajectory,
    )


# --------------------------------------------------------------------------
# continuous case
# --------------------------------------------------------------------------


class _NodeStats:
    """Lazily evaluated per-node bound statistics over lattice positions.

    Far from all training data the moments collapse to the prior, so
    nodes beyond `far_radius` are resolved analytically instead of
    numerically; near nodes are evaluated in batches and cached for the
    lifetime of this object (one GP version).
    """

    def __init__(self, gp: GpModel, positions, believed_var, use_moments):
        self.gp = gp
        self.positions = positions
        self.use_moments = use_moments
        n = positions.shape[0]
        self.mu = np.full(n, np.nan)
        self.sig = np.full(n, np.nan)
        self.imm_mu = np.full(n, np.nan)
        self.imm_sig = np.full(n, np.nan)
        self.prior_sig = float(np.sqrt(gp.params.signal_variance))
        self.table = IsotropicMomentTable(gp, believed_var) if use_moments else None
        self.tree = cKDTree(gp.inputs)
        l2 = float(gp.params.lengthscales[0]) ** 2
        coef = 0.5 / (l2 + believed_var)
        bnorm = float(np.sum(np.abs(gp.coeffs))) * gp.params.signal_variance
        # beyond this radius every data contribution is below 1e-9
        self.far_radius = float(np.sqrt(max(np.log(max(bnorm, 1.0) / 1e-9), 1.0) / coef))
        self._far = None

    def far_mask(self):
        if self._far is None:
            d, _ = self.tree.query(self.positions, k=1)
            self._far = d > self.far_radius
        return self._far

    def _ensure(self, ids, mu, sig, evaluate):
        ids = np.asarray(ids, dtype=int)
        need = ids[np.isnan(mu[ids])]
        if need.size == 0:
            return
        far = self.far_mask()[need]
        far_ids = need[far]
        mu[far_ids] = self.gp.prior_mean
        sig[far_ids] = self.prior_sig
        near = need[~far]
        if near.size:
            m, v = evaluate(self.positions[near])
            mu[near] = m
            sig[near] = np.sqrt(np.maximum(v, 0.0))

    def arrival(self, ids):
        if not self.use_moments:
            return self.immediate(ids)
        self._ensure(ids, self.mu, self.sig, self.table.query)
        return self.mu, self.sig

    def immediate(self, ids):
        self._ensure(
            ids, self.imm_mu, self.imm_sig, lambda P: posterior_batch(self.gp, P)
        )
        return self.imm_mu, self.imm_sig


def _grow_mask(graph: LatticeGraph, root, passes):
    """Flood fill from `root` through nodes accepted by `passes(ids)`."""
    mask = np.zeros(graph.n, dtype=bool)
    mask[root] = True
    frontier = [root]
    while frontier:
        cand = set()
        for z in frontier:
            for a, x in graph.out_edges(z):
                if not mask[x]:
                    cand.add(x)
        if not cand:
            break
        cand = np.array(sorted(cand), dtype=int)
        ok = passes(cand)
        accepted = cand[ok]
        mask[accepted] = True
        frontier = list(accepted)
    return mask


class _ContinuousEngine:
    """Shared lattice-based loop for the continuous and object cases."""

    def __init__(self, cfg, world, layout_key, seed):
        self.cfg = cfg
        self.world = world
        self.env_rng, self.alg_rng = trial_rngs(seed, layout_key)
        self.replans = 0
        self.trajectory = []
        self.visited = set()

    # -- hooks implemented per case ----------------------------------------

    def node_bounds(self, graph, ids, beta, kind):
        raise NotImplementedError

    def check_point(self, point, beta, mode):
        raise NotImplementedError

    def env_step(self, action):
        raise NotImplementedError

    def absorb(self, obs):
        raise NotImplementedError

    def at_goal(self, point):
        raise NotImplementedError

    def heuristic(self, X):
        raise NotImplementedError

    def build_graph(self, current):
        raise NotImplementedError

    def action_delta(self, a):
        raise NotImplementedError

    def goal_node(self, graph):
        return None

    def begin_cycle(self):
        pass

    # -- main loop -----------------------------------------------------------

    def run(self, layout, seed, case):
        cfg = self.cfg
        q_adj = cfg.threshold - cfg.lipschitz * cfg.d_max / 2.0
        selector = TargetSelector(
            heuristic=self.heuristic, delta=cfg.delta, alpha_bucket=cfg.step
        )
        current = np.asarray(self.start_point(), dtype=float)
        self._current = current
        self.visited.add(_quantize(current, cfg.step / 2.0))
        outcome = "stuck"
        strikes = 0
        plan_actions = []
        plan_nodes = []
        plan_node_ids = []
        blocked = set()  # per-cycle nodes whose pre-step check failed
        cycle_beta = cfg.beta
        steps = 0
        while steps < cfg.max_iterations:
            if not plan_actions:
                self.begin_cycle()
                graph = self.build_graph(current)

                def try_beta(b):
                    masks = self.masks(graph, b, q_adj)
                    tgt = select_target(
                        selector,
                        masks[0],
                        masks[1],
                        masks[2],
                        masks[3],
                        cfg.lipschitz,
                        cfg.threshold,
                        graph.positions,
                        goal_index=self.goal_node(graph),
                    )
                    return tgt, masks

                # beta decays multiplicatively while selection is empty and
                # resets at the next expansion; the decay ladder is walked by
                # bisection (smaller beta only enlarges the candidate sets)
                beta = cfg.beta
                target, (sp, so, upper, lower) = try_beta(beta)
                if target is None and cfg.beta_scaling and cfg.beta_scale < 1.0:
                    n_steps = int(
                        np.ceil(
                            np.log(cfg.beta_min / cfg.beta) / np.log(cfg.beta_scale)
                        )
                    )
                    ladder = [
                        max(cfg.beta_min, cfg.beta * cfg.beta_scale**k)
                        for k in range(1, max(n_steps, 1) + 1)
                    ]
                    lo, hi = 0, len(ladder) - 1
                    found = None
                    tgt_lo, masks_lo = try_beta(ladder[hi])
                    if tgt_lo is not None:
                        found = (hi, tgt_lo, masks_lo)
                        while lo < found[0]:
                            mid = (lo + found[0]) // 2
                            tgt_m, masks_m = try_beta(ladder[mid])
                            if tgt_m is not None:
                                found = (mid, tgt_m, masks_m)
                            else:
                                lo = mid + 1
                    if found is not None:
                        beta = ladder[found[0]]
                        target = found[1]
                        sp, so, upper, lower = found[2]
                if target is None or target in blocked:
                    strikes += 1
                    if strikes >= STUCK_STRIKES:
                        outcome = "stuck"
                        break
                    obs = self.observe_in_place(current)
                    steps += 1
                    self.absorb(obs)
                    blocked.clear()
                    continue
                strikes = 0
                path = plan_path(
                    graph.root,
                    target,
                    lambda s: [
                        (a, t)
                        for a, t in graph.out_edges(s)
                        if sp[t] and t not in blocked
                    ],
                    graph.n,
                )
                if not path:
                    obs = self.observe_in_place(current)
                    steps += 1
                    self.absorb(obs)
                    blocked.clear()
                    continue
                plan_actions = [a for _, a in path]
                plan_nodes = [graph.positions[t] for t, _ in path[1:]] + [
                    graph.positions[target]
                ]
                plan_node_ids = [t for t, _ in path[1:]] + [target]
                cycle_beta = beta
            a = plan_actions[0]
            intended = np.asarray(current) + self.action_delta(a)
            checked = self.check_point(intended, cycle_beta, "pessimistic")
            if not checked:
                # blocking the arrival node forces the replan to route around
                # it (or give up and sample) instead of spinning in place
                if plan_node_ids:
                    blocked.add(plan_node_ids[0])
                plan_actions = []
                self.replans += 1
                continue
            obs = self.env_step(a)
            steps += 1
            row = {
                "state": list(map(float, np.asarray(current))),
                "action": self.action_name(a),
                "arrival": list(map(float, obs.state)),
                "true_q": self.true_q(obs),
                "sampled_q": obs.safety_sample,
                "violated": obs.violated,
            }
            self.trajectory.append(row)
            self.visited.add(_quantize(obs.state, cfg.step / 2.0))
            current = np.asarray(obs.state)
            self._current = current
            if obs.violated:
                outcome = "violation"
                break
            if self.at_goal(current):
                outcome = "success"
                break
            self.absorb(obs)
            blocked.clear()
            expected_arrival = plan_nodes[0]
            plan_actions = plan_actions[1:]
            plan_nodes = plan_nodes[1:]
            plan_node_ids = plan_node_ids[1:]
            if plan_actions and (
                float(np.linalg.norm(current - expected_arrival)) > 0.9 * cfg.step
            ):
                plan_actions = []
                self.replans += 1
            if self.pose_changed():
                plan_actions = []
        return TrialRecord(
            layout=layout,
            seed=seed,
            case=case,
            method=cfg.method,
            config_hash=cfg.config_hash,
            outcome=outcome,
            steps=steps,
            states_explored=len(self.visited),
            replans=self.replans,
            trajectory=self.trajectory,
        )

    def pose_changed(self):
        return False

    def action_name(self, a):
        return ACTIONS[a]

    def true_q(self, obs):
        raise NotImplementedError

    def observe_in_place(self, current):
        raise NotImplementedError

    def start_point(self):
        raise NotImplementedError

    def masks(self, graph, beta, q_adj):
        raise NotImplementedError


class _GroundContinuousEngine(_ContinuousEngine):
    def __init__(self, world: GroundWorld, cfg, seed):
        super().__init__(cfg, world, f"{world.name}/continuous", seed)
        self.model = GaussianTransition(
            expected_fn=lambda x, a: np.asarray(x, dtype=float)
            + cfg.step * env_mod.ACTION_DELTAS[ACTIONS[a]],
            cov_fn=lambda x, a: cfg.believed_noise_var * np.eye(2),
            actions=[0, 1, 2, 3],
        )
        self.gp = None
        self._stats = None

    def start_point(self):
        w = self.world
        r = w.start_radius * np.sqrt(self.env_rng.random())
        th = self.env_rng.random() * 2 * np.pi
        start = w.start_center + r * np.array([np.cos(th), np.sin(th)])
        for p in _seed_points_disc(w.start_center, w.start_radius, self.cfg.step / 2, w):
            y = ground_safety(w, p) + self.env_rng.normal(
                0.0, np.sqrt(w.obs_noise_var)
            )
            self._add_sample(p, y)
        return start

    def _add_sample(self, x, y):
        if self.gp is None:
            self.gp = fit(
                np.asarray(x)[None, :], [y], self.cfg.kernel, self.cfg.prior_mean
            )
        else:
            self.gp = add_observation(self.gp, x, y, thinning=self.cfg.thinning)
        self._stats = None

    def build_graph(self, current):
        w = self.world
        return LatticeGraph.build(current, self.model, w.in_bounds)

    def action_delta(self, a):
        return self.cfg.step * env_mod.ACTION_DELTAS[ACTIONS[a]]

    def masks(self, graph, beta, q_adj):
        use_moments = self.cfg.method == "ours"
        if self._stats is None or self._stats.positions is not graph.positions:
            self._stats = _NodeStats(
                self.gp, graph.positions, self.cfg.believed_noise_var, use_moments
            )
        st = self._stats

        def passes_p(ids):
            mu, sig = st.arrival(ids)
            return mu[ids] + beta * sig[ids] <= q_adj

        def passes_o(ids):
            mu, sig = st.arrival(ids)
            return mu[ids] - beta * sig[ids] <= q_adj

        sp = _grow_mask(graph, graph.root, passes_p)
        so = _grow_mask(graph, graph.root, passes_o)
        so |= sp
        # selection consumes the same stochastic-bound field as the sets
        mu = np.where(np.isnan(st.mu), self.gp.prior_mean, st.mu)
        sig = np.where(np.isnan(st.sig), st.prior_sig, st.sig)
        return sp, so, mu + beta * sig, mu - beta * sig

    def goal_node(self, graph):
        i = graph.nearest_node(self.world.goal_center)
        d = float(np.linalg.norm(graph.positions[i] - self.world.goal_center))
        return i if d <= self.world.goal_radius else None

    def check_point(self, point, beta, mode):
        if not self.world.in_bounds(point):
            return False
        if self.cfg.method == "ours":
            cov = sigma_max(self.model, point, [])
            mean, var = moment_matched_posterior(
                self.gp, GaussianBelief(point, cov)
            )
        else:
            mean, var = posterior(self.gp, point)
        gamma = 1.0 if mode == "pessimistic" else -1.0
        q_adj = self.cfg.threshold - self.cfg.lipschitz * self.cfg.d_max / 2.0
        return mean + gamma * beta * np.sqrt(max(var, 0.0)) <= q_adj

    def env_step(self, action):
        return ground_step_continuous(
            self.world,
            self._current,
            ACTIONS[action],
            self.cfg.step,
            self.cfg.env_noise_var,
            self.env_rng,
        )

    def observe_in_place(self, current):
        q = ground_safety(self.world, current)
        y = q + self.env_rng.normal(0.0, np.sqrt(self.world.obs_noise_var))
        row = {
            "state": list(map(float, current)),
            "action": "sample",
            "arrival": list(map(float, current)),
            "true_q": q,
            "sampled_q": y,
            "violated": False,
        }
        self.trajectory.append(row)
        return env_mod.Observation(np.asarray(current, float), y, False)

    def absorb(self, obs):
        self._add_sample(obs.state, obs.safety_sample)

    def at_goal(self, point):
        return self.world.at_goal(point)

    def heuristic(self, X):
        return np.linalg.norm(X - self.world.goal_center, axis=1)

    def true_q(self, obs):
        return ground_safety(self.world, obs.state)


def run_continuous_trial(world: GroundWorld, cfg, seed: int) -> TrialRecord:
    return _GroundContinuousEngine(world, cfg, seed).run(world.name, seed, "continuous")


# --------------------------------------------------------------------------
# object case
# --------------------------------------------------------------------------


class _ObjectStats:
    """Cached per-node, per-object moment statistics on a fixed lattice.

    Stats are keyed by the object's GP version and pose version; a new
    sample only perturbs predictions within a kernel-local radius of
    it, so stale entries farther away are refreshed lazily by stamp
    without re-evaluation.
    """

    def __init__(self, n_nodes, n_objects):
        self.mu = np.full((n_objects, n_nodes), np.nan)
        self.sig = np.full((n_objects, n_nodes), np.nan)
        self.imm_mu = np.full((n_objects, n_nodes), np.nan)
        self.imm_sig = np.full((n_objects, n_nodes), np.nan)
        self.stamp = np.full((n_objects, n_nodes), -1, dtype=np.int64)
        self.imm_stamp = np.full((n_objects, n_nodes), -1, dtype=np.int64)


class _ObjectEngine(_ContinuousEngine):
    def __init__(self, world: ObjectWorld, cfg, seed):
        super().__init__(cfg, world, f"{world.name}/object", seed)
        self.sim = None
        self.n_obj = len(world.objects)
        self.models = [None] * self.n_obj
        self.tables = [None] * self.n_obj
        self.versions = [0] * self.n_obj
        self.pose_versions = [0] * self.n_obj
        self.frames = [o.position.copy() for o in world.objects]
        self.added_log = [[] for _ in range(self.n_obj)]  # rel input per version
        self._trees = [None] * self.n_obj
        self._far_radii = [None] * self.n_obj
        self._gram_inv = [None] * self.n_obj
        self._pair_buf = [None] * self.n_obj  # capacity-doubling pair matrix
        self._near_state = [None] * self.n_obj
        self._lattice_tree = None
        self._imm_pred = [None] * self.n_obj  # per-object lattice predictors
        self._imm_pose = [None] * self.n_obj
        self._pose_dirty = False
        l2 = float(cfg.kernel.lengthscales[0]) ** 2
        self._pair_c = pair_coefficient(l2, cfg.believed_noise_var)
        self.far_keys = [dict() for _ in range(self.n_obj)]
        self.graph = None
        self.stats = None
        l2 = float(cfg.kernel.lengthscales[0]) ** 2
        self.refresh_radius = 6.0 * np.sqrt(l2 + 2 * cfg.believed_noise_var)
        self.model = GaussianTransition(
            expected_fn=lambda x, a: np.asarray(x, dtype=float)
            + cfg.step * OBJ_ACTION_DELTAS[OBJ_ACTIONS[a]],
            cov_fn=lambda x, a: cfg.believed_noise_var * np.eye(2),
            actions=[0, 1, 2, 3],
        )

    # -- sampling ------------------------------------------------------------

    MID_FIELD = 0.06
    MID_GRID = 0.01
    FAR_FIELD = 0.12
    FAR_GRID = 0.02

    def _add_object_sample(self, i, rel, y):
        rel = np.asarray(rel, dtype=float)
        dist = float(np.linalg.norm(rel))
        if dist > self.MID_FIELD:
            # away from the interaction zone the field varies slowly, so
            # samples are kept on progressively coarser grids
            grid = self.FAR_GRID if dist > self.FAR_FIELD else self.MID_GRID
            key = (round(grid, 4),) + _quantize(rel, grid)
            stored = self.far_keys[i].get(key)
            noise_std = np.sqrt(self.cfg.kernel.noise_variance)
            if stored is not None and abs(stored - y) < noise_std:
                return
            self.far_keys[i][key] = y
        if self.models[i] is None:
            self.models[i] = fit(rel[None, :], [y], self.cfg.kernel, self.cfg.prior_mean)
            self._gram_inv[i] = RunningGramInverse(self.models[i])
            buf = np.zeros((64, 64))
            buf[0, 0] = 1.0
            self._pair_buf[i] = buf
        else:
            before = self.models[i].n
            prev_inputs = self.models[i].inputs
            self.models[i] = add_observation(
                self.models[i], rel, y, thinning=self.cfg.thinning
            )
            if self.models[i].n == before:
                return
            model = self.models[i]
            cross = kernel_matrix(prev_inputs, rel[None, :], model.params)[:, 0]
            self._gram_inv[i].extend(
                model,
                cross,
                model.params.signal_variance + model.params.noise_variance,
            )
            n = before
            buf = self._pair_buf[i]
            if n + 1 > buf.shape[0]:
                bigger = np.zeros((buf.shape[0] * 2, buf.shape[0] * 2))
                bigger[:n, :n] = buf[:n, :n]
                buf = self._pair_buf[i] = bigger
            row = np.exp(
                -0.5
                * self._pair_c
                * np.sum((prev_inputs - rel) ** 2, axis=1)
            )
            buf[n, :n] = row
            buf[:n, n] = row
            buf[n, n] = 1.0
        self.versions[i] += 1
        self.tables[i] = None
        self._trees[i] = None
        self._far_radii[i] = None
        self.added_log[i].append(rel)

    def absorb(self, obs):
        for i, rel, y in obs.per_object:
            self._add_object_sample(i, rel, y)
        # pose bookkeeping
        for i in range(self.n_obj):
            pos = self.sim.positions[i]
            if float(np.linalg.norm(pos - self.frames[i])) > 1e-3:
                self.frames[i] = pos.copy()
                self.pose_versions[i] += 1
                self._pose_dirty = True

    def pose_changed(self):
        dirty = self._pose_dirty
        self._pose_dirty = False
        return dirty

    def begin_cycle(self):
        pass

    # -- geometry ------------------------------------------------------------

    def start_point(self):
        w = self.world
        off = (self.env_rng.random(2) * 2.0 - 1.0) * w.start_halfwidth
        start = w.start_center + off
        self.sim = ObjectSim(w, start)
        # seed the object GPs with a small cross around the start
        for d in [np.zeros(2)] + [
            0.02 * v for v in (np.array([1.0, 0]), np.array([-1.0, 0]),
                               np.array([0, 1.0]), np.array([0, -1.0]))
        ]:
            p = start + d
            if not w.in_bounds(p):
                continue
            _, per = self.sim.safety(p)
            noises = self.env_rng.standard_normal(self.n_obj) * np.sqrt(
                w.obs_noise_var
            )
            for i in range(self.n_obj):
                rel = p - self.sim.positions[i]
                self._add_object_sample(i, rel, float(per[i] + noises[i]))
        return start

    def build_graph(self, current):
        if self.graph is None:
            self.graph = LatticeGraph.build(current, self.model, self.world.in_bounds)
            self.stats = _ObjectStats(self.graph.n, self.n_obj)
            self._lattice_tree = cKDTree(self.graph.positions)
            self._root = 0
        else:
            self._root = self.graph.nearest_node(current)
            self.graph.root = self._root
        return self.graph

    def action_delta(self, a):
        return self.cfg.step * OBJ_ACTION_DELTAS[OBJ_ACTIONS[a]]

    def action_name(self, a):
        return OBJ_ACTIONS[a]

    # -- statistics ----------------------------------------------------------

    def _object_table(self, i):
        if self.tables[i] is None and self.models[i] is not None:
            n = self.models[i].n
            self.tables[i] = IsotropicMomentTable(
                self.models[i],
                self.cfg.believed_noise_var,
                gram_inv=self._gram_inv[i].matrix,
                pair_g=self._pair_buf[i][:n, :n],
            )
        return self.tables[i]

    def _tree(self, i):
        if self._trees[i] is None:
            self._trees[i] = cKDTree(self.models[i].inputs)
        return self._trees[i]

    def _refresh(self, i, ids, arrival: bool):
        """Evaluate stale stats for object i at the given node ids.

        Stats stale only by a handful of GP versions are kept (with a
        fresh stamp) when every recently added input is farther than the
        kernel-local refresh radius; predictions there moved by less
        than float noise.
        """
        st = self.stats
        mu = st.mu if arrival else st.imm_mu
        sig = st.sig if arrival else st.imm_sig
        stamp = st.stamp if arrival else st.imm_stamp
        version = np.int64(self.versions[i]) * 1000003 + self.pose_versions[i]
        ids = np.asarray(ids, dtype=int)
        stale = ids[stamp[i, ids] != version]
        if stale.size == 0:
            return
        model = self.models[i]
        if model is None:
            mu[i, stale] = self.cfg.prior_mean
            sig[i, stale] = np.sqrt(self.cfg.kernel.signal_variance)
            stamp[i, stale] = version
            return
        # settle nodes whose stats predate only local, far-away additions
        old = stamp[i, stale]
        same_pose = (old >= 0) & (old % 1000003 == self.pose_versions[i])
        lag = np.where(same_pose, self.versions[i] - old // 1000003, 10**9)
        candidates = stale[(lag > 0) & (lag <= 20)]
        if candidates.size:
            rel_c = self.graph.positions[candidates] - self.frames[i]
            v0 = int(np.min(self.versions[i] - lag[(lag > 0) & (lag <= 20)]))
            recent = np.asarray(self.added_log[i][v0:], dtype=float)
            d2 = np.min(
                np.sum(
                    (rel_c[:, None, :] - recent[None, :, :]) ** 2, axis=2
                ),
                axis=1,
            )
            settled = candidates[d2 > self.refresh_radius**2]
            stamp[i, settled] = version
            stale = ids[stamp[i, ids] != version]
            if stale.size == 0:
                return
        rel = self.graph.positions[stale] - self.frames[i]
        d, _ = self._tree(i).query(rel, k=1)
        far = d > self._far_radius(i, arrival)
        far_ids = stale[far]
        mu[i, far_ids] = model.prior_mean
        sig[i, far_ids] = np.sqrt(model.params.signal_variance)
        near = stale[~far]
        if near.size:
            rel_near = self.graph.positions[near] - self.frames[i]
            if arrival and self.cfg.method == "ours":
                m, v = self._object_table(i).query(rel_near)
            else:
                m, v = posterior_batch(model, rel_near)
            mu[i, near] = m
            sig[i, near] = np.sqrt(np.maximum(v, 0.0))
        stamp[i, stale] = version

    def _far_radius(self, i, arrival):
        key = 0 if arrival else 1
        cached = self._far_radii[i]
        if cached is None:
            cached = [None, None]
            self._far_radii[i] = cached
        if cached[key] is None:
            model = self.models[i]
            l2 = float(model.params.lengthscales[0]) ** 2
            smear = self.cfg.believed_noise_var if arrival else 0.0
            coef = 0.5 / (l2 + smear)
            bnorm = float(np.sum(np.abs(model.coeffs))) * model.params.signal_variance
            cached[key] = float(
                np.sqrt(max(np.log(max(bnorm, 1.0) / 1e-9), 1.0) / coef)
            )
        return cached[key]

    def _near_ids(self, i, arrival: bool):
        """Lattice nodes within the far radius of object i's data.

        The mask grows incrementally with each added input (the lattice
        is static); it is rebuilt from scratch when the object moved or
        the far radius grew materially.  A superset is sound: extra
        nodes are merely evaluated instead of defaulted to the prior.
        """
        state = self._near_state[i]
        radius = self._far_radius(i, True)  # arrival radius covers both
        rebuild = (
            state is None
            or state["pose"] != self.pose_versions[i]
            or radius > state["radius"] * 1.1
        )
        if rebuild:
            rel = self.graph.positions - self.frames[i]
            d, _ = self._tree(i).query(rel, k=1)
            state = {
                "pose": self.pose_versions[i],
                "radius": radius,
                "version": self.versions[i],
                "mask": d <= radius,
            }
            self._near_state[i] = state
        elif state["version"] < self.versions[i]:
            for rel in self.added_log[i][state["version"]:]:
                ids = self._lattice_tree.query_ball_point(
                    np.asarray(rel) + self.frames[i], state["radius"]
                )
                state["mask"][ids] = True
            state["version"] = self.versions[i]
        return np.flatnonzero(state["mask"])

    def _agg(self, ids, beta, arrival: bool, gamma: float):
        st = self.stats
        mu = st.mu if arrival else st.imm_mu
        sig = st.sig if arrival else st.imm_sig
        worst = np.full(len(ids), -np.inf)
        for i in range(self.n_obj):
            self._refresh(i, ids, arrival)
            worst = np.maximum(worst, mu[i, ids] + gamma * beta * sig[i, ids])
        return worst

    def _bound_fields(self, beta, arrival: bool):
        """Aggregated worst-case upper/lower bound arrays over all nodes.

        Nodes beyond every object's far radius carry the prior bound;
        near nodes are refreshed in one batch per object.
        """
        st = self.stats
        mu = st.mu if arrival else st.imm_mu
        sig = st.sig if arrival else st.imm_sig
        prior_sd = np.sqrt(self.cfg.kernel.signal_variance)
        up = np.full(self.graph.n, -np.inf)
        lo = np.full(self.graph.n, -np.inf)
        for i in range(self.n_obj):
            if self.models[i] is None:
                up = np.maximum(up, self.cfg.prior_mean + beta * prior_sd)
                lo = np.maximum(lo, self.cfg.prior_mean - beta * prior_sd)
                continue
            near = self._near_ids(i, arrival)
            self._refresh(i, near, arrival)
            mu_i = np.full(self.graph.n, float(self.models[i].prior_mean))
            sig_i = np.full(self.graph.n, prior_sd)
            mu_i[near] = mu[i, near]
            sig_i[near] = sig[i, near]
            up = np.maximum(up, mu_i + beta * sig_i)
            lo = np.maximum(lo, mu_i - beta * sig_i)
        return up, lo

    def _imm_fields(self, beta):
        """Worst-case immediate GP bounds per node from lattice predictors."""
        prior_sd = np.sqrt(self.cfg.kernel.signal_variance)
        up = np.full(self.graph.n, -np.inf)
        lo = np.full(self.graph.n, -np.inf)
        for i in range(self.n_obj):
            model = self.models[i]
            if model is None:
                up = np.maximum(up, self.cfg.prior_mean + beta * prior_sd)
                lo = np.maximum(lo, self.cfg.prior_mean - beta * prior_sd)
                continue
            pred = self._imm_pred[i]
            if pred is None or self._imm_pose[i] != self.pose_versions[i]:
                pred = GridPredictor.attach(
                    model, self.graph.positions - self.frames[i]
                )
                self._imm_pred[i] = pred
                self._imm_pose[i] = self.pose_versions[i]
            else:
                pred.sync_append(model)
            m = pred.means()
            sd = np.sqrt(pred.variances())
            up = np.maximum(up, m + beta * sd)
            lo = np.maximum(lo, m - beta * sd)
        return up, lo

    def masks(self, graph, beta, q_adj):
        use_moments = self.cfg.method == "ours"
        arr_up, arr_lo = self._bound_fields(beta, use_moments)
        pass_p = arr_up <= q_adj
        pass_o = arr_lo <= q_adj
        sp = _grow_mask(graph, graph.root, lambda ids: pass_p[ids])
        so = _grow_mask(graph, graph.root, lambda ids: pass_o[ids])
        so |= sp
        upper, lower = self._imm_fields(beta)
        return sp, so, upper, lower

    def goal_node(self, graph):
        # the goal is a half-plane; head for the nearest node past it
        ids = np.flatnonzero(graph.positions[:, 0] >= self.world.goal_x)
        if ids.size == 0:
            return None
        d = np.linalg.norm(graph.positions[ids] - self._current, axis=1)
        return int(ids[np.argmin(d)])

    def check_point(self, point, beta, mode):
        if not self.world.in_bounds(point):
            return False
        gamma = 1.0 if mode == "pessimistic" else -1.0
        q_adj = self.cfg.threshold - self.cfg.lipschitz * self.cfg.d_max / 2.0
        worst = -np.inf
        for i in range(self.n_obj):
            model = self.models[i]
            rel = np.asarray(point) - self.frames[i]
            if model is None:
                mean, var = self.cfg.prior_mean, self.cfg.kernel.signal_variance
            elif self.cfg.method == "ours":
                mean, var = self._object_table(i).query_one(rel)
            else:
                mean, var = posterior(model, rel)
            worst = max(worst, mean + gamma * beta * np.sqrt(max(var, 0.0)))
        return worst <= q_adj

    def env_step(self, action):
        return self.sim.step(OBJ_ACTIONS[action], self.env_rng)

    def observe_in_place(self, current):
        total, per = self.sim.safety()
        noises = self.env_rng.standard_normal(self.n_obj + 1) * np.sqrt(
            self.world.obs_noise_var
        )
        per_object = tuple(
            (i, tuple(np.asarray(current) - self.sim.positions[i]), float(per[i] + noises[i]))
            for i in range(self.n_obj)
        )
        row = {
            "state": list(map(float, current)),
            "action": "sample",
            "arrival": list(map(float, current)),
            "true_q": total,
            "sampled_q": float(total + noises[-1]),
            "violated": False,
        }
        self.trajectory.append(row)
        return env_mod.Observation(
            np.asarray(current, float), row["sampled_q"], False, per_object
        )

    def at_goal(self, point):
        return self.world.at_goal(point)

    def heuristic(self, X):
        return np.maximum(0.0, self.world.goal_x - np.atleast_2d(X)[:, 0])

    def true_q(self, obs):
        total, _ = self.sim.safety(obs.state)
        return total


def run_object_trial(world: ObjectWorld, cfg, seed: int) -> TrialRecord:
    return _ObjectEngine(world, cfg, seed).run(world.name, seed, "object")


def run_trial(world, cfg, seed: int) -> TrialRecord:
    """Dispatch one seeded trial according to the configured case."""
    if cfg.case == "discrete":
        return run_discrete_trial(world, cfg, seed)
    if cfg.case == "continuous":
        return run_continuous_trial(world, cfg, seed)
    if cfg.case == "object":
        return run_object_trial(world, cfg, seed)
    raise ContractViolation(f"unknown case {cfg.case!r}")
