"""Ground-robot world: hazard safety field, grid indexing and stepping.

The world is a bounded 2-D square with point hazards.  Safety at a
point is the sum, over hazards whose cutoff ball contains the point,
of an inverse-square cost that peaks at the hazard centre.  A state is
unsafe when that value exceeds the world threshold.

Two transition variants are provided: a discrete grid walk where the
intended cell is reached with probability ``p`` and the two flanking
diagonals share the remainder, and a continuous step with truncated
Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FixtureError
from .transitions import DiscreteTransition, sample_truncated_noise

ACTIONS = ("up", "down", "left", "right")
ACTION_DELTAS = {
    "up": np.array([0.0, 1.0]),
    "down": np.array([0.0, -1.0]),
    "left": np.array([-1.0, 0.0]),
    "right": np.array([1.0, 0.0]),
}
# flanking diagonals share the slip probability mass
ACTION_DIAGONALS = {
    "up": (np.array([1.0, 1.0]), np.array([-1.0, 1.0])),
    "down": (np.array([1.0, -1.0]), np.array([-1.0, -1.0])),
    "left": (np.array([-1.0, 1.0]), np.array([-1.0, -1.0])),
    "right": (np.array([1.0, 1.0]), np.array([1.0, -1.0])),
}


@dataclass(frozen=True)
class Hazard:
    center: np.ndarray
    peak_cost: float
    cutoff: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.peak_cost <= 0:
            raise FixtureError("hazard peak cost must be positive")
        if self.cutoff <= 0:
            raise FixtureError("hazard cutoff must be positive")


@dataclass(frozen=True)
class GroundWorld:
    name: str
    hazards: tuple
    goal_center: np.ndarray
    goal_radius: float
    start_center: np.ndarray
    start_radius: float = 1.0
    low: float = -10.0
    high: float = 10.0
    threshold: float = 4.0
    obs_noise_var: float = 0.001

    def __post_init__(self):
        object.__setattr__(self, "goal_center", np.asarray(self.goal_center, float))
        object.__setattr__(self, "start_center", np.asarray(self.start_center, float))
        if not self.in_bounds(self.goal_center):
            raise FixtureError("goal outside world bounds")
        if not self.in_bounds(self.start_center):
            raise FixtureError("start outside world bounds")

    def in_bounds(self, x) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.low) and np.all(x <= self.high))

    def at_goal(self, x) -> bool:
        return float(np.linalg.norm(np.asarray(x) - self.goal_center)) <= self.goal_radius


@dataclass(frozen=True)
class Observation:
    """Arrival state, a noisy safety reading, and the true-violation flag."""

    state: np.ndarray
    safety_sample: float
    violated: bool
    per_object: tuple | None = None


def ground_safety(world: GroundWorld, x) -> float:
    """Sum of indicator-gated inverse-square hazard costs at `x`."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for h in world.hazards:
        d2 = float(np.sum((x - h.center) ** 2))
        if d2 <= h.cutoff * h.cutoff:
            total += 1.0 / (d2 + 1.0 / h.peak_cost)
    return total


def ground_safety_batch(world: GroundWorld, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    total = np.zeros(X.shape[0])
    for h in world.hazards:
        d2 = np.sum((X - h.center) ** 2, axis=1)
        inside = d2 <= h.cutoff * h.cutoff
        total[inside] += 1.0 / (d2[inside] + 1.0 / h.peak_cost)
    return total


def discrete_row(world: GroundWorld, state, action: str, p: float, step: float):
    """Arrival distribution [(point, prob)] for one grid action.

    Invalid actions (intended cell out of bounds) are inactions.  A
    diagonal that would exit the bounds is clamped back inside, its
    probability mass merging with whatever cell it lands on.
    """
    state = np.asarray(state, dtype=float)
    intended = state + step * ACTION_DELTAS[action]
    if not world.in_bounds(intended):
        return [(state, 1.0)]
    d1, d2 = ACTION_DIAGONALS[action]
    out = {}

    def put(pt, prob):
        pt = np.clip(pt, world.low, world.high)
        key = tuple(np.round(pt / step).astype(int))
        if key in out:
            out[key] = (out[key][0], out[key][1] + prob)
        else:
            out[key] = (pt, prob)

    put(intended, p)
    put(state + step * d1, (1.0 - p) / 2.0)
    put(state + step * d2, (1.0 - p) / 2.0)
    return [(pt, prob) for pt, prob in out.values()]


def _observe(world: GroundWorld, arrival, rng) -> Observation:
    q = ground_safety(world, arrival)
    noisy = q + rng.normal(0.0, np.sqrt(world.obs_noise_var))
    return Observation(np.asarray(arrival, float), float(noisy), bool(q > world.threshold))


def ground_step_discrete(world, state, action, p, step, rng) -> Observation:
    """Sample one discrete transition and observe safety at the arrival."""
    row = discrete_row(world, state, action, p, step)
    u = rng.random()
    acc = 0.0
    arrival = row[-1][0]
    for pt, prob in row:
        acc += prob
        if u < acc:
            arrival = pt
            break
    return _observe(world, arrival, rng)


def ground_step_continuous(world, state, action, step, noise_var, rng) -> Observation:
    """Expected move plus truncated Gaussian noise, clamped to bounds."""
    state = np.asarray(state, dtype=float)
    intended = state + step * ACTION_DELTAS[action]
    noise = sample_truncated_noise(noise_var * np.eye(2), 3.0, rng)
    if not world.in_bounds(intended):
        arrival = state  # inaction still burns the step's noise draw
    else:
        arrival = np.clip(intended + noise, world.low, world.high)
    return _observe(world, arrival, rng)


class GridIndexer:
    """Bijection between grid coordinates and flat state indices."""

    def __init__(self, low: float, high: float, step: float):
        self.low = low
        self.high = high
        self.step = step
        self.per_axis = int(round((high - low) / step)) + 1
        self.n_states = self.per_axis ** 2
        ax = low + step * np.arange(self.per_axis)
        gx, gy = np.meshgrid(ax, ax, indexing="ij")
        self.coords = np.column_stack([gx.ravel(), gy.ravel()])
        self._disc_cache = {}

    def index_of(self, point) -> int:
        ij = np.round((np.asarray(point) - self.low) / self.step).astype(int)
        if np.any(ij < 0) or np.any(ij >= self.per_axis):
            raise ValueError(f"point {point} outside the grid")
        return int(ij[0] * self.per_axis + ij[1])

    def point_of(self, index: int) -> np.ndarray:
        return self.coords[index]

    def _disc_offsets(self, r_cells: int):
        """Distance-sorted (di, dj, distance) offset arrays for a disc window."""
        got = self._disc_cache.get(r_cells)
        if got is None:
            rng = np.arange(-r_cells, r_cells + 1)
            di = np.repeat(rng, rng.size)
            dj = np.tile(rng, rng.size)
            d = np.sqrt((di * di + dj * dj).astype(float))
            keep = d <= r_cells + 1
            di, dj, d = di[keep], dj[keep], d[keep]
            order = np.argsort(d, kind="stable")
            got = (di[order], dj[order], d[order])
            self._disc_cache[r_cells] = got
        return got

    def neighbors_within(self, index: int, radius: float) -> np.ndarray:
        """All state indices within Euclidean `radius` of `index`."""
        return self.annulus_with_dist(index, -1.0, radius)[0]

    def neighbors_with_dist(self, index: int, radius: float):
        """(indices, distances) of all states within `radius` of `index`."""
        return self.annulus_with_dist(index, -1.0, radius)

    def annulus_with_dist(self, index: int, r_lo: float, r_hi: float):
        """(indices, distances) of states with r_lo < d <= r_hi of `index`."""
        if r_hi < 0 or r_hi < r_lo:
            return np.empty(0, dtype=np.int64), np.empty(0)
        i, j = divmod(int(index), self.per_axis)
        r_cells = int(np.floor(r_hi / self.step + 1e-9))
        di, dj, d = self._disc_offsets(r_cells)
        a = np.searchsorted(d, r_lo / self.step, side="right") if r_lo >= 0 else 0
        b = np.searchsorted(d, r_hi / self.step + 1e-9, side="right")
        ii = i + di[a:b]
        jj = j + dj[a:b]
        ok = (ii >= 0) & (ii < self.per_axis) & (jj >= 0) & (jj < self.per_axis)
        return ii[ok] * self.per_axis + jj[ok], d[a:b][ok] * self.step


def build_discrete_model(world: GroundWorld, indexer: GridIndexer, p: float):
    """Categorical grid model matching `ground_step_discrete` exactly."""
    rows = {}
    step = indexer.step
    for s in range(indexer.n_states):
        pt = indexer.point_of(s)
        for a, name in enumerate(ACTIONS):
            intended = pt + step * ACTION_DELTAS[name]
            if not world.in_bounds(intended):
                continue  # invalid action: implicit self-loop
            row = discrete_row(world, pt, name, p, step)
            rows[(s, a)] = [(indexer.index_of(q), prob) for q, prob in row]
    return DiscreteTransition(indexer.n_states, len(ACTIONS), rows)


def control_invariant_start_cells(
    world: GroundWorld, indexer: GridIndexer, model: DiscreteTransition
) -> np.ndarray:
    """Grid cells of the start disc eroded to a control-invariant core."""
    d = np.linalg.norm(indexer.coords - world.start_center, axis=1)
    mask = d <= world.start_radius
    supp, smask, _, _, _ = model.caches()
    while True:
        ok = np.all(mask[supp] | ~smask, axis=2)  # (S, A) full support inside
        keep = mask & np.any(ok, axis=1)
        if np.array_equal(keep, mask):
            break
        mask = keep
    return np.flatnonzero(mask)


# --- fixtures ---------------------------------------------------------------


def parse_ground_fixture(text: str) -> GroundWorld:
    """Key-value layout format; one `hazard:` line per hazard."""
    name = "unnamed"
    hazards = []
    goal = start = None
    goal_r = start_r = 1.0
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(":")
        vals = rest.split()
        key = key.strip()
        if key == "name":
            name = rest.strip()
        elif key == "hazard":
            x, y, cost, cutoff = map(float, vals)
            hazards.append(Hazard((x, y), cost, cutoff))
        elif key == "goal":
            goal = np.array([float(vals[0]), float(vals[1])])
            goal_r = float(vals[2])
        elif key == "start":
            start = np.array([float(vals[0]), float(vals[1])])
            start_r = float(vals[2])
        else:
            raise FixtureError(f"unknown fixture key {key!r}")
    if goal is None or start is None or not hazards:
        raise FixtureError("fixture must define start, goal and hazards")
    return GroundWorld(
        name=name,
        hazards=tuple(hazards),
        goal_center=goal,
        goal_radius=goal_r,
        start_center=start,
        start_radius=start_r,
    )


def validate_ground_world(
    world: GroundWorld,
    step: float,
    lipschitz: float,
    epsilon: float,
    cert_slack: float = 0.5,
    margin: float = 0.05,
) -> dict:
    """Construction-time layout validation.

    Checks, at grid resolution (dense ``step/4`` sampling for the start
    region):

    * the start region is truly safe everywhere;
    * the straight start-goal segment is blocked (max safety above the
      threshold), so reaching the goal requires a detour;
    * a detour of certifiable cells exists (8-connected path through
      cells whose neighbourhood stays below the certification cap);
    * certification soundness: any state reachable through the
      Lipschitz rule from an eligible source, allowing the bound to
      undershoot truth by `cert_slack`, has true safety below the
      threshold minus `margin`.

    Returns a report dict; raises FixtureError on any failure.
    """
    q_T = world.threshold
    # start region at step/4 resolution
    r = world.start_radius
    ax = np.arange(-r, r + 1e-9, step / 4.0)
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()]) + world.start_center
    pts = pts[np.linalg.norm(pts - world.start_center, axis=1) <= r]
    q_start = ground_safety_batch(world, pts)
    if np.max(q_start) > q_T:
        raise FixtureError(f"{world.name}: start region unsafe (q={q_start.max():.2f})")

    # direct segment blocked
    ts = np.linspace(0, 1, 801)[:, None]
    seg = world.start_center + ts * (world.goal_center - world.start_center)
    q_seg = ground_safety_batch(world, seg)
    if np.max(q_seg) <= q_T:
        raise FixtureError(f"{world.name}: direct start-goal line is not blocked")

    indexer = GridIndexer(world.low, world.high, step)
    q_grid = ground_safety_batch(world, indexer.coords)

    # certification soundness audit
    cap = q_T - epsilon
    eligible = np.flatnonzero(np.maximum(q_grid - cert_slack, 0.0) < cap)
    worst = 0.0
    for z in eligible:
        reach = (cap - max(q_grid[z] - cert_slack, 0.0)) / lipschitz
        if reach <= 0:
            continue
        cand = indexer.neighbors_within(int(z), reach)
        worst = max(worst, float(np.max(q_grid[cand])))
        if worst > q_T - margin:
            raise FixtureError(
                f"{world.name}: certification unsound near state {z} "
                f"(certified cell with q={worst:.3f})"
            )

    # certifiable detour: 8-connected path through quiet cells
    source_cap = cap - lipschitz * step  # sources able to certify one step
    quiet = q_grid <= source_cap
    per = indexer.per_axis
    quiet2d = quiet.reshape(per, per)
    padded = np.pad(quiet2d, 1, mode="edge")
    wide = quiet2d.copy()
    for di in (0, 1, 2):
        for dj in (0, 1, 2):
            wide &= padded[di : di + per, dj : dj + per]
    if not _connected(wide, indexer, world.start_center, world.goal_center):
        raise FixtureError(f"{world.name}: no certifiable detour exists")
    return {
        "max_start_q": float(np.max(q_start)),
        "max_segment_q": float(np.max(q_seg)),
        "audit_worst_q": worst,
    }


def _connected(mask2d, indexer: GridIndexer, a, b) -> bool:
    per = indexer.per_axis
    ia, ja = divmod(indexer.index_of(a), per)
    ib, jb = divmod(indexer.index_of(b), per)
    if not (mask2d[ia, ja] and mask2d[ib, jb]):
        return False
    seen = np.zeros_like(mask2d)
    stack = [(ia, ja)]
    seen[ia, ja] = True
    while stack:
        i, j = stack.pop()
        if (i, j) == (ib, jb):
            return True
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ii, jj = i + di, j + dj
                if 0 <= ii < per and 0 <= jj < per and mask2d[ii, jj] and not seen[ii, jj]:
                    seen[ii, jj] = True
                    stack.append((ii, jj))
    return False
