"""Tabletop safe-object world with a quasi-static pushing surrogate.

A disc effector moves on a restricted planar workspace between rows of
cylindrical objects of hidden mass and centre-of-mass height.  Safety
per object is its tip angle (degrees) plus a closeness cost; the world
safety is the maximum over objects.

The contact surrogate is deliberately simple and fully declared here:
pushing translates an object along the contact normal proportionally
to a mobility factor ``1/(1+mass)`` and sets its tip angle
proportionally to penetration, mass and centre-of-mass height, with a
small truncated-Gaussian jitter.  Tip angles relax by half per
contact-free step, and object-object contacts resolve by translation
only.  Its contracts are monotonicity (heavier or higher-COM objects
tip more per push) and the ability to produce violations under
sustained pushing; it makes no claim of contact-physics fidelity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .environments import Observation
from .errors import FixtureError

OBJ_ACTIONS = ("up", "down", "left", "right")
# object-case axes: up/down advance/retreat along x, left/right move in y
OBJ_ACTION_DELTAS = {
    "up": np.array([1.0, 0.0]),
    "down": np.array([-1.0, 0.0]),
    "left": np.array([0.0, -1.0]),
    "right": np.array([0.0, 1.0]),
}

OBJECT_RADIUS = 0.05
OBJECT_HEIGHT = 0.20
EFFECTOR_RADIUS = 0.02

# Surrogate constants.  The tip gain is calibrated on the heavy anchor: a
# full-step (0.01 m) push on a 5 kg object with com_height 0.8 tips ~6 deg.
TIP_GAIN = 150.0  # degrees per (metre * kg * com fraction)
TIP_JITTER_STD = 0.5  # degrees, truncated at 3 sigma
TIP_RELAX = 0.5  # per contact-free step


def mobility(mass: float) -> float:
    return 1.0 / (1.0 + mass)


@dataclass(frozen=True)
class ObjectSpec:
    position: np.ndarray
    mass: float
    com_height: float  # fraction of object height
    radius: float = OBJECT_RADIUS
    height: float = OBJECT_HEIGHT

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        if not (0.25 <= self.mass <= 5.0):
            raise FixtureError("object mass must lie in [0.25, 5] kg")
        if not (0.0 < self.com_height <= 1.0):
            raise FixtureError("com_height must be a fraction of the height")


@dataclass(frozen=True)
class ObjectWorld:
    name: str
    objects: tuple
    x_range: tuple
    y_range: tuple
    start_center: np.ndarray
    start_halfwidth: float
    goal_x: float = 0.75
    threshold: float = 23.0
    tip_limit: float = 18.0
    max_closeness: float = 5.0
    step: float = 0.01
    effector_height: float = 0.15
    obs_noise_var: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "start_center", np.asarray(self.start_center, float))
        if self.tip_limit + self.max_closeness != self.threshold:
            raise FixtureError(
                "threshold must equal tip limit plus maximum closeness"
            )

    def in_bounds(self, p) -> bool:
        p = np.asarray(p)
        return bool(
            self.x_range[0] <= p[0] <= self.x_range[1]
            and self.y_range[0] <= p[1] <= self.y_range[1]
        )

    def at_goal(self, p) -> bool:
        return float(np.asarray(p)[0]) >= self.goal_x


def per_object_safety(world: ObjectWorld, effector, position, tip_angle) -> float:
    d = float(np.linalg.norm(np.asarray(effector) - np.asarray(position)))
    return tip_angle + 1.0 / (1.0 / world.max_closeness + d)


class ObjectSim:
    """Mutable simulation instance owned by a single trial."""

    def __init__(self, world: ObjectWorld, effector_start):
        self.world = world
        self.effector = np.asarray(effector_start, dtype=float)
        self.positions = np.array([o.position for o in world.objects], dtype=float)
        self.tips = np.zeros(len(world.objects))
        self.masses = np.array([o.mass for o in world.objects])
        self.coms = np.array([o.com_height for o in world.objects])

    @property
    def n_objects(self):
        return len(self.world.objects)

    def safety(self, effector=None):
        """(total, per-object list) of true safety values."""
        eff = self.effector if effector is None else np.asarray(effector)
        per = [
            per_object_safety(self.world, eff, self.positions[i], float(self.tips[i]))
            for i in range(self.n_objects)
        ]
        return max(per), per

    def step(self, action: str, rng) -> Observation:
        """Advance the effector one step and resolve contacts.

        Draws a fixed number of random values per call regardless of
        contact outcomes so that paired runs consume identical noise
        streams.
        """
        w = self.world
        jitter = np.clip(
            rng.standard_normal(self.n_objects), -3.0, 3.0
        ) * TIP_JITTER_STD
        per_obs_noise = rng.standard_normal(self.n_objects) * np.sqrt(w.obs_noise_var)
        total_obs_noise = rng.standard_normal() * np.sqrt(w.obs_noise_var)

        intended = self.effector + w.step * OBJ_ACTION_DELTAS[action]
        if w.in_bounds(intended):
            self.effector = intended

        contact_dist = EFFECTOR_RADIUS + OBJECT_RADIUS
        contacted = np.zeros(self.n_objects, dtype=bool)
        for i in range(self.n_objects):
            delta = self.positions[i] - self.effector
            dist = float(np.linalg.norm(delta))
            overlap = contact_dist - dist
            if overlap <= 0:
                continue
            contacted[i] = True
            normal = delta / dist if dist > 1e-12 else np.array([1.0, 0.0])
            self.positions[i] = (
                self.positions[i] + mobility(self.masses[i]) * overlap * normal
            )
            # tip angle is a function of the current penetration; sustained
            # pushing deepens the equilibrium overlap (step / mobility) and
            # drives heavy, top-heavy objects over the tip limit
            tip = TIP_GAIN * overlap * self.masses[i] * self.coms[i] + jitter[i]
            self.tips[i] = max(0.0, tip)
        # object-object contacts: translation only, two resolution passes
        for _ in range(2):
            for i in range(self.n_objects):
                for j in range(self.n_objects):
                    if i == j:
                        continue
                    d = self.positions[j] - self.positions[i]
                    dist = float(np.linalg.norm(d))
                    pen = 2 * OBJECT_RADIUS - dist
                    if pen > 0:
                        n = d / dist if dist > 1e-12 else np.array([1.0, 0.0])
                        self.positions[j] = self.positions[j] + pen * n
        self.tips[~contacted] *= TIP_RELAX

        total, per = self.safety()
        per_object = tuple(
            (
                i,
                tuple(self.effector - self.positions[i]),
                float(per[i] + per_obs_noise[i]),
            )
            for i in range(self.n_objects)
        )
        return Observation(
            state=self.effector.copy(),
            safety_sample=float(total + total_obs_noise),
            violated=bool(total > w.threshold),
            per_object=per_object,
        )


# --- fixtures ---------------------------------------------------------------


def parse_object_fixture(text: str) -> ObjectWorld:
    name = "unnamed"
    objects = []
    x_range = y_range = None
    start = None
    start_hw = 0.05
    goal_x = 0.75
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(":")
        vals = rest.split()
        key = key.strip()
        if key == "name":
            name = rest.strip()
        elif key == "bounds":
            x_range = (float(vals[0]), float(vals[1]))
            y_range = (float(vals[2]), float(vals[3]))
        elif key == "start":
            start = np.array([float(vals[0]), float(vals[1])])
            start_hw = float(vals[2])
        elif key == "goal_x":
            goal_x = float(vals[0])
        elif key == "object":
            x, y, mass, com = map(float, vals)
            objects.append(ObjectSpec(np.array([x, y]), mass, com))
        else:
            raise FixtureError(f"unknown fixture key {key!r}")
    if x_range is None or start is None or not objects:
        raise FixtureError("fixture must define bounds, start and objects")
    return ObjectWorld(
        name=name,
        objects=tuple(objects),
        x_range=x_range,
        y_range=y_range,
        start_center=start,
        start_halfwidth=start_hw,
        goal_x=goal_x,
    )


def validate_object_world(world: ObjectWorld) -> dict:
    """Construction validation: safe start, forced interaction, a pushable
    route, and violation producibility on the heaviest object."""
    # start area far from all objects and truly safe
    sim = ObjectSim(world, world.start_center)
    total, _ = sim.safety()
    if total > world.threshold:
        raise FixtureError(f"{world.name}: start position unsafe")
    dmin = min(
        float(np.linalg.norm(world.start_center - o.position)) for o in world.objects
    )
    if dmin < 0.12:
        raise FixtureError(f"{world.name}: start too close to an object")

    # the straight corridor must be blocked: no free-passage gap through the
    # rows (gaps between object centres and walls below the squeeze width)
    squeeze = 2 * (OBJECT_RADIUS + EFFECTOR_RADIUS)
    xs = sorted(set(round(float(o.position[0]), 3) for o in world.objects))
    for row_x in xs:
        row = sorted(
            float(o.position[1]) for o in world.objects
            if abs(float(o.position[0]) - row_x) < 0.08
        )
        edges = [world.y_range[0] - OBJECT_RADIUS + EFFECTOR_RADIUS] + row + [
            world.y_range[1] + OBJECT_RADIUS - EFFECTOR_RADIUS
        ]
        gaps = np.diff(edges)
        if np.any(gaps >= squeeze + 0.01):
            raise FixtureError(
                f"{world.name}: row at x={row_x} leaves a free gap"
            )

    # violation producibility: sustained pushing on the heaviest object
    heavy = int(np.argmax([o.mass * o.com_height for o in world.objects]))
    sim = ObjectSim(world, world.objects[heavy].position - np.array([0.08, 0.0]))
    rng = np.random.default_rng(0)
    contacts = 0
    for _ in range(40):
        obs = sim.step("up", rng)
        if sim.tips[heavy] > 0:
            contacts += 1
        if obs.violated:
            break
    if not obs.violated or contacts > 8:
        raise FixtureError(
            f"{world.name}: heaviest object cannot produce a violation quickly"
        )

    # a pushable route: some object with bounded plow cost
    eq_tips = [
        TIP_GAIN * (world.step / mobility(o.mass)) * o.mass * o.com_height
        for o in world.objects
    ]
    if min(eq_tips) + world.max_closeness > world.threshold - 4.0:
        raise FixtureError(f"{world.name}: no safely pushable object")
    return {"heavy_contacts": contacts, "min_eq_tip": float(min(eq_tips))}
