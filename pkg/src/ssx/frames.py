"""Object-centric coordinate frames and worst-case bound aggregation.

Safety around a movable object depends on the effector pose relative
to the object, so each object gets its own GP over relative
coordinates.  Queries in absolute coordinates are transformed into
every object frame and the worst (largest) probabilistic bound decides
the aggregate indicator, which matches intersecting the per-object
safe sets while solving a single expansion problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gp import GpModel, posterior
from .moments import GaussianBelief, moment_matched_posterior

POSE_TOL = 1e-3  # metres / radians of motion that invalidate cached bounds


@dataclass(frozen=True)
class RelativeFrame:
    position: np.ndarray
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.heading), np.sin(self.heading)
        return np.array([[c, -s], [s, c]])


def to_relative(frame: RelativeFrame, point) -> np.ndarray:
    """Absolute point expressed in the object frame."""
    p = np.asarray(point, dtype=float) - frame.position
    if frame.heading == 0.0:
        return p
    return frame.rotation().T @ p


def to_absolute(frame: RelativeFrame, point) -> np.ndarray:
    p = np.asarray(point, dtype=float)
    if frame.heading != 0.0:
        p = frame.rotation() @ p
    return p + frame.position


def rotate_cov(frame: RelativeFrame, cov) -> np.ndarray:
    """Covariance conjugated into the object frame (identity for isotropic)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if frame.heading == 0.0:
        return cov
    R = frame.rotation()
    return R.T @ cov @ R


class ObjectGpRegistry:
    """Per-object GP models keyed by object id, with pose bookkeeping.

    Cached per-node bound evaluations elsewhere key on
    ``pose_version``; the version bumps whenever an object moves beyond
    `POSE_TOL` in position or heading.
    """

    def __init__(self):
        self.models: dict[int, GpModel] = {}
        self.frames: dict[int, RelativeFrame] = {}
        self.pose_version: dict[int, int] = {}

    def ids(self):
        return sorted(self.models)

    def set_model(self, obj_id: int, model: GpModel):
        self.models[obj_id] = model

    def update_pose(self, obj_id: int, frame: RelativeFrame) -> bool:
        """Record a pose; returns True when caches must invalidate."""
        old = self.frames.get(obj_id)
        moved = old is None or (
            np.linalg.norm(old.position - frame.position) > POSE_TOL
            or abs(old.heading - frame.heading) > POSE_TOL
        )
        self.frames[obj_id] = frame
        if moved:
            self.pose_version[obj_id] = self.pose_version.get(obj_id, 0) + 1
        return moved


def aggregate_bounds(
    registry: ObjectGpRegistry, query, sigma_max, beta: float, threshold: float, mode: str
) -> bool:
    """Worst-case moment-matched indicator across all object models.

    For each object the absolute query (and covariance) is moved into
    that object's frame and the mode-appropriate confidence bound is
    evaluated; the indicator holds only if the worst bound stays at or
    below the threshold.
    """
    gamma = {"pessimistic": 1.0, "optimistic": -1.0}[mode]
    worst = -np.inf
    for obj_id in registry.ids():
        model = registry.models[obj_id]
        frame = registry.frames[obj_id]
        rel = to_relative(frame, query)
        if sigma_max is None or not np.any(sigma_max):
            mean, var = posterior(model, rel)
        else:
            cov = rotate_cov(frame, sigma_max)
            mean, var = moment_matched_posterior(model, GaussianBelief(rel, cov))
        worst = max(worst, mean + gamma * beta * np.sqrt(max(var, 0.0)))
    return worst <= threshold
