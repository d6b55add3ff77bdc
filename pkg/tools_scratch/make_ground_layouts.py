"""One-off generator for the 8 ground layouts; validates each and writes
fixture files. Not part of the package."""

import sys

import numpy as np

sys.path.insert(0, "/root/pkg/src")

from ssx.environments import (
    GridIndexer,
    GroundWorld,
    Hazard,
    _connected,
    ground_safety_batch,
    parse_ground_fixture,
    validate_ground_world,
)

# Each layout: (start x y r, goal x y r, [(hx, hy, cost, cutoff), ...])
# Walls carry one on-line blocker plus trap gaps (~1.4 spacing) that a
# straight-line planner can squeeze through but whose flanks are lethal;
# wall ends stay roundable through quiet terrain.
LAYOUTS = {
    "ground-01": {
        "start": (-8.0, -8.0, 1.0),
        "goal": (8.0, 8.0, 1.0),
        "hazards": [
            (0.0, 0.0, 16.0, 3.0),      # on-line blocker
            (-1.0, 1.0, 20.0, 3.0),     # trap gap partner (NW)
            (1.0, -1.0, 14.0, 3.0),     # trap gap partner (SE)
            (4.5, 1.0, 12.0, 2.5),
        ],
    },
    "ground-02": {
        "start": (-8.0, 0.0, 1.0),
        "goal": (8.0, 0.0, 1.0),
        "hazards": [
            (0.0, 0.0, 16.0, 3.0),
            (0.0, 1.4, 20.0, 3.0),
            (0.0, -1.4, 14.0, 2.5),
            (0.0, 4.2, 12.0, 2.8),
            (0.0, -4.2, 12.0, 2.8),
        ],
    },
    "ground-03": {
        "start": (0.0, -8.0, 1.0),
        "goal": (0.0, 8.0, 1.0),
        "hazards": [
            (0.0, 0.0, 25.0, 3.5),
            (1.4, 0.0, 16.0, 3.0),
            (-1.4, 0.0, 16.0, 3.0),
            (5.0, 0.5, 10.0, 2.5),
        ],
    },
    "ground-04": {
        "start": (-8.0, -8.0, 1.0),
        "goal": (8.0, 8.0, 1.0),
        "hazards": [
            (-1.0, -1.0, 14.0, 3.0),
            (0.4, 0.4, 18.0, 3.0),
            (1.8, 1.8, 14.0, 3.0),
        ],
    },
    "ground-05": {
        "start": (-8.0, 8.0, 1.0),
        "goal": (8.0, -8.0, 1.0),
        "hazards": [
            (0.0, 0.0, 30.0, 4.0),
            (-1.4, 0.6, 22.0, 3.0),
            (1.4, -0.6, 22.0, 3.0),
            (-4.6, 3.2, 9.0, 2.2),
        ],
    },
    "ground-06": {
        "start": (-8.0, 0.0, 1.0),
        "goal": (8.0, 0.0, 1.0),
        "hazards": [
            (-0.2, 0.0, 12.0, 2.8),
            (-0.2, 1.4, 12.0, 2.8),
            (-0.2, -3.8, 10.0, 2.5),
            (4.0, 2.0, 10.0, 2.5),
            (4.0, -2.4, 12.0, 2.8),
        ],
    },
    "ground-07": {
        "start": (0.0, -8.0, 1.0),
        "goal": (0.0, 8.0, 1.0),
        "hazards": [
            (0.0, -1.0, 16.0, 3.0),
            (-1.3, -0.4, 18.0, 3.0),
            (1.3, -1.6, 18.0, 3.0),
            (-0.6, 4.0, 12.0, 2.5),
            (0.8, 4.0, 12.0, 2.5),
        ],
    },
    "ground-08": {
        "start": (-8.0, -4.0, 1.0),
        "goal": (8.0, 4.0, 1.0),
        "hazards": [
            (0.0, 0.0, 20.0, 3.2),
            (-0.7, 1.2, 16.0, 3.0),
            (0.7, -1.2, 16.0, 3.0),
            (-3.0, -2.0, 9.0, 2.2),
            (3.6, 2.4, 9.0, 2.2),
        ],
    },
}


def fixture_text(name, spec):
    lines = [f"name: {name}"]
    sx, sy, sr = spec["start"]
    gx, gy, gr = spec["goal"]
    lines.append(f"start: {sx} {sy} {sr}")
    lines.append(f"goal: {gx} {gy} {gr}")
    for hx, hy, c, d in spec["hazards"]:
        lines.append(f"hazard: {hx} {hy} {c} {d}")
    return "\n".join(lines) + "\n"


def continuous_sanity(world, step=0.5):
    """Wide corridor of q <= 2.0 connecting start and goal at step 0.5."""
    indexer = GridIndexer(world.low, world.high, step)
    q = ground_safety_batch(world, indexer.coords)
    per = indexer.per_axis
    quiet = (q <= 2.0).reshape(per, per)
    padded = np.pad(quiet, 1, mode="edge")
    wide = quiet.copy()
    for di in (0, 1, 2):
        for dj in (0, 1, 2):
            wide &= padded[di : di + per, dj : dj + per]
    return _connected(wide, indexer, world.start_center, world.goal_center)


def trap_gap_report(world):
    """Cells passable at q<4 whose one-slip flank exceeds the threshold."""
    indexer = GridIndexer(world.low, world.high, 0.25)
    q = ground_safety_batch(world, indexer.coords)
    passable = (q > 2.0) & (q < 4.0)
    lethal_count = 0
    for z in np.flatnonzero(passable):
        nb = indexer.neighbors_within(int(z), 0.36)
        if np.any(q[nb] > 4.0):
            lethal_count += 1
    return lethal_count


def main():
    import pathlib

    out_dir = pathlib.Path("/root/pkg/src/ssx/data/fixtures")
    ok = True
    for name, spec in LAYOUTS.items():
        text = fixture_text(name, spec)
        world = parse_ground_fixture(text)
        try:
            rep = validate_ground_world(world, 0.25, 1.75, 2.8)
        except Exception as e:
            print(f"{name}: FAIL {e}")
            ok = False
            continue
        cont = continuous_sanity(world)
        traps = trap_gap_report(world)
        print(
            f"{name}: audit_worst={rep['audit_worst_q']:.2f} "
            f"seg_max={rep['max_segment_q']:.1f} cont_detour={cont} trap_cells={traps}"
        )
        if not cont:
            ok = False
            print(f"{name}: FAIL continuous corridor")
            continue
        (out_dir / f"{name}.txt").write_text(text)
    print("ALL OK" if ok else "FAILURES PRESENT")


if __name__ == "__main__":
    main()
