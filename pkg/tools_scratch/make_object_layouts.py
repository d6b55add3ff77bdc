"""One-off generator for the 11 object layouts."""

import sys
import pathlib

import numpy as np

sys.path.insert(0, "/root/pkg/src")

from ssx.tabletop import parse_object_fixture, validate_object_world

BOUNDS = (-0.15, 0.85, -0.18, 0.18)
START = (-0.08, 0.0, 0.04)

# masses/coms: below ~3 kg the equilibrium tip stays safe; 4+ kg with a
# high COM violates within a few sustained pushes
LIGHT = [(0.3, 0.25), (0.4, 0.3), (0.5, 0.3), (0.6, 0.35), (0.25, 0.2)]
HEAVY = [(5.0, 0.8), (4.5, 0.75), (4.2, 0.7), (4.8, 0.85)]
MED = [(2.0, 0.5), (2.5, 0.55), (1.5, 0.45)]

rng = np.random.default_rng(7)

LAYOUTS = {}
# six single-row layouts: 3 objects at x=0.35, light door position varies
for k in range(6):
    door = k % 3
    ys = [-0.12, 0.0, 0.12]
    objs = []
    li = LIGHT[k % len(LIGHT)]
    h1 = HEAVY[k % len(HEAVY)]
    h2 = HEAVY[(k + 1) % len(HEAVY)] if k % 2 == 0 else MED[k % len(MED)]
    picks = [h1, h2]
    picks.insert(door, li)
    for y, (m, c) in zip(ys, picks):
        objs.append((0.35, y, m, c))
    LAYOUTS[f"object-{k+1:02d}"] = objs

# five double-row layouts: 3 + 2 objects
for k in range(5):
    door1 = k % 3
    ys1 = [-0.12, 0.0, 0.12]
    li = LIGHT[(k + 2) % len(LIGHT)]
    h1 = HEAVY[(k + 2) % len(HEAVY)]
    m1 = MED[(k + 1) % len(MED)]
    picks1 = [h1, m1]
    picks1.insert(door1, li)
    row1 = [(0.30, y, m, c) for y, (m, c) in zip(ys1, picks1)]
    ys2 = [-0.07, 0.07]
    li2 = LIGHT[(k + 3) % len(LIGHT)]
    h2 = HEAVY[(k + 3) % len(HEAVY)]
    picks2 = [h2, li2] if k % 2 == 0 else [li2, h2]
    row2 = [(0.55, y, m, c) for y, (m, c) in zip(ys2, picks2)]
    LAYOUTS[f"object-{k+7:02d}"] = row1 + row2


def fixture_text(name, objs):
    lines = [f"name: {name}"]
    lines.append(f"bounds: {BOUNDS[0]} {BOUNDS[1]} {BOUNDS[2]} {BOUNDS[3]}")
    lines.append(f"start: {START[0]} {START[1]} {START[2]}")
    lines.append("goal_x: 0.75")
    for x, y, m, c in objs:
        lines.append(f"object: {x} {y} {m} {c}")
    return "\n".join(lines) + "\n"


def main():
    out_dir = pathlib.Path("/root/pkg/src/ssx/data/fixtures")
    ok = True
    for name, objs in LAYOUTS.items():
        text = fixture_text(name, objs)
        world = parse_object_fixture(text)
        try:
            rep = validate_object_world(world)
        except Exception as e:
            ok = False
            print(f"{name}: FAIL {e}")
            continue
        print(f"{name}: ok {rep}")
        (out_dir / f"{name}.txt").write_text(text)
    print("ALL OK" if ok else "FAILURES PRESENT")


if __name__ == "__main__":
    main()
