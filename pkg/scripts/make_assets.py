"""Regenerate the bundled placeholder assets in ``src/usray/data``.

* ``valve_open.obj`` / ``valve_closed.obj``: two thin rectangular leaflets
  hinged at the same points, hanging straight down (open) or folded towards
  the midline (closed).
* ``ring_reference.pgm`` (+ ``.txt`` sidecar): a synthetic B-mode image of a
  20 mm radius tube with a 3 mm wall, blurred and speckled, standing in for
  an experimental scan. Coordinates are in the original 20 mm scale; runs
  rescale them with ``[reference] factor``.

Usage: ``python scripts/make_assets.py [output_dir]``
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from usray import files

HINGES = ((-5.0, 15.0), (5.0, 15.0))
LEAFLET_LENGTH = 6.0
LEAFLET_THICKNESS = 0.6
DEPTH_Y = 5.0  # half extent across the imaging plane


def _box(p0, p1, thickness, half_y):
    """Eight corners and twelve outward-wound triangles of a slab along p0 -> p1."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = (p1 - p0) / np.linalg.norm(p1 - p0)
    n = np.array([-d[1], d[0]]) * thickness / 2
    quad = [p0 - n, p1 - n, p1 + n, p0 + n]
    verts = [(x, -half_y, z) for x, z in quad] + [(x, half_y, z) for x, z in quad]
    faces = [
        (0, 1, 2), (0, 2, 3),  # y = -half_y
        (4, 6, 5), (4, 7, 6),  # y = +half_y
        (0, 4, 5), (0, 5, 1),
        (1, 5, 6), (1, 6, 2),
        (2, 6, 7), (2, 7, 3),
        (3, 7, 4), (3, 4, 0),
    ]
    return np.array(verts), np.array(faces)


def _orient_outward(verts, faces):
    # flip any face whose normal points towards the slab centroid
    c = verts.mean(axis=0)
    out = []
    for f in faces:
        a, b, cc = verts[list(f)]
        nrm = np.cross(b - a, cc - a)
        out.append(f if np.dot(nrm, (a + b + cc) / 3 - c) > 0 else (f[0], f[2], f[1]))
    return np.array(out)


def valve_obj(tips) -> str:
    lines = ["# two-leaflet valve placeholder, mm"]
    base = 0
    for hinge, tip in zip(HINGES, tips):
        v, f = _box(hinge, tip, LEAFLET_THICKNESS, DEPTH_Y)
        f = _orient_outward(v, f)
        lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in v]
        lines += [f"f {a + 1 + base} {b + 1 + base} {c + 1 + base}" for a, b, c in f]
        base += len(v)
    return "\n".join(lines) + "\n"


def leaflet_tips(open_: bool):
    out = []
    for hx, hz in HINGES:
        s = np.sign(hx)
        # open: hanging almost straight down; closed: folded to nearly meet
        ang = np.radians(5.0 if open_ else 48.0)
        out.append((hx - s * LEAFLET_LENGTH * np.sin(ang), hz + LEAFLET_LENGTH * np.cos(ang)))
    return out


def ring_reference(seed: int = 2024, dr: float = 40.0):
    """Synthetic tube scan: bright upper wall, shadowed lower wall, speckle."""
    rng = np.random.default_rng(seed)
    x = np.arange(-30.0, 30.0 + 1e-9, 0.2)
    z = np.arange(10.0, 70.0 + 1e-9, 0.2)
    xx, zz = np.meshgrid(x, z)
    cx, cz, r_out, wall = 0.0, 40.0, 20.0, 3.0
    r = np.hypot(xx - cx, zz - cz)
    phi = np.arctan2(xx - cx, cz - zz)  # 0 at the top of the ring
    facing = np.exp(-((phi / 0.7) ** 2))
    shadow = 0.08 + 0.92 * (np.abs(phi) < np.pi / 2)
    radial = np.exp(-(((r - r_out) / 0.35) ** 2)) + 0.45 * np.exp(-(((r - (r_out - wall)) / 0.35) ** 2))
    amp = radial * (facing + 0.05) * shadow
    speckle = ndimage.gaussian_filter(rng.standard_normal(xx.shape), (1.0, 2.0)) + 1j * ndimage.gaussian_filter(
        rng.standard_normal(xx.shape), (1.0, 2.0)
    )
    speckle /= np.sqrt(np.mean(np.abs(speckle) ** 2))
    env = ndimage.gaussian_filter(amp, (1.5, 3.0)) * np.abs(speckle) + 3e-3 * np.abs(rng.standard_normal(xx.shape))
    gray = np.clip(1.0 + 20.0 * np.log10(env / env.max()) / dr, 0.0, 1.0)
    return gray, x, z


def main(out_dir=None):
    out = Path(out_dir) if out_dir else Path(__file__).resolve().parents[1] / "src" / "usray" / "data"
    out.mkdir(parents=True, exist_ok=True)
    (out / "valve_open.obj").write_text(valve_obj(leaflet_tips(True)))
    (out / "valve_closed.obj").write_text(valve_obj(leaflet_tips(False)))
    gray, x, z = ring_reference()
    written = files.write_image(out / "ring_reference", gray, x, z, 40.0)
    written[1].unlink()  # the PGM plus sidecar is the shipped format
    print(f"wrote assets to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
