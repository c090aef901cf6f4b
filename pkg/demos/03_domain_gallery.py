"""Render every synthetic capture site and print sample stamps as ASCII.

Also writes one PGM image per domain under demos/out/ so you can open the
raw renders in any image viewer.

Run:  python demos/03_domain_gallery.py
"""

from pathlib import Path

import numpy as np

from msdalab.cam import Heatmap, export_pgm
from msdalab.data import default_roster, generate_domain

SHADES = " .:-=+*#%@"
OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)


def ascii_art(img: np.ndarray) -> str:
    rows = []
    for row in img[::2]:  # halve vertically so the aspect looks right
        rows.append("".join(SHADES[min(9, int(v * 9.999))] for v in row))
    return "\n".join(rows)


for spec in default_roster():
    ds = generate_domain(spec, 8, seed=0)
    ok = ds.images[0, 0]
    bad = ds.images[4, 0]
    print(f"=== {spec.name}: bg={spec.background_level} blur={spec.blur_radius} "
          f"noise={spec.noise_sigma} rot={spec.rotation_degrees} contrast={spec.glyph_contrast}")
    print("-- OK --")
    print(ascii_art(ok))
    print("-- NOT-OK --")
    print(ascii_art(bad))
    print()
    for tag, img in (("ok", ok), ("notok", bad)):
        export_pgm(Heatmap(img, 0, 0, img.shape), OUT / f"domain_{spec.name}_{tag}.pgm")

print(f"wrote per-domain PGM renders to {OUT}/")
