"""Synthesize every degradation type on one procedural scene and save a contact sheet.

Run:  python demos/01_degradations.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from clusir.degradations import LABELS, degrade, procedural_image, regenerate, write_png
from clusir.metrics import psnr

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/degradations")
clean = procedural_image(128, rng=11)

# One draw per task. The sample remembers the seed that produced it,
# so regenerate() rebuilds it bit for bit.
tiles = [clean]
for label in LABELS:
    s = degrade(clean, label, rng=np.random.default_rng(5))
    assert np.array_equal(regenerate(s).degraded, s.degraded)
    print(f"{label:>9}: PSNR vs clean {psnr(s.degraded, clean):6.2f} dB  params {s.params}")
    tiles.append(s.degraded)

sheet = np.concatenate(tiles, axis=2)
write_png(out / "contact_sheet.png", sheet)
print(f"wrote {out / 'contact_sheet.png'} (clean, then {', '.join(LABELS)})")
