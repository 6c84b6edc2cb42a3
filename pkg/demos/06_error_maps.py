"""
Error maps: equivariant network vs plain-convolution ablation
=============================================================

Run the same random inputs through the model and through its rotated
inputs, rotate the first output back, and look at the difference.  The
maps are written as PGM files next to this script.
"""
from pathlib import Path

import numpy as np

from rediffuse import dataio
from rediffuse.harness import error_map
from rediffuse.suites import random_denoiser
from rediffuse.unet import UNetConfig

out_dir = Path(__file__).with_name("out")
out_dir.mkdir(exist_ok=True)
pair = dataio.gen_pair(1)
a = pair.source_a[..., None].astype(np.float32)
b = pair.source_b[..., None].astype(np.float32)

for label, cfg in (("equivariant", UNetConfig()), ("plain", UNetConfig(equivariant=False))):
    model = random_denoiser(cfg, 0)
    for k in (1, 2, 3):
        _, _, scaled, mx = error_map(model, a, b, k)
        dataio.write_pgm(out_dir / f"errmap_{label}_k{k}.pgm", scaled, comments=[f"max={mx:.3g}"])
        print(f"{label:12s} {90 * k:3d} deg  max |difference| = {mx:.3g}")
