"""
Synthetic phantoms and low-dose noise
=====================================

Volumes are built from smooth ellipsoid-like structures so neighbouring
slices are correlated, then degraded with image-domain Poisson plus
Gaussian noise.  PNGs are written to ./demo_out for a quick look.
"""

from pathlib import Path

import numpy as np

from cpce.data import NoiseParams, export_png, extract_patches, generate_phantom_volume, simulate_low_dose
from cpce.metrics import psnr, ssim

out = Path("demo_out")
out.mkdir(exist_ok=True)

nd = generate_phantom_volume(seed=0, n_slices=8, H=128, W=128)
print("volume", nd.shape, "range", nd.data.min(), nd.data.max())

# lower dose means fewer photons per voxel and a noisier image
for I0 in (1000.0, 140.0, 40.0):
    ld = simulate_low_dose(nd, NoiseParams(I0, 0.01), seed=1)
    print(f"I0={I0:6.0f}  PSNR={psnr(ld.data[4], nd.data[4]):5.2f} dB  SSIM={ssim(ld.data[4], nd.data[4]):.3f}")

ld = simulate_low_dose(nd, seed=1)
export_png(nd.data[4], out / "normal_dose.png")
export_png(ld.data[4], out / "low_dose.png")

# registered 64x64 training pairs, 3 slices deep on the low-dose side
patches = extract_patches(ld, nd, d=3, count=16, seed=2)
print("patches", patches.lowdose.shape, "->", patches.normaldose.shape)
print("center slice PSNR", np.mean([psnr(patches.lowdose[k, 1], patches.normaldose[k]) for k in range(16)]))
