"""
Pixel and feature metrics
=========================

PSNR and SSIM compare pixels, perceptual loss compares feature maps,
and the texture loss compares Gram matrices of feature maps on tiles.
"""

import numpy as np
from scipy import ndimage

from cpce.data import generate_phantom_volume, simulate_low_dose
from cpce.losses import random_feature_extractor
from cpce.metrics import METRIC_TAXONOMY, perceptual_metric, psnr, ssim, texture_metric

ref = generate_phantom_volume(3, n_slices=1, H=128, W=128).data[0]
noisy = simulate_low_dose(generate_phantom_volume(3, n_slices=1, H=128, W=128), seed=0).data[0]
blurred = ndimage.gaussian_filter(noisy, 1.5)

ext = random_feature_extractor(0)

print("metric  what/domain")
for name, (kind, domain) in METRIC_TAXONOMY.items():
    print(f"{name:6s}  {kind}/{domain}")

for label, img in (("noisy", noisy), ("blurred", blurred)):
    print(f"{label:8s} psnr={psnr(img, ref):6.2f} ssim={ssim(img, ref):.3f} "
          f"pl={perceptual_metric(ext, img, ref):9.2f} tml={texture_metric(ext, img, ref):9.4f}")

print("identity:", psnr(ref, ref), ssim(ref, ref), perceptual_metric(ext, ref, ref))
