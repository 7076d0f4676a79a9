"""
Growing a 2D denoiser into a 3D one
===================================

A trained 2D generator is inflated so that it reads a stack of adjacent
slices.  The new depth planes are zero except the center, so the inflated
network reproduces the 2D output exactly before any fine-tuning.
"""

import numpy as np
import torch

from cpce.data import generate_phantom_volume, simulate_low_dose
from cpce.model import build_generator, count_parameters, generator_forward
from cpce.transfer import inflate_filter, inflate_generator, verify_equivalence

# a single 3x3 filter becomes a 3x3x3 filter with two zero planes
H = torch.arange(9.0).reshape(1, 1, 3, 3)
print(inflate_filter(H)[0, 0, :, 1, 1])   # depth profile through the center tap: [0, 4, 0]

g2 = build_generator(1, seed=0)
print("2D parameters:", count_parameters(g2.weights))

clean = generate_phantom_volume(0, n_slices=9, H=96, W=96)
noisy = simulate_low_dose(clean, seed=1)

for d in (3, 5, 7, 9):
    g3 = inflate_generator(g2, d)
    stack = noisy.stack(4, d)
    report = verify_equivalence(g2, g3, stack)
    print(f"d={d} params={count_parameters(g3.weights)} {report.line()}")

# fine-tuning the side planes breaks the equivalence, as it should
g3 = inflate_generator(g2, 3)
with torch.no_grad():
    g3.weights["conv1.weight"][:, :, 0] += 0.05
print("after perturbing:", verify_equivalence(g2, g3, noisy.stack(4, 3)).line())

with torch.no_grad():
    out = generator_forward(g2, torch.from_numpy(noisy.data[4][None, None]))
print("denoised slice shape:", tuple(out.shape), "range:", float(out.min()), float(out.max()))
