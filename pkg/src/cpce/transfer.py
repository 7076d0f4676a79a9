"""2D -> 3D inflation of a trained CPCE generator.

A planar 3x3 filter ``H`` becomes a 3x3x3 filter whose center depth plane is
``H`` and whose outer planes are zero, so the inflated network reproduces the
2D network on the center slice of any input stack.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import SliceStack
from .model import (PLANAR, VOLUMETRIC, ConfigurationError, GeneratorParams,
                    depth_schedule_for, generator_forward)

DEFAULT_TOLERANCE = 1e-5


@dataclass
class InflationPlan:
    target_d: int
    layers_to_inflate: tuple[int, ...]
    source_epoch: float | None = None
    source: dict = field(default_factory=dict)

    @classmethod
    def for_slices(cls, target_d: int, source_epoch=None) -> "InflationPlan":
        depth_schedule_for(target_d)
        return cls(target_d, tuple(range(1, (target_d - 1) // 2 + 1)), source_epoch)


def inflate_filter(H) -> torch.Tensor:
    """``[c_in, c_out, 3, 3]`` -> ``[c_in, c_out, 3, 3, 3]`` with depth planes (0, H, 0).

    A planar filter stored with a singleton depth axis (``[c_in, c_out, 1, 3, 3]``)
    is accepted too.
    """
    H = torch.as_tensor(H)
    if H.dim() == 5 and H.shape[2] == 1:
        H = H[:, :, 0]
    if H.dim() != 4 or tuple(H.shape[2:]) != (3, 3):
        raise ValueError(f"expected a [c_in, c_out, 3, 3] filter, got {tuple(H.shape)}")
    B = torch.zeros(*H.shape[:2], 3, 3, 3, dtype=H.dtype)
    B[:, :, 1] = H
    return B


def center_plane(B) -> torch.Tensor:
    """Inverse of :func:`inflate_filter` on its image: the middle depth plane."""
    B = torch.as_tensor(B)
    return B[:, :, B.shape[2] // 2]


def inflate_generator(params2d: GeneratorParams, target_d: int) -> GeneratorParams:
    """Inflate the first ``(target_d - 1) / 2`` encoder convs; copy everything else."""
    if any(m != PLANAR for m in params2d.depth_schedule):
        raise ConfigurationError(f"source generator is not 2D: {params2d.depth_schedule}")
    if target_d == 1:
        warnings.warn("target_d=1: inflation is a no-op", stacklevel=2)
        return params2d.clone()
    plan = InflationPlan.for_slices(target_d)
    w = {k: v.detach().clone() for k, v in params2d.weights.items()}
    for k in plan.layers_to_inflate:
        w[f"conv{k}.weight"] = inflate_filter(w[f"conv{k}.weight"])
    return GeneratorParams(w, depth_schedule_for(target_d))


def extract_2d(params3d: GeneratorParams) -> GeneratorParams:
    """Center-plane extraction of every volumetric layer (a 2D generator)."""
    w = {k: v.detach().clone() for k, v in params3d.weights.items()}
    for k, mode in enumerate(params3d.depth_schedule, start=1):
        if mode == VOLUMETRIC:
            w[f"conv{k}.weight"] = center_plane(w[f"conv{k}.weight"]).unsqueeze(2).contiguous()
    return GeneratorParams(w, depth_schedule_for(1))


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    tol: float
    passed: bool

    def line(self) -> str:
        return f"max_abs_diff={self.max_abs_diff:.3e} tol={self.tol:.0e} {'PASS' if self.passed else 'FAIL'}"


def verify_equivalence(params2d: GeneratorParams, params3d: GeneratorParams, volume,
                       tol: float = DEFAULT_TOLERANCE) -> EquivalenceReport:
    """Compare the 3D network on a stack against the 2D network on its center slice.

    ``volume`` is a :class:`SliceStack`, a ``[d, h, w]`` array or a batch
    ``[B, d, h, w]``.
    """
    x = volume.data if isinstance(volume, SliceStack) else volume
    x = torch.as_tensor(np.asarray(x, dtype=np.float32)) if not isinstance(x, torch.Tensor) else x
    d = x.shape[-3]
    if d != params3d.slices:
        raise ConfigurationError(f"stack has {d} slices, 3D generator expects {params3d.slices}")
    if params2d.slices != 1:
        raise ConfigurationError("reference generator must be 2D")
    center = x[..., d // 2:d // 2 + 1, :, :]
    with torch.no_grad():
        out3 = generator_forward(params3d, x)
        out2 = generator_forward(params2d, center)
    diff = float((out3 - out2).abs().max())
    return EquivalenceReport(diff, tol, diff <= tol)
