"""CPCE generator (2D and hybrid 2D/3D) and the WGAN critic.

Both networks are plain forward functions over explicit parameter containers
so that parameters can be inflated, serialized and differentiated without a
module hierarchy. Weight arrays are stored channel-in first:

* encoder conv ``[c_in, c_out, k_d, 3, 3]`` (``k_d`` is 1 for planar layers)
* decoder deconv ``[c_in, c_out, 3, 3]``
* bottleneck ``[c_in, c_out, 1, 1]``
* critic conv ``[c_in, c_out, 3, 3]`` and dense ``[in, out]``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

PLANAR = "planar"
VOLUMETRIC = "volumetric"

VALID_DEPTHS = (1, 3, 5, 7, 9)
N_ENCODER = 4
RECEPTIVE_FIELD = 17

CRITIC_WIDTHS = (64, 64, 128, 128, 256, 256)
CRITIC_STRIDES = (1, 2, 1, 2, 1, 2)
LEAKY_SLOPE = 0.2


class ConfigurationError(ValueError):
    """Inconsistent model configuration (slice count, depth schedule)."""


class ShapeError(ValueError):
    """Input shape incompatible with the network."""


@dataclass(frozen=True)
class ConvLayerSpec:
    name: str
    kernel: tuple[int, int, int]
    out_channels: int
    depth_mode: str = PLANAR
    stride: int = 1
    activation: str = "relu"

    def __post_init__(self):
        k_d = self.kernel[0]
        if self.depth_mode == PLANAR and k_d != 1:
            raise ConfigurationError(f"{self.name}: planar layer needs k_d=1, got {k_d}")
        if self.depth_mode == VOLUMETRIC and k_d != 3:
            raise ConfigurationError(f"{self.name}: volumetric layer needs k_d=3, got {k_d}")


@dataclass
class GeneratorParams:
    """Named weights of the 8-layer CPCE generator plus its depth schedule."""

    weights: dict[str, torch.Tensor]
    depth_schedule: tuple[str, ...]

    @property
    def slices(self) -> int:
        return 1 + 2 * sum(m == VOLUMETRIC for m in self.depth_schedule)

    @property
    def channels(self) -> int:
        return int(self.weights["conv1.weight"].shape[1])

    def layer_specs(self) -> list[ConvLayerSpec]:
        specs = []
        for k, mode in enumerate(self.depth_schedule, start=1):
            w = self.weights[f"conv{k}.weight"]
            specs.append(ConvLayerSpec(f"conv{k}", tuple(w.shape[2:]), w.shape[1], mode))
        return specs

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.weights[name]

    def names(self) -> list[str]:
        return list(self.weights)

    def clone(self) -> "GeneratorParams":
        return GeneratorParams({k: v.detach().clone() for k, v in self.weights.items()},
                               tuple(self.depth_schedule))


@dataclass
class DiscriminatorParams:
    """Named weights of the 6-conv + 2-dense critic."""

    weights: dict[str, torch.Tensor]
    strides: tuple[int, ...] = CRITIC_STRIDES
    padding: int = 0
    patch_size: int = 64

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.weights[name]

    def names(self) -> list[str]:
        return list(self.weights)

    def clone(self) -> "DiscriminatorParams":
        return DiscriminatorParams({k: v.detach().clone() for k, v in self.weights.items()},
                                   tuple(self.strides), self.padding, self.patch_size)


def depth_schedule_for(d: int) -> tuple[str, ...]:
    if d not in VALID_DEPTHS:
        raise ConfigurationError(f"slice count must be one of {VALID_DEPTHS}, got {d}")
    n_vol = (d - 1) // 2
    return (VOLUMETRIC,) * n_vol + (PLANAR,) * (N_ENCODER - n_vol)


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> torch.Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return torch.from_numpy(w.astype(np.float32))


def build_generator(d: int, seed: int, channels: int = 32) -> GeneratorParams:
    """Fresh generator for ``d`` input slices with seeded fan-in normal weights."""
    schedule = depth_schedule_for(d)
    rng = np.random.default_rng(seed)
    w: dict[str, torch.Tensor] = {}
    c_in = 1
    for k, mode in enumerate(schedule, start=1):
        k_d = 3 if mode == VOLUMETRIC else 1
        w[f"conv{k}.weight"] = _he_normal(rng, (c_in, channels, k_d, 3, 3), c_in * k_d * 9)
        w[f"conv{k}.bias"] = torch.zeros(channels)
        c_in = channels
    for k in range(1, 5):
        c_out = 1 if k == 4 else channels
        w[f"deconv{k}.weight"] = _he_normal(rng, (channels, c_out, 3, 3), channels * 9)
        w[f"deconv{k}.bias"] = torch.zeros(c_out)
    for k in range(1, 4):
        w[f"bottleneck{k}.weight"] = _he_normal(rng, (2 * channels, channels, 1, 1), 2 * channels)
        w[f"bottleneck{k}.bias"] = torch.zeros(channels)
    params = GeneratorParams(w, schedule)
    # The single output channel sums nonnegative features, so its sign is nearly
    # constant over the image; a negative draw leaves the final ReLU dead.
    probe = torch.full((1, d, 32, 32), 0.5)
    with torch.no_grad():
        if generator_forward(params, probe, final_relu=False).mean() < 0:
            w["deconv4.weight"].neg_()
    return params


def build_discriminator(seed: int, widths=CRITIC_WIDTHS, strides=CRITIC_STRIDES,
                        fc_units: int = 1024, patch_size: int = 64,
                        padding: int = 0) -> DiscriminatorParams:
    """Fresh critic. Defaults are the full-size critic on 64x64 patches."""
    if len(widths) != 6 or len(strides) != 6:
        raise ConfigurationError("critic has exactly 6 conv layers")
    rng = np.random.default_rng(seed)
    w: dict[str, torch.Tensor] = {}
    c_in, size = 1, patch_size
    for k, (c_out, s) in enumerate(zip(widths, strides), start=1):
        w[f"conv{k}.weight"] = _he_normal(rng, (c_in, c_out, 3, 3), c_in * 9)
        w[f"conv{k}.bias"] = torch.zeros(c_out)
        size = (size + 2 * padding - 3) // s + 1
        if size < 1:
            raise ShapeError(f"patch size {patch_size} collapses at critic conv{k}")
        c_in = c_out
    flat = c_in * size * size
    w["fc1.weight"] = _he_normal(rng, (flat, fc_units), flat)
    w["fc1.bias"] = torch.zeros(fc_units)
    w["fc2.weight"] = _he_normal(rng, (fc_units, 1), fc_units)
    w["fc2.bias"] = torch.zeros(1)
    return DiscriminatorParams(w, tuple(strides), padding, patch_size)


def _as_batch(x, ndim_single: int) -> tuple[torch.Tensor, bool]:
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(getattr(x, "data", x)))
    if x.dim() == ndim_single:
        return x.unsqueeze(0), True
    if x.dim() == ndim_single + 1:
        return x, False
    raise ShapeError(f"expected {ndim_single}-d or batched input, got shape {tuple(x.shape)}")


def _center(t: torch.Tensor) -> torch.Tensor:
    # [B, C, D, H, W] -> [B, C, H, W] at the middle depth
    return t[:, :, t.shape[2] // 2]


def generator_forward(params: GeneratorParams, x, trace: list | None = None,
                      final_relu: bool = True) -> torch.Tensor:
    """Denoise the center slice of a stack.

    ``x`` is ``[d, h, w]`` (or a ``SliceStack``) or a batch ``[B, d, h, w]``;
    the result is ``[h, w]`` or ``[B, h, w]``. If ``trace`` is a list, the
    feature-map shape ``(depth, h, w)`` after every layer is appended to it.
    """
    x, single = _as_batch(x, 3)
    W = params.weights
    d, h, w = x.shape[1:]
    if d != params.slices:
        raise ConfigurationError(
            f"input has {d} slices but depth schedule {params.depth_schedule} expects {params.slices}")
    if h < RECEPTIVE_FIELD or w < RECEPTIVE_FIELD:
        raise ShapeError(f"input {h}x{w} smaller than the {RECEPTIVE_FIELD}x{RECEPTIVE_FIELD} receptive field")
    x = x.to(W["conv1.weight"].dtype)

    skips = []
    if d == 1:
        y = x
        for k in range(1, 5):
            y = F.relu(F.conv2d(y, W[f"conv{k}.weight"][:, :, 0].transpose(0, 1), W[f"conv{k}.bias"]))
            skips.append(y)
            if trace is not None:
                trace.append((1, *y.shape[-2:]))
    else:
        y = x.unsqueeze(1)
        for k in range(1, 5):
            y = F.relu(F.conv3d(y, W[f"conv{k}.weight"].transpose(0, 1), W[f"conv{k}.bias"]))
            skips.append(_center(y))
            if trace is not None:
                trace.append(tuple(y.shape[-3:]))
        y = y[:, :, 0]

    for k in range(1, 4):
        y = F.relu(F.conv_transpose2d(y, W[f"deconv{k}.weight"], W[f"deconv{k}.bias"]))
        y = torch.cat([y, skips[3 - k]], dim=1)
        y = F.relu(F.conv2d(y, W[f"bottleneck{k}.weight"].transpose(0, 1), W[f"bottleneck{k}.bias"]))
        if trace is not None:
            trace.append((1, *y.shape[-2:]))
    y = F.conv_transpose2d(y, W["deconv4.weight"], W["deconv4.bias"])
    if final_relu:
        y = F.relu(y)
    if trace is not None:
        trace.append((1, *y.shape[-2:]))
    y = y[:, 0]
    return y[0] if single else y


def critic_output_size(params: DiscriminatorParams) -> int:
    size = params.patch_size
    for s in params.strides:
        size = (size + 2 * params.padding - 3) // s + 1
    return size


def discriminator_forward(params: DiscriminatorParams, patch) -> torch.Tensor:
    """Critic value(s): scalar for a single ``[64, 64]`` patch, ``[B]`` for a batch."""
    x, single = _as_batch(patch, 2)
    p = params.patch_size
    if tuple(x.shape[1:]) != (p, p):
        raise ShapeError(f"critic expects {p}x{p} patches, got {tuple(x.shape[1:])}")
    W = params.weights
    y = x.to(W["conv1.weight"].dtype).unsqueeze(1)
    for k, s in enumerate(params.strides, start=1):
        y = F.conv2d(y, W[f"conv{k}.weight"].transpose(0, 1), W[f"conv{k}.bias"],
                     stride=s, padding=params.padding)
        y = F.leaky_relu(y, LEAKY_SLOPE)
    y = y.flatten(1)
    y = F.leaky_relu(y @ W["fc1.weight"] + W["fc1.bias"], LEAKY_SLOPE)
    y = (y @ W["fc2.weight"] + W["fc2.bias"])[:, 0]
    return y[0] if single else y


def as_critic(critic) -> Callable[[torch.Tensor], torch.Tensor]:
    """Callable view of a critic: params are wrapped, callables pass through."""
    if isinstance(critic, DiscriminatorParams):
        return lambda x: discriminator_forward(critic, x)
    if callable(critic):
        return critic
    raise TypeError(f"not a critic: {type(critic).__name__}")


def count_parameters(weights: Mapping[str, torch.Tensor]) -> int:
    return sum(int(v.numel()) for v in weights.values())


__all__ = [
    "PLANAR", "VOLUMETRIC", "VALID_DEPTHS", "RECEPTIVE_FIELD",
    "ConfigurationError", "ShapeError", "ConvLayerSpec",
    "GeneratorParams", "DiscriminatorParams",
    "depth_schedule_for", "build_generator", "build_discriminator",
    "generator_forward", "discriminator_forward", "critic_output_size",
    "as_critic", "count_parameters",
]
