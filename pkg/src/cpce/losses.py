"""Training objectives and feature-space metrics.

The feature extractor ``phi`` is either a VGG-19 prefix ending at its 16th
convolution (loaded from a container file) or a small seeded random convnet
that needs no external weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .container import load_container, save_container
from .model import as_critic

LAMBDA_GP = 10.0
LAMBDA_P = 0.1
IMAGENET_MEAN_255 = (123.68, 116.779, 103.939)

VGG19_BLOCKS = ((64, 64), (128, 128), (256, 256, 256, 256), (512, 512, 512, 512), (512, 512, 512, 512))
PRETRAINED_VGG19 = "pretrained_vgg19_conv16"
RANDOM_CONVNET = "seeded_random_convnet"


@dataclass
class FeatureExtractor:
    """Frozen feature map: a chain of 3x3 'same' convs with ReLU and 2x2 max pools.

    ``layers`` lists ``"conv"`` / ``"pool"`` tokens; conv weights are named
    ``conv{k}.weight`` (``[c_in, c_out, 3, 3]``) and ``conv{k}.bias``.
    """

    kind: str
    layers: tuple[str, ...]
    weights: dict[str, torch.Tensor]
    mean: tuple[float, float, float] = IMAGENET_MEAN_255
    final_relu: bool = True

    def __post_init__(self):
        for v in self.weights.values():
            v.requires_grad_(False)

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        # [B, H, W] in [0, 1] -> [B, 3, H, W] on the 0..255 scale, mean-subtracted
        x = x.unsqueeze(1) * 255.0
        mean = torch.tensor(self.mean, dtype=x.dtype).view(1, 3, 1, 1)
        return x.expand(-1, 3, -1, -1) - mean

    def __call__(self, x) -> torch.Tensor:
        x = torch.as_tensor(x)
        single = x.dim() == 2
        if single:
            x = x.unsqueeze(0)
        dtype = self.weights["conv1.weight"].dtype
        y = self.preprocess(x.to(dtype))
        n_conv = sum(t == "conv" for t in self.layers)
        k = 0
        for tok in self.layers:
            if tok == "pool":
                y = F.max_pool2d(y, 2)
                continue
            k += 1
            W = self.weights[f"conv{k}.weight"]
            y = F.conv2d(y, W.transpose(0, 1), self.weights[f"conv{k}.bias"], padding=1)
            if k < n_conv or self.final_relu:
                y = F.relu(y)
        return y[0] if single else y

    def to(self, dtype) -> "FeatureExtractor":
        return FeatureExtractor(self.kind, self.layers,
                                {k: v.to(dtype) for k, v in self.weights.items()},
                                self.mean, self.final_relu)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.numpy() for k, v in self.weights.items()}


def random_feature_extractor(seed: int = 0, widths=(16, 16, 32, 32),
                             pools_after=(2,)) -> FeatureExtractor:
    """Seeded random VGG-style convnet for offline use and tests."""
    rng = np.random.default_rng(seed)
    weights, layers, c_in = {}, [], 3
    for k, c_out in enumerate(widths, start=1):
        w = rng.standard_normal((c_in, c_out, 3, 3)) * np.sqrt(2.0 / (9 * c_in))
        weights[f"conv{k}.weight"] = torch.from_numpy(w.astype(np.float32))
        weights[f"conv{k}.bias"] = torch.zeros(c_out)
        layers.append("conv")
        if k in pools_after:
            layers.append("pool")
        c_in = c_out
    return FeatureExtractor(RANDOM_CONVNET, tuple(layers), weights)


def vgg19_layers(n_conv: int = 16) -> tuple[str, ...]:
    layers = []
    for block in VGG19_BLOCKS:
        for _ in block:
            if sum(t == "conv" for t in layers) == n_conv:
                return tuple(layers)
            layers.append("conv")
        if sum(t == "conv" for t in layers) < n_conv:
            layers.append("pool")
    if sum(t == "conv" for t in layers) < n_conv:
        raise ValueError(f"VGG-19 has only 16 conv layers, asked for {n_conv}")
    return tuple(layers)


def vgg19_from_state_dict(state: dict, n_conv: int = 16) -> FeatureExtractor:
    """Convert a torchvision-style ``features.{i}.weight`` state dict."""
    convs = sorted({int(k.split(".")[1]) for k in state if k.startswith("features.") and k.endswith(".weight")})
    if len(convs) < n_conv:
        raise ValueError(f"state dict has only {len(convs)} conv layers")
    weights = {}
    for k, idx in enumerate(convs[:n_conv], start=1):
        w = torch.as_tensor(np.asarray(state[f"features.{idx}.weight"]), dtype=torch.float32)
        weights[f"conv{k}.weight"] = w.transpose(0, 1).contiguous()
        weights[f"conv{k}.bias"] = torch.as_tensor(np.asarray(state[f"features.{idx}.bias"]),
                                                   dtype=torch.float32)
    return FeatureExtractor(PRETRAINED_VGG19, vgg19_layers(n_conv), weights)


def save_extractor(path, extractor: FeatureExtractor) -> None:
    save_container(path, extractor.state())


def load_vgg19_extractor(path, n_conv: int = 16) -> FeatureExtractor:
    arrays = load_container(path)
    weights = {k: torch.from_numpy(v) for k, v in arrays.items()}
    missing = [f"conv{k}.weight" for k in range(1, n_conv + 1) if f"conv{k}.weight" not in weights]
    if missing:
        raise ValueError(f"VGG weight file lacks {missing[:3]}")
    return FeatureExtractor(PRETRAINED_VGG19, vgg19_layers(n_conv), weights)


def make_extractor(kind: str = RANDOM_CONVNET, path=None, seed: int = 0) -> FeatureExtractor:
    if kind == RANDOM_CONVNET:
        return random_feature_extractor(seed)
    if kind == PRETRAINED_VGG19:
        if path is None:
            raise ValueError("pretrained VGG extractor needs a weight file path")
        return load_vgg19_extractor(path)
    raise ValueError(f"unknown extractor kind {kind!r}")


@dataclass
class LossBundle:
    adversarial: float
    perceptual: float
    combined: float
    wasserstein_estimate: float = float("nan")
    gradient_penalty: float = float("nan")
    lambda_gp: float = LAMBDA_GP
    lambda_p: float = LAMBDA_P
    provenance: dict = field(default_factory=lambda: {
        "adversarial": "mean critic value on generated patches",
        "perceptual": "feature-space squared distance",
        "combined": "adversarial + lambda_p * perceptual",
        "wasserstein_estimate": "mean D(fake) - mean D(real)",
        "gradient_penalty": "lambda_gp * mean (|grad D(interp)| - 1)^2",
    })


def _nonempty(values: torch.Tensor, what: str) -> torch.Tensor:
    values = torch.as_tensor(values)
    if values.numel() == 0:
        raise ValueError(f"{what}: empty batch")
    return values


def adversarial_loss(critic_values_on_fake) -> torch.Tensor:
    return _nonempty(critic_values_on_fake, "adversarial_loss").mean()


def perceptual_loss(extractor: FeatureExtractor, fake, real, reduction: str = "mean") -> torch.Tensor:
    """Squared feature distance. ``mean``: over all feature elements and the
    batch; ``sum``: summed per sample, averaged over the batch."""
    fake, real = torch.as_tensor(fake), torch.as_tensor(real)
    if fake.shape != real.shape:
        raise ValueError(f"shape mismatch {tuple(fake.shape)} vs {tuple(real.shape)}")
    diff = (extractor(fake) - extractor(real)) ** 2
    if reduction == "mean":
        return diff.mean()
    if reduction == "sum":
        return diff.sum() / (diff.shape[0] if fake.dim() == 3 else 1)
    raise ValueError(f"unknown reduction {reduction!r}")


def interpolate(fake: torch.Tensor, real: torch.Tensor, epsilon) -> torch.Tensor:
    eps = torch.as_tensor(epsilon, dtype=fake.dtype)
    if fake.dim() == 3 and eps.dim() == 1:
        eps = eps.view(-1, 1, 1)
    return eps * fake + (1 - eps) * real


def gradient_penalty(critic, fake, real, epsilon, lambda_gp: float = LAMBDA_GP,
                     create_graph: bool = True) -> torch.Tensor:
    """``lambda * mean((||grad_x D(x)||_2 - 1)^2)`` at ``x = eps*fake + (1-eps)*real``.

    ``critic`` is a :class:`DiscriminatorParams` or any callable mapping a
    ``[B, h, w]`` batch to ``[B]`` values. ``epsilon`` is one draw per sample.
    """
    D = as_critic(critic)
    fake, real = torch.as_tensor(fake), torch.as_tensor(real)
    single = fake.dim() == 2
    if single:
        fake, real = fake.unsqueeze(0), real.unsqueeze(0)
    # input gradients are needed even when called under no_grad
    with torch.enable_grad():
        x = interpolate(fake.detach(), real.detach(), epsilon).requires_grad_(True)
        out = D(x)
        if not isinstance(out, torch.Tensor) or out.shape != (x.shape[0],):
            raise ValueError(f"critic must map a [B, h, w] batch to [B] values, got "
                             f"{getattr(out, 'shape', type(out).__name__)}")
        if not out.requires_grad:
            # output does not depend on the input: gradient is identically zero
            norms = torch.zeros(x.shape[0], dtype=x.dtype)
        else:
            (g,) = torch.autograd.grad(out.sum(), x, create_graph=create_graph, allow_unused=True)
            norms = torch.zeros(x.shape[0], dtype=x.dtype) if g is None else g.flatten(1).norm(dim=1)
        return lambda_gp * ((norms - 1) ** 2).mean()


def critic_loss(critic_on_fake, critic_on_real, gp) -> torch.Tensor:
    fake = _nonempty(critic_on_fake, "critic_loss")
    real = _nonempty(critic_on_real, "critic_loss")
    if fake.shape != real.shape:
        raise ValueError(f"batch size mismatch {tuple(fake.shape)} vs {tuple(real.shape)}")
    return fake.mean() - real.mean() + gp


def wasserstein_abs(critic_on_fake, critic_on_real) -> float:
    """Evaluation-time |mean D(real) - mean D(fake)|."""
    return abs(float(torch.as_tensor(critic_on_real).mean() - torch.as_tensor(critic_on_fake).mean()))


def combined_generator_loss(adv, perc, lambda_p: float = LAMBDA_P):
    """``adv + lambda_p * perc``; ``lambda_p = inf`` means perceptual only."""
    if math.isinf(lambda_p):
        return perc
    return adv + lambda_p * perc


def gram_matrix(features) -> torch.Tensor:
    """``F F^T`` for ``[n, m]`` features (or batched ``[B, n, m]``)."""
    Fm = torch.as_tensor(features)
    return Fm @ Fm.transpose(-1, -2)


def tile_patches(image: torch.Tensor, patch: int) -> torch.Tensor:
    """Non-overlapping ``patch x patch`` tiles, edge remainder cropped: ``[N, p, p]``."""
    h, w = image.shape[-2:]
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} smaller than one {patch}x{patch} patch")
    nh, nw = h // patch, w // patch
    img = image[..., :nh * patch, :nw * patch]
    return img.reshape(nh, patch, nw, patch).permute(0, 2, 1, 3).reshape(-1, patch, patch)


def texture_matching_loss(extractor: FeatureExtractor, est, ref, patch: int = 64,
                          reduction: str = "mean") -> torch.Tensor:
    """Mean over tiles of ``||GM(phi(est)) - GM(phi(ref))||_F^2``.

    With ``reduction="mean"`` each Gram matrix is divided by the feature
    element count ``n*m`` of its tile.
    """
    est, ref = torch.as_tensor(est), torch.as_tensor(ref)
    if est.shape != ref.shape or est.dim() != 2:
        raise ValueError(f"need two slices of equal 2D shape, got {tuple(est.shape)}, {tuple(ref.shape)}")
    fe = extractor(tile_patches(est, patch)).flatten(2)
    fr = extractor(tile_patches(ref, patch)).flatten(2)
    ge, gr = gram_matrix(fe), gram_matrix(fr)
    if reduction == "mean":
        numel = fe.shape[1] * fe.shape[2]
        ge, gr = ge / numel, gr / numel
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return ((ge - gr) ** 2).sum(dim=(1, 2)).mean()
