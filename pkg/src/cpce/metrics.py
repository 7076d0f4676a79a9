"""Full-slice image quality metrics and evaluation reports.

The four metrics cover a 2x2 grid: content vs texture similarity, measured in
pixel space vs feature space (see :data:`METRIC_TAXONOMY`).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .data import Volume, slice_indices
from .losses import FeatureExtractor, perceptual_loss, texture_matching_loss
from .model import GeneratorParams, generator_forward

METRIC_TAXONOMY = {
    "psnr": ("content", "pixel"),
    "ssim": ("texture", "pixel"),
    "pl": ("content", "feature"),
    "tml": ("texture", "feature"),
}
METRICS = tuple(METRIC_TAXONOMY)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(est, ref) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {ref.shape}")
    return est, ref


def psnr(est, ref, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    est, ref = _pair(est, ref)
    mse = np.mean((est - ref) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # correlation restricted to fully-supported window positions
    r = win.shape[0] // 2
    full = ndimage.correlate(img, win, mode="constant")
    return full[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_map(est, ref, data_range: float = 1.0) -> np.ndarray:
    est, ref = _pair(est, ref)
    if est.ndim != 2 or min(est.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs 2D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {est.shape}")
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _filter_valid(est, win), _filter_valid(ref, win)
    sxx = _filter_valid(est * est, win) - mu_x ** 2
    syy = _filter_valid(ref * ref, win) - mu_y ** 2
    sxy = _filter_valid(est * ref, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(est, ref, data_range: float = 1.0) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    return float(ssim_map(est, ref, data_range).mean())


def perceptual_metric(extractor: FeatureExtractor, est, ref, reduction: str = "mean") -> float:
    with torch.no_grad():
        return float(perceptual_loss(extractor, torch.as_tensor(np.asarray(est, np.float32)),
                                     torch.as_tensor(np.asarray(ref, np.float32)), reduction))


def texture_metric(extractor: FeatureExtractor, est, ref, patch: int = 64, reduction: str = "mean") -> float:
    with torch.no_grad():
        return float(texture_matching_loss(extractor, torch.as_tensor(np.asarray(est, np.float32)),
                                           torch.as_tensor(np.asarray(ref, np.float32)), patch, reduction))


@dataclass
class EvalReport:
    rows: list[dict]
    model_id: str = ""
    dataset_id: str = ""
    aggregate: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate(self.rows)

    def to_json(self) -> str:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else (
                "inf" if v == math.inf else v)
        doc = {
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "aggregate": {m: {k: clean(v) for k, v in s.items()} for m, s in self.aggregate.items()},
            "rows": [{k: clean(v) for k, v in r.items()} for r in self.rows],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["volume", "slice", *METRICS]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({c: (repr(float(r[c])) if c in METRICS else r[c]) for c in cols})
        return buf.getvalue()

    def summary(self) -> str:
        return "  ".join(f"{m.upper()} {s['mean']:.4g}({s['std']:.3g})" for m, s in self.aggregate.items())

    def save(self, stem) -> None:
        from pathlib import Path

        stem = Path(stem)
        stem.with_suffix(".json").write_text(self.to_json())
        stem.with_suffix(".csv").write_text(self.to_csv())


def aggregate(rows: list[dict]) -> dict:
    """Mean and population std per metric over slices, in row order."""
    out = {}
    for m in METRICS:
        vals = np.array([r[m] for r in rows], dtype=np.float64)
        if len(vals) == 0:
            out[m] = {"mean": math.nan, "std": math.nan}
        elif np.isinf(vals).any():
            out[m] = {"mean": float(vals.mean()), "std": math.nan}
        else:
            out[m] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def slice_metrics(est: np.ndarray, ref: np.ndarray, extractor: FeatureExtractor,
                  patch: int = 64, reduction: str = "mean") -> dict:
    return {
        "psnr": psnr(est, ref),
        "ssim": ssim(est, ref),
        "pl": perceptual_metric(extractor, est, ref, reduction),
        "tml": texture_metric(extractor, est, ref, patch, reduction),
    }


def denoise_volume(params: GeneratorParams | None, volume: Volume, batch: int = 4) -> np.ndarray:
    """Denoise every slice (edge-replicated stacks). ``params=None`` is the identity."""
    data = volume.data
    if params is None:
        return data.copy()
    d, n = params.slices, data.shape[0]
    out = np.empty_like(data)
    with torch.no_grad():
        for start in range(0, n, batch):
            idx = range(start, min(n, start + batch))
            stacks = np.stack([data[slice_indices(i, d, n)] for i in idx])
            out[start:start + len(idx)] = generator_forward(params, torch.from_numpy(stacks)).numpy()
    return out


def evaluate_model(params: GeneratorParams | None, lowdose: list[Volume], normaldose: list[Volume],
                   extractor: FeatureExtractor, model_id: str = "", dataset_id: str = "",
                   patch: int = 64, reduction: str = "mean") -> EvalReport:
    """Per-slice PSNR/SSIM/PL/TML over all slices of the test volumes."""
    if len(lowdose) != len(normaldose):
        raise ValueError("need the same number of low-dose and normal-dose volumes")
    rows = []
    for v, (ld, nd) in enumerate(zip(lowdose, normaldose)):
        if ld.shape != nd.shape:
            raise ValueError(f"volume {v} not registered: {ld.shape} vs {nd.shape}")
        est = denoise_volume(params, ld)
        for i in range(nd.shape[0]):
            rows.append({"volume": v, "slice": i, **slice_metrics(est[i], nd.data[i], extractor, patch, reduction)})
    return EvalReport(rows, model_id or ("identity" if params is None else "model"), dataset_id)
