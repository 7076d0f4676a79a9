"""Synthetic phantom volumes, low-dose noise, and registered patch pairs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .container import load_container, save_container


@dataclass
class SliceStack:
    """``d`` adjacent slices, ``[d, h, w]`` float32 in [0, 1]; d=1 is the 2D case."""

    data: np.ndarray
    spacing_mm: float | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"slice stack must be [d, h, w], got shape {self.data.shape}")
        if self.d % 2 == 0:
            raise ValueError(f"slice count must be odd, got {self.d}")

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def center(self) -> np.ndarray:
        return self.data[self.d // 2]


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def stack(self, i: int, d: int) -> SliceStack:
        """Slices ``i - d//2 .. i + d//2`` with edge replication."""
        return SliceStack(self.data[slice_indices(i, d, self.data.shape[0])],
                          spacing_mm=self.spacing[0])


@dataclass
class PhantomParams:
    n_organs: tuple[int, int] = (2, 4)
    n_lesions: tuple[int, int] = (3, 6)
    n_vessels: tuple[int, int] = (4, 8)
    tissue: float = 0.5
    organ_range: tuple[float, float] = (0.56, 0.66)
    lesion_range: tuple[float, float] = (0.36, 0.44)
    vessel_range: tuple[float, float] = (0.68, 0.78)
    bone: float = 0.92
    texture_amplitude: float = 0.02
    edge_width: float = 0.6  # pixels


@dataclass
class NoiseParams:
    """Mixed Poisson-Gaussian image-domain noise. ``I0 = inf`` disables Poisson."""

    poisson_scale: float = 140.0
    gaussian_sigma: float = 0.01


def slice_indices(i: int, d: int, n: int) -> np.ndarray:
    r = d // 2
    return np.clip(np.arange(i - r, i + r + 1), 0, n - 1)


def _soft_inside(r: np.ndarray, scale: float, width: float) -> np.ndarray:
    # r is a normalized radius (1 on the boundary); scale converts to pixels
    return 0.5 * (1.0 + np.tanh((1.0 - r) * scale / max(width, 1e-6)))


def generate_phantom_volume(seed: int, n_slices: int = 32, H: int = 256, W: int = 256,
                            params: PhantomParams | None = None) -> Volume:
    """Abdomen-like phantom with smooth 3D structure across slices.

    Ellipsoidal organs and low-attenuation lesions, thin tortuous vessels and
    a vertebra, on an elliptical body with low-amplitude correlated texture.
    """
    if min(H, W) < 64:
        raise ValueError(f"phantom slices must be at least 64x64, got {H}x{W}")
    if n_slices < 1:
        raise ValueError("n_slices must be positive")
    p = params or PhantomParams()
    rng = np.random.default_rng(seed)
    z, y, x = np.meshgrid(np.arange(n_slices, dtype=np.float64),
                          np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    px = 0.5 * min(H, W)  # pixels per unit length
    zc = (n_slices - 1) / 2
    vol = np.zeros((n_slices, H, W))

    def ellipsoid(cx, cy, cz, ax, ay, az, value, base):
        r = np.sqrt(((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2)
        m = _soft_inside(r, min(ax, ay) * px, p.edge_width)
        return base * (1 - m) + value * m

    # body: elliptical cylinder whose axes breathe slowly along z
    ax0, ay0 = rng.uniform(0.78, 0.9), rng.uniform(0.6, 0.72)
    wobble = 1 + 0.04 * np.sin(2 * np.pi * (z - zc) / max(n_slices, 8) + rng.uniform(0, 2 * np.pi))
    r_body = np.sqrt((x / (ax0 * wobble)) ** 2 + (y / (ay0 * wobble)) ** 2)
    body = _soft_inside(r_body, ay0 * px, p.edge_width)

    texture = ndimage.gaussian_filter(rng.standard_normal(vol.shape), sigma=(1.5, 4.0, 4.0))
    texture *= p.texture_amplitude / (texture.std() + 1e-12)
    vol = body * (p.tissue + texture)

    for _ in range(rng.integers(p.n_organs[0], p.n_organs[1] + 1)):
        vol = ellipsoid(rng.uniform(-0.45, 0.45), rng.uniform(-0.35, 0.3), rng.uniform(0, n_slices),
                        rng.uniform(0.15, 0.35), rng.uniform(0.12, 0.3), rng.uniform(0.6, 1.5) * n_slices,
                        rng.uniform(*p.organ_range) + texture, vol)
    for _ in range(rng.integers(p.n_lesions[0], p.n_lesions[1] + 1)):
        vol = ellipsoid(rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.35), rng.uniform(0, n_slices),
                        rng.uniform(0.03, 0.09), rng.uniform(0.03, 0.09), rng.uniform(3, 8),
                        rng.uniform(*p.lesion_range), vol)
    for _ in range(rng.integers(p.n_vessels[0], p.n_vessels[1] + 1)):
        x0, y0 = rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.35)
        amp, freq, phase = rng.uniform(0.02, 0.12), rng.uniform(0.05, 0.2), rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0.012, 0.03)
        cx = x0 + amp * np.sin(freq * z + phase)
        cy = y0 + amp * np.cos(0.7 * freq * z + phase)
        r = np.sqrt((x - cx) ** 2 + (y - cy) ** 2) / rad
        m = _soft_inside(r, rad * px, p.edge_width)
        vol = vol * (1 - m) + rng.uniform(*p.vessel_range) * m
    # vertebra
    vol = ellipsoid(rng.uniform(-0.05, 0.05), ay0 * 0.7, zc, 0.09, 0.08, 4.0 * n_slices, p.bone, vol)

    vol = np.clip(vol * body, 0.0, 1.0).astype(np.float32)
    prov = {"kind": "phantom", "seed": int(seed), "params": asdict(p)}
    return Volume(vol, provenance=prov)


def simulate_low_dose(volume: Volume, noise: NoiseParams | None = None, seed: int = 0) -> Volume:
    """``clip(Poisson(x * I0) / I0 + N(0, sigma^2), 0, 1)`` voxelwise."""
    noise = noise or NoiseParams()
    if not noise.poisson_scale > 0:
        raise ValueError("poisson_scale must be positive")
    if noise.gaussian_sigma < 0:
        raise ValueError("gaussian_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    clean = volume.data.astype(np.float64)
    if math.isinf(noise.poisson_scale):
        noisy = clean.copy()
    else:
        noisy = rng.poisson(clean * noise.poisson_scale) / noise.poisson_scale
    if noise.gaussian_sigma > 0:
        noisy = noisy + rng.normal(0.0, noise.gaussian_sigma, size=clean.shape)
    prov = {"kind": "low_dose", "source": volume.provenance, "seed": int(seed), "noise": asdict(noise)}
    return Volume(np.clip(noisy, 0.0, 1.0).astype(np.float32), volume.spacing, prov)


@dataclass
class PatchPair:
    lowdose: SliceStack
    normaldose: np.ndarray
    volume_id: int
    coords: tuple[int, int, int]  # (slice, row, col)


@dataclass
class PatchSet:
    """Registered patch pairs held as contiguous arrays.

    ``lowdose`` is ``[N, d, p, p]``, ``normaldose`` is ``[N, p, p]`` and
    ``coords`` is ``[N, 4]`` of (volume, slice, row, col).
    """

    lowdose: np.ndarray
    normaldose: np.ndarray
    coords: np.ndarray

    def __len__(self) -> int:
        return len(self.normaldose)

    def __getitem__(self, k: int) -> PatchPair:
        v, i, r, c = (int(t) for t in self.coords[k])
        return PatchPair(SliceStack(self.lowdose[k]), self.normaldose[k], v, (i, r, c))

    @property
    def d(self) -> int:
        return self.lowdose.shape[1]


def sample_patch_coords(shapes: list[tuple[int, int, int]], count: int, patch: int,
                        seed: int) -> np.ndarray:
    """Uniform (volume, slice, row, col) draws; independent of the slice count d."""
    rng = np.random.default_rng(seed)
    out = np.empty((count, 4), dtype=np.int64)
    for k in range(count):
        v = int(rng.integers(len(shapes)))
        n, H, W = shapes[v]
        if patch > H or patch > W:
            raise ValueError(f"patch {patch} larger than slice {H}x{W}")
        out[k] = (v, rng.integers(n), rng.integers(H - patch + 1), rng.integers(W - patch + 1))
    return out


def gather_patches(lowdose: list[Volume], normaldose: list[Volume], coords: np.ndarray,
                   d: int, patch: int = 64) -> PatchSet:
    if d % 2 == 0 or d < 1:
        raise ValueError(f"slice count must be odd and positive, got {d}")
    N = len(coords)
    low = np.empty((N, d, patch, patch), dtype=np.float32)
    nd = np.empty((N, patch, patch), dtype=np.float32)
    for k, (v, i, r, c) in enumerate(coords):
        vol_ld, vol_nd = lowdose[v].data, normaldose[v].data
        idx = slice_indices(int(i), d, vol_ld.shape[0])
        low[k] = vol_ld[idx, r:r + patch, c:c + patch]
        nd[k] = vol_nd[i, r:r + patch, c:c + patch]
    return PatchSet(low, nd, np.asarray(coords, dtype=np.int64))


def extract_patches(lowdose_vol, normaldose_vol, d: int, count: int, patch: int = 64,
                    seed: int = 0) -> PatchSet:
    """Random registered patches from one volume pair or from lists of pairs."""
    lows = lowdose_vol if isinstance(lowdose_vol, (list, tuple)) else [lowdose_vol]
    nds = normaldose_vol if isinstance(normaldose_vol, (list, tuple)) else [normaldose_vol]
    if len(lows) != len(nds):
        raise ValueError("need the same number of low-dose and normal-dose volumes")
    for a, b in zip(lows, nds):
        if a.shape != b.shape:
            raise ValueError(f"volumes not registered: {a.shape} vs {b.shape}")
    coords = sample_patch_coords([v.shape for v in lows], count, patch, seed)
    return gather_patches(lows, nds, coords, d, patch)


@dataclass
class DataConfig:
    n_volumes: int = 8
    n_val_volumes: int = 2
    n_slices: int = 32
    size: int = 256
    train_patches: int = 8000
    val_patches: int = 2000
    patch: int = 64
    poisson_scale: float = 140.0
    gaussian_sigma: float = 0.01
    seed: int = 0


@dataclass
class Dataset:
    """Train/validation volume pairs plus the patch coordinates drawn from them."""

    config: DataConfig
    train_nd: list[Volume]
    train_ld: list[Volume]
    val_nd: list[Volume]
    val_ld: list[Volume]
    train_coords: np.ndarray
    val_coords: np.ndarray

    def train_patches(self, d: int) -> PatchSet:
        return gather_patches(self.train_ld, self.train_nd, self.train_coords, d, self.config.patch)

    def val_patches(self, d: int) -> PatchSet:
        return gather_patches(self.val_ld, self.val_nd, self.val_coords, d, self.config.patch)


def _volume_seeds(seed: int, n: int) -> list[tuple[int, int]]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [tuple(int(s) for s in c.generate_state(2)) for c in children]


def make_dataset(config: DataConfig | None = None) -> Dataset:
    cfg = config or DataConfig()
    if not 0 < cfg.n_val_volumes < cfg.n_volumes:
        raise ValueError("need at least one training and one validation volume")
    noise = NoiseParams(cfg.poisson_scale, cfg.gaussian_sigma)
    nds, lds = [], []
    for phantom_seed, noise_seed in _volume_seeds(cfg.seed, cfg.n_volumes):
        nd = generate_phantom_volume(phantom_seed, cfg.n_slices, cfg.size, cfg.size)
        nds.append(nd)
        lds.append(simulate_low_dose(nd, noise, noise_seed))
    n_train = cfg.n_volumes - cfg.n_val_volumes
    shapes = [v.shape for v in nds]
    train_coords = sample_patch_coords(shapes[:n_train], cfg.train_patches, cfg.patch, cfg.seed + 1)
    val_coords = sample_patch_coords(shapes[n_train:], cfg.val_patches, cfg.patch, cfg.seed + 2)
    return Dataset(cfg, nds[:n_train], lds[:n_train], nds[n_train:], lds[n_train:],
                   train_coords, val_coords)


def save_volume(path, volume: Volume) -> None:
    """Container file with a single ``volume`` entry plus a JSON metadata sidecar."""
    path = Path(path)
    save_container(path, {"volume": volume.data})
    meta = {"shape": list(volume.shape), "spacing": list(volume.spacing), "provenance": volume.provenance}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_volume(path) -> Volume:
    path = Path(path)
    data = load_container(path)["volume"]
    side = path.with_suffix(path.suffix + ".json")
    spacing, prov = (1.0, 1.0, 1.0), {"kind": "imported", "path": str(path)}
    if side.exists():
        meta = json.loads(side.read_text())
        spacing = tuple(meta.get("spacing", spacing))
        prov = meta.get("provenance", prov)
    return Volume(data, spacing, prov)


def export_png(image: np.ndarray, path, window: tuple[float, float] = (0.0, 1.0)) -> None:
    """8-bit PNG of a 2D slice clipped to ``window`` (normalized units)."""
    from PIL import Image

    lo, hi = window
    if hi <= lo:
        raise ValueError(f"empty display window {window}")
    img = np.clip((np.asarray(image, dtype=np.float64) - lo) / (hi - lo), 0, 1)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)
