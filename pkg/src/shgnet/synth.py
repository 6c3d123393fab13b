"""Procedural dual-modality tissue images standing in for the private microscopy data.

SHG planes are sums of anti-aliased collagen-like fibre segments whose
orientations follow an axial von Mises distribution around a per-image
dominant direction; the concentration ``kappa`` controls alignment.
Autofluorescence planes are sums of soft Gaussian blobs ("cells").
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from scipy import ndimage

from . import LABELS
from .dataset import DatasetManifest, SampleRecord, write_manifest
from .errors import ConfigError
from .imaging import DualModalImage, derive_seed, preprocess, write_plane16

IMAGES_PER_PATIENT = 8
PEAK_COUNTS = 40000.0


@dataclass(frozen=True)
class TissueTexture:
    """Per-class generator parameters."""

    fiber_count: int
    fiber_length: float
    kappa: float
    blob_density: float
    blob_radius: tuple[float, float]
    fiber_brightness: float = 1.0


DEFAULT_TEXTURES = {
    "normal": TissueTexture(fiber_count=10, fiber_length=12.0, kappa=0.0,
                            blob_density=6.0, blob_radius=(3.0, 5.0)),
    "fibrosis": TissueTexture(fiber_count=60, fiber_length=16.0, kappa=1.0,
                              blob_density=14.0, blob_radius=(2.0, 3.5)),
    "cancer": TissueTexture(fiber_count=30, fiber_length=28.0, kappa=12.0,
                            blob_density=30.0, blob_radius=(1.2, 2.2)),
}


@dataclass
class SynthSpec:
    """What to generate. ``counts`` are keyed by class name."""

    counts: Mapping[str, int] = field(
        default_factory=lambda: {"normal": 36, "fibrosis": 101, "cancer": 102})
    image_size: int = 64
    textures: Mapping[str, TissueTexture] = field(default_factory=lambda: dict(DEFAULT_TEXTURES))
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if any(n < 0 for n in self.counts.values()):
            raise ConfigError("class counts must be >= 0")
        if not 0 <= self.noise < 1:
            raise ConfigError(f"noise must lie in [0, 1), got {self.noise}")
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")
        for name in self.counts:
            if name not in LABELS:
                raise ConfigError(f"unknown class {name!r}; expected one of {LABELS}")
            if name not in self.textures:
                raise ConfigError(f"no texture parameters for class {name!r}")
            if self.textures[name].kappa < 0:
                raise ConfigError(f"kappa must be >= 0 for {name!r}")


def splat_segments(size: int, centers: np.ndarray, angles: np.ndarray, lengths: np.ndarray,
                   intensities: np.ndarray, step: float = 0.5) -> np.ndarray:
    """Draw line segments by bilinear splatting of points spaced ``step`` apart."""
    plane = np.zeros((size, size))
    for (cy, cx), theta, length, amp in zip(centers, angles, lengths, intensities):
        t = np.arange(-length / 2, length / 2 + 1e-9, step)
        ys = cy + t * np.sin(theta)
        xs = cx + t * np.cos(theta)
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        fy, fx = ys - y0, xs - x0
        w = amp * step
        for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                           (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < size) & (xx >= 0) & (xx < size)
            np.add.at(plane, (yy[ok], xx[ok]), w * wt[ok])
    return plane


def axial_von_mises(rng: np.random.Generator, mean: float, kappa: float, n: int) -> np.ndarray:
    """Undirected orientations (period pi) concentrated around ``mean``."""
    if kappa == 0:
        return rng.uniform(0, np.pi, n)
    return (mean + rng.vonmises(0.0, kappa, n) / 2.0) % np.pi


def render_fibers(rng: np.random.Generator, size: int, tex: TissueTexture) -> np.ndarray:
    n = max(int(rng.poisson(tex.fiber_count)), 1)
    dominant = rng.uniform(0, np.pi)
    angles = axial_von_mises(rng, dominant, tex.kappa, n)
    centers = rng.uniform(-0.1 * size, 1.1 * size, (n, 2))
    lengths = tex.fiber_length * rng.uniform(0.6, 1.4, n)
    amps = tex.fiber_brightness * rng.uniform(0.6, 1.0, n)
    plane = splat_segments(size, centers, angles, lengths, amps)
    return ndimage.gaussian_filter(plane, 0.6)


def render_blobs(rng: np.random.Generator, size: int, tex: TissueTexture) -> np.ndarray:
    n = int(rng.poisson(tex.blob_density))
    yy, xx = np.mgrid[0:size, 0:size]
    plane = np.zeros((size, size))
    for cy, cx, r, a in zip(rng.uniform(0, size, n), rng.uniform(0, size, n),
                            rng.uniform(*tex.blob_radius, n), rng.uniform(0.5, 1.0, n)):
        plane += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return plane


def _to_counts(plane: np.ndarray, rng: np.random.Generator, noise: float,
               background: float) -> np.ndarray:
    peak = max(float(plane.max()), 1e-6)
    signal = background + plane / peak
    signal = signal + rng.normal(0.0, noise, plane.shape)
    return np.clip(np.round(signal / (1 + background) * PEAK_COUNTS), 0, 65535).astype(np.uint16)


def render_sample(label: str, spec: SynthSpec, rng: np.random.Generator,
                  sample_id: str = "") -> DualModalImage:
    """Generate one AF/SHG pair for ``label`` from ``rng``."""
    tex = spec.textures[label]
    size = spec.image_size
    shg = _to_counts(render_fibers(rng, size, tex), rng, spec.noise, background=0.05)
    af = _to_counts(render_blobs(rng, size, tex), rng, spec.noise, background=0.1)
    return DualModalImage(af=af, shg=shg, sample_id=sample_id, bit_depth=16)


def iter_samples(spec: SynthSpec) -> Iterator[tuple[SampleRecord, DualModalImage]]:
    """Yield ``(record, image)`` pairs in manifest order without touching disk.

    Every image has its own generator seeded from ``(spec.seed, sample_id)``,
    so any subset can be regenerated independently and in any order.
    """
    for label in [c for c in LABELS if c in spec.counts]:
        for i in range(spec.counts[label]):
            sid = f"{label}_{i:04d}"
            pid = f"{label}_p{i // IMAGES_PER_PATIENT:03d}"
            rng = np.random.default_rng(derive_seed(spec.seed, sid))
            rec = SampleRecord(sid, pid, f"images/{sid}_af.png", f"images/{sid}_shg.png", label)
            yield rec, render_sample(label, spec, rng, sid)


def generate_dataset(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write 16-bit AF/SHG PNG planes plus ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for rec, img in iter_samples(spec):
        write_plane16(out_dir / rec.af_path, img.af)
        write_plane16(out_dir / rec.shg_path, img.shg)
        records.append(rec)
    manifest = DatasetManifest(tuple(records), LABELS, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def orientation_circular_variance(plane: np.ndarray) -> float:
    """Circular variance of doubled Sobel gradient angles, weighted by squared magnitude.

    0 means every edge shares one orientation; 1 means no preferred orientation.
    """
    p = np.asarray(plane, dtype=np.float64)
    gy = ndimage.sobel(p, axis=0)
    gx = ndimage.sobel(p, axis=1)
    w = gx * gx + gy * gy
    total = w.sum()
    if total == 0:
        return 1.0
    resultant = np.abs(np.sum(w * np.exp(2j * np.arctan2(gy, gx)))) / total
    return float(1.0 - resultant)


# -- pretext textures for backbone pretraining --------------------------------------

PRETEXT_FAMILIES = ("gratings", "dots", "mesh", "speckle")


@dataclass
class PretextSpec:
    n_per_class: int = 200
    n_classes: int = 4
    image_size: int = 64
    noise: float = 0.05

    def __post_init__(self):
        if not 2 <= self.n_classes <= len(PRETEXT_FAMILIES):
            raise ConfigError(f"n_classes must be in [2, {len(PRETEXT_FAMILIES)}]")


@dataclass
class PretextDataset:
    """Fused RGB images of generic texture families with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: tuple[str, ...]
    sample_ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def class_means(self) -> np.ndarray:
        return np.stack([self.images[self.labels == c].astype(np.float64).mean(axis=0)
                         for c in range(len(self.classes))])


def _pretext_planes(family: str, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if family == "gratings":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(4.0, 10.0)
        phase = rng.uniform(0, 2 * np.pi)
        shg = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
        af = ndimage.gaussian_filter(rng.random((size, size)), 4.0)
    elif family == "dots":
        tex = TissueTexture(0, 0.0, 0.0, blob_density=rng.uniform(20, 50), blob_radius=(1.0, 2.0))
        shg = render_blobs(rng, size, tex)
        af = render_blobs(rng, size, tex)
    elif family == "mesh":
        a = rng.uniform(0, np.pi)
        angles = np.where(rng.random(40) < 0.5, a, a + np.pi / 2) + rng.normal(0, 0.05, 40)
        centers = rng.uniform(0, size, (40, 2))
        shg = splat_segments(size, centers, angles, np.full(40, size / 2.0), np.ones(40))
        af = shg.T.copy()
    elif family == "speckle":
        shg = ndimage.gaussian_filter(rng.random((size, size)), rng.uniform(0.8, 2.0))
        af = ndimage.gaussian_filter(rng.random((size, size)), rng.uniform(0.8, 2.0))
    else:
        raise ConfigError(f"unknown pretext family {family!r}")
    return af, shg


def generate_pretext_dataset(spec: PretextSpec, seed: int = 0, out_dir=None) -> PretextDataset:
    """Build the auxiliary texture-classification set used to pretrain backbones.

    If ``out_dir`` is given, planes and a manifest (labels = family names) are
    written there as well.
    """
    families = PRETEXT_FAMILIES[:spec.n_classes]
    images, labels, ids, records = [], [], [], []
    if out_dir is not None:
        (Path(out_dir) / "images").mkdir(parents=True, exist_ok=True)
    for label, fam in enumerate(families):
        for i in range(spec.n_per_class):
            sid = f"{fam}_{i:04d}"
            rng = np.random.default_rng(derive_seed(seed, "pretext", sid))
            af, shg = _pretext_planes(fam, rng, spec.image_size)
            img = DualModalImage(af=_to_counts(af, rng, spec.noise, 0.05),
                                 shg=_to_counts(shg, rng, spec.noise, 0.05), sample_id=sid)
            images.append(preprocess(img))
            labels.append(label)
            ids.append(sid)
            if out_dir is not None:
                rec = SampleRecord(sid, f"{fam}_p{i // IMAGES_PER_PATIENT:03d}",
                                   f"images/{sid}_af.png", f"images/{sid}_shg.png", fam)
                write_plane16(Path(out_dir) / rec.af_path, img.af)
                write_plane16(Path(out_dir) / rec.shg_path, img.shg)
                records.append(rec)
    if out_dir is not None:
        write_manifest(DatasetManifest(tuple(records), families), Path(out_dir) / "manifest.csv")
    return PretextDataset(np.stack(images), np.array(labels, dtype=np.int64), families, ids)
