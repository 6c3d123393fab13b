"""Per-channel normalization, SHG/AF fusion into RGB, resizing and augmentation.

Fused images are plain ``uint8`` arrays of shape ``(H, W, 3)``: red is
always zero, green carries the scaled SHG plane and blue the autofluorescence.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError

SHG_GAIN = 1.3
AF_GAIN = 1.0
MIN_PLANE_EXTENT = 32


@dataclass
class DualModalImage:
    """Paired autofluorescence and SHG intensity planes of one imaged region."""

    af: np.ndarray
    shg: np.ndarray
    sample_id: str = ""
    bit_depth: int = 16

    def __post_init__(self):
        if self.af.shape != self.shg.shape or self.af.ndim != 2:
            raise DataError(
                f"{self.sample_id}: AF {self.af.shape} and SHG {self.shg.shape} planes must match")
        if min(self.af.shape) < MIN_PLANE_EXTENT:
            raise DataError(f"{self.sample_id}: planes must be at least "
                            f"{MIN_PLANE_EXTENT}x{MIN_PLANE_EXTENT}, got {self.af.shape}")


@dataclass
class AugmentParams:
    """Geometric/intensity augmentation settings. Only rotation is on by default."""

    rotation_limit_deg: float = 30.0
    rotate: bool = True
    hflip: bool = False
    vflip: bool = False
    intensity_jitter: float = 0.0


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _to_bytes(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


def normalize_channel(raw: np.ndarray) -> np.ndarray:
    """Min-max map one intensity plane onto ``0..255`` (per image).

    A constant plane has no contrast to stretch and maps to all zeros.

    Raises:
        DataError: if the plane contains NaN or Inf.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise DataError("intensity plane contains non-finite values")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros(raw.shape, dtype=np.uint8)
    return _to_bytes((raw - lo) / (hi - lo) * 255.0)


def fuse_channels(af_bytes: np.ndarray, shg_bytes: np.ndarray,
                  shg_gain: float = SHG_GAIN, af_gain: float = AF_GAIN) -> np.ndarray:
    """Stack normalized planes into RGB: R = 0, G = gain*SHG, B = gain*AF (clamped)."""
    if af_bytes.shape != shg_bytes.shape:
        raise DataError(f"cannot fuse planes of shapes {af_bytes.shape} and {shg_bytes.shape}")
    rgb = np.zeros(af_bytes.shape + (3,), dtype=np.uint8)
    rgb[..., 1] = _to_bytes(shg_gain * shg_bytes.astype(np.float64))
    rgb[..., 2] = _to_bytes(af_gain * af_bytes.astype(np.float64))
    return rgb


def preprocess(image: DualModalImage, size: Optional[int] = None) -> np.ndarray:
    """Normalize both planes, fuse them, and optionally resize to ``size x size``."""
    rgb = fuse_channels(normalize_channel(image.af), normalize_channel(image.shg))
    if size is not None and rgb.shape[:2] != (size, size):
        rgb = resize(rgb, size, size)
    return rgb


def resize(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment (edge pixels clamp).

    Works on ``(H, W)`` or ``(H, W, C)`` arrays. ``uint8`` input is rounded
    back to ``uint8``; other dtypes come back as float64.
    """
    if target_h < 8 or target_w < 8:
        raise DataError(f"resize targets must be >= 8, got {target_h}x{target_w}")
    h, w = image.shape[:2]
    if (h, w) == (target_h, target_w):
        return image.copy()
    src = image.astype(np.float64)

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(target_h, h)
    c0, c1, fc = coords(target_w, w)
    if src.ndim == 3:
        fr = fr[:, None, None]
        fc = fc[None, :, None]
    else:
        fr = fr[:, None]
        fc = fc[None, :]
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    out = top * (1 - fr) + bottom * fr
    return _to_bytes(out) if image.dtype == np.uint8 else out


def rotate(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counter-clockwise about the centre with bilinear interpolation.

    Pixels that would come from outside the frame are filled by reflection.
    """
    if angle_deg == 0:
        return image.copy()
    out = ndimage.rotate(image.astype(np.float64), angle_deg, axes=(1, 0), reshape=False,
                         order=1, mode="reflect")
    return _to_bytes(out) if image.dtype == np.uint8 else out


def sample_rotation(params: AugmentParams, rng: np.random.Generator) -> float:
    limit = params.rotation_limit_deg
    return float(rng.uniform(-limit, limit))


def augment(image: np.ndarray, params: AugmentParams, seed) -> np.ndarray:
    """Random rotation within the configured limit, plus opt-in flips/jitter.

    ``seed`` may be an int or a ``np.random.Generator``; equal seeds give
    identical output. Output shape always equals input shape.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = image
    if params.rotate and params.rotation_limit_deg > 0:
        out = rotate(out, sample_rotation(params, rng))
    if params.hflip and rng.random() < 0.5:
        out = out[:, ::-1]
    if params.vflip and rng.random() < 0.5:
        out = out[::-1]
    if params.intensity_jitter > 0:
        gain = 1.0 + rng.uniform(-params.intensity_jitter, params.intensity_jitter)
        out = _to_bytes(out.astype(np.float64) * gain)
    return np.ascontiguousarray(out)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


# -- file I/O ---------------------------------------------------------------------

def read_plane(path) -> np.ndarray:
    """Read an 8- or 16-bit single-channel PNG/TIFF plane."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image plane {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{path} is not a single-channel plane (shape {arr.shape})")
    return arr


def write_plane16(path, plane: np.ndarray) -> None:
    Image.fromarray(np.clip(plane, 0, 65535).astype(np.uint16)).save(path)


def write_rgb(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path)


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def load_dual(af_path, shg_path, sample_id: str = "") -> DualModalImage:
    af = read_plane(af_path)
    shg = read_plane(shg_path)
    depth = 16 if max(af.dtype.itemsize, shg.dtype.itemsize) > 1 else 8
    return DualModalImage(af=af, shg=shg, sample_id=sample_id, bit_depth=depth)
