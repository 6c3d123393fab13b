"""Gradient-weighted class activation maps and triptych overlays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .imaging import resize
from .models import ResNet

SEPARATOR_WIDTH = 1
# blue -> red ramp endpoints
RAMP_LOW = np.array([0.0, 0.0, 255.0])
RAMP_HIGH = np.array([255.0, 0.0, 0.0])


@dataclass
class Heatmap:
    activations: np.ndarray   # [C, h, w]
    gradients: np.ndarray     # [C, h, w]
    alpha: np.ndarray         # [C]
    raw: np.ndarray           # [h, w], ReLU(sum_k alpha_k A_k) before normalization
    coarse: np.ndarray        # [h, w] in [0, 1]
    upsampled: np.ndarray     # [H, W] in [0, 1]
    layer_id: str
    target_class: int


def _normalize(m: np.ndarray) -> np.ndarray:
    peak = m.max()
    return m / peak if peak > 0 else np.zeros_like(m)


def grad_cam(model: ResNet, image: np.ndarray, target_class: int,
             layer_id: Optional[str] = None) -> Heatmap:
    """Grad-CAM of one image for ``target_class`` at ``layer_id``.

    Args:
        model: Network; it is switched to eval mode.
        image: ``[3, H, W]`` float input (as fed to the model) or ``[H, W, 3]``
            uint8 fused image.
        target_class: Index of the logit to explain (pre-softmax).
        layer_id: One of ``model.layer_ids()``; defaults to the deepest stage.

    Raises:
        KeyError: for an unknown layer id.
    """
    layer_id = layer_id or model.default_cam_layer
    if layer_id not in model.layer_ids():
        raise KeyError(f"unknown layer id {layer_id!r}; choose from {model.layer_ids()}")
    if not 0 <= target_class < model.config.num_classes:
        raise ConfigError(f"target class {target_class} out of range")
    x = _as_input(image, model.stem.weight.dtype)
    captured: dict[str, Tensor] = {}

    def hook(t: Tensor) -> Tensor:
        captured["a"] = t.retain_grad()
        return t

    model.eval()
    logits = model(Tensor(x[None]), hooks={layer_id: hook})
    onehot = np.zeros_like(logits.data)
    onehot[0, target_class] = 1.0
    (logits * Tensor(onehot)).sum().backward()
    act = captured["a"]
    a = act.data[0].astype(np.float64)
    g = (act.grad[0] if act.grad is not None else np.zeros_like(act.data[0])).astype(np.float64)
    alpha = g.mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    coarse = _normalize(raw)
    h, w = x.shape[1:]
    up = np.clip(resize(coarse, h, w), 0.0, 1.0) if coarse.shape != (h, w) else coarse
    return Heatmap(a, g, alpha, raw, coarse, _normalize(up) if up.max() > 0 else np.zeros_like(up),
                   layer_id, target_class)


def _as_input(image: np.ndarray, dtype) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError(f"expected a single image, got shape {image.shape}")
    if image.dtype == np.uint8:
        return np.ascontiguousarray(image.transpose(2, 0, 1), dtype=dtype) / np.dtype(dtype).type(255)
    return image.astype(dtype)


def colorize(heat: np.ndarray) -> np.ndarray:
    """Map [0, 1] values onto the blue -> red ramp as uint8 RGB."""
    h = np.clip(heat, 0.0, 1.0)[..., None]
    return np.rint((1 - h) * RAMP_LOW + h * RAMP_HIGH).astype(np.uint8)


def render_overlay(image: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Original | colorized heatmap | 50% blend, separated by white columns."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3 or image.dtype != np.uint8:
        raise DimensionError(f"expected uint8 [H, W, 3] image, got {image.dtype} {image.shape}")
    if heat.shape != image.shape[:2]:
        raise DimensionError(f"heatmap {heat.shape} does not match image {image.shape[:2]}")
    color = colorize(heat)
    blend = np.rint(0.5 * image.astype(np.float64) + 0.5 * color).astype(np.uint8)
    sep = np.full((image.shape[0], SEPARATOR_WIDTH, 3), 255, dtype=np.uint8)
    return np.concatenate([image, sep, color, sep, blend], axis=1)


def write_heatmap_csv(path, heat: np.ndarray) -> None:
    np.savetxt(path, heat, delimiter=",", fmt="%.6f")
