"""Grad-CAM heatmaps over the last conv stage and PNG overlays."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .augment import to_model_input
from .nn_core import Network
from .slide_core import PatchRef, save_png

DEFAULT_OPACITY = 0.4


@dataclass
class Heatmap:
    values: np.ndarray  # (H', W') float64 in [0, 1]
    target_class: int
    ref: PatchRef | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def cam_from_maps(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """ReLU of the gradient-weighted channel sum, max-normalised.

    Both inputs are ``(C, H', W')``. Channel weights are the spatial mean of
    the gradients. An all-nonpositive map comes back as zeros.
    """
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.shape != g.shape or a.ndim != 3:
        raise ValueError(f"activations {a.shape} and gradients {g.shape} must both be (C, H, W)")
    weights = g.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def grad_cam(net: Network, patch: np.ndarray, target_class: int, ref: PatchRef | None = None) -> Heatmap:
    """Grad-CAM of one uint8 patch (already at network input size)."""
    k = net.config.num_classes
    if not 0 <= int(target_class) < k:
        raise ValueError(f"target_class {target_class} out of range for {k} classes")
    fp = net.forward(to_model_input(np.asarray(patch)[None], net.dtype))
    dlogits = np.zeros_like(fp.logits)
    dlogits[0, target_class] = 1
    _, dfeat = net.backward(fp, dlogits, return_feature_grad=True)
    acts = fp.features[0].transpose(2, 0, 1)
    grads = dfeat[0].transpose(2, 0, 1)
    return Heatmap(cam_from_maps(acts, grads), int(target_class), ref)


def predicted_class(net: Network, patch: np.ndarray) -> int:
    fp = net.forward(to_model_input(np.asarray(patch)[None], net.dtype), keep_cache=False)
    return int(np.argmax(fp.logits[0]))


def target_logit(net: Network, patch: np.ndarray, target_class: int) -> float:
    fp = net.forward(to_model_input(np.asarray(patch)[None], net.dtype), keep_cache=False)
    return float(fp.logits[0, target_class])


def upsample(values: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a float map to ``(height, width)``."""
    h, w = size
    img = Image.fromarray(np.asarray(values, dtype=np.float32))
    return np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float64)


def blue_red(values: np.ndarray) -> np.ndarray:
    """Linear colormap: 0 -> pure blue, 1 -> pure red. Returns float RGB in [0, 255]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([255.0 * v, np.zeros_like(v), 255.0 * (1.0 - v)], axis=-1)


def overlay(patch: np.ndarray, heatmap: Heatmap | np.ndarray, opacity: float = DEFAULT_OPACITY,
            colormap=blue_red) -> np.ndarray:
    if not 0.0 <= opacity <= 1.0:
        raise ValueError("opacity must be in [0, 1]")
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    patch = np.asarray(patch, dtype=np.uint8)
    colors = colormap(upsample(values, patch.shape[:2]))
    blended = (1.0 - opacity) * patch.astype(np.float64) + opacity * colors
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def render_overlay(patch: np.ndarray, heatmap: Heatmap | np.ndarray, path: str | Path,
                   opacity: float = DEFAULT_OPACITY, colormap=blue_red) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_png(overlay(patch, heatmap, opacity, colormap), path)
    return path


def occlude_top(patch: np.ndarray, heatmap: Heatmap, fill, quantile: float = 0.9) -> np.ndarray:
    """Replace pixels whose upsampled heat is in the top ``1 - quantile`` with ``fill``.

    A zero heatmap occludes nothing.
    """
    patch = np.asarray(patch, dtype=np.uint8)
    heat = upsample(heatmap.values, patch.shape[:2])
    if heat.max() <= 0:
        return patch.copy()
    region = heat >= np.quantile(heat, quantile)
    out = patch.copy()
    out[region] = np.asarray(fill, dtype=np.uint8)
    return out


def occlusion_drop(net: Network, patch: np.ndarray, heatmap: Heatmap, fill) -> float:
    """Target-logit change after occluding the top-decile region (negative = decrease)."""
    before = target_logit(net, patch, heatmap.target_class)
    after = target_logit(net, occlude_top(patch, heatmap, fill), heatmap.target_class)
    return after - before


def ref_key(ref: PatchRef) -> str:
    return f"{ref.slide_id}:{ref.x}:{ref.y}"


def cam_batch(net: Network, items: Sequence[tuple[PatchRef, np.ndarray, np.ndarray]], out_dir: str | Path,
              target_class: int | None = None, opacity: float = DEFAULT_OPACITY) -> dict[str, str]:
    """Render overlays for ``(ref, network_input, display_patch)`` triples.

    The target defaults to the network's predicted class per patch. Writes
    ``index.json`` mapping ``slide:x:y`` to the PNG path relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for ref, x, display in items:
        cls = predicted_class(net, x) if target_class is None else target_class
        hm = grad_cam(net, x, cls, ref)
        name = f"{ref.slide_id}_{ref.x}_{ref.y}_c{cls}.png"
        render_overlay(display, hm, out_dir / name, opacity)
        index[ref_key(ref)] = name
    write_index(out_dir, index)
    return index


def write_index(out_dir: str | Path, index: dict) -> None:
    Path(out_dir, "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
