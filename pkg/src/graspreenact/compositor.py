"""Wrist alignment, harmonic background fill and mask compositing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Mesh
from .hand_model import HandModel, wrist_point
from .renderer import RasterImage

__all__ = ["CompositeError", "InpaintConfig", "align_wrist", "inpaint_background", "merge"]


class CompositeError(ValueError):
    pass


def align_wrist(model: HandModel, target_hand: Mesh, new_hand: Mesh, attached_object: Mesh):
    """Translate ``new_hand`` and ``attached_object`` so the wrists coincide."""
    n = len(model.template_vertices)
    if len(target_hand.vertices) != n or len(new_hand.vertices) != n:
        raise CompositeError("hand meshes do not come from this hand model")
    offset = wrist_point(model, target_hand) - wrist_point(model, new_hand)
    if not offset.any():
        return new_hand, attached_object
    return new_hand.translated(offset), attached_object.translated(offset)


@dataclass(frozen=True)
class InpaintConfig:
    tolerance: float = 1e-4
    max_iterations: int = 20000


def _as_rgb(x) -> np.ndarray:
    return np.asarray(getattr(x, "rgb", x), dtype=np.float64)


def _as_mask(s) -> np.ndarray:
    return np.asarray(getattr(s, "values", s)).astype(bool)


def inpaint_background(image, mask, config: InpaintConfig | None = None) -> RasterImage:
    """Fill masked pixels with the harmonic interpolant of their surroundings.

    Jacobi sweeps over the mask's bounding box (grown by one pixel) with the
    4-neighbourhood; at the image border a missing neighbour is replaced by
    the pixel itself.  Masked pixels start at the mean of the unmasked pixels
    bordering the region.
    """
    config = config or InpaintConfig()
    rgb = _as_rgb(image)
    m = _as_mask(mask)
    if rgb.shape[:2] != m.shape:
        raise CompositeError("image and mask differ in size")
    if not m.any():
        return RasterImage(rgb)
    if m.all():
        raise CompositeError("mask covers the whole image; nothing to inpaint from")
    out = rgb * (~m)[:, :, None]  # (1 - s) * x: masked content is never read
    rows, cols = np.nonzero(m)
    r0, r1 = max(rows.min() - 1, 0), min(rows.max() + 2, m.shape[0])
    c0, c1 = max(cols.min() - 1, 0), min(cols.max() + 2, m.shape[1])
    sub = out[r0:r1, c0:c1].copy()
    sub_mask = m[r0:r1, c0:c1]
    ring = np.zeros_like(sub_mask)
    ring[:-1] |= sub_mask[1:]
    ring[1:] |= sub_mask[:-1]
    ring[:, :-1] |= sub_mask[:, 1:]
    ring[:, 1:] |= sub_mask[:, :-1]
    ring &= ~sub_mask
    sub[sub_mask] = sub[ring].mean(axis=0)
    for _ in range(config.max_iterations):
        # edge padding only matters where the box touches the image border
        padded = np.pad(sub, ((1, 1), (1, 1), (0, 0)), mode="edge")
        avg = 0.25 * (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:])
        change = np.abs(avg[sub_mask] - sub[sub_mask]).max()
        sub[sub_mask] = avg[sub_mask]
        if change < config.tolerance:
            break
    out[r0:r1, c0:c1] = sub
    return RasterImage(np.where(m[:, :, None], out, rgb))


def merge(x_fg, x_bg, s) -> RasterImage:
    """Foreground where ``s`` is 1, background elsewhere, selected exactly."""
    fg, bg, m = _as_rgb(x_fg), _as_rgb(x_bg), _as_mask(s)
    if fg.shape != bg.shape or fg.shape[:2] != m.shape:
        raise CompositeError(f"size mismatch: {fg.shape}, {bg.shape}, {m.shape}")
    return RasterImage(np.where(m[:, :, None], fg, bg))
