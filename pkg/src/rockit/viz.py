"""Diagnostic renderings: confidence heatmaps and match-line images."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .simscene import apply_homography


def _to_uint8(img):
    return np.clip(np.rint(np.moveaxis(img, 0, -1) * 255.0), 0, 255).astype(np.uint8)


def colormap_heat(values):
    """Simple blue->red heat colormap over normalized [0,1] values."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(1.5 * v, 0, 1)
    g = np.clip(1.5 * v - 0.5, 0, 1) * np.clip(3 - 3 * v, 0, 1)
    b = np.clip(1.0 - 1.5 * v, 0, 1)
    return np.stack([r, g, b], axis=-1)


def confidence_overlay(image, confidence, alpha=0.6):
    """Blend a confidence heatmap over an RGB image; returns PIL image.

    The heatmap is normalized by the map's own max, so the hottest pixel is
    always the confidence argmax.
    """
    conf = np.asarray(confidence, dtype=np.float64)
    norm = conf / conf.max() if conf.max() > 0 else conf
    heat = colormap_heat(norm)
    base = np.moveaxis(np.asarray(image, dtype=np.float64), 0, -1)
    blend = (1 - alpha) * base + alpha * heat
    return Image.fromarray(np.clip(np.rint(blend * 255), 0, 255).astype(np.uint8))


def save_confidence_overlay(path, image, confidence, alpha=0.6):
    confidence_overlay(image, confidence, alpha).save(path)


def match_lines(image_a, image_b, coords_a, coords_b, matches, warp=None,
                correct_px=5.0):
    """Side-by-side images with match lines; returns PIL image.

    With a ground-truth ``warp`` (3x3, a->b), correct matches (reprojection
    error < ``correct_px``) draw green and incorrect ones red; without a
    warp all lines are yellow.  Output height is max(Ha, Hb), width Wa+Wb.
    """
    a = _to_uint8(image_a)
    b = _to_uint8(image_b)
    ha, wa = a.shape[:2]
    hb, wb = b.shape[:2]
    canvas = np.zeros((max(ha, hb), wa + wb, 3), dtype=np.uint8)
    canvas[:ha, :wa] = a
    canvas[:hb, wa:] = b
    img = Image.fromarray(canvas)
    draw = ImageDraw.Draw(img)
    coords_a = np.asarray(coords_a, dtype=np.float64).reshape(-1, 2)
    coords_b = np.asarray(coords_b, dtype=np.float64).reshape(-1, 2)
    for ia, ib, _ in matches.pairs:
        ra, ca = coords_a[ia]
        rb, cb = coords_b[ib]
        if warp is not None:
            proj = apply_homography(warp, np.array([[ca, ra]]))[0]
            err = np.hypot(proj[0] - cb, proj[1] - rb)
            color = (40, 220, 40) if err < correct_px else (230, 50, 50)
        else:
            color = (230, 220, 60)
        draw.line([(ca, ra), (cb + wa, rb)], fill=color, width=1)
    return img


def save_match_lines(path, image_a, image_b, coords_a, coords_b, matches,
                     warp=None, correct_px=5.0):
    match_lines(image_a, image_b, coords_a, coords_b, matches, warp, correct_px).save(path)
