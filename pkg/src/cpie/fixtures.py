"""Synthetic desk-scale dataset: rasterized line segments and circular arcs
with exact 1-px ground-truth masks over procedural backgrounds.

Stands in for real annotated photographs, so training, thinning,
evaluation and fitting can all run end to end with known geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from skimage.draw import circle_perimeter, line


@dataclass
class FixtureMeta:
    kind: str           # "LS" or "CA"
    params: dict        # line: x0,y0,x1,y1,angle_deg; arc: cx,cy,r,a0,a1


def _background(h, w, rng):
    """Smooth low-frequency background with mild texture."""
    coarse = rng.uniform(0.1, 0.45, (4, 4, 3)).astype(np.float32)
    bg = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    noise = rng.normal(0.0, 0.015, (h, w, 3)).astype(np.float32)
    return np.clip(bg + noise, 0.0, 1.0)


def _raster_line(h, w, rng):
    margin = 6
    for _ in range(64):
        x0, x1 = rng.integers(margin, w - margin, 2)
        y0, y1 = rng.integers(margin, h - margin, 2)
        if np.hypot(x1 - x0, y1 - y0) >= min(h, w) * 0.55:
            break
    rr, cc = line(int(y0), int(x0), int(y1), int(x1))
    mask = np.zeros((h, w), np.uint8)
    mask[rr, cc] = 1
    angle = np.degrees(np.arctan2(float(y1 - y0), float(x1 - x0))) % 180.0
    meta = FixtureMeta("LS", {"x0": int(x0), "y0": int(y0), "x1": int(x1),
                              "y1": int(y1), "angle_deg": float(angle)})
    return mask, meta


def _raster_arc(h, w, rng):
    r = int(rng.integers(min(h, w) // 5, min(h, w) // 3))
    cy = int(rng.integers(r + 4, h - r - 4))
    cx = int(rng.integers(r + 4, w - r - 4))
    rr, cc = circle_perimeter(cy, cx, r, method="bresenham")
    a0 = float(rng.uniform(0, 360))
    extent = float(rng.uniform(150, 330))
    ang = (np.degrees(np.arctan2(rr - cy, cc - cx)) - a0) % 360.0
    keep = ang <= extent
    mask = np.zeros((h, w), np.uint8)
    mask[rr[keep], cc[keep]] = 1
    meta = FixtureMeta("CA", {"cx": cx, "cy": cy, "r": r,
                              "a0": a0, "a1": (a0 + extent) % 360.0})
    return mask, meta


def make_fixture(h=160, w=160, kind=None, seed=0):
    """One synthetic sample: [0,1] image, 1-px binary mask, meta record."""
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = "LS" if rng.random() < 0.5 else "CA"
    img = _background(h, w, rng)
    if kind == "LS":
        mask, meta = _raster_line(h, w, rng)
    else:
        mask, meta = _raster_arc(h, w, rng)
    # draw the primitive as a bright 3-px stroke, slightly blurred
    stroke = cv2.dilate(mask, np.ones((3, 3), np.uint8)).astype(np.float32)
    stroke = cv2.GaussianBlur(stroke, (3, 3), 0.6)
    color = rng.uniform(0.75, 1.0, 3).astype(np.float32)
    img = img * (1.0 - stroke[:, :, None]) + stroke[:, :, None] * color
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask, meta


def make_distractors(h, w, seed, n=3):
    """Procedural texture images serving as the distractor pool."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        coarse = rng.uniform(0.0, 1.0, (6, 6, 3)).astype(np.float32)
        img = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
        out.append(np.clip(img, 0.0, 1.0))
    return out


def meta_line(index, meta: FixtureMeta) -> str:
    kv = ";".join(f"{k}={v}" for k, v in meta.params.items())
    return f"{index:04d}\t{meta.kind}\t{kv}"


def parse_meta_line(text: str):
    idx, kind, kv = text.strip().split("\t")
    params = {}
    for part in kv.split(";"):
        k, v = part.split("=")
        params[k] = float(v)
    return int(idx), FixtureMeta(kind, params)
