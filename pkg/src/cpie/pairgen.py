"""Support-query sample pair generation.

One annotated raw image is turned into a support/query pair by two
independent randomized passes: mix-up with a distractor image, a pasted
distractor patch that avoids the contour, padding onto a resized backdrop,
an affine + photometric augmentation, and a random crop back to the
original size that keeps the whole contour. Everything is driven by a
seeded numpy Generator, so a pair is fully determined by
(raw, distractors, config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np


class PairGenError(RuntimeError):
    """Raised when a valid sample pair cannot be produced."""


@dataclass
class RawSample:
    image: np.ndarray   # HxWx3 float32 in [0,1]
    contour: np.ndarray  # HxW binary {0,1}

    def validate(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise PairGenError(f"raw image must be HxWx3, got {self.image.shape}")
        if self.contour.shape != self.image.shape[:2]:
            raise PairGenError("contour shape does not match image")
        if self.contour.sum() <= 0:
            raise PairGenError("raw contour is empty")
        vals = np.unique(self.contour)
        if not np.all(np.isin(vals, [0, 1])):
            raise PairGenError("contour must be binary {0,1}")


@dataclass
class SamplePair:
    support: tuple  # (image, mask)
    query: tuple    # (image, mask)
    skipped_patch: tuple = (False, False)  # per pass


@dataclass
class AugmentConfig:
    mixup_max: float = 0.3
    pad_factor: float = 1.4
    rotation_deg: float = 15.0
    shear_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    aspect_range: tuple = (0.9, 1.1)
    translate_frac: float = 0.1
    patch_area_range: tuple = (0.10, 0.30)
    dropout_max_rects: int = 3
    dropout_max_area: float = 0.05
    color_gain: tuple = (0.9, 1.1)
    color_offset: float = 0.05
    train_dilate_px: int = 3
    flip: bool = True
    patch_enabled: bool = True
    center_crop: bool = False
    max_attempts: int = 64

    @classmethod
    def identity(cls):
        """All randomness disabled: both passes reproduce the raw sample."""
        return cls(mixup_max=0.0, rotation_deg=0.0, shear_deg=0.0,
                   scale_range=(1.0, 1.0), aspect_range=(1.0, 1.0),
                   translate_frac=0.0, dropout_max_rects=0,
                   color_gain=(1.0, 1.0), color_offset=0.0,
                   flip=False, patch_enabled=False, center_crop=True)

    def validate(self):
        if not 0.0 <= self.mixup_max <= 1.0:
            raise PairGenError("mixup_max must be in [0,1]")
        if self.pad_factor <= 1.0:
            raise PairGenError("pad_factor must be > 1")


def _resize(img, h, w, nearest=False):
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.resize(img, (w, h), interpolation=interp)


def mixup(i_r: np.ndarray, i_1: np.ndarray, gamma: float) -> np.ndarray:
    """Convex blend (1-gamma)*i_r + gamma*i_1."""
    if i_r.shape != i_1.shape:
        raise PairGenError(f"mixup: shapes differ {i_r.shape} vs {i_1.shape}")
    return ((1.0 - gamma) * i_r + gamma * i_1).astype(np.float32)


def cutout_patch(i_mix: np.ndarray, c_r: np.ndarray, i_2: np.ndarray,
                 rng: np.random.Generator, config: AugmentConfig = None):
    """Paste a shrunk random crop of i_2 into i_mix without touching the contour.

    Returns (image, skipped). After max_attempts placements that would
    overlap contour foreground, the step is skipped.
    """
    config = config or AugmentConfig()
    h, w = i_mix.shape[:2]
    out = i_mix.copy()
    # random source crop of i_2, at least a quarter of it
    sh, sw = i_2.shape[:2]
    ch = rng.integers(sh // 4, sh + 1)
    cw = rng.integers(sw // 4, sw + 1)
    cy = rng.integers(0, sh - ch + 1)
    cx = rng.integers(0, sw - cw + 1)
    patch = i_2[cy:cy + ch, cx:cx + cw]
    # shrink to a fraction of the target image area, keeping the crop aspect
    frac = rng.uniform(*config.patch_area_range)
    area = frac * h * w
    ar = cw / ch
    ph = max(2, int(round(np.sqrt(area / ar))))
    pw = max(2, int(round(np.sqrt(area * ar))))
    ph, pw = min(ph, h), min(pw, w)
    patch = _resize(patch, ph, pw)
    for _ in range(config.max_attempts):
        y = int(rng.integers(0, h - ph + 1))
        x = int(rng.integers(0, w - pw + 1))
        if c_r[y:y + ph, x:x + pw].sum() == 0:
            out[y:y + ph, x:x + pw] = patch
            return out, False
    return out, True


def pad_surround(i_mix: np.ndarray, c_r: np.ndarray, i_3: np.ndarray,
                 pad_factor: float = 1.4):
    """Overlay i_mix at the center of a resized center-crop of i_3.

    Returns the padded image (pad_factor*H x pad_factor*W) and the
    zero-padded mask.
    """
    h, w = i_mix.shape[:2]
    ph, pw = int(round(pad_factor * h)), int(round(pad_factor * w))
    sh, sw = i_3.shape[:2]
    crop = i_3[sh // 4: sh - sh // 4, sw // 4: sw - sw // 4]
    backdrop = _resize(crop, ph, pw).astype(np.float32)
    y0, x0 = (ph - h) // 2, (pw - w) // 2
    backdrop[y0:y0 + h, x0:x0 + w] = i_mix
    mask = np.zeros((ph, pw), dtype=c_r.dtype)
    mask[y0:y0 + h, x0:x0 + w] = c_r
    return backdrop, mask


def _sample_affine(h, w, config: AugmentConfig, rng: np.random.Generator):
    """Random affine about the image center: scale, aspect, rotate, shear, shift."""
    scale = rng.uniform(*config.scale_range)
    aspect = rng.uniform(*config.aspect_range)
    rot = np.deg2rad(rng.uniform(-config.rotation_deg, config.rotation_deg))
    shear = np.deg2rad(rng.uniform(-config.shear_deg, config.shear_deg))
    tx = rng.uniform(-config.translate_frac, config.translate_frac) * w
    ty = rng.uniform(-config.translate_frac, config.translate_frac) * h
    sx, sy = scale * aspect, scale / aspect
    cos, sin = np.cos(rot), np.sin(rot)
    a = np.array([[cos, -sin], [sin, cos]]) @ np.array([[1.0, np.tan(shear)], [0.0, 1.0]])
    a = a @ np.diag([sx, sy])
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    shift = np.array([cx + tx, cy + ty]) - a @ np.array([cx, cy])
    return np.hstack([a, shift[:, None]]).astype(np.float64)


def augment(image: np.ndarray, mask: np.ndarray, config: AugmentConfig,
            rng: np.random.Generator):
    """Affine transform shared by image and mask, then image-only jitter."""
    h, w = mask.shape
    for _ in range(config.max_attempts):
        mat = _sample_affine(h, w, config, rng)
        m2 = cv2.warpAffine(mask.astype(np.float32), mat, (w, h),
                            flags=cv2.INTER_NEAREST, borderValue=0)
        m2 = (m2 >= 0.5).astype(mask.dtype)
        if m2.sum() > 0:
            break
    else:
        raise PairGenError("augment: contour mapped out of frame repeatedly")
    img2 = cv2.warpAffine(image, mat, (w, h), flags=cv2.INTER_LINEAR, borderValue=0)
    # coarse dropout
    n_rects = int(rng.integers(0, config.dropout_max_rects + 1))
    for _ in range(n_rects):
        area = rng.uniform(0.005, config.dropout_max_area) * h * w
        rh = max(1, int(round(np.sqrt(area * rng.uniform(0.5, 2.0)))))
        rw = max(1, int(round(area / rh)))
        rh, rw = min(rh, h), min(rw, w)
        y = int(rng.integers(0, h - rh + 1))
        x = int(rng.integers(0, w - rw + 1))
        img2[y:y + rh, x:x + rw] = rng.uniform(0.0, 1.0)
    # slight color jitter, image only
    gain = rng.uniform(*config.color_gain, size=3).astype(np.float32)
    offset = rng.uniform(-config.color_offset, config.color_offset,
                         size=3).astype(np.float32)
    img2 = np.clip(img2 * gain + offset, 0.0, 1.0).astype(np.float32)
    return img2, m2


def crop_back(image: np.ndarray, mask: np.ndarray, out_h: int, out_w: int,
              rng: np.random.Generator, center: bool = False):
    """Random out_h x out_w crop whose window contains all mask foreground."""
    if mask.sum() <= 0:
        raise PairGenError("crop_back: empty mask")
    ys, xs = np.nonzero(mask)
    y0b, y1b = ys.min(), ys.max()
    x0b, x1b = xs.min(), xs.max()
    if y1b - y0b + 1 > out_h or x1b - x0b + 1 > out_w:
        raise PairGenError("crop_back: contour bounding box exceeds output size")
    h, w = mask.shape
    ylo = max(0, y1b - out_h + 1)
    yhi = min(h - out_h, y0b)
    xlo = max(0, x1b - out_w + 1)
    xhi = min(w - out_w, x0b)
    if center:
        y = int(np.clip((h - out_h) // 2, ylo, yhi))
        x = int(np.clip((w - out_w) // 2, xlo, xhi))
    else:
        y = int(rng.integers(ylo, yhi + 1))
        x = int(rng.integers(xlo, xhi + 1))
    return (image[y:y + out_h, x:x + out_w].copy(),
            mask[y:y + out_h, x:x + out_w].copy())


def dilate_mask(mask: np.ndarray, width_px: int) -> np.ndarray:
    """Thicken a 1-px contour to roughly width_px using a box kernel."""
    if width_px <= 1:
        return mask
    kernel = np.ones((width_px, width_px), np.uint8)
    return cv2.dilate(mask.astype(np.uint8), kernel).astype(mask.dtype)


def _one_pass(i_r, c_r, distractors, config, rng):
    gamma = rng.uniform(0.0, config.mixup_max)
    i_mix = mixup(i_r, distractors[0], gamma)
    skipped = False
    if config.patch_enabled:
        i_mix, skipped = cutout_patch(i_mix, c_r, distractors[1], rng, config)
    padded, mask = pad_surround(i_mix, c_r, distractors[2], config.pad_factor)
    aug_img, aug_mask = augment(padded, mask, config, rng)
    img, msk = crop_back(aug_img, aug_mask, c_r.shape[0], c_r.shape[1], rng,
                         center=config.center_crop)
    return img, msk, skipped


def generate_pair(raw: RawSample, distractors, config: AugmentConfig = None,
                  seed: int = 0, train: bool = True) -> SamplePair:
    """Two independent randomized passes produce the support and query samples.

    In train mode both masks are dilated to config.train_dilate_px width;
    in test mode they stay 1-px.
    """
    config = config or AugmentConfig()
    config.validate()
    raw.validate()
    if len(distractors) < 3:
        raise PairGenError("three distractor images are required")
    for d in distractors[:3]:
        if d.shape != raw.image.shape:
            raise PairGenError("distractors must match the raw image shape")
    rng = np.random.default_rng(seed)
    i_r, c_r = raw.image, raw.contour
    if config.flip:
        # shared flips so both passes see the same orientation
        if rng.random() < 0.5:
            i_r, c_r = i_r[:, ::-1].copy(), c_r[:, ::-1].copy()
        if rng.random() < 0.5:
            i_r, c_r = i_r[::-1].copy(), c_r[::-1].copy()
    s_img, s_msk, s_skip = _one_pass(i_r, c_r, distractors, config, rng)
    q_img, q_msk, q_skip = _one_pass(i_r, c_r, distractors, config, rng)
    if train and config.train_dilate_px > 1:
        s_msk = dilate_mask(s_msk, config.train_dilate_px)
        q_msk = dilate_mask(q_msk, config.train_dilate_px)
    return SamplePair(support=(s_img, s_msk), query=(q_img, q_msk),
                      skipped_patch=(s_skip, q_skip))
