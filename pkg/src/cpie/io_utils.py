"""Image and config file I/O shared by the CLI commands.

Images are lossless 8-bit PNGs; internal representation is [0,1] float32
RGB (HWC). Masks are binarized at 128. Configs are plain key=value text
with unknown keys rejected.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def load_image(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return img / 255.0


def save_image(path, image: np.ndarray):
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_mask(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("L"))
    return (img >= 128).astype(np.uint8)


def save_mask(path, mask: np.ndarray):
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def save_map(path, prob_map: np.ndarray):
    """Store a [0,1] probability map as 8-bit grayscale."""
    arr = np.clip(np.asarray(prob_map), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_map(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0


def read_kv(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: bad config line: {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_kv(path, mapping: dict):
    with open(path, "w") as f:
        for k, v in mapping.items():
            f.write(f"{k}={v}\n")


def apply_kv(obj, kv: dict, caster=None):
    """Set dataclass fields from a key=value dict; unknown keys are errors."""
    for k, v in kv.items():
        if not hasattr(obj, k):
            raise ValueError(f"unknown config key: {k}")
        cur = getattr(obj, k)
        if isinstance(cur, bool):
            setattr(obj, k, v.lower() in ("1", "true", "yes"))
        elif isinstance(cur, int):
            setattr(obj, k, int(v))
        elif isinstance(cur, float):
            setattr(obj, k, float(v))
        elif isinstance(cur, tuple):
            setattr(obj, k, tuple(type(cur[0])(x) for x in v.split(",")))
        else:
            setattr(obj, k, v)
    return obj


def list_stems(directory, suffix=".png"):
    return sorted(os.path.splitext(f)[0] for f in os.listdir(directory)
                  if f.endswith(suffix))
