"""Contour thinning by oriented-ridge non-maximum suppression.

Four 9x9 even Gabor kernels (normal directions 0, 45, 90, 135 degrees)
estimate each contour pixel's local normal from a Gaussian-smoothed copy
of the raw contour map; the pixel survives only if the smoothed value is
a maximum along that normal. Surviving pixels keep their raw value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate


@dataclass
class GaborParams:
    sigma: float = 2.0
    theta_deg: float = 0.0
    lam: float = 9.0
    gamma: float = 0.3
    psi: float = 0.0
    size: int = 9

    def validate(self):
        if self.size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.sigma <= 0 or self.lam <= 0:
            raise ValueError("sigma and lambda must be positive")


def build_gabor_kernel(params: GaborParams) -> np.ndarray:
    """Even Gabor kernel sampled on the integer grid centered at 0.

    x axis is the column offset, y the row offset (rows increase downward);
    theta is the ridge normal direction.
    """
    params.validate()
    half = params.size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    th = np.deg2rad(params.theta_deg)
    xr = x * np.cos(th) + y * np.sin(th)
    yr = -x * np.sin(th) + y * np.cos(th)
    env = np.exp(-(xr ** 2 + (params.gamma ** 2) * yr ** 2) / (2.0 * params.sigma ** 2))
    carrier = np.cos(2.0 * np.pi * xr / params.lam + params.psi)
    return (env * carrier).astype(np.float32)


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    half = size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    g = np.exp(-(x ** 2 + y ** 2) / (2.0 * sigma ** 2))
    return (g / g.sum()).astype(np.float32)


# NMS neighbor offsets per direction label (1..4), matching the kernel
# whose normal the label names: label 1 = horizontal normal etc.
_NEIGHBORS = {
    1: ((0, -1), (0, 1)),
    2: ((-1, -1), (1, 1)),
    3: ((-1, 0), (1, 0)),
    4: ((1, -1), (-1, 1)),
}


class GaborBank:
    """Four oriented kernels, the direction threshold and the smoother."""

    THETAS = (0.0, 45.0, 90.0, 135.0)

    def __init__(self, params: GaborParams = None, g0: float = 2.0,
                 smooth_size: int = 5, smooth_sigma: float = 1.0):
        base = params or GaborParams()
        self.g0 = float(g0)
        self.kernels = []
        for th in self.THETAS:
            p = GaborParams(base.sigma, th, base.lam, base.gamma, base.psi, base.size)
            self.kernels.append(build_gabor_kernel(p))
        self.smoother = gaussian_kernel(smooth_size, smooth_sigma)

    def dump(self, path):
        """Plain-text kernel listing for golden-file comparison."""
        with open(path, "w") as f:
            for th, k in zip(self.THETAS, self.kernels):
                f.write(f"# theta={th}\n")
                for row in k:
                    f.write(" ".join(f"{v:.6f}" for v in row) + "\n")


def _correlate(image, kernel):
    # zero-padded borders
    return correlate(image.astype(np.float32), kernel, mode="constant", cval=0.0)


def smooth(contour: np.ndarray, bank: GaborBank) -> np.ndarray:
    return _correlate(contour, bank.smoother)


def gabor_responses(smoothed: np.ndarray, bank: GaborBank):
    """The four oriented correlation maps of the smoothed contour."""
    return [_correlate(smoothed, k) for k in bank.kernels]


def direction_map(contour: np.ndarray, responses, g0: float) -> np.ndarray:
    """Per-pixel argmax over (g0, responses); 0 where contour is 0 or g0 wins."""
    stack = np.stack([np.full_like(responses[0], g0)] + list(responses))
    # np.argmax takes the first maximum: g0 wins ties, then lower k
    labels = np.argmax(stack, axis=0).astype(np.uint8)
    labels[contour == 0] = 0
    return labels


def nms_thin(contour: np.ndarray, bank: GaborBank = None) -> np.ndarray:
    """Thin a raw [0,1] contour map to single-pixel width."""
    bank = bank or GaborBank()
    c = np.asarray(contour, dtype=np.float32)
    s = smooth(c, bank)
    responses = gabor_responses(s, bank)
    labels = direction_map(c, responses, bank.g0)
    out = np.zeros_like(c)
    sp = np.pad(s, 1, mode="constant")  # out-of-range neighbors are 0
    for label, ((dy1, dx1), (dy2, dx2)) in _NEIGHBORS.items():
        n1 = sp[1 + dy1: 1 + dy1 + c.shape[0], 1 + dx1: 1 + dx1 + c.shape[1]]
        n2 = sp[1 + dy2: 1 + dy2 + c.shape[0], 1 + dx2: 1 + dx2 + c.shape[1]]
        keep = (labels == label) & (s >= np.maximum(n1, n2))
        out[keep] = c[keep]
    return out
