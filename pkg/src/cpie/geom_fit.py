"""Least-squares fitting of thinned contours to line segments and arcs.

Lines are fitted by total least squares (principal axis of the centered
point cloud); circles by the algebraic Kasa fit. A small classifier picks
the model with the lower rms residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class FitError(ValueError):
    """Raised for degenerate point sets (too few, coincident, collinear)."""


@dataclass
class LineSegmentFit:
    direction: np.ndarray  # unit (dx, dy)
    centroid: np.ndarray
    endpoints: np.ndarray  # 2x2, on the fitted line
    rms: float

    @property
    def angle_deg(self):
        """Line angle in [0, 180) degrees, measured from the +x axis."""
        a = np.degrees(np.arctan2(self.direction[1], self.direction[0]))
        return a % 180.0

    @property
    def length(self):
        return float(np.linalg.norm(self.endpoints[1] - self.endpoints[0]))


@dataclass
class CircularArcFit:
    center: np.ndarray
    radius: float
    span_deg: tuple  # (start, end), end > start, covering all points
    rms: float


def fit_line_segment(points) -> LineSegmentFit:
    """Total-least-squares line through >= 2 distinct (x, y) points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise FitError("line fit needs at least 2 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered
    if np.allclose(cov, 0.0):
        raise FitError("all points coincide")
    evals, evecs = np.linalg.eigh(cov)
    direction = evecs[:, -1]
    t = centered @ direction
    endpoints = centroid + np.outer([t.min(), t.max()], direction)
    normal = np.array([-direction[1], direction[0]])
    rms = float(np.sqrt(np.mean((centered @ normal) ** 2)))
    return LineSegmentFit(direction, centroid, endpoints, rms)


def fit_circular_arc(points) -> CircularArcFit:
    """Kasa circle fit: linear least squares on x^2+y^2 + Dx + Ey + F = 0."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise FitError("circle fit needs at least 3 points")
    x, y = pts[:, 0], pts[:, 1]
    a = np.stack([x, y, np.ones_like(x)], axis=1)
    b = -(x ** 2 + y ** 2)
    # collinear points make the normal equations singular
    if np.linalg.matrix_rank(a, tol=1e-9 * max(1.0, np.abs(a).max())) < 3:
        raise FitError("points are collinear; no unique circle")
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    d, e, f = sol
    center = np.array([-d / 2.0, -e / 2.0])
    r2 = d * d / 4.0 + e * e / 4.0 - f
    if r2 <= 0:
        raise FitError("degenerate circle (non-positive radius)")
    radius = float(np.sqrt(r2))
    radial = np.hypot(x - center[0], y - center[1])
    rms = float(np.sqrt(np.mean((radial - radius) ** 2)))
    return CircularArcFit(center, radius, _angular_span(pts, center), rms)


def _angular_span(pts, center):
    """Smallest contiguous angular interval covering all point angles."""
    ang = np.degrees(np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])) % 360.0
    ang = np.sort(np.unique(ang))
    if len(ang) == 1:
        return (float(ang[0]), float(ang[0]))
    gaps = np.diff(np.concatenate([ang, [ang[0] + 360.0]]))
    k = int(np.argmax(gaps))
    start = ang[(k + 1) % len(ang)]
    end = start + (360.0 - gaps[k])
    return (float(start), float(end))


def classify_primitive(points, arc_penalty: float = 1.0):
    """Fit both models; return ("LS"|"CA", line_fit, arc_fit).

    The arc rms is multiplied by arc_penalty before comparison; exact
    ties (within 1e-9) go to the simpler line model.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        raise FitError("classification needs at least 3 points")
    line = fit_line_segment(pts)
    try:
        arc = fit_circular_arc(pts)
    except FitError:
        return "LS", line, None
    if arc.rms * arc_penalty < line.rms - 1e-9:
        return "CA", line, arc
    return "LS", line, arc


def format_fit_record(tag, line, arc, n_points) -> str:
    """One tab-separated report line per contour primitive."""
    if tag == "LS":
        f = line
        params = (f"angle_deg={f.angle_deg:.3f};len={f.length:.2f};"
                  f"p0={f.endpoints[0][0]:.2f},{f.endpoints[0][1]:.2f};"
                  f"p1={f.endpoints[1][0]:.2f},{f.endpoints[1][1]:.2f}")
        rms = line.rms
    else:
        f = arc
        params = (f"cx={f.center[0]:.3f};cy={f.center[1]:.3f};r={f.radius:.3f};"
                  f"span={f.span_deg[0]:.1f},{f.span_deg[1]:.1f}")
        rms = arc.rms
    return f"{tag}\t{params}\t{rms:.4f}\t{n_points}"
