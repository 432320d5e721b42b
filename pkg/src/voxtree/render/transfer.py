"""Per-channel transfer functions: piecewise-linear RGBA over intensity."""

from __future__ import annotations

import numpy as np


class TransferFunction:
    """1D lookup mapping normalized intensity [0, 1] to RGBA, linear between
    control points, clamped outside their span."""

    def __init__(self, points):
        pts = sorted((float(p[0]), tuple(float(v) for v in p[1:])) for p in points)
        if len(pts) < 2:
            raise ValueError("a transfer function needs at least 2 control points")
        xs = [p[0] for p in pts]
        if any(b < a for a, b in zip(xs, xs[1:])):
            raise ValueError("control point intensities must be monotone")
        for _, rgba in pts:
            if len(rgba) != 4 or any(not 0.0 <= v <= 1.0 for v in rgba):
                raise ValueError("control point components must be within [0, 1]")
        self.xs = np.asarray(xs, dtype=np.float64)
        self.rgba = np.asarray([p[1] for p in pts], dtype=np.float64)

    @classmethod
    def ramp(cls, color=(1.0, 1.0, 1.0), max_alpha=1.0):
        """Linear opacity ramp from transparent black to ``color``."""
        return cls([(0.0, 0.0, 0.0, 0.0, 0.0), (1.0, *color, max_alpha)])

    @classmethod
    def constant(cls, r, g, b, a):
        return cls([(0.0, r, g, b, a), (1.0, r, g, b, a)])

    def lookup(self, intensity: np.ndarray) -> np.ndarray:
        """Vectorized lookup; returns an (N, 4) RGBA array."""
        x = np.asarray(intensity, dtype=np.float64)
        out = np.empty((x.size, 4), dtype=np.float64)
        flat = x.reshape(-1)
        for comp in range(4):
            out[:, comp] = np.interp(flat, self.xs, self.rgba[:, comp])
        return out

    def control_points(self):
        return [(float(x), *map(float, rgba))
                for x, rgba in zip(self.xs, self.rgba)]
