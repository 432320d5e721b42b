"""Pinhole camera and per-pixel ray generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length camera vector")
    return v / n


@dataclass
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_y: float = np.pi / 4
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("viewport must be at least 1x1 pixel")
        if not 0 < self.fov_y < np.pi:
            raise ValueError("vertical field of view must be in (0, pi)")
        self.basis()  # validates orthonormal derivation

    def basis(self):
        pos = np.asarray(self.position, dtype=np.float64)
        fwd = _normalize(np.asarray(self.look_at, dtype=np.float64) - pos)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right = _normalize(right)
        up = np.cross(right, fwd)
        return pos, fwd, right, up

    def rays(self):
        """Ray origins and unit directions through every pixel center,
        flattened row-major (origin shape (1, 3), dirs (H*W, 3))."""
        pos, fwd, right, up = self.basis()
        tan_half = np.tan(self.fov_y / 2.0)
        aspect = self.width / self.height
        xs = (2.0 * (np.arange(self.width) + 0.5) / self.width - 1.0) * tan_half * aspect
        ys = (1.0 - 2.0 * (np.arange(self.height) + 0.5) / self.height) * tan_half
        px, py = np.meshgrid(xs, ys)
        dirs = (fwd[None, :] + px.reshape(-1, 1) * right[None, :]
                + py.reshape(-1, 1) * up[None, :])
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return pos.reshape(1, 3), dirs

    def pixel_footprint_scale(self) -> float:
        """World extent one pixel covers per unit of view depth."""
        return 2.0 * np.tan(self.fov_y / 2.0) / self.height

    def pose_key(self):
        return (tuple(self.position), tuple(self.look_at), tuple(self.up),
                float(self.fov_y), self.width, self.height)
