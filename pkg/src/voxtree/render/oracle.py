"""In-core reference renderer.

Brute-force ray-caster over the original full-resolution volume held in
RAM: identical ray setup, sampling positions, per-channel transforms,
transfer functions, clipping and compositing as the out-of-core renderer,
but no level of detail and no bricks. Serves as the ground truth the
completed refinement render is checked against.
"""

from __future__ import annotations

import numpy as np

from ..volume import VolumeDescriptor
from .core import (
    CompositeState,
    RayBatch,
    RenderCounters,
    finalize_image,
    march,
    transform_points,
)
from .settings import Scene


class ReferenceRenderer:
    def __init__(self, volume: np.ndarray, desc: VolumeDescriptor):
        if volume.ndim == 3:
            volume = volume[..., None]
        dz, dy, dx, nc = volume.shape
        if (dx, dy, dz) != desc.dims or nc != desc.channels:
            raise ValueError("volume array does not match the descriptor")
        self.descriptor = desc
        self.channels = nc
        self.fmax = float(desc.format_max)
        self.background = float(desc.background_value)
        self.spacing = np.asarray(desc.spacing, dtype=np.float64)
        self.dims = np.asarray(desc.dims, dtype=np.float64)
        self.box_hi = self.dims * self.spacing
        self.padded = np.pad(volume, ((1, 1), (1, 1), (1, 1), (0, 0)),
                             constant_values=desc.background_value)
        if desc.has_channel_transforms:
            self.transforms = [desc.channel_transforms[c] for c in range(nc)]
        else:
            self.transforms = None

    def _sample_channel(self, pvox: np.ndarray, channel: int) -> np.ndarray:
        f = pvox + 0.5  # background-padded array is offset by one voxel
        i0 = np.clip(np.floor(f).astype(np.int64), 0, self.dims.astype(np.int64))
        w1 = np.clip(f - i0, 0.0, 1.0)
        w0 = 1.0 - w1
        value = np.zeros(pvox.shape[0], dtype=np.float64)
        for dz in (0, 1):
            wz = w1[:, 2] if dz else w0[:, 2]
            for dy in (0, 1):
                wy = w1[:, 1] if dy else w0[:, 1]
                for dx in (0, 1):
                    wx = w1[:, 0] if dx else w0[:, 0]
                    corner = self.padded[i0[:, 2] + dz, i0[:, 1] + dy,
                                         i0[:, 0] + dx, channel].astype(np.float64)
                    value += wz * wy * wx * corner
        return value

    def _sampler(self, positions: np.ndarray, _ray_idx: np.ndarray):
        n = positions.shape[0]
        out = np.full((n, self.channels), self.background, dtype=np.float64)
        for c in range(self.channels):
            p = positions
            if self.transforms is not None:
                p = transform_points(positions, self.transforms[c])
            pvox = p / self.spacing
            inside = np.all((pvox >= 0.0) & (pvox <= self.dims), axis=1)
            sel = np.flatnonzero(inside)
            if sel.size:
                out[sel, c] = self._sample_channel(pvox[sel], c)
        return out, np.zeros(n, dtype=bool)

    def render(self, scene: Scene) -> np.ndarray:
        rays = RayBatch(scene, self.box_hi, self.descriptor.spacing)
        state = CompositeState(rays.count, self.channels)
        counters = RenderCounters()
        march(state, rays, self._sampler, scene, self.fmax, counters)
        return finalize_image(state, scene, self.fmax, counters)


def render_reference(volume: np.ndarray, desc: VolumeDescriptor,
                     scene: Scene) -> np.ndarray:
    return ReferenceRenderer(volume, desc).render(scene)
