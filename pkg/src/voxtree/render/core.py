"""Machinery shared by the out-of-core ray-caster and the in-core reference
renderer: ray/box/clip intersection, the marching loop, and accumulation
level intermixing for DVR plus per-channel maxima for MIP.

Both renderers run the exact same loop over the exact same sample positions
and composite with the same float64 arithmetic; they differ only in where a
sample's intensity comes from. That is what makes the completed refinement
image comparable to the reference renderer pixel for pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .settings import ClipSet, Scene


@dataclass
class RenderCounters:
    samples: int = 0
    tf_lookups: int = 0
    avg_fallbacks: int = 0
    coarse_fallbacks: int = 0
    bricks_requested: int = 0
    bricks_used_marks: int = 0

    def merged(self, other: "RenderCounters") -> "RenderCounters":
        return RenderCounters(*(getattr(self, f) + getattr(other, f)
                                for f in self.__dataclass_fields__))


def compute_ray_bounds(origin: np.ndarray, dirs: np.ndarray, box_hi,
                       clips: ClipSet = ClipSet()):
    """Parametric [entry, exit) of each ray inside the axis-aligned box
    [0, box_hi] intersected with the clip half-spaces. Misses are flagged.
    """
    box_hi = np.asarray(box_hi, dtype=np.float64)
    t0 = np.zeros(dirs.shape[0])
    t1 = np.full(dirs.shape[0], np.inf)
    for a in range(3):
        o, d = origin[..., a], dirs[:, a]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (0.0 - o) / d
            tb = (box_hi[a] - o) / d
        near, far = np.minimum(ta, tb), np.maximum(ta, tb)
        parallel = d == 0
        inside = (o >= 0.0) & (o <= box_hi[a])
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    for plane in clips:
        n = np.asarray(plane.normal, dtype=np.float64)
        num = plane.offset - origin @ n
        den = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cross = num / den
        keep_all = (den == 0) & (num >= 0)
        kill_all = (den == 0) & (num < 0)
        upper = den > 0  # leaving the kept half-space at t_cross
        t1 = np.where(upper, np.minimum(t1, t_cross), t1)
        t0 = np.where(~upper & ~keep_all & ~kill_all, np.maximum(t0, t_cross), t0)
        t1 = np.where(kill_all, -np.inf, t1)
    hit = t0 < t1
    return t0, t1, hit


def transform_points(points: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply an affine 4x4 to (N, 3) points."""
    return points @ matrix[:3, :3].T + matrix[:3, 3]


class RayBatch:
    """Per-pixel marching state: fixed sample grid t = t0 + k*step, current
    step ordinal k (monotone across passes), and the suspended set."""

    def __init__(self, scene: Scene, box_hi, spacing):
        origin, dirs = scene.camera.rays()
        self.origin = origin
        self.dirs = dirs
        self.step = scene.settings.resolve_step(spacing)
        t0, t1, hit = compute_ray_bounds(origin, dirs, box_hi, scene.clips)
        span = np.maximum(t1 - t0, 0.0)
        self.t0 = np.where(hit, t0, 0.0)
        self.n_steps = np.where(hit, np.ceil(span / self.step - 1e-12), 0).astype(np.int64)
        self.k = np.zeros(dirs.shape[0], dtype=np.int64)
        self.suspended = np.zeros(dirs.shape[0], dtype=bool)

    @property
    def count(self) -> int:
        return self.dirs.shape[0]

    def positions(self, idx: np.ndarray) -> np.ndarray:
        t = self.t0[idx] + self.k[idx] * self.step
        return self.origin + t[:, None] * self.dirs[idx]


class CompositeState:
    """Accumulated DVR color / per-channel MIP maxima plus termination."""

    def __init__(self, n_rays: int, channels: int):
        self.acc_rgb = np.zeros((n_rays, 3), dtype=np.float64)
        self.acc_a = np.zeros(n_rays, dtype=np.float64)
        self.mip_max = np.zeros((n_rays, channels), dtype=np.float64)
        self.terminated = np.zeros(n_rays, dtype=bool)


def composite_step(state: CompositeState, idx: np.ndarray, intensities: np.ndarray,
                   scene: Scene, fmax: float, corr_exp: float,
                   counters: RenderCounters) -> None:
    """Blend one sample per listed ray: per-channel TF, opacity correction,
    accumulation-level intermixing, front-to-back compositing (DVR) or
    running per-channel maxima (MIP)."""
    if scene.settings.mode == "mip":
        state.mip_max[idx] = np.maximum(state.mip_max[idx], intensities)
        return
    sample_rgb = np.zeros((idx.size, 3), dtype=np.float64)
    transmittance = np.ones(idx.size, dtype=np.float64)
    for c, tf in enumerate(scene.transfer_functions):
        rgba = tf.lookup(intensities[:, c] / fmax)
        counters.tf_lookups += idx.size
        alpha = 1.0 - (1.0 - rgba[:, 3]) ** corr_exp
        sample_rgb += rgba[:, :3] * alpha[:, None]
        transmittance *= 1.0 - alpha
    np.clip(sample_rgb, 0.0, 1.0, out=sample_rgb)
    sample_a = 1.0 - transmittance
    weight = 1.0 - state.acc_a[idx]
    state.acc_rgb[idx] += weight[:, None] * sample_rgb
    state.acc_a[idx] += weight * sample_a
    limit = scene.settings.early_termination_alpha
    if limit is not None and limit < 1.0:
        state.terminated[idx] |= state.acc_a[idx] >= limit


def finalize_image(state: CompositeState, scene: Scene, fmax: float,
                   counters: RenderCounters) -> np.ndarray:
    """Unit-interval RGBA image (H, W, 4). For MIP the transfer functions are
    applied once per ray to the channel maxima and intermixed additively."""
    cam = scene.camera
    if scene.settings.mode == "mip":
        rgb = np.zeros((state.mip_max.shape[0], 3), dtype=np.float64)
        transmittance = np.ones(state.mip_max.shape[0], dtype=np.float64)
        for c, tf in enumerate(scene.transfer_functions):
            rgba = tf.lookup(state.mip_max[:, c] / fmax)
            counters.tf_lookups += state.mip_max.shape[0]
            rgb += rgba[:, :3] * rgba[:, 3:4]
            transmittance *= 1.0 - rgba[:, 3]
        np.clip(rgb, 0.0, 1.0, out=rgb)
        alpha = 1.0 - transmittance
        flat = np.concatenate([rgb, alpha[:, None]], axis=1)
    else:
        flat = np.concatenate([state.acc_rgb, state.acc_a[:, None]], axis=1)
    return flat.reshape(cam.height, cam.width, 4)


def image_to_rgba8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def march(state: CompositeState, rays: RayBatch, sampler, scene: Scene,
          fmax: float, counters: RenderCounters) -> bool:
    """Advance every live ray until it exits, terminates, or suspends.

    ``sampler(positions, ray_idx) -> (intensities (A, C), missing (A,))``;
    rays flagged missing suspend at their current step ordinal and will
    re-sample the same position when resumed. Returns True if any ray
    suspended."""
    corr_exp = scene.settings.opacity_exponent(rays.step)
    while True:
        active = (~state.terminated) & (~rays.suspended) & (rays.k < rays.n_steps)
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        positions = rays.positions(idx)
        intensities, missing = sampler(positions, idx)
        counters.samples += idx.size
        if missing.any():
            rays.suspended[idx[missing]] = True
            keep = ~missing
            idx = idx[keep]
            intensities = intensities[keep]
        if idx.size:
            composite_step(state, idx, intensities, scene, fmax, corr_exp, counters)
            rays.k[idx] += 1
    return bool(rays.suspended.any())
