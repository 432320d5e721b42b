"""Out-of-core software ray-caster over the device buffers.

The renderer reads only the packed node buffer, the brick buffer and the
flag buffer (plus static geometry), exactly as a GPU kernel would. Per
sample it picks the optimal level of detail (the coarsest level whose
projected voxel stays under a pixel footprint), descends the node buffer
deriving child boxes by halving, and resolves an intensity per channel:

* homogeneous node: its packed AVG value,
* resident brick: trilinear filtering (border overlap makes it seamless
  across bricks once borders are filled; before that, coordinates clamp
  to the brick interior), marking the brick used,
* missing brick: the brick is requested; full-frame falls back to the
  nearest resident brick of the two coarser levels on the descent path
  (else the node AVG), refinement suspends the ray and resumes it from the
  cached position in a later pass.
"""

from __future__ import annotations

import numpy as np

from ..device import DeviceState, FLAG_REQUESTED, FLAG_USED
from .core import (
    CompositeState,
    RayBatch,
    RenderCounters,
    finalize_image,
    march,
    transform_points,
)
from .settings import Scene

_U1 = np.uint64(1)
_U2 = np.uint64(2)
_PTR_MASK = np.uint64(0x3FFFFF)
_SLOT_MASK = np.uint64(0xFFFFFFFF)


def optimal_lod(positions: np.ndarray, camera, lod_bias: float,
                base_voxel: float, depth: int) -> np.ndarray:
    """Coarsest level whose voxel extent projects within one pixel footprint
    (scaled by 2**lod_bias) at each sample's view depth, clamped to [0, depth]."""
    cam_pos, fwd, _, _ = camera.basis()
    z = (positions - cam_pos) @ fwd
    footprint = np.maximum(z, 1e-12) * camera.pixel_footprint_scale()
    footprint = footprint * (2.0 ** lod_bias)
    with np.errstate(divide="ignore"):
        level = np.floor(np.log2(np.maximum(footprint / base_voxel, 1e-300)))
    return np.clip(level, 0, depth).astype(np.int64)


class OutOfCoreRenderer:
    """Full-frame and refinement passes over a :class:`DeviceState`."""

    def __init__(self, device: DeviceState):
        self.device = device
        octree = device.octree
        geo = octree.geometry
        desc = octree.descriptor
        self.geometry = geo
        self.descriptor = desc
        self.channels = desc.channels
        self.fmax = float(desc.format_max)
        self.background = float(desc.background_value)
        self.spacing = np.asarray(desc.spacing, dtype=np.float64)
        self.dims = np.asarray(desc.dims, dtype=np.float64)
        self.box_hi = self.dims * self.spacing
        self.depth = geo.depth
        self.split = np.asarray(geo.split_axes, dtype=bool)
        self.brick_dims = np.asarray(geo.brick_dims, dtype=np.int64)
        # per-level node extents and mip scales, indexed [level, axis]
        self._extent = np.asarray([geo.node_extent(l) for l in range(geo.depth + 1)],
                                  dtype=np.float64)
        self._scale = np.asarray([geo.level_scale(l) for l in range(geo.depth + 1)],
                                 dtype=np.float64)
        split_spacing = self.spacing[self.split] if self.split.any() else self.spacing
        self.base_voxel = float(np.min(split_spacing))
        if desc.has_channel_transforms:
            self.transforms = [desc.channel_transforms[c] for c in range(desc.channels)]
        else:
            self.transforms = None

    # -- node buffer traversal ------------------------------------------------

    def _descend(self, pvox: np.ndarray, target: np.ndarray):
        """Vectorized root-to-target descent through the packed node buffer.

        Returns (index, level, box_lo) of the reached nodes plus the last two
        ancestors on the path (index -1 where there is none)."""
        nb = self.device.node_buffer
        n = pvox.shape[0]
        idx = np.zeros(n, dtype=np.int64)
        lvl = np.full(n, self.depth, dtype=np.int64)
        lo = np.zeros((n, 3), dtype=np.float64)
        anc1 = np.full(n, -1, dtype=np.int64)
        anc1_lvl = np.zeros(n, dtype=np.int64)
        anc1_lo = np.zeros((n, 3), dtype=np.float64)
        anc2 = np.full(n, -1, dtype=np.int64)
        anc2_lvl = np.zeros(n, dtype=np.int64)
        anc2_lo = np.zeros((n, 3), dtype=np.float64)
        for _ in range(self.depth):
            entries = nb[idx]
            ptr = ((entries >> _U2) & _PTR_MASK).astype(np.int64)
            move = (ptr != 0) & (lvl > target)
            m = np.flatnonzero(move)
            if m.size == 0:
                break
            half = self._extent[lvl[m] - 1]
            bits = (pvox[m] >= lo[m] + half) & self.split[None, :]
            k = bits @ np.array([1, 2, 4], dtype=np.int64)
            anc2[m] = anc1[m]
            anc2_lvl[m] = anc1_lvl[m]
            anc2_lo[m] = anc1_lo[m]
            anc1[m] = idx[m]
            anc1_lvl[m] = lvl[m]
            anc1_lo[m] = lo[m]
            idx[m] = 8 * (ptr[m] - 1) + 1 + k
            lo[m] = lo[m] + bits * half
            lvl[m] -= 1
        return (idx, lvl, lo,
                (anc1, anc1_lvl, anc1_lo),
                (anc2, anc2_lvl, anc2_lo))

    def _avg_of(self, entries: np.ndarray, channel: int) -> np.ndarray:
        w = 40 // self.channels
        qmax = float((1 << w) - 1)
        shift = np.uint64(24 + channel * w)
        mask = np.uint64((1 << w) - 1)
        q = ((entries >> shift) & mask).astype(np.float64)
        return np.round(q * self.fmax / qmax)

    def _trilerp(self, entries: np.ndarray, lvl: np.ndarray, lo: np.ndarray,
                 pvox: np.ndarray, channel: int) -> np.ndarray:
        """Trilinear filtering inside resident bricks (border included once
        filled, clamped to interior voxel centers before that)."""
        slots = ((entries >> np.uint64(24)) & _SLOT_MASK).astype(np.int64)
        scale = self._scale[lvl]
        f = (pvox - lo) / scale + 0.5
        m = self.brick_dims.astype(np.float64)
        if self.device.octree.borders_filled:
            f = np.clip(f, 0.0, m + 1.0)
        else:
            f = np.clip(f, 1.0, m)
        i0 = np.clip(np.floor(f).astype(np.int64), 0, self.brick_dims)
        w1 = np.clip(f - i0, 0.0, 1.0)
        w0 = 1.0 - w1
        buf = self.device.brick_buffer
        value = np.zeros(pvox.shape[0], dtype=np.float64)
        for dz in (0, 1):
            wz = w1[:, 2] if dz else w0[:, 2]
            for dy in (0, 1):
                wy = w1[:, 1] if dy else w0[:, 1]
                for dx in (0, 1):
                    wx = w1[:, 0] if dx else w0[:, 0]
                    corner = buf[slots, i0[:, 2] + dz, i0[:, 1] + dy,
                                 i0[:, 0] + dx, channel].astype(np.float64)
                    value += wz * wy * wx * corner
        return value

    def _mark(self, idx: np.ndarray, flag: int) -> None:
        if idx.size:
            np.bitwise_or.at(self.device.flag_buffer, idx, np.uint8(flag))

    # -- per-sample channel resolution --------------------------------------------

    def _resolve(self, pvox: np.ndarray, target: np.ndarray, channels,
                 strategy: str, counters: RenderCounters):
        """Intensities for the given channels at level-0 voxel positions.

        One descent serves all listed channels (they share bricks). Returns
        (values (A, len(channels)), missing (A,)); missing only in refinement.
        """
        nb = self.device.node_buffer
        idx, lvl, lo, anc1, anc2 = self._descend(pvox, target)
        entries = nb[idx]
        resident = (entries & _U1) != 0
        not_homog = (entries & _U2) != 0
        missing = not_homog & ~resident

        values = np.empty((pvox.shape[0], len(channels)), dtype=np.float64)
        hm = np.flatnonzero(~not_homog)
        rm = np.flatnonzero(resident)
        for col, c in enumerate(channels):
            if hm.size:
                values[hm, col] = self._avg_of(entries[hm], c)
            if rm.size:
                values[rm, col] = self._trilerp(entries[rm], lvl[rm], lo[rm],
                                                pvox[rm], c)
        if rm.size:
            self._mark(idx[rm], FLAG_USED)
            counters.bricks_used_marks += rm.size

        mm = np.flatnonzero(missing)
        if mm.size:
            self._mark(idx[mm], FLAG_REQUESTED)
            counters.bricks_requested += mm.size
        if mm.size and strategy == "fullframe":
            self._fullframe_fallback(mm, entries, lvl, lo, pvox, anc1, anc2,
                                     channels, values, counters)
            missing[:] = False
        return values, missing

    def _fullframe_fallback(self, mm, entries, lvl, lo, pvox, anc1, anc2,
                            channels, values, counters):
        """Approximate missing bricks by the nearest resident ancestor brick
        of the two coarser path levels, else the node AVG; request all
        three levels."""
        nb = self.device.node_buffer
        unresolved = mm
        for anc_idx, anc_lvl, anc_lo in (anc1, anc2):
            if unresolved.size == 0:
                break
            valid = anc_idx[unresolved] >= 0
            cand = unresolved[valid]
            rest = unresolved[~valid]  # no such ancestor: stays unresolved
            if cand.size:
                a_entries = nb[anc_idx[cand]]
                a_resident = (a_entries & _U1) != 0
                a_missing_brick = ((a_entries & _U2) != 0) & ~a_resident
                req = cand[a_missing_brick]
                self._mark(anc_idx[req], FLAG_REQUESTED)
                counters.bricks_requested += req.size
                hit = cand[a_resident]
                if hit.size:
                    for col, c in enumerate(channels):
                        values[hit, col] = self._trilerp(
                            nb[anc_idx[hit]], anc_lvl[hit], anc_lo[hit], pvox[hit], c)
                    self._mark(anc_idx[hit], FLAG_USED)
                    counters.bricks_used_marks += hit.size
                    counters.coarse_fallbacks += hit.size
                unresolved = np.sort(np.concatenate([rest, cand[~a_resident]]))
            else:
                unresolved = rest
        if unresolved.size:
            for col, c in enumerate(channels):
                values[unresolved, col] = self._avg_of(entries[unresolved], c)
            counters.avg_fallbacks += unresolved.size

    # -- samplers ----------------------------------------------------------------

    def make_sampler(self, scene: Scene, strategy: str, counters: RenderCounters):
        camera = scene.camera
        bias = scene.settings.lod_bias

        def sampler(positions: np.ndarray, _ray_idx: np.ndarray):
            n = positions.shape[0]
            out = np.full((n, self.channels), self.background, dtype=np.float64)
            missing = np.zeros(n, dtype=bool)
            if self.transforms is None:
                pvox = positions / self.spacing
                inside = np.all((pvox >= 0.0) & (pvox <= self.dims), axis=1)
                sel = np.flatnonzero(inside)
                if sel.size:
                    target = optimal_lod(positions[sel], camera, bias,
                                         self.base_voxel, self.depth)
                    vals, miss = self._resolve(np.clip(pvox[sel], 0.0, self.dims - 1e-9),
                                               target, list(range(self.channels)),
                                               strategy, counters)
                    out[sel] = vals
                    missing[sel] = miss
            else:
                for c in range(self.channels):
                    p = transform_points(positions, self.transforms[c])
                    pvox = p / self.spacing
                    inside = np.all((pvox >= 0.0) & (pvox <= self.dims), axis=1)
                    sel = np.flatnonzero(inside)
                    if sel.size == 0:
                        continue
                    target = optimal_lod(p[sel], camera, bias,
                                         self.base_voxel, self.depth)
                    vals, miss = self._resolve(np.clip(pvox[sel], 0.0, self.dims - 1e-9),
                                               target, [c], strategy, counters)
                    out[sel, c] = vals[:, 0]
                    missing[sel] |= miss
            return out, missing

        return sampler

    # -- render entry points --------------------------------------------------------

    def render_fullframe(self, scene: Scene):
        """One complete pass over all pixels; always returns a full image."""
        rays = RayBatch(scene, self.box_hi, self.descriptor.spacing)
        state = CompositeState(rays.count, self.channels)
        counters = RenderCounters()
        sampler = self.make_sampler(scene, "fullframe", counters)
        march(state, rays, sampler, scene, self.fmax, counters)
        image = finalize_image(state, scene, self.fmax, counters)
        return image, counters

    def start_refinement(self, scene: Scene, tile=None) -> "RefinementSession":
        """``tile`` optionally restricts refinement to a pixel rectangle
        (x0, y0, x1, y1); the default single tile covers the full frame."""
        return RefinementSession(self, scene, tile=tile)


class RefinementSession:
    """Progressive refinement: per-pixel ray state (step ordinal, accumulated
    color, per-channel maxima, termination) is cached between passes; rays
    suspended at a missing brick resume from the cached position once it has
    been uploaded. Complete when a pass requests nothing."""

    def __init__(self, renderer: OutOfCoreRenderer, scene: Scene, tile=None):
        self.renderer = renderer
        self.scene = scene
        self.scene_key = scene.key()
        self.rays = RayBatch(scene, renderer.box_hi, renderer.descriptor.spacing)
        self.state = CompositeState(self.rays.count, renderer.channels)
        if tile is not None:
            x0, y0, x1, y1 = tile
            cam = scene.camera
            cols, rows = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
            outside = ~((cols >= x0) & (cols < x1) & (rows >= y0) & (rows < y1))
            self.rays.n_steps[outside.reshape(-1)] = 0
        self.counters = RenderCounters()
        self.passes = 0
        self.complete = False

    def run_pass(self) -> bool:
        if self.complete:
            return True
        self.rays.suspended[:] = False
        pass_counters = RenderCounters()
        sampler = self.renderer.make_sampler(self.scene, "refinement", pass_counters)
        march(self.state, self.rays, sampler, self.scene,
              self.renderer.fmax, pass_counters)
        self.passes += 1
        self.counters = self.counters.merged(pass_counters)
        self.complete = pass_counters.bricks_requested == 0
        return self.complete

    @property
    def suspended_rays(self) -> int:
        return int(self.rays.suspended.sum())

    def image(self) -> np.ndarray:
        return finalize_image(self.state, self.scene, self.renderer.fmax,
                              RenderCounters())
