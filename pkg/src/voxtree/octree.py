"""Incremental multi-resolution octree over a disk-backed brick pool.

The tree mirrors a 3D mipmap: a node at level ``l`` (leaves at 0, root at
``depth``) covers ``M * 2**l`` level-0 voxels per split axis and owns a
brick of M voxels per axis holding that region at mip level ``l``, stored
with a one-voxel border and all channels interleaved. Cuboid blocks of any
size can be inserted at any position in any order; each insertion

1. copies the values into the covered leaf bricks (allocating nodes and
   bricks on the insertion path, unknown values seeded with the node's
   average, background initially),
2. re-half-samples every touched octant of every brick on the path up to
   the root, excluding voxels outside the original volume, and
3. deletes bricks that became homogeneous in every channel (strictly
   ``max - min < threshold``), keeping per-channel averages, and collapses
   entirely homogeneous subtrees.

The root always exists and the tree is traversable between insertions.
Structure changes are recorded as :class:`ChangeEvent` records for the
device mirror. The root's own brick is only freed when the whole tree
collapses to a single average value.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .paging import BrickLocator, BrickStore
from .volume import (
    BrickPoolConfig,
    TreeGeometry,
    VolumeDescriptor,
    child_index,
)


class ChangeKind(IntEnum):
    NODE_CREATED = 1
    NODE_DELETED = 2
    NODE_UPDATED = 3


@dataclass(frozen=True)
class ChangeEvent:
    kind: ChangeKind
    node_index: int


def round_mean(sums, counts):
    """Exact rational mean rounded to the nearest integer, ties up."""
    return (2 * np.asarray(sums, dtype=np.int64) + counts) // (2 * np.asarray(counts, dtype=np.int64))


def halfsample_block(values: np.ndarray, in_extent, split, background: int) -> np.ndarray:
    """Downsample one brick interior by pairwise means along the split axes.

    ``values`` is ``(mz, my, mx, C)``; ``in_extent`` gives the in-volume
    voxel counts as ``(cx, cy, cz)`` — everything beyond is outside the
    original volume and excluded from the means. Output voxels with no
    in-volume source are set to ``background``.
    """
    mz, my, mx, nc = values.shape
    cx, cy, cz = in_extent
    kx = 2 if split[0] else 1
    ky = 2 if split[1] else 1
    kz = 2 if split[2] else 1
    oz, oy, ox = mz // kz, my // ky, mx // kx
    if (cx, cy, cz) == (mx, my, mz):
        # fully in-volume: plain pairwise sums, uniform counts
        x = values.astype(np.uint32)
        if kz == 2:
            x = x[0::2] + x[1::2]
        if ky == 2:
            x = x[:, 0::2] + x[:, 1::2]
        if kx == 2:
            x = x[:, :, 0::2] + x[:, :, 1::2]
        n = kx * ky * kz
        return ((2 * x + n) // (2 * n)).astype(np.int64)
    tmp = np.zeros((mz, my, mx, nc), dtype=np.int64)
    tmp[:cz, :cy, :cx] = values[:cz, :cy, :cx]
    sums = tmp.reshape(oz, kz, oy, ky, ox, kx, nc).sum(axis=(1, 3, 5))
    nx = np.clip(cx - kx * np.arange(ox), 0, kx)
    ny = np.clip(cy - ky * np.arange(oy), 0, ky)
    nz = np.clip(cz - kz * np.arange(oz), 0, kz)
    counts = nz[:, None, None] * ny[None, :, None] * nx[None, None, :]
    counts4 = counts[..., None]
    means = (2 * sums + counts4) // (2 * np.maximum(counts4, 1))
    return np.where(counts4 > 0, means, np.int64(background))


def classify_homogeneous(smin, smax, threshold: float):
    """Per-channel homogeneity (``max - min < threshold``) and the overall
    verdict (deletable only when every channel is homogeneous)."""
    per_channel = [(hi - lo) < threshold for lo, hi in zip(smin, smax)]
    return per_channel, all(per_channel)


class OctreeNode:
    """One tree node: either owns a brick or stands in for its region with
    per-channel averages. ``smin/smax/avg`` describe the node's own (mip
    level) brick values; ``sub_min/sub_max`` are the level-0 extrema of the
    whole subtree, ``None`` for nodes entirely outside the original volume.
    """

    __slots__ = ("level", "index", "box_lo", "children", "brick",
                 "avg", "smin", "smax", "sub_min", "sub_max", "in_volume")

    def __init__(self, level: int, index: int, box_lo, avg, in_volume: bool):
        self.level = level
        self.index = index
        self.box_lo = tuple(box_lo)
        self.children: list[OctreeNode | None] | None = None
        self.brick: BrickLocator | None = None
        self.avg = list(avg)
        self.smin = list(avg)
        self.smax = list(avg)
        self.in_volume = in_volume
        if in_volume:
            self.sub_min = list(avg)
            self.sub_max = list(avg)
        else:
            self.sub_min = None
            self.sub_max = None

    @property
    def has_children(self) -> bool:
        return self.children is not None

    def child_nodes(self):
        if self.children is None:
            return []
        return [c for c in self.children if c is not None]

    def __repr__(self):
        kind = "brick" if self.brick else "avg"
        return f"<node {self.index} L{self.level} {kind} avg={self.avg}>"


class Octree:
    """Incrementally constructed octree over a :class:`BrickStore`."""

    def __init__(self, desc: VolumeDescriptor, cfg: BrickPoolConfig,
                 store: BrickStore):
        self.descriptor = desc
        self.config = cfg
        self.store = store
        self.geometry = TreeGeometry.build(desc, cfg)
        self.threshold = cfg.resolve_threshold(desc)
        self.lock = threading.RLock()
        bg = desc.background_value
        self.root = OctreeNode(self.geometry.depth, 0, (0, 0, 0),
                               [bg] * desc.channels, in_volume=True)
        self.node_count = 1
        self.pruned_bricks = 0
        self.inserted_voxels = 0
        self.construction_finished = False
        self.borders_filled = False
        self._events: list[ChangeEvent] = []

    # -- factories ---------------------------------------------------------

    @classmethod
    def create(cls, desc: VolumeDescriptor, cfg: BrickPoolConfig, pool_path) -> "Octree":
        store = BrickStore.create(
            pool_path,
            page_bricks=cfg.page_bricks,
            brick_shape=tuple(reversed(cfg.stored_brick_dims)),
            channels=desc.channels,
            dtype=desc.dtype,
            ram_page_limit=cfg.ram_page_limit,
        )
        return cls(desc, cfg, store)

    # -- events ------------------------------------------------------------

    def drain_events(self) -> list[ChangeEvent]:
        with self.lock:
            events, self._events = self._events, []
            return events

    def _emit(self, kind: ChangeKind, index: int) -> None:
        self._events.append(ChangeEvent(kind, index))

    # -- geometry helpers ----------------------------------------------------

    def _in_extent(self, node: OctreeNode):
        """In-volume interior voxel counts (cx, cy, cz) of a node's brick."""
        geo = self.geometry
        scale = geo.level_scale(node.level)
        dims = self.descriptor.dims
        counts = []
        for a in range(3):
            remaining = dims[a] - node.box_lo[a]
            counts.append(int(np.clip(-(-remaining // scale[a]), 0, geo.brick_dims[a])))
        return tuple(counts)

    def _node_in_volume(self, box_lo, level: int) -> bool:
        geo = self.geometry
        ext = geo.node_extent(level)
        return all(box_lo[a] < self.descriptor.dims[a] and box_lo[a] + ext[a] > 0
                   for a in range(3))

    # -- node / brick lifecycle ----------------------------------------------

    def _ensure_children(self, node: OctreeNode) -> None:
        if node.children is not None:
            return
        geo = self.geometry
        bg = self.descriptor.background_value
        node.children = [None] * 8
        for k in geo.real_octants:
            lo = geo.child_box_lo(node.box_lo, node.level, k)
            in_vol = self._node_in_volume(lo, node.level - 1)
            seed = node.avg if in_vol else [bg] * self.descriptor.channels
            child = OctreeNode(node.level - 1, child_index(node.index, k),
                               lo, seed, in_vol)
            node.children[k] = child
            self.node_count += 1
            self._emit(ChangeKind.NODE_CREATED, child.index)

    def _ensure_brick(self, node: OctreeNode) -> bool:
        """Allocate and seed the node's brick; returns True when fresh."""
        if node.brick is not None:
            return False
        loc = self.store.allocate()
        node.brick = loc
        handle = self.store.acquire(loc)
        try:
            data = handle.data
            data[...] = self.descriptor.background_value
            cx, cy, cz = self._in_extent(node)
            for c in range(self.descriptor.channels):
                data[1:1 + cz, 1:1 + cy, 1:1 + cx, c] = node.avg[c]
            handle.mark_dirty()
        finally:
            self.store.release(handle)
        return True

    def _free_brick(self, node: OctreeNode) -> None:
        if node.brick is not None:
            self.store.free(node.brick)
            node.brick = None

    def _recompute_stats(self, node: OctreeNode, data: np.ndarray) -> None:
        cx, cy, cz = self._in_extent(node)
        if cx == 0 or cy == 0 or cz == 0:
            return
        region = data[1:1 + cz, 1:1 + cy, 1:1 + cx, :]
        n = cx * cy * cz
        # channel-major contiguous copy makes the reductions SIMD-friendly
        per = np.ascontiguousarray(region.transpose(3, 0, 1, 2)).reshape(
            region.shape[3], -1)
        sums = per.sum(axis=1, dtype=np.int64)
        node.smin = [int(v) for v in per.min(axis=1)]
        node.smax = [int(v) for v in per.max(axis=1)]
        node.avg = [int(v) for v in round_mean(sums, n)]
        if node.level == 0 or node.children is None:
            node.sub_min = list(node.smin)
            node.sub_max = list(node.smax)

    def _aggregate_subtree_extrema(self, node: OctreeNode) -> None:
        mins, maxs = None, None
        for child in node.child_nodes():
            if child.sub_min is None:
                continue
            if mins is None:
                mins = list(child.sub_min)
                maxs = list(child.sub_max)
            else:
                mins = [min(a, b) for a, b in zip(mins, child.sub_min)]
                maxs = [max(a, b) for a, b in zip(maxs, child.sub_max)]
        if mins is not None:
            node.sub_min, node.sub_max = mins, maxs

    # -- half-sampling ---------------------------------------------------------

    def _octant_block(self, child: OctreeNode) -> np.ndarray:
        """The child's contribution to its parent brick: half-sampled brick
        values, or the child's AVG over its in-volume region."""
        geo = self.geometry
        split = geo.split_axes
        mx, my, mz = geo.brick_dims
        bg = self.descriptor.background_value
        cx, cy, cz = self._in_extent(child)
        if child.brick is not None:
            handle = self.store.acquire(child.brick)
            try:
                interior = handle.data[1:1 + mz, 1:1 + my, 1:1 + mx, :]
                return halfsample_block(interior, (cx, cy, cz), split, bg)
            finally:
                self.store.release(handle)
        ox = mx // 2 if split[0] else mx
        oy = my // 2 if split[1] else my
        oz = mz // 2 if split[2] else mz
        out = np.full((oz, oy, ox, self.descriptor.channels), bg, dtype=np.int64)
        # in-volume portion of the parent-voxel grid covered by this child
        px = -(-cx // (2 if split[0] else 1))
        py = -(-cy // (2 if split[1] else 1))
        pz = -(-cz // (2 if split[2] else 1))
        for c in range(self.descriptor.channels):
            out[:pz, :py, :px, c] = child.avg[c]
        return out

    def _update_parent_octant(self, parent_data: np.ndarray, child: OctreeNode) -> None:
        geo = self.geometry
        split = geo.split_axes
        mx, my, mz = geo.brick_dims
        k = child.index - child_index((child.index - 1) // 8, 0)
        block = self._octant_block(child)
        offx = (mx // 2) if (k & 1 and split[0]) else 0
        offy = (my // 2) if (k & 2 and split[1]) else 0
        offz = (mz // 2) if (k & 4 and split[2]) else 0
        bz, by, bx = block.shape[:3]
        parent_data[1 + offz:1 + offz + bz, 1 + offy:1 + offy + by,
                    1 + offx:1 + offx + bx, :] = block

    # -- insertion -----------------------------------------------------------

    def insert_block(self, channel: int, origin, values: np.ndarray) -> list[ChangeEvent]:
        """Insert one channel's cuboid block at ``origin`` (x, y, z voxels).

        ``values`` is shaped ``(dz, dy, dx)`` (x-fastest). Overwriting
        previously inserted data is permitted. Returns the change events
        recorded by this insertion.
        """
        desc = self.descriptor
        if not 0 <= channel < desc.channels:
            raise ValueError(f"channel {channel} out of range")
        origin = tuple(int(v) for v in origin)
        values = np.asarray(values)
        if values.ndim != 3:
            raise ValueError("block values must be 3-D (z, y, x)")
        bdims = (values.shape[2], values.shape[1], values.shape[0])
        for a in range(3):
            if origin[a] < 0 or origin[a] + bdims[a] > desc.dims[a]:
                raise ValueError(
                    f"block [{origin} + {bdims}) outside volume {desc.dims}")
        values = values.astype(desc.dtype, copy=False)

        geo = self.geometry
        mx, my, mz = geo.brick_dims
        with self.lock:
            start = len(self._events)
            touched: list[set[OctreeNode]] = [set() for _ in range(geo.depth + 1)]
            updated: dict[int, OctreeNode] = {}

            gx0, gx1 = origin[0] // mx, (origin[0] + bdims[0] - 1) // mx
            gy0, gy1 = origin[1] // my, (origin[1] + bdims[1] - 1) // my
            gz0, gz1 = origin[2] // mz, (origin[2] + bdims[2] - 1) // mz
            for gz in range(gz0, gz1 + 1):
                for gy in range(gy0, gy1 + 1):
                    for gx in range(gx0, gx1 + 1):
                        leaf = self._descend_to_leaf(gx, gy, gz)
                        self._write_leaf(leaf, channel, origin, bdims, values)
                        touched[0].add(leaf)
                        updated[leaf.index] = leaf

            # step 2: re-half-sample the insertion path bottom-up
            for level in range(1, geo.depth + 1):
                parents: dict[int, tuple[OctreeNode, list[OctreeNode]]] = {}
                for child in touched[level - 1]:
                    pidx = (child.index - 1) // 8
                    if pidx not in parents:
                        parents[pidx] = (self._node_by_index_on_path(child), [])
                    parents[pidx][1].append(child)
                for pidx in sorted(parents):
                    parent, kids = parents[pidx]
                    fresh = self._ensure_brick(parent)
                    handle = self.store.acquire(parent.brick)
                    try:
                        if fresh:
                            for c in parent.child_nodes():
                                self._update_parent_octant(handle.data, c)
                        else:
                            for c in sorted(kids, key=lambda n: n.index):
                                self._update_parent_octant(handle.data, c)
                        handle.mark_dirty()
                        self._recompute_stats(parent, handle.data)
                    finally:
                        self.store.release(handle)
                    self._aggregate_subtree_extrema(parent)
                    touched[level].add(parent)
                    updated[parent.index] = parent

            # step 3: prune strictly after all path updates
            deleted: set[int] = set()
            self._prune(touched, updated, deleted)

            for idx in sorted(updated):
                if idx not in deleted:
                    self._emit(ChangeKind.NODE_UPDATED, idx)
            self.inserted_voxels += bdims[0] * bdims[1] * bdims[2]
            return self._events[start:]

    def _descend_to_leaf(self, gx: int, gy: int, gz: int) -> OctreeNode:
        geo = self.geometry
        target = (gx * geo.brick_dims[0], gy * geo.brick_dims[1], gz * geo.brick_dims[2])
        node = self.root
        while node.level > 0:
            self._ensure_children(node)
            k = geo.octant_of((target[0] + 0.5, target[1] + 0.5, target[2] + 0.5),
                              node.box_lo, node.level)
            node = node.children[k]  # real octant by construction
        self._ensure_brick(node)
        return node

    def _node_by_index_on_path(self, child: OctreeNode) -> OctreeNode:
        # parent of a node reached during this insertion always exists
        node = self.root
        geo = self.geometry
        center = tuple(child.box_lo[a] + 0.5 for a in range(3))
        while node.level > child.level + 1:
            node = node.children[geo.octant_of(center, node.box_lo, node.level)]
        return node

    def _write_leaf(self, leaf: OctreeNode, channel: int, origin, bdims,
                    values: np.ndarray) -> None:
        geo = self.geometry
        lo = leaf.box_lo
        m = geo.brick_dims
        s = [max(origin[a], lo[a]) for a in range(3)]
        e = [min(origin[a] + bdims[a], lo[a] + m[a]) for a in range(3)]
        handle = self.store.acquire(leaf.brick)
        try:
            handle.data[
                1 + s[2] - lo[2]:1 + e[2] - lo[2],
                1 + s[1] - lo[1]:1 + e[1] - lo[1],
                1 + s[0] - lo[0]:1 + e[0] - lo[0],
                channel,
            ] = values[
                s[2] - origin[2]:e[2] - origin[2],
                s[1] - origin[1]:e[1] - origin[1],
                s[0] - origin[0]:e[0] - origin[0],
            ]
            handle.mark_dirty()
            self._recompute_stats(leaf, handle.data)
        finally:
            self.store.release(handle)

    # -- pruning ---------------------------------------------------------------

    def _brick_homogeneous(self, node: OctreeNode) -> bool:
        _, overall = classify_homogeneous(node.smin, node.smax, self.threshold)
        return overall

    def _subtree_homogeneous(self, node: OctreeNode) -> bool:
        if node.sub_min is None:
            return True
        _, overall = classify_homogeneous(node.sub_min, node.sub_max, self.threshold)
        return overall

    def _prune(self, touched, updated, deleted: set[int]) -> None:
        geo = self.geometry
        for level in range(geo.depth + 1):
            for node in sorted(touched[level], key=lambda n: n.index):
                if node is self.root or node.brick is None:
                    continue
                if self._brick_homogeneous(node):
                    self._free_brick(node)
                    self.pruned_bricks += 1
                    updated[node.index] = node
        for level in range(1, geo.depth + 1):
            for node in sorted(touched[level], key=lambda n: n.index):
                if node is self.root or node.children is None:
                    continue
                if self._subtree_homogeneous(node):
                    self._delete_descendants(node, deleted)
                    updated[node.index] = node
        if self._subtree_homogeneous(self.root) and (
                self.root.children is not None or self.root.brick is not None):
            if self.root.children is not None:
                self._delete_descendants(self.root, deleted)
            if self.root.brick is not None:
                self._free_brick(self.root)
                self.pruned_bricks += 1
            updated[0] = self.root

    def _delete_descendants(self, node: OctreeNode, deleted: set[int] | None = None) -> None:
        for child in node.child_nodes():
            if child.children is not None:
                self._delete_descendants(child, deleted)
            if child.brick is not None:
                self._free_brick(child)
                self.pruned_bricks += 1
            self.node_count -= 1
            if deleted is not None:
                deleted.add(child.index)
            self._emit(ChangeKind.NODE_DELETED, child.index)
        node.children = None

    # -- lookup ------------------------------------------------------------------

    def find_node(self, point, target_level: int = 0) -> OctreeNode:
        """Descend from the root to the node containing ``point`` (x, y, z in
        level-0 virtual voxels), stopping at ``target_level`` or at the
        deepest existing node."""
        geo = self.geometry
        node = self.root
        while node.level > target_level and node.children is not None:
            node = node.children[geo.octant_of(point, node.box_lo, node.level)]
        return node

    def iter_nodes(self):
        """Breadth-first iteration over existing nodes."""
        queue = [self.root]
        while queue:
            node = queue.pop(0)
            yield node
            queue.extend(node.child_nodes())

    def node_by_index(self, index: int) -> OctreeNode | None:
        """Resolve a breadth-first node address, ``None`` when no such node
        currently exists."""
        path = []
        idx = index
        while idx > 0:
            path.append((idx - 1) % 8)
            idx = (idx - 1) // 8
        node = self.root
        for k in reversed(path):
            if node.children is None or node.children[k] is None:
                return None
            node = node.children[k]
        return node

    @property
    def brick_count(self) -> int:
        return self.store.live_bricks

    # -- finalization -----------------------------------------------------------

    def finalize(self) -> None:
        with self.lock:
            self.construction_finished = True

    def fill_borders(self) -> None:
        """Populate every brick's one-voxel border from same-level neighbors
        (their AVG when they own no brick), background outside the volume.
        Idempotent; emits NodeUpdated for every touched brick."""
        with self.lock:
            nodes = [n for n in self.iter_nodes() if n.brick is not None]
        for node in nodes:
            self._fill_node_border(node)
        with self.lock:
            self.borders_filled = True

    def fill_borders_async(self) -> threading.Thread:
        thread = threading.Thread(target=self.fill_borders, name="border-fill",
                                  daemon=True)
        thread.start()
        return thread

    def _fill_node_border(self, node: OctreeNode) -> None:
        geo = self.geometry
        mx, my, mz = geo.brick_dims
        scale = geo.level_scale(node.level)
        mip_lo = tuple(node.box_lo[a] // scale[a] for a in range(3))
        mip_virtual = tuple(-(-geo.virtual[a] // scale[a]) for a in range(3))
        bg = self.descriptor.background_value
        dims_m = (mx, my, mz)

        # per-axis segment classes: 0 = low border, 1 = interior, 2 = high border
        with self.lock:
            handle = self.store.acquire(node.brick)
            try:
                data = handle.data
                for sz in range(3):
                    for sy in range(3):
                        for sx in range(3):
                            if sx == 1 and sy == 1 and sz == 1:
                                continue
                            seg = []
                            outside = False
                            for a, s in ((0, sx), (1, sy), (2, sz)):
                                if s == 1:
                                    seg.append((1, 1 + dims_m[a],
                                                mip_lo[a], mip_lo[a] + dims_m[a]))
                                else:
                                    local = 0 if s == 0 else 1 + dims_m[a]
                                    g = mip_lo[a] - 1 if s == 0 else mip_lo[a] + dims_m[a]
                                    seg.append((local, local + 1, g, g + 1))
                                    if g < 0 or g >= mip_virtual[a]:
                                        outside = True
                            (lx0, lx1, gx0, gx1) = seg[0]
                            (ly0, ly1, gy0, gy1) = seg[1]
                            (lz0, lz1, gz0, gz1) = seg[2]
                            target = data[lz0:lz1, ly0:ly1, lx0:lx1, :]
                            if outside:
                                target[...] = bg
                                continue
                            point = ((gx0 + 0.5) * scale[0], (gy0 + 0.5) * scale[1],
                                     (gz0 + 0.5) * scale[2])
                            neighbor = self.find_node(point, node.level)
                            if neighbor.level != node.level or neighbor.brick is None:
                                for c in range(self.descriptor.channels):
                                    target[..., c] = neighbor.avg[c]
                                continue
                            n_lo = tuple(neighbor.box_lo[a] // scale[a] for a in range(3))
                            nh = self.store.acquire(neighbor.brick)
                            try:
                                target[...] = nh.data[
                                    1 + gz0 - n_lo[2]:1 + gz1 - n_lo[2],
                                    1 + gy0 - n_lo[1]:1 + gy1 - n_lo[1],
                                    1 + gx0 - n_lo[0]:1 + gx1 - n_lo[0], :]
                            finally:
                                self.store.release(nh)
                handle.mark_dirty()
            finally:
                self.store.release(handle)
            self._emit(ChangeKind.NODE_UPDATED, node.index)
