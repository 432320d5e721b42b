"""Octree metadata file ("VXOC") and canonical brick-pool export.

The metadata file stores the descriptor, the pool configuration and every
node in breadth-first order with explicit brick locators, all little-endian,
written atomically. Saving also exports the brick pool compacted in the same
breadth-first order, so two structurally identical trees serialize to
byte-identical files regardless of the insertion order that produced them.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .octree import Octree, OctreeNode
from .paging import BrickStore
from .volume import BrickPoolConfig, VolumeDescriptor

MAGIC = b"VXOC"
VERSION = 1

_HEAD = struct.Struct("<4sI")
_DESC = struct.Struct("<3IHH3dIB3x")
_CONF = struct.Struct("<3IdIII")
_TREE = struct.Struct("<IQ")
_NODE = struct.Struct("<QBB2x")
_CHAN = struct.Struct("<5I")
_LOC = struct.Struct("<II")

_NO_BRICK = 0xFFFFFFFF
_FMT_CODES = {"uint8": 1, "uint16": 2}
_FMT_NAMES = {v: k for k, v in _FMT_CODES.items()}

_FLAG_TRANSFORMS = 1
_FLAG_FINISHED = 2
_FLAG_BORDERS = 4

_NFLAG_BRICK = 1
_NFLAG_CHILDREN = 2
_NFLAG_IN_VOLUME = 4


def _atomic_write(path, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".vxoc-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_octree(tree: Octree, octree_path, pool_path) -> None:
    """Persist the tree and a canonically compacted copy of its brick pool."""
    desc = tree.descriptor
    cfg = tree.config
    with tree.lock:
        nodes = sorted(tree.iter_nodes(), key=lambda n: n.index)
        directory = os.path.dirname(os.path.abspath(pool_path)) or "."
        fd, tmp_pool = tempfile.mkstemp(dir=directory, prefix=".vxbp-")
        os.close(fd)
        canonical: dict[int, tuple[int, int]] = {}
        try:
            out = BrickStore.create(
                tmp_pool,
                page_bricks=cfg.page_bricks,
                brick_shape=tuple(reversed(cfg.stored_brick_dims)),
                channels=desc.channels,
                dtype=desc.dtype,
                ram_page_limit=max(2, cfg.ram_page_limit),
            )
            with out:
                for node in nodes:
                    if node.brick is None:
                        continue
                    loc = out.allocate()
                    out.write_brick(loc, tree.store.read_brick(node.brick))
                    canonical[node.index] = (loc.page_id, loc.slot)
            os.replace(tmp_pool, pool_path)
        except BaseException:
            if os.path.exists(tmp_pool):
                os.unlink(tmp_pool)
            raise

        parts = [_HEAD.pack(MAGIC, VERSION)]
        flags = 0
        if desc.channel_transforms is not None:
            flags |= _FLAG_TRANSFORMS
        if tree.construction_finished:
            flags |= _FLAG_FINISHED
        if tree.borders_filled:
            flags |= _FLAG_BORDERS
        parts.append(_DESC.pack(*desc.dims, desc.channels,
                                _FMT_CODES[desc.sample_format], *desc.spacing,
                                desc.background_value, flags))
        if desc.channel_transforms is not None:
            parts.append(np.asarray(desc.channel_transforms, dtype="<f8").tobytes())
        parts.append(_CONF.pack(*cfg.brick_dims, tree.threshold, cfg.overlap,
                                cfg.page_bricks, cfg.ram_page_limit))
        parts.append(_TREE.pack(tree.geometry.depth, len(nodes)))
        for node in nodes:
            nflags = 0
            if node.brick is not None:
                nflags |= _NFLAG_BRICK
            if node.children is not None:
                nflags |= _NFLAG_CHILDREN
            if node.in_volume:
                nflags |= _NFLAG_IN_VOLUME
            parts.append(_NODE.pack(node.index, node.level, nflags))
            for c in range(desc.channels):
                sub_lo = node.sub_min[c] if node.sub_min is not None else 0
                sub_hi = node.sub_max[c] if node.sub_max is not None else 0
                parts.append(_CHAN.pack(node.smin[c], node.smax[c],
                                        node.avg[c], sub_lo, sub_hi))
            page, slot = canonical.get(node.index, (_NO_BRICK, _NO_BRICK))
            parts.append(_LOC.pack(page, slot))
        _atomic_write(octree_path, b"".join(parts))


def load_octree(octree_path, pool_path, *, ram_page_limit: int | None = None) -> Octree:
    with open(octree_path, "rb") as fh:
        raw = fh.read()
    off = 0
    magic, version = _HEAD.unpack_from(raw, off)
    off += _HEAD.size
    if magic != MAGIC:
        raise ValueError(f"{octree_path} is not an octree metadata file")
    if version != VERSION:
        raise ValueError(f"unsupported octree file version {version}")
    (dx, dy, dz, channels, fmt, sx, sy, sz, background, flags) = _DESC.unpack_from(raw, off)
    off += _DESC.size
    transforms = None
    if flags & _FLAG_TRANSFORMS:
        n = channels * 16
        transforms = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
        transforms = transforms.reshape(channels, 4, 4).copy()
        off += n * 8
    desc = VolumeDescriptor(dims=(dx, dy, dz), channels=channels,
                            sample_format=_FMT_NAMES[fmt], spacing=(sx, sy, sz),
                            background_value=background,
                            channel_transforms=transforms)
    (bx, by, bz, threshold, overlap, page_bricks, ram_pages) = _CONF.unpack_from(raw, off)
    off += _CONF.size
    cfg = BrickPoolConfig(brick_dims=(bx, by, bz), homogeneity_threshold=threshold,
                          overlap=overlap, page_bricks=page_bricks,
                          ram_page_limit=ram_pages)
    depth, node_count = _TREE.unpack_from(raw, off)
    off += _TREE.size

    store = BrickStore.open(pool_path,
                            ram_page_limit=ram_page_limit or cfg.ram_page_limit)
    tree = Octree(desc, cfg, store)
    if tree.geometry.depth != depth:
        raise ValueError("octree depth mismatch with descriptor/config")

    from .paging import BrickLocator

    nodes: dict[int, OctreeNode] = {0: tree.root}
    for _ in range(node_count):
        index, level, nflags = _NODE.unpack_from(raw, off)
        off += _NODE.size
        chans = []
        for _c in range(channels):
            chans.append(_CHAN.unpack_from(raw, off))
            off += _CHAN.size
        page, slot = _LOC.unpack_from(raw, off)
        off += _LOC.size

        if index == 0:
            node = tree.root
            node.level = level
        else:
            parent = nodes[(index - 1) // 8]
            k = (index - 1) % 8
            lo = tree.geometry.child_box_lo(parent.box_lo, parent.level, k)
            node = OctreeNode(level, index, lo, [0] * channels,
                              bool(nflags & _NFLAG_IN_VOLUME))
            if parent.children is None:
                parent.children = [None] * 8
            parent.children[k] = node
            nodes[index] = node
            tree.node_count += 1
        node.smin = [c[0] for c in chans]
        node.smax = [c[1] for c in chans]
        node.avg = [c[2] for c in chans]
        if nflags & _NFLAG_IN_VOLUME:
            node.sub_min = [c[3] for c in chans]
            node.sub_max = [c[4] for c in chans]
        else:
            node.sub_min = None
            node.sub_max = None
        node.in_volume = bool(nflags & _NFLAG_IN_VOLUME)
        if nflags & _NFLAG_BRICK:
            node.brick = BrickLocator(page, slot)
    tree.construction_finished = bool(flags & _FLAG_FINISHED)
    tree.borders_filled = bool(flags & _FLAG_BORDERS)
    tree.drain_events()
    return tree
