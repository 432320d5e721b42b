"""Renderer-facing mirror of the octree: packed node buffer, bounded brick
buffer, and the used/requested flag feedback loop.

Each octree node is one little-endian 64-bit *node entry*:

====  =========================================================
bits  meaning
====  =========================================================
0     brick resident in the brick buffer
1     not homogeneous (the node owns a brick in the pool)
2-23  child-group pointer ``p``; children of node *i* live at
      breadth-first slots ``8*(p-1)+1 .. 8*(p-1)+8`` with
      ``p = i + 1``; 0 means no children
24-63 when resident: bits 24-55 hold the brick-buffer slot;
      otherwise per-channel AVG values, ``40 // C`` bits each
====  =========================================================

The node buffer is pre-sized for a complete tree of the built depth, so
incremental node creation never shifts existing entries. The flag buffer
holds one feedback byte per entry (bit 0 = used last pass, bit 1 =
requested); it is evaluated and cleared between passes, producing an upload
plan executed under a per-frame time budget.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .octree import ChangeEvent, ChangeKind, Octree, OctreeNode

FLAG_USED = 1
FLAG_REQUESTED = 2

_CHILD_PTR_BITS = 22
_CHILD_PTR_MAX = (1 << _CHILD_PTR_BITS) - 1
_SLOT_BITS = 32
_AVG_FIELD_BITS = 40

DEFAULT_BRICK_BUDGET = 512 * 1024 * 1024
DEFAULT_UPLOAD_BUDGET_MS = 150.0


def avg_bits_per_channel(channels: int) -> int:
    return _AVG_FIELD_BITS // channels


def quantize_avg(value: float, channels: int, format_max: int) -> int:
    """Linear scaling of the format range onto the per-channel bit width."""
    qmax = (1 << avg_bits_per_channel(channels)) - 1
    return int(round(value * qmax / format_max))


def dequantize_avg(q: int, channels: int, format_max: int) -> int:
    w = avg_bits_per_channel(channels)
    qmax = (1 << w) - 1
    return int(round(q * format_max / qmax)) if qmax else 0


@dataclass(frozen=True)
class NodeEntryFields:
    in_buffer: bool
    not_homogeneous: bool
    child_ptr: int
    slot: int | None
    avgs: tuple[int, ...]  # quantized per-channel AVG when not resident


def pack_node(fields: NodeEntryFields, channels: int) -> int:
    if not 0 <= fields.child_ptr <= _CHILD_PTR_MAX:
        raise OverflowError(f"child pointer {fields.child_ptr} exceeds 22 bits")
    entry = (1 if fields.in_buffer else 0) | (2 if fields.not_homogeneous else 0)
    entry |= fields.child_ptr << 2
    if fields.in_buffer:
        if fields.slot is None or not 0 <= fields.slot < (1 << _SLOT_BITS):
            raise OverflowError(f"slot index {fields.slot} exceeds 32 bits")
        entry |= fields.slot << 24
    else:
        w = avg_bits_per_channel(channels)
        for c, q in enumerate(fields.avgs):
            if not 0 <= q < (1 << w):
                raise OverflowError(f"AVG value {q} exceeds {w} bits")
            entry |= q << (24 + c * w)
    return entry


def unpack_node(entry: int, channels: int) -> NodeEntryFields:
    in_buffer = bool(entry & 1)
    not_homog = bool(entry & 2)
    child_ptr = (entry >> 2) & _CHILD_PTR_MAX
    if in_buffer:
        slot = (entry >> 24) & ((1 << _SLOT_BITS) - 1)
        return NodeEntryFields(in_buffer, not_homog, child_ptr, slot, ())
    w = avg_bits_per_channel(channels)
    avgs = tuple((entry >> (24 + c * w)) & ((1 << w) - 1) for c in range(channels))
    return NodeEntryFields(in_buffer, not_homog, child_ptr, None, avgs)


def level_of_index(index: int, depth: int) -> int:
    """Tree level (leaves 0, root = depth) of a breadth-first node address."""
    start, size, d = 0, 1, 0
    while index >= start + size:
        start += size
        size *= 8
        d += 1
    return depth - d


class RenderMode(Enum):
    FULLFRAME = "fullframe"
    REFINEMENT = "refinement"


@dataclass(frozen=True)
class UploadItem:
    node_index: int
    slot: int
    evicts: int | None  # node index currently owning the slot


class DeviceState:
    """Single-owner mirror of an octree for the renderer.

    Mutated strictly between render passes: change events are applied to the
    node buffer, the flag buffer is evaluated into an upload plan, and plan
    items move bricks from the paging store into buffer slots under a time
    budget (the resident flag is flipped last, so a pass never observes a
    half-copied slot).
    """

    def __init__(self, octree: Octree, *, brick_budget_bytes: int = DEFAULT_BRICK_BUDGET,
                 slot_count: int | None = None):
        self.octree = octree
        desc = octree.descriptor
        cfg = octree.config
        geo = octree.geometry
        self.channels = desc.channels
        self.format_max = desc.format_max
        self.depth = geo.depth

        self.node_buffer = np.zeros(geo.node_capacity, dtype=np.uint64)
        self.flag_buffer = np.zeros(geo.node_capacity, dtype=np.uint8)

        brick_nbytes = cfg.brick_nbytes(desc)
        if slot_count is None:
            slot_count = max(1, brick_budget_bytes // brick_nbytes)
        bz, by, bx = tuple(reversed(cfg.stored_brick_dims))
        self.brick_buffer = np.zeros((slot_count, bz, by, bx, desc.channels),
                                     dtype=desc.dtype)
        self.slot_count = slot_count
        self.slot_owner = np.full(slot_count, -1, dtype=np.int64)
        self._node_slot: dict[int, int] = {}
        self._free_slots = list(range(slot_count - 1, -1, -1))
        self._pending: dict[int, int] = {}  # node index -> frame first requested
        self._frame = 0

        self.uploads = 0
        self.evictions = 0
        self.unavailable_skips = 0

        self.full_rebuild()

    # -- packing ------------------------------------------------------------

    def _entry_for(self, node: OctreeNode, slot: int | None) -> int:
        child_ptr = node.index + 1 if node.children is not None else 0
        if slot is not None:
            fields = NodeEntryFields(True, node.brick is not None, child_ptr,
                                     slot, ())
        else:
            avgs = tuple(quantize_avg(v, self.channels, self.format_max)
                         for v in node.avg)
            fields = NodeEntryFields(False, node.brick is not None, child_ptr,
                                     None, avgs)
        return pack_node(fields, self.channels)

    def _write_entry(self, node: OctreeNode) -> None:
        slot = self._node_slot.get(node.index)
        self.node_buffer[node.index] = self._entry_for(node, slot)

    def _release_slot(self, node_index: int) -> None:
        slot = self._node_slot.pop(node_index, None)
        if slot is not None:
            self.slot_owner[slot] = -1
            self._free_slots.append(slot)
            self.evictions += 1

    # -- mirroring ------------------------------------------------------------

    def full_rebuild(self) -> None:
        """Rebuild the node buffer from scratch (drops all resident bricks)."""
        self.node_buffer[:] = 0
        self.flag_buffer[:] = 0
        self.slot_owner[:] = -1
        self._node_slot.clear()
        self._free_slots = list(range(self.slot_count - 1, -1, -1))
        self._pending.clear()
        with self.octree.lock:
            for node in self.octree.iter_nodes():
                self.node_buffer[node.index] = self._entry_for(node, None)

    def apply_events(self, events: list[ChangeEvent]) -> None:
        """Apply drained construction events to the node buffer.

        Creation writes the entry and refreshes the parent's child pointer;
        deletion zeroes the entry and refreshes the parent; update rewrites
        the entry in AVG form, dropping any resident brick so a stale copy
        is re-uploaded.
        """
        with self.octree.lock:
            for event in events:
                idx = event.node_index
                if event.kind == ChangeKind.NODE_DELETED:
                    self._release_slot(idx)
                    self._pending.pop(idx, None)
                    self.node_buffer[idx] = 0
                    self.flag_buffer[idx] = 0
                    self._refresh_parent(idx)
                    continue
                node = self.octree.node_by_index(idx)
                if node is None:
                    continue  # superseded by a later deletion in this batch
                if event.kind == ChangeKind.NODE_UPDATED:
                    self._release_slot(idx)
                self._write_entry(node)
                if event.kind == ChangeKind.NODE_CREATED:
                    self._refresh_parent(idx)

    def _refresh_parent(self, idx: int) -> None:
        if idx == 0:
            return
        parent = self.octree.node_by_index((idx - 1) // 8)
        if parent is not None:
            self._write_entry(parent)

    # -- feedback loop ----------------------------------------------------------

    def process_flags(self, mode: RenderMode) -> list[UploadItem]:
        """Evaluate the flag buffer into an ordered upload plan and clear it.

        Refinement may replace every slot. Full-frame fills unused slots
        first; only requests at a coarser level than a used brick may evict
        it, and excess requests are deferred (their age keeps them rising in
        later plans).
        """
        self._frame += 1
        requested = np.flatnonzero(self.flag_buffer & FLAG_REQUESTED)
        used_nodes = np.flatnonzero(self.flag_buffer & FLAG_USED)
        self.flag_buffer[:] = 0

        used_slots = {self._node_slot[int(i)] for i in used_nodes
                      if int(i) in self._node_slot}
        for i in requested:
            idx = int(i)
            if idx not in self._node_slot:
                self._pending.setdefault(idx, self._frame)

        queue = sorted(
            self._pending.items(),
            key=lambda kv: (-level_of_index(kv[0], self.depth), kv[1], kv[0]),
        )

        free = sorted(self._free_slots, reverse=True)  # pop() yields ascending
        unused_victims = sorted(
            (slot for slot, owner in enumerate(self.slot_owner)
             if owner >= 0 and slot not in used_slots),
            key=lambda s: (level_of_index(int(self.slot_owner[s]), self.depth), s),
            reverse=True,  # pop() yields finest-level owners first
        )
        used_victims = sorted(
            (slot for slot in used_slots),
            key=lambda s: (level_of_index(int(self.slot_owner[s]), self.depth), s),
            reverse=True,
        )

        # Requests beyond the free/unused capacity are resolved against used
        # bricks: the coarsest (largest-coverage) requests may evict strictly
        # finer used bricks, leaving the easy slots for the finer requests.
        overflow = 0
        if mode is RenderMode.FULLFRAME:
            overflow = max(0, len(queue) - len(free) - len(unused_victims))

        plan: list[UploadItem] = []
        for pos, (idx, _first) in enumerate(queue):
            item = None
            if pos < overflow and used_victims:
                victim = used_victims[-1]
                owner_level = level_of_index(int(self.slot_owner[victim]), self.depth)
                if level_of_index(idx, self.depth) > owner_level:
                    used_victims.pop()
                    item = UploadItem(idx, victim, int(self.slot_owner[victim]))
            if item is None:
                if free:
                    item = UploadItem(idx, free.pop(), None)
                elif unused_victims:
                    slot = unused_victims.pop()
                    item = UploadItem(idx, slot, int(self.slot_owner[slot]))
                elif used_victims:
                    victim = used_victims[-1]
                    owner_level = level_of_index(int(self.slot_owner[victim]),
                                                 self.depth)
                    if mode is RenderMode.REFINEMENT or (
                            level_of_index(idx, self.depth) > owner_level):
                        used_victims.pop()
                        item = UploadItem(idx, victim, int(self.slot_owner[victim]))
                    # full-frame never evicts a used brick for a
                    # finer-or-equal-level request
            if item is not None:
                plan.append(item)
            # otherwise the request stays deferred, ageing for later frames
        return plan

    def upload_bricks(self, plan: list[UploadItem], budget_ms: float = DEFAULT_UPLOAD_BUDGET_MS,
                      clock=None) -> int:
        """Execute plan items in order until the time budget is exhausted.

        Bricks unavailable from the paging store (all pages pinned) are
        skipped and remain requested. Returns the number of uploads done.
        """
        if clock is None:
            clock = time.monotonic
        start = clock()
        done = 0
        store = self.octree.store
        for item in plan:
            if (clock() - start) * 1000.0 >= budget_ms:
                break
            with self.octree.lock:
                node = self.octree.node_by_index(item.node_index)
                if node is None or node.brick is None:
                    self._pending.pop(item.node_index, None)
                    continue
                handle = store.acquire(node.brick, blocking=False)
                if handle is None:
                    self.unavailable_skips += 1
                    continue
                try:
                    self.brick_buffer[item.slot] = handle.data
                finally:
                    store.release(handle)
                previous = int(self.slot_owner[item.slot])
                if previous >= 0:
                    self._node_slot.pop(previous, None)
                    prev_node = self.octree.node_by_index(previous)
                    self.node_buffer[previous] = (
                        self._entry_for(prev_node, None) if prev_node is not None else 0)
                    self.evictions += 1
                elif item.slot in self._free_slots:
                    self._free_slots.remove(item.slot)
                self.slot_owner[item.slot] = item.node_index
                self._node_slot[item.node_index] = item.slot
                self._pending.pop(item.node_index, None)
                # resident flag flips last: a pass never sees a half-copied slot
                self.node_buffer[item.node_index] = self._entry_for(node, item.slot)
                self.uploads += 1
                done += 1
        return done

    # -- introspection -------------------------------------------------------------

    @property
    def resident_bricks(self) -> int:
        return len(self._node_slot)

    @property
    def pending_requests(self) -> int:
        return len(self._pending)

    def check_consistency(self) -> None:
        """Occupied slots and resident-flagged entries must be in bijection."""
        flagged = {int(i) for i in np.flatnonzero(self.node_buffer & np.uint64(1))}
        owned = {int(o) for o in self.slot_owner if o >= 0}
        if flagged != owned or set(self._node_slot) != owned:
            raise AssertionError(
                f"slot table inconsistent: flagged={flagged} owned={owned} "
                f"map={set(self._node_slot)}")
        for idx, slot in self._node_slot.items():
            entry = unpack_node(int(self.node_buffer[idx]), self.channels)
            if entry.slot != slot or self.slot_owner[slot] != idx:
                raise AssertionError(f"slot back-reference broken for node {idx}")

    def dump_node_buffer(self, path) -> None:
        self.node_buffer.astype("<u8").tofile(path)
