"""Disk-backed brick pool with page-granular LRU caching.

Bricks are grouped into fixed-size pages; a page is the unit of disk I/O
and of RAM residency. At most ``ram_page_limit`` pages are resident; the
least recently used unpinned page is evicted first (written back when
dirty). Pinned pages are never evicted: blocking acquirers wait in FIFO
order for a pin to drop, non-blocking acquirers get ``None``. Corruption
and I/O failures raise :class:`StoreIOError`; they are never reported as
unavailability.

File layout (all little-endian): a fixed header, then pages (payload
followed by a CRC32 trailer validated on load), then a free-slot bitmap
footer rewritten on flush.
"""

from __future__ import annotations

import heapq
import os
import struct
import threading
import zlib
from collections import deque
from dataclasses import dataclass

import numpy as np

MAGIC = b"VXBP"
VERSION = 1
_HEADER = struct.Struct("<4sIIQIIIHHQQ12x")  # 64 bytes
_CRC = struct.Struct("<I")

_DTYPE_CODES = {1: np.uint8, 2: np.uint16}
_DTYPE_BY_NAME = {"uint8": 1, "uint16": 2}


class StoreIOError(Exception):
    """Disk failure or corruption in the brick-pool file."""


@dataclass(frozen=True)
class BrickLocator:
    page_id: int
    slot: int

    def flat(self, page_bricks: int) -> int:
        return self.page_id * page_bricks + self.slot


class BrickHandle:
    """Pinned view of one brick. ``data`` aliases the page buffer; call
    :meth:`mark_dirty` after writing through it."""

    __slots__ = ("locator", "data", "_page", "_released", "_wrote")

    def __init__(self, locator: BrickLocator, data: np.ndarray, page):
        self.locator = locator
        self.data = data
        self._page = page
        self._released = False
        self._wrote = False

    def mark_dirty(self) -> None:
        self._wrote = True


class _Page:
    __slots__ = ("array", "dirty", "pin_count", "last_use")

    def __init__(self, array: np.ndarray):
        self.array = array
        self.dirty = False
        self.pin_count = 0
        self.last_use = 0


class BrickStore:
    """Paged, LRU-cached, disk-backed storage for brick payloads."""

    def __init__(self, path, *, page_bricks: int, brick_shape, channels: int,
                 dtype, ram_page_limit: int, _create: bool):
        self.path = os.fspath(path)
        self.page_bricks = int(page_bricks)
        self.brick_shape = tuple(int(v) for v in brick_shape)
        self.channels = int(channels)
        self.dtype = np.dtype(dtype)
        self.ram_page_limit = int(ram_page_limit)
        self.brick_nbytes = (
            int(np.prod(self.brick_shape)) * self.channels * self.dtype.itemsize
        )
        self._page_nbytes = self.page_bricks * self.brick_nbytes
        self._page_stride = self._page_nbytes + _CRC.size

        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._wait_queue: deque[int] = deque()
        self._next_ticket = 0

        self._pages: dict[int, _Page] = {}
        self._tick = 0
        self._page_count = 0
        self._cursor = 0  # flat slot index; slots >= cursor were never allocated
        self._free: list[int] = []  # min-heap of freed flat slots
        self._freed: set[int] = set()

        self.disk_reads = 0
        self.disk_writes = 0
        self.page_faults = 0

        mode = "w+b" if _create else "r+b"
        try:
            self._file = open(self.path, mode)
        except OSError as exc:
            raise StoreIOError(str(exc)) from exc
        if _create:
            self._write_header(footer_off=0)

    # -- construction -----------------------------------------------------

    @classmethod
    def create(cls, path, *, page_bricks: int, brick_shape, channels: int,
               dtype, ram_page_limit: int = 64) -> "BrickStore":
        return cls(path, page_bricks=page_bricks, brick_shape=brick_shape,
                   channels=channels, dtype=dtype, ram_page_limit=ram_page_limit,
                   _create=True)

    @classmethod
    def open(cls, path, *, ram_page_limit: int = 64) -> "BrickStore":
        try:
            with open(path, "rb") as fh:
                raw = fh.read(_HEADER.size)
        except OSError as exc:
            raise StoreIOError(str(exc)) from exc
        if len(raw) < _HEADER.size:
            raise StoreIOError("brick pool header truncated")
        (magic, version, page_bricks, brick_nbytes, bz, by, bx, channels,
         dtype_code, page_count, footer_off) = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise StoreIOError("not a brick pool file")
        if version != VERSION:
            raise StoreIOError(f"unsupported brick pool version {version}")
        if dtype_code not in _DTYPE_CODES:
            raise StoreIOError(f"unknown sample dtype code {dtype_code}")
        store = cls(path, page_bricks=page_bricks, brick_shape=(bz, by, bx),
                    channels=channels, dtype=_DTYPE_CODES[dtype_code],
                    ram_page_limit=ram_page_limit, _create=False)
        if store.brick_nbytes != brick_nbytes:
            raise StoreIOError("brick size mismatch in header")
        store._page_count = page_count
        store._cursor = page_count * page_bricks
        store._load_footer(footer_off)
        return store

    def _write_header(self, footer_off: int) -> None:
        raw = _HEADER.pack(
            MAGIC, VERSION, self.page_bricks, self.brick_nbytes,
            self.brick_shape[0], self.brick_shape[1], self.brick_shape[2],
            self.channels, _DTYPE_BY_NAME[self.dtype.name], self._page_count,
            footer_off,
        )
        self._file.seek(0)
        self._file.write(raw)

    def _load_footer(self, footer_off: int) -> None:
        nslots = self._page_count * self.page_bricks
        if nslots == 0:
            return
        nbytes = (nslots + 7) // 8
        if footer_off == 0:
            raise StoreIOError("brick pool was not flushed (no footer)")
        self._file.seek(footer_off)
        raw = self._file.read(nbytes)
        if len(raw) < nbytes:
            raise StoreIOError("brick pool footer truncated")
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
        for flat in range(nslots):
            if not bits[flat]:
                self._freed.add(flat)
                heapq.heappush(self._free, flat)

    # -- geometry ---------------------------------------------------------

    def _page_offset(self, page_id: int) -> int:
        return _HEADER.size + page_id * self._page_stride

    def _locator(self, flat: int) -> BrickLocator:
        return BrickLocator(flat // self.page_bricks, flat % self.page_bricks)

    @property
    def page_count(self) -> int:
        return self._page_count

    @property
    def live_bricks(self) -> int:
        return self._cursor - len(self._freed)

    @property
    def payload_nbytes(self) -> int:
        return self.live_bricks * self.brick_nbytes

    @property
    def resident_pages(self) -> list[int]:
        with self._lock:
            return sorted(self._pages)

    def is_allocated(self, loc: BrickLocator) -> bool:
        flat = loc.flat(self.page_bricks)
        with self._lock:
            return 0 <= flat < self._cursor and flat not in self._freed

    # -- allocation -------------------------------------------------------

    def allocate(self) -> BrickLocator:
        """Take a brick slot, recycling freed slots before opening new pages."""
        with self._lock:
            if self._free:
                flat = heapq.heappop(self._free)
                self._freed.discard(flat)
                return self._locator(flat)
            flat = self._cursor
            self._cursor += 1
            if flat // self.page_bricks >= self._page_count:
                self._open_page()
            return self._locator(flat)

    def free(self, loc: BrickLocator) -> None:
        flat = loc.flat(self.page_bricks)
        with self._lock:
            if flat >= self._cursor or flat in self._freed:
                raise ValueError(f"double free of {loc}")
            self._freed.add(flat)
            heapq.heappush(self._free, flat)

    def _open_page(self) -> None:
        page_id = self._page_count
        self._page_count += 1
        self._make_room(blocking=True)
        arr = np.zeros((self.page_bricks, *self.brick_shape, self.channels),
                       dtype=self.dtype)
        page = _Page(arr)
        page.dirty = True
        self._tick += 1
        page.last_use = self._tick
        self._pages[page_id] = page

    # -- residency --------------------------------------------------------

    def acquire(self, loc: BrickLocator, blocking: bool = True) -> BrickHandle | None:
        """Pin the page holding ``loc`` and return a handle on the brick.

        Returns ``None`` (without touching the disk) when the page is not
        resident, every resident page is pinned, and ``blocking`` is false.
        """
        with self._lock:
            if not self.is_allocated(loc):
                raise ValueError(f"{loc} is not an allocated brick")
            page = self._pages.get(loc.page_id)
            if page is None:
                if not self._can_make_room():
                    if not blocking:
                        return None
                    ticket = self._next_ticket
                    self._next_ticket += 1
                    self._wait_queue.append(ticket)
                    while not (self._wait_queue[0] == ticket and self._can_make_room()):
                        self._cond.wait()
                    self._wait_queue.popleft()
                    self._cond.notify_all()
                self.page_faults += 1
                self._make_room(blocking=True)
                page = self._load_page(loc.page_id)
            self._tick += 1
            page.last_use = self._tick
            page.pin_count += 1
            data = page.array[loc.slot]
            return BrickHandle(loc, data, page)

    def release(self, handle: BrickHandle) -> None:
        with self._lock:
            if handle._released:
                raise RuntimeError(f"double release of {handle.locator}")
            handle._released = True
            page = handle._page
            if handle._wrote:
                page.dirty = True
            if page.pin_count <= 0:
                raise RuntimeError("release without matching acquire")
            page.pin_count -= 1
            if page.pin_count == 0:
                self._cond.notify_all()

    def _can_make_room(self) -> bool:
        if len(self._pages) < self.ram_page_limit:
            return True
        return any(p.pin_count == 0 for p in self._pages.values())

    def _make_room(self, blocking: bool) -> bool:
        """Ensure at least one free cache slot; evicts the LRU unpinned page."""
        while len(self._pages) >= self.ram_page_limit:
            victims = [(p.last_use, pid) for pid, p in self._pages.items()
                       if p.pin_count == 0]
            if not victims:
                if not blocking:
                    return False
                self._cond.wait()
                continue
            _, pid = min(victims)
            page = self._pages.pop(pid)
            if page.dirty:
                self._write_page(pid, page)
        return True

    def _load_page(self, page_id: int) -> _Page:
        offset = self._page_offset(page_id)
        try:
            self._file.seek(0, os.SEEK_END)
            file_end = self._file.tell()
            if offset >= file_end:
                raw = b""
            else:
                self._file.seek(offset)
                raw = self._file.read(self._page_stride)
        except OSError as exc:
            raise StoreIOError(str(exc)) from exc
        if raw:
            if len(raw) < self._page_stride:
                raise StoreIOError(f"page {page_id} truncated")
            payload = raw[: self._page_nbytes]
            (crc,) = _CRC.unpack(raw[self._page_nbytes:])
            if zlib.crc32(payload) != crc:
                raise StoreIOError(f"page {page_id} checksum mismatch")
            arr = np.frombuffer(payload, dtype=self.dtype).reshape(
                self.page_bricks, *self.brick_shape, self.channels).copy()
            self.disk_reads += 1
        else:
            arr = np.zeros((self.page_bricks, *self.brick_shape, self.channels),
                           dtype=self.dtype)
        page = _Page(arr)
        self._pages[page_id] = page
        return page

    def _write_page(self, page_id: int, page: _Page) -> None:
        payload = page.array.tobytes()
        try:
            self._file.seek(self._page_offset(page_id))
            self._file.write(payload)
            self._file.write(_CRC.pack(zlib.crc32(payload)))
        except OSError as exc:
            raise StoreIOError(str(exc)) from exc
        page.dirty = False
        self.disk_writes += 1

    # -- persistence ------------------------------------------------------

    def flush(self) -> None:
        """Write back every dirty page plus the free bitmap and header."""
        with self._lock:
            for pid in sorted(self._pages):
                page = self._pages[pid]
                if page.dirty:
                    self._write_page(pid, page)
            nslots = self._page_count * self.page_bricks
            footer_off = self._page_offset(self._page_count)
            if nslots:
                bits = np.ones(nslots, dtype=np.uint8)
                for flat in self._freed:
                    bits[flat] = 0
                bits[self._cursor:] = 0
                raw = np.packbits(bits, bitorder="little").tobytes()
                try:
                    self._file.seek(footer_off)
                    self._file.write(raw)
                except OSError as exc:
                    raise StoreIOError(str(exc)) from exc
            self._write_header(footer_off if nslots else 0)
            try:
                self._file.flush()
                os.fsync(self._file.fileno())
            except OSError as exc:
                raise StoreIOError(str(exc)) from exc

    def close(self) -> None:
        with self._lock:
            if self._file.closed:
                return
            self.flush()
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- convenience ------------------------------------------------------

    def read_brick(self, loc: BrickLocator) -> np.ndarray:
        handle = self.acquire(loc)
        try:
            return handle.data.copy()
        finally:
            self.release(handle)

    def write_brick(self, loc: BrickLocator, values: np.ndarray) -> None:
        handle = self.acquire(loc)
        try:
            handle.data[...] = values
            handle.mark_dirty()
        finally:
            self.release(handle)
