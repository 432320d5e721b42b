"""Volume input: raw files with a text sidecar, and streamed slab insertion
over the VSTR wire protocol.

Raw volumes are bare sample arrays in x-fastest order (one file per channel
or a single channel-interleaved file) described by a ``key = value`` text
sidecar. The stream protocol carries the same descriptor up front — channel
count and final resolution are all the construction needs to know — followed
by slab frames that may arrive in any order, overlap, or repeat. Stream end
or an abort opcode finalizes construction and triggers border filling.

Wire format (little-endian): ``VSTR`` + u16 version + descriptor block on
connect; each slab frame is u16 channel, three u32 origin coordinates,
three u32 dims, u32 CRC32 of the payload, then the raw samples. Channel
0xFFFF is the abort opcode, 0xFFFE marks a clean end of stream.
"""

from __future__ import annotations

import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .octree import Octree
from .volume import VolumeDescriptor

MAGIC = b"VSTR"
VERSION = 1

_HANDSHAKE = struct.Struct("<4sH")
_DESC = struct.Struct("<3IHH3dIB3x")
_FRAME = struct.Struct("<H3I3II")

CHANNEL_ABORT = 0xFFFF
CHANNEL_END = 0xFFFE

_FMT_CODES = {"uint8": 1, "uint16": 2}
_FMT_NAMES = {v: k for k, v in _FMT_CODES.items()}


class ProtocolError(Exception):
    """Malformed stream frame; the connection must be dropped."""


# -- sidecar ---------------------------------------------------------------------

def write_sidecar(path, desc: VolumeDescriptor, files) -> None:
    lines = [
        f"dims = {desc.dims[0]} {desc.dims[1]} {desc.dims[2]}",
        f"channels = {desc.channels}",
        f"format = {desc.sample_format}",
        f"spacing = {desc.spacing[0]} {desc.spacing[1]} {desc.spacing[2]}",
        f"background = {desc.background_value}",
    ]
    if desc.channel_transforms is not None:
        for c in range(desc.channels):
            row = " ".join(repr(float(v))
                           for v in desc.channel_transforms[c].reshape(16))
            lines.append(f"transform{c} = {row}")
    if isinstance(files, (str, os.PathLike)):
        lines.append(f"file = {os.fspath(files)}")
    else:
        for c, f in enumerate(files):
            lines.append(f"file{c} = {os.fspath(f)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sidecar(path):
    """Parse a sidecar; returns (descriptor, files, interleaved)."""
    entries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    try:
        dims = tuple(int(v) for v in entries["dims"].split())
        channels = int(entries.get("channels", "1"))
        fmt = entries.get("format", "uint16")
        spacing = tuple(float(v) for v in entries.get("spacing", "1 1 1").split())
        background = int(entries.get("background", "0"))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"invalid sidecar {path}: {exc}") from exc
    transforms = None
    if any(f"transform{c}" in entries for c in range(channels)):
        transforms = np.stack([
            np.array([float(v) for v in entries.get(f"transform{c}", " ".join(
                str(x) for x in np.eye(4).reshape(16))).split()]).reshape(4, 4)
            for c in range(channels)])
    desc = VolumeDescriptor(dims=dims, channels=channels, sample_format=fmt,
                            spacing=spacing, background_value=background,
                            channel_transforms=transforms)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    if "file" in entries:
        return desc, resolve(entries["file"]), True
    files = []
    for c in range(channels):
        key = f"file{c}"
        if key not in entries:
            raise ValueError(f"sidecar {path} missing {key}")
        files.append(resolve(entries[key]))
    return desc, files, False


class RawVolumeSource:
    """Raw sample files (x-fastest) for each channel, or one interleaved file."""

    def __init__(self, desc: VolumeDescriptor, files, interleaved: bool):
        self.descriptor = desc
        self.files = files
        self.interleaved = interleaved
        self.validate()

    @classmethod
    def from_sidecar(cls, path) -> "RawVolumeSource":
        return cls(*read_sidecar(path))

    def validate(self) -> None:
        desc = self.descriptor
        voxels = desc.voxel_count
        width = desc.dtype.itemsize
        if self.interleaved:
            expected = voxels * desc.channels * width
            actual = os.path.getsize(self.files)
            if actual != expected:
                raise ValueError(
                    f"{self.files}: {actual} bytes, expected {expected}")
        else:
            if len(self.files) != desc.channels:
                raise ValueError("one file per channel required")
            for f in self.files:
                actual = os.path.getsize(f)
                if actual != voxels * width:
                    raise ValueError(
                        f"{f}: {actual} bytes, expected {voxels * width}")

    def read_channel(self, channel: int) -> np.ndarray:
        desc = self.descriptor
        dx, dy, dz = desc.dims
        if self.interleaved:
            data = np.fromfile(self.files, dtype=desc.dtype.newbyteorder("<"))
            return data.reshape(dz, dy, dx, desc.channels)[..., channel].astype(
                desc.dtype)
        data = np.fromfile(self.files[channel], dtype=desc.dtype.newbyteorder("<"))
        return data.reshape(dz, dy, dx).astype(desc.dtype)


# -- bulk ingestion -----------------------------------------------------------------

@dataclass
class BuildReport:
    wall_time_s: float
    brick_count: int
    pruned_bricks: int
    node_count: int
    payload_bytes: int
    raw_bytes: int
    inserted_blocks: int = 0

    @property
    def payload_ratio(self) -> float:
        return self.payload_bytes / self.raw_bytes if self.raw_bytes else 0.0

    def summary(self) -> str:
        return (f"built {self.node_count} nodes, {self.brick_count} bricks "
                f"({self.pruned_bricks} pruned) in {self.wall_time_s:.2f}s; "
                f"pool payload {self.payload_bytes / 1e6:.1f} MB "
                f"({self.payload_ratio:.3f}x raw)")


def ingest_bulk(source: RawVolumeSource, tree: Octree, *, workers: int | None = None,
                fill_borders: bool = True) -> BuildReport:
    """Insert a complete volume as brick-aligned z-slabs, one construction
    worker per channel."""
    desc = source.descriptor
    mz = tree.config.brick_dims[2]
    start = time.perf_counter()
    blocks = 0
    lock = threading.Lock()

    def insert_channel(c: int) -> None:
        nonlocal blocks
        data = source.read_channel(c)
        for z0 in range(0, desc.dims[2], mz):
            z1 = min(z0 + mz, desc.dims[2])
            tree.insert_block(c, (0, 0, z0), data[z0:z1])
            with lock:
                blocks += 1

    workers = desc.channels if workers is None else max(1, workers)
    if workers <= 1 or desc.channels == 1:
        for c in range(desc.channels):
            insert_channel(c)
    else:
        threads = [threading.Thread(target=insert_channel, args=(c,))
                   for c in range(desc.channels)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    tree.finalize()
    if fill_borders:
        tree.fill_borders()
    wall = time.perf_counter() - start
    return BuildReport(
        wall_time_s=wall,
        brick_count=tree.brick_count,
        pruned_bricks=tree.pruned_bricks,
        node_count=tree.node_count,
        payload_bytes=tree.store.payload_nbytes,
        raw_bytes=desc.voxel_count * desc.channels * desc.dtype.itemsize,
        inserted_blocks=blocks,
    )


# -- stream protocol -----------------------------------------------------------------

def pack_descriptor(desc: VolumeDescriptor) -> bytes:
    flags = 1 if desc.channel_transforms is not None else 0
    blob = _DESC.pack(*desc.dims, desc.channels, _FMT_CODES[desc.sample_format],
                      *desc.spacing, desc.background_value, flags)
    if desc.channel_transforms is not None:
        blob += np.asarray(desc.channel_transforms, dtype="<f8").tobytes()
    return blob


def encode_handshake(desc: VolumeDescriptor) -> bytes:
    return _HANDSHAKE.pack(MAGIC, VERSION) + pack_descriptor(desc)


def encode_slab(desc: VolumeDescriptor, channel: int, origin, values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype=desc.dtype.newbyteorder("<"))
    payload = values.tobytes()
    dims = (values.shape[2], values.shape[1], values.shape[0])
    head = _FRAME.pack(channel, origin[0], origin[1], origin[2],
                       dims[0], dims[1], dims[2], zlib.crc32(payload))
    return head + payload


def encode_end() -> bytes:
    return _FRAME.pack(CHANNEL_END, 0, 0, 0, 0, 0, 0, 0)


def encode_abort() -> bytes:
    return _FRAME.pack(CHANNEL_ABORT, 0, 0, 0, 0, 0, 0, 0)


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_handshake(stream) -> VolumeDescriptor:
    raw = _read_exact(stream, _HANDSHAKE.size)
    if len(raw) < _HANDSHAKE.size:
        raise ProtocolError("truncated handshake")
    magic, version = _HANDSHAKE.unpack(raw)
    if magic != MAGIC:
        raise ProtocolError("not a VSTR stream")
    if version != VERSION:
        raise ProtocolError(f"unsupported stream version {version}")
    raw = _read_exact(stream, _DESC.size)
    if len(raw) < _DESC.size:
        raise ProtocolError("truncated descriptor")
    dx, dy, dz, channels, fmt, sx, sy, sz, background, flags = _DESC.unpack(raw)
    transforms = None
    if flags & 1:
        blob = _read_exact(stream, channels * 16 * 8)
        if len(blob) < channels * 16 * 8:
            raise ProtocolError("truncated channel transforms")
        transforms = np.frombuffer(blob, dtype="<f8").reshape(channels, 4, 4).copy()
    if fmt not in _FMT_NAMES:
        raise ProtocolError(f"unknown sample format code {fmt}")
    return VolumeDescriptor(dims=(dx, dy, dz), channels=channels,
                            sample_format=_FMT_NAMES[fmt], spacing=(sx, sy, sz),
                            background_value=background,
                            channel_transforms=transforms)


@dataclass
class StreamResult:
    slabs: int = 0
    rejected: int = 0
    aborted: bool = False
    nacks: list = field(default_factory=list)


def ingest_stream(stream, tree: Octree, *, on_slab=None, on_nack=None,
                  should_stop=None, fill_borders: bool = True) -> StreamResult:
    """Feed slab frames from a byte stream into the tree.

    The handshake must already have produced ``tree`` (see
    :func:`read_handshake`). Out-of-bounds slabs are NACKed and skipped;
    malformed frames raise :class:`ProtocolError`. End-of-stream, the abort
    opcode, a true ``should_stop()`` or EOF all finalize construction and
    fill brick borders.
    """
    desc = tree.descriptor
    result = StreamResult()
    width = desc.dtype.itemsize
    while True:
        if should_stop is not None and should_stop():
            result.aborted = True
            break
        head = _read_exact(stream, _FRAME.size)
        if not head:
            break  # clean EOF
        if len(head) < _FRAME.size:
            raise ProtocolError("truncated frame header")
        channel, ox, oy, oz, dx, dy, dz, crc = _FRAME.unpack(head)
        if channel == CHANNEL_END:
            break
        if channel == CHANNEL_ABORT:
            result.aborted = True
            break
        nbytes = dx * dy * dz * width
        payload = _read_exact(stream, nbytes)
        if len(payload) < nbytes:
            raise ProtocolError("truncated slab payload")
        if zlib.crc32(payload) != crc:
            raise ProtocolError("slab checksum mismatch")
        if (channel >= desc.channels or dx == 0 or dy == 0 or dz == 0
                or ox + dx > desc.dims[0] or oy + dy > desc.dims[1]
                or oz + dz > desc.dims[2]):
            result.rejected += 1
            reason = f"slab out of bounds: ch={channel} at ({ox},{oy},{oz})+({dx},{dy},{dz})"
            result.nacks.append(reason)
            if on_nack is not None:
                on_nack(reason)
            continue
        values = np.frombuffer(payload, dtype=desc.dtype.newbyteorder("<"))
        values = values.reshape(dz, dy, dx)
        tree.insert_block(channel, (ox, oy, oz), values)
        result.slabs += 1
        if on_slab is not None:
            on_slab(result.slabs)
    tree.finalize()
    if fill_borders:
        tree.fill_borders()
    return result
