"""Volume metadata and the virtual-dimension geometry of the brick hierarchy.

A volume of arbitrary extent is virtually grown so that every axis is
covered by bricks of a fixed per-axis resolution M, halved N times:
``virtual = M * 2**N``. Axes that already fit inside a single brick are
never padded and never split (the 1D/2D analogues used throughout the
tests degenerate this way). The padding region costs no bricks; nodes
entirely outside the original volume only ever store the background value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Triple = tuple[int, int, int]

SAMPLE_FORMATS = {"uint8": np.uint8, "uint16": np.uint16}

MAX_CHANNELS = 4
#: 22-bit child-group pointers address 8 * 2**22 node slots, which caps the
#: tree at nine levels (N <= 8).
MAX_LEVELS = 8


def _triple(value) -> Triple:
    t = tuple(int(v) for v in value)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {value!r}")
    return t  # type: ignore[return-value]


@dataclass
class VolumeDescriptor:
    """Static facts about a volume that must be known before any data arrives:
    extent, channel count, sample format, voxel spacing, the background value
    standing in for not-yet-scanned data, and optional per-channel affine
    transforms used to correct chromatic aberration at sampling time.
    """

    dims: Triple
    channels: int = 1
    sample_format: str = "uint16"
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_value: int = 0
    channel_transforms: np.ndarray | None = None  # (C, 4, 4), None = identity

    def __post_init__(self):
        self.dims = _triple(self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.validate()

    def validate(self) -> None:
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")
        if not 1 <= self.channels <= MAX_CHANNELS:
            raise ValueError(f"channels must be in [1, {MAX_CHANNELS}], got {self.channels}")
        if self.sample_format not in SAMPLE_FORMATS:
            raise ValueError(f"unsupported sample format {self.sample_format!r}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not 0 <= self.background_value <= self.format_max:
            raise ValueError("background_value outside the sample format range")
        if self.channel_transforms is not None:
            m = np.asarray(self.channel_transforms, dtype=np.float64)
            if m.shape != (self.channels, 4, 4):
                raise ValueError(f"channel_transforms must be ({self.channels}, 4, 4)")
            for c in range(self.channels):
                if abs(np.linalg.det(m[c])) < 1e-12:
                    raise ValueError(f"channel transform {c} is not invertible")
            self.channel_transforms = m

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(SAMPLE_FORMATS[self.sample_format])

    @property
    def format_max(self) -> int:
        return int(np.iinfo(SAMPLE_FORMATS[self.sample_format]).max)

    @property
    def voxel_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def transform_for(self, channel: int) -> np.ndarray:
        if self.channel_transforms is None:
            return np.eye(4)
        return self.channel_transforms[channel]

    @property
    def has_channel_transforms(self) -> bool:
        if self.channel_transforms is None:
            return False
        return any(
            not np.allclose(self.channel_transforms[c], np.eye(4))
            for c in range(self.channels)
        )


@dataclass
class BrickPoolConfig:
    """Brick-pool tuning: brick resolution, homogeneity threshold, border
    overlap (fixed at one voxel), and paging geometry.

    ``homogeneity_threshold=None`` resolves to 5% of the sample format's
    range when the octree is created; 0 disables pruning entirely (the
    comparison is strict: max - min < threshold).
    """

    brick_dims: Triple = (64, 64, 64)
    homogeneity_threshold: float | None = None
    overlap: int = 1
    page_bricks: int = 64
    ram_page_limit: int = 64

    def __post_init__(self):
        self.brick_dims = _triple(self.brick_dims)
        self.validate()

    def validate(self) -> None:
        for m in self.brick_dims:
            # dimension 1 marks a degenerate axis (no half-sampling along it)
            if m < 1 or (m > 1 and m % 2 != 0):
                raise ValueError(f"brick dims must be even (or 1), got {self.brick_dims}")
        if self.overlap != 1:
            raise ValueError("border overlap is fixed at 1 voxel")
        if self.homogeneity_threshold is not None and self.homogeneity_threshold < 0:
            raise ValueError("homogeneity_threshold must be non-negative")
        if self.page_bricks < 1:
            raise ValueError("page_bricks must be >= 1")
        if self.ram_page_limit < 1:
            raise ValueError("ram_page_limit must be >= 1")

    def resolve_threshold(self, desc: VolumeDescriptor) -> float:
        if self.homogeneity_threshold is None:
            return 0.05 * desc.format_max
        return float(self.homogeneity_threshold)

    @property
    def stored_brick_dims(self) -> Triple:
        m = self.brick_dims
        o = self.overlap
        return (m[0] + 2 * o, m[1] + 2 * o, m[2] + 2 * o)

    def brick_voxels(self, channels: int) -> int:
        s = self.stored_brick_dims
        return s[0] * s[1] * s[2] * channels

    def brick_nbytes(self, desc: VolumeDescriptor) -> int:
        return self.brick_voxels(desc.channels) * desc.dtype.itemsize


def virtual_dims(dims: Sequence[int], brick_dims: Sequence[int]) -> tuple[Triple, int]:
    """Grow ``dims`` to the smallest brick-covered extent.

    Every axis needing more than one brick is padded to ``M * 2**N`` with a
    single shared N (minimal so the padded extent covers every such axis);
    axes fitting inside one brick keep extent M and are never split.
    Returns the padded dims and N (the tree depth; leaves are level 0).
    """
    dims = _triple(dims)
    brick = _triple(brick_dims)
    if any(d <= 0 for d in dims) or any(m <= 0 for m in brick):
        raise ValueError("dims and brick_dims must be positive")
    per_axis = []
    for d, m in zip(dims, brick):
        n = 0
        ext = m
        while ext < d:
            ext *= 2
            n += 1
        per_axis.append(n)
    depth = max(per_axis)
    virt = tuple(
        m if n == 0 else m * (1 << depth) for m, n, d in zip(brick, per_axis, dims)
    )
    return virt, depth  # type: ignore[return-value]


@dataclass(frozen=True)
class TreeGeometry:
    """Derived per-tree geometry shared by construction, device mirroring and
    rendering: virtual extent, depth, which axes split, and the box
    arithmetic for nodes of the complete breadth-first tree.
    """

    dims: Triple
    brick_dims: Triple
    virtual: Triple
    depth: int
    split_axes: tuple[bool, bool, bool]
    node_capacity: int = field(init=False)

    def __post_init__(self):
        # complete tree with 8-slot groups: sum_{i=0..depth} 8^i
        cap = (8 ** (self.depth + 1) - 1) // 7
        object.__setattr__(self, "node_capacity", cap)

    @classmethod
    def build(cls, desc: VolumeDescriptor, cfg: BrickPoolConfig) -> "TreeGeometry":
        virt, depth = virtual_dims(desc.dims, cfg.brick_dims)
        if depth > MAX_LEVELS:
            raise ValueError(
                f"tree needs {depth + 1} levels; child pointers address at most "
                f"{MAX_LEVELS + 1} (volume too large for this brick resolution)"
            )
        split = tuple(v > m for v, m in zip(virt, cfg.brick_dims))
        return cls(desc.dims, cfg.brick_dims, virt, depth, split)  # type: ignore[arg-type]

    def node_extent(self, level: int) -> Triple:
        """Extent of a level-``level`` node in level-0 virtual voxels."""
        return tuple(
            m * (1 << level) if s else m
            for m, s in zip(self.brick_dims, self.split_axes)
        )  # type: ignore[return-value]

    def level_scale(self, level: int) -> Triple:
        """Level-0 voxels per level-``level`` mip voxel, per axis."""
        return tuple(
            (1 << level) if s else 1 for s in self.split_axes
        )  # type: ignore[return-value]

    def octant_exists(self, k: int) -> bool:
        """Whether child slot k (x + 2y + 4z octant bits) is geometrically real."""
        for axis in range(3):
            if (k >> axis) & 1 and not self.split_axes[axis]:
                return False
        return True

    @property
    def real_octants(self) -> list[int]:
        return [k for k in range(8) if self.octant_exists(k)]

    def child_box_lo(self, parent_lo: Triple, level: int, k: int) -> Triple:
        """Origin of child octant k of a level-``level`` node at ``parent_lo``."""
        half = self.node_extent(level - 1)
        return tuple(
            lo + (half[a] if (k >> a) & 1 else 0) for a, lo in enumerate(parent_lo)
        )  # type: ignore[return-value]

    def octant_of(self, point: Sequence[float], parent_lo: Triple, level: int) -> int:
        half = self.node_extent(level - 1)
        k = 0
        for a in range(3):
            if self.split_axes[a] and point[a] >= parent_lo[a] + half[a]:
                k |= 1 << a
        return k


def child_index(parent_index: int, k: int) -> int:
    """Breadth-first slot of child octant k in the complete-tree layout."""
    return 8 * parent_index + 1 + k


def parent_index(index: int) -> int:
    if index == 0:
        raise ValueError("root has no parent")
    return (index - 1) // 8
