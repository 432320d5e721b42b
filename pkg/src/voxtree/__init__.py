"""Out-of-core multi-channel volume engine.

Incrementally builds a disk-backed octree/brick-pool while data streams in
and renders it with an out-of-core software ray-caster (interactive
full-frame mode plus progressive refinement).
"""

from .volume import BrickPoolConfig, TreeGeometry, VolumeDescriptor, virtual_dims
from .paging import BrickLocator, BrickStore, StoreIOError
from .octree import ChangeEvent, ChangeKind, Octree, OctreeNode
from .device import DeviceState, NodeEntryFields, RenderMode, pack_node, unpack_node
from .serialize import load_octree, save_octree

__all__ = [
    "BrickLocator",
    "BrickPoolConfig",
    "BrickStore",
    "ChangeEvent",
    "ChangeKind",
    "DeviceState",
    "NodeEntryFields",
    "Octree",
    "OctreeNode",
    "RenderMode",
    "StoreIOError",
    "TreeGeometry",
    "VolumeDescriptor",
    "load_octree",
    "pack_node",
    "save_octree",
    "unpack_node",
    "virtual_dims",
]
