from .camera import Camera
from .core import RenderCounters, compute_ray_bounds, image_to_rgba8
from .oracle import ReferenceRenderer, render_reference
from .raycast import OutOfCoreRenderer, RefinementSession, optimal_lod
from .settings import ClipPlane, ClipSet, RenderSettings, Scene
from .transfer import TransferFunction

__all__ = [
    "Camera",
    "ClipPlane",
    "ClipSet",
    "OutOfCoreRenderer",
    "ReferenceRenderer",
    "RefinementSession",
    "RenderCounters",
    "RenderSettings",
    "Scene",
    "TransferFunction",
    "compute_ray_bounds",
    "image_to_rgba8",
    "optimal_lod",
    "render_reference",
]
