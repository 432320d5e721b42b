"""Render settings, clipping planes, and the scene bundle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .transfer import TransferFunction

MAX_CLIP_PLANES = 3


@dataclass(frozen=True)
class ClipPlane:
    """Oriented half-space: a point p is kept iff dot(normal, p) <= offset."""

    normal: tuple[float, float, float]
    offset: float

    def __post_init__(self):
        n = np.linalg.norm(self.normal)
        if n == 0:
            raise ValueError("clip plane normal must be non-zero")


@dataclass(frozen=True)
class ClipSet:
    planes: tuple[ClipPlane, ...] = ()

    def __post_init__(self):
        if len(self.planes) > MAX_CLIP_PLANES:
            raise ValueError(f"at most {MAX_CLIP_PLANES} clip planes supported")

    def __iter__(self):
        return iter(self.planes)

    def __len__(self):
        return len(self.planes)


@dataclass
class RenderSettings:
    mode: str = "dvr"                   # "dvr" | "mip"
    strategy: str = "fullframe"         # "fullframe" | "refinement"
    sampling_step: float | None = None  # world units; None = half min spacing
    reference_step: float | None = None  # opacity-correction reference
    early_termination_alpha: float = 0.99
    lod_bias: float = 0.0               # 0 = projected-voxel <= pixel rule

    def __post_init__(self):
        if self.mode not in ("dvr", "mip"):
            raise ValueError(f"unknown render mode {self.mode!r}")
        if self.strategy not in ("fullframe", "refinement"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.sampling_step is not None and self.sampling_step <= 0:
            raise ValueError("sampling step must be positive")

    def resolve_step(self, spacing) -> float:
        if self.sampling_step is not None:
            return float(self.sampling_step)
        return 0.5 * min(spacing)

    def opacity_exponent(self, step: float) -> float:
        ref = self.reference_step if self.reference_step else step
        return step / ref


@dataclass
class Scene:
    camera: Camera
    settings: RenderSettings
    transfer_functions: list[TransferFunction]
    clips: ClipSet = field(default_factory=ClipSet)

    def key(self):
        """Identity of everything that invalidates a refinement cache."""
        tf_key = tuple(tuple(tf.control_points()) for tf in self.transfer_functions)
        clip_key = tuple((p.normal, p.offset) for p in self.clips)
        s = self.settings
        return (self.camera.pose_key(), s.mode, s.strategy, s.sampling_step,
                s.reference_step, s.early_termination_alpha, s.lod_bias,
                tf_key, clip_key)
