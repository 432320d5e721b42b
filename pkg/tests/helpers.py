"""Shared fixtures for renderer and integration tests."""

import numpy as np

from voxtree.device import DeviceState, RenderMode
from voxtree.octree import Octree
from voxtree.render import Camera, OutOfCoreRenderer, RenderSettings, Scene, TransferFunction
from voxtree.volume import BrickPoolConfig, VolumeDescriptor


def build_tree(tmp_path, volume, brick, *, threshold=0, fmt="uint8", bg=0,
               spacing=(1.0, 1.0, 1.0), transforms=None, name="vol",
               fill_borders=True):
    """Octree over an in-RAM volume array shaped (z, y, x[, c])."""
    if volume.ndim == 3:
        volume = volume[..., None]
    dz, dy, dx, nc = volume.shape
    desc = VolumeDescriptor(dims=(dx, dy, dz), channels=nc, sample_format=fmt,
                            spacing=spacing, background_value=bg,
                            channel_transforms=transforms)
    cfg = BrickPoolConfig(brick_dims=brick, homogeneity_threshold=threshold,
                          page_bricks=16, ram_page_limit=64)
    tree = Octree.create(desc, cfg, tmp_path / f"{name}.pool")
    for c in range(nc):
        tree.insert_block(c, (0, 0, 0), volume[..., c])
    tree.finalize()
    if fill_borders:
        tree.fill_borders()
    return tree


def make_scene(dims, *, mode="dvr", strategy="refinement", viewport=(24, 24),
               tfs=None, clips=None, channels=1, lod_bias=-64.0,
               distance_scale=2.5, early=0.99, step=None):
    """Camera in front of the volume looking at its center; strongly negative
    lod_bias forces full-resolution sampling unless overridden."""
    center = tuple(d / 2 for d in dims)
    cam = Camera(position=(center[0], center[1], -distance_scale * max(dims)),
                 look_at=center, up=(0, 1, 0), fov_y=np.pi / 4,
                 width=viewport[0], height=viewport[1])
    settings = RenderSettings(mode=mode, strategy=strategy, lod_bias=lod_bias,
                              early_termination_alpha=early, sampling_step=step)
    if tfs is None:
        tfs = [TransferFunction.ramp(max_alpha=0.6) for _ in range(channels)]
    scene = Scene(camera=cam, settings=settings, transfer_functions=tfs)
    if clips is not None:
        scene.clips = clips
    return scene


def refine_to_completion(renderer: OutOfCoreRenderer, device: DeviceState,
                         scene: Scene, budget_ms=1e9, max_passes=1000):
    session = renderer.start_refinement(scene)
    while not session.run_pass():
        plan = device.process_flags(RenderMode.REFINEMENT)
        uploaded = device.upload_bricks(plan, budget_ms=budget_ms)
        if uploaded == 0 and not plan:
            raise RuntimeError("refinement stalled: requests but nothing uploadable")
        if session.passes >= max_passes:
            raise RuntimeError(f"refinement did not converge in {max_passes} passes")
    return session
