"""Command-line interface: build, render, bench, serve, ingest.

A *store* is a directory holding ``octree.vxoc`` and ``bricks.vxbp``. The
RAM page cache can be capped with ``--ram-pages`` or the VOXTREE_RAM_PAGES
environment variable.
"""

from __future__ import annotations

import os
import sys
import time

import click
import numpy as np
from PIL import Image

from .device import DeviceState, RenderMode
from .ingest import RawVolumeSource, ingest_bulk, ingest_stream, read_handshake
from .octree import Octree
from .render import (
    Camera,
    ClipPlane,
    ClipSet,
    OutOfCoreRenderer,
    RenderSettings,
    Scene,
    TransferFunction,
    image_to_rgba8,
)
from .serialize import load_octree, save_octree
from .volume import BrickPoolConfig

OCTREE_FILE = "octree.vxoc"
POOL_FILE = "bricks.vxbp"
ENV_RAM_PAGES = "VOXTREE_RAM_PAGES"


def store_paths(store_dir):
    return os.path.join(store_dir, OCTREE_FILE), os.path.join(store_dir, POOL_FILE)


def resolve_ram_pages(option_value):
    if option_value is not None:
        return option_value
    env = os.environ.get(ENV_RAM_PAGES)
    return int(env) if env else None


def open_store(store_dir, ram_pages=None):
    opath, ppath = store_paths(store_dir)
    return load_octree(opath, ppath, ram_page_limit=resolve_ram_pages(ram_pages))


def default_scene(desc, viewport=(256, 256)):
    center = tuple(d * s / 2 for d, s in zip(desc.dims, desc.spacing))
    extent = max(d * s for d, s in zip(desc.dims, desc.spacing))
    camera = Camera(position=(center[0], center[1], -2.5 * extent),
                    look_at=center, up=(0, 1, 0),
                    width=viewport[0], height=viewport[1])
    tfs = [TransferFunction.ramp(max_alpha=0.8) for _ in range(desc.channels)]
    return Scene(camera=camera, settings=RenderSettings(),
                 transfer_functions=tfs)


def load_scene(path, desc, viewport=(256, 256)) -> Scene:
    """Settings file: ``key = value`` lines plus repeated ``tf.<channel>`` rows
    of (intensity, r, g, b, a) and ``clip`` rows of (nx, ny, nz, offset)."""
    scene = default_scene(desc, viewport)
    if path is None:
        return scene
    cam = {"position": scene.camera.position, "look_at": scene.camera.look_at,
           "up": scene.camera.up, "fov_deg": float(np.rad2deg(scene.camera.fov_y)),
           "viewport": (scene.camera.width, scene.camera.height)}
    settings = {"mode": "dvr", "strategy": "refinement", "sampling_step": None,
                "early_termination_alpha": 0.99, "lod_bias": 0.0}
    tf_points: dict[int, list] = {}
    clips = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise click.ClickException(f"malformed settings line: {line!r}")
            key = key.strip()
            value = value.strip()
            if key in ("camera.position", "camera.look_at", "camera.up"):
                cam[key.split(".")[1]] = tuple(float(v) for v in value.split())
            elif key == "camera.fov_deg":
                cam["fov_deg"] = float(value)
            elif key == "viewport":
                cam["viewport"] = tuple(int(v) for v in value.split())
            elif key in ("mode", "strategy"):
                settings[key] = value
            elif key in ("sampling_step", "early_termination_alpha", "lod_bias"):
                settings[key] = float(value)
            elif key == "clip":
                parts = [float(v) for v in value.split()]
                clips.append(ClipPlane(tuple(parts[:3]), parts[3]))
            elif key and key.startswith("tf."):
                channel = int(key.split(".")[1])
                tf_points.setdefault(channel, []).append(
                    tuple(float(v) for v in value.split()))
            elif key:
                raise click.ClickException(f"unknown settings key {key!r}")
    camera = Camera(position=cam["position"], look_at=cam["look_at"], up=cam["up"],
                    fov_y=float(np.deg2rad(cam["fov_deg"])),
                    width=cam["viewport"][0], height=cam["viewport"][1])
    tfs = list(scene.transfer_functions)
    for channel, points in tf_points.items():
        if not 0 <= channel < desc.channels:
            raise click.ClickException(f"tf channel {channel} out of range")
        tfs[channel] = TransferFunction(points)
    return Scene(camera=camera,
                 settings=RenderSettings(**settings),
                 transfer_functions=tfs, clips=ClipSet(tuple(clips)))


def write_png(image, path):
    Image.fromarray(image_to_rgba8(image), "RGBA").save(path, format="PNG")


@click.group()
def main():
    """Out-of-core multi-channel volume engine."""


@main.command()
@click.argument("sidecar", type=click.Path(exists=True))
@click.argument("out_dir", type=click.Path())
@click.option("--brick-dims", default="64", help="Brick resolution, e.g. 32 or 32,16,32.")
@click.option("--threshold", type=float, default=None,
              help="Absolute homogeneity threshold (default: 5% of the format range).")
@click.option("--page-bricks", type=int, default=64)
@click.option("--ram-pages", type=int, default=None)
@click.option("--workers", type=int, default=None, help="Construction threads (default: one per channel).")
def build(sidecar, out_dir, brick_dims, threshold, page_bricks, ram_pages, workers):
    """Build a store from a raw volume described by SIDECAR."""
    source = RawVolumeSource.from_sidecar(sidecar)
    parts = [int(v) for v in brick_dims.replace(",", " ").split()]
    dims = tuple(parts * 3)[:3] if len(parts) == 1 else tuple(parts)
    cfg = BrickPoolConfig(brick_dims=dims, homogeneity_threshold=threshold,
                          page_bricks=page_bricks,
                          ram_page_limit=resolve_ram_pages(ram_pages) or 64)
    os.makedirs(out_dir, exist_ok=True)
    opath, ppath = store_paths(out_dir)
    tree = Octree.create(source.descriptor, cfg, ppath + ".build")
    try:
        report = ingest_bulk(source, tree, workers=workers)
        save_octree(tree, opath, ppath)
    finally:
        tree.store.close()
        os.unlink(ppath + ".build")
    click.echo(report.summary())
    click.echo(f"store written to {out_dir}")


@main.command()
@click.argument("store_dir", type=click.Path(exists=True))
@click.option("--settings", "settings_path", type=click.Path(exists=True), default=None)
@click.option("--mode", type=click.Choice(["dvr", "mip"]), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--viewport", default="256x256")
@click.option("--brick-buffer-mb", type=float, default=512.0)
@click.option("--budget-ms", type=float, default=150.0)
@click.option("--ram-pages", type=int, default=None)
@click.option("--max-passes", type=int, default=10000)
@click.option("--raw-out", type=click.Path(), default=None,
              help="Also dump the raw 8-bit RGBA pixels to this path.")
@click.option("--dump-nodes", type=click.Path(), default=None,
              help="Debug: write the packed node buffer to this path.")
def render(store_dir, settings_path, mode, out_path, viewport, brick_buffer_mb,
           budget_ms, ram_pages, max_passes, raw_out, dump_nodes):
    """Render a store: one full-frame pass, then refinement to completion."""
    tree = open_store(store_dir, ram_pages)
    vw, vh = (int(v) for v in viewport.lower().split("x"))
    scene = load_scene(settings_path, tree.descriptor, (vw, vh))
    if mode is not None:
        scene.settings.mode = mode
    device = DeviceState(tree, brick_budget_bytes=int(brick_buffer_mb * 1024 * 1024))
    renderer = OutOfCoreRenderer(device)

    image, ff_counters = renderer.render_fullframe(scene)
    device.upload_bricks(device.process_flags(RenderMode.FULLFRAME), budget_ms)
    session = renderer.start_refinement(scene)
    while not session.run_pass():
        plan = device.process_flags(RenderMode.REFINEMENT)
        uploaded = device.upload_bricks(plan, budget_ms)
        if session.passes >= max_passes:
            raise click.ClickException("refinement did not converge")
        if uploaded == 0 and not plan and device.pending_requests == 0:
            raise click.ClickException("refinement stalled")
    image = session.image()
    write_png(image, out_path)
    if raw_out is not None:
        image_to_rgba8(image).tofile(raw_out)
    if dump_nodes is not None:
        device.dump_node_buffer(dump_nodes)
    counters = ff_counters.merged(session.counters)
    click.echo(
        f"passes={session.passes} bricks_uploaded={device.uploads} "
        f"page_faults={tree.store.page_faults} tf_lookups={counters.tf_lookups} "
        f"avg_fallbacks={counters.avg_fallbacks} samples={counters.samples}")
    tree.store.close()


@main.command()
@click.argument("store_dir", type=click.Path(exists=True))
@click.option("--frames", type=int, default=100, show_default=True)
@click.option("--orbit-degrees", type=float, default=360.0, show_default=True)
@click.option("--viewport", default="128x128")
@click.option("--brick-buffer-mb", type=float, default=512.0)
@click.option("--budget-ms", type=float, default=150.0)
@click.option("--ram-pages", type=int, default=None)
@click.option("--settings", "settings_path", type=click.Path(exists=True), default=None)
def bench(store_dir, frames, orbit_degrees, viewport, brick_buffer_mb, budget_ms,
          ram_pages, settings_path):
    """Replay a full orbit of full-frame passes and report timings."""
    tree = open_store(store_dir, ram_pages)
    desc = tree.descriptor
    vw, vh = (int(v) for v in viewport.lower().split("x"))
    scene = load_scene(settings_path, desc, (vw, vh))
    device = DeviceState(tree, brick_budget_bytes=int(brick_buffer_mb * 1024 * 1024))
    renderer = OutOfCoreRenderer(device)

    center = np.array([d * s / 2 for d, s in zip(desc.dims, desc.spacing)])
    radius = 2.5 * max(d * s for d, s in zip(desc.dims, desc.spacing))
    times = []
    fallbacks = []
    uploads_before = device.uploads
    for i in range(frames):
        angle = np.deg2rad(orbit_degrees) * i / frames
        position = center + radius * np.array([np.sin(angle), 0.0, -np.cos(angle)])
        scene.camera = Camera(position=tuple(position), look_at=tuple(center),
                              up=(0, 1, 0), fov_y=scene.camera.fov_y,
                              width=vw, height=vh)
        start = time.perf_counter()
        _, counters = renderer.render_fullframe(scene)
        times.append(time.perf_counter() - start)
        fallbacks.append(counters.avg_fallbacks)
        device.upload_bricks(device.process_flags(RenderMode.FULLFRAME), budget_ms)
    times_ms = np.asarray(times) * 1000
    click.echo(
        f"frames={frames} mean_ms={times_ms.mean():.1f} p50_ms={np.percentile(times_ms, 50):.1f} "
        f"p95_ms={np.percentile(times_ms, 95):.1f} fps={1000.0 / times_ms.mean():.2f}")
    click.echo(
        f"avg_fallbacks_first={fallbacks[0]} avg_fallbacks_last={fallbacks[-1]} "
        f"bricks_uploaded={device.uploads - uploads_before} "
        f"page_faults={tree.store.page_faults} disk_reads={tree.store.disk_reads}")
    tree.store.close()


@main.command()
@click.argument("stream", type=click.Path(exists=True, allow_dash=True))
@click.argument("out_dir", type=click.Path())
@click.option("--brick-dims", default="64")
@click.option("--threshold", type=float, default=None)
@click.option("--page-bricks", type=int, default=64)
@click.option("--ram-pages", type=int, default=None)
def ingest(stream, out_dir, brick_dims, threshold, page_bricks, ram_pages):
    """Build a store from a VSTR slab stream (file or '-' for stdin)."""
    fh = sys.stdin.buffer if stream == "-" else open(stream, "rb")
    try:
        desc = read_handshake(fh)
        parts = [int(v) for v in brick_dims.replace(",", " ").split()]
        dims = tuple(parts * 3)[:3] if len(parts) == 1 else tuple(parts)
        cfg = BrickPoolConfig(brick_dims=dims, homogeneity_threshold=threshold,
                              page_bricks=page_bricks,
                              ram_page_limit=resolve_ram_pages(ram_pages) or 64)
        os.makedirs(out_dir, exist_ok=True)
        opath, ppath = store_paths(out_dir)
        tree = Octree.create(desc, cfg, ppath + ".build")
        try:
            result = ingest_stream(fh, tree)
            save_octree(tree, opath, ppath)
        finally:
            tree.store.close()
            os.unlink(ppath + ".build")
    finally:
        if fh is not sys.stdin.buffer:
            fh.close()
    state = "aborted" if result.aborted else "complete"
    click.echo(f"ingest {state}: {result.slabs} slabs, {result.rejected} rejected, "
               f"{tree.brick_count} bricks")
    click.echo(f"store written to {out_dir}")


@main.command()
@click.argument("store_dir", type=click.Path(exists=True), required=False)
@click.option("--ingest-from", type=click.Path(exists=True), default=None,
              help="VSTR stream file to ingest live while serving.")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8765)
@click.option("--viewport", default="256x256")
@click.option("--brick-buffer-mb", type=float, default=512.0)
@click.option("--budget-ms", type=float, default=150.0)
@click.option("--ram-pages", type=int, default=None)
def serve(store_dir, ingest_from, host, port, viewport, brick_buffer_mb,
          budget_ms, ram_pages):
    """Serve frames over websockets, optionally ingesting a live stream."""
    from .service import FrameService, serve as ws_serve

    vw, vh = (int(v) for v in viewport.lower().split("x"))
    if store_dir is not None:
        tree = open_store(store_dir, ram_pages)
        stream = None
    elif ingest_from is not None:
        stream = open(ingest_from, "rb")
        desc = read_handshake(stream)
        cfg = BrickPoolConfig(ram_page_limit=resolve_ram_pages(ram_pages) or 64)
        tree = Octree.create(desc, cfg, ingest_from + ".pool")
    else:
        raise click.ClickException("provide a STORE_DIR or --ingest-from")
    service = FrameService(tree, viewport=(vw, vh),
                           brick_budget_bytes=int(brick_buffer_mb * 1024 * 1024),
                           upload_budget_ms=budget_ms)
    if stream is not None:
        service.attach_ingest(stream)
    service.start()
    click.echo(f"serving ws://{host}:{port}")
    with ws_serve(service, host, port) as server:
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            service.stop()


if __name__ == "__main__":
    main()
