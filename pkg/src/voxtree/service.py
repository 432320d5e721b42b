"""Interactive frame service: streams rendered frames to viewers and accepts
camera/transfer-function/clip/mode changes and ingest control.

One render loop drives the engine: scene changes trigger full-frame passes
(repeated while bricks are still arriving, so quality improves monotonically),
idle scenes refine progressively, and the refined image replaces the
displayed one only when complete. Live ingest runs concurrently; its change
events are applied between passes. Slow viewers get frames dropped from a
bounded queue, never a stalled render loop. Every control message is
answered with an ack/nack echoing its id.

Wire format: text messages are JSON controls/status; binary frames carry a
16-byte header (frame id, width, height, pixel-format code; format 1 =
PNG-compressed RGBA) followed by the encoded image.
"""

from __future__ import annotations

import io
import json
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .device import DeviceState, RenderMode
from .ingest import ingest_stream
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

FRAME_HEADER = struct.Struct("<IIII")
PIXEL_FORMAT_PNG_RGBA = 1


def encode_frame(frame_id: int, image: np.ndarray) -> bytes:
    rgba = image_to_rgba8(image)
    buf = io.BytesIO()
    Image.fromarray(rgba, "RGBA").save(buf, format="PNG")
    png = buf.getvalue()
    return FRAME_HEADER.pack(frame_id, rgba.shape[1], rgba.shape[0],
                             PIXEL_FORMAT_PNG_RGBA) + png


def decode_frame(blob: bytes):
    frame_id, width, height, fmt = FRAME_HEADER.unpack_from(blob, 0)
    image = np.asarray(Image.open(io.BytesIO(blob[FRAME_HEADER.size:])))
    return frame_id, width, height, fmt, image


@dataclass
class _Client:
    queue: deque = field(default_factory=lambda: deque(maxlen=8))
    ready: threading.Event = field(default_factory=threading.Event)
    closed: bool = False

    def push(self, payload) -> None:
        self.queue.append(payload)  # bounded: oldest frame drops silently
        self.ready.set()


class FrameService:
    """Render loop + session state; transport-agnostic control handling."""

    def __init__(self, tree: Octree, *, viewport=(256, 256),
                 brick_budget_bytes: int | None = None, slot_count: int | None = None,
                 upload_budget_ms: float = 150.0, idle_sleep: float = 0.02):
        self.tree = tree
        kwargs = {}
        if brick_budget_bytes is not None:
            kwargs["brick_budget_bytes"] = brick_budget_bytes
        if slot_count is not None:
            kwargs["slot_count"] = slot_count
        self.device = DeviceState(tree, **kwargs)
        self.renderer = OutOfCoreRenderer(self.device)
        self.upload_budget_ms = upload_budget_ms
        self.idle_sleep = idle_sleep

        desc = tree.descriptor
        center = tuple(d * s / 2 for d, s in zip(desc.dims, desc.spacing))
        extent = max(d * s for d, s in zip(desc.dims, desc.spacing))
        self._lock = threading.Lock()
        self._camera = Camera(position=(center[0], center[1], -2.5 * extent),
                              look_at=center, up=(0, 1, 0),
                              width=viewport[0], height=viewport[1])
        self._tfs = [TransferFunction.ramp(max_alpha=0.8)
                     for _ in range(desc.channels)]
        self._clips = ClipSet()
        self._settings = RenderSettings(strategy="refinement")
        self._scene_version = 0
        self._rendered_version = -1

        self._session = None
        self._fullframe_stable = False
        self.frame_id = 0
        self.refinement_complete = False
        self._clients: list[_Client] = []
        self._stop = threading.Event()
        self._ingest_abort = threading.Event()
        self._ingest_thread: threading.Thread | None = None
        self._render_thread: threading.Thread | None = None

    # -- scene state ---------------------------------------------------------

    def _bump(self) -> None:
        self._scene_version += 1

    def current_scene(self) -> Scene:
        with self._lock:
            return Scene(camera=self._camera, settings=self._settings,
                         transfer_functions=list(self._tfs), clips=self._clips)

    # -- control messages ------------------------------------------------------

    def handle_control(self, message: str) -> dict:
        """Apply one JSON control message; returns the ack/nack reply."""
        try:
            msg = json.loads(message)
            if not isinstance(msg, dict) or "type" not in msg:
                raise ValueError("control message must be an object with a type")
            msg_id = msg.get("id")
            kind = msg["type"]
            with self._lock:
                if kind == "camera":
                    cam = self._camera
                    self._camera = Camera(
                        position=tuple(msg.get("position", cam.position)),
                        look_at=tuple(msg.get("look_at", cam.look_at)),
                        up=tuple(msg.get("up", cam.up)),
                        fov_y=float(np.deg2rad(msg["fov_deg"])) if "fov_deg" in msg
                        else cam.fov_y,
                        width=int(msg.get("viewport", [cam.width, cam.height])[0]),
                        height=int(msg.get("viewport", [cam.width, cam.height])[1]),
                    )
                elif kind == "transfer_function":
                    channel = int(msg["channel"])
                    if not 0 <= channel < self.tree.descriptor.channels:
                        raise ValueError(f"channel {channel} out of range")
                    self._tfs[channel] = TransferFunction(msg["points"])
                elif kind == "clip_planes":
                    planes = tuple(ClipPlane(tuple(p[:3]), float(p[3]))
                                   for p in msg.get("planes", []))
                    self._clips = ClipSet(planes)
                elif kind == "mode":
                    self._settings = RenderSettings(
                        mode=msg["mode"], strategy=self._settings.strategy,
                        sampling_step=self._settings.sampling_step,
                        early_termination_alpha=self._settings.early_termination_alpha,
                        lod_bias=self._settings.lod_bias)
                elif kind == "strategy":
                    self._settings = RenderSettings(
                        mode=self._settings.mode, strategy=msg["strategy"],
                        sampling_step=self._settings.sampling_step,
                        early_termination_alpha=self._settings.early_termination_alpha,
                        lod_bias=self._settings.lod_bias)
                elif kind == "reset_refinement":
                    pass  # bumping the version below restarts refinement
                elif kind == "abort_ingest":
                    self._ingest_abort.set()
                elif kind == "ping":
                    return {"type": "ack", "id": msg_id}
                elif kind == "get_settings":
                    return {"type": "settings", "id": msg_id, **self._settings_dict()}
                else:
                    raise ValueError(f"unknown control type {kind!r}")
                self._bump()
            return {"type": "ack", "id": msg_id}
        except Exception as exc:  # NACK, never drop the connection
            return {"type": "nack", "id": locals().get("msg", {}).get("id")
                    if isinstance(locals().get("msg"), dict) else None,
                    "error": str(exc)}

    def _settings_dict(self) -> dict:
        return {
            "camera": {"position": list(self._camera.position),
                       "look_at": list(self._camera.look_at),
                       "up": list(self._camera.up),
                       "fov_deg": float(np.rad2deg(self._camera.fov_y)),
                       "viewport": [self._camera.width, self._camera.height]},
            "mode": self._settings.mode,
            "strategy": self._settings.strategy,
            "transfer_functions": [tf.control_points() for tf in self._tfs],
            "clip_planes": [[*p.normal, p.offset] for p in self._clips],
        }

    # -- ingest -------------------------------------------------------------------

    def attach_ingest(self, stream) -> threading.Thread:
        """Consume a VSTR slab stream concurrently with rendering."""
        def run():
            ingest_stream(stream, self.tree,
                          should_stop=self._ingest_abort.is_set)

        self._ingest_thread = threading.Thread(target=run, name="ingest",
                                               daemon=True)
        self._ingest_thread.start()
        return self._ingest_thread

    @property
    def ingest_active(self) -> bool:
        return self._ingest_thread is not None and self._ingest_thread.is_alive()

    def construction_progress(self) -> float:
        desc = self.tree.descriptor
        total = desc.voxel_count * desc.channels
        return min(100.0, 100.0 * self.tree.inserted_voxels / total)

    # -- render loop ------------------------------------------------------------------

    def step(self) -> bool:
        """One iteration of the render loop; returns True if a frame went out."""
        events = self.tree.drain_events()
        data_changed = bool(events)
        if events:
            self.device.apply_events(events)

        scene = self.current_scene()
        with self._lock:
            version = self._scene_version
        scene_changed = version != self._rendered_version

        if scene_changed or data_changed:
            self._session = None
            self._fullframe_stable = False
            self.refinement_complete = False
            self._rendered_version = version

        if not self._fullframe_stable:
            image, counters = self.renderer.render_fullframe(scene)
            plan = self.device.process_flags(RenderMode.FULLFRAME)
            uploaded = self.device.upload_bricks(plan, self.upload_budget_ms)
            self._fullframe_stable = counters.bricks_requested == 0 and uploaded == 0
            self._broadcast(image, scene)
            return True

        if self._settings.strategy == "refinement" and not self.refinement_complete:
            if self._session is None:
                self._session = self.renderer.start_refinement(scene)
            complete = self._session.run_pass()
            if complete:
                self.refinement_complete = True
                self._broadcast(self._session.image(), scene)
                return True
            plan = self.device.process_flags(RenderMode.REFINEMENT)
            self.device.upload_bricks(plan, self.upload_budget_ms)
            self._send_status(scene)
            return False

        return False

    def _broadcast(self, image: np.ndarray, scene: Scene) -> None:
        self.frame_id += 1
        payload = encode_frame(self.frame_id, image)
        status = self._status_json()
        for client in list(self._clients):
            client.push(payload)
            client.push(status)

    def _send_status(self, scene: Scene) -> None:
        status = self._status_json()
        for client in list(self._clients):
            client.push(status)

    def _status_json(self) -> str:
        return json.dumps({
            "type": "status",
            "frame_id": self.frame_id,
            "construction_pct": round(self.construction_progress(), 2),
            "bricks_resident": self.device.resident_bricks,
            "refinement_complete": self.refinement_complete,
            "ingest_active": self.ingest_active,
            "mode": self._settings.mode,
            "strategy": self._settings.strategy,
        })

    def run(self) -> None:
        while not self._stop.is_set():
            produced = self.step()
            if not produced and not self.ingest_active:
                time.sleep(self.idle_sleep)

    def start(self) -> None:
        self._render_thread = threading.Thread(target=self.run, name="render-loop",
                                               daemon=True)
        self._render_thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._ingest_abort.set()
        if self._render_thread is not None:
            self._render_thread.join(timeout=5)

    # -- clients ---------------------------------------------------------------------

    def register_client(self) -> _Client:
        client = _Client()
        self._clients.append(client)
        with self._lock:
            self._bump()  # wake the loop into producing a fresh frame
        return client

    def unregister_client(self, client: _Client) -> None:
        client.closed = True
        if client in self._clients:
            self._clients.remove(client)


def serve(service: FrameService, host: str = "127.0.0.1", port: int = 8765):
    """Blocking websocket front end for a :class:`FrameService`."""
    from websockets.sync.server import serve as ws_serve

    def handler(connection):
        client = service.register_client()

        def sender():
            while not client.closed:
                if not client.ready.wait(timeout=0.5):
                    continue
                while client.queue:
                    try:
                        connection.send(client.queue.popleft())
                    except Exception:
                        return
                client.ready.clear()

        thread = threading.Thread(target=sender, daemon=True)
        thread.start()
        try:
            for message in connection:
                if isinstance(message, bytes):
                    continue
                reply = service.handle_control(message)
                connection.send(json.dumps(reply))
        finally:
            service.unregister_client(client)

    return ws_serve(handler, host, port)
