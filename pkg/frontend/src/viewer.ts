/** DOM wiring: canvas display, orbit/dolly input, per-channel transfer
 * function editors, clip-plane controls, DVR/MIP toggle, abort button, and
 * the status bar. All protocol/session logic lives in the tested modules;
 * this file only connects them to events and pixels.
 */

import { OrbitCamera } from "./arcball.js";
import { ClipPlanesModel, Axis } from "./clipplanes.js";
import { ControlGate } from "./ratelimit.js";
import {
  decodeFrame,
  parseServerMessage,
  StatusMessage,
} from "./protocol.js";
import { ViewerSession, RESYNC_INTERVAL_MS } from "./session.js";
import { TransferFunctionModel } from "./transfer.js";

export interface ViewerOptions {
  serverUrl: string;
  volumeExtent: [number, number, number];
  channels: number;
  canvas: HTMLCanvasElement;
  statusBar: HTMLElement;
  controlsRoot: HTMLElement;
}

const CHANNEL_COLORS: [number, number, number][] = [
  [1.0, 0.3, 0.2],
  [0.2, 1.0, 0.3],
  [0.3, 0.4, 1.0],
  [1.0, 1.0, 0.3],
];

export class ViewerApp {
  readonly session: ViewerSession;
  readonly orbit: OrbitCamera;
  readonly tfs: TransferFunctionModel[];
  readonly clips: ClipPlanesModel;
  private readonly gate: ControlGate;
  private socket: WebSocket | null = null;
  private dragging = false;
  private lastPointer: [number, number] = [0, 0];
  private mode: "dvr" | "mip" = "dvr";
  private resyncTimer: number | undefined;

  constructor(private readonly options: ViewerOptions) {
    this.orbit = new OrbitCamera(options.volumeExtent,
                                 [options.canvas.width, options.canvas.height]);
    this.tfs = Array.from({ length: options.channels }, (_, c) =>
      TransferFunctionModel.ramp(...CHANNEL_COLORS[c % CHANNEL_COLORS.length]));
    this.clips = new ClipPlanesModel(options.volumeExtent);
    this.gate = new ControlGate((text) => this.socket?.send(text));
    this.session = new ViewerSession(
      { send: (text) => this.gate.submit(kindOf(text), text) },
      {
        onFrame: (frame) => void this.drawFrame(frame.payload),
        onStatus: (status) => this.renderStatus(status),
      });
  }

  connect(): void {
    const socket = new WebSocket(this.options.serverUrl);
    socket.binaryType = "arraybuffer";
    this.socket = socket;
    socket.onopen = () => {
      this.session.send({ type: "camera", ...this.orbit.pose() });
      this.session.resync(); // fresh settings sync on every (re)connect
    };
    socket.onmessage = (event: MessageEvent) => {
      if (event.data instanceof ArrayBuffer) {
        const frame = decodeFrame(event.data);
        this.gate.onFrame();
        this.session.handleFrame(frame); // stale frames are dropped here
      } else {
        this.session.handleText(event.data, parseServerMessage(event.data));
      }
    };
    socket.onclose = () => {
      this.socket = null;
      window.clearInterval(this.resyncTimer);
      window.setTimeout(() => this.connect(), 1000);
    };
    this.bindInput();
    this.buildControls();
    this.resyncTimer = window.setInterval(() => {
      if (this.session.needsResync()) {
        this.session.resync();
      }
    }, RESYNC_INTERVAL_MS);
  }

  // -- display ---------------------------------------------------------------

  private async drawFrame(png: Uint8Array): Promise<void> {
    const canvas = this.options.canvas;
    const context = canvas.getContext("2d");
    if (!context) {
      return;
    }
    const copy = new Uint8Array(png); // detach from the websocket buffer
    const bitmap = await createImageBitmap(
      new Blob([copy.buffer as ArrayBuffer], { type: "image/png" }));
    context.clearRect(0, 0, canvas.width, canvas.height);
    context.drawImage(bitmap, 0, 0, canvas.width, canvas.height);
    bitmap.close();
  }

  private renderStatus(status: StatusMessage): void {
    const parts = [
      `frame ${status.frame_id}`,
      `construction ${status.construction_pct.toFixed(1)}%`,
      `${status.bricks_resident} bricks resident`,
      status.refinement_complete ? "refined" : "refining…",
      status.mode.toUpperCase(),
    ];
    if (status.ingest_active) {
      parts.push("scan live");
    }
    this.options.statusBar.textContent = parts.join(" · ");
  }

  // -- camera input -------------------------------------------------------------

  private bindInput(): void {
    const canvas = this.options.canvas;
    canvas.addEventListener("pointerdown", (e) => {
      this.dragging = true;
      this.lastPointer = [e.clientX, e.clientY];
      canvas.setPointerCapture(e.pointerId);
    });
    canvas.addEventListener("pointermove", (e) => {
      if (!this.dragging) {
        return;
      }
      const dx = e.clientX - this.lastPointer[0];
      const dy = e.clientY - this.lastPointer[1];
      this.lastPointer = [e.clientX, e.clientY];
      this.orbit.drag(dx, dy);
      this.sendCamera();
    });
    canvas.addEventListener("pointerup", (e) => {
      this.dragging = false;
      canvas.releasePointerCapture(e.pointerId);
      this.sendCamera(); // release restarts refinement at the final pose
    });
    canvas.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.orbit.dolly(e.deltaY > 0 ? 1.1 : 1 / 1.1);
      this.sendCamera();
    }, { passive: false });
  }

  sendCamera(): void {
    this.session.send({ type: "camera", ...this.orbit.pose() });
  }

  // -- control panel ----------------------------------------------------------------

  private buildControls(): void {
    const root = this.options.controlsRoot;
    root.replaceChildren();

    const modeButton = document.createElement("button");
    modeButton.textContent = "mode: DVR";
    modeButton.onclick = () => {
      this.mode = this.mode === "dvr" ? "mip" : "dvr";
      modeButton.textContent = `mode: ${this.mode.toUpperCase()}`;
      this.session.send({ type: "mode", mode: this.mode });
    };
    root.appendChild(modeButton);

    const abortButton = document.createElement("button");
    abortButton.textContent = "abort scan";
    abortButton.className = "abort";
    abortButton.onclick = () => this.session.send({ type: "abort_ingest" });
    root.appendChild(abortButton);

    for (let c = 0; c < this.options.channels; c++) {
      root.appendChild(this.buildTfEditor(c));
    }
    root.appendChild(this.buildClipControls());
  }

  private buildTfEditor(channel: number): HTMLElement {
    const wrap = document.createElement("div");
    wrap.className = "tf-editor";
    const label = document.createElement("div");
    label.textContent = `channel ${channel}`;
    const canvas = document.createElement("canvas");
    canvas.width = 220;
    canvas.height = 80;
    wrap.append(label, canvas);

    const model = this.tfs[channel];
    let handle = -1;
    const toLocal = (e: MouseEvent): [number, number] => {
      const rect = canvas.getBoundingClientRect();
      return [
        (e.clientX - rect.left) / rect.width,
        1 - (e.clientY - rect.top) / rect.height,
      ];
    };
    canvas.addEventListener("pointerdown", (e) => {
      const [x, a] = toLocal(e);
      handle = model.pick(x, a);
      if (handle < 0) {
        handle = model.addPoint({ intensity: x, a, ...currentColor(model) });
      }
      canvas.setPointerCapture(e.pointerId);
      this.redrawTf(canvas, model);
    });
    canvas.addEventListener("pointermove", (e) => {
      if (handle < 0) {
        return;
      }
      const [x, a] = toLocal(e);
      model.movePoint(handle, x, a);
      this.redrawTf(canvas, model);
    });
    canvas.addEventListener("pointerup", (e) => {
      if (handle >= 0) {
        this.session.send({ type: "transfer_function", channel,
                            points: model.toRows() });
      }
      handle = -1;
      canvas.releasePointerCapture(e.pointerId);
    });
    canvas.addEventListener("contextmenu", (e) => {
      e.preventDefault();
      const [x, a] = toLocal(e);
      const victim = model.pick(x, a);
      if (victim >= 0 && model.removePoint(victim)) {
        this.redrawTf(canvas, model);
        this.session.send({ type: "transfer_function", channel,
                            points: model.toRows() });
      }
    });
    this.redrawTf(canvas, model);
    return wrap;
  }

  private redrawTf(canvas: HTMLCanvasElement, model: TransferFunctionModel): void {
    const context = canvas.getContext("2d");
    if (!context) {
      return;
    }
    const { width, height } = canvas;
    context.clearRect(0, 0, width, height);
    const gradient = context.createLinearGradient(0, 0, width, 0);
    for (const point of model.points) {
      gradient.addColorStop(point.intensity,
        `rgba(${Math.round(point.r * 255)},${Math.round(point.g * 255)},` +
        `${Math.round(point.b * 255)},${point.a.toFixed(3)})`);
    }
    context.fillStyle = gradient;
    context.fillRect(0, 0, width, height);
    context.strokeStyle = "#eee";
    context.beginPath();
    model.points.forEach((p, i) => {
      const x = p.intensity * width;
      const y = (1 - p.a) * height;
      if (i === 0) {
        context.moveTo(x, y);
      } else {
        context.lineTo(x, y);
      }
    });
    context.stroke();
    for (const p of model.points) {
      context.beginPath();
      context.arc(p.intensity * width, (1 - p.a) * height, 4, 0, 2 * Math.PI);
      context.fillStyle = "#fff";
      context.fill();
    }
  }

  private buildClipControls(): HTMLElement {
    const wrap = document.createElement("div");
    wrap.className = "clip-controls";
    const label = document.createElement("div");
    label.textContent = "clip planes";
    const list = document.createElement("div");
    const addRow = document.createElement("div");
    const axisSelect = document.createElement("select");
    for (const axis of ["x", "y", "z"]) {
      const option = document.createElement("option");
      option.value = axis;
      option.textContent = axis;
      axisSelect.appendChild(option);
    }
    const addButton = document.createElement("button");
    addButton.textContent = "add plane";
    addRow.append(axisSelect, addButton);
    wrap.append(label, list, addRow);

    const sendPlanes = () =>
      this.session.send({ type: "clip_planes", planes: this.clips.toRows() });

    const rebuild = () => {
      list.replaceChildren();
      this.clips.planes.forEach((plane, index) => {
        const row = document.createElement("div");
        const slider = document.createElement("input");
        slider.type = "range";
        slider.min = "0";
        slider.max = "100";
        slider.value = String(plane.fraction * 100);
        slider.oninput = () => {
          this.clips.setFraction(index, Number(slider.value) / 100);
          sendPlanes();
        };
        const remove = document.createElement("button");
        remove.textContent = `remove ${plane.axis}`;
        remove.onclick = () => {
          this.clips.remove(index);
          rebuild();
          sendPlanes();
        };
        row.append(slider, remove);
        list.appendChild(row);
      });
    };
    addButton.onclick = () => {
      if (this.clips.add(axisSelect.value as Axis)) {
        rebuild();
        sendPlanes();
      }
    };
    return wrap;
  }
}

function currentColor(model: TransferFunctionModel) {
  const last = model.points[model.points.length - 1];
  return { r: last.r, g: last.g, b: last.b };
}

function kindOf(text: string): string {
  try {
    return String(JSON.parse(text).type ?? "unknown");
  } catch {
    return "unknown";
  }
}
