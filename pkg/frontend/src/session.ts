/** Viewer-side session state: pending control acks, frame ordering, and a
 * settings mirror that always reflects the last ACKed state. Dropped acks
 * reconverge through a periodic settings resync.
 */

import {
  AckMessage,
  CameraPose,
  ClipPlaneRow,
  ControlMessage,
  Frame,
  NackMessage,
  ServerMessage,
  SettingsMessage,
  StatusMessage,
  TfPoint,
} from "./protocol.js";

export interface SettingsMirror {
  camera: CameraPose | null;
  mode: string;
  strategy: string;
  transferFunctions: TfPoint[][];
  clipPlanes: ClipPlaneRow[];
}

export interface SessionEvents {
  onFrame?(frame: Frame): void;
  onStatus?(status: StatusMessage): void;
  onNack?(nack: NackMessage): void;
  onSettingsChanged?(mirror: SettingsMirror): void;
}

export const RESYNC_INTERVAL_MS = 5000;

export class ViewerSession {
  latestFrameId = 0;
  framesShown = 0;
  framesDropped = 0;
  lastStatus: StatusMessage | null = null;
  readonly mirror: SettingsMirror = {
    camera: null,
    mode: "dvr",
    strategy: "refinement",
    transferFunctions: [],
    clipPlanes: [],
  };

  private nextId = 1;
  private pending = new Map<number, ControlMessage>();
  private lastAckAt: number;

  constructor(private readonly transport: { send(text: string): void },
              private readonly events: SessionEvents = {},
              private readonly now: () => number = Date.now) {
    this.lastAckAt = this.now();
  }

  get pendingAcks(): number {
    return this.pending.size;
  }

  /** Assign an id, remember the message until its ack, and serialize it. */
  encode(message: ControlMessage): string {
    const id = this.nextId++;
    const withId = { ...message, id };
    this.pending.set(id, withId);
    return JSON.stringify(withId);
  }

  send(message: ControlMessage): void {
    this.transport.send(this.encode(message));
  }

  /** Binary frame arrived; returns false for stale (out-of-order) frames. */
  handleFrame(frame: Frame): boolean {
    if (frame.frameId <= this.latestFrameId) {
      this.framesDropped += 1;
      return false;
    }
    this.latestFrameId = frame.frameId;
    this.framesShown += 1;
    this.events.onFrame?.(frame);
    return true;
  }

  handleText(text: string, parsed: ServerMessage): void {
    switch (parsed.type) {
      case "ack":
        this.applyAck(parsed);
        break;
      case "nack":
        if (parsed.id !== null) {
          this.pending.delete(parsed.id);
        }
        this.events.onNack?.(parsed);
        break;
      case "status":
        this.lastStatus = parsed;
        this.events.onStatus?.(parsed);
        break;
      case "settings":
        this.applySettings(parsed);
        break;
    }
    void text;
  }

  private applyAck(ack: AckMessage): void {
    this.lastAckAt = this.now();
    if (ack.id === null) {
      return;
    }
    const message = this.pending.get(ack.id);
    if (!message) {
      return;
    }
    this.pending.delete(ack.id);
    // the mirror only ever advances to ACKed state
    switch (message.type) {
      case "camera": {
        const { position, look_at, up, fov_deg, viewport } = message;
        this.mirror.camera = { position, look_at, up, fov_deg, viewport };
        break;
      }
      case "transfer_function":
        this.mirror.transferFunctions[message.channel] = message.points;
        break;
      case "clip_planes":
        this.mirror.clipPlanes = message.planes;
        break;
      case "mode":
        this.mirror.mode = message.mode;
        break;
      case "strategy":
        this.mirror.strategy = message.strategy;
        break;
    }
    this.events.onSettingsChanged?.(this.mirror);
  }

  private applySettings(settings: SettingsMessage): void {
    this.lastAckAt = this.now();
    if (settings.id !== null) {
      this.pending.delete(settings.id);
    }
    this.mirror.camera = settings.camera;
    this.mirror.mode = settings.mode;
    this.mirror.strategy = settings.strategy;
    this.mirror.transferFunctions = settings.transfer_functions;
    this.mirror.clipPlanes = settings.clip_planes;
    this.events.onSettingsChanged?.(this.mirror);
  }

  /** A resync is due when acks went missing for a full interval. */
  needsResync(): boolean {
    return this.pending.size > 0 &&
      this.now() - this.lastAckAt > RESYNC_INTERVAL_MS;
  }

  resync(): void {
    this.pending.clear();
    this.lastAckAt = this.now(); // restart the silence clock
    this.send({ type: "get_settings" });
  }
}
