/** Wire protocol shared with the frame service.
 *
 * Text messages are JSON: controls go up (each carrying an id that the
 * server echoes in an ack/nack), status notifications come down. Binary
 * messages are frames: a 16-byte little-endian header (frame id, width,
 * height, pixel format code) followed by PNG-compressed RGBA.
 */

export const FRAME_HEADER_BYTES = 16;
export const PIXEL_FORMAT_PNG_RGBA = 1;

export interface FrameHeader {
  frameId: number;
  width: number;
  height: number;
  format: number;
}

export interface Frame extends FrameHeader {
  payload: Uint8Array;
}

export function decodeFrame(buffer: ArrayBuffer): Frame {
  if (buffer.byteLength < FRAME_HEADER_BYTES) {
    throw new Error(`frame too short: ${buffer.byteLength} bytes`);
  }
  const view = new DataView(buffer);
  return {
    frameId: view.getUint32(0, true),
    width: view.getUint32(4, true),
    height: view.getUint32(8, true),
    format: view.getUint32(12, true),
    payload: new Uint8Array(buffer, FRAME_HEADER_BYTES),
  };
}

export interface CameraPose {
  position: [number, number, number];
  look_at: [number, number, number];
  up: [number, number, number];
  fov_deg?: number;
  viewport?: [number, number];
}

/** Transfer-function control point: intensity in [0,1] plus RGBA. */
export type TfPoint = [number, number, number, number, number];

/** Clip plane: normal (x, y, z) and offset; keeps dot(n, p) <= offset. */
export type ClipPlaneRow = [number, number, number, number];

export type ControlMessage =
  | ({ id?: number; type: "camera" } & CameraPose)
  | { id?: number; type: "transfer_function"; channel: number; points: TfPoint[] }
  | { id?: number; type: "clip_planes"; planes: ClipPlaneRow[] }
  | { id?: number; type: "mode"; mode: "dvr" | "mip" }
  | { id?: number; type: "strategy"; strategy: "fullframe" | "refinement" }
  | { id?: number; type: "reset_refinement" }
  | { id?: number; type: "abort_ingest" }
  | { id?: number; type: "get_settings" }
  | { id?: number; type: "ping" };

export interface StatusMessage {
  type: "status";
  frame_id: number;
  construction_pct: number;
  bricks_resident: number;
  refinement_complete: boolean;
  ingest_active: boolean;
  mode: string;
  strategy: string;
}

export interface AckMessage {
  type: "ack";
  id: number | null;
}

export interface NackMessage {
  type: "nack";
  id: number | null;
  error: string;
}

export interface SettingsMessage {
  type: "settings";
  id: number | null;
  camera: CameraPose;
  mode: string;
  strategy: string;
  transfer_functions: TfPoint[][];
  clip_planes: ClipPlaneRow[];
}

export type ServerMessage = StatusMessage | AckMessage | NackMessage | SettingsMessage;

export function parseServerMessage(text: string): ServerMessage {
  const parsed = JSON.parse(text);
  if (typeof parsed !== "object" || parsed === null || !("type" in parsed)) {
    throw new Error("malformed server message");
  }
  return parsed as ServerMessage;
}
