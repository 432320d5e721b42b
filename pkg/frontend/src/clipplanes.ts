/** Up to three clip planes. The viewer offers axis-aligned presets whose
 * offset slides along the axis; a point is kept iff dot(normal, p) <= offset.
 */

import type { ClipPlaneRow } from "./protocol.js";

export const MAX_CLIP_PLANES = 3;

export type Axis = "x" | "y" | "z";

export interface ClipPlaneState {
  axis: Axis;
  /** +1 clips the high side (normal along +axis), -1 the low side. */
  sign: 1 | -1;
  /** Cut position as a fraction of the volume extent, in [0, 1]. */
  fraction: number;
}

const AXIS_INDEX: Record<Axis, number> = { x: 0, y: 1, z: 2 };

export class ClipPlanesModel {
  planes: ClipPlaneState[] = [];

  constructor(private readonly volumeExtent: [number, number, number]) {}

  add(axis: Axis, sign: 1 | -1 = 1, fraction = 0.5): boolean {
    if (this.planes.length >= MAX_CLIP_PLANES) {
      return false;
    }
    this.planes.push({ axis, sign, fraction: clamp01(fraction) });
    return true;
  }

  remove(index: number): void {
    this.planes.splice(index, 1);
  }

  setFraction(index: number, fraction: number): void {
    this.planes[index].fraction = clamp01(fraction);
  }

  toRows(): ClipPlaneRow[] {
    return this.planes.map((p) => {
      const normal: [number, number, number] = [0, 0, 0];
      normal[AXIS_INDEX[p.axis]] = p.sign;
      const offset = p.sign * p.fraction * this.volumeExtent[AXIS_INDEX[p.axis]];
      return [...normal, offset] as ClipPlaneRow;
    });
  }
}

function clamp01(v: number): number {
  return Math.min(1, Math.max(0, v));
}
