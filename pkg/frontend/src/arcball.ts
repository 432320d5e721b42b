/** Arcball-style orbit camera around the volume center, plus dolly.
 * Matches the benchmark's 360-degree orbit semantics: azimuth sweeps the
 * horizontal circle, polar angle is clamped away from the poles.
 */

import type { CameraPose } from "./protocol.js";

const POLE_EPSILON = 0.05;

export class OrbitCamera {
  azimuth = 0;
  polar = Math.PI / 2;
  radius: number;
  readonly center: [number, number, number];
  fovDeg = 45;
  viewport: [number, number];

  constructor(volumeExtent: [number, number, number],
              viewport: [number, number] = [256, 256]) {
    this.center = [volumeExtent[0] / 2, volumeExtent[1] / 2, volumeExtent[2] / 2];
    this.radius = 2.5 * Math.max(...volumeExtent);
    this.viewport = viewport;
  }

  /** Drag by a pixel delta; a full viewport width is half an orbit. */
  drag(dxPixels: number, dyPixels: number): void {
    const [w, h] = this.viewport;
    this.azimuth = normalizeAngle(this.azimuth + (dxPixels / w) * Math.PI);
    this.polar = clamp(this.polar + (dyPixels / h) * Math.PI,
                       POLE_EPSILON, Math.PI - POLE_EPSILON);
  }

  /** Dolly by a multiplicative factor (>1 away, <1 closer). */
  dolly(factor: number): void {
    this.radius = clamp(this.radius * factor, 1e-3, 1e9);
  }

  pose(): CameraPose {
    const sinP = Math.sin(this.polar);
    const position: [number, number, number] = [
      this.center[0] + this.radius * sinP * Math.sin(this.azimuth),
      this.center[1] + this.radius * Math.cos(this.polar),
      this.center[2] - this.radius * sinP * Math.cos(this.azimuth),
    ];
    return {
      position,
      look_at: [...this.center] as [number, number, number],
      up: [0, 1, 0],
      fov_deg: this.fovDeg,
      viewport: [...this.viewport] as [number, number],
    };
  }
}

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, v));
}

function normalizeAngle(a: number): number {
  const twoPi = 2 * Math.PI;
  return ((a % twoPi) + twoPi) % twoPi;
}
