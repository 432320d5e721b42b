/** Editable per-channel transfer function: a 1D gradient with draggable
 * handles. Control points map normalized intensity to RGBA; the model keeps
 * them sorted, clamped to the unit square, and never fewer than two.
 */

import type { TfPoint } from "./protocol.js";

export interface ControlPoint {
  intensity: number;
  r: number;
  g: number;
  b: number;
  a: number;
}

export class TransferFunctionModel {
  points: ControlPoint[];

  constructor(points?: ControlPoint[]) {
    this.points = points ? points.map((p) => ({ ...p })) : [
      { intensity: 0, r: 0, g: 0, b: 0, a: 0 },
      { intensity: 1, r: 1, g: 1, b: 1, a: 0.8 },
    ];
    if (this.points.length < 2) {
      throw new Error("a transfer function needs at least 2 control points");
    }
    this.sort();
  }

  static ramp(r: number, g: number, b: number, maxAlpha = 0.8): TransferFunctionModel {
    return new TransferFunctionModel([
      { intensity: 0, r: 0, g: 0, b: 0, a: 0 },
      { intensity: 1, r, g, b, a: maxAlpha },
    ]);
  }

  private sort(): void {
    this.points.sort((a, b) => a.intensity - b.intensity);
  }

  addPoint(point: ControlPoint): number {
    const clamped = clampPoint(point);
    this.points.push(clamped);
    this.sort();
    return this.points.indexOf(clamped);
  }

  /** Move a handle; intensity stays within its neighbors so order holds. */
  movePoint(index: number, intensity: number, alpha: number): void {
    const lo = index > 0 ? this.points[index - 1].intensity : 0;
    const hi = index < this.points.length - 1 ? this.points[index + 1].intensity : 1;
    this.points[index].intensity = clamp01(Math.min(hi, Math.max(lo, intensity)));
    this.points[index].a = clamp01(alpha);
  }

  setColor(index: number, r: number, g: number, b: number): void {
    Object.assign(this.points[index], { r: clamp01(r), g: clamp01(g), b: clamp01(b) });
  }

  removePoint(index: number): boolean {
    if (this.points.length <= 2) {
      return false; // invariant: at least two control points
    }
    this.points.splice(index, 1);
    return true;
  }

  /** Nearest handle within a pick radius, or -1. */
  pick(intensity: number, alpha: number, radius = 0.05): number {
    let best = -1;
    let bestDist = radius;
    this.points.forEach((p, i) => {
      const d = Math.hypot(p.intensity - intensity, p.a - alpha);
      if (d <= bestDist) {
        best = i;
        bestDist = d;
      }
    });
    return best;
  }

  /** Piecewise-linear alpha at a normalized intensity (for drawing). */
  alphaAt(x: number): number {
    const pts = this.points;
    if (x <= pts[0].intensity) return pts[0].a;
    for (let i = 1; i < pts.length; i++) {
      if (x <= pts[i].intensity) {
        const span = pts[i].intensity - pts[i - 1].intensity;
        const t = span > 0 ? (x - pts[i - 1].intensity) / span : 1;
        return pts[i - 1].a + t * (pts[i].a - pts[i - 1].a);
      }
    }
    return pts[pts.length - 1].a;
  }

  toRows(): TfPoint[] {
    return this.points.map((p) => [p.intensity, p.r, p.g, p.b, p.a] as TfPoint);
  }

  static fromRows(rows: TfPoint[]): TransferFunctionModel {
    return new TransferFunctionModel(
      rows.map(([intensity, r, g, b, a]) => ({ intensity, r, g, b, a })));
  }

  /** CSS gradient stops for the editor background. */
  gradientStops(): string[] {
    return this.points.map((p) =>
      `rgba(${ch(p.r)},${ch(p.g)},${ch(p.b)},${p.a.toFixed(3)}) ${(p.intensity * 100).toFixed(1)}%`);
  }
}

function clamp01(v: number): number {
  return Math.min(1, Math.max(0, v));
}

function clampPoint(p: ControlPoint): ControlPoint {
  return {
    intensity: clamp01(p.intensity),
    r: clamp01(p.r),
    g: clamp01(p.g),
    b: clamp01(p.b),
    a: clamp01(p.a),
  };
}

function ch(v: number): number {
  return Math.round(clamp01(v) * 255);
}
