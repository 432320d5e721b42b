import { describe, expect, it } from "vitest";

import { OrbitCamera } from "../src/arcball.js";

describe("orbit camera", () => {
  it("starts centered in front of the volume", () => {
    const orbit = new OrbitCamera([64, 64, 64]);
    const pose = orbit.pose();
    expect(pose.look_at).toEqual([32, 32, 32]);
    expect(pose.position[0]).toBeCloseTo(32);
    expect(pose.position[1]).toBeCloseTo(32);
    expect(pose.position[2]).toBeCloseTo(32 - 160);
  });

  it("keeps a constant distance to the center while orbiting", () => {
    const orbit = new OrbitCamera([64, 64, 64]);
    const distance = () => {
      const { position, look_at } = orbit.pose();
      return Math.hypot(position[0] - look_at[0], position[1] - look_at[1],
                        position[2] - look_at[2]);
    };
    const start = distance();
    for (let i = 0; i < 17; i++) {
      orbit.drag(23, -11);
      expect(distance()).toBeCloseTo(start, 9);
    }
  });

  it("a full-width drag sweep returns to the start azimuth", () => {
    const orbit = new OrbitCamera([64, 64, 64], [256, 256]);
    const before = orbit.pose().position;
    orbit.drag(512, 0); // 2 * viewport width = 360 degrees
    const after = orbit.pose().position;
    expect(after[0]).toBeCloseTo(before[0], 6);
    expect(after[2]).toBeCloseTo(before[2], 6);
  });

  it("clamps the polar angle away from the poles", () => {
    const orbit = new OrbitCamera([64, 64, 64]);
    orbit.drag(0, 100000);
    expect(orbit.polar).toBeLessThan(Math.PI);
    orbit.drag(0, -200000);
    expect(orbit.polar).toBeGreaterThan(0);
  });

  it("dolly scales the radius and never collapses it", () => {
    const orbit = new OrbitCamera([64, 64, 64]);
    const start = orbit.radius;
    orbit.dolly(0.5);
    expect(orbit.radius).toBeCloseTo(start / 2);
    for (let i = 0; i < 200; i++) {
      orbit.dolly(0.1);
    }
    expect(orbit.radius).toBeGreaterThan(0);
  });
});
