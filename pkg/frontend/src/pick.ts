/**
 * Screen-space point picking.
 *
 * Cloud positions are stored in the camera frame {C}; only their screen
 * projections depend on the current view. Picking therefore returns the
 * stored {C} coordinates directly, which is what makes emitted feedback
 * invariant under any orbit/pan/zoom the mentor applies.
 */

import type { Mat4, Vec3 } from "./math.js";
import { projectToScreen } from "./math.js";

export const PICK_RADIUS_PX = 8;

export interface PickResult {
  index: number;
  /** Camera-frame {C} coordinates of the picked point. */
  point: Vec3;
  distancePx: number;
}

export function pickNearestScreen(
  positions: Float32Array,
  count: number,
  viewProjection: Mat4,
  screenWidth: number,
  screenHeight: number,
  clickX: number,
  clickY: number,
  radiusPx: number = PICK_RADIUS_PX,
): PickResult | null {
  let bestIndex = -1;
  let bestDist = radiusPx;
  for (let i = 0; i < count; i++) {
    const screen = projectToScreen(
      viewProjection,
      [positions[i * 3], positions[i * 3 + 1], positions[i * 3 + 2]],
      screenWidth,
      screenHeight,
    );
    if (screen === null) continue;
    const dist = Math.hypot(screen[0] - clickX, screen[1] - clickY);
    if (dist < bestDist) {
      bestDist = dist;
      bestIndex = i;
    }
  }
  if (bestIndex < 0) return null;
  return {
    index: bestIndex,
    point: [
      positions[bestIndex * 3],
      positions[bestIndex * 3 + 1],
      positions[bestIndex * 3 + 2],
    ],
    distancePx: bestDist,
  };
}
