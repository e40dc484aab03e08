// Client-side mirror of the simulator's deterministic ego track. The wire
// carries world-frame boxes but no ego pose; the ego starts at the origin
// heading +x and integrates (curvature, then speed * dt along the new
// heading) once per frame, so any client that knows the scenario's
// ego_speed / ego_curvature / dt can reproduce the pose exactly.

export interface EgoModel {
  speed: number
  curvature: number // heading drift per frame, rad
  dt: number
}

export interface Pose {
  x: number
  y: number
  heading: number
}

export interface GridSpec {
  w: number
  h: number
  extent: number // meters covered by the grid
}

export const STATIC_EGO: EgoModel = { speed: 0, curvature: 0, dt: 0.5 }

const TWO_PI = Math.PI * 2

export function wrapAngle(a: number): number {
  const m = (a + Math.PI) % TWO_PI
  return (m < 0 ? m + TWO_PI : m) - Math.PI
}

export function egoPose(model: EgoModel, frameIndex: number): Pose {
  let x = 0
  let y = 0
  let heading = 0
  for (let f = 0; f < frameIndex; f++) {
    heading = wrapAngle(heading + model.curvature)
    x += Math.cos(heading) * model.speed * model.dt
    y += Math.sin(heading) * model.speed * model.dt
  }
  return { x, y, heading }
}

export function worldToEgo(pose: Pose, x: number, y: number): [number, number] {
  const dx = x - pose.x
  const dy = y - pose.y
  const c = Math.cos(pose.heading)
  const s = Math.sin(pose.heading)
  return [c * dx + s * dy, -s * dx + c * dy]
}

export function worldToGrid(
  pose: Pose,
  grid: GridSpec,
  x: number,
  y: number,
): { u: number; v: number } {
  const [ex, ey] = worldToEgo(pose, x, y)
  return {
    u: (ex + grid.extent / 2) / (grid.extent / grid.w),
    v: (ey + grid.extent / 2) / (grid.extent / grid.h),
  }
}

/** Ego model from a scenario doc (preset or create-body); unknown keys fall
 *  back to the simulator defaults. */
export function egoModelFrom(scenario: Record<string, unknown>): EgoModel {
  const num = (k: string, dflt: number) =>
    typeof scenario[k] === 'number' ? (scenario[k] as number) : dflt
  return {
    speed: num('ego_speed', 3.0),
    curvature: num('ego_curvature', 0.0),
    dt: num('dt', 0.5),
  }
}
