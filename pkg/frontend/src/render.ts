// BEV scene as a display list. `sceneOps` is pure — every op it emits
// carries a `source` pointing back at the message entry it came from, so
// tests can check that nothing on screen was fabricated. `paint` replays
// the list onto a canvas 2D context.

import type { Box3, FramePayload } from './protocol.js'
import type { GridSpec, Pose } from './ego.js'
import { worldToGrid } from './ego.js'
import type { View } from './transform.js'
import { gridToPixel } from './transform.js'

export const BASE_COLOR = '#4cc9f0'
export const PROMPT_COLOR = '#f72585'
export const TRUTH_COLOR = '#8d99ae'
export const MISS_COLOR = '#ffb703'
export const GRID_COLOR = '#2b2d42'

// the service counts a truth as covered within this center distance (m)
export const COVER_RADIUS_M = 2.0

export interface Pt {
  x: number
  y: number
}

export type BoxSource =
  | { role: 'detection'; index: number; provenance: string }
  | { role: 'truth'; index: number; entityId: string }

export type DrawOp =
  | { kind: 'clear' }
  | { kind: 'grid' }
  | {
      kind: 'poly'
      points: Pt[]
      color: string
      width: number
      dash: number[]
      alpha: number
      source: BoxSource
    }
  | { kind: 'dot'; x: number; y: number; r: number; color: string; source: BoxSource }

export interface Scene {
  grid: GridSpec
  view: View
  pose: Pose
}

/** World-frame footprint corners (counter-clockwise). */
export function footprintCorners(box: Box3): [number, number][] {
  const [cx, cy] = box.center
  const l = box.size[0] / 2
  const w = box.size[1] / 2
  const c = Math.cos(box.yaw)
  const s = Math.sin(box.yaw)
  const local: [number, number][] = [
    [l, w],
    [-l, w],
    [-l, -w],
    [l, -w],
  ]
  return local.map(([x, y]) => [cx + c * x - s * y, cy + s * x + c * y])
}

function boxPixels(scene: Scene, box: Box3): Pt[] {
  return footprintCorners(box).map(([wx, wy]) => {
    const { u, v } = worldToGrid(scene.pose, scene.grid, wx, wy)
    return gridToPixel(scene.view, scene.grid, u, v)
  })
}

function covered(snapshot: FramePayload, cx: number, cy: number): boolean {
  return snapshot.detections.some(
    (d) => Math.hypot(d.box.center[0] - cx, d.box.center[1] - cy) <= COVER_RADIUS_M,
  )
}

export function sceneOps(scene: Scene, snapshot: FramePayload | null): DrawOp[] {
  const ops: DrawOp[] = [{ kind: 'clear' }, { kind: 'grid' }]
  if (snapshot === null) return ops

  // truths only when the session reveals them; a visible truth no merged
  // detection covers is the thing worth clicking, so it gets the loud color
  if (snapshot.truths !== null) {
    snapshot.truths.forEach((t, index) => {
      const missed =
        t.visible && !covered(snapshot, t.box.center[0], t.box.center[1])
      ops.push({
        kind: 'poly',
        points: boxPixels(scene, t.box),
        color: missed ? MISS_COLOR : TRUTH_COLOR,
        width: missed ? 2 : 1,
        dash: [4, 3],
        alpha: t.visible ? 0.9 : 0.35,
        source: { role: 'truth', index, entityId: t.entity_id },
      })
    })
  }

  snapshot.detections.forEach((d, index) => {
    const prompt = d.provenance.startsWith('prompt')
    const source: BoxSource = { role: 'detection', index, provenance: d.provenance }
    ops.push({
      kind: 'poly',
      points: boxPixels(scene, d.box),
      color: prompt ? PROMPT_COLOR : BASE_COLOR,
      width: 2,
      dash: [],
      alpha: 0.4 + 0.6 * Math.min(1, Math.max(0, d.confidence)),
      source,
    })
    if (prompt) {
      const { u, v } = worldToGrid(
        scene.pose, scene.grid, d.box.center[0], d.box.center[1])
      const p = gridToPixel(scene.view, scene.grid, u, v)
      ops.push({ kind: 'dot', x: p.x, y: p.y, r: 3, color: PROMPT_COLOR, source })
    }
  })
  return ops
}

/** Minimal 2D surface; CanvasRenderingContext2D satisfies it structurally. */
export interface Ctx2D {
  clearRect(x: number, y: number, w: number, h: number): void
  beginPath(): void
  moveTo(x: number, y: number): void
  lineTo(x: number, y: number): void
  closePath(): void
  stroke(): void
  fill(): void
  arc(x: number, y: number, r: number, a0: number, a1: number): void
  setLineDash(segments: number[]): void
  strokeStyle: string | CanvasGradient | CanvasPattern
  fillStyle: string | CanvasGradient | CanvasPattern
  lineWidth: number
  globalAlpha: number
}

export function paint(ctx: Ctx2D, ops: DrawOp[], scene: Scene): void {
  const { canvasW, canvasH } = scene.view
  for (const op of ops) {
    switch (op.kind) {
      case 'clear':
        ctx.globalAlpha = 1
        ctx.clearRect(0, 0, canvasW, canvasH)
        break
      case 'grid': {
        ctx.globalAlpha = 1
        ctx.strokeStyle = GRID_COLOR
        ctx.lineWidth = 1
        ctx.setLineDash([])
        const o = gridToPixel(scene.view, scene.grid, 0, 0)
        const e = gridToPixel(scene.view, scene.grid, scene.grid.w, scene.grid.h)
        ctx.beginPath()
        ctx.moveTo(o.x, o.y)
        ctx.lineTo(e.x, o.y)
        ctx.lineTo(e.x, e.y)
        ctx.lineTo(o.x, e.y)
        ctx.closePath()
        ctx.stroke()
        const c = gridToPixel(
          scene.view, scene.grid, scene.grid.w / 2, scene.grid.h / 2)
        ctx.beginPath()
        ctx.moveTo(c.x - 6, c.y)
        ctx.lineTo(c.x + 6, c.y)
        ctx.moveTo(c.x, c.y - 6)
        ctx.lineTo(c.x, c.y + 6)
        ctx.stroke()
        break
      }
      case 'poly': {
        const [first, ...rest] = op.points
        if (!first) break
        ctx.globalAlpha = op.alpha
        ctx.strokeStyle = op.color
        ctx.lineWidth = op.width
        ctx.setLineDash(op.dash)
        ctx.beginPath()
        ctx.moveTo(first.x, first.y)
        for (const p of rest) ctx.lineTo(p.x, p.y)
        ctx.closePath()
        ctx.stroke()
        break
      }
      case 'dot':
        ctx.globalAlpha = 1
        ctx.fillStyle = op.color
        ctx.setLineDash([])
        ctx.beginPath()
        ctx.arc(op.x, op.y, op.r, 0, Math.PI * 2)
        ctx.fill()
        break
    }
  }
  ctx.globalAlpha = 1
}
