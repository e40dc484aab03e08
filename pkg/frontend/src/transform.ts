// Grid <-> pixel view transform. The canvas viewport is the ego-centered
// feature grid itself: clicks divide back to grid units exactly as the
// protocol requires, whatever the zoom/pan. +u is right, +v is up (canvas
// y is flipped).

export interface GridShape {
  w: number
  h: number
}

export interface View {
  zoom: number
  panX: number // pixels
  panY: number // pixels, in the flipped (up-positive) frame
  canvasW: number
  canvasH: number
}

export function defaultView(canvasW: number, canvasH: number): View {
  return { zoom: 1, panX: 0, panY: 0, canvasW, canvasH }
}

/** Pixels per grid cell at zoom 1 (fit the whole grid). */
export function baseCell(view: View, grid: GridShape): number {
  return Math.min(view.canvasW / grid.w, view.canvasH / grid.h)
}

export function gridToPixel(
  view: View,
  grid: GridShape,
  u: number,
  v: number,
): { x: number; y: number } {
  const c = baseCell(view, grid) * view.zoom
  return {
    x: u * c + view.panX,
    y: view.canvasH - (v * c + view.panY),
  }
}

export function pixelToGrid(
  view: View,
  grid: GridShape,
  x: number,
  y: number,
): { u: number; v: number } {
  const c = baseCell(view, grid) * view.zoom
  return {
    u: (x - view.panX) / c,
    v: (view.canvasH - y - view.panY) / c,
  }
}

export function zoomAt(view: View, x: number, y: number, factor: number): View {
  // keep the grid point under the cursor fixed while zooming
  const zoom = Math.min(16, Math.max(0.25, view.zoom * factor))
  const applied = zoom / view.zoom
  return {
    ...view,
    zoom,
    panX: x - (x - view.panX) * applied,
    panY: (view.canvasH - y) - (view.canvasH - y - view.panY) * applied,
  }
}

export function panBy(view: View, dx: number, dy: number): View {
  return { ...view, panX: view.panX + dx, panY: view.panY - dy }
}
