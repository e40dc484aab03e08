// Confidence sparkline geometry for the buffer panel.

export interface Pt {
  x: number
  y: number
}

function clamp01(v: number): number {
  return Math.min(1, Math.max(0, v))
}

export function sparklinePoints(history: number[], w: number, h: number): Pt[] {
  if (history.length === 0) return []
  if (history.length === 1) {
    const y = h * (1 - clamp01(history[0]!))
    return [
      { x: 0, y },
      { x: w, y },
    ]
  }
  const step = w / (history.length - 1)
  return history.map((v, i) => ({ x: i * step, y: h * (1 - clamp01(v)) }))
}

/** SVG path ("M x y L x y ..."), empty string for an empty history. */
export function sparklinePath(history: number[], w: number, h: number): string {
  const pts = sparklinePoints(history, w, h)
  if (pts.length === 0) return ''
  const fmt = (n: number) => Math.round(n * 100) / 100
  return pts
    .map((p, i) => `${i === 0 ? 'M' : 'L'} ${fmt(p.x)} ${fmt(p.y)}`)
    .join(' ')
}
