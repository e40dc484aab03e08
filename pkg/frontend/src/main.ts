// DOM wiring: one state object, one reducer, one render loop. Everything
// the page shows comes from `ViewState`; every mutation goes out through
// `SessionClient`.

import { createSession, getInfo, getScenarios, SessionClient } from './client.js'
import { egoModelFrom, egoPose, STATIC_EGO, type EgoModel, type GridSpec } from './ego.js'
import type { ScenarioPreset } from './protocol.js'
import { paint, sceneOps, type Scene } from './render.js'
import { sparklinePath } from './sparkline.js'
import { defaultView, panBy, pixelToGrid, zoomAt, type View } from './transform.js'
import { canClick, initialState, reduce, type ViewEvent, type ViewState } from './view.js'

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id)
  if (!node) throw new Error(`missing #${id}`)
  return node as T
}

const canvas = el<HTMLCanvasElement>('bev')
const ctx = canvas.getContext('2d')!
const baseInput = el<HTMLInputElement>('base-url')
const presetSelect = el<HTMLSelectElement>('preset')
const staleBanner = el<HTMLElement>('stale')
const ticker = el<HTMLElement>('ticker')
const clickLog = el<HTMLElement>('click-log')
const bufferList = el<HTMLElement>('buffer-list')
const evictionList = el<HTMLElement>('evictions')
const errorBox = el<HTMLElement>('error')
const speedSlider = el<HTMLInputElement>('speed')
const revealBox = el<HTMLInputElement>('reveal')

let state: ViewState = initialState()
let view: View = defaultView(canvas.width, canvas.height)
let grid: GridSpec = { w: 64, h: 64, extent: 100 }
let ego: EgoModel = STATIC_EGO
let presets: ScenarioPreset[] = []
let dirty = true

const client = new SessionClient(baseInput.value, dispatch)

function dispatch(ev: ViewEvent): void {
  state = reduce(state, ev)
  dirty = true
}

function scene(): Scene {
  return { grid, view, pose: egoPose(ego, Math.max(0, state.frame)) }
}

function esc(s: string): string {
  return s.replace(/[&<>"]/g, (c) =>
    c === '&' ? '&amp;' : c === '<' ? '&lt;' : c === '>' ? '&gt;' : '&quot;')
}

function renderPanels(): void {
  staleBanner.hidden = !state.stale
  canvas.classList.toggle('disabled', !canClick(state))

  const m = state.series[state.series.length - 1]
  ticker.innerHTML = m
    ? `frame <b>${state.frame}</b>/${state.nFrames - 1}` +
      ` · recall now <b>${m.frameRecall.toFixed(2)}</b>` +
      ` · mean <b>${m.meanRecall.toFixed(2)}</b>` +
      ` · det/frame <b>${m.meanDetections.toFixed(1)}</b>` +
      ` · clicks <b>${m.clicks}</b>` +
      ` · buffer <b>${state.bufferSize}</b>/${state.bufferCapacity}`
    : 'no frames yet — press step or resume'

  clickLog.textContent = state.lastClick
    ? `last click → ${state.lastClick.prompt_id}` +
      (state.lastClick.low_quality ? ' (fallback crop)' : '') +
      (state.lastClick.evicted ? ` · evicted ${state.lastClick.evicted}` : '')
    : ''

  const rows = state.entries.map((e) => {
    const series = state.confSeries[e.prompt_id] ?? e.history
    const path = sparklinePath(series, 72, 18)
    return (
      `<li><code>${esc(e.prompt_id)}</code> <small>${esc(e.source)}` +
      ` @${e.enqueued_at} · ${e.mean_confidence.toFixed(2)}</small>` +
      `<svg width="72" height="18"><path d="${path}" fill="none"` +
      ` stroke="#f72585" stroke-width="1.5"/></svg></li>`
    )
  })
  bufferList.innerHTML = rows.join('') || '<li class="empty">buffer empty</li>'

  evictionList.innerHTML = state.evictions
    .slice(-8)
    .map((e) => `<li>frame ${e.frame}: <code>${esc(e.id)}</code> evicted</li>`)
    .join('')

  errorBox.textContent = state.lastError
    ? `${state.lastError.code}: ${state.lastError.detail}`
    : ''
}

function frameLoop(): void {
  if (dirty) {
    dirty = false
    paint(ctx, sceneOps(scene(), state.snapshot), scene())
    renderPanels()
  }
  requestAnimationFrame(frameLoop)
}

// ------------------------------ inputs ------------------------------

canvas.addEventListener('click', (ev) => {
  if (!canClick(state)) return
  const rect = canvas.getBoundingClientRect()
  const { u, v } = pixelToGrid(
    view, grid, ev.clientX - rect.left, ev.clientY - rect.top)
  if (u < 0 || v < 0 || u > grid.w || v > grid.h) return
  client.click(u, v)
})

canvas.addEventListener('wheel', (ev) => {
  ev.preventDefault()
  const rect = canvas.getBoundingClientRect()
  view = zoomAt(view, ev.clientX - rect.left, ev.clientY - rect.top,
                ev.deltaY < 0 ? 1.2 : 1 / 1.2)
  dirty = true
})

let dragFrom: { x: number; y: number } | null = null
canvas.addEventListener('mousedown', (ev) => {
  dragFrom = { x: ev.clientX, y: ev.clientY }
})
window.addEventListener('mouseup', () => (dragFrom = null))
window.addEventListener('mousemove', (ev) => {
  if (!dragFrom) return
  // hold shift to pan so plain clicks stay clicks
  if (!ev.shiftKey) return
  view = panBy(view, ev.clientX - dragFrom.x, ev.clientY - dragFrom.y)
  dragFrom = { x: ev.clientX, y: ev.clientY }
  dirty = true
})

el<HTMLButtonElement>('step').onclick = () => client.control('step')
el<HTMLButtonElement>('resume').onclick = () => client.control('resume')
el<HTMLButtonElement>('pause').onclick = () => client.control('pause')
el<HTMLButtonElement>('dump').onclick = () => client.requestBuffer()
speedSlider.onchange = () => client.control('set_speed', Number(speedSlider.value))
revealBox.onchange = () => client.control('toggle_truth_reveal')

el<HTMLButtonElement>('new-session').onclick = async () => {
  const base = baseInput.value.replace(/\/$/, '')
  try {
    const preset = presets.find((p) => p.name === presetSelect.value)
    const created = await createSession(base, {
      preset: presetSelect.value,
      reveal_truths: revealBox.checked,
    })
    ego = preset ? egoModelFrom(preset.scenario) : STATIC_EGO
    state = initialState()
    view = defaultView(canvas.width, canvas.height)
    client.connect(created.session)
    dirty = true
  } catch (e) {
    dispatch({ kind: 'reject', reason: String(e) })
  }
}

el<HTMLButtonElement>('refresh').onclick = () => void loadService()

async function loadService(): Promise<void> {
  const base = baseInput.value.replace(/\/$/, '')
  try {
    const info = await getInfo(base)
    grid = { w: info.grid.w, h: info.grid.h, extent: info.grid.extent }
    presets = await getScenarios(base)
    presetSelect.innerHTML = presets
      .map((p) => `<option value="${esc(p.name)}">${esc(p.name)}</option>`)
      .join('')
    el<HTMLElement>('service-info').textContent =
      `protocol v${info.protocol} · grid ${info.grid.w}×${info.grid.h}` +
      ` · checkpoint ${info.checkpoint.slice(0, 8)}`
    dirty = true
  } catch (e) {
    dispatch({ kind: 'reject', reason: String(e) })
  }
}

void loadService()
frameLoop()
