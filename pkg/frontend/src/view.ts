// Pure view-state reducer. The UI never fabricates state: everything here
// is copied from decoded wire messages (or the socket's own lifecycle),
// and rendering reads only this state.

import type {
  AckPayload,
  BufferEntry,
  ClickAck,
  FramePayload,
  ServerMessage,
} from './protocol.js'

export interface MetricPoint {
  frame: number
  frameRecall: number
  meanRecall: number
  meanDetections: number
  clicks: number
}

export interface Eviction {
  frame: number
  id: string
}

export interface ViewState {
  session: string | null
  protocol: number | null
  frame: number // always the last `frame` message's index
  nFrames: number
  playing: boolean
  speed: number
  revealTruths: boolean
  finished: boolean
  stale: boolean // no live connection; clicks are disabled
  snapshot: FramePayload | null
  entries: BufferEntry[] // last authoritative buffer dump
  bufferSize: number
  bufferCapacity: number
  confSeries: Record<string, number[]> // per-prompt confidence, from frames
  evictions: Eviction[]
  series: MetricPoint[]
  lastClick: ClickAck | null
  lastError: { code: string; detail: string } | null
}

export const MAX_SERIES = 240
export const MAX_SPARK = 60
export const MAX_EVICTIONS = 50

export type ViewEvent =
  | { kind: 'socket'; open: boolean }
  | { kind: 'reject'; reason: string }
  | { kind: 'message'; msg: ServerMessage }

export function initialState(): ViewState {
  return {
    session: null,
    protocol: null,
    frame: -1,
    nFrames: 0,
    playing: false,
    speed: 2.0,
    revealTruths: false,
    finished: false,
    stale: true,
    snapshot: null,
    entries: [],
    bufferSize: 0,
    bufferCapacity: 0,
    confSeries: {},
    evictions: [],
    series: [],
    lastClick: null,
    lastError: null,
  }
}

export function canClick(s: ViewState): boolean {
  return !s.stale && s.frame >= 0 && !s.finished
}

function cap<T>(xs: T[], n: number): T[] {
  return xs.length > n ? xs.slice(xs.length - n) : xs
}

function applyFrame(s: ViewState, session: string, frame: number,
                    p: FramePayload): ViewState {
  const confSeries: Record<string, number[]> = {}
  for (const id of p.buffer.ids) {
    const prev = s.confSeries[id] ?? []
    confSeries[id] = cap([...prev, p.buffer.confidences[id] ?? 0], MAX_SPARK)
  }
  const evictions = cap(
    [...s.evictions, ...p.buffer.evicted.map((id) => ({ frame, id }))],
    MAX_EVICTIONS,
  )
  const point: MetricPoint = {
    frame,
    frameRecall: p.metrics.frame_recall,
    meanRecall: p.metrics.mean_recall,
    meanDetections: p.metrics.mean_detections,
    clicks: p.metrics.clicks,
  }
  return {
    ...s,
    session,
    frame,
    snapshot: p,
    playing: p.playing,
    speed: p.speed,
    revealTruths: p.reveal_truths,
    finished: p.finished,
    bufferSize: p.buffer.size,
    bufferCapacity: p.buffer.capacity,
    confSeries,
    evictions,
    series: cap([...s.series, point], MAX_SERIES),
  }
}

function applyAck(s: ViewState, session: string, ack: AckPayload): ViewState {
  if (ack.op === 'connect') {
    return {
      ...s,
      session,
      protocol: ack.protocol,
      frame: ack.frame,
      nFrames: ack.n_frames,
      playing: ack.playing,
      speed: ack.speed,
      revealTruths: ack.reveal_truths,
      finished: ack.finished,
    }
  }
  if (ack.op === 'click') {
    return { ...s, session, lastClick: ack }
  }
  return {
    ...s,
    session,
    playing: ack.playing,
    speed: ack.speed,
    revealTruths: ack.reveal_truths,
    finished: ack.finished,
  }
}

export function reduce(s: ViewState, ev: ViewEvent): ViewState {
  if (ev.kind === 'socket') {
    return { ...s, stale: !ev.open }
  }
  if (ev.kind === 'reject') {
    return { ...s, lastError: { code: 'client_decode', detail: ev.reason } }
  }
  const m = ev.msg
  switch (m.type) {
    case 'frame':
      return applyFrame(s, m.session, m.frame, m.payload)
    case 'ack':
      return applyAck(s, m.session, m.payload)
    case 'buffer':
      return {
        ...s,
        session: m.session,
        entries: m.payload.entries,
        bufferSize: m.payload.size,
        bufferCapacity: m.payload.capacity,
      }
    case 'error':
      return { ...s, lastError: m.payload }
  }
}
