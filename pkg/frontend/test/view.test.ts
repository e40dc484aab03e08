import { describe, expect, it } from 'vitest'

import type { FramePayload, ServerMessage } from '../src/protocol.js'
import {
  canClick,
  initialState,
  MAX_SERIES,
  MAX_SPARK,
  reduce,
  type ViewState,
} from '../src/view.js'

function framePayload(over: Partial<FramePayload> = {}): FramePayload {
  return {
    detections: [],
    truths: null,
    buffer: { size: 0, capacity: 32, ids: [], confidences: {}, evicted: [] },
    metrics: {
      frames: 1,
      clicks: 0,
      frame_recall: 1,
      mean_recall: 1,
      mean_detections: 2,
    },
    playing: false,
    speed: 2,
    finished: false,
    reveal_truths: false,
    ...over,
  }
}

function frameMsg(frame: number, over: Partial<FramePayload> = {}): ServerMessage {
  return { type: 'frame', session: 's1', frame, payload: framePayload(over) }
}

function afterFrames(n: number): ViewState {
  let s = reduce(initialState(), { kind: 'socket', open: true })
  for (let f = 0; f < n; f++) s = reduce(s, { kind: 'message', msg: frameMsg(f) })
  return s
}

describe('view reducer', () => {
  it('starts stale with clicks disabled', () => {
    const s = initialState()
    expect(s.stale).toBe(true)
    expect(canClick(s)).toBe(false)
  })

  it('rendered frame index always equals the last frame message', () => {
    let s = reduce(initialState(), { kind: 'socket', open: true })
    for (const f of [0, 1, 2, 7]) {
      s = reduce(s, { kind: 'message', msg: frameMsg(f) })
      expect(s.frame).toBe(f)
      expect(s.snapshot).not.toBeNull()
    }
    expect(canClick(s)).toBe(true)
  })

  it('connection loss marks the view stale and disables clicks', () => {
    let s = afterFrames(3)
    expect(canClick(s)).toBe(true)
    s = reduce(s, { kind: 'socket', open: false })
    expect(s.stale).toBe(true)
    expect(canClick(s)).toBe(false)
    expect(s.snapshot).not.toBeNull() // last frame still shown, just stale
  })

  it('a finished session takes no more clicks', () => {
    let s = afterFrames(2)
    s = reduce(s, { kind: 'message', msg: frameMsg(2, { finished: true }) })
    expect(canClick(s)).toBe(false)
  })

  it('connect ack seeds session metadata', () => {
    let s = reduce(initialState(), { kind: 'socket', open: true })
    s = reduce(s, {
      kind: 'message',
      msg: {
        type: 'ack',
        session: 's7',
        frame: -1,
        payload: {
          op: 'connect',
          protocol: 1,
          frame: -1,
          n_frames: 40,
          playing: false,
          speed: 2,
          reveal_truths: false,
          finished: false,
        },
      },
    })
    expect(s.session).toBe('s7')
    expect(s.protocol).toBe(1)
    expect(s.nFrames).toBe(40)
    expect(s.frame).toBe(-1)
    expect(canClick(s)).toBe(false) // nothing streamed yet
  })

  it('caps the metric series', () => {
    const s = afterFrames(MAX_SERIES + 60)
    expect(s.series).toHaveLength(MAX_SERIES)
    expect(s.series[s.series.length - 1]!.frame).toBe(MAX_SERIES + 59)
  })

  it('accumulates per-prompt confidence series from frames', () => {
    let s = reduce(initialState(), { kind: 'socket', open: true })
    s = reduce(s, {
      kind: 'message',
      msg: frameMsg(0, {
        buffer: {
          size: 1, capacity: 32, ids: ['p1'],
          confidences: { p1: 0.5 }, evicted: [],
        },
      }),
    })
    s = reduce(s, {
      kind: 'message',
      msg: frameMsg(1, {
        buffer: {
          size: 1, capacity: 32, ids: ['p1'],
          confidences: { p1: 0.7 }, evicted: [],
        },
      }),
    })
    expect(s.confSeries['p1']).toEqual([0.5, 0.7])

    // an unscored live prompt reads as zero, like the buffer treats it
    s = reduce(s, {
      kind: 'message',
      msg: frameMsg(2, {
        buffer: {
          size: 1, capacity: 32, ids: ['p1'], confidences: {}, evicted: [],
        },
      }),
    })
    expect(s.confSeries['p1']).toEqual([0.5, 0.7, 0])
  })

  it('caps each confidence series', () => {
    let s = reduce(initialState(), { kind: 'socket', open: true })
    for (let f = 0; f < MAX_SPARK + 10; f++) {
      s = reduce(s, {
        kind: 'message',
        msg: frameMsg(f, {
          buffer: {
            size: 1, capacity: 32, ids: ['p1'],
            confidences: { p1: f / 100 }, evicted: [],
          },
        }),
      })
    }
    expect(s.confSeries['p1']).toHaveLength(MAX_SPARK)
  })

  it('logs evictions and stops tracking the evicted prompt', () => {
    let s = reduce(initialState(), { kind: 'socket', open: true })
    s = reduce(s, {
      kind: 'message',
      msg: frameMsg(0, {
        buffer: {
          size: 1, capacity: 32, ids: ['p1'],
          confidences: { p1: 0.4 }, evicted: [],
        },
      }),
    })
    s = reduce(s, {
      kind: 'message',
      msg: frameMsg(1, {
        buffer: {
          size: 0, capacity: 32, ids: [], confidences: {}, evicted: ['p1'],
        },
      }),
    })
    expect(s.evictions).toEqual([{ frame: 1, id: 'p1' }])
    expect(s.confSeries['p1']).toBeUndefined()
    expect(s.bufferSize).toBe(0)
  })

  it('buffer dumps replace the panel entries', () => {
    let s = afterFrames(1)
    s = reduce(s, {
      kind: 'message',
      msg: {
        type: 'buffer',
        session: 's1',
        frame: 0,
        payload: {
          size: 1,
          capacity: 32,
          entries: [
            {
              prompt_id: 'p1',
              source: 'feedback',
              enqueued_at: 0,
              history: [0, 0.8],
              mean_confidence: 0.4,
            },
          ],
        },
      },
    })
    expect(s.entries).toHaveLength(1)
    expect(s.entries[0]!.prompt_id).toBe('p1')
    expect(s.bufferCapacity).toBe(32)
  })

  it('stores protocol errors and local decode rejects', () => {
    let s = afterFrames(1)
    s = reduce(s, {
      kind: 'message',
      msg: {
        type: 'error',
        session: 's1',
        frame: 0,
        payload: { code: 'stale_click', detail: 'too old' },
      },
    })
    expect(s.lastError).toEqual({ code: 'stale_click', detail: 'too old' })
    s = reduce(s, { kind: 'reject', reason: 'unknown type "telemetry"' })
    expect(s.lastError!.code).toBe('client_decode')
  })

  it('click acks land in the click log, control acks sync playback', () => {
    let s = afterFrames(1)
    s = reduce(s, {
      kind: 'message',
      msg: {
        type: 'ack',
        session: 's1',
        frame: 0,
        payload: {
          op: 'click',
          prompt_id: 'p000-8.00-3.50',
          low_quality: false,
          box2d: { center: [8, 3.5], extent: [2.6, 1.4] },
          evicted: null,
          frame: 0,
        },
      },
    })
    expect(s.lastClick!.prompt_id).toBe('p000-8.00-3.50')

    s = reduce(s, {
      kind: 'message',
      msg: {
        type: 'ack',
        session: 's1',
        frame: 0,
        payload: {
          op: 'resume',
          frame: 0,
          playing: true,
          speed: 4,
          reveal_truths: false,
          finished: false,
        },
      },
    })
    expect(s.playing).toBe(true)
    expect(s.speed).toBe(4)
  })
})
