// One WebSocket per session, one FIFO event stream out. All mutations go
// through the wire; nothing here touches view state directly.

import {
  bufferRequest,
  clickMessage,
  controlMessage,
  decodeServer,
  encode,
  ScenarioPresetSchema,
  ServiceInfoSchema,
  SessionStateSchema,
  type ControlOp,
  type ScenarioPreset,
  type ServiceInfo,
  type SessionState,
} from './protocol.js'
import type { ViewEvent } from './view.js'

export class SessionClient {
  private ws: WebSocket | null = null
  private session = ''
  private frame = -1

  constructor(
    private baseUrl: string,
    private onEvent: (ev: ViewEvent) => void,
  ) {}

  connect(session: string): void {
    this.close()
    this.session = session
    this.frame = -1
    const ws = new WebSocket(
      this.baseUrl.replace(/^http/, 'ws') + `/sessions/${session}/stream`,
    )
    ws.onopen = () => this.onEvent({ kind: 'socket', open: true })
    ws.onclose = () => this.onEvent({ kind: 'socket', open: false })
    ws.onmessage = (ev) => {
      const res = decodeServer(String(ev.data))
      if (!res.ok) {
        this.onEvent({ kind: 'reject', reason: res.reason })
        return
      }
      if (res.msg.type === 'frame') this.frame = res.msg.frame
      this.onEvent({ kind: 'message', msg: res.msg })
    }
    this.ws = ws
  }

  close(): void {
    if (this.ws) {
      this.ws.onclose = null
      this.ws.close()
      this.ws = null
      this.onEvent({ kind: 'socket', open: false })
    }
  }

  private send(msg: object): void {
    if (this.ws && this.ws.readyState === WebSocket.OPEN) {
      this.ws.send(encode(msg))
    }
  }

  /** Click on the frame currently displayed, in grid units. */
  click(u: number, v: number): void {
    this.send(clickMessage(this.session, this.frame, u, v))
  }

  control(op: ControlOp, value?: number): void {
    this.send(controlMessage(this.session, this.frame, op, value))
  }

  requestBuffer(): void {
    this.send(bufferRequest(this.session, this.frame))
  }
}

// ----------------------------- plain HTTP -----------------------------

export async function getInfo(baseUrl: string): Promise<ServiceInfo> {
  const r = await fetch(baseUrl + '/')
  return ServiceInfoSchema.parse(await r.json())
}

export async function getScenarios(baseUrl: string): Promise<ScenarioPreset[]> {
  const r = await fetch(baseUrl + '/scenarios')
  const doc = (await r.json()) as { scenarios: unknown[] }
  return doc.scenarios.map((s) => ScenarioPresetSchema.parse(s))
}

export async function createSession(
  baseUrl: string,
  body: object,
): Promise<SessionState> {
  const r = await fetch(baseUrl + '/sessions', {
    method: 'POST',
    headers: { 'content-type': 'application/json' },
    body: JSON.stringify(body),
  })
  if (r.status !== 201) {
    throw new Error(`create session failed: ${r.status} ${await r.text()}`)
  }
  return SessionStateSchema.parse(await r.json())
}
