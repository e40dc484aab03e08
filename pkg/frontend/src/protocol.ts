// Codec for wire protocol v1 (docs/protocol.md in the service repo).
// Unknown fields are ignored (zod strips them); unknown message types are
// rejected without touching any state.
import { z } from 'zod'

export const PROTOCOL_VERSION = 1

const vec2 = z.tuple([z.number(), z.number()])
const vec3 = z.tuple([z.number(), z.number(), z.number()])

export const Box3Schema = z.object({
  center: vec3,
  size: vec3,
  yaw: z.number(),
})

export const DetectionSchema = z.object({
  box: Box3Schema,
  confidence: z.number(),
  provenance: z.string(),
  class_tag: z.string().nullable(),
})

export const TruthSchema = z.object({
  entity_id: z.string(),
  box: Box3Schema,
  visible: z.boolean(),
  class_tag: z.string(),
  range_m: z.number(),
})

// the lightweight buffer view carried on every frame
export const FrameBufferSchema = z.object({
  size: z.number().int(),
  capacity: z.number().int(),
  ids: z.array(z.string()),
  confidences: z.record(z.string(), z.number()),
  evicted: z.array(z.string()),
})

export const MetricsSchema = z.object({
  frames: z.number().int(),
  clicks: z.number().int(),
  frame_recall: z.number(),
  mean_recall: z.number(),
  mean_detections: z.number(),
})

export const FramePayloadSchema = z.object({
  detections: z.array(DetectionSchema),
  truths: z.array(TruthSchema).nullable(),
  buffer: FrameBufferSchema,
  metrics: MetricsSchema,
  playing: z.boolean(),
  speed: z.number(),
  finished: z.boolean(),
  reveal_truths: z.boolean(),
})

export const BufferEntrySchema = z.object({
  prompt_id: z.string(),
  source: z.string(),
  enqueued_at: z.number().int(),
  history: z.array(z.number()),
  mean_confidence: z.number(),
})

export const BufferPayloadSchema = z.object({
  size: z.number().int(),
  capacity: z.number().int(),
  entries: z.array(BufferEntrySchema),
})

export const ErrorPayloadSchema = z.object({
  code: z.string(),
  detail: z.string(),
})

export const ConnectAckSchema = z.object({
  op: z.literal('connect'),
  protocol: z.number().int(),
  frame: z.number().int(),
  n_frames: z.number().int(),
  playing: z.boolean(),
  speed: z.number(),
  reveal_truths: z.boolean(),
  finished: z.boolean(),
})

export const ClickAckSchema = z.object({
  op: z.literal('click'),
  prompt_id: z.string(),
  low_quality: z.boolean(),
  box2d: z.object({ center: vec2, extent: vec2 }),
  evicted: z.string().nullable(),
  frame: z.number().int(),
})

export const ControlAckSchema = z.object({
  op: z.enum(['pause', 'resume', 'step', 'set_speed', 'toggle_truth_reveal']),
  frame: z.number().int(),
  playing: z.boolean(),
  speed: z.number(),
  reveal_truths: z.boolean(),
  finished: z.boolean(),
})

export const AckPayloadSchema = z.union([
  ConnectAckSchema,
  ClickAckSchema,
  ControlAckSchema,
])

// plain-HTTP payloads
export const ServiceInfoSchema = z.object({
  service: z.string(),
  protocol: z.number().int(),
  checkpoint: z.string(),
  grid: z.object({ h: z.number().int(), w: z.number().int(), extent: z.number() }),
  descriptor_dim: z.number().int(),
})

export const SessionStateSchema = z.object({
  session: z.string(),
  frame: z.number().int(),
  n_frames: z.number().int(),
  playing: z.boolean(),
  finished: z.boolean(),
  speed: z.number(),
  reveal_truths: z.boolean(),
  clients: z.number().int(),
  scenario_seed: z.number().int(),
  policy: z.record(z.string(), z.unknown()),
  seed: z.number().int(),
})

export const ScenarioPresetSchema = z.object({
  name: z.string(),
  description: z.string(),
  scenario: z.record(z.string(), z.unknown()),
  policy: z.record(z.string(), z.unknown()),
  seed: z.number().int(),
})

export type Box3 = z.infer<typeof Box3Schema>
export type Detection = z.infer<typeof DetectionSchema>
export type Truth = z.infer<typeof TruthSchema>
export type FramePayload = z.infer<typeof FramePayloadSchema>
export type BufferEntry = z.infer<typeof BufferEntrySchema>
export type BufferPayload = z.infer<typeof BufferPayloadSchema>
export type ErrorPayload = z.infer<typeof ErrorPayloadSchema>
export type AckPayload = z.infer<typeof AckPayloadSchema>
export type ClickAck = z.infer<typeof ClickAckSchema>
export type ServiceInfo = z.infer<typeof ServiceInfoSchema>
export type SessionState = z.infer<typeof SessionStateSchema>
export type ScenarioPreset = z.infer<typeof ScenarioPresetSchema>

const EnvelopeSchema = z.object({
  type: z.string(),
  session: z.string(),
  frame: z.number().int(),
  payload: z.unknown(),
})

export type ServerMessage =
  | { type: 'frame'; session: string; frame: number; payload: FramePayload }
  | { type: 'ack'; session: string; frame: number; payload: AckPayload }
  | { type: 'buffer'; session: string; frame: number; payload: BufferPayload }
  | { type: 'error'; session: string; frame: number; payload: ErrorPayload }

export type DecodeResult =
  | { ok: true; msg: ServerMessage }
  | { ok: false; reason: string }

const PAYLOAD_SCHEMAS = {
  frame: FramePayloadSchema,
  ack: AckPayloadSchema,
  buffer: BufferPayloadSchema,
  error: ErrorPayloadSchema,
} as const

export function decodeServer(raw: string): DecodeResult {
  let doc: unknown
  try {
    doc = JSON.parse(raw)
  } catch {
    return { ok: false, reason: 'not JSON' }
  }
  const env = EnvelopeSchema.safeParse(doc)
  if (!env.success) {
    return { ok: false, reason: 'bad envelope' }
  }
  const { type, session, frame, payload } = env.data
  if (!(type in PAYLOAD_SCHEMAS)) {
    return { ok: false, reason: `unknown type ${JSON.stringify(type)}` }
  }
  const key = type as keyof typeof PAYLOAD_SCHEMAS
  const body = PAYLOAD_SCHEMAS[key].safeParse(payload)
  if (!body.success) {
    return { ok: false, reason: `bad ${key} payload` }
  }
  return {
    ok: true,
    msg: { type: key, session, frame, payload: body.data } as ServerMessage,
  }
}

// --- outbound messages; the envelope carries exactly these four fields ---

export type ControlOp =
  | 'pause'
  | 'resume'
  | 'step'
  | 'set_speed'
  | 'toggle_truth_reveal'

export function clickMessage(session: string, frame: number, u: number, v: number) {
  return { type: 'click', session, frame, payload: { u, v } }
}

export function controlMessage(
  session: string,
  frame: number,
  op: ControlOp,
  value?: number,
) {
  const payload: { op: ControlOp; value?: number } = { op }
  if (value !== undefined) payload.value = value
  return { type: 'control', session, frame, payload }
}

export function bufferRequest(session: string, frame: number) {
  return { type: 'buffer', session, frame, payload: {} }
}

export function encode(msg: object): string {
  return JSON.stringify(msg)
}
