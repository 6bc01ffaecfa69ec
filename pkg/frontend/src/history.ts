/** Replayable edit log: every entry stores the operation descriptor plus the
 * seed it ran with, so reissuing it reproduces the identical cloud. */

import { ApiClient, WireCloud } from './api.js';

export type EditOperation =
  | { kind: 'resample'; sessionId: string; parts: number[] }
  | { kind: 'mix'; sessionId: string; donorSessionIds: string[]; assignment: Record<string, number> }
  | { kind: 'interpolate'; sessionId: string; part: number; targetSession: string; steps: number }
  | { kind: 'transform'; sessionId: string; constraints: Record<string, { shift?: (number | null)[]; scale?: (number | null)[] }> }
  | { kind: 'generate'; n: number };

export interface HistoryEntry {
  id: number;
  op: EditOperation;
  seed: number;
  /** key of the resulting cloud (or frame list) in the store */
  resultKey: string;
}

export async function replayEntry(
  api: ApiClient,
  entry: HistoryEntry,
): Promise<WireCloud | WireCloud[]> {
  const { op, seed } = entry;
  switch (op.kind) {
    case 'resample':
      return api.resample(op.sessionId, op.parts, seed);
    case 'mix':
      return api.mix(op.sessionId, op.donorSessionIds, op.assignment, seed);
    case 'interpolate':
      return api.interpolate(op.sessionId, op.part, op.targetSession, op.steps, seed);
    case 'transform':
      return (await api.transformEdit(op.sessionId, op.constraints, seed)).cloud;
    case 'generate':
      return api.generate(op.n, seed);
  }
}

export function cloudsEqual(a: WireCloud, b: WireCloud): boolean {
  return JSON.stringify(a) === JSON.stringify(b);
}
