/** Editor state and edit dispatch. The store never mutates clouds client-side:
 * every displayed cloud is a server response. One request may be in flight at a
 * time; actions arriving meanwhile are dropped with a visible notice. */

import { ApiClient, ApiError, Meta, WireCloud } from './api.js';
import { EditOperation, HistoryEntry } from './history.js';

export interface SessionSlot {
  sessionId: string;
  label: string;
}

export interface ViewState {
  meta: Meta | null;
  /** primary session (slot 0) and optional donor session (slot 1) */
  slots: (SessionSlot | null)[];
  clouds: Map<string, WireCloud>;
  /** key into clouds currently displayed */
  displayed: string | null;
  selected: Set<number>;
  pending: EditOperation['kind'] | null;
  interpFrames: string[];
  interpPosition: number;
  seedCounter: number;
  history: HistoryEntry[];
  notice: string | null;
  lastResidual: number | null;
}

export type Listener = (state: ViewState) => void;

export class EditorStore {
  readonly state: ViewState;
  private listeners: Listener[] = [];
  private nextEntryId = 1;

  constructor(private readonly api: ApiClient, seedStart = 1) {
    this.state = {
      meta: null,
      slots: [null, null],
      clouds: new Map(),
      displayed: null,
      selected: new Set(),
      pending: null,
      interpFrames: [],
      interpPosition: 0,
      seedCounter: seedStart,
      history: [],
      notice: null,
      lastResidual: null,
    };
  }

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  private emit() {
    for (const fn of this.listeners) fn(this.state);
  }

  notice(message: string | null) {
    this.state.notice = message;
    this.emit();
  }

  async loadMeta(): Promise<Meta> {
    const meta = await this.api.meta();
    this.state.meta = meta;
    this.emit();
    return meta;
  }

  nextSeed(): number {
    return this.state.seedCounter++;
  }

  toggleSelection(part: number) {
    if (this.state.selected.has(part)) {
      this.state.selected.delete(part);
    } else {
      this.state.selected.add(part);
    }
    this.emit();
  }

  storeCloud(key: string, cloud: WireCloud, display = true) {
    this.state.clouds.set(key, cloud);
    if (display) this.state.displayed = key;
    this.emit();
  }

  async openSession(slot: number, cloud: WireCloud, label: string): Promise<string> {
    const info = await this.api.createSession(cloud);
    this.state.slots[slot] = { sessionId: info.session_id, label };
    this.storeCloud(`source:${info.session_id}`, cloud, slot === 0);
    return info.session_id;
  }

  /** Move the interpolation slider: purely local, serves the cached frame. */
  scrubInterpolation(position: number) {
    if (this.state.interpFrames.length === 0) return;
    const clamped = Math.max(0, Math.min(position, this.state.interpFrames.length - 1));
    this.state.interpPosition = clamped;
    this.state.displayed = this.state.interpFrames[clamped];
    this.emit();
  }

  /** Validate, issue the API call with an auto-incremented seed, append the
   * history entry, and display the result. Returns the entry or null when the
   * action was rejected client-side. */
  async dispatch(op: EditOperation): Promise<HistoryEntry | null> {
    if (this.state.pending !== null) {
      this.notice(`busy: ${this.state.pending} in flight, action dropped`);
      return null;
    }
    const problem = this.validate(op);
    if (problem !== null) {
      this.notice(problem);
      return null;
    }
    const seed = this.nextSeed();
    this.state.pending = op.kind;
    this.state.notice = null;
    this.emit();
    try {
      const resultKey = await this.execute(op, seed);
      const entry: HistoryEntry = { id: this.nextEntryId++, op, seed, resultKey };
      this.state.history.push(entry);
      return entry;
    } catch (err) {
      const message = err instanceof ApiError ? `server: ${err.message}` : String(err);
      this.notice(message);
      return null;
    } finally {
      this.state.pending = null;
      this.emit();
    }
  }

  private validate(op: EditOperation): string | null {
    const m = this.state.meta?.m;
    switch (op.kind) {
      case 'resample':
        if (op.parts.length === 0 && this.state.selected.size === 0) {
          return 'select at least one part to resample';
        }
        if (m !== undefined && op.parts.some((p) => p < 0 || p >= m)) {
          return 'selection outside the part range';
        }
        return null;
      case 'mix':
        if (m !== undefined && Object.keys(op.assignment).length !== m) {
          return 'assign a donor to every part';
        }
        return null;
      case 'interpolate':
        if (op.steps < 1) return 'steps must be at least 1';
        if (op.sessionId === op.targetSession) return 'pick two different sessions';
        return null;
      case 'transform': {
        const any = Object.values(op.constraints).some(
          (c) => (c.shift ?? []).some((v) => v !== null) || (c.scale ?? []).some((v) => v !== null),
        );
        return any ? null : 'no transform component set';
      }
      case 'generate':
        return op.n >= 1 ? null : 'n must be at least 1';
    }
  }

  private async execute(op: EditOperation, seed: number): Promise<string> {
    switch (op.kind) {
      case 'resample': {
        const cloud = await this.api.resample(op.sessionId, op.parts, seed);
        const key = `edit:${seed}`;
        this.storeCloud(key, cloud);
        return key;
      }
      case 'mix': {
        const cloud = await this.api.mix(op.sessionId, op.donorSessionIds, op.assignment, seed);
        const key = `mix:${seed}`;
        this.storeCloud(key, cloud);
        return key;
      }
      case 'interpolate': {
        const frames = await this.api.interpolate(op.sessionId, op.part, op.targetSession, op.steps, seed);
        this.state.interpFrames = frames.map((f, k) => {
          const key = `interp:${seed}:${k}`;
          this.state.clouds.set(key, f);
          return key;
        });
        this.state.interpPosition = 0;
        this.state.displayed = this.state.interpFrames[0];
        this.emit();
        return `interp:${seed}:0`;
      }
      case 'transform': {
        const result = await this.api.transformEdit(op.sessionId, op.constraints, seed);
        this.state.lastResidual = result.residual;
        const key = `transform:${seed}`;
        this.storeCloud(key, result.cloud);
        return key;
      }
      case 'generate': {
        const clouds = await this.api.generate(op.n, seed);
        let key = '';
        clouds.forEach((c, i) => {
          key = `gen:${seed}:${i}`;
          this.state.clouds.set(key, c);
        });
        this.state.displayed = `gen:${seed}:0`;
        this.emit();
        return `gen:${seed}:0`;
      }
    }
  }
}
