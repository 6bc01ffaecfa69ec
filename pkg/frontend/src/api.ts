/** Typed client for the shape-editing service. Every sampling request carries a
 * client-supplied seed, so any response can be reproduced by replaying it. */

export interface WireCloud {
  points: number[];
  labels: number[];
  m: number;
}

export interface WireTransform {
  shift: number[];
  scale: number[];
  present: boolean;
}

export interface SessionInfo {
  session_id: string;
  parts: string[];
  transforms: WireTransform[];
}

export interface Meta {
  class_id: string;
  m: number;
  part_names: string[];
  point_budget: number;
  connections: number[][];
  max_response_points: number;
}

export interface TransformResult {
  cloud: WireCloud;
  residual: number;
  converged: boolean;
}

export type ConstraintMap = Record<string, { shift?: (number | null)[]; scale?: (number | null)[] }>;

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (...a) => fetch(...a),
  ) {}

  private async request<T>(path: string, body?: unknown): Promise<T> {
    const init: RequestInit = body === undefined
      ? { method: 'GET' }
      : {
          method: 'POST',
          headers: { 'content-type': 'application/json' },
          body: JSON.stringify(body),
        };
    const resp = await this.fetchImpl(this.baseUrl + path, init);
    if (!resp.ok) {
      let detail = `${resp.status}`;
      try {
        const payload = await resp.json();
        detail = payload.detail ?? JSON.stringify(payload);
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  meta(): Promise<Meta> {
    return this.request<Meta>('/meta');
  }

  createSession(cloud: WireCloud): Promise<SessionInfo> {
    return this.request<SessionInfo>('/sessions', { cloud });
  }

  resample(sessionId: string, parts: number[], seed: number, pointsPerPart?: number): Promise<WireCloud> {
    return this.request<WireCloud>(`/sessions/${sessionId}/resample`, {
      parts,
      seed,
      points_per_part: pointsPerPart ?? null,
    });
  }

  mix(sessionId: string, donorSessionIds: string[], assignment: Record<string, number>, seed: number): Promise<WireCloud> {
    return this.request<WireCloud>(`/sessions/${sessionId}/mix`, {
      donor_session_ids: donorSessionIds,
      assignment,
      seed,
    });
  }

  interpolate(sessionId: string, part: number, targetSession: string, steps: number, seed: number): Promise<WireCloud[]> {
    return this.request<{ frames: WireCloud[] }>(`/sessions/${sessionId}/interpolate`, {
      part,
      target_session: targetSession,
      steps,
      seed,
    }).then((r) => r.frames);
  }

  transformEdit(sessionId: string, constraints: ConstraintMap, seed: number): Promise<TransformResult> {
    return this.request<TransformResult>(`/sessions/${sessionId}/transform`, {
      constraints,
      seed,
    });
  }

  generate(n: number, seed: number, pointsPerPart?: number): Promise<WireCloud[]> {
    return this.request<{ clouds: WireCloud[] }>('/generate', {
      n,
      seed,
      points_per_part: pointsPerPart ?? null,
    }).then((r) => r.clouds);
  }
}

export function validateCloud(cloud: WireCloud): string | null {
  if (cloud.points.length !== 3 * cloud.labels.length) {
    return 'points must hold exactly 3 numbers per label';
  }
  if (cloud.labels.some((l) => l < 0 || l >= cloud.m)) {
    return 'label out of range';
  }
  if (cloud.points.some((v) => !Number.isFinite(v))) {
    return 'non-finite coordinate';
  }
  return null;
}
