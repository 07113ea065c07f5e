// Typed client for the dragkit session API. The UI never computes masks
// or edits locally; every artifact comes from these endpoints.

export interface Point {
  x: number;
  y: number;
}

export interface Pair {
  handle: Point;
  target: Point;
}

export interface SessionInfo {
  id: string;
  width: number;
  height: number;
}

export interface LossRow {
  step: number;
  drag: number;
  motion: number;
  readout: number;
  total: number;
}

export interface StatusBody {
  status: 'idle' | 'running' | 'done' | 'failed';
  error: string | null;
  mean_distance?: number;
  converged?: boolean;
  final_handles?: [number, number][];
  losses?: LossRow[];
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function expectOk(response: Response): Promise<Response> {
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = await response.json();
      detail = body.error ?? JSON.stringify(body);
    } catch {
      // non-JSON error body; keep statusText
    }
    throw new ApiError(response.status, detail);
  }
  return response;
}

export class DragkitClient {
  constructor(private baseUrl: string, private fetchFn: typeof fetch = fetch) {}

  async createSession(imagePng: ArrayBuffer | Uint8Array): Promise<SessionInfo> {
    const response = await expectOk(
      await this.fetchFn(`${this.baseUrl}/sessions`, {
        method: 'POST',
        headers: { 'content-type': 'image/png' },
        body: imagePng as BodyInit,
      }),
    );
    return response.json();
  }

  async setPairs(sessionId: string, pairs: Pair[]): Promise<number> {
    const body = {
      pairs: pairs.map((p) => ({
        handle: [p.handle.x, p.handle.y],
        target: [p.target.x, p.target.y],
      })),
    };
    const response = await expectOk(
      await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/pairs`, {
        method: 'POST',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify(body),
      }),
    );
    return (await response.json()).count;
  }

  async fetchMask(sessionId: string): Promise<ArrayBuffer> {
    const response = await expectOk(
      await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/mask`),
    );
    return response.arrayBuffer();
  }

  async run(sessionId: string): Promise<void> {
    await expectOk(
      await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/run`, { method: 'POST' }),
    );
  }

  async getStatus(sessionId: string): Promise<StatusBody> {
    const response = await expectOk(
      await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/status`),
    );
    return response.json();
  }

  async fetchResult(sessionId: string): Promise<ArrayBuffer> {
    const response = await expectOk(
      await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}/result`),
    );
    return response.arrayBuffer();
  }

  async deleteSession(sessionId: string): Promise<void> {
    await expectOk(
      await this.fetchFn(`${this.baseUrl}/sessions/${sessionId}`, { method: 'DELETE' }),
    );
  }
}
