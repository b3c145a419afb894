/** Thin typed client for the study server API. */

export type Choice = 'real' | 'generated';

export interface NewSession {
  session_id: string;
  items: string[];
  n_items: number;
}

export interface SessionState {
  session_id: string;
  items: string[];
  n_items: number;
  responses: Record<string, Choice>;
}

export interface PostResult {
  recorded: boolean;
  choice: Choice;
  warning?: string;
}

export class ApiError extends Error {
  constructor(public status: number, public code: string, detail: string) {
    super(`${code}: ${detail}`);
  }
}

async function asJson<T>(res: Response): Promise<T> {
  const body = await res.json();
  if (!res.ok) {
    throw new ApiError(res.status, body.error ?? 'unknown', body.detail ?? '');
  }
  return body as T;
}

export class StudyApi {
  constructor(private base: string = '') {}

  async newSession(): Promise<NewSession> {
    return asJson(await fetch(`${this.base}/api/session`));
  }

  async sessionState(sessionId: string): Promise<SessionState> {
    return asJson(await fetch(`${this.base}/api/session/${sessionId}`));
  }

  itemUrl(itemId: string): string {
    return `${this.base}/api/items/${itemId}`;
  }

  async postResponse(sessionId: string, itemId: string, choice: Choice): Promise<PostResult> {
    const res = await fetch(`${this.base}/api/responses`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ session_id: sessionId, item_id: itemId, choice }),
    });
    return asJson(res);
  }

  /**
   * Fetch the final report as raw text. The export must be byte-identical
   * to the server body, so no JSON round-trip happens here.
   */
  async reportText(sessionId: string): Promise<string> {
    const res = await fetch(`${this.base}/api/report?session_id=${sessionId}`);
    if (!res.ok) {
      const body = await res.json();
      throw new ApiError(res.status, body.error ?? 'unknown', body.detail ?? '');
    }
    return res.text();
  }
}
