/**
 * Client-side session state. The server is the source of truth: the UI may
 * overwrite a choice locally, but the server keeps the first answer, and
 * every POST reconciles the local copy with the server's canonical choice.
 */

import { Choice, PostResult, StudyApi } from './api.js';

export interface RoundView {
  index: number; // 1-based
  itemId: string;
  imageUrl: string;
  choice: Choice | null;
}

export interface QueuedChoice {
  itemId: string;
  choice: Choice;
}

export class StudySession {
  readonly sessionId: string;
  readonly itemIds: string[];
  private choices = new Map<string, Choice>();
  private current = 1;
  /** Choices that failed to reach the server; retried via flushQueue. */
  readonly queue: QueuedChoice[] = [];

  constructor(private api: StudyApi, sessionId: string, itemIds: string[]) {
    if (itemIds.length === 0) throw new Error('session has no items');
    this.sessionId = sessionId;
    this.itemIds = itemIds;
  }

  static async start(api: StudyApi): Promise<StudySession> {
    const doc = await api.newSession();
    return new StudySession(api, doc.session_id, doc.items);
  }

  /** Rebuild from the server log, e.g. after a page refresh. */
  static async restore(api: StudyApi, sessionId: string): Promise<StudySession> {
    const doc = await api.sessionState(sessionId);
    const session = new StudySession(api, sessionId, doc.items);
    for (const [itemId, choice] of Object.entries(doc.responses)) {
      session.choices.set(itemId, choice);
    }
    return session;
  }

  get total(): number {
    return this.itemIds.length;
  }

  get answered(): number {
    return this.choices.size;
  }

  get complete(): boolean {
    return this.answered === this.total;
  }

  get remaining(): number {
    return this.total - this.answered;
  }

  get round(): number {
    return this.current;
  }

  view(index: number = this.current): RoundView {
    const clamped = this.clamp(index);
    const itemId = this.itemIds[clamped - 1];
    return {
      index: clamped,
      itemId,
      imageUrl: this.api.itemUrl(itemId),
      choice: this.choices.get(itemId) ?? null,
    };
  }

  private clamp(index: number): number {
    return Math.min(Math.max(index, 1), this.total);
  }

  navigate(direction: 'previous' | 'next'): RoundView {
    this.current = this.clamp(this.current + (direction === 'next' ? 1 : -1));
    return this.view();
  }

  goTo(index: number): RoundView {
    this.current = this.clamp(index);
    return this.view();
  }

  /**
   * Record a choice for the current round. Optimistic: the local state
   * updates immediately, then reconciles with the server's answer. On
   * network failure the choice is queued for retry and the optimistic
   * value stays visible.
   */
  async recordChoice(choice: Choice): Promise<RoundView> {
    const itemId = this.itemIds[this.current - 1];
    this.choices.set(itemId, choice);
    try {
      const result = await this.api.postResponse(this.sessionId, itemId, choice);
      this.reconcile(itemId, result);
    } catch (err) {
      if (err instanceof TypeError) {
        // fetch network failure: keep optimistic value, retry later
        this.queue.push({ itemId, choice });
      } else {
        throw err;
      }
    }
    return this.view();
  }

  private reconcile(itemId: string, result: PostResult): void {
    // recorded: false means an earlier answer exists server-side; show it.
    this.choices.set(itemId, result.choice);
  }

  /** Retry queued choices; returns the number still pending afterwards. */
  async flushQueue(): Promise<number> {
    const pending = this.queue.splice(0);
    for (const item of pending) {
      try {
        const result = await this.api.postResponse(this.sessionId, item.itemId, item.choice);
        this.reconcile(item.itemId, result);
      } catch (err) {
        if (err instanceof TypeError) {
          this.queue.push(item);
        } else {
          throw err;
        }
      }
    }
    return this.queue.length;
  }

  /** Raw report body from the server; only valid once complete. */
  async exportReport(): Promise<string> {
    if (!this.complete) {
      throw new Error(`${this.remaining} rounds unanswered`);
    }
    return this.api.reportText(this.sessionId);
  }
}
