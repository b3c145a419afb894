/** DOM wiring for the study interface. */

import { StudyApi, Choice } from './api.js';
import { StudySession } from './session.js';

const api = new StudyApi();
let session: StudySession;

const el = (id: string) => document.getElementById(id) as HTMLElement;

function render(): void {
  const view = session.view();
  (el('round-image') as HTMLImageElement).src = view.imageUrl;
  el('round-label').textContent = `Round ${view.index} / ${session.total}`;
  el('progress').textContent = `${session.answered} / ${session.total} answered`;
  (el('progress-bar') as HTMLProgressElement).value = session.answered;
  (el('progress-bar') as HTMLProgressElement).max = session.total;

  for (const choice of ['real', 'generated'] as Choice[]) {
    el(`choose-${choice}`).classList.toggle('selected', view.choice === choice);
  }

  const exportBtn = el('export') as HTMLButtonElement;
  exportBtn.disabled = !session.complete;
  exportBtn.title = session.complete
    ? 'Download your report'
    : `${session.remaining} rounds remaining`;

  el('retry-banner').hidden = session.queue.length === 0;
}

async function choose(choice: Choice): Promise<void> {
  await session.recordChoice(choice);
  render();
}

async function exportReport(): Promise<void> {
  const text = await session.exportReport();
  const blob = new Blob([text], { type: 'application/json' });
  const a = document.createElement('a');
  a.href = URL.createObjectURL(blob);
  a.download = `report-${session.sessionId}.json`;
  a.click();
  URL.revokeObjectURL(a.href);
}

async function init(): Promise<void> {
  const stored = window.sessionStorage.getItem('obidiff-session');
  if (stored) {
    try {
      session = await StudySession.restore(api, stored);
    } catch {
      window.sessionStorage.removeItem('obidiff-session');
    }
  }
  if (!session!) {
    session = await StudySession.start(api);
    window.sessionStorage.setItem('obidiff-session', session.sessionId);
  }

  el('choose-real').addEventListener('click', () => void choose('real'));
  el('choose-generated').addEventListener('click', () => void choose('generated'));
  el('prev').addEventListener('click', () => {
    session.navigate('previous');
    render();
  });
  el('next').addEventListener('click', () => {
    session.navigate('next');
    render();
  });
  el('export').addEventListener('click', () => void exportReport());
  el('retry').addEventListener('click', async () => {
    await session.flushQueue();
    render();
  });
  render();
}

void init();
