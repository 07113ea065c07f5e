// Poll a running session until it reaches a terminal state.

import type { DragkitClient, StatusBody } from './api.js';

export interface PollHandle {
  done: Promise<StatusBody>;
  cancel: () => void;
}

export function pollRun(
  client: DragkitClient,
  sessionId: string,
  onUpdate?: (status: StatusBody) => void,
  intervalMs = 500,
): PollHandle {
  let timer: ReturnType<typeof setInterval> | null = null;
  const done = new Promise<StatusBody>((resolve, reject) => {
    const tick = async () => {
      try {
        const status = await client.getStatus(sessionId);
        onUpdate?.(status);
        if (status.status === 'done') {
          stop();
          resolve(status);
        } else if (status.status === 'failed') {
          stop();
          reject(new Error(status.error ?? 'edit failed'));
        }
      } catch (err) {
        stop();
        reject(err);
      }
    };
    timer = setInterval(tick, intervalMs);
    void tick();
  });
  const stop = () => {
    if (timer !== null) {
      clearInterval(timer);
      timer = null;
    }
  };
  return { done, cancel: stop };
}
