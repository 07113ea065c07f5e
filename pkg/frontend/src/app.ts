// DOM wiring for the drag-editing UI. All logic lives in the pure
// modules; this file only moves pixels and events around.

import { DragkitClient, type Pair, type SessionInfo, type StatusBody } from './api.js';
import { canvasToImage, imageToCanvas, type CanvasRect } from './coords.js';
import { maskToOverlay } from './overlay.js';
import { PairPlacement } from './pairs.js';
import { pollRun } from './polling.js';
import { sparklinePoints } from './sparkline.js';

interface UiSession {
  info: SessionInfo;
  image: ImageBitmap;
  placement: PairPlacement;
  showMask: boolean;
  showArrows: boolean;
  running: boolean;
  maskBitmap: ImageBitmap | null;
  resultBitmap: ImageBitmap | null;
  lastStatus: StatusBody | null;
}

const client = new DragkitClient('');
let session: UiSession | null = null;

const el = <T extends HTMLElement>(id: string): T => {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
};

const canvas = el<HTMLCanvasElement>('canvas');
const compare = el<HTMLInputElement>('compare');
const statusLine = el<HTMLSpanElement>('status');
const sparkline = el<SVGPolylineElement & HTMLElement>('sparkline');

function rectOf(node: HTMLElement): CanvasRect {
  const r = node.getBoundingClientRect();
  return { left: r.left, top: r.top, width: r.width, height: r.height };
}

async function decodeMask(bytes: ArrayBuffer, width: number, height: number): Promise<ImageBitmap> {
  const gray = await createImageBitmap(new Blob([bytes], { type: 'image/png' }));
  const scratch = document.createElement('canvas');
  scratch.width = width;
  scratch.height = height;
  const ctx = scratch.getContext('2d')!;
  ctx.drawImage(gray, 0, 0);
  const data = ctx.getImageData(0, 0, width, height);
  const values = new Uint8Array(width * height);
  for (let i = 0; i < values.length; i++) {
    values[i] = data.data[i * 4];
  }
  const rgba = maskToOverlay(values, width, height);
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), width, height), 0, 0);
  return createImageBitmap(scratch);
}

function draw(): void {
  if (!session) return;
  const { info } = session;
  canvas.width = info.width;
  canvas.height = info.height;
  const ctx = canvas.getContext('2d')!;
  ctx.clearRect(0, 0, info.width, info.height);

  const split = session.resultBitmap ? (Number(compare.value) / 100) * info.width : info.width;
  ctx.drawImage(session.image, 0, 0);
  if (session.resultBitmap) {
    ctx.save();
    ctx.beginPath();
    ctx.rect(split, 0, info.width - split, info.height);
    ctx.clip();
    ctx.drawImage(session.resultBitmap, 0, 0);
    ctx.restore();
    ctx.strokeStyle = '#ffffff';
    ctx.beginPath();
    ctx.moveTo(split, 0);
    ctx.lineTo(split, info.height);
    ctx.stroke();
  }
  if (session.showMask && session.maskBitmap) {
    ctx.drawImage(session.maskBitmap, 0, 0);
  }

  const rect: CanvasRect = { left: 0, top: 0, width: info.width, height: info.height };
  const marker = (p: { x: number; y: number }, color: string) => {
    const { cx, cy } = imageToCanvas(p, rect, info.width, info.height);
    ctx.fillStyle = color;
    ctx.beginPath();
    ctx.arc(cx, cy, 3, 0, 2 * Math.PI);
    ctx.fill();
  };
  for (const pair of session.placement.pairs) {
    marker(pair.handle, '#e53935');
    marker(pair.target, '#1e88e5');
    if (session.showArrows) {
      const a = imageToCanvas(pair.handle, rect, info.width, info.height);
      const b = imageToCanvas(pair.target, rect, info.width, info.height);
      ctx.strokeStyle = '#ffeb3b';
      ctx.beginPath();
      ctx.moveTo(a.cx, a.cy);
      ctx.lineTo(b.cx, b.cy);
      ctx.stroke();
    }
  }
  if (session.placement.pending) {
    marker(session.placement.pending, '#e53935');
  }
  // final tracked handles from the report, drawn where they ended up
  for (const [hx, hy] of session.lastStatus?.final_handles ?? []) {
    marker({ x: Math.round(hx), y: Math.round(hy) }, '#00e676');
  }
}

async function syncPairs(): Promise<void> {
  if (!session) return;
  await client.setPairs(session.info.id, session.placement.pairs);
  if (session.placement.pairs.length > 0) {
    const mask = await client.fetchMask(session.info.id);
    session.maskBitmap = await decodeMask(mask, session.info.width, session.info.height);
  } else {
    session.maskBitmap = null;
  }
  draw();
}

async function openSession(png: ArrayBuffer): Promise<void> {
  const info = await client.createSession(png);
  const image = await createImageBitmap(new Blob([png], { type: 'image/png' }));
  session = {
    info,
    image,
    placement: new PairPlacement(),
    showMask: true,
    showArrows: true,
    running: false,
    maskBitmap: null,
    resultBitmap: null,
    lastStatus: null,
  };
  compare.value = '50';
  statusLine.textContent = `session ${info.id.slice(0, 8)} (${info.width}x${info.height})`;
  draw();
}

function wire(): void {
  el<HTMLInputElement>('file').addEventListener('change', async (event) => {
    const input = event.target as HTMLInputElement;
    const file = input.files?.[0];
    if (file) {
      await openSession(await file.arrayBuffer());
    }
  });

  canvas.addEventListener('click', async (event) => {
    if (!session || session.running) return;
    const point = canvasToImage(
      event.clientX,
      event.clientY,
      rectOf(canvas),
      session.info.width,
      session.info.height,
    );
    if (!point) return; // outside clicks ignored
    const outcome = session.placement.click(point);
    draw();
    if (outcome === 'pair-completed') {
      await syncPairs();
    }
  });

  el<HTMLButtonElement>('undo').addEventListener('click', async () => {
    if (session?.placement.undo()) {
      await syncPairs();
    }
  });

  el<HTMLInputElement>('toggle-mask').addEventListener('change', (event) => {
    if (session) {
      session.showMask = (event.target as HTMLInputElement).checked;
      draw();
    }
  });

  el<HTMLInputElement>('toggle-arrows').addEventListener('change', (event) => {
    if (session) {
      session.showArrows = (event.target as HTMLInputElement).checked;
      draw();
    }
  });

  compare.addEventListener('input', draw);

  el<HTMLButtonElement>('run').addEventListener('click', async () => {
    if (!session || session.running || session.placement.completeCount === 0) return;
    session.running = true;
    statusLine.textContent = 'running';
    const losses: number[] = [];
    try {
      await client.run(session.info.id);
      const status = await pollRun(client, session.info.id, (update) => {
        for (const row of update.losses ?? []) {
          losses.push(row.total);
        }
        sparkline.setAttribute('points', sparklinePoints(losses.slice(-120), 160, 36));
      }).done;
      const result = await client.fetchResult(session.info.id);
      session.resultBitmap = await createImageBitmap(new Blob([result], { type: 'image/png' }));
      session.lastStatus = status;
      statusLine.textContent = `done, MD ${status.mean_distance?.toFixed(2)}`;
    } catch (err) {
      statusLine.textContent = `error: ${(err as Error).message}`; // session preserved
    } finally {
      session.running = false;
      draw();
    }
  });

  el<HTMLButtonElement>('continue').addEventListener('click', async () => {
    // seed a fresh session from the edited image
    if (!session?.resultBitmap) return;
    const scratch = document.createElement('canvas');
    scratch.width = session.info.width;
    scratch.height = session.info.height;
    scratch.getContext('2d')!.drawImage(session.resultBitmap, 0, 0);
    const blob: Blob = await new Promise((resolve) =>
      scratch.toBlob((b) => resolve(b!), 'image/png'),
    );
    await openSession(await blob.arrayBuffer());
  });
}

wire();
