// Canvas <-> image pixel mapping. Clicks land on exact integer image
// pixels regardless of CSS scaling or device pixel ratio: a click inside
// pixel (x, y)'s displayed square maps to (x, y).

import type { Point } from './api.js';

export interface CanvasRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

export function canvasToImage(
  clientX: number,
  clientY: number,
  rect: CanvasRect,
  imageWidth: number,
  imageHeight: number,
): Point | null {
  const fx = (clientX - rect.left) / rect.width;
  const fy = (clientY - rect.top) / rect.height;
  if (fx < 0 || fx >= 1 || fy < 0 || fy >= 1) {
    return null; // outside the canvas: ignored
  }
  const x = Math.min(Math.floor(fx * imageWidth), imageWidth - 1);
  const y = Math.min(Math.floor(fy * imageHeight), imageHeight - 1);
  return { x, y };
}

export function imageToCanvas(
  point: Point,
  rect: CanvasRect,
  imageWidth: number,
  imageHeight: number,
): { cx: number; cy: number } {
  // center of the pixel's displayed square
  return {
    cx: rect.left + ((point.x + 0.5) / imageWidth) * rect.width,
    cy: rect.top + ((point.y + 0.5) / imageHeight) * rect.height,
  };
}
